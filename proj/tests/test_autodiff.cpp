#include <doctest.h>

#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "mae3d/nn.hpp"
#include "mae3d/tensor.hpp"

using namespace mae3d;
using mae3d::testing::fd_check;
using mae3d::testing::random_tensor;

TEST_CASE("softmax of zeros is uniform") {
  auto x = Tensor<double>::constant({1, 4}, {0, 0, 0, 0});
  auto y = softmax_last(x);
  for (double v : y.value()) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("layernorm of constant vector is zero") {
  auto x = Tensor<double>::constant({1, 5}, std::vector<double>(5, 3.7));
  auto g = Tensor<double>::constant({5}, std::vector<double>(5, 1.0));
  auto s = Tensor<double>::constant({5}, std::vector<double>(5, 0.0));
  auto y = layer_norm(x, g, s);
  for (double v : y.value()) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("matmul by identity preserves input") {
  Rng rng(1);
  auto x = random_tensor({3, 3}, rng, false);
  std::vector<double> eye(9, 0.0);
  eye[0] = eye[4] = eye[8] = 1.0;
  auto i = Tensor<double>::constant({3, 3}, eye);
  auto y = matmul(x, i);
  for (std::size_t k = 0; k < 9; ++k) CHECK(y.value()[k] == doctest::Approx(x.value()[k]));
}

TEST_CASE("matmul reports both shapes on mismatch") {
  Rng rng(1);
  auto a = random_tensor({2, 3}, rng, false);
  auto b = random_tensor({4, 2}, rng, false);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2,3]"), std::invalid_argument);
}

TEST_CASE("backward of sum is ones") {
  Rng rng(2);
  auto x = random_tensor({4, 3}, rng, true, "x");
  backward(sum_all(x));
  for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward of sum of squares is 2x") {
  Rng rng(3);
  auto x = random_tensor({5}, rng, true, "x");
  backward(sum_all(mul(x, x)));
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0 * x.value()[i]));
}

TEST_CASE("backward rejects non-scalar loss") {
  Rng rng(4);
  auto x = random_tensor({2, 2}, rng);
  CHECK_THROWS_AS(backward(mul(x, x)), std::invalid_argument);
}

TEST_CASE("fan-out gradients sum across paths") {
  auto x = Tensor<double>::param({1}, {3.0}, "x");
  // loss = x*x + 2x uses x in two places: dloss/dx = 2x + 2 = 8
  auto loss = add(sum_all(mul(x, x)), sum_all(scale(x, 2.0)));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("finite differences: elementwise and matmul ops") {
  Rng rng(10);
  auto a = random_tensor({3, 4}, rng, true, "a");
  auto b = random_tensor({4, 5}, rng, true, "b");
  fd_check({a, b}, [&] { return sum_all(mul(matmul(a, b), matmul(a, b))); });

  auto c = random_tensor({3, 4}, rng, true, "c");
  fd_check({a, c}, [&] { return sum_all(mul(add(a, c), sub(a, c))); });
}

TEST_CASE("finite differences: activations") {
  Rng rng(11);
  // keep relu inputs away from the kink
  auto x = random_tensor({4, 4}, rng, true, "x");
  for (auto& v : x.value())
    if (std::abs(v) < 0.05) v += 0.1;
  fd_check({x}, [&] { return sum_all(mul(relu(x), relu(x))); });
  fd_check({x}, [&] { return sum_all(mul(gelu(x), gelu(x))); });
}

TEST_CASE("finite differences: softmax and layer norm") {
  Rng rng(12);
  auto x = random_tensor({3, 6}, rng, true, "x");
  auto w = random_tensor({3, 6}, rng, false);
  fd_check({x}, [&] { return sum_all(mul(softmax_last(x), w)); });

  auto g = random_tensor({6}, rng, true, "g");
  auto s = random_tensor({6}, rng, true, "s");
  fd_check({x, g, s}, [&] { return sum_all(mul(layer_norm(x, g, s), w)); });
}

TEST_CASE("finite differences: shape ops") {
  Rng rng(13);
  auto x = random_tensor({4, 6}, rng, true, "x");
  auto w = random_tensor({24}, rng, false);
  fd_check({x}, [&] { return sum_all(mul(reshape(x, {24}), w)); });
  auto wt = random_tensor({6, 4}, rng, false);
  fd_check({x}, [&] { return sum_all(mul(transpose2d(x), wt)); });

  auto y = random_tensor({2, 6}, rng, true, "y");
  auto wc = random_tensor({6, 6}, rng, false);
  fd_check({x, y}, [&] { return sum_all(mul(concat<double>({x, y}, 0), wc)); });
  auto wcc = random_tensor({4, 12}, rng, false);
  auto x2 = random_tensor({4, 6}, rng, true, "x2");
  fd_check({x, x2}, [&] { return sum_all(mul(concat<double>({x, x2}, 1), wcc)); });

  auto ws = random_tensor({2, 3}, rng, false);
  fd_check({x}, [&] { return sum_all(mul(slice_rows(slice_cols(x, 1, 4), 1, 3), ws)); });

  std::vector<std::size_t> idx{2, 0, 2, 3};
  auto wg = random_tensor({4, 6}, rng, false);
  fd_check({x}, [&] { return sum_all(mul(gather_rows(x, idx), wg)); });

  auto wr = random_tensor({12, 6}, rng, false);
  fd_check({x}, [&] { return sum_all(mul(repeat_interleave_rows(x, 3), wr)); });
  fd_check({x}, [&] { return sum_all(mul(tile_rows(x, 3), wr)); });

  auto v = random_tensor({6}, rng, true, "v");
  auto wa = random_tensor({4, 6}, rng, false);
  fd_check({x, v}, [&] { return sum_all(mul(add_rowvec(x, v), wa)); });
}

TEST_CASE("finite differences: reductions at non-tied maxima") {
  Rng rng(14);
  auto x = random_tensor({3, 4, 5}, rng, true, "x");
  auto w1 = random_tensor({3, 5}, rng, false);
  fd_check({x}, [&] { return sum_all(mul(reduce_max(x, 1), w1)); });
  auto w2 = random_tensor({4, 5}, rng, false);
  fd_check({x}, [&] { return sum_all(mul(reduce_mean(x, 0), w2)); });
}

TEST_CASE("finite differences: cross entropy") {
  Rng rng(15);
  auto logits = random_tensor({4, 3}, rng, true, "logits");
  std::vector<int> labels{0, 2, 1, 2};
  fd_check({logits}, [&] { return cross_entropy(logits, labels); });
}

TEST_CASE("finite differences: chamfer away from ties") {
  Rng rng(16);
  auto a = random_tensor({6, 3}, rng, true, "a");
  auto b = random_tensor({8, 3}, rng, true, "b");
  fd_check({a, b}, [&] { return chamfer(a, b); }, 1e-4, 1e-3);
}

TEST_CASE("chamfer op value matches analytic case") {
  auto a = Tensor<double>::constant({1, 3}, {0, 0, 0});
  auto b = Tensor<double>::constant({1, 3}, {1, 0, 0});
  CHECK(chamfer(a, b).item() == doctest::Approx(2.0));
}

TEST_CASE("dropout inference is identity, train preserves expectation") {
  Rng rng(20);
  auto x = Tensor<double>::constant({100, 10}, std::vector<double>(1000, 1.0));
  Rng eval_rng(1);
  auto y = dropout(x, 0.5, eval_rng, false);
  CHECK(y.value() == x.value());

  Rng train_rng(2);
  auto z = dropout(x, 0.5, train_rng, true);
  double mean = 0.0;
  for (double v : z.value()) mean += v;
  mean /= 1000.0;
  CHECK(mean == doctest::Approx(1.0).epsilon(0.1));  // inverted scaling
  for (double v : z.value()) CHECK((v == 0.0 || v == doctest::Approx(2.0)));
}

TEST_CASE("dropout backward uses the recorded mask") {
  auto x = Tensor<double>::param({1, 64}, std::vector<double>(64, 1.0), "x");
  Rng rng(3);
  auto y = dropout(x, 0.5, rng, true);
  backward(sum_all(y));
  for (std::size_t i = 0; i < 64; ++i)
    CHECK(x.grad()[i] == doctest::Approx(y.value()[i]));  // mask value = 0 or 2
}

TEST_CASE("fixed seed gives bit-identical forward/backward") {
  auto run = [] {
    Rng rng(77);
    ParamStore<double> store;
    Linear<double> l1(store, "l1", 4, 8, rng);
    Linear<double> l2(store, "l2", 8, 2, rng);
    auto x = Tensor<double>::constant({3, 4}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0,
                                               1.1, 1.2});
    Rng drop_rng(5);
    auto y = l2(dropout(relu(l1(x)), 0.3, drop_rng, true));
    auto loss = sum_all(mul(y, y));
    store.zero_grad();
    backward(loss);
    std::vector<double> out{loss.item()};
    for (auto& p : store.all())
      out.insert(out.end(), p.grad().begin(), p.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("finite differences: 3-layer MLP with chamfer loss") {
  Rng rng(30);
  ParamStore<double> store;
  Linear<double> l1(store, "l1", 3, 16, rng);
  Linear<double> l2(store, "l2", 16, 16, rng);
  Linear<double> l3(store, "l3", 16, 3, rng);
  auto x = random_tensor({10, 3}, rng, false);
  auto target = random_tensor({12, 3}, rng, false);
  auto build = [&] { return chamfer(l3(gelu(l2(gelu(l1(x))))), target); };
  fd_check(store.all(), build, 1e-4, 1e-4, 16);
}

TEST_CASE("frozen tensors receive no gradient") {
  Rng rng(31);
  auto x = random_tensor({3, 3}, rng, true, "x");
  auto frozen = random_tensor({3, 3}, rng, false);
  auto loss = sum_all(mul(matmul(x, frozen), matmul(x, frozen)));
  backward(loss);
  CHECK(x.has_grad());
  CHECK_FALSE(Tensor<double>(frozen).has_grad());
}
