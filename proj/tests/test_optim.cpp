#include <doctest.h>

#include <cmath>
#include <limits>

#include "mae3d/nn.hpp"
#include "mae3d/optim.hpp"

using namespace mae3d;

TEST_CASE("cosine_lr endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 1e-4) == doctest::Approx(1e-4));
  CHECK(cosine_lr(100, 100, 1e-4) == doctest::Approx(0.0));
  CHECK(cosine_lr(50, 100, 1e-4, 0.0) == doctest::Approx(5e-5));
  CHECK(cosine_lr(50, 100, 1e-4, 2e-5) == doctest::Approx(6e-5));
  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-4), std::invalid_argument);
  CHECK_THROWS_AS(cosine_lr(11, 10, 1e-4), std::invalid_argument);
}

TEST_CASE("adam leaves parameter unchanged on zero gradient") {
  ParamStore<double> store;
  auto p = store.add("p", {3}, {1.0, -2.0, 0.5});
  Adam<double> opt(store);
  p.zero_grad();
  opt.step(0.1);
  CHECK(p.value()[0] == doctest::Approx(1.0));
  CHECK(p.value()[1] == doctest::Approx(-2.0));
  CHECK(p.value()[2] == doctest::Approx(0.5));
}

TEST_CASE("adam single step hand-computed") {
  // p=1, g=1, lr=0.1, betas (0.9, 0.999), eps 1e-8, wd 0:
  // m=0.1 -> mhat=1; v=0.001 -> vhat=1; p' = 1 - 0.1*1/(1+1e-8) ~ 0.9
  ParamStore<double> store;
  auto p = store.add("p", {1}, {1.0});
  Adam<double> opt(store);
  p.grad()[0] = 1.0;
  opt.step(0.1);
  CHECK(p.value()[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("adam decoupled weight decay shrinks parameter directly") {
  ParamStore<double> store;
  auto p = store.add("p", {1}, {2.0});
  Adam<double>::Hyper hp;
  hp.weight_decay = 0.5;
  Adam<double> opt(store, hp);
  p.zero_grad();  // zero gradient: only decay acts
  opt.step(0.1);
  CHECK(p.value()[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
}

TEST_CASE("adam minimizes a convex quadratic monotonically after warm-up") {
  ParamStore<double> store;
  auto p = store.add("p", {1}, {5.0});
  Adam<double> opt(store);
  auto loss_value = [&] { return (p.value()[0] - 1.0) * (p.value()[0] - 1.0); };
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 100; ++step) {
    p.zero_grad();
    p.grad()[0] = 2.0 * (p.value()[0] - 1.0);
    opt.step(0.05);
    if (step >= 5) {
      CHECK(loss_value() <= prev + 1e-12);
    }
    prev = loss_value();
  }
  CHECK(loss_value() < 1.0);
}

TEST_CASE("adam rejects non-finite gradient naming the parameter") {
  ParamStore<double> store;
  auto p = store.add("weights.q", {1}, {1.0});
  Adam<double> opt(store);
  p.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(opt.step(0.1), doctest::Contains("weights.q"), std::runtime_error);
}
