#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mae3d/rng.hpp"

namespace mae3d {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream oss;
  oss << "[";
  for (std::size_t i = 0; i < s.size(); ++i) oss << (i ? "," : "") << s[i];
  oss << "]";
  return oss.str();
}

/// Global FLOP tally for matmuls; used to verify encoder asymmetry.
inline std::uint64_t& flop_counter() {
  static thread_local std::uint64_t count = 0;
  return count;
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::string name;  // nonempty for parameters
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backprop;

  std::size_t size() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

/// Value-semantics handle to a node in the reverse-mode graph.
template <typename T>
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_data(std::move(shape), {}, /*fill_zero=*/true);
  }

  static Tensor constant(Shape shape, std::vector<T> data) {
    auto t = from_data(std::move(shape), std::move(data), false);
    return t;
  }

  static Tensor scalar(T v) { return constant({1}, {v}); }

  static Tensor param(Shape shape, std::vector<T> data, std::string name) {
    auto t = from_data(std::move(shape), std::move(data), false);
    t.node_->requires_grad = true;
    t.node_->name = std::move(name);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }
  std::vector<T>& value() { return node_->value; }
  const std::vector<T>& value() const { return node_->value; }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  T item() const {
    if (size() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return node_->value[0];
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<TensorNode<T>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

private:
  static Tensor from_data(Shape shape, std::vector<T> data, bool fill_zero) {
    const std::size_t n = shape_numel(shape);
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    if (fill_zero) {
      node->value.assign(n, T(0));
    } else {
      if (data.size() != n)
        throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(node->shape));
      node->value = std::move(data);
    }
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <typename T>
std::shared_ptr<TensorNode<T>> make_result(Shape shape,
                                           std::vector<std::shared_ptr<TensorNode<T>>> parents) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value.assign(shape_numel(node->shape), T(0));
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  node->requires_grad = rg;
  if (rg) node->parents = std::move(parents);
  return node;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

template <typename T>
using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<EigenMat<T>> as_matrix(std::vector<T>& v, std::size_t r, std::size_t c) {
  return Eigen::Map<EigenMat<T>>(v.data(), static_cast<Eigen::Index>(r),
                                 static_cast<Eigen::Index>(c));
}

template <typename T>
Eigen::Map<const EigenMat<T>> as_matrix(const std::vector<T>& v, std::size_t r, std::size_t c) {
  return Eigen::Map<const EigenMat<T>>(v.data(), static_cast<Eigen::Index>(r),
                                       static_cast<Eigen::Index>(c));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Reverse-topological gradient accumulation from a scalar loss.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  auto root = loss.node();
  if (!root->requires_grad) return;

  // iterative post-order DFS
  std::vector<std::shared_ptr<TensorNode<T>>> topo;
  std::unordered_set<TensorNode<T>*> visited;
  std::vector<std::pair<std::shared_ptr<TensorNode<T>>, std::size_t>> stack;
  stack.push_back({root, 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    if (child < node->parents.size()) {
      auto next = node->parents[child++];
      if (next->requires_grad && visited.insert(next.get()).second)
        stack.push_back({next, 0});
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  for (auto& n : topo) n->ensure_grad();
  root->grad[0] = T(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

// ---------------------------------------------------------------------------
// elementwise / linear algebra ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  auto node = detail::make_result<T>({m, n}, {a.node(), b.node()});
  detail::as_matrix(node->value, m, n).noalias() =
      detail::as_matrix(a.value(), m, k) * detail::as_matrix(b.value(), k, n);
  flop_counter() += 2ull * m * n * k;
  if (node->requires_grad) {
    auto an = a.node(), bn = b.node();
    node->backprop = [an, bn, m, k, n](TensorNode<T>& self) {
      auto g = detail::as_matrix(self.grad, m, n);
      if (an->requires_grad) {
        an->ensure_grad();
        detail::as_matrix(an->grad, m, k).noalias() +=
            g * detail::as_matrix(bn->value, k, n).transpose();
        flop_counter() += 2ull * m * n * k;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::as_matrix(bn->grad, k, n).noalias() +=
            detail::as_matrix(an->value, m, k).transpose() * g;
        flop_counter() += 2ull * m * n * k;
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto node = detail::make_result<T>(a.shape(), {a.node(), b.node()});
  for (std::size_t i = 0; i < node->size(); ++i) node->value[i] = a.value()[i] + b.value()[i];
  if (node->requires_grad) {
    auto an = a.node(), bn = b.node();
    node->backprop = [an, bn](TensorNode<T>& self) {
      for (auto* p : {an.get(), bn.get()}) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i) p->grad[i] += self.grad[i];
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto node = detail::make_result<T>(a.shape(), {a.node(), b.node()});
  for (std::size_t i = 0; i < node->size(); ++i) node->value[i] = a.value()[i] - b.value()[i];
  if (node->requires_grad) {
    auto an = a.node(), bn = b.node();
    node->backprop = [an, bn](TensorNode<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i) bn->grad[i] -= self.grad[i];
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto node = detail::make_result<T>(a.shape(), {a.node(), b.node()});
  for (std::size_t i = 0; i < node->size(); ++i) node->value[i] = a.value()[i] * b.value()[i];
  if (node->requires_grad) {
    auto an = a.node(), bn = b.node();
    node->backprop = [an, bn](TensorNode<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  auto node = detail::make_result<T>(a.shape(), {a.node()});
  for (std::size_t i = 0; i < node->size(); ++i) node->value[i] = a.value()[i] * c;
  if (node->requires_grad) {
    auto an = a.node();
    node->backprop = [an, c](TensorNode<T>& self) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.size(); ++i) an->grad[i] += self.grad[i] * c;
    };
  }
  return Tensor<T>::wrap(node);
}

/// Broadcast-add a length-n vector (bias) to every row of an [m,n] matrix.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.shape().size() != 2 || v.size() != x.cols())
    throw std::invalid_argument("add_rowvec: shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(v.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  auto node = detail::make_result<T>(x.shape(), {x.node(), v.node()});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) node->value[r * n + c] = x.value()[r * n + c] + v.value()[c];
  if (node->requires_grad) {
    auto xn = x.node(), vn = v.node();
    node->backprop = [xn, vn, m, n](TensorNode<T>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i) xn->grad[i] += self.grad[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) vn->grad[c] += self.grad[r * n + c];
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto node = detail::make_result<T>(x.shape(), {x.node()});
  for (std::size_t i = 0; i < node->size(); ++i)
    node->value[i] = x.value()[i] > T(0) ? x.value()[i] : T(0);
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.size(); ++i)
        if (xn->value[i] > T(0)) xn->grad[i] += self.grad[i];
    };
  }
  return Tensor<T>::wrap(node);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  auto node = detail::make_result<T>(x.shape(), {x.node()});
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  for (std::size_t i = 0; i < node->size(); ++i) {
    const double v = static_cast<double>(x.value()[i]);
    node->value[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.size(); ++i) {
        const double v = static_cast<double>(xn->value[i]);
        const double d =
            0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
        xn->grad[i] += self.grad[i] * static_cast<T>(d);
      }
    };
  }
  return Tensor<T>::wrap(node);
}

/// Row-wise softmax over the last axis.
template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  if (x.shape().empty()) throw std::invalid_argument("softmax_last: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  auto node = detail::make_result<T>(x.shape(), {x.node()});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().data() + r * n;
    T* out = node->value.data() + r * n;
    T mx = in[0];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, in[c]);
    T sum = T(0);
    for (std::size_t c = 0; c < n; ++c) {
      out[c] = std::exp(in[c] - mx);
      sum += out[c];
    }
    const T inv = T(1) / sum;
    for (std::size_t c = 0; c < n; ++c) out[c] *= inv;
  }
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn, rows, n](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.value.data() + r * n;
        const T* gy = self.grad.data() + r * n;
        T dot = T(0);
        for (std::size_t c = 0; c < n; ++c) dot += y[c] * gy[c];
        T* gx = xn->grad.data() + r * n;
        for (std::size_t c = 0; c < n; ++c) gx[c] += y[c] * (gy[c] - dot);
      }
    };
  }
  return Tensor<T>::wrap(node);
}

/// Layer normalization over the last axis with learnable scale and shift.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                     T eps = T(1e-5)) {
  const std::size_t n = x.shape().back();
  if (gain.size() != n || shift.size() != n)
    throw std::invalid_argument("layer_norm: scale/shift shape mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(gain.shape()));
  const std::size_t rows = x.size() / n;
  auto node = detail::make_result<T>(x.shape(), {x.node(), gain.node(), shift.node()});
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().data() + r * n;
    T mean = T(0);
    for (std::size_t c = 0; c < n; ++c) mean += in[c];
    mean /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t c = 0; c < n; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<T>(n);
    const T istd = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = istd;
    T* xh = xhat->data() + r * n;
    T* out = node->value.data() + r * n;
    for (std::size_t c = 0; c < n; ++c) {
      xh[c] = (in[c] - mean) * istd;
      out[c] = gain.value()[c] * xh[c] + shift.value()[c];
    }
  }
  if (node->requires_grad) {
    auto xn = x.node(), gn = gain.node(), sn = shift.node();
    node->backprop = [xn, gn, sn, xhat, inv_std, rows, n](TensorNode<T>& self) {
      if (gn->requires_grad) gn->ensure_grad();
      if (sn->requires_grad) sn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gy = self.grad.data() + r * n;
        const T* xh = xhat->data() + r * n;
        if (gn->requires_grad || sn->requires_grad) {
          for (std::size_t c = 0; c < n; ++c) {
            if (gn->requires_grad) gn->grad[c] += gy[c] * xh[c];
            if (sn->requires_grad) sn->grad[c] += gy[c];
          }
        }
        if (xn->requires_grad) {
          T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
          for (std::size_t c = 0; c < n; ++c) {
            const T dxhat = gy[c] * gn->value[c];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xh[c];
          }
          mean_dxhat /= static_cast<T>(n);
          mean_dxhat_xhat /= static_cast<T>(n);
          T* gx = xn->grad.data() + r * n;
          const T istd = (*inv_std)[r];
          for (std::size_t c = 0; c < n; ++c) {
            const T dxhat = gy[c] * gn->value[c];
            gx[c] += istd * (dxhat - mean_dxhat - xh[c] * mean_dxhat_xhat);
          }
        }
      }
    };
  }
  return Tensor<T>::wrap(node);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size())
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(new_shape));
  auto node = detail::make_result<T>(std::move(new_shape), {x.node()});
  node->value = x.value();
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.size(); ++i) xn->grad[i] += self.grad[i];
    };
  }
  return Tensor<T>::wrap(node);
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  if (x.shape().size() != 2) throw std::invalid_argument("transpose2d: rank must be 2");
  const std::size_t m = x.rows(), n = x.cols();
  auto node = detail::make_result<T>({n, m}, {x.node()});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) node->value[c * m + r] = x.value()[r * n + c];
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn, m, n](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) xn->grad[r * n + c] += self.grad[c * m + r];
    };
  }
  return Tensor<T>::wrap(node);
}

/// Concatenate tensors of equal rank along the given axis.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& base = parts[0].shape();
  if (axis >= base.size()) throw std::invalid_argument("concat: axis out of range");
  Shape out_shape = base;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != base.size())
      throw std::invalid_argument("concat: rank mismatch " + shape_str(base) + " vs " +
                                  shape_str(s));
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != base[d])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(base) + " vs " +
                                    shape_str(s));
    out_shape[axis] += s[axis];
  }
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  auto node = detail::make_result<T>(out_shape, parents);

  const std::size_t outer =
      std::accumulate(base.begin(), base.begin() + static_cast<std::ptrdiff_t>(axis),
                      std::size_t{1}, std::multiplies<>());
  const std::size_t inner =
      std::accumulate(base.begin() + static_cast<std::ptrdiff_t>(axis) + 1, base.end(),
                      std::size_t{1}, std::multiplies<>());
  const std::size_t out_axis = out_shape[axis];

  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t a = p.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = p.value().data() + o * a * inner;
      T* dst = node->value.data() + (o * out_axis + offset) * inner;
      std::copy(src, src + a * inner, dst);
    }
    offset += a;
  }
  if (node->requires_grad) {
    auto parts_nodes = parents;
    std::vector<std::size_t> axes;
    for (const auto& p : parts) axes.push_back(p.shape()[axis]);
    node->backprop = [parts_nodes, offsets, axes, outer, inner, out_axis](TensorNode<T>& self) {
      for (std::size_t k = 0; k < parts_nodes.size(); ++k) {
        auto& p = parts_nodes[k];
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = self.grad.data() + (o * out_axis + offsets[k]) * inner;
          T* dst = p->grad.data() + o * axes[k] * inner;
          for (std::size_t i = 0; i < axes[k] * inner; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t r0, std::size_t r1) {
  if (x.shape().size() != 2 || r1 > x.rows() || r0 > r1)
    throw std::invalid_argument("slice_rows: bad range");
  const std::size_t n = x.cols(), m = r1 - r0;
  auto node = detail::make_result<T>({m, n}, {x.node()});
  std::copy(x.value().begin() + static_cast<std::ptrdiff_t>(r0 * n),
            x.value().begin() + static_cast<std::ptrdiff_t>(r1 * n), node->value.begin());
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn, r0, m, n](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < m * n; ++i) xn->grad[r0 * n + i] += self.grad[i];
    };
  }
  return Tensor<T>::wrap(node);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
  if (x.shape().size() != 2 || c1 > x.cols() || c0 > c1)
    throw std::invalid_argument("slice_cols: bad range");
  const std::size_t m = x.rows(), n = x.cols(), w = c1 - c0;
  auto node = detail::make_result<T>({m, w}, {x.node()});
  for (std::size_t r = 0; r < m; ++r)
    std::copy(x.value().begin() + static_cast<std::ptrdiff_t>(r * n + c0),
              x.value().begin() + static_cast<std::ptrdiff_t>(r * n + c1),
              node->value.begin() + static_cast<std::ptrdiff_t>(r * w));
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn, c0, m, n, w](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < w; ++c) xn->grad[r * n + c0 + c] += self.grad[r * w + c];
    };
  }
  return Tensor<T>::wrap(node);
}

/// Select rows by index (duplicates allowed); backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  if (x.shape().size() != 2) throw std::invalid_argument("gather_rows: rank must be 2");
  const std::size_t n = x.cols();
  auto node = detail::make_result<T>({idx.size(), n}, {x.node()});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= x.rows()) throw std::invalid_argument("gather_rows: index out of range");
    std::copy_n(x.value().begin() + static_cast<std::ptrdiff_t>(idx[r] * n), n,
                node->value.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn, idx, n](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < n; ++c) xn->grad[idx[r] * n + c] += self.grad[r * n + c];
    };
  }
  return Tensor<T>::wrap(node);
}

/// Repeat each row k consecutive times: [m,n] -> [m*k,n].
template <typename T>
Tensor<T> repeat_interleave_rows(const Tensor<T>& x, std::size_t k) {
  const std::size_t m = x.rows(), n = x.cols();
  auto node = detail::make_result<T>({m * k, n}, {x.node()});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(x.value().begin() + static_cast<std::ptrdiff_t>(r * n), n,
                  node->value.begin() + static_cast<std::ptrdiff_t>((r * k + j) * n));
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn, m, n, k](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t c = 0; c < n; ++c)
            xn->grad[r * n + c] += self.grad[(r * k + j) * n + c];
    };
  }
  return Tensor<T>::wrap(node);
}

/// Tile the whole matrix `reps` times along rows: [m,n] -> [m*reps,n].
template <typename T>
Tensor<T> tile_rows(const Tensor<T>& x, std::size_t reps) {
  const std::size_t m = x.rows(), n = x.cols();
  auto node = detail::make_result<T>({m * reps, n}, {x.node()});
  for (std::size_t t = 0; t < reps; ++t)
    std::copy_n(x.value().begin(), m * n,
                node->value.begin() + static_cast<std::ptrdiff_t>(t * m * n));
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn, m, n, reps](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t t = 0; t < reps; ++t)
        for (std::size_t i = 0; i < m * n; ++i) xn->grad[i] += self.grad[t * m * n + i];
    };
  }
  return Tensor<T>::wrap(node);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void reduce_extents(const Tensor<T>& x, std::size_t axis, std::size_t& outer, std::size_t& len,
                    std::size_t& inner, Shape& out_shape) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw std::invalid_argument("reduce: axis out of range");
  outer = std::accumulate(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis),
                          std::size_t{1}, std::multiplies<>());
  len = s[axis];
  inner = std::accumulate(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end(),
                          std::size_t{1}, std::multiplies<>());
  out_shape.clear();
  for (std::size_t d = 0; d < s.size(); ++d)
    if (d != axis) out_shape.push_back(s[d]);
  if (out_shape.empty()) out_shape.push_back(1);
}
}  // namespace detail

/// Max over one axis; the argmax is recorded for the backward pass.
template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x, std::size_t axis) {
  std::size_t outer, len, inner;
  Shape out_shape;
  detail::reduce_extents(x, axis, outer, len, inner, out_shape);
  if (len == 0) throw std::invalid_argument("reduce_max: empty axis");
  auto node = detail::make_result<T>(out_shape, {x.node()});
  auto argmax = std::make_shared<std::vector<std::size_t>>(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = o * len * inner + i;
      T best_v = x.value()[best];
      for (std::size_t a = 1; a < len; ++a) {
        const std::size_t pos = (o * len + a) * inner + i;
        if (x.value()[pos] > best_v) {
          best_v = x.value()[pos];
          best = pos;
        }
      }
      node->value[o * inner + i] = best_v;
      (*argmax)[o * inner + i] = best;
    }
  }
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn, argmax](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.size(); ++i) xn->grad[(*argmax)[i]] += self.grad[i];
    };
  }
  return Tensor<T>::wrap(node);
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::size_t axis) {
  std::size_t outer, len, inner;
  Shape out_shape;
  detail::reduce_extents(x, axis, outer, len, inner, out_shape);
  if (len == 0) throw std::invalid_argument("reduce_mean: empty axis");
  auto node = detail::make_result<T>(out_shape, {x.node()});
  const T inv = T(1) / static_cast<T>(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t a = 0; a < len; ++a)
      for (std::size_t i = 0; i < inner; ++i)
        node->value[o * inner + i] += x.value()[(o * len + a) * inner + i] * inv;
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn, outer, len, inner, inv](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t a = 0; a < len; ++a)
          for (std::size_t i = 0; i < inner; ++i)
            xn->grad[(o * len + a) * inner + i] += self.grad[o * inner + i] * inv;
    };
  }
  return Tensor<T>::wrap(node);
}

/// Sum of all elements, as a scalar.
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto node = detail::make_result<T>({1}, {x.node()});
  T s = T(0);
  for (const T v : x.value()) s += v;
  node->value[0] = s;
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < xn->size(); ++i) xn->grad[i] += self.grad[0];
    };
  }
  return Tensor<T>::wrap(node);
}

// ---------------------------------------------------------------------------
// stochastic / loss ops
// ---------------------------------------------------------------------------

/// Inverted dropout: train-mode scales kept entries by 1/(1-p), inference is
/// the identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool train) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
  if (!train || p == 0.0) return x;
  auto node = detail::make_result<T>(x.shape(), {x.node()});
  auto mask = std::make_shared<std::vector<T>>(x.size());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < x.size(); ++i) {
    (*mask)[i] = (rng.uniform() < p) ? T(0) : keep_scale;
    node->value[i] = x.value()[i] * (*mask)[i];
  }
  if (node->requires_grad) {
    auto xn = x.node();
    node->backprop = [xn, mask](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.size(); ++i) xn->grad[i] += self.grad[i] * (*mask)[i];
    };
  }
  return Tensor<T>::wrap(node);
}

/// Mean softmax cross-entropy over rows of [b,c] logits.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 2 || logits.rows() != labels.size())
    throw std::invalid_argument("cross_entropy: logits/labels mismatch");
  const std::size_t b = logits.rows(), c = logits.cols();
  auto node = detail::make_result<T>({1}, {logits.node()});
  auto probs = std::make_shared<std::vector<T>>(b * c);
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c)
      throw std::invalid_argument("cross_entropy: label out of range");
    const T* in = logits.value().data() + r * c;
    T mx = in[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(in[j] - mx));
    const double log_z = std::log(sum) + static_cast<double>(mx);
    total += log_z - static_cast<double>(in[labels[r]]);
    for (std::size_t j = 0; j < c; ++j)
      (*probs)[r * c + j] = static_cast<T>(std::exp(static_cast<double>(in[j]) - log_z));
  }
  node->value[0] = static_cast<T>(total / static_cast<double>(b));
  if (node->requires_grad) {
    auto ln = logits.node();
    node->backprop = [ln, probs, labels, b, c](TensorNode<T>& self) {
      ln->ensure_grad();
      const T g = self.grad[0] / static_cast<T>(b);
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          T v = (*probs)[r * c + j];
          if (static_cast<std::size_t>(labels[r]) == j) v -= T(1);
          ln->grad[r * c + j] += g * v;
        }
    };
  }
  return Tensor<T>::wrap(node);
}

/// Differentiable symmetric Chamfer distance between [m,3] and [n,3] point
/// matrices. Nearest neighbors are found exhaustively in double precision and
/// the backward pass routes gradient through the recorded argmins.
template <typename T>
Tensor<T> chamfer(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || a.cols() != 3 || b.shape().size() != 2 || b.cols() != 3)
    throw std::invalid_argument("chamfer: inputs must be [*,3]");
  const std::size_t m = a.rows(), n = b.rows();
  if (m == 0 || n == 0) throw std::invalid_argument("chamfer: empty cloud");
  auto node = detail::make_result<T>({1}, {a.node(), b.node()});
  auto nn_ab = std::make_shared<std::vector<std::size_t>>(m);
  auto nn_ba = std::make_shared<std::vector<std::size_t>>(n);
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  double sum_ab = 0.0, sum_ba = 0.0;
  std::vector<double> min_b(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < m; ++i) {
    const double ax = pa[3 * i], ay = pa[3 * i + 1], az = pa[3 * i + 2];
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = ax - pb[3 * j], dy = ay - pb[3 * j + 1], dz = az - pb[3 * j + 2];
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < best) {
        best = d;
        best_j = j;
      }
      if (d < min_b[j]) {
        min_b[j] = d;
        (*nn_ba)[j] = i;
      }
    }
    (*nn_ab)[i] = best_j;
    sum_ab += best;
  }
  for (std::size_t j = 0; j < n; ++j) sum_ba += min_b[j];
  node->value[0] =
      static_cast<T>(sum_ab / static_cast<double>(m) + sum_ba / static_cast<double>(n));
  if (node->requires_grad) {
    auto an = a.node(), bn = b.node();
    node->backprop = [an, bn, nn_ab, nn_ba, m, n](TensorNode<T>& self) {
      const T g = self.grad[0];
      const T wa = g * T(2) / static_cast<T>(m);
      const T wb = g * T(2) / static_cast<T>(n);
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t j = (*nn_ab)[i];
        for (int d = 0; d < 3; ++d) {
          const T diff = an->value[3 * i + d] - bn->value[3 * j + d];
          if (an->requires_grad) an->grad[3 * i + d] += wa * diff;
          if (bn->requires_grad) bn->grad[3 * j + d] -= wa * diff;
        }
      }
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t i = (*nn_ba)[j];
        for (int d = 0; d < 3; ++d) {
          const T diff = bn->value[3 * j + d] - an->value[3 * i + d];
          if (bn->requires_grad) bn->grad[3 * j + d] += wb * diff;
          if (an->requires_grad) an->grad[3 * i + d] -= wb * diff;
        }
      }
    };
  }
  return Tensor<T>::wrap(node);
}

}  // namespace mae3d
