#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mae3d/rng.hpp"
#include "mae3d/tensor.hpp"

namespace mae3d {

/// Ordered, named collection of trainable tensors. Registration order is the
/// serialization order.
template <typename T>
class ParamStore {
public:
  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> data) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    auto t = Tensor<T>::param(std::move(shape), std::move(data), name);
    index_[name] = params_.size();
    params_.push_back(t);
    return t;
  }

  Tensor<T> add_uniform(const std::string& name, Shape shape, double bound, Rng& rng) {
    std::vector<T> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, std::move(shape), std::move(data));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return params_[it->second];
  }

  std::vector<Tensor<T>>& all() { return params_; }
  const std::vector<Tensor<T>>& all() const { return params_; }
  std::size_t count() const { return params_.size(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void freeze() {
    for (auto& p : params_) p.set_requires_grad(false);
  }

private:
  std::vector<Tensor<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Affine layer y = xW + b with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init.
template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
         Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = store.add_uniform(name + ".w", {in, out}, bound, rng);
    bias = store.add_uniform(name + ".b", {out}, bound, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return add_rowvec(matmul(x, weight), bias); }
};

/// Layer norm over the last axis, scale init 1 and shift init 0.
template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> shift;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t dim) {
    gain = store.add(name + ".g", {dim}, std::vector<T>(dim, T(1)));
    shift = store.add(name + ".s", {dim}, std::vector<T>(dim, T(0)));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, shift); }
};

}  // namespace mae3d
