#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mae3d/nn.hpp"
#include "mae3d/tensor.hpp"

namespace mae3d {

/// Cosine schedule from base_lr at step 0 down to min_lr at total_steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr,
                        double min_lr = 0.0) {
  if (total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (step > total_steps) throw std::invalid_argument("cosine_lr: step beyond total_steps");
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

/// Adam with decoupled weight decay over a ParamStore.
template <typename T>
class Adam {
public:
  struct Hyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
  };

  explicit Adam(ParamStore<T>& store, Hyper hp = {}) : store_(&store), hp_(hp) {
    for (auto& p : store.all()) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step(double lr) {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(step_count_));
    auto& params = store_->all();
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      if (!p.requires_grad()) continue;
      auto& val = p.value();
      auto& g = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        if (!std::isfinite(gi))
          throw std::runtime_error("gradient blow-up in parameter " + p.name());
        m[i] = hp_.beta1 * m[i] + (1.0 - hp_.beta1) * gi;
        v[i] = hp_.beta2 * v[i] + (1.0 - hp_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double x = static_cast<double>(val[i]);
        x -= lr * hp_.weight_decay * x;  // decoupled decay
        x -= lr * mhat / (std::sqrt(vhat) + hp_.epsilon);
        val[i] = static_cast<T>(x);
      }
    }
  }

  std::size_t step_count() const { return step_count_; }
  const Hyper& hyper() const { return hp_; }

  // moment access for checkpointing
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  void set_step_count(std::size_t s) { step_count_ = s; }

private:
  ParamStore<T>* store_;
  Hyper hp_;
  std::size_t step_count_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace mae3d
