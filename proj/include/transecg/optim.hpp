#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "transecg/tensor.hpp"

namespace transecg::nn {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Adam with decoupled weight decay: w <- w - lr*wd*w - lr*mhat/(sqrt(vhat)+eps).
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions opts) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto w = params_[k].mutable_data();
      const auto g = params_[k].grad();
      const bool has_g = params_[k].has_grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = has_g ? g[i] : 0.0;
        m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * gi;
        v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= opts_.lr * opts_.weight_decay * w[i];
        w[i] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  double lr() const { return opts_.lr; }
  void set_lr(double lr) { opts_.lr = lr; }
  std::int64_t steps() const { return t_; }
  const AdamWOptions& options() const { return opts_; }

 private:
  std::vector<Tensor> params_;
  AdamWOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace transecg::nn
