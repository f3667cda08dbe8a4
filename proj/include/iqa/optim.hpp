#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "iqa/nn.hpp"

// Adam with coupled L2 weight decay (decay added to the gradient).

namespace iqa {

template <typename T>
class Adam {
public:
  Adam(NamedParams<T> params, double lr, double weight_decay = 0.0,
       double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), wd_(weight_decay), beta1_(beta1),
        beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<size_t>(params_[i].second->size()), 0.0);
      v_[i].assign(static_cast<size_t>(params_[i].second->size()), 0.0);
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t steps() const { return t_; }

  void zero_grad() {
    for (auto& [name, p] : params_) p->zero_grad();
  }

  void step() {
    // Validate before touching anything so an aborted step leaves the
    // parameters and moments exactly as they were.
    for (auto& [name, p] : params_) {
      auto grad = p->grad();
      for (int64_t i = 0; i < p->size(); ++i)
        if (!std::isfinite(static_cast<double>(grad[i])))
          throw NumericError("adam: non-finite gradient in " + name +
                             " at element " + std::to_string(i));
    }
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      auto& [name, p] = params_[pi];
      auto val = p->data();
      auto grad = p->grad();
      for (int64_t i = 0; i < p->size(); ++i) {
        double g = static_cast<double>(grad[i]);
        g += wd_ * static_cast<double>(val[i]);
        m_[pi][i] = beta1_ * m_[pi][i] + (1.0 - beta1_) * g;
        v_[pi][i] = beta2_ * v_[pi][i] + (1.0 - beta2_) * g * g;
        double mhat = m_[pi][i] / bc1;
        double vhat = v_[pi][i] / bc2;
        val[i] = static_cast<T>(val[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

private:
  NamedParams<T> params_;
  double lr_, wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace iqa
