#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fmcvrp/tensor.hpp"

namespace fmcvrp::tensor {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay and bias correction.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, AdamWConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (!p.requires_grad) continue;
      auto w = p.value.values();
      auto g = p.grad.values();
      auto m = m_[i].values();
      auto v = v_[i].values();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        double wj = static_cast<double>(w[j]);
        wj -= lr * cfg_.weight_decay * wj;
        const double mj = cfg_.beta1 * static_cast<double>(m[j]) + (1.0 - cfg_.beta1) * gj;
        const double vj = cfg_.beta2 * static_cast<double>(v[j]) + (1.0 - cfg_.beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        wj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
        w[j] = static_cast<T>(wj);
      }
    }
  }

  long step_count() const noexcept { return t_; }
  const AdamWConfig& config() const noexcept { return cfg_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

template <class T>
double global_grad_norm(const std::vector<Parameter<T>*>& params) {
  double sq = 0.0;
  for (const auto* p : params)
    for (T g : p->grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

struct ClipResult {
  double norm_before = 0.0;
  double norm_after = 0.0;
  double scale = 1.0;
};

/// Scales all gradients by max_norm / (g + 1e-6) when the global L2 norm g
/// exceeds max_norm.
template <class T>
ClipResult clip_global_norm(const std::vector<Parameter<T>*>& params, double max_norm = 1.0) {
  ClipResult r;
  r.norm_before = global_grad_norm(params);
  r.norm_after = r.norm_before;
  if (r.norm_before > max_norm) {
    r.scale = max_norm / (r.norm_before + 1e-6);
    for (auto* p : params)
      for (auto& g : p->grad.values()) g = static_cast<T>(static_cast<double>(g) * r.scale);
    r.norm_after = global_grad_norm(params);
  }
  return r;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "name[index]" of the worst coordinate
};

/// Central finite differences against the autodiff gradient. `loss` must
/// rebuild the computation from the current parameter values and return the
/// scalar loss; it is also called once with gradients requested. `coords`
/// limits how many coordinates per parameter are probed (0 = all), chosen
/// evenly spaced. Relative error is |a - n| / max(|a|, |n|, abs_floor).
template <class T>
GradCheckResult finite_diff_check(const std::function<T(bool with_grad)>& loss, const std::vector<Parameter<T>*>& params,
                                  double eps = 1e-5, std::size_t coords = 0, double abs_floor = 1e-3) {
  for (auto* p : params) p->zero_grad();
  loss(true);
  GradCheckResult res;
  for (auto* p : params) {
    const std::size_t n = p->value.size();
    const std::size_t take = coords == 0 ? n : std::min(coords, n);
    for (std::size_t c = 0; c < take; ++c) {
      const std::size_t j = take == n ? c : (c * n) / take + (n / take) / 2;
      const T orig = p->value[j];
      p->value[j] = static_cast<T>(orig + eps);
      const double up = static_cast<double>(loss(false));
      p->value[j] = static_cast<T>(orig - eps);
      const double down = static_cast<double>(loss(false));
      p->value[j] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = static_cast<double>(p->grad[j]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = p->name + "[" + std::to_string(j) + "]";
      }
    }
  }
  return res;
}

}  // namespace fmcvrp::tensor
