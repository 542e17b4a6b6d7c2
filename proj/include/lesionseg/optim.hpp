#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lesionseg/checkpoint.hpp"
#include "lesionseg/tensor.hpp"

namespace lesionseg {

// Decay exemptions: batch-norm scale/shift and biases are not penalized.
inline bool decay_applies(const std::string& name) {
  auto ends_with = [&name](const char* s) {
    std::string suffix(s);
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return !(ends_with(".bias") || ends_with(".gamma") || ends_with(".beta"));
}

struct SgdmState {
  std::map<std::string, Tensor> velocity;
  double learning_rate = 0.003;
  double momentum = 0.9;
  double l2_lambda = 0.0005;
  double l1_lambda = 0.0;
  double lr_decay = 1.0;  // multiplicative, applied once per epoch by the trainer
};

inline SgdmState make_sgdm_state(const Checkpoint& params, double lr = 0.003,
                                 double momentum = 0.9, double l2 = 0.0005, double l1 = 0.0) {
  SgdmState s;
  s.learning_rate = lr;
  s.momentum = momentum;
  s.l2_lambda = l2;
  s.l1_lambda = l1;
  for (const auto& [name, t] : params.entries())
    if (is_trainable_param(name)) s.velocity.emplace(name, zeros_like(t));
  return s;
}

// g' = g + l2*w + l1*sign(w);  v <- mu*v + g';  w <- w - eta*v
inline void sgdm_step(Checkpoint& params, const Checkpoint& grads, SgdmState& state) {
  for (auto& [name, v] : state.velocity) {
    if (!grads.has(name)) throw ConfigError("sgdm_step: missing gradient for " + name);
    Tensor& w = params.at(name);
    const Tensor& g = grads.at(name);
    if (!w.same_shape(g) || !w.same_shape(v))
      throw ConfigError("sgdm_step: shape mismatch for " + name);
    const bool decay = decay_applies(name);
    const float l2 = decay ? static_cast<float>(state.l2_lambda) : 0.0f;
    const float l1 = decay ? static_cast<float>(state.l1_lambda) : 0.0f;
    const float mu = static_cast<float>(state.momentum);
    const float eta = static_cast<float>(state.learning_rate);
    for (std::size_t i = 0; i < w.numel(); ++i) {
      float gp = g.data[i] + l2 * w.data[i] +
                 l1 * (w.data[i] > 0.0f ? 1.0f : w.data[i] < 0.0f ? -1.0f : 0.0f);
      v.data[i] = mu * v.data[i] + gp;
      w.data[i] -= eta * v.data[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Newton step for small dense problems: w' = w - eta * H^-1 g via a partial
// pivot LU solve in double precision. Not wired into network training.
// ---------------------------------------------------------------------------
inline std::vector<double> newton_step(const std::vector<double>& w,
                                       const std::vector<double>& grad,
                                       const std::vector<double>& hessian, double eta) {
  const std::size_t n = w.size();
  if (grad.size() != n || hessian.size() != n * n)
    throw ShapeError("newton_step: dimension mismatch");

  std::vector<double> a(hessian);
  std::vector<double> x(grad);

  double max_piv = 0.0, min_piv = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::fabs(a[i * n + k]) > std::fabs(a[p * n + k])) p = i;
    if (p != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[k * n + j], a[p * n + j]);
      std::swap(x[k], x[p]);
    }
    double piv = a[k * n + k];
    double apiv = std::fabs(piv);
    max_piv = std::max(max_piv, apiv);
    min_piv = std::min(min_piv, apiv);
    if (apiv < 1e-12 * std::max(1.0, max_piv)) {
      double cond = min_piv > 0.0 ? max_piv / min_piv : std::numeric_limits<double>::infinity();
      throw NumericError("newton_step: Hessian singular or ill-conditioned (pivot ratio ~" +
                         std::to_string(cond) + ")");
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      double f = a[i * n + k] / piv;
      a[i * n + k] = 0.0;
      for (std::size_t j = k + 1; j < n; ++j) a[i * n + j] -= f * a[k * n + j];
      x[i] -= f * x[k];
    }
  }
  for (std::size_t k = n; k-- > 0;) {
    for (std::size_t j = k + 1; j < n; ++j) x[k] -= a[k * n + j] * x[j];
    x[k] /= a[k * n + k];
  }

  std::vector<double> out(w);
  for (std::size_t i = 0; i < n; ++i) out[i] -= eta * x[i];
  return out;
}

inline Tensor newton_step(const Tensor& w, const Tensor& grad, const std::vector<double>& hessian,
                          double eta) {
  std::vector<double> wd(w.data.begin(), w.data.end());
  std::vector<double> gd(grad.data.begin(), grad.data.end());
  auto res = newton_step(wd, gd, hessian, eta);
  Tensor out = w;
  for (std::size_t i = 0; i < res.size(); ++i) out.data[i] = static_cast<float>(res[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Early stopping (higher-is-better metric, patience counted in checks)
// ---------------------------------------------------------------------------

enum class StopDecision { Continue, Stop };

struct EarlyStopState {
  int patience = 10;
  double best_metric = -std::numeric_limits<double>::infinity();
  int checks_since_best = 0;
  int checks_done = 0;
  int best_check = -1;  // 1-based index of the check that set best_metric
  std::optional<Checkpoint> best_checkpoint;
};

inline StopDecision early_stop_update(EarlyStopState& state, double validation_metric,
                                      const Checkpoint& params) {
  if (std::isnan(validation_metric)) throw NumericError("early_stop_update: NaN metric");
  ++state.checks_done;
  if (validation_metric > state.best_metric) {
    state.best_metric = validation_metric;
    state.checks_since_best = 0;
    state.best_check = state.checks_done;
    state.best_checkpoint = params;
  } else {
    ++state.checks_since_best;
  }
  return state.checks_since_best > state.patience ? StopDecision::Stop : StopDecision::Continue;
}

}  // namespace lesionseg
