#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "evalnorm/errors.hpp"
#include "evalnorm/normalization.hpp"

namespace evalnorm {

/// Per-layer EvalNorm mixing weights plus their optimizer state.
struct EnParams {
  std::string layer_id;
  double alpha_hat = 0.0;
  double beta_hat = 0.0;
  // SGD momentum buffers.
  double velocity_alpha = 0.0;
  double velocity_beta = 0.0;

  static EnParams initial(std::string layer_id, double init) {
    detail::check_unit_interval(init, "EnParams init");
    return {std::move(layer_id), init, init, 0.0, 0.0};
  }

  MixingWeights weights() const { return {alpha_hat, beta_hat}; }
  friend bool operator==(const EnParams&, const EnParams&) = default;
};

/// Clamps alpha_hat, beta_hat into [0,1].
inline EnParams project_params(EnParams p) {
  p.alpha_hat = std::clamp(p.alpha_hat, 0.0, 1.0);
  p.beta_hat = std::clamp(p.beta_hat, 0.0, 1.0);
  return p;
}

struct EnOptimizerSettings {
  double lr = 0.01;
  double momentum = 0.9;
};

/// One SGD-with-momentum step followed by projection.
inline EnParams en_sgd_step(EnParams p, double grad_alpha, double grad_beta, double lr, double momentum) {
  if (!std::isfinite(grad_alpha) || !std::isfinite(grad_beta)) {
    throw NumericDomainError("non-finite EnParams gradient for layer " + p.layer_id);
  }
  p.velocity_alpha = momentum * p.velocity_alpha + grad_alpha;
  p.velocity_beta = momentum * p.velocity_beta + grad_beta;
  p.alpha_hat -= lr * p.velocity_alpha;
  p.beta_hat -= lr * p.velocity_beta;
  return project_params(p);
}

/// Cosine decay from 1 at step 0 to 0 at `total`.
inline double cosine_factor(std::size_t step, std::size_t total) {
  if (total == 0) return 1.0;
  const double pi = std::acos(-1.0);
  return 0.5 * (1.0 + std::cos(pi * static_cast<double>(step) / static_cast<double>(total)));
}

}  // namespace evalnorm
