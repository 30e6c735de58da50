#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "evalnorm/autodiff.hpp"
#include "evalnorm/errors.hpp"
#include "evalnorm/moments.hpp"
#include "evalnorm/tensor.hpp"

namespace evalnorm {

inline constexpr double kDefaultEps = 1e-5;
inline constexpr double kDefaultEmaDecay = 0.99;

/// Exponential moving averages of the moments seen during training.
struct EmaState {
  std::vector<double> mean;
  std::vector<double> variance;
  double decay = kDefaultEmaDecay;
  std::size_t update_count = 0;

  /// Neutral prior: mean 0, variance 1.
  static EmaState initial(std::size_t channels, double decay = kDefaultEmaDecay) {
    EmaState s;
    s.mean.assign(channels, 0.0);
    s.variance.assign(channels, 1.0);
    s.decay = decay;
    return s;
  }

  std::size_t channels() const noexcept { return mean.size(); }
  friend bool operator==(const EmaState&, const EmaState&) = default;
};

/// Learned per-channel scale (gamma) and shift applied after normalization.
struct AffineParams {
  Tensor scale;
  Tensor shift;
  bool trainable = true;

  static AffineParams identity(std::size_t channels) {
    return {Tensor::ones(Shape{channels}), Tensor::zeros(Shape{channels}), true};
  }
};

/// Interpolation weights between a sample's own moments and the EMA moments:
/// alpha for the mean, beta for the variance.
struct MixingWeights {
  double alpha = 0.0;
  double beta = 0.0;
};

struct NormMode {
  enum class Kind { TrainBN, EvalEMA, EvalSimple, EvalEN };

  Kind kind = Kind::TrainBN;
  /// Used by EvalSimple only.
  double alpha = 0.0;

  static NormMode train_bn() { return {Kind::TrainBN, 0.0}; }
  static NormMode eval_ema() { return {Kind::EvalEMA, 0.0}; }
  static NormMode eval_en() { return {Kind::EvalEN, 0.0}; }
  static NormMode eval_simple(double alpha) {
    detail::check_unit_interval(alpha, "EvalSimple alpha");
    return {Kind::EvalSimple, alpha};
  }

  bool is_eval() const noexcept { return kind != Kind::TrainBN; }
};

/// new = decay * old + (1 - decay) * m, for mean and variance alike.
inline EmaState ema_update(const EmaState& state, const MomentPair& m) {
  if (!(state.decay > 0.0 && state.decay < 1.0)) throw ConfigError("EMA decay must lie in (0,1)");
  if (m.channels() != state.channels()) throw ConfigError("ema_update channel mismatch");
  EmaState next = state;
  const double keep = state.decay, take = 1.0 - state.decay;
  for (std::size_t c = 0; c < state.channels(); ++c) {
    next.mean[c] = keep * state.mean[c] + take * m.mean[c];
    next.variance[c] = keep * state.variance[c] + take * m.variance[c];
  }
  ++next.update_count;
  return next;
}

/// Evaluation statistics mixing a sample's instance moments with the EMA:
///   mean = a*mu_i + (1-a)*mu_E
///   var  = b*var_i + (1-b)*var_E + b(1-b)(mu_i - mu_E)^2
inline MomentPair en_moments(const MomentPair& inst, const EmaState& state, double alpha_hat, double beta_hat) {
  detail::check_unit_interval(alpha_hat, "alpha_hat");
  detail::check_unit_interval(beta_hat, "beta_hat");
  if (inst.channels() != state.channels()) throw ConfigError("en_moments channel mismatch");
  MomentPair out;
  out.count = inst.count;
  out.mean.resize(inst.channels());
  out.variance.resize(inst.channels());
  for (std::size_t c = 0; c < inst.channels(); ++c) {
    const double gap = inst.mean[c] - state.mean[c];
    out.mean[c] = alpha_hat * inst.mean[c] + (1.0 - alpha_hat) * state.mean[c];
    out.variance[c] =
        beta_hat * inst.variance[c] + (1.0 - beta_hat) * state.variance[c] + beta_hat * (1.0 - beta_hat) * gap * gap;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training path (on tape)
// ---------------------------------------------------------------------------

/// Shape that broadcasts a per-channel vector against [N, C, spatial...].
inline Shape channel_broadcast_shape(std::size_t channels, std::size_t rank) {
  Shape s{channels};
  for (std::size_t d = 2; d < rank; ++d) s.push_back(1);
  return s;
}

/// Normalizes each contiguous group of `group_size` samples with that group's
/// own moments. Backward is the full batch-norm Jacobian, through mean and variance.
inline Var batch_normalize(Var x, std::size_t group_size, double eps, std::vector<MomentPair>* moments_out = nullptr) {
  const Tensor& X = x.value();
  const auto l = ChannelLayout::of(X.shape());
  if (l.batch == 0) throw EmptyBatchError("batch_normalize on an empty batch");
  if (group_size == 0 || l.batch % group_size != 0) {
    throw ConfigError("normalization microbatch " + std::to_string(group_size) + " does not divide batch " +
                      std::to_string(l.batch));
  }
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  const std::size_t groups = l.batch / group_size;
  std::vector<MomentPair> moments;
  moments.reserve(groups);
  std::vector<double> inv_std(groups * l.channels);
  Tensor out(X.shape());
  for (std::size_t g = 0; g < groups; ++g) {
    moments.push_back(detail::channel_moments(X.values(), l, g * group_size, group_size));
    const MomentPair& m = moments.back();
    for (std::size_t c = 0; c < l.channels; ++c) {
      const double is = 1.0 / std::sqrt(m.variance[c] + eps);
      inv_std[g * l.channels + c] = is;
      for (std::size_t n = g * group_size; n < (g + 1) * group_size; ++n) {
        const std::size_t base = (n * l.channels + c) * l.spatial;
        for (std::size_t s = 0; s < l.spatial; ++s) out[base + s] = (X[base + s] - m.mean[c]) * is;
      }
    }
  }
  if (moments_out) *moments_out = moments;
  return x.tape->record(std::move(out), {x}, [l, group_size, groups, inv_std = std::move(inv_std)](BackwardContext& c) {
    auto* gx = c.input_grad(0);
    const Tensor& go = c.grad_out();
    const Tensor& xhat = c.output();
    const double count = static_cast<double>(group_size * l.spatial);
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t ch = 0; ch < l.channels; ++ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t n = g * group_size; n < (g + 1) * group_size; ++n) {
          const std::size_t base = (n * l.channels + ch) * l.spatial;
          for (std::size_t s = 0; s < l.spatial; ++s) {
            sum_g += go[base + s];
            sum_gx += go[base + s] * xhat[base + s];
          }
        }
        const double mg = sum_g / count, mgx = sum_gx / count, is = inv_std[g * l.channels + ch];
        for (std::size_t n = g * group_size; n < (g + 1) * group_size; ++n) {
          const std::size_t base = (n * l.channels + ch) * l.spatial;
          for (std::size_t s = 0; s < l.spatial; ++s)
            (*gx)[base + s] += is * (go[base + s] - mg - xhat[base + s] * mgx);
        }
      }
  });
}

struct BnTrainOutput {
  Var output;
  /// Pre-affine normalized activations.
  Var normalized;
  /// One entry per normalization microbatch, in batch order.
  std::vector<MomentPair> moments;
};

/// gamma * (x - mu_B) / sqrt(var_B + eps) + shift, with microbatches of
/// `group_size` contiguous samples (0 means the whole batch).
inline BnTrainOutput bn_train_forward(Var x, Var scale, Var shift, double eps, std::size_t group_size = 0) {
  BnTrainOutput r;
  const std::size_t n = x.value().rank() ? x.shape()[0] : 0;
  r.normalized = batch_normalize(x, group_size ? group_size : n, eps, &r.moments);
  const Shape cs = channel_broadcast_shape(x.shape().at(1), x.value().rank());
  if (scale.value().size() != cs[0] || shift.value().size() != cs[0]) {
    throw ConfigError("affine parameters do not match channel count");
  }
  r.output = reshape(scale, cs) * r.normalized + reshape(shift, cs);
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation path (plain tensors, no tape, no state mutation)
// ---------------------------------------------------------------------------

namespace detail {
inline double normalize_value(double x, double mean, double variance, double eps) {
  return (x - mean) / std::sqrt(variance + eps);
}
}  // namespace detail

/// Pre-affine (x - mu_E) / sqrt(var_E + eps).
inline Tensor normalize_ema(const Tensor& x, const EmaState& state, double eps) {
  const auto l = ChannelLayout::of(x.shape());
  if (l.channels != state.channels()) throw ConfigError("EMA state channel mismatch");
  Tensor out(x.shape());
  for (std::size_t n = 0; n < l.batch; ++n)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = (n * l.channels + c) * l.spatial;
      for (std::size_t s = 0; s < l.spatial; ++s)
        out[base + s] = detail::normalize_value(x[base + s], state.mean[c], state.variance[c], eps);
    }
  return out;
}

/// Pre-affine normalization of every sample with en_moments of its own instance
/// moments. Each sample is processed independently of the rest of the batch.
inline Tensor normalize_en(const Tensor& x, const EmaState& state, MixingWeights w, double eps) {
  const auto l = ChannelLayout::of(x.shape());
  if (l.channels != state.channels()) throw ConfigError("EMA state channel mismatch");
  Tensor out(x.shape());
  for (std::size_t n = 0; n < l.batch; ++n) {
    const MomentPair mixed = en_moments(detail::channel_moments(x.values(), l, n, 1), state, w.alpha, w.beta);
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = (n * l.channels + c) * l.spatial;
      for (std::size_t s = 0; s < l.spatial; ++s)
        out[base + s] = detail::normalize_value(x[base + s], mixed.mean[c], mixed.variance[c], eps);
    }
  }
  return out;
}

inline Tensor apply_affine(const Tensor& normalized, const AffineParams& affine) {
  const auto l = ChannelLayout::of(normalized.shape());
  if (affine.scale.size() != l.channels || affine.shift.size() != l.channels) {
    throw ConfigError("affine parameters do not match channel count");
  }
  Tensor out(normalized.shape());
  for (std::size_t n = 0; n < l.batch; ++n)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = (n * l.channels + c) * l.spatial;
      for (std::size_t s = 0; s < l.spatial; ++s)
        out[base + s] = affine.scale[c] * normalized[base + s] + affine.shift[c];
    }
  return out;
}

inline Tensor eval_normalize_ema(const Tensor& x, const EmaState& state, const AffineParams& affine,
                                 double eps = kDefaultEps) {
  return apply_affine(normalize_ema(x, state, eps), affine);
}

inline Tensor eval_normalize_en(const Tensor& x, const EmaState& state, MixingWeights w, const AffineParams& affine,
                                double eps = kDefaultEps) {
  return apply_affine(normalize_en(x, state, w, eps), affine);
}

}  // namespace evalnorm
