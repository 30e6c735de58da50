#pragma once

// Estimation of the EvalNorm mixing weights (alpha_hat, beta_hat) per
// normalization layer. The auxiliary loss compares the activations a sample
// received under training-time batch norm with the ones EvalNorm would
// reconstruct from the sample alone plus the EMA. Every model-side input goes
// through stop_gradient, so only alpha_hat and beta_hat ever see a gradient.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "evalnorm/autodiff.hpp"
#include "evalnorm/data.hpp"
#include "evalnorm/en_params.hpp"
#include "evalnorm/errors.hpp"
#include "evalnorm/model.hpp"
#include "evalnorm/moments.hpp"
#include "evalnorm/normalization.hpp"

namespace evalnorm {

struct AuxLossReport {
  std::vector<double> layer_loss;
  std::size_t step = 0;
};

namespace detail {

/// (x - mu_B) / sqrt(var_B + eps) with one moment pair per contiguous microbatch.
inline Tensor microbatch_normalized(const Tensor& x, std::span<const MomentPair> moments, double eps) {
  const auto l = ChannelLayout::of(x.shape());
  if (moments.empty() || l.batch % moments.size() != 0) throw ConfigError("microbatch moments do not tile the batch");
  const std::size_t group = l.batch / moments.size();
  Tensor out(x.shape());
  for (std::size_t n = 0; n < l.batch; ++n) {
    const MomentPair& m = moments[n / group];
    if (m.channels() != l.channels) throw ConfigError("microbatch moments channel mismatch");
    for (std::size_t c = 0; c < l.channels; ++c) {
      const double inv_std = 1.0 / std::sqrt(m.variance[c] + eps);
      const std::size_t base = (n * l.channels + c) * l.spatial;
      for (std::size_t s = 0; s < l.spatial; ++s) out[base + s] = (x[base + s] - m.mean[c]) * inv_std;
    }
  }
  return out;
}

}  // namespace detail

/// Mean absolute difference between training-time normalized activations and
/// their EvalNorm reconstruction, averaged over every element of every sample.
/// `alpha` and `beta` are rank-0 tape variables; `x` is the layer input for the
/// whole batch and `moments` holds one entry per microbatch.
inline Var aux_loss(Tape& tape, Var x, std::span<const MomentPair> moments, const EmaState& state, Var alpha, Var beta,
                    double eps = kDefaultEps) {
  const Tensor& X = x.value();
  const auto l = ChannelLayout::of(X.shape());
  if (l.channels != state.channels()) throw ConfigError("aux_loss: EMA channel mismatch");

  const Var target = tape.constant(detail::microbatch_normalized(X, moments, eps));
  const Var xs = stop_gradient(x);
  std::vector<std::size_t> spatial(X.rank() - 2);
  std::iota(spatial.begin(), spatial.end(), std::size_t{2});
  const Var mu_i = mean(xs, spatial, true);
  const Var var_i = mean(square(xs - mu_i), spatial, true);

  const Shape cs = channel_broadcast_shape(l.channels, X.rank());
  const Var mu_e = tape.constant(Tensor(cs, state.mean));
  const Var var_e = tape.constant(Tensor(cs, state.variance));

  const Var mu_hat = alpha * mu_i + (1.0 - alpha) * mu_e;
  const Var var_hat = beta * var_i + (1.0 - beta) * var_e + (beta * (1.0 - beta)) * square(mu_i - mu_e);
  const Var denom_sq = var_hat + eps;
  for (double v : denom_sq.value().values()) {
    if (!(v > 0.0)) throw NumericDomainError("aux_loss: reconstructed variance + eps is not positive");
  }
  const Var recon = (xs - mu_hat) / sqrt(denom_sq);
  return mean_all(abs(target - recon));
}

struct AuxEvaluation {
  double loss = 0.0;
  double grad_alpha = 0.0;
  double grad_beta = 0.0;
};

/// Value and (alpha, beta) gradient of aux_loss on plain tensors.
inline AuxEvaluation evaluate_aux_loss(const Tensor& x, std::span<const MomentPair> moments, const EmaState& state,
                                       MixingWeights w, double eps = kDefaultEps) {
  Tape tape;
  const Var a = tape.leaf(Tensor::scalar(w.alpha));
  const Var b = tape.leaf(Tensor::scalar(w.beta));
  const Var loss = aux_loss(tape, tape.constant(x), moments, state, a, b, eps);
  tape.backward(loss);
  return {loss.value().item(), tape.grad(a).item(), tape.grad(b).item()};
}

/// alpha/beta leaves and the aux-loss term for every normalization layer of a
/// TrainBN forward pass.
struct AuxTerms {
  std::vector<Var> alpha;
  std::vector<Var> beta;
  std::vector<Var> loss;

  Var total() const {
    Var t = loss.at(0);
    for (std::size_t i = 1; i < loss.size(); ++i) t = t + loss[i];
    return t;
  }
};

/// Builds one aux loss per layer against the EMA held in `model` (the state
/// before this step's update).
inline AuxTerms attach_aux_losses(Tape& tape, const Model& model, const ForwardPass& pass,
                                  std::span<const EnParams> params, double eps = kDefaultEps) {
  if (params.size() != model.norms.size() || pass.norms.size() != model.norms.size()) {
    throw ConfigError("one EnParams per normalization layer required");
  }
  AuxTerms terms;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (pass.norms[i].moments.empty()) throw ConfigError("aux loss needs a TrainBN forward pass");
    terms.alpha.push_back(tape.leaf(Tensor::scalar(params[i].alpha_hat)));
    terms.beta.push_back(tape.leaf(Tensor::scalar(params[i].beta_hat)));
    terms.loss.push_back(aux_loss(tape, pass.norms[i].input, pass.norms[i].moments, model.norms[i].ema,
                                  terms.alpha.back(), terms.beta.back(), eps));
  }
  return terms;
}

/// Reads the (alpha, beta) gradients after backward() and steps every EnParams.
inline void apply_aux_gradients(const Tape& tape, const AuxTerms& terms, std::vector<EnParams>& params, double lr,
                                double momentum) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] = en_sgd_step(params[i], tape.grad(terms.alpha[i]).item(), tape.grad(terms.beta[i]).item(), lr, momentum);
  }
}

struct OfflineOptions {
  std::size_t microbatch = 2;
  /// 0: one epoch of microbatches or 2000 steps, whichever is smaller.
  std::size_t steps = 0;
  EnOptimizerSettings optimizer{};
  /// Initial alpha_hat = beta_hat; NaN means 1/B.
  double init = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;
  double eps = kDefaultEps;
};

struct OfflineEstimate {
  std::vector<EnParams> params;
  /// Mean aux loss per layer over the first and the last tenth of the run.
  std::vector<double> initial_loss;
  std::vector<double> final_loss;
  std::size_t steps = 0;
};

inline std::size_t default_offline_steps(std::size_t dataset_size, std::size_t microbatch) {
  return std::min<std::size_t>(dataset_size / microbatch, 2000);
}

/// Fits EnParams on a frozen model. Each step draws one microbatch of size B,
/// runs a TrainBN forward pass with the weights as constants, and updates only
/// the EnParams. The model is taken by const reference and never modified.
inline OfflineEstimate estimate_offline(const Model& model, const Dataset& data, const OfflineOptions& opt) {
  if (opt.microbatch == 0) throw ConfigError("microbatch must be >= 1");
  const std::size_t per_epoch = data.size() / opt.microbatch;
  if (per_epoch == 0) throw ConfigError("dataset smaller than one microbatch");
  const std::size_t steps = opt.steps ? opt.steps : default_offline_steps(data.size(), opt.microbatch);
  if (steps < 1) throw ConfigError("offline estimation needs at least one step");
  const double init = std::isnan(opt.init) ? 1.0 / static_cast<double>(opt.microbatch) : opt.init;

  OfflineEstimate est;
  est.steps = steps;
  for (const auto& n : model.norms) est.params.push_back(EnParams::initial(n.id, init));
  const std::size_t window = std::max<std::size_t>(1, steps / 10);
  est.initial_loss.assign(model.norms.size(), 0.0);
  est.final_loss.assign(model.norms.size(), 0.0);

  std::size_t epoch = 0;
  auto it = batch_iterator(data, opt.microbatch, opt.microbatch, opt.seed, epoch);
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t within = step % per_epoch;
    if (step > 0 && within == 0) it = batch_iterator(data, opt.microbatch, opt.microbatch, opt.seed, ++epoch);
    const Batch b = it.batch(within);

    Tape tape;
    const auto bound = bind_parameters(tape, model, false);
    const auto pass = forward(tape, model, bound, tape.constant(b.features), NormMode::train_bn(), opt.microbatch, opt.eps);
    const AuxTerms terms = attach_aux_losses(tape, model, pass, est.params, opt.eps);
    for (std::size_t i = 0; i < terms.loss.size(); ++i) {
      const double v = terms.loss[i].value().item();
      if (step < window) est.initial_loss[i] += v / static_cast<double>(window);
      if (step >= steps - window) est.final_loss[i] += v / static_cast<double>(window);
    }
    tape.backward(terms.total());
    apply_aux_gradients(tape, terms, est.params, opt.optimizer.lr * cosine_factor(step, steps), opt.optimizer.momentum);
  }
  return est;
}

}  // namespace evalnorm
