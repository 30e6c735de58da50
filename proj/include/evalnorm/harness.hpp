#pragma once

// Training with decoupled gradient batch (G) and normalization microbatch (B),
// EMA maintenance, online EvalNorm estimation, evaluation and sweeps.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evalnorm/autodiff.hpp"
#include "evalnorm/checkpoint.hpp"
#include "evalnorm/config.hpp"
#include "evalnorm/data.hpp"
#include "evalnorm/en_params.hpp"
#include "evalnorm/errors.hpp"
#include "evalnorm/estimator.hpp"
#include "evalnorm/model.hpp"
#include "evalnorm/normalization.hpp"

namespace evalnorm {

/// Evaluation statistics modes reported for every run.
enum class EvalMode { EMA, EN, SimpleInvB, SimpleInvB2, Instance };

inline constexpr EvalMode kAllEvalModes[] = {EvalMode::EMA, EvalMode::EN, EvalMode::SimpleInvB, EvalMode::SimpleInvB2,
                                             EvalMode::Instance};

inline std::string mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::EMA:
      return "ema";
    case EvalMode::EN:
      return "en";
    case EvalMode::SimpleInvB:
      return "simple_inv_b";
    case EvalMode::SimpleInvB2:
      return "simple_inv_b2";
    case EvalMode::Instance:
      return "instance";
  }
  return "?";
}

inline EvalMode parse_eval_mode(const std::string& s) {
  for (auto m : kAllEvalModes)
    if (mode_name(m) == s) return m;
  throw ConfigError("unknown evaluation mode '" + s + "'");
}

/// Concrete normalization mode for a model trained with microbatch B.
inline NormMode to_norm_mode(EvalMode m, std::size_t microbatch) {
  const double b = static_cast<double>(microbatch);
  switch (m) {
    case EvalMode::EMA:
      return NormMode::eval_ema();
    case EvalMode::EN:
      return NormMode::eval_en();
    case EvalMode::SimpleInvB:
      return NormMode::eval_simple(1.0 / b);
    case EvalMode::SimpleInvB2:
      return NormMode::eval_simple(rule_of_thumb_alpha(microbatch));
    case EvalMode::Instance:
      return NormMode::eval_simple(1.0);
  }
  throw ConfigError("bad evaluation mode");
}

struct ModeAccuracy {
  std::string mode;
  double accuracy = 0.0;
  friend bool operator==(const ModeAccuracy&, const ModeAccuracy&) = default;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::vector<ModeAccuracy> eval;
  /// Mean aux loss per normalization layer (empty when estimation is off).
  std::vector<double> aux_loss;
  /// EnParams at the end of the epoch.
  std::vector<EnParams> en;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct RunRecord {
  std::string run_id;
  std::size_t microbatch = 0;
  std::size_t sgd_batch = 0;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  friend bool operator==(const RunRecord&, const RunRecord&) = default;

  /// Final-epoch accuracy for `mode`; throws if the mode was not evaluated.
  double final_accuracy(const std::string& mode) const {
    if (epochs.empty()) throw ConfigError("run has no epochs");
    for (const auto& e : epochs.back().eval)
      if (e.mode == mode) return e.accuracy;
    throw ConfigError("mode " + mode + " not recorded for run " + run_id);
  }
};

struct EvalResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
};

/// Accuracy under an evaluation mode. Every sample is normalized on its own,
/// so the result does not depend on `eval_batch`.
inline EvalResult evaluate(const Model& model, const Dataset& data, const NormMode& mode, double eps = kDefaultEps,
                           std::size_t eval_batch = 256) {
  if (!mode.is_eval()) throw ConfigError("evaluate() needs an evaluation mode");
  if (mode.kind == NormMode::Kind::EvalEN && !model.has_en_params()) {
    throw ConfigError("checkpoint carries no EnParams; run estimate-offline or train with en.enabled=true");
  }
  if (eval_batch == 0) throw ConfigError("eval_batch must be >= 1");
  EvalResult r;
  r.total = data.size();
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += eval_batch) {
    const std::size_t end = std::min(data.size(), start + eval_batch);
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    const auto pred = argmax_rows(predict_logits(model, data.gather(idx), mode, eps));
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == data.labels[start + i]) ++r.correct;
  }
  r.accuracy = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  return r;
}

inline std::vector<ModeAccuracy> evaluate_all_modes(const Model& model, const Dataset& data, std::size_t microbatch,
                                                    double eps, std::size_t eval_batch) {
  std::vector<ModeAccuracy> out;
  for (auto m : kAllEvalModes) {
    if (m == EvalMode::EN && !model.has_en_params()) continue;
    out.push_back({mode_name(m), evaluate(model, data, to_norm_mode(m, microbatch), eps, eval_batch).accuracy});
  }
  return out;
}

struct TrainOptions {
  /// Stop after this many SGD steps (0: run every epoch to completion).
  std::size_t max_steps = 0;
  bool evaluate_each_epoch = true;
};

struct TrainResult {
  Model model;
  Checkpoint checkpoint;
  RunRecord record;
  std::size_t steps = 0;
};

/// Trains with SGD + momentum and cosine learning-rate decay. Batch norm uses
/// microbatches of B contiguous samples inside each SGD batch of G; the EMA is
/// updated once per microbatch. With en.enabled, each step also adds the aux
/// loss of every layer (against the EMA before this step's update) to the
/// objective; stop_gradient keeps model gradients identical to a run without it.
inline TrainResult train(const RunConfig& cfg, const DatasetPair& data, const TrainOptions& opt = {}) {
  cfg.validate();
  const std::size_t G = cfg.sgd_batch, B = cfg.norm_microbatch;
  Model model = build(model_spec_for(cfg, data.train), cfg.seed, cfg.ema_decay);

  std::vector<EnParams> en;
  if (cfg.en.enabled)
    for (const auto& n : model.norms) en.push_back(EnParams::initial(n.id, cfg.en_init()));

  std::vector<Tensor> velocity;
  for (const auto& p : model.params) velocity.push_back(Tensor::zeros(p.value.shape()));

  const std::size_t per_epoch = data.train.size() / G;
  if (per_epoch == 0) throw ConfigError("training set smaller than one SGD batch");
  std::size_t total_steps = per_epoch * cfg.epochs;
  if (opt.max_steps) total_steps = std::min(total_steps, opt.max_steps);

  TrainResult result;
  result.record.run_id = cfg.effective_run_id();
  result.record.microbatch = B;
  result.record.sgd_batch = G;
  result.record.seed = cfg.seed;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
    const auto it = batch_iterator(data.train, G, B, cfg.seed, epoch);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    std::vector<double> aux_sum(en.size(), 0.0);

    for (std::size_t s = 0; s < it.num_batches() && step < total_steps; ++s, ++step) {
      const Batch batch = it.batch(s);
      const double decay = cosine_factor(step, total_steps);

      Tape tape;
      const auto bound = bind_parameters(tape, model, true);
      const auto pass = forward(tape, model, bound, tape.constant(batch.features), NormMode::train_bn(), B, cfg.eps);
      const Var task = softmax_cross_entropy(pass.logits, batch.labels);
      const double task_value = task.value().item();
      if (!std::isfinite(task_value)) {
        throw NumericDomainError("non-finite training loss at step " + std::to_string(step));
      }
      loss_sum += task_value;
      ++loss_count;

      Var objective = task;
      AuxTerms terms;
      if (!en.empty()) {
        terms = attach_aux_losses(tape, model, pass, en, cfg.eps);
        for (std::size_t l = 0; l < en.size(); ++l) aux_sum[l] += terms.loss[l].value().item();
        objective = task + terms.total();
      }
      tape.backward(objective);

      const double lr = cfg.learning_rate() * decay;
      for (std::size_t i = 0; i < model.params.size(); ++i) {
        const Tensor g = tape.grad(bound.vars[i]);
        Tensor& v = velocity[i];
        Tensor& w = model.params[i].value;
        for (std::size_t k = 0; k < w.size(); ++k) {
          v[k] = cfg.momentum * v[k] + g[k];
          w[k] -= lr * v[k];
          if (!std::isfinite(w[k]))
            throw NumericDomainError("non-finite weight in " + model.params[i].name + " at step " + std::to_string(step));
        }
      }
      for (std::size_t l = 0; l < model.norms.size(); ++l)
        for (const auto& m : pass.norms[l].moments) model.norms[l].ema = ema_update(model.norms[l].ema, m);
      if (!en.empty()) {
        try {
          apply_aux_gradients(tape, terms, en, cfg.en.lr * decay, cfg.en.momentum);
        } catch (const NumericDomainError& e) {
          throw NumericDomainError(std::string(e.what()) + " at step " + std::to_string(step));
        }
      }
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    for (auto& a : aux_sum) a /= static_cast<double>(std::max<std::size_t>(loss_count, 1));
    rec.aux_loss = aux_sum;
    rec.en = en;
    for (std::size_t l = 0; l < en.size(); ++l) model.norms[l].en = en[l];
    if (opt.evaluate_each_epoch) rec.eval = evaluate_all_modes(model, data.eval, B, cfg.eps, cfg.eval_batch);
    result.record.epochs.push_back(std::move(rec));
  }

  result.steps = step;
  result.checkpoint = make_checkpoint(model, cfg, step);
  result.model = std::move(model);
  return result;
}

inline TrainResult train(const RunConfig& cfg, const TrainOptions& opt = {}) { return train(cfg, load_datasets(cfg), opt); }

/// One training run per microbatch size, all sharing the base config's seed.
inline std::vector<TrainResult> sweep(const RunConfig& base, const std::vector<std::size_t>& microbatch_sizes,
                                      const DatasetPair& data) {
  std::vector<TrainResult> out;
  for (auto b : microbatch_sizes) {
    RunConfig cfg = base;
    cfg.norm_microbatch = b;
    cfg.run_id = "B" + std::to_string(b) + "_s" + std::to_string(base.seed);
    out.push_back(train(cfg, data));
  }
  return out;
}

/// Offline EnParams estimation on a frozen checkpoint; returns a new checkpoint
/// whose weights and EMA are byte-identical to the input.
inline Checkpoint estimate_offline_cmd(const Checkpoint& ck, const Dataset& data, OfflineOptions opt,
                                       OfflineEstimate* details = nullptr) {
  const RunConfig cfg = config_from_checkpoint(ck);
  Model model = model_from_checkpoint(ck);
  if (opt.microbatch == 0) opt.microbatch = cfg.norm_microbatch;
  opt.eps = cfg.eps;
  OfflineEstimate est = estimate_offline(model, data, opt);
  for (std::size_t l = 0; l < model.norms.size(); ++l) model.norms[l].en = est.params[l];
  if (details) *details = std::move(est);
  return make_checkpoint(model, cfg, step_from_checkpoint(ck));
}

}  // namespace evalnorm
