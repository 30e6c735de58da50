#pragma once

// Small reference models: an MLP with batch norm after hidden layers and a
// two-block 3x3 CNN. Both route every normalization layer through a NormMode.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "evalnorm/autodiff.hpp"
#include "evalnorm/en_params.hpp"
#include "evalnorm/errors.hpp"
#include "evalnorm/normalization.hpp"
#include "evalnorm/tensor.hpp"

namespace evalnorm {

enum class ModelKind { MLP, SmallCNN };

inline std::string to_string(ModelKind k) { return k == ModelKind::MLP ? "mlp" : "cnn"; }

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "mlp") return ModelKind::MLP;
  if (s == "cnn") return ModelKind::SmallCNN;
  throw ConfigError("unknown model kind '" + s + "' (expected mlp or cnn)");
}

struct ModelSpec {
  ModelKind kind = ModelKind::MLP;
  /// Feature shape of one example: [D] for the MLP, [C, H, W] for the CNN.
  Shape input_shape{16};
  /// Hidden widths (MLP) or conv channel counts (CNN).
  std::vector<std::size_t> widths{64, 64};
  /// Batch norm after hidden layer i; empty means every hidden layer.
  std::vector<bool> normalize;
  std::size_t num_classes = 4;

  bool normalized(std::size_t i) const { return normalize.empty() || normalize.at(i); }

  void validate() const {
    if (widths.empty()) throw ConfigError("model needs at least one hidden layer");
    for (auto w : widths)
      if (w < 1) throw ConfigError("layer widths must be >= 1");
    if (!normalize.empty() && normalize.size() != widths.size()) {
      throw ConfigError("normalization flags must match hidden layer count");
    }
    bool any = false;
    for (std::size_t i = 0; i < widths.size(); ++i) any = any || normalized(i);
    if (!any) throw ConfigError("model needs at least one normalization layer");
    if (num_classes < 2) throw ConfigError("need at least two classes");
    if (kind == ModelKind::MLP && input_shape.size() != 1) throw ConfigError("MLP input must be rank 1");
    if (kind == ModelKind::SmallCNN && input_shape.size() != 3) throw ConfigError("CNN input must be [C,H,W]");
    for (auto d : input_shape)
      if (d < 1) throw ConfigError("input extents must be >= 1");
  }
};

struct Parameter {
  std::string name;
  Tensor value;
};

struct NormLayer {
  std::string id;
  EmaState ema;
  std::optional<EnParams> en;
};

inline constexpr std::size_t kNoIndex = std::numeric_limits<std::size_t>::max();

/// Parameter indices for one hidden layer.
struct HiddenLayout {
  std::size_t weight = kNoIndex;
  std::size_t bias = kNoIndex;
  std::size_t gamma = kNoIndex;
  std::size_t beta = kNoIndex;
  std::size_t norm = kNoIndex;
};

struct Model {
  ModelSpec spec;
  std::vector<Parameter> params;
  std::vector<NormLayer> norms;
  std::vector<HiddenLayout> hidden;
  std::size_t head_weight = kNoIndex;
  std::size_t head_bias = kNoIndex;

  std::size_t find_param(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return i;
    throw ConfigError("no parameter named " + name);
  }

  std::size_t find_norm(const std::string& id) const {
    for (std::size_t i = 0; i < norms.size(); ++i)
      if (norms[i].id == id) return i;
    throw ConfigError("no normalization layer named " + id);
  }

  bool has_en_params() const {
    for (const auto& n : norms)
      if (!n.en) return false;
    return !norms.empty();
  }

  AffineParams affine(std::size_t hidden_index) const {
    const auto& h = hidden.at(hidden_index);
    return {params[h.gamma].value, params[h.beta].value, true};
  }
};

/// Deterministic initialization: He fan-in scaling for hidden weights, gamma = 1,
/// shift = 0, EMA at its neutral prior.
inline Model build(const ModelSpec& spec, std::uint64_t seed, double ema_decay = kDefaultEmaDecay) {
  spec.validate();
  Model m;
  m.spec = spec;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](Shape shape, double std) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = std * normal(rng);
    return t;
  };

  const bool cnn = spec.kind == ModelKind::SmallCNN;
  std::size_t in = spec.input_shape[0];
  for (std::size_t i = 0; i < spec.widths.size(); ++i) {
    const std::size_t out = spec.widths[i];
    HiddenLayout h;
    const std::string li = "layer" + std::to_string(i);
    const std::size_t fan_in = cnn ? in * 9 : in;
    h.weight = m.params.size();
    m.params.push_back({li + ".weight", gaussian(cnn ? Shape{out, in, 3, 3} : Shape{in, out},
                                                 std::sqrt(2.0 / static_cast<double>(fan_in)))});
    if (spec.normalized(i)) {
      const std::string id = "bn" + std::to_string(m.norms.size());
      h.norm = m.norms.size();
      h.gamma = m.params.size();
      m.params.push_back({id + ".gamma", Tensor::ones(Shape{out})});
      h.beta = m.params.size();
      m.params.push_back({id + ".beta", Tensor::zeros(Shape{out})});
      m.norms.push_back({id, EmaState::initial(out, ema_decay), std::nullopt});
    } else {
      h.bias = m.params.size();
      m.params.push_back({li + ".bias", cnn ? Tensor::zeros(Shape{out, 1, 1}) : Tensor::zeros(Shape{out})});
    }
    m.hidden.push_back(h);
    in = out;
  }
  m.head_weight = m.params.size();
  m.params.push_back({"head.weight", gaussian(Shape{in, spec.num_classes}, std::sqrt(1.0 / static_cast<double>(in)))});
  m.head_bias = m.params.size();
  m.params.push_back({"head.bias", Tensor::zeros(Shape{spec.num_classes})});
  return m;
}

/// Tape handles for every model parameter, in Model::params order.
struct ParamBinding {
  std::vector<Var> vars;
};

inline ParamBinding bind_parameters(Tape& tape, const Model& model, bool trainable) {
  ParamBinding b;
  b.vars.reserve(model.params.size());
  for (const auto& p : model.params) b.vars.push_back(trainable ? tape.leaf(p.value) : tape.constant(p.value));
  return b;
}

struct NormTrace {
  /// Input to the normalization layer.
  Var input;
  /// Pre-affine normalized activations.
  Var normalized;
  /// Per-microbatch moments (TrainBN only).
  std::vector<MomentPair> moments;
};

struct ForwardPass {
  Var logits;
  std::vector<NormTrace> norms;
};

/// Runs the model with every normalization layer in `mode`. In TrainBN mode
/// samples are normalized in contiguous microbatches of `group_size`
/// (0 = whole batch). Evaluation modes never touch model state.
inline ForwardPass forward(Tape& tape, const Model& model, const ParamBinding& bound, Var x, const NormMode& mode,
                           std::size_t group_size = 0, double eps = kDefaultEps) {
  const bool cnn = model.spec.kind == ModelKind::SmallCNN;
  Shape expect = model.spec.input_shape;
  expect.insert(expect.begin(), x.shape().empty() ? 0 : x.shape()[0]);
  if (x.shape() != expect) throw ConfigError("model input shape mismatch: " + shape_string(x.shape()));
  if (mode.kind == NormMode::Kind::EvalEN && !model.has_en_params()) {
    throw ConfigError("EvalEN requested but the model carries no EnParams");
  }

  ForwardPass pass;
  Var h = x;
  for (std::size_t i = 0; i < model.hidden.size(); ++i) {
    const HiddenLayout& L = model.hidden[i];
    h = cnn ? conv2d_3x3(h, bound.vars[L.weight]) : matmul(h, bound.vars[L.weight]);
    if (L.norm == kNoIndex) {
      h = h + bound.vars[L.bias];
    } else {
      const NormLayer& norm = model.norms[L.norm];
      NormTrace trace;
      trace.input = h;
      if (mode.kind == NormMode::Kind::TrainBN) {
        BnTrainOutput bn = bn_train_forward(h, bound.vars[L.gamma], bound.vars[L.beta], eps, group_size);
        trace.normalized = bn.normalized;
        trace.moments = std::move(bn.moments);
        h = bn.output;
      } else {
        Tensor normalized;
        switch (mode.kind) {
          case NormMode::Kind::EvalEMA:
            normalized = normalize_ema(h.value(), norm.ema, eps);
            break;
          case NormMode::Kind::EvalSimple:
            normalized = normalize_en(h.value(), norm.ema, {mode.alpha, mode.alpha}, eps);
            break;
          default:
            normalized = normalize_en(h.value(), norm.ema, norm.en->weights(), eps);
            break;
        }
        const AffineParams affine{bound.vars[L.gamma].value(), bound.vars[L.beta].value(), false};
        trace.normalized = tape.constant(normalized);
        h = tape.constant(apply_affine(normalized, affine));
      }
      pass.norms.push_back(std::move(trace));
    }
    h = relu(h);
  }
  if (cnn) h = mean(h, {2, 3});
  pass.logits = matmul(h, bound.vars[model.head_weight]) + bound.vars[model.head_bias];
  return pass;
}

/// Logits of an evaluation-mode forward pass, without gradients.
inline Tensor predict_logits(const Model& model, const Tensor& x, const NormMode& mode, double eps = kDefaultEps) {
  if (!mode.is_eval()) throw ConfigError("predict_logits needs an evaluation mode");
  Tape tape;
  const auto bound = bind_parameters(tape, model, false);
  return forward(tape, model, bound, tape.constant(x), mode, 0, eps).logits.value();
}

/// Mean softmax cross-entropy over the batch, log-sum-exp stabilized.
inline Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  const Tensor& Z = logits.value();
  if (Z.rank() != 2 || Z.dim(0) != labels.size()) throw ConfigError("cross-entropy shape mismatch");
  const std::size_t n = Z.dim(0), k = Z.dim(1);
  Tensor probs(Z.shape());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw ConfigError("label out of range");
    const double* z = Z.data() + i * k;
    double zmax = z[0];
    for (std::size_t j = 1; j < k; ++j) zmax = std::max(zmax, z[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(z[j] - zmax);
    const double lse = zmax + std::log(denom);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(z[j] - lse);
    loss += lse - z[y];
  }
  loss /= static_cast<double>(n);
  return logits.tape->record(Tensor::scalar(loss), {logits}, [probs = std::move(probs), labels, n, k](BackwardContext& c) {
    auto* g = c.input_grad(0);
    const double scale = c.grad_out()[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const double onehot = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
        (*g)[i * k + j] += scale * (probs[i * k + j] - onehot);
      }
  });
}

/// Index of the largest logit per row; ties resolve to the lowest index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.dim(0));
  const std::size_t k = logits.dim(1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace evalnorm
