#pragma once

// Run configuration as a flat `key = value` text file. Lines starting with '#'
// are comments. Keys:
//
//   run_id               label used in emitted CSVs (default: B<norm_microbatch>_s<seed>)
//   seed                 model init / shuffling seed
//   output_dir           directory for checkpoint and CSVs
//   model.kind           mlp | cnn
//   model.widths         hidden widths (mlp) or conv channels (cnn), comma separated
//   data.kind            synth | idx
//   data.classes         synthetic: class count
//   data.shape           synthetic: feature shape, e.g. 16 or 1,8,8
//   data.train_per_class / data.eval_per_class / data.class_sep / data.seed
//   data.train_images / data.train_labels / data.eval_images / data.eval_labels   idx paths
//   data.train_limit / data.eval_limit                                            idx subsets (0 = all)
//   epochs, sgd_batch, norm_microbatch
//   base_lr              number, or auto = 0.05 * sgd_batch / 128
//   momentum, ema_decay, eps, eval_batch
//   en.enabled           online EvalNorm estimation during training
//   en.init              number, or auto = 1 / norm_microbatch
//   en.lr, en.momentum
//   en.projection        clamp (the only supported projection)

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "evalnorm/data.hpp"
#include "evalnorm/errors.hpp"
#include "evalnorm/model.hpp"
#include "evalnorm/text.hpp"

namespace evalnorm {

struct DataConfig {
  std::string kind = "synth";
  std::size_t classes = 4;
  Shape shape{16};
  std::size_t train_per_class = 500;
  std::size_t eval_per_class = 250;
  double class_sep = 3.0;
  std::uint64_t seed = 1234;
  std::string train_images, train_labels, eval_images, eval_labels;
  std::size_t train_limit = 10000;
  std::size_t eval_limit = 2000;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct EnConfig {
  bool enabled = true;
  std::optional<double> init;  // nullopt: 1/B
  double lr = 0.01;
  double momentum = 0.9;
  std::string projection = "clamp";

  friend bool operator==(const EnConfig&, const EnConfig&) = default;
};

struct RunConfig {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  ModelKind model_kind = ModelKind::MLP;
  std::vector<std::size_t> widths{64, 64, 64};
  DataConfig data;
  std::size_t epochs = 20;
  std::size_t sgd_batch = 64;
  std::size_t norm_microbatch = 2;
  std::optional<double> base_lr;  // nullopt: 0.05 * G / 128
  double momentum = 0.9;
  double ema_decay = kDefaultEmaDecay;
  double eps = kDefaultEps;
  std::size_t eval_batch = 256;
  EnConfig en;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  double learning_rate() const { return base_lr ? *base_lr : 0.05 * static_cast<double>(sgd_batch) / 128.0; }
  double en_init() const { return en.init ? *en.init : 1.0 / static_cast<double>(norm_microbatch); }
  std::string effective_run_id() const {
    return run_id.empty() ? "B" + std::to_string(norm_microbatch) + "_s" + std::to_string(seed) : run_id;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (sgd_batch < 1 || norm_microbatch < 1) throw ConfigError("batch sizes must be >= 1");
    if (sgd_batch % norm_microbatch != 0) {
      throw ConfigError("norm_microbatch " + std::to_string(norm_microbatch) + " does not divide sgd_batch " +
                        std::to_string(sgd_batch));
    }
    if (!(learning_rate() > 0.0)) throw ConfigError("base_lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in (0,1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (eval_batch < 1) throw ConfigError("eval_batch must be >= 1");
    if (!(en.lr > 0.0)) throw ConfigError("en.lr must be positive");
    if (!(en.momentum >= 0.0 && en.momentum < 1.0)) throw ConfigError("en.momentum must lie in [0,1)");
    if (en.projection != "clamp") throw ConfigError("en.projection must be clamp");
    const double init = en_init();
    if (!(init >= 0.0 && init <= 1.0)) throw ConfigError("en.init must lie in [0,1]");
    if (data.kind != "synth" && data.kind != "idx") throw ConfigError("data.kind must be synth or idx");
    model_spec().validate();
  }

  ModelSpec model_spec() const {
    ModelSpec s;
    s.kind = model_kind;
    s.widths = widths;
    if (data.kind == "synth") {
      s.input_shape = data.shape;
      s.num_classes = data.classes;
    } else {
      s.input_shape = model_kind == ModelKind::MLP ? Shape{784} : Shape{1, 28, 28};
      s.num_classes = 10;
    }
    return s;
  }
};

namespace detail {

struct ConfigKey {
  const char* name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::string opt_double(const std::optional<double>& v) { return v ? format_double(*v) : "auto"; }
inline std::optional<double> parse_opt_double(const std::string& s) {
  if (trim(s) == "auto") return std::nullopt;
  return parse_double(s);
}

inline const std::vector<ConfigKey>& config_keys() {
  using C = RunConfig;
  using S = const std::string&;
  static const std::vector<ConfigKey> keys = {
      {"run_id", [](const C& c) { return c.run_id; }, [](C& c, S v) { c.run_id = std::string(trim(v)); }},
      {"seed", [](const C& c) { return std::to_string(c.seed); }, [](C& c, S v) { c.seed = parse_uint(v); }},
      {"output_dir", [](const C& c) { return c.output_dir; }, [](C& c, S v) { c.output_dir = std::string(trim(v)); }},
      {"model.kind", [](const C& c) { return to_string(c.model_kind); },
       [](C& c, S v) { c.model_kind = parse_model_kind(std::string(trim(v))); }},
      {"model.widths", [](const C& c) { return join_sizes(c.widths); }, [](C& c, S v) { c.widths = parse_size_list(v); }},
      {"data.kind", [](const C& c) { return c.data.kind; }, [](C& c, S v) { c.data.kind = std::string(trim(v)); }},
      {"data.classes", [](const C& c) { return std::to_string(c.data.classes); },
       [](C& c, S v) { c.data.classes = parse_uint(v); }},
      {"data.shape", [](const C& c) { return join_sizes(c.data.shape); }, [](C& c, S v) { c.data.shape = parse_size_list(v); }},
      {"data.train_per_class", [](const C& c) { return std::to_string(c.data.train_per_class); },
       [](C& c, S v) { c.data.train_per_class = parse_uint(v); }},
      {"data.eval_per_class", [](const C& c) { return std::to_string(c.data.eval_per_class); },
       [](C& c, S v) { c.data.eval_per_class = parse_uint(v); }},
      {"data.class_sep", [](const C& c) { return format_double(c.data.class_sep); },
       [](C& c, S v) { c.data.class_sep = parse_double(v); }},
      {"data.seed", [](const C& c) { return std::to_string(c.data.seed); }, [](C& c, S v) { c.data.seed = parse_uint(v); }},
      {"data.train_images", [](const C& c) { return c.data.train_images; },
       [](C& c, S v) { c.data.train_images = std::string(trim(v)); }},
      {"data.train_labels", [](const C& c) { return c.data.train_labels; },
       [](C& c, S v) { c.data.train_labels = std::string(trim(v)); }},
      {"data.eval_images", [](const C& c) { return c.data.eval_images; },
       [](C& c, S v) { c.data.eval_images = std::string(trim(v)); }},
      {"data.eval_labels", [](const C& c) { return c.data.eval_labels; },
       [](C& c, S v) { c.data.eval_labels = std::string(trim(v)); }},
      {"data.train_limit", [](const C& c) { return std::to_string(c.data.train_limit); },
       [](C& c, S v) { c.data.train_limit = parse_uint(v); }},
      {"data.eval_limit", [](const C& c) { return std::to_string(c.data.eval_limit); },
       [](C& c, S v) { c.data.eval_limit = parse_uint(v); }},
      {"epochs", [](const C& c) { return std::to_string(c.epochs); }, [](C& c, S v) { c.epochs = parse_uint(v); }},
      {"sgd_batch", [](const C& c) { return std::to_string(c.sgd_batch); }, [](C& c, S v) { c.sgd_batch = parse_uint(v); }},
      {"norm_microbatch", [](const C& c) { return std::to_string(c.norm_microbatch); },
       [](C& c, S v) { c.norm_microbatch = parse_uint(v); }},
      {"base_lr", [](const C& c) { return opt_double(c.base_lr); }, [](C& c, S v) { c.base_lr = parse_opt_double(v); }},
      {"momentum", [](const C& c) { return format_double(c.momentum); }, [](C& c, S v) { c.momentum = parse_double(v); }},
      {"ema_decay", [](const C& c) { return format_double(c.ema_decay); }, [](C& c, S v) { c.ema_decay = parse_double(v); }},
      {"eps", [](const C& c) { return format_double(c.eps); }, [](C& c, S v) { c.eps = parse_double(v); }},
      {"eval_batch", [](const C& c) { return std::to_string(c.eval_batch); }, [](C& c, S v) { c.eval_batch = parse_uint(v); }},
      {"en.enabled", [](const C& c) { return std::string(c.en.enabled ? "true" : "false"); },
       [](C& c, S v) { c.en.enabled = parse_bool(v); }},
      {"en.init", [](const C& c) { return opt_double(c.en.init); }, [](C& c, S v) { c.en.init = parse_opt_double(v); }},
      {"en.lr", [](const C& c) { return format_double(c.en.lr); }, [](C& c, S v) { c.en.lr = parse_double(v); }},
      {"en.momentum", [](const C& c) { return format_double(c.en.momentum); },
       [](C& c, S v) { c.en.momentum = parse_double(v); }},
      {"en.projection", [](const C& c) { return c.en.projection; },
       [](C& c, S v) { c.en.projection = std::string(trim(v)); }},
  };
  return keys;
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (key == k.name) {
      try {
        k.set(cfg, value);
      } catch (const ConfigError& e) {
        throw ConfigError("config key " + key + ": " + e.what());
      }
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Applies "key=value" as an override.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override must look like key=value: " + assignment);
  set_config_value(cfg, std::string(trim(assignment.substr(0, eq))), std::string(trim(assignment.substr(eq + 1))));
}

inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw ConfigError("config line " + std::to_string(lineno) + ": missing '='");
    set_config_value(base, std::string(trim(t.substr(0, eq))), std::string(trim(t.substr(eq + 1))));
  }
  return base;
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += std::string(k.name) + " = " + k.get(cfg) + "\n";
  return out;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

struct DatasetPair {
  Dataset train;
  Dataset eval;
};

inline DatasetPair load_datasets(const RunConfig& cfg) {
  DatasetPair d;
  if (cfg.data.kind == "synth") {
    d.train = synth_gaussians(cfg.data.classes, cfg.data.shape, cfg.data.train_per_class, cfg.data.seed,
                              cfg.data.class_sep, Split::Train);
    d.eval = synth_gaussians(cfg.data.classes, cfg.data.shape, cfg.data.eval_per_class, cfg.data.seed,
                             cfg.data.class_sep, Split::Eval);
  } else {
    const auto layout = cfg.model_kind == ModelKind::MLP ? IdxLayout::Flat : IdxLayout::Image;
    d.train = read_idx(cfg.data.train_images, cfg.data.train_labels, layout, Split::Train).head(cfg.data.train_limit);
    d.eval = read_idx(cfg.data.eval_images, cfg.data.eval_labels, layout, Split::Eval).head(cfg.data.eval_limit);
  }
  d.train.validate();
  d.eval.validate();
  return d;
}

/// Model spec adjusted to the loaded data (IDX files decide input shape and classes).
inline ModelSpec model_spec_for(const RunConfig& cfg, const Dataset& train) {
  ModelSpec s = cfg.model_spec();
  s.input_shape = train.feature_shape;
  s.num_classes = train.num_classes;
  return s;
}

}  // namespace evalnorm
