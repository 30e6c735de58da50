#pragma once

// CSV emitters and the train/eval activation-distribution comparison.
//
// Schemas (column order is fixed):
//   records    run_id,B,G,mode,epoch,train_loss,eval_acc
//   en table   run_id,layer_id,alpha_hat,beta_hat
//   histogram  bin_lo,bin_hi,count_trainbn,count_ema,count_en
// Numbers are written as shortest round-trip decimals.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "evalnorm/errors.hpp"
#include "evalnorm/harness.hpp"
#include "evalnorm/model.hpp"
#include "evalnorm/text.hpp"

namespace evalnorm {

inline constexpr const char* kRecordsHeader = "run_id,B,G,mode,epoch,train_loss,eval_acc";
inline constexpr const char* kEnTableHeader = "run_id,layer_id,alpha_hat,beta_hat";
inline constexpr const char* kHistogramHeader = "bin_lo,bin_hi,count_trainbn,count_ema,count_en";

struct RecordRow {
  std::string run_id;
  std::size_t microbatch = 0;
  std::size_t sgd_batch = 0;
  std::string mode;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double eval_acc = 0.0;
  friend bool operator==(const RecordRow&, const RecordRow&) = default;
};

inline std::vector<RecordRow> record_rows(const RunRecord& r) {
  std::vector<RecordRow> rows;
  for (const auto& e : r.epochs)
    for (const auto& m : e.eval) rows.push_back({r.run_id, r.microbatch, r.sgd_batch, m.mode, e.epoch, e.train_loss, m.accuracy});
  return rows;
}

inline std::string records_csv(const std::vector<RecordRow>& rows) {
  std::string out = std::string(kRecordsHeader) + "\n";
  for (const auto& r : rows) {
    out += r.run_id + "," + std::to_string(r.microbatch) + "," + std::to_string(r.sgd_batch) + "," + r.mode + "," +
           std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," + format_double(r.eval_acc) + "\n";
  }
  return out;
}

inline std::string records_csv(const std::vector<RunRecord>& records) {
  std::vector<RecordRow> rows;
  for (const auto& r : records) {
    auto more = record_rows(r);
    rows.insert(rows.end(), more.begin(), more.end());
  }
  return records_csv(rows);
}

inline std::vector<RecordRow> parse_records_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kRecordsHeader) throw ConfigError("records CSV: bad header");
  std::vector<RecordRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split(trim(line), ',');
    if (f.size() != 7) throw ConfigError("records CSV line " + std::to_string(lineno) + ": expected 7 fields");
    rows.push_back({f[0], static_cast<std::size_t>(parse_uint(f[1])), static_cast<std::size_t>(parse_uint(f[2])), f[3],
                    static_cast<std::size_t>(parse_uint(f[4])), parse_double(f[5]), parse_double(f[6])});
  }
  return rows;
}

inline std::string en_table_csv(const std::string& run_id, const std::vector<EnParams>& params) {
  std::string out = std::string(kEnTableHeader) + "\n";
  for (const auto& p : params)
    out += run_id + "," + p.layer_id + "," + format_double(p.alpha_hat) + "," + format_double(p.beta_hat) + "\n";
  return out;
}

inline std::vector<EnParams> model_en_params(const Model& m) {
  std::vector<EnParams> out;
  for (const auto& n : m.norms)
    if (n.en) out.push_back(*n.en);
  return out;
}

/// Final-epoch accuracy per run (rows) and mode (columns), fixed-width text.
inline std::string summary_text(const std::vector<RecordRow>& rows) {
  std::vector<std::string> runs, modes;
  std::map<std::string, std::size_t> last_epoch;
  for (const auto& r : rows) {
    if (std::find(runs.begin(), runs.end(), r.run_id) == runs.end()) runs.push_back(r.run_id);
    if (std::find(modes.begin(), modes.end(), r.mode) == modes.end()) modes.push_back(r.mode);
    last_epoch[r.run_id] = std::max(last_epoch[r.run_id], r.epoch);
  }
  std::ostringstream os;
  os << "final-epoch eval accuracy\n";
  os << "run_id";
  for (const auto& m : modes) os << '\t' << m;
  os << '\n';
  for (const auto& run : runs) {
    os << run;
    for (const auto& m : modes) {
      os << '\t';
      bool found = false;
      for (const auto& r : rows)
        if (r.run_id == run && r.mode == m && r.epoch == last_epoch[run]) {
          os << format_double(r.eval_acc);
          found = true;
        }
      if (!found) os << '-';
    }
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Activation histograms
// ---------------------------------------------------------------------------

inline constexpr std::size_t kHistogramBins = 64;
inline constexpr double kHistogramLo = -5.0;
inline constexpr double kHistogramHi = 5.0;

/// 64 equal bins over [-5, 5) with an underflow slot first and an overflow
/// slot last.
struct Histogram {
  std::array<std::size_t, kHistogramBins + 2> counts{};

  static double width() { return (kHistogramHi - kHistogramLo) / static_cast<double>(kHistogramBins); }

  void add(double v) {
    if (v < kHistogramLo) {
      ++counts.front();
    } else if (v >= kHistogramHi) {
      ++counts.back();
    } else {
      auto bin = static_cast<std::size_t>((v - kHistogramLo) / width());
      ++counts[1 + std::min(bin, kHistogramBins - 1)];
    }
  }

  std::size_t total() const {
    std::size_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
};

/// 1-Wasserstein distance between two histograms, with each slot's mass placed
/// at its center (underflow/overflow centers sit half a bin-width outside the range).
inline double wasserstein1(const Histogram& a, const Histogram& b) {
  const double na = static_cast<double>(a.total()), nb = static_cast<double>(b.total());
  if (na == 0.0 || nb == 0.0) throw ConfigError("wasserstein1 on an empty histogram");
  double fa = 0.0, fb = 0.0, w1 = 0.0;
  for (std::size_t k = 0; k + 1 < a.counts.size(); ++k) {
    fa += static_cast<double>(a.counts[k]) / na;
    fb += static_cast<double>(b.counts[k]) / nb;
    w1 += std::fabs(fa - fb) * Histogram::width();
  }
  return w1;
}

/// Pre-affine normalized activations of every normalization layer, one tensor
/// per layer, for the first floor(N/B)*B examples of `data`. In TrainBN mode
/// they are normalized in consecutive microbatches of B.
inline std::vector<Tensor> collect_normalized(const Model& model, const Dataset& data, const NormMode& mode,
                                              std::size_t microbatch, double eps = kDefaultEps) {
  if (microbatch == 0) throw ConfigError("microbatch must be >= 1");
  const std::size_t usable = data.size() / microbatch * microbatch;
  if (usable == 0) throw ConfigError("dataset smaller than one microbatch");
  const std::size_t chunk = microbatch * std::max<std::size_t>(1, 256 / microbatch);
  std::vector<std::vector<double>> values(model.norms.size());
  std::vector<Shape> shapes(model.norms.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < usable; start += chunk) {
    const std::size_t end = std::min(usable, start + chunk);
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    Tape tape;
    const auto bound = bind_parameters(tape, model, false);
    const auto pass = forward(tape, model, bound, tape.constant(data.gather(idx)), mode, microbatch, eps);
    for (std::size_t l = 0; l < pass.norms.size(); ++l) {
      const Tensor& t = pass.norms[l].normalized.value();
      values[l].insert(values[l].end(), t.values().begin(), t.values().end());
      shapes[l] = t.shape();
    }
  }
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < values.size(); ++l) {
    Shape s = shapes[l];
    s[0] = usable;
    out.emplace_back(std::move(s), std::move(values[l]));
  }
  return out;
}

inline Histogram channel_histogram(const Tensor& normalized, std::size_t channel) {
  const auto l = ChannelLayout::of(normalized.shape());
  if (channel >= l.channels) throw ConfigError("channel " + std::to_string(channel) + " out of range");
  Histogram h;
  for (std::size_t n = 0; n < l.batch; ++n) {
    const std::size_t base = (n * l.channels + channel) * l.spatial;
    for (std::size_t s = 0; s < l.spatial; ++s) h.add(normalized[base + s]);
  }
  return h;
}

struct HistogramReport {
  std::string layer_id;
  std::size_t channel = 0;
  Histogram train_bn, ema, en;
  double distance_ema = 0.0;
  double distance_en = 0.0;
};

inline std::string histogram_csv(const HistogramReport& r) {
  std::string out = std::string(kHistogramHeader) + "\n";
  const double w = Histogram::width();
  for (std::size_t k = 0; k < r.train_bn.counts.size(); ++k) {
    const double lo = k == 0 ? -INFINITY : kHistogramLo + static_cast<double>(k - 1) * w;
    const double hi = k == 0 ? kHistogramLo : (k == kHistogramBins + 1 ? INFINITY : kHistogramLo + static_cast<double>(k) * w);
    out += format_double(lo) + "," + format_double(hi) + "," + std::to_string(r.train_bn.counts[k]) + "," +
           std::to_string(r.ema.counts[k]) + "," + std::to_string(r.en.counts[k]) + "\n";
  }
  return out;
}

/// Per-layer activations under TrainBN (microbatches of B), EvalEMA and EvalEN.
struct LayerActivations {
  std::vector<Tensor> train_bn, ema, en;
};

inline LayerActivations collect_all_modes(const Model& model, const Dataset& data, std::size_t microbatch,
                                          double eps = kDefaultEps) {
  if (!model.has_en_params()) throw ConfigError("histograms need EnParams in the checkpoint");
  return {collect_normalized(model, data, NormMode::train_bn(), microbatch, eps),
          collect_normalized(model, data, NormMode::eval_ema(), microbatch, eps),
          collect_normalized(model, data, NormMode::eval_en(), microbatch, eps)};
}

inline HistogramReport histogram_report(const Model& model, const LayerActivations& acts, std::size_t layer,
                                        std::size_t channel) {
  if (layer >= model.norms.size()) throw ConfigError("normalization layer " + std::to_string(layer) + " out of range");
  HistogramReport r;
  r.layer_id = model.norms[layer].id;
  r.channel = channel;
  r.train_bn = channel_histogram(acts.train_bn[layer], channel);
  r.ema = channel_histogram(acts.ema[layer], channel);
  r.en = channel_histogram(acts.en[layer], channel);
  r.distance_ema = wasserstein1(r.ema, r.train_bn);
  r.distance_en = wasserstein1(r.en, r.train_bn);
  return r;
}

/// Histograms of one channel of one layer plus both distances to TrainBN.
inline HistogramReport emit_histograms(const Model& model, const Dataset& data, std::size_t layer, std::size_t channel,
                                       std::size_t microbatch, double eps = kDefaultEps) {
  if (layer >= model.norms.size()) throw ConfigError("normalization layer " + std::to_string(layer) + " out of range");
  if (channel >= model.norms[layer].ema.channels()) throw ConfigError("channel " + std::to_string(channel) + " out of range");
  return histogram_report(model, collect_all_modes(model, data, microbatch, eps), layer, channel);
}

struct LayerDiscrepancy {
  std::string layer_id;
  double distance_ema = 0.0;
  double distance_en = 0.0;
};

/// Channel-averaged distances to TrainBN for every normalization layer.
inline std::vector<LayerDiscrepancy> layer_discrepancies(const Model& model, const Dataset& data,
                                                         std::size_t microbatch, double eps = kDefaultEps) {
  const auto acts = collect_all_modes(model, data, microbatch, eps);
  std::vector<LayerDiscrepancy> out;
  for (std::size_t l = 0; l < model.norms.size(); ++l) {
    LayerDiscrepancy d{model.norms[l].id, 0.0, 0.0};
    const std::size_t channels = model.norms[l].ema.channels();
    for (std::size_t c = 0; c < channels; ++c) {
      const auto r = histogram_report(model, acts, l, c);
      d.distance_ema += r.distance_ema / static_cast<double>(channels);
      d.distance_en += r.distance_en / static_cast<double>(channels);
    }
    out.push_back(d);
  }
  return out;
}

}  // namespace evalnorm
