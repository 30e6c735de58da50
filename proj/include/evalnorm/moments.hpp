#pragma once

// Per-channel first and second moments and the algebra that relates them.
//
// Every variance here is the biased (population) variance, sum((x - mean)^2) / n.
// The combination rule below is an exact identity only under that convention.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "evalnorm/errors.hpp"
#include "evalnorm/tensor.hpp"

namespace evalnorm {

struct MomentPair {
  std::vector<double> mean;
  std::vector<double> variance;
  /// Scalar elements aggregated per channel.
  std::size_t count = 1;

  std::size_t channels() const noexcept { return mean.size(); }
  friend bool operator==(const MomentPair&, const MomentPair&) = default;
};

/// Layout of an activation tensor [N, C, spatial...].
struct ChannelLayout {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t spatial = 1;

  static ChannelLayout of(const Shape& shape) {
    if (shape.size() < 2) throw ConfigError("expected [N, C, ...] activation, got " + shape_string(shape));
    ChannelLayout l;
    l.batch = shape[0];
    l.channels = shape[1];
    for (std::size_t d = 2; d < shape.size(); ++d) l.spatial *= shape[d];
    return l;
  }
};

namespace detail {

/// Welford accumulation over samples [first, first + count) of a [N, C, S] buffer.
inline MomentPair channel_moments(std::span<const double> values, const ChannelLayout& l, std::size_t first,
                                  std::size_t count) {
  MomentPair m;
  m.mean.assign(l.channels, 0.0);
  m.variance.assign(l.channels, 0.0);
  m.count = count * l.spatial;
  for (std::size_t c = 0; c < l.channels; ++c) {
    double mu = 0.0, m2 = 0.0;
    std::size_t k = 0;
    for (std::size_t n = first; n < first + count; ++n) {
      const double* p = values.data() + (n * l.channels + c) * l.spatial;
      for (std::size_t s = 0; s < l.spatial; ++s) {
        ++k;
        const double delta = p[s] - mu;
        mu += delta / static_cast<double>(k);
        m2 += delta * (p[s] - mu);
      }
    }
    m.mean[c] = mu;
    m.variance[c] = m2 > 0.0 ? m2 / static_cast<double>(k) : 0.0;
  }
  return m;
}

inline void check_unit_interval(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(what) + " must lie in [0,1], got " + std::to_string(v));
}

}  // namespace detail

/// Per-channel moments over the batch axis and every spatial axis.
inline MomentPair batch_moments(const Tensor& x) {
  const auto l = ChannelLayout::of(x.shape());
  if (l.batch == 0) throw EmptyBatchError("batch_moments on an empty batch");
  return detail::channel_moments(x.values(), l, 0, l.batch);
}

/// Moments of a single sample [1, C, ...] over its spatial extent.
inline MomentPair instance_moments(const Tensor& x) {
  const auto l = ChannelLayout::of(x.shape());
  if (l.batch == 0) throw EmptyBatchError("instance_moments on an empty batch");
  if (l.batch != 1) throw ConfigError("instance_moments expects a single sample, got N=" + std::to_string(l.batch));
  return detail::channel_moments(x.values(), l, 0, 1);
}

/// Moments of the union of two disjoint sets given each set's moments:
///   mean = a*mu_a + (1-a)*mu_b
///   var  = a*var_a + (1-a)*var_b + a(1-a)(mu_a - mu_b)^2
/// Exact when alpha = |a| / (|a| + |b|).
inline MomentPair combine_moments(const MomentPair& a, const MomentPair& b, double alpha) {
  detail::check_unit_interval(alpha, "combine alpha");
  if (a.channels() != b.channels()) {
    throw ConfigError("combine_moments channel mismatch: " + std::to_string(a.channels()) + " vs " +
                      std::to_string(b.channels()));
  }
  if (alpha == 1.0) return a;
  if (alpha == 0.0) return b;
  MomentPair out;
  out.count = a.count + b.count;
  out.mean.resize(a.channels());
  out.variance.resize(a.channels());
  const double beta = 1.0 - alpha;
  for (std::size_t c = 0; c < a.channels(); ++c) {
    const double gap = a.mean[c] - b.mean[c];
    out.mean[c] = alpha * a.mean[c] + beta * b.mean[c];
    out.variance[c] = alpha * a.variance[c] + beta * b.variance[c] + alpha * beta * gap * gap;
  }
  return out;
}

/// Mixing weight for the fixed rule of thumb: 1/B^2.
inline double rule_of_thumb_alpha(std::size_t microbatch) {
  if (microbatch == 0) throw ConfigError("microbatch size must be >= 1");
  const double b = static_cast<double>(microbatch);
  return 1.0 / (b * b);
}

}  // namespace evalnorm
