#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "evalnorm/errors.hpp"

namespace evalnorm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Row-major strides; broadcast dimensions are not special-cased here.
inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

/// Result shape of broadcasting `a` against `b`. Dimensions are aligned from
/// the trailing end; a pair is compatible when equal or when either is 1.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ConfigError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[rank - 1 - i] = da == 1 ? db : da;
  }
  return out;
}

/// Dense row-major array of doubles. Plain value type: copies are deep.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_size(shape_)) {
      throw ConfigError("tensor of shape " + shape_string(shape_) + " needs " +
                        std::to_string(shape_size(shape_)) + " values, got " +
                        std::to_string(values_.size()));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double item() const {
    if (values_.size() != 1) throw ConfigError("item() on tensor of shape " + shape_string(shape_));
    return values_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ConfigError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), values_);
  }

  /// Rows [begin, end) along axis 0.
  Tensor rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin > end || end > shape_[0]) throw ConfigError("row range out of bounds");
    Shape s = shape_;
    s[0] = end - begin;
    const std::size_t stride = shape_[0] ? size() / shape_[0] : 0;
    return Tensor(std::move(s), std::vector<double>(values_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                    values_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

/// Walks an output shape in row-major order and reports the matching offset
/// in an input that broadcasts to it.
class BroadcastIndexer {
 public:
  BroadcastIndexer(const Shape& input, const Shape& output) : out_(output), index_(output.size(), 0) {
    strides_.assign(output.size(), 0);
    const auto in_strides = row_major_strides(input);
    const std::size_t offset = output.size() - input.size();
    for (std::size_t i = 0; i < input.size(); ++i) {
      if (input[i] != 1) strides_[offset + i] = in_strides[i];
    }
  }

  std::size_t offset() const noexcept { return pos_; }

  void next() noexcept {
    for (std::size_t d = out_.size(); d-- > 0;) {
      if (++index_[d] < out_[d]) {
        pos_ += strides_[d];
        return;
      }
      pos_ -= strides_[d] * (index_[d] - 1);
      index_[d] = 0;
    }
  }

 private:
  Shape out_;
  std::vector<std::size_t> strides_;
  std::vector<std::size_t> index_;
  std::size_t pos_ = 0;
};

/// Elementwise binary map with broadcasting.
template <class F>
Tensor broadcast_map(const Tensor& a, const Tensor& b, F&& f) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  Tensor out(broadcast_shapes(a.shape(), b.shape()));
  BroadcastIndexer ia(a.shape(), out.shape());
  BroadcastIndexer ib(b.shape(), out.shape());
  for (std::size_t i = 0; i < out.size(); ++i, ia.next(), ib.next()) out[i] = f(a[ia.offset()], b[ib.offset()]);
  return out;
}

template <class F>
Tensor unary_map(const Tensor& a, F&& f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

/// Sums `grad` (shaped like a broadcast result) back down to `target` shape.
inline void accumulate_reduced(const Tensor& grad, Tensor& target) {
  if (grad.shape() == target.shape()) {
    for (std::size_t i = 0; i < grad.size(); ++i) target[i] += grad[i];
    return;
  }
  BroadcastIndexer it(target.shape(), grad.shape());
  for (std::size_t i = 0; i < grad.size(); ++i, it.next()) target[it.offset()] += grad[i];
}

inline Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (broadcast_shapes(a.shape(), shape) != shape) {
    throw ConfigError("cannot broadcast " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  Tensor out(shape);
  BroadcastIndexer it(a.shape(), shape);
  for (std::size_t i = 0; i < out.size(); ++i, it.next()) out[i] = a[it.offset()];
  return out;
}

/// Normalized, sorted, de-duplicated axis list; throws on out-of-range axes.
inline std::vector<std::size_t> canonical_axes(std::vector<std::size_t> axes, std::size_t rank) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  if (!axes.empty() && axes.back() >= rank) throw ConfigError("reduction axis out of range");
  return axes;
}

/// Shape after reducing `axes` with keepdim semantics (reduced extents become 1).
inline Shape reduced_shape(const Shape& shape, const std::vector<std::size_t>& axes) {
  Shape out = shape;
  for (auto a : axes) out[a] = 1;
  return out;
}

inline Shape squeeze_axes(const Shape& shape, const std::vector<std::size_t>& axes) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (!std::binary_search(axes.begin(), axes.end(), i)) out.push_back(shape[i]);
  }
  return out;
}

inline Tensor sum_axes(const Tensor& a, std::vector<std::size_t> axes, bool keepdim) {
  axes = canonical_axes(std::move(axes), a.rank());
  const Shape kept = reduced_shape(a.shape(), axes);
  Tensor out(kept);
  accumulate_reduced(a, out);
  if (!keepdim) return out.reshaped(squeeze_axes(a.shape(), axes));
  return out;
}

}  // namespace evalnorm
