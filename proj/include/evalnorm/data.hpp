#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "evalnorm/errors.hpp"
#include "evalnorm/tensor.hpp"

namespace evalnorm {

enum class Split { Train, Eval };

struct Dataset {
  /// [N, feature_shape...]
  Tensor features;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  Shape feature_shape;
  Split split = Split::Train;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t feature_size() const { return shape_size(feature_shape); }

  /// Stacks the selected examples into [indices.size(), feature_shape...].
  Tensor gather(std::span<const std::size_t> indices) const {
    Shape s = feature_shape;
    s.insert(s.begin(), indices.size());
    Tensor out(s);
    const std::size_t f = feature_size();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const double* src = features.data() + indices[i] * f;
      std::copy(src, src + f, out.data() + i * f);
    }
    return out;
  }

  std::vector<int> gather_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(labels[i]);
    return out;
  }

  /// First `limit` examples (all of them if limit is 0 or too large).
  Dataset head(std::size_t limit) const {
    if (limit == 0 || limit >= size()) return *this;
    std::vector<std::size_t> idx(limit);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Dataset d = *this;
    d.features = gather(idx);
    d.labels.resize(limit);
    return d;
  }

  void validate() const {
    if (labels.empty()) throw EmptyDatasetError("dataset has no examples");
    if (features.size() != size() * feature_size()) throw ConfigError("feature tensor does not match label count");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw ConfigError("label out of range");
  }
};

/// Gaussian clusters with unit isotropic noise. Class centroids depend only on
/// `seed`; each split draws its samples from its own stream, so train and eval
/// share centroids. Example j belongs to class j % num_classes.
inline Dataset synth_gaussians(std::size_t num_classes, Shape feature_shape, std::size_t per_class,
                               std::uint64_t seed, double class_sep, Split split = Split::Train) {
  if (num_classes < 2) throw ConfigError("need at least two classes");
  if (per_class == 0) throw EmptyDatasetError("synthetic dataset with zero examples per class");
  if (feature_shape.empty() || shape_size(feature_shape) == 0) throw ConfigError("empty feature shape");
  const std::size_t dims = shape_size(feature_shape);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::mt19937_64 centroid_rng(seed);
  std::vector<double> centroids(num_classes * dims);
  for (std::size_t k = 0; k < num_classes; ++k) {
    double norm2 = 0.0;
    for (std::size_t d = 0; d < dims; ++d) {
      const double v = normal(centroid_rng);
      centroids[k * dims + d] = v;
      norm2 += v * v;
    }
    const double scale = class_sep / std::sqrt(norm2);
    for (std::size_t d = 0; d < dims; ++d) centroids[k * dims + d] *= scale;
  }

  std::seed_seq seq{seed, std::uint64_t{split == Split::Train ? 1u : 2u}};
  std::mt19937_64 rng(seq);
  Dataset ds;
  ds.num_classes = num_classes;
  ds.feature_shape = feature_shape;
  ds.split = split;
  const std::size_t n = num_classes * per_class;
  Shape s = feature_shape;
  s.insert(s.begin(), n);
  ds.features = Tensor(s);
  ds.labels.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t k = j % num_classes;
    ds.labels[j] = static_cast<int>(k);
    for (std::size_t d = 0; d < dims; ++d) ds.features[j * dims + d] = centroids[k * dims + d] + normal(rng);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// IDX (MNIST-style) files
// ---------------------------------------------------------------------------

struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> data;
};

/// Parses an unsigned-byte IDX buffer: 0x00 0x00 <type> <rank>, big-endian u32
/// extents, then the payload.
inline IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("truncated IDX header", bytes.size());
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError("bad IDX magic", 0);
  if (bytes[2] != 0x08) throw FormatError("unsupported IDX element type (only unsigned byte)", 2);
  const std::size_t rank = bytes[3];
  if (rank == 0) throw FormatError("IDX rank must be >= 1", 3);
  IdxArray a;
  std::size_t pos = 4;
  std::size_t total = 1;
  for (std::size_t r = 0; r < rank; ++r) {
    if (pos + 4 > bytes.size()) throw FormatError("truncated IDX dimension table", bytes.size());
    const std::size_t d = (std::size_t{bytes[pos]} << 24) | (std::size_t{bytes[pos + 1]} << 16) |
                          (std::size_t{bytes[pos + 2]} << 8) | std::size_t{bytes[pos + 3]};
    a.dims.push_back(d);
    total *= d;
    pos += 4;
  }
  if (bytes.size() - pos < total) throw FormatError("truncated IDX payload", bytes.size());
  a.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                bytes.begin() + static_cast<std::ptrdiff_t>(pos + total));
  return a;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

enum class IdxLayout { Flat, Image };

/// Builds a dataset from a paired image/label IDX buffer. Pixels are scaled to [0,1].
inline Dataset dataset_from_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes,
                                IdxLayout layout = IdxLayout::Flat, Split split = Split::Train) {
  const IdxArray images = parse_idx(image_bytes);
  const IdxArray labels = parse_idx(label_bytes);
  if (labels.dims.size() != 1) throw FormatError("label file must have rank 1", 3);
  if (images.dims[0] != labels.dims[0]) {
    throw FormatError("image/label count mismatch: " + std::to_string(images.dims[0]) + " vs " +
                          std::to_string(labels.dims[0]),
                      4);
  }
  if (images.dims[0] == 0) throw EmptyDatasetError("IDX image set is empty");
  Dataset ds;
  ds.split = split;
  Shape sample(images.dims.begin() + 1, images.dims.end());
  if (sample.empty()) sample = {1};
  if (layout == IdxLayout::Flat) {
    ds.feature_shape = {shape_size(sample)};
  } else {
    if (sample.size() != 2) throw FormatError("image layout needs [N, rows, cols] images", 3);
    ds.feature_shape = {1, sample[0], sample[1]};
  }
  Shape s = ds.feature_shape;
  s.insert(s.begin(), images.dims[0]);
  ds.features = Tensor(s);
  for (std::size_t i = 0; i < images.data.size(); ++i) ds.features[i] = images.data[i] / 255.0;
  int max_label = 0;
  for (auto v : labels.data) {
    ds.labels.push_back(v);
    max_label = std::max<int>(max_label, v);
  }
  ds.num_classes = std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1);
  return ds;
}

inline Dataset read_idx(const std::string& images_path, const std::string& labels_path,
                        IdxLayout layout = IdxLayout::Flat, Split split = Split::Train) {
  const auto images = read_file_bytes(images_path);
  const auto labels = read_file_bytes(labels_path);
  try {
    return dataset_from_idx(images, labels, layout, split);
  } catch (const FormatError& e) {
    throw FormatError(images_path + " / " + labels_path, e);
  }
}

// ---------------------------------------------------------------------------
// Microbatched iteration
// ---------------------------------------------------------------------------

/// One SGD batch of G examples made of G/B contiguous normalization microbatches.
struct Batch {
  Tensor features;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
  std::size_t microbatch = 0;

  std::size_t size() const noexcept { return indices.size(); }
  std::size_t num_microbatches() const noexcept { return microbatch ? indices.size() / microbatch : 0; }
};

/// Shuffled SGD batches for one epoch; the trailing partial batch is dropped.
/// Order depends only on (seed, epoch).
class BatchIterator {
 public:
  BatchIterator(const Dataset& dataset, std::size_t sgd_batch, std::size_t microbatch, std::uint64_t seed,
                std::uint64_t epoch)
      : dataset_(&dataset), sgd_batch_(sgd_batch), microbatch_(microbatch) {
    if (sgd_batch == 0 || microbatch == 0) throw ConfigError("batch sizes must be positive");
    if (sgd_batch % microbatch != 0) {
      throw ConfigError("normalization microbatch " + std::to_string(microbatch) + " does not divide SGD batch " +
                        std::to_string(sgd_batch));
    }
    order_.resize(dataset.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::seed_seq seq{seed, epoch};
    std::mt19937_64 rng(seq);
    std::shuffle(order_.begin(), order_.end(), rng);
  }

  std::size_t num_batches() const noexcept { return order_.size() / sgd_batch_; }
  const std::vector<std::size_t>& order() const noexcept { return order_; }

  Batch batch(std::size_t step) const {
    if (step >= num_batches()) throw ConfigError("batch index past end of epoch");
    Batch b;
    b.microbatch = microbatch_;
    b.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(step * sgd_batch_),
                     order_.begin() + static_cast<std::ptrdiff_t>((step + 1) * sgd_batch_));
    b.features = dataset_->gather(b.indices);
    b.labels = dataset_->gather_labels(b.indices);
    return b;
  }

 private:
  const Dataset* dataset_;
  std::size_t sgd_batch_;
  std::size_t microbatch_;
  std::vector<std::size_t> order_;
};

inline BatchIterator batch_iterator(const Dataset& dataset, std::size_t sgd_batch, std::size_t microbatch,
                                    std::uint64_t seed, std::uint64_t epoch) {
  return BatchIterator(dataset, sgd_batch, microbatch, seed, epoch);
}

}  // namespace evalnorm
