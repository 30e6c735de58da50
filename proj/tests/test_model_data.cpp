#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "evalnorm/data.hpp"
#include "evalnorm/errors.hpp"
#include "evalnorm/model.hpp"
#include "oracles.hpp"

using namespace evalnorm;

namespace {

ModelSpec mnist_mlp() {
  ModelSpec s;
  s.kind = ModelKind::MLP;
  s.input_shape = {784};
  s.widths = {128, 128};
  s.num_classes = 10;
  return s;
}

ModelSpec tiny(ModelKind kind) {
  ModelSpec s;
  s.kind = kind;
  s.input_shape = kind == ModelKind::MLP ? Shape{5} : Shape{2, 3, 3};
  s.widths = {4, 3};
  s.num_classes = 3;
  return s;
}

Model with_random_state(ModelSpec spec, std::uint64_t seed) {
  Model m = build(spec, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(0.2, 2.0), v(-1.0, 1.0);
  for (auto& n : m.norms) {
    for (std::size_t c = 0; c < n.ema.channels(); ++c) {
      n.ema.mean[c] = v(rng);
      n.ema.variance[c] = u(rng);
    }
    n.en = EnParams::initial(n.id, 0.0);
    n.en->alpha_hat = u(rng) / 2.0;
    n.en->beta_hat = u(rng) / 2.0;
  }
  return m;
}

Shape batched(std::size_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace

TEST(Model, SameSeedSameParameters) {
  const Model a = build(mnist_mlp(), 3), b = build(mnist_mlp(), 3), c = build(mnist_mlp(), 4);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_EQ(a.params[i].value, b.params[i].value);
  EXPECT_NE(a.params[0].value, c.params[0].value);
}

TEST(Model, MnistMlpStructure) {
  const Model m = build(mnist_mlp(), 1);
  EXPECT_EQ(m.norms.size(), 2u);
  std::mt19937_64 rng(2);
  const Tensor logits = predict_logits(m, oracle::uniform({3, 784}, rng), NormMode::eval_ema());
  EXPECT_EQ(logits.shape(), (Shape{3, 10}));
}

TEST(Model, SelectiveNormalization) {
  ModelSpec s = tiny(ModelKind::MLP);
  s.normalize = {true, false};
  const Model m = build(s, 1);
  EXPECT_EQ(m.norms.size(), 1u);
  EXPECT_NO_THROW(m.find_param("layer1.bias"));
  EXPECT_THROW(m.find_param("bn1.gamma"), ConfigError);
  s.normalize = {true};
  EXPECT_THROW(build(s, 1), ConfigError);
}

TEST(Model, InputShapeChecked) {
  const Model m = build(tiny(ModelKind::MLP), 1);
  EXPECT_THROW(predict_logits(m, Tensor::zeros({2, 4}), NormMode::eval_ema()), ConfigError);
}

TEST(Model, EnWithoutParamsIsConfigError) {
  const Model m = build(tiny(ModelKind::MLP), 1);
  EXPECT_FALSE(m.has_en_params());
  EXPECT_THROW(predict_logits(m, Tensor::zeros({2, 5}), NormMode::eval_en()), ConfigError);
}

TEST(Model, EmaWithExactBatchMomentsMatchesTraining) {
  for (auto kind : {ModelKind::MLP, ModelKind::SmallCNN}) {
    Model m = build(tiny(kind), 5);
    std::mt19937_64 rng(6);
    const Tensor x = oracle::normal(batched(6, m.spec.input_shape), rng);
    Tape tape;
    const auto bound = bind_parameters(tape, m, false);
    const auto train = forward(tape, m, bound, tape.constant(x), NormMode::train_bn(), 0);
    for (std::size_t l = 0; l < m.norms.size(); ++l) {
      m.norms[l].ema.mean = train.norms[l].moments[0].mean;
      m.norms[l].ema.variance = train.norms[l].moments[0].variance;
    }
    const Tensor ev = predict_logits(m, x, NormMode::eval_ema());
    for (std::size_t i = 0; i < ev.size(); ++i) EXPECT_NEAR(ev[i], train.logits.value()[i], 1e-6);
  }
}

TEST(Model, EnEndpointsMatchEmaAndInstance) {
  for (auto kind : {ModelKind::MLP, ModelKind::SmallCNN}) {
    Model m = with_random_state(tiny(kind), 7);
    std::mt19937_64 rng(8);
    const Tensor x = oracle::normal(batched(5, m.spec.input_shape), rng);
    for (auto& n : m.norms) n.en->alpha_hat = n.en->beta_hat = 0.0;
    EXPECT_EQ(predict_logits(m, x, NormMode::eval_en()), predict_logits(m, x, NormMode::eval_ema()));
    for (auto& n : m.norms) n.en->alpha_hat = n.en->beta_hat = 1.0;
    const Tensor en = predict_logits(m, x, NormMode::eval_en());
    const Tensor inst = predict_logits(m, x, NormMode::eval_simple(1.0));
    for (std::size_t i = 0; i < en.size(); ++i) EXPECT_NEAR(en[i], inst[i], 1e-6);
  }
}

TEST(Model, EvalLogitsIndependentOfBatchComposition) {
  for (auto kind : {ModelKind::MLP, ModelKind::SmallCNN}) {
    const Model m = with_random_state(tiny(kind), 9);
    std::mt19937_64 rng(10);
    const Tensor x = oracle::normal(batched(7, m.spec.input_shape), rng);
    for (const NormMode& mode : {NormMode::eval_ema(), NormMode::eval_en(), NormMode::eval_simple(0.25)}) {
      const Tensor all = predict_logits(m, x, mode);
      for (std::size_t n = 0; n < 7; ++n) {
        const Tensor one = predict_logits(m, x.rows(n, n + 1), mode);
        for (std::size_t k = 0; k < one.size(); ++k) EXPECT_EQ(one[k], all[n * one.size() + k]);
      }
    }
  }
}

TEST(Model, EvalDoesNotMutateState) {
  const Model m = with_random_state(tiny(ModelKind::MLP), 11);
  const Model before = m;
  std::mt19937_64 rng(12);
  predict_logits(m, oracle::normal({4, 5}, rng), NormMode::eval_en());
  for (std::size_t l = 0; l < m.norms.size(); ++l) {
    EXPECT_EQ(m.norms[l].ema, before.norms[l].ema);
    EXPECT_EQ(*m.norms[l].en, *before.norms[l].en);
  }
}

TEST(Model, LossGradientMatchesFiniteDifferences) {
  for (auto kind : {ModelKind::MLP, ModelKind::SmallCNN}) {
    const Model m = build(tiny(kind), 13);
    std::mt19937_64 rng(14);
    const Tensor x = oracle::uniform(batched(4, m.spec.input_shape), rng);
    const std::vector<int> labels{0, 2, 1, 2};
    std::vector<Tensor> inputs;
    for (const auto& p : m.params) inputs.push_back(p.value);
    const auto r = oracle::check_gradients(
        [&](Tape& tape, const std::vector<Var>& v) {
          ParamBinding b;
          b.vars = v;
          return softmax_cross_entropy(forward(tape, m, b, tape.constant(x), NormMode::train_bn(), 2).logits, labels);
        },
        inputs);
    EXPECT_LT(r.max_rel, 1e-4) << to_string(kind);
  }
}

TEST(Model, ArgmaxRows) {
  const Tensor l({2, 3}, std::vector<double>{0.1, 0.7, 0.2, 5, -1, 4});
  EXPECT_EQ(argmax_rows(l), (std::vector<int>{1, 0}));
}

TEST(Synth, SizesAndLabels) {
  const Dataset d = synth_gaussians(4, {16}, 100, 1, 3.0, Split::Train);
  EXPECT_EQ(d.size(), 400u);
  EXPECT_EQ(d.features.shape(), (Shape{400, 16}));
  std::vector<std::size_t> per(4, 0);
  for (int y : d.labels) ++per.at(static_cast<std::size_t>(y));
  for (auto c : per) EXPECT_EQ(c, 100u);
}

TEST(Synth, Deterministic) {
  const Dataset a = synth_gaussians(3, {2, 4, 4}, 10, 9, 2.0, Split::Eval);
  const Dataset b = synth_gaussians(3, {2, 4, 4}, 10, 9, 2.0, Split::Eval);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  const Dataset t = synth_gaussians(3, {2, 4, 4}, 10, 9, 2.0, Split::Train);
  EXPECT_NE(a.features, t.features);
}

TEST(Synth, WellSeparatedClustersAreNearestCentroidSeparable) {
  const Dataset train = synth_gaussians(4, {16}, 200, 21, 10.0, Split::Train);
  const Dataset eval = synth_gaussians(4, {16}, 200, 21, 10.0, Split::Eval);
  // Centroids estimated from the training split only.
  std::vector<std::vector<double>> mu(4, std::vector<double>(16, 0.0));
  for (std::size_t i = 0; i < train.size(); ++i)
    for (std::size_t k = 0; k < 16; ++k) mu[train.labels[i]][k] += train.features[i * 16 + k] / 200.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    int best = 0;
    double best_d = INFINITY;
    for (int c = 0; c < 4; ++c) {
      double d = 0;
      for (std::size_t k = 0; k < 16; ++k) d += std::pow(eval.features[i * 16 + k] - mu[c][k], 2);
      if (d < best_d) best_d = d, best = c;
    }
    correct += best == eval.labels[i];
  }
  EXPECT_GT(double(correct) / double(eval.size()), 0.99);
}

namespace {

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

// Two 3x3 images and their labels, laid out byte by byte per the IDX format.
std::vector<std::uint8_t> fixture_images() {
  std::vector<std::uint8_t> b{0, 0, 0x08, 3};
  put_u32(b, 2);
  put_u32(b, 3);
  put_u32(b, 3);
  for (std::uint8_t v : {0, 51, 102, 153, 204, 255, 1, 2, 3}) b.push_back(v);
  for (std::uint8_t v : {255, 0, 255, 0, 255, 0, 255, 0, 255}) b.push_back(v);
  return b;
}

std::vector<std::uint8_t> fixture_labels() {
  std::vector<std::uint8_t> b{0, 0, 0x08, 1};
  put_u32(b, 2);
  b.push_back(7);
  b.push_back(2);
  return b;
}

}  // namespace

TEST(Idx, FixtureDecodesExactly) {
  const auto imgs = fixture_images(), labs = fixture_labels();
  const Dataset flat = dataset_from_idx(imgs, labs, IdxLayout::Flat, Split::Train);
  EXPECT_EQ(flat.features.shape(), (Shape{2, 9}));
  EXPECT_EQ(flat.labels, (std::vector<int>{7, 2}));
  EXPECT_EQ(flat.num_classes, 8u);
  EXPECT_EQ(flat.features[1], 51.0 / 255.0);
  EXPECT_EQ(flat.features[5], 1.0);
  EXPECT_EQ(flat.features[8], 3.0 / 255.0);
  EXPECT_EQ(flat.features[10], 0.0);
  const Dataset img = dataset_from_idx(imgs, labs, IdxLayout::Image, Split::Eval);
  EXPECT_EQ(img.features.shape(), (Shape{2, 1, 3, 3}));
  EXPECT_EQ(img.features.values()[9], 1.0);
}

TEST(Idx, ReadsFromDisk) {
  const auto dir = std::filesystem::temp_directory_path() / "evalnorm_idx_test";
  std::filesystem::create_directories(dir);
  auto write = [](const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
    std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
  };
  write(dir / "img.idx", fixture_images());
  write(dir / "lab.idx", fixture_labels());
  const Dataset d = read_idx((dir / "img.idx").string(), (dir / "lab.idx").string(), IdxLayout::Flat, Split::Train);
  EXPECT_EQ(d.size(), 2u);
  EXPECT_THROW(read_idx((dir / "missing.idx").string(), (dir / "lab.idx").string(), IdxLayout::Flat, Split::Train), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Idx, TruncatedFileNamesOffset) {
  auto imgs = fixture_images();
  imgs.resize(imgs.size() - 4);
  try {
    parse_idx(imgs);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 30u);  // payload starts at 16 and should run to 34
    EXPECT_NE(std::string(e.what()).find("offset 30"), std::string::npos);
  }
  std::vector<std::uint8_t> header{0, 0, 0x08};
  EXPECT_THROW(parse_idx(header), FormatError);
}

TEST(Idx, UnsupportedTypeRejected) {
  auto imgs = fixture_images();
  imgs[2] = 0x0D;
  EXPECT_THROW(parse_idx(imgs), FormatError);
}

TEST(Idx, EmptyImageSet) {
  std::vector<std::uint8_t> imgs{0, 0, 0x08, 3};
  put_u32(imgs, 0);
  put_u32(imgs, 3);
  put_u32(imgs, 3);
  std::vector<std::uint8_t> labs{0, 0, 0x08, 1};
  put_u32(labs, 0);
  EXPECT_THROW(dataset_from_idx(imgs, labs, IdxLayout::Flat, Split::Train), EmptyDatasetError);
}

TEST(Idx, CountMismatch) {
  auto labs = fixture_labels();
  labs[7] = 3;
  labs.push_back(1);
  EXPECT_THROW(dataset_from_idx(fixture_images(), labs, IdxLayout::Flat, Split::Train), FormatError);
}

TEST(Batches, MicrobatchCount) {
  const Dataset d = synth_gaussians(2, {3}, 20, 1, 1.0, Split::Train);
  const auto it = batch_iterator(d, 8, 2, 0, 0);
  EXPECT_EQ(it.batch(0).num_microbatches(), 4u);
  EXPECT_EQ(it.num_batches(), 5u);
  EXPECT_THROW(batch_iterator(d, 8, 3, 0, 0), ConfigError);
}

TEST(Batches, EpochIsPermutationWithDropLast) {
  const Dataset d = synth_gaussians(3, {2}, 11, 1, 1.0, Split::Train);  // 33 examples
  const auto it = batch_iterator(d, 8, 4, 5, 2);
  std::multiset<std::size_t> seen;
  for (std::size_t s = 0; s < it.num_batches(); ++s)
    for (auto i : it.batch(s).indices) seen.insert(i);
  EXPECT_EQ(seen.size(), 32u);
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 32u);
  std::vector<std::size_t> sorted = it.order();
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> expect(33);
  std::iota(expect.begin(), expect.end(), 0);
  EXPECT_EQ(sorted, expect);
}

TEST(Batches, DeterministicPerSeedAndEpoch) {
  const Dataset d = synth_gaussians(2, {2}, 50, 1, 1.0, Split::Train);
  EXPECT_EQ(batch_iterator(d, 10, 2, 3, 1).order(), batch_iterator(d, 10, 2, 3, 1).order());
  EXPECT_NE(batch_iterator(d, 10, 2, 3, 1).order(), batch_iterator(d, 10, 2, 3, 2).order());
  const auto b = batch_iterator(d, 10, 2, 3, 1).batch(2);
  EXPECT_EQ(b.features, d.gather(b.indices));
}
