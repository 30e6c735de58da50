#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "evalnorm/checkpoint.hpp"
#include "evalnorm/config.hpp"
#include "evalnorm/errors.hpp"
#include "evalnorm/text.hpp"

using namespace evalnorm;

TEST(Text, ShortestRoundTrip) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng) * std::pow(10.0, double(int(rng() % 40) - 20));
    EXPECT_EQ(parse_double(format_double(v)), v);
  }
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(0.25), "0.25");
  EXPECT_EQ(format_double(3.0), "3");
}

TEST(Text, ParsersRejectJunk) {
  EXPECT_THROW(parse_double("1.5x"), ConfigError);
  EXPECT_THROW(parse_uint("-3"), ConfigError);
  EXPECT_THROW(parse_uint(""), ConfigError);
  EXPECT_THROW(parse_bool("maybe"), ConfigError);
  EXPECT_EQ(parse_size_list("2, 4,8"), (std::vector<std::size_t>{2, 4, 8}));
}

TEST(Config, DefaultsFollowDeskScale) {
  const RunConfig c;
  EXPECT_EQ(c.sgd_batch, 64u);
  EXPECT_EQ(c.epochs, 20u);
  EXPECT_DOUBLE_EQ(c.learning_rate(), 0.025);
  EXPECT_EQ(c.ema_decay, 0.99);
  EXPECT_EQ(c.eps, 1e-5);
  EXPECT_EQ(c.en_init(), 0.5);
  EXPECT_EQ(c.effective_run_id(), "B2_s0");
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ParseOverridesAndComments) {
  const RunConfig c = parse_config("# comment\nseed = 7\nmodel.widths = 8,4\n\nnorm_microbatch=4\nen.init = 0.2\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.widths, (std::vector<std::size_t>{8, 4}));
  EXPECT_EQ(c.norm_microbatch, 4u);
  EXPECT_EQ(c.en_init(), 0.2);
  RunConfig d = c;
  apply_override(d, "base_lr=0.3");
  EXPECT_EQ(d.learning_rate(), 0.3);
  apply_override(d, "base_lr=auto");
  EXPECT_EQ(d.learning_rate(), c.learning_rate());
}

TEST(Config, SerializeRoundTrip) {
  RunConfig c;
  c.seed = 99;
  c.run_id = "x";
  c.widths = {7, 3};
  c.data.shape = {2, 4, 4};
  c.model_kind = ModelKind::SmallCNN;
  c.base_lr = 0.0123456789;
  c.en.init = 0.3;
  c.en.enabled = false;
  const std::string text = serialize_config(c);
  EXPECT_EQ(serialize_config(parse_config(text)), text);
}

TEST(Config, Errors) {
  RunConfig c;
  EXPECT_THROW(apply_override(c, "nope=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "seed"), ConfigError);
  EXPECT_THROW(parse_config("seed 3\n"), ConfigError);
  c.norm_microbatch = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c.norm_microbatch = 2;
  c.en.projection = "softmax";
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/run.cfg"), IoError);
}

namespace {

Model trained_like(std::uint64_t seed) {
  ModelSpec s;
  s.input_shape = {6};
  s.widths = {5, 4};
  s.num_classes = 3;
  Model m = build(s, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  for (auto& nl : m.norms) {
    for (std::size_t c = 0; c < nl.ema.channels(); ++c) {
      nl.ema.mean[c] = n(rng);
      nl.ema.variance[c] = std::fabs(n(rng));
    }
    nl.ema.update_count = 1234;
    nl.en = EnParams::initial(nl.id, 0.1);
    nl.en->velocity_alpha = n(rng);
  }
  return m;
}

}  // namespace

TEST(Checkpoint, ByteRoundTrip) {
  const Model m = trained_like(3);
  RunConfig cfg;
  cfg.seed = 3;
  const Checkpoint ck = make_checkpoint(m, cfg, 77);
  const auto bytes = serialize_checkpoint(ck);
  const Checkpoint back = parse_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(step_from_checkpoint(back), 77u);
  EXPECT_EQ(serialize_config(config_from_checkpoint(back)), serialize_config(cfg));
}

TEST(Checkpoint, ModelRoundTripIsBitwise) {
  const Model m = trained_like(4);
  const Model back = model_from_checkpoint(parse_checkpoint(serialize_checkpoint(make_checkpoint(m, RunConfig{}, 0))));
  ASSERT_EQ(back.params.size(), m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    EXPECT_EQ(back.params[i].name, m.params[i].name);
    EXPECT_EQ(back.params[i].value, m.params[i].value);
  }
  for (std::size_t l = 0; l < m.norms.size(); ++l) {
    EXPECT_EQ(back.norms[l].ema, m.norms[l].ema);
    EXPECT_EQ(back.norms[l].en, m.norms[l].en);
  }
}

TEST(Checkpoint, WithoutEnParams) {
  Model m = trained_like(5);
  for (auto& n : m.norms) n.en.reset();
  const Model back = model_from_checkpoint(parse_checkpoint(serialize_checkpoint(make_checkpoint(m, RunConfig{}, 0))));
  EXPECT_FALSE(back.has_en_params());
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "evalnorm_ck_test.enck").string();
  const Checkpoint ck = make_checkpoint(trained_like(6), RunConfig{}, 5);
  save_checkpoint(path, ck);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path)), serialize_checkpoint(ck));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Checkpoint, CorruptInputsAreFormatErrors) {
  const auto bytes = serialize_checkpoint(make_checkpoint(trained_like(7), RunConfig{}, 0));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  try {
    parse_checkpoint(bad_version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  EXPECT_THROW(parse_checkpoint(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(parse_checkpoint(trailing), FormatError);
}

TEST(Checkpoint, MissingEntry) {
  Checkpoint ck = make_checkpoint(trained_like(8), RunConfig{}, 0);
  ck.entries.erase(ck.entries.begin());
  EXPECT_THROW(model_from_checkpoint(ck), ConfigError);
}
