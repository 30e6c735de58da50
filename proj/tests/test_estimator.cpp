#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "evalnorm/data.hpp"
#include "evalnorm/en_params.hpp"
#include "evalnorm/errors.hpp"
#include "evalnorm/estimator.hpp"
#include "evalnorm/model.hpp"
#include "oracles.hpp"
#include "scenarios.hpp"

using namespace evalnorm;

TEST(EnParams, ProjectionClamps) {
  EnParams p = EnParams::initial("l", 0.5);
  p.alpha_hat = 1.2;
  p.beta_hat = -0.1;
  const auto q = project_params(p);
  EXPECT_EQ(q.alpha_hat, 1.0);
  EXPECT_EQ(q.beta_hat, 0.0);
  p.alpha_hat = 0.5;
  EXPECT_EQ(project_params(p).alpha_hat, 0.5);
}

TEST(EnParams, ProjectionIsIdempotent) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int k = 0; k < 200; ++k) {
    EnParams p = EnParams::initial("l", 0.0);
    p.alpha_hat = u(rng);
    p.beta_hat = u(rng);
    EXPECT_EQ(project_params(project_params(p)), project_params(p));
  }
}

TEST(EnParams, SgdStepRejectsNonFiniteGradient) {
  const EnParams p = EnParams::initial("l", 0.5);
  EXPECT_THROW(en_sgd_step(p, std::nan(""), 0.0, 0.01, 0.9), NumericDomainError);
  EXPECT_THROW(en_sgd_step(p, 0.0, INFINITY, 0.01, 0.9), NumericDomainError);
}

TEST(EnParams, SgdStepWithMomentum) {
  EnParams p = EnParams::initial("l", 0.5);
  p = en_sgd_step(p, 1.0, -2.0, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(p.alpha_hat, 0.4);
  EXPECT_DOUBLE_EQ(p.beta_hat, 0.7);
  p = en_sgd_step(p, 1.0, 0.0, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(p.alpha_hat, 0.4 - 0.1 * 1.9);
}

TEST(AuxLoss, ExactComplementGivesZeroAtInverseB) {
  for (std::size_t B : {2, 4, 8, 16}) {
    const auto cc = scenario::complement_case(B, 100 + B);
    const double b = 1.0 / double(B);
    EXPECT_LT(scenario::aux_at(cc, b, b), 1e-6) << "B=" << B;
    EXPECT_GT(scenario::aux_at(cc, 0.0, 0.0), 1e-3) << "B=" << B;
  }
}

TEST(AuxLoss, MlpShapedComplementGivesZeroAtInverseB) {
  // Spatial extent 1: instance variance is zero, the identity still holds.
  const auto cc = scenario::complement_case(4, 7, {5});
  EXPECT_LT(scenario::aux_at(cc, 0.25, 0.25), 1e-6);
}

TEST(AuxLoss, DescentFromHalfReachesOracle) {
  for (std::size_t B : {2, 4, 8}) {
    const auto cc = scenario::complement_case(B, 200 + B);
    const auto r = scenario::descend(cc, 0.5, 2000, 1e-3);
    EXPECT_LT(r.final_loss, 1e-3) << "B=" << B;
    EXPECT_LT(std::fabs(r.alpha - 1.0 / double(B)), 0.05) << "B=" << B;
    EXPECT_LT(std::fabs(r.beta - 1.0 / double(B)), 0.05) << "B=" << B;
  }
}

TEST(AuxLoss, AlphaBetaGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  int checked = 0;
  for (int trial = 0; checked < 100 && trial < 1000; ++trial) {
    const auto cc = scenario::complement_case(2 + trial % 7, 5000 + trial);
    const double a = u(rng), b = u(rng);
    if (scenario::min_residual(cc.sample, cc.batch, cc.ema, a, b) < 1e-6) continue;
    const auto e = [&] {
      const MomentPair m[] = {cc.batch};
      return evaluate_aux_loss(cc.sample, m, cc.ema, {a, b});
    }();
    const double h = 1e-5;
    const double fa = (scenario::aux_at(cc, a + h, b) - scenario::aux_at(cc, a - h, b)) / (2 * h);
    const double fb = (scenario::aux_at(cc, a, b + h) - scenario::aux_at(cc, a, b - h)) / (2 * h);
    EXPECT_LT(oracle::rel_err(e.grad_alpha, fa, 1e-3), 1e-4);
    EXPECT_LT(oracle::rel_err(e.grad_beta, fb, 1e-3), 1e-4);
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}

TEST(AuxLoss, MeanOverEveryElementOfEverySample) {
  std::mt19937_64 rng(4);
  const Tensor x = oracle::normal({4, 2, 3}, rng);
  const MomentPair m[] = {oracle::two_pass(x, 0, 2), oracle::two_pass(x, 2, 2)};
  EmaState s = EmaState::initial(2);
  const double loss = evaluate_aux_loss(x, m, s, {0.3, 0.4}).loss;
  double total = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    const MomentPair part[] = {m[n / 2]};
    // one sample against its own microbatch's moments
    total += evaluate_aux_loss(x.rows(n, n + 1), part, s, {0.3, 0.4}).loss;
  }
  EXPECT_NEAR(loss, total / 4.0, 1e-14);
}

TEST(AuxLoss, RejectsNonPositiveVariance) {
  const Tensor x({2, 1}, std::vector<double>{1.0, 1.0});
  const MomentPair m[] = {oracle::two_pass(x)};
  EmaState s = EmaState::initial(1);
  s.variance = {-1.0};
  EXPECT_THROW(evaluate_aux_loss(x, m, s, {0.0, 0.0}, 1e-5), NumericDomainError);
}

namespace {

Model small_model(std::uint64_t seed, ModelKind kind = ModelKind::MLP) {
  ModelSpec spec;
  spec.kind = kind;
  spec.input_shape = kind == ModelKind::MLP ? Shape{6} : Shape{2, 4, 4};
  spec.widths = {5, 4};
  spec.num_classes = 3;
  Model m = build(spec, seed);
  // Non-trivial EMA so the aux loss is not degenerate.
  for (auto& n : m.norms)
    for (std::size_t c = 0; c < n.ema.channels(); ++c) {
      n.ema.mean[c] = 0.1 * double(c);
      n.ema.variance[c] = 1.0 + 0.2 * double(c);
    }
  return m;
}

}  // namespace

TEST(AuxLoss, ZeroLeakIntoWeightsAndActivations) {
  for (auto kind : {ModelKind::MLP, ModelKind::SmallCNN}) {
    const Model model = small_model(9, kind);
    std::mt19937_64 rng(10);
    Shape xs{8};
    xs.insert(xs.end(), model.spec.input_shape.begin(), model.spec.input_shape.end());
    Tape tape;
    const auto bound = bind_parameters(tape, model, true);
    const Var x = tape.leaf(oracle::normal(xs, rng));
    const auto pass = forward(tape, model, bound, x, NormMode::train_bn(), 2, kDefaultEps);
    std::vector<EnParams> en;
    for (const auto& n : model.norms) en.push_back(EnParams::initial(n.id, 0.37));
    const auto terms = attach_aux_losses(tape, model, pass, en);
    tape.backward(terms.total());
    auto all_zero = [](const Tensor& g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        if (g[i] != 0.0) return false;
      return true;
    };
    for (std::size_t i = 0; i < bound.vars.size(); ++i) EXPECT_TRUE(all_zero(tape.grad(bound.vars[i]))) << model.params[i].name;
    EXPECT_TRUE(all_zero(tape.grad(x)));
    for (const auto& t : pass.norms) EXPECT_TRUE(all_zero(tape.grad(t.input)));
    for (std::size_t l = 0; l < en.size(); ++l) {
      EXPECT_NE(tape.grad(terms.alpha[l]).item(), 0.0);
      EXPECT_NE(tape.grad(terms.beta[l]).item(), 0.0);
    }
  }
}

namespace {

Dataset stationary_data(std::size_t n, std::uint64_t seed) {
  return synth_gaussians(3, {6}, n / 3, seed, 2.0, Split::Train);
}

}  // namespace

TEST(Offline, LeavesModelUntouchedAndBeatsEma) {
  const Dataset data = stationary_data(600, 12);
  // Put the EMA where training would have left it: full-data moments per layer.
  Model trained = small_model(11);
  {
    Tape tape;
    const auto bound = bind_parameters(tape, trained, false);
    const auto pass = forward(tape, trained, bound, tape.constant(data.features), NormMode::train_bn(), 0, kDefaultEps);
    for (std::size_t l = 0; l < trained.norms.size(); ++l) {
      trained.norms[l].ema.mean = pass.norms[l].moments[0].mean;
      trained.norms[l].ema.variance = pass.norms[l].moments[0].variance;
    }
  }
  OfflineOptions opt;
  opt.microbatch = 2;
  opt.init = 0.0;
  opt.steps = 600;
  const Model before = trained;
  const auto est = estimate_offline(trained, data, opt);
  for (std::size_t i = 0; i < trained.params.size(); ++i) EXPECT_EQ(trained.params[i].value, before.params[i].value);
  for (std::size_t l = 0; l < trained.norms.size(); ++l) EXPECT_EQ(trained.norms[l].ema, before.norms[l].ema);
  for (std::size_t l = 0; l < est.params.size(); ++l) {
    EXPECT_LT(est.final_loss[l], est.initial_loss[l]) << l;
    EXPECT_GT(est.params[l].alpha_hat, 0.0);
  }
}

TEST(Offline, ParamsShrinkWithLargerMicrobatch) {
  Model trained = small_model(13);
  const Dataset data = stationary_data(1200, 14);
  {
    Tape tape;
    const auto bound = bind_parameters(tape, trained, false);
    const auto pass = forward(tape, trained, bound, tape.constant(data.features), NormMode::train_bn(), 0, kDefaultEps);
    for (std::size_t l = 0; l < trained.norms.size(); ++l) {
      trained.norms[l].ema.mean = pass.norms[l].moments[0].mean;
      trained.norms[l].ema.variance = pass.norms[l].moments[0].variance;
    }
  }
  auto run = [&](std::size_t B) {
    OfflineOptions opt;
    opt.microbatch = B;
    opt.init = 0.5;
    opt.steps = 800;
    return estimate_offline(trained, data, opt).params;
  };
  const auto small = run(2), large = run(64);
  for (std::size_t l = 0; l < small.size(); ++l) {
    EXPECT_GT(small[l].alpha_hat, large[l].alpha_hat) << l;
    EXPECT_GT(small[l].beta_hat, large[l].beta_hat) << l;
  }
}

TEST(Offline, RejectsBadSizes) {
  const Model model = small_model(15);
  OfflineOptions opt;
  opt.microbatch = 0;
  EXPECT_THROW(estimate_offline(model, stationary_data(30, 1), opt), ConfigError);
  opt.microbatch = 64;
  EXPECT_THROW(estimate_offline(model, stationary_data(30, 1), opt), ConfigError);
}
