#include <gtest/gtest.h>

#include <cmath>

#include "rul/training.hpp"

using namespace rul;

namespace {

constexpr double kExact = 1e-12;
constexpr double kGradTol = 1e-4;
constexpr double kGradEps = 1e-4;
constexpr double kKlDominationBound = 1e-3;
constexpr double kStdErrMultiple = 10.0;

struct Small {
  Dataset ds;
  Vocab vocab;
  ModelConfig model;
};

const Small& small() {
  static const Small s = [] {
    Small s;
    GenerationSpec spec;
    spec.n_train = 60;
    spec.n_valid = spec.n_test = 12;
    spec.k_max = 3;
    spec.m_max = 2;
    spec.seed = 5;
    s.ds = generate_dataset(spec);
    s.vocab = build_vocab(std::vector<const std::vector<Example>*>{&s.ds.train, &s.ds.valid, &s.ds.test}, kBareRefusal);
    s.model.d = 8;
    s.model.d_a = s.model.d_a_prime = 4;
    s.model.max_len = 24;
    s.model.vocab_size = s.vocab.size();
    return s;
  }();
  return s;
}

TrainConfig quick_sft(std::uint64_t seed = 0) {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 8;
  c.lr = 1e-2;
  c.seed = seed;
  return c;
}

const SftResult& small_sft() {
  static const SftResult r = train_sft(small().ds.train, small().ds.valid, small().vocab, small().model, quick_sft());
  return r;
}

ModelParams unit_params(double value) {
  ModelConfig c = small().model;
  ModelParams p = ModelParams::zeros(c);
  p.for_each([&](const char*, ad::Matrix& m) { m.setConstant(value); });
  return p;
}

RlTrainConfig quick_rl() {
  RlTrainConfig c;
  c.iterations = 5;
  c.rl.batch_size = 8;
  c.rl.samples_per_prompt = 4;
  c.heldout_size = 8;
  c.max_len = 20;
  return c;
}

}  // namespace

TEST(Optimizer, SgdZeroGradientLeavesParams) {
  ModelParams p = unit_params(0.3);
  const ModelParams before = p;
  OptimizerState st(OptimizerKind::Sgd);
  optimizer_step(p, p.zeros_like(), st, 0.1);
  EXPECT_EQ(max_abs_diff(p, before), 0.0);
}

TEST(Optimizer, SgdStepArithmetic) {
  ModelParams p = unit_params(1.0);
  ModelParams g = unit_params(0.5);
  OptimizerState st(OptimizerKind::Sgd);
  optimizer_step(p, g, st, 0.1);
  p.for_each([](const char* n, const ad::Matrix& m) {
    if (m.size()) {
      EXPECT_NEAR(m(0, 0), 0.95, kExact) << n;
    }
  });
}

TEST(Optimizer, AdamFirstStepIsLrTimesSign) {
  ModelParams p = unit_params(1.0);
  ModelParams g = unit_params(0.0);
  g.E(0, 0) = 3.0;
  g.E(1, 0) = -0.02;
  OptimizerState st(OptimizerKind::Adam);
  optimizer_step(p, g, st, 0.01);
  EXPECT_NEAR(p.E(0, 0), 1.0 - 0.01, 1e-8);
  EXPECT_NEAR(p.E(1, 0), 1.0 + 0.01, 1e-6);
  EXPECT_DOUBLE_EQ(p.E(2, 0), 1.0);
  EXPECT_EQ(st.step, 1);
}

TEST(Optimizer, ShapeMismatchIsValidationError) {
  ModelParams p = unit_params(1.0);
  ModelParams g = unit_params(0.0);
  g.W_q.resize(1, 1);
  OptimizerState st(OptimizerKind::Sgd);
  EXPECT_THROW(optimizer_step(p, g, st, 0.1), ValidationError);
}

TEST(Optimizer, GlobalNormClipping) {
  ModelParams g = unit_params(0.0);
  g.E(0, 0) = 3.0;
  g.b_r(0, 0) = 4.0;
  EXPECT_NEAR(clip_global_norm(g, 1.0), 5.0, kExact);
  EXPECT_NEAR(g.E(0, 0), 0.6, kExact);
  EXPECT_NEAR(g.b_r(0, 0), 0.8, kExact);
  EXPECT_NEAR(clip_global_norm(g, 0.0), 1.0, kExact);
  EXPECT_NEAR(g.E(0, 0), 0.6, kExact);
}

TEST(GradCheck, SelectedLossesPass) {
  const GradCheckCase c = gradcheck_case(3, 4);
  for (LossSelector sel : {LossSelector::Bce, LossSelector::Sft, LossSelector::Rm}) {
    const GradCheckReport r = grad_check(c.params, c.batch, sel, kGradEps, kGradTol, 30, 3);
    EXPECT_TRUE(r.passed) << to_string(sel) << " " << r.max_rel_error << " " << r.worst_tensor;
    EXPECT_GT(r.coordinates, 0u);
  }
}

TEST(GradCheck, NonFiniteLossFailsWithLocation) {
  GradCheckCase c = gradcheck_case(1, 2);
  c.params.W_cls(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const GradCheckReport r = grad_check(c.params, c.batch, LossSelector::Bce, kGradEps, kGradTol, 10, 1);
  EXPECT_FALSE(r.passed);
  EXPECT_FALSE(r.message.empty());
}

TEST(GradCheck, SelectorNamesRoundTrip) {
  for (LossSelector s : kAllLosses) EXPECT_EQ(parse_loss_selector(to_string(s)), s);
  EXPECT_THROW(parse_loss_selector("mse"), ConfigError);
}

TEST(TrainSft, DeterministicAndBoundedByConfig) {
  const SftResult& a = small_sft();
  const SftResult b = train_sft(small().ds.train, small().ds.valid, small().vocab, small().model, quick_sft());
  EXPECT_EQ(report_to_json(a.report).dump(), report_to_json(b.report).dump());
  EXPECT_EQ(max_abs_diff(a.params, b.params), 0.0);
  EXPECT_LE(a.report.epochs.size(), 3u);
  EXPECT_GE(a.report.best_epoch, 1);
  const double first = a.report.epochs.front().valid_loss;
  EXPECT_LE(a.report.epochs[static_cast<std::size_t>(a.report.best_epoch - 1)].valid_loss, first);
  EXPECT_TRUE(a.params.all_finite());
  EXPECT_EQ(report_to_json(a.report).dump().find("seconds"), std::string::npos);
}

TEST(TrainSft, SeedChangesResult) {
  const SftResult b = train_sft(small().ds.train, small().ds.valid, small().vocab, small().model, quick_sft(1));
  EXPECT_GT(max_abs_diff(small_sft().params, b.params), 0.0);
}

TEST(TrainSft, ProgressOncePerEpoch) {
  int lines = 0;
  TrainConfig c = quick_sft();
  c.epochs = 2;
  train_sft(small().ds.train, small().ds.valid, small().vocab, small().model, c,
            [&](const nlohmann::ordered_json& j) {
              ++lines;
              EXPECT_TRUE(j.contains("epoch"));
            });
  EXPECT_EQ(lines, 2);
}

TEST(TrainSft, InputErrors) {
  EXPECT_THROW(train_sft({}, small().ds.valid, small().vocab, small().model, quick_sft()), ValidationError);
  ModelConfig m = small().model;
  m.max_len = 3;
  EXPECT_THROW(train_sft(small().ds.train, small().ds.valid, small().vocab, m, quick_sft()), ConfigError);
  TrainConfig c = quick_sft();
  c.lr = 0;
  EXPECT_THROW(train_sft(small().ds.train, small().ds.valid, small().vocab, small().model, c), ConfigError);
}

TEST(TrainRm, SingleRepeatedPairSeparates) {
  const Example& ex = small().ds.train[0];
  PreferencePair p;
  p.example_id = ex.id;
  p.response_a = ex.target.tokens;
  p.response_b = kBareRefusal;
  if (p.response_a == p.response_b) p.response_b = {"I"};
  p.preferred = Side::A;
  const std::vector<PreferencePair> pairs(16, p);
  TrainConfig c = quick_sft();
  c.epochs = 25;
  c.batch_size = 4;
  c.patience = 50;
  const RmResult r = train_reward_model(pairs, {}, small().ds.train, small().vocab, small().model, c);
  const auto& eps = r.report.epochs;
  EXPECT_LT(eps.back().train_loss, eps.front().train_loss);
  EXPECT_LT(eps.back().train_loss, 0.05);
  EXPECT_DOUBLE_EQ(r.heldout_accuracy, 1.0);
}

TEST(TrainRm, DeterministicPerSeed) {
  const auto pairs = make_preference_pairs(small().ds.train, 40, 3);
  TrainConfig c = quick_sft();
  c.epochs = 2;
  const RmResult a = train_reward_model(pairs, pairs, small().ds.train, small().vocab, small().model, c);
  const RmResult b = train_reward_model(pairs, pairs, small().ds.train, small().vocab, small().model, c);
  EXPECT_EQ(max_abs_diff(a.params, b.params), 0.0);
  EXPECT_EQ(report_to_json(a.report).dump(), report_to_json(b.report).dump());
}

TEST(TrainRm, UnknownExampleIsValidationError) {
  auto pairs = make_preference_pairs(small().ds.train, 4, 3);
  pairs[0].example_id = "nope";
  EXPECT_THROW(train_reward_model(pairs, {}, small().ds.train, small().vocab, small().model, quick_sft()),
               ValidationError);
}

TEST(TrainRl, HugeBetaPinsPolicyToReference) {
  RlTrainConfig c = quick_rl();
  c.rl.beta_kl = 1e6;
  c.iterations = 10;
  const RewardFn reward = [](const EncodedExample&, const std::vector<int>& r) { return -static_cast<double>(r.size()); };
  const RlResult r = train_rl(small_sft().params, reward, small().ds.train, small().ds.valid, small().vocab, c);
  EXPECT_LT(max_abs_diff(r.params, small_sft().params), kKlDominationBound);
}

TEST(TrainRl, EosFirstRewardCollapsesLength) {
  RlTrainConfig c = quick_rl();
  c.iterations = 60;
  c.optimizer = OptimizerKind::Adam;
  c.lr = 0.02;
  c.clip_norm = 0;
  c.rl.beta_kl = 0;
  c.kl_bound = 1e9;
  const RewardFn reward = [](const EncodedExample&, const std::vector<int>& r) { return r.empty() ? 1.0 : 0.0; };
  const RlResult r = train_rl(small_sft().params, reward, small().ds.train, small().ds.valid, small().vocab, c);
  double tail = 0;
  for (std::size_t i = r.report.iterations.size() - 5; i < r.report.iterations.size(); ++i)
    tail += r.report.iterations[i].mean_length;
  EXPECT_LT(tail / 5, 0.5);
  EXPECT_GT(r.report.heldout_reward_after, r.report.heldout_reward_before);
}

TEST(TrainRl, KlBoundAbortsAfterThreeIterations) {
  RlTrainConfig c = quick_rl();
  c.kl_bound = 1e-300;
  c.optimizer = OptimizerKind::Adam;
  c.lr = 0.05;
  c.clip_norm = 0;
  int iterations = 0;
  const RewardFn reward = [](const EncodedExample&, const std::vector<int>& r) { return static_cast<double>(r.size()); };
  EXPECT_THROW(train_rl(small_sft().params, reward, small().ds.train, small().ds.valid, small().vocab, c,
                        [&](const nlohmann::ordered_json&) { ++iterations; }),
               TrainingAbort);
  EXPECT_GE(iterations, 3);
}

TEST(TrainRl, Deterministic) {
  const RlTrainConfig c = quick_rl();
  const RewardFn reward = [](const EncodedExample&, const std::vector<int>& r) { return 0.1 * static_cast<double>(r.size()); };
  const RlResult a = train_rl(small_sft().params, reward, small().ds.train, small().ds.valid, small().vocab, c);
  const RlResult b = train_rl(small_sft().params, reward, small().ds.train, small().ds.valid, small().vocab, c);
  EXPECT_EQ(max_abs_diff(a.params, b.params), 0.0);
  EXPECT_EQ(report_to_json(a.report).dump(), report_to_json(b.report).dump());
}

TEST(TrainRl, ConfigValidation) {
  RlTrainConfig c = quick_rl();
  c.iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = quick_rl();
  c.kl_bound = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = quick_rl();
  c.heldout_samples = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainRl, UpdatesOnlyDecoderTensors) {
  RlTrainConfig c = quick_rl();
  c.clip_norm = 0;
  c.lr = 0.1;
  const RewardFn reward = [](const EncodedExample&, const std::vector<int>& r) { return static_cast<double>(r.size()); };
  const RlResult r = train_rl(small_sft().params, reward, small().ds.train, small().ds.valid, small().vocab, c);
  bool decoder_moved = false;
  zip_params(r.params, small_sft().params, [&](const char* name, const ad::Matrix& a, const ad::Matrix& b) {
    const double diff = a.size() ? (a - b).cwiseAbs().maxCoeff() : 0.0;
    if (rl_trainable(name)) {
      decoder_moved = decoder_moved || diff > 0;
    } else {
      EXPECT_EQ(diff, 0.0) << name;
    }
  });
  EXPECT_TRUE(decoder_moved);
}

// Score-function identity: with a constant reward and no KL term the
// estimator r * grad log pi has zero mean. Checked on projections of the full
// gradient onto fixed random directions.
TEST(TrainRl, ConstantRewardGradientHasZeroExpectation) {
  const ModelParams policy = ModelParams::init(small().model, 7);
  const EncodedExample ex = encode_example(small().ds.train[0], small().vocab);
  constexpr int kDirections = 3;
  std::vector<ModelParams> dirs;
  for (int k = 0; k < kDirections; ++k) dirs.push_back(ModelParams::init(small().model, 100 + k));
  Rng rng(11);
  const int n = 1000;
  const double reward = 2.0;
  std::vector<double> sum(kDirections, 0.0), sumsq(kDirections, 0.0);
  for (int i = 0; i < n; ++i) {
    const PolicySample s = sample_response(policy, ex, 0.5, 8, 1.0, rng);
    ASSERT_FALSE(s.targets.empty());
    const ModelParams g = gradients(policy, [&](Bound& b) {
      const Forward f = forward(b, ex, policy.config.aggregation);
      std::vector<int> prev{kBos};
      prev.insert(prev.end(), s.targets.begin(), s.targets.end() - 1);
      return ad::scale(loss::sequence_nll(decoder_logprobs(b, f, s.mode, prev), s.targets), -reward);
    });
    for (int k = 0; k < kDirections; ++k) {
      double dot = 0.0;
      zip_params(g, dirs[k], [&](const char*, const ad::Matrix& x, const ad::Matrix& y) { dot += x.cwiseProduct(y).sum(); });
      sum[k] += dot;
      sumsq[k] += dot * dot;
    }
  }
  for (int k = 0; k < kDirections; ++k) {
    const double mean = sum[k] / n;
    const double se = std::sqrt(std::max(sumsq[k] / n - mean * mean, 0.0) / n);
    EXPECT_GT(se, 0.0);
    EXPECT_LT(std::abs(mean), kStdErrMultiple * se) << "direction " << k;
  }
}
