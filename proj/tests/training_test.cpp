#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cuimlm/checkpoint.hpp"
#include "cuimlm/gradcheck.hpp"
#include "cuimlm/losses.hpp"
#include "cuimlm/synthetic.hpp"
#include "cuimlm/training.hpp"

using namespace cuimlm;

namespace {

constexpr double kLn2 = std::numbers::ln2;

Tensor row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({1, n}, std::move(v));
}

TargetMatrix targets(std::vector<std::vector<int>> bits, TargetMode mode = TargetMode::CuiExpanded) {
  TargetMatrix t(mode, bits.size(), bits.empty() ? 0 : bits[0].size());
  for (std::size_t r = 0; r < bits.size(); ++r)
    for (std::size_t c = 0; c < bits[r].size(); ++c)
      if (bits[r][c]) t.set(r, c);
  return t;
}

TEST(Loss, CrossEntropyHandValues) {
  const std::vector<std::size_t> id0{0};
  EXPECT_NEAR(ce_loss(row({0.0, 0.0}), id0), std::log(2.0), 1e-12);
  EXPECT_NEAR(ce_loss(row({1.0, -1.0}), id0), std::log1p(std::exp(-2.0)), 1e-12);
  EXPECT_NEAR(ce_loss(row({1.0, -1.0}), id0), 0.126928, 1e-6);
  EXPECT_LT(ce_loss(row({50.0, 0.0}), id0), 1e-20);
  EXPECT_NEAR(ce_loss(row({0.0, 0.0}), targets({{1, 0}}, TargetMode::OneHot)), kLn2, 1e-12);
}

TEST(Loss, CrossEntropyMeansOverRows) {
  Tensor y({2, 2}, std::vector<double>{0.0, 0.0, 1.0, -1.0});
  EXPECT_NEAR(ce_loss(y, std::vector<std::size_t>{0, 0}), 0.5 * (kLn2 + std::log1p(std::exp(-2.0))), 1e-12);
}

TEST(Loss, CrossEntropyRejectsMultiHotRows) {
  EXPECT_THROW(ce_loss(row({0.0, 0.0}), targets({{1, 1}})), DataError);
}

TEST(Loss, BinaryCrossEntropyHandValues) {
  EXPECT_NEAR(bce_loss(row({0.0, 0.0}), targets({{1, 1}})), 2.0 * kLn2, 1e-12);
  EXPECT_NEAR(bce_loss(row({0.0, 0.0}), targets({{1, 0}})), 2.0 * kLn2, 1e-12);
  const double expect = 3.0 * std::log1p(std::exp(-2.0));
  EXPECT_NEAR(bce_loss(row({2.0, 2.0, -2.0}), targets({{1, 1, 0}})), expect, 1e-12);
  EXPECT_NEAR(expect, 0.380784, 1e-6);
}

TEST(Loss, BinaryCrossEntropyRejectsEmptyRow) {
  EXPECT_THROW(bce_loss(row({0.0, 0.0}), targets({{0, 0}})), DataError);
  EXPECT_THROW(bce_loss(row({0.0, 0.0}), targets({{1, 0, 0}})), ShapeError);
}

TEST(Loss, BceOfOneHotEqualsNaivePerChannelLoss) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t D = 12, hot = rng.below(D);
    std::vector<double> y(D);
    for (double& v : y) v = rng.uniform(-6, 6);
    std::vector<std::vector<int>> bits(1, std::vector<int>(D, 0));
    bits[0][hot] = 1;
    double naive = 0.0;
    for (std::size_t c = 0; c < D; ++c) {
      const double s = 1.0 / (1.0 + std::exp(-y[c]));
      naive += c == hot ? -std::log(s) : -std::log(1.0 - s);
    }
    EXPECT_NEAR(bce_loss(row(y), targets(bits)), naive, 1e-12);
  }
}

TEST(Loss, StableFormsSurviveExtremeLogits) {
  EXPECT_TRUE(std::isfinite(bce_loss(row({800.0, -800.0}), targets({{0, 1}}))));
  EXPECT_NEAR(bce_loss(row({800.0, -800.0}), targets({{0, 1}})), 1600.0, 1e-9);
  EXPECT_NEAR(ce_loss(row({-800.0, 800.0}), std::vector<std::size_t>{0}), 1600.0, 1e-9);
}

Gradients loss_grad(const std::vector<double>& y, const TargetMatrix& t) {
  Tape tape;
  Var v = tape.parameter(row(y), 0);
  return tape.backward(binary_cross_entropy(v, t));
}

TEST(Loss, SiblingBitFlipsGradientSign) {
  const std::vector<double> y{1.5, -0.7, 0.3};
  TargetMatrix without = targets({{1, 0, 0}}), with = targets({{1, 1, 0}});
  EXPECT_GT(loss_grad(y, without)[0][1], 0.0);
  EXPECT_LT(loss_grad(y, with)[0][1], 0.0);
  // Logit below zero: claiming the channel as positive costs more.
  EXPECT_GT(bce_loss(row(y), with), bce_loss(row(y), without));
}

TEST(Loss, TapeGradientsMatchClosedForm) {
  const std::vector<double> y{0.2, -1.0, 2.0};
  Tape tape;
  Var v = tape.parameter(row(y), 0);
  Gradients g = tape.backward(cross_entropy(v, std::vector<std::size_t>{2}));
  double z = 0.0;
  for (double x : y) z += std::exp(x);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(g[0][c], std::exp(y[c]) / z - (c == 2 ? 1.0 : 0.0), 1e-15);
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  ModelConfig cfg;
  cfg.vocab_size = 10;
  Rng rng(1);
  ModelParams p = init_params(cfg, rng);
  const ModelParams before = p;
  OptimizerState opt = OptimizerState::zeros_like(p);
  Gradients zero;
  for (const Tensor* t : p.tensors()) zero.emplace_back(t->shape());
  for (int i = 0; i < 3; ++i) adam_update(p, opt, zero, 1e-3);
  EXPECT_EQ(p, before);
  EXPECT_EQ(opt.step, 3u);
}

TEST(Adam, FirstStepMovesBySignTimesLearningRate) {
  Tensor w({3}, std::vector<double>{1.0, 1.0, 1.0});
  Tensor* ps[1] = {&w};
  OptimizerState opt;
  opt.m = {Tensor({3})};
  opt.v = {Tensor({3})};
  adam_update(std::span<Tensor* const>(ps), opt, {Tensor({3}, std::vector<double>{0.5, -2.0, 0.0})}, 0.1);
  // Bias-corrected m/sqrt(v) is g/|g|, softened by eps.
  EXPECT_NEAR(w[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(w[1], 1.0 + 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_EQ(w[2], 1.0);
}

struct Toy {
  GradCheckFixture fx = make_gradcheck_fixture(3);
  ModelParams params;
  TrainConfig tcfg;

  explicit Toy(LossMode mode = LossMode::BceCui) {
    Rng rng(5);
    params = init_params(fx.model, rng, 0.1);
    tcfg.loss_mode = mode;
    tcfg.learning_rate = 1e-2;
    tcfg.mask_rate = 0.3;
  }

  MaskedBatch batch(std::uint64_t seed) const {
    Rng rng(seed);
    return prepare_batch(fx.sentences, rng, tcfg, fx.lexicon, fx.vocab);
  }
};

TEST(TrainStep, LearningRateZeroKeepsParametersBitwise) {
  Toy toy;
  toy.tcfg.learning_rate = 0.0;
  const ModelParams before = toy.params;
  OptimizerState opt = OptimizerState::zeros_like(toy.params);
  train_step(toy.params, opt, toy.batch(1), toy.fx.model, toy.tcfg);
  EXPECT_EQ(toy.params, before);
}

TEST(TrainStep, RepeatedBatchDescends) {
  for (LossMode mode : {LossMode::CeOneHot, LossMode::BceCui}) {
    Toy toy(mode);
    OptimizerState opt = OptimizerState::zeros_like(toy.params);
    const MaskedBatch b = toy.batch(9);
    const double first = train_step(toy.params, opt, b, toy.fx.model, toy.tcfg);
    const double second = train_step(toy.params, opt, b, toy.fx.model, toy.tcfg);
    EXPECT_LT(second, first) << to_string(mode);
  }
}

TEST(TrainStep, NonFiniteLossReportsStep) {
  Toy toy;
  toy.params.token_table.fill(NAN);
  OptimizerState opt = OptimizerState::zeros_like(toy.params);
  try {
    train_step(toy.params, opt, toy.batch(1), toy.fx.model, toy.tcfg, 17);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.step(), 17u);
  }
}

TEST(Batch, TargetsFollowLossMode) {
  Toy toy;
  const MaskedBatch b = toy.batch(2);
  EXPECT_EQ(b.targets.mode(), TargetMode::CuiExpanded);
  std::size_t rows = 0;
  for (const auto& o : b.outcomes) rows += o.masked_positions.size();
  EXPECT_EQ(b.targets.rows(), rows);
  for (std::size_t i = 0; i < b.inputs.size(); ++i) EXPECT_EQ(b.inputs[i].token_ids, b.outcomes[i].corrupted_ids);
}

TEST(Batch, LexiconFreeTargetsMatchAcrossModes) {
  Toy ce(LossMode::CeOneHot), bce(LossMode::BceCui);
  ce.fx.lexicon = Lexicon{};
  bce.fx.lexicon = Lexicon{};
  for (std::uint64_t s = 0; s < 10; ++s) {
    const MaskedBatch a = ce.batch(s), b = bce.batch(s);
    ASSERT_EQ(a.targets.rows(), b.targets.rows());
    for (std::size_t r = 0; r < a.targets.rows(); ++r) EXPECT_EQ(a.targets.set_ids(r), b.targets.set_ids(r));
  }
}

TEST(Config, TrainValidation) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  t.mask_rate = 1.0;
  EXPECT_THROW(t.validate(), DataError);
  t = TrainConfig{};
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), DataError);
  t = TrainConfig{};
  t.total_steps = 0;
  EXPECT_THROW(t.validate(), DataError);
  EXPECT_EQ(parse_loss_mode("bce-cui"), LossMode::BceCui);
  EXPECT_THROW(parse_loss_mode("bce"), DataError);
}

struct SmallRun {
  SyntheticCorpus sc = make_synthetic_corpus(200, 1);
  Vocab vocab = build_vocab(sc.sentences, 1, 1000);
  ModelConfig mcfg;
  TrainConfig tcfg;

  SmallRun() {
    mcfg.hidden_dim = 16;
    mcfg.layer_count = 1;
    mcfg.head_count = 2;
    mcfg.ff_dim = 32;
    mcfg.max_seq_len = 12;
    mcfg = model_config_for(mcfg, vocab, sc.lexicon);
    tcfg.loss_mode = LossMode::BceCui;
    tcfg.total_steps = 8;
    tcfg.batch_size = 4;
    tcfg.seed = 11;
  }
};

TEST(Loop, SingleStepIsOneUpdate) {
  SmallRun r;
  r.tcfg.total_steps = 1;
  std::size_t calls = 0;
  TrainCallbacks cb;
  cb.on_step = [&](std::size_t, double) { ++calls; };
  Checkpoint ck = train_loop(r.sc.sentences, r.sc.lexicon, r.vocab, r.mcfg, r.tcfg, cb);
  EXPECT_EQ(calls, 1u);
  EXPECT_EQ(ck.step, 1u);
  EXPECT_EQ(ck.optimizer.step, 1u);
}

TEST(Loop, SameSeedSameCheckpointBytes) {
  SmallRun r;
  const Checkpoint a = train_loop(r.sc.sentences, r.sc.lexicon, r.vocab, r.mcfg, r.tcfg);
  const Checkpoint b = train_loop(r.sc.sentences, r.sc.lexicon, r.vocab, r.mcfg, r.tcfg, {}, 3);
  EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
  r.tcfg.seed = 12;
  EXPECT_NE(checkpoint_bytes(a), checkpoint_bytes(train_loop(r.sc.sentences, r.sc.lexicon, r.vocab, r.mcfg, r.tcfg)));
}

TEST(Loop, ResumeMatchesUninterruptedRun) {
  SmallRun r;
  r.tcfg.checkpoint_every = 3;
  std::vector<std::string> saved;
  TrainCallbacks cb;
  cb.on_checkpoint = [&](const Checkpoint& c) { saved.push_back(checkpoint_bytes(c)); };
  const Checkpoint full = train_loop(r.sc.sentences, r.sc.lexicon, r.vocab, r.mcfg, r.tcfg, cb);
  ASSERT_EQ(saved.size(), 2u);  // steps 3 and 6

  const Checkpoint mid = checkpoint_from_bytes(saved[0]);
  EXPECT_EQ(mid.step, 3u);
  const auto encoded = encode_corpus(r.sc.sentences, r.vocab, r.sc.lexicon, r.mcfg.max_seq_len);
  const Checkpoint resumed = train_from(mid, encoded, r.sc.lexicon, r.vocab);
  EXPECT_EQ(checkpoint_bytes(resumed), checkpoint_bytes(full));
}

TEST(Loop, EncodingDoesNotDependOnThreads) {
  SmallRun r;
  EXPECT_EQ(encode_corpus(r.sc.sentences, r.vocab, r.sc.lexicon, 12, 1),
            encode_corpus(r.sc.sentences, r.vocab, r.sc.lexicon, 12, 4));
}

TEST(Loop, SampleOrderCoversEachEpoch) {
  SampleOrder order(7, 3);
  for (std::uint64_t epoch = 0; epoch < 3; ++epoch) {
    std::vector<std::size_t> seen;
    for (std::uint64_t i = 0; i < 7; ++i) seen.push_back(order.at(epoch * 7 + i));
    std::sort(seen.begin(), seen.end());
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(seen[i], i);
  }
}

TEST(Loop, LossFallsOnSyntheticCorpus) {
  SyntheticCorpus sc = make_synthetic_corpus(2000, 0);
  Vocab vocab = build_vocab(sc.sentences, 1, 1000);
  ModelConfig mcfg = model_config_for(ModelConfig{}, vocab, sc.lexicon);
  TrainConfig tcfg;
  tcfg.total_steps = 500;
  tcfg.seed = 5;
  std::vector<double> losses;
  TrainCallbacks cb;
  cb.on_step = [&](std::size_t, double loss) { losses.push_back(loss); };
  train_loop(sc.sentences, sc.lexicon, vocab, mcfg, tcfg, cb);
  ASSERT_EQ(losses.size(), 500u);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    first += losses[i];
    last += losses[450 + i];
  }
  EXPECT_LT(last, first);
}

TEST(GradientOracle, FullModelBothLosses) {
  for (LossMode mode : {LossMode::CeOneHot, LossMode::BceCui}) {
    const GradCheckReport r = model_gradient_check(mode, 1);
    EXPECT_LE(r.max_relative_error, 1e-4) << to_string(mode) << " worst " << r.worst_parameter;
    EXPECT_EQ(r.entries_checked, 868u);
  }
}

TEST(GradientOracle, FixtureShape) {
  GradCheckFixture fx = make_gradcheck_fixture(1);
  EXPECT_EQ(fx.vocab.size(), 20u);
  EXPECT_EQ(fx.model.max_seq_len, 6u);
  EXPECT_EQ(fx.model.hidden_dim, 8u);
}

}  // namespace
