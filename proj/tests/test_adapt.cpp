// Copyright 2026  The avsd Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>

#include "avsd/adapt.hpp"
#include "avsd/checkpoint.hpp"
#include "oracles.hpp"

namespace avsd {
namespace {

using ad::Var;

Tensor RandomDistributions(std::size_t n, std::size_t v, Rng& rng) {
  Tensor p = Tensor::Matrix(n, v);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += (p(i, j) = std::exp(rng.Normal()));
    for (std::size_t j = 0; j < v; ++j) p(i, j) /= s;
  }
  return p;
}

TEST(KldLoss, Examples) {
  const Tensor si = Tensor::FromRows({{0.5, 0.5}});
  EXPECT_EQ(adapt::KldLoss(si, si), 0.0);
  EXPECT_NEAR(adapt::KldLoss(si, Tensor::FromRows({{0.9, 0.1}})),
              0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1), 1e-12);
  EXPECT_NEAR(adapt::KldLoss(si, Tensor::FromRows({{0.9, 0.1}})), 0.5108, 1e-4);
  EXPECT_THROW(adapt::KldLoss(si, Tensor::FromRows({{1.0}})), ShapeError);
}

TEST(KldLoss, NonNegativeAndClamped) {
  Rng rng(1);
  for (int i = 0; i < 50; ++i)
    EXPECT_GE(adapt::KldLoss(RandomDistributions(3, 4, rng), RandomDistributions(3, 4, rng)), 0.0);
  const double clamped = adapt::KldLoss(Tensor::FromRows({{0.5, 0.5}}), Tensor::FromRows({{1.0, 0.0}}));
  EXPECT_NEAR(clamped, 0.5 * std::log(0.5) + 0.5 * std::log(0.5 / adapt::kProbFloor), 1e-9);
}

TEST(KldLoss, DifferentiableFormAgrees) {
  Rng rng(2);
  Tensor logits = Tensor::Matrix(3, 5);
  for (double& v : logits.vec()) v = rng.Normal();
  const Tensor si = RandomDistributions(3, 5, rng);
  ad::Tape tape(false);
  Var x = tape.Input(logits);
  EXPECT_NEAR(adapt::KldLoss(x, si).value().item(), adapt::KldLoss(si, ad::Softmax(x).value()), 1e-12);
}

TEST(AdaptLoss, Examples) {
  const Tensor si = Tensor::FromRows({{0.5, 0.5}}), sd = Tensor::FromRows({{0.9, 0.1}});
  EXPECT_NEAR(adapt::AdaptLoss(sd, si, {0}, 0.1, 0.0, 0.0), -(0.95 * std::log(0.9) + 0.05 * std::log(0.1)), 1e-12);
  EXPECT_NEAR(adapt::AdaptLoss(sd, si, {0}, 0.1, 0.0, 0.0), 0.2152, 1e-4);
  EXPECT_NEAR(adapt::AdaptLoss(si, si, {1}, 1.0, 0.0, 0.0), std::log(2.0), 1e-12);
  EXPECT_NEAR(adapt::AdaptLoss(sd, si, {0}, 0.0, 0.1, 2.0), finetune::CeLoss(sd, {0}) + 0.2, 1e-12);
  EXPECT_THROW(adapt::AdaptLoss(sd, si, {0}, 1.5, 0.0, 0.0), ConfigError);
}

TEST(AdaptLoss, RhoZeroIsBitwiseTheJointPath) {
  Rng rng(3);
  Tensor logits = Tensor::Matrix(4, 6), ctc_logits = Tensor::Matrix(7, 6);
  for (double& v : logits.vec()) v = rng.Normal();
  for (double& v : ctc_logits.vec()) v = rng.Normal();
  const Tensor si = RandomDistributions(4, 6, rng);
  const std::vector<int> targets{1, 2, 0, 5}, transcript{1, 2, 0};
  auto run = [&](bool adapt_path) {
    ad::Tape tape;
    Var x = tape.Param(logits, "x"), c = tape.Param(ctc_logits, "c");
    auto ctc = ad::CtcNll(ad::LogSoftmax(c), transcript, 5);
    Var l = adapt_path ? adapt::AdaptLoss(x, si, targets, 0.0, 0.1, ctc)
                       : finetune::JointLoss(finetune::CeLoss(x, targets), ctc, 0.1);
    tape.Backward(l);
    return std::tuple{l.value().item(), tape.Grad(x), tape.Grad(c)};
  };
  EXPECT_EQ(run(true), run(false));
}

TEST(AdaptLoss, SoftLabelFormHasTheWeightedKlGradient) {
  const auto mc = oracle::TinyModel();
  const auto params = model::InitRecognizer(mc, 5);
  const auto utts = oracle::TinyCorpus(3, 4);
  Rng rng(4);
  for (double rho : {0.0, 0.1, 0.5, 1.0}) {
    for (const auto& u : utts) {
      auto [in, target] = model::TeacherForcing(mc.vocabulary(), u.transcript);
      const Tensor si = RandomDistributions(target.size(), mc.vocabulary().decoder_classes(), rng);
      auto grads = [&](bool soft) {
        ad::Tape tape;
        nn::Binder p(tape, params);
        Var logits = finetune::RecognizerForward(p, mc, u.lip, in).decoder_logits;
        Var l = soft ? adapt::AdaptLoss(logits, si, target, rho, 0.0, std::nullopt)
                     : ad::Add(ad::Scale(finetune::CeLoss(logits, target), 1.0 - rho),
                               ad::Scale(adapt::KldLoss(logits, si), rho));
        tape.Backward(l);
        return p.Gradients();
      };
      const auto a = grads(true), b = grads(false);
      double worst = 0.0;
      for (const auto& [name, g] : a) worst = std::max(worst, MaxAbsDiff(g, b.at(name)));
      EXPECT_LT(worst, 1e-8) << "rho=" << rho;
    }
  }
}

TEST(AdaptLoss, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  nn::ParamStore ps;
  Tensor logits = Tensor::Matrix(4, 5);
  for (double& v : logits.vec()) v = rng.Normal();
  ps.Set("x", logits);
  const Tensor si = RandomDistributions(4, 5, rng);
  const std::vector<int> t{0, 3, 3, 4};
  auto kld = [&](nn::Binder& p) { return adapt::KldLoss(p("x"), si); };
  auto sa = [&](nn::Binder& p) { return adapt::AdaptLoss(p("x"), si, t, 0.3, 0.0, std::nullopt); };
  EXPECT_LT(oracle::FiniteDifference(ps, kld, 100, 1).rel_error, 1e-4);
  EXPECT_LT(oracle::FiniteDifference(ps, sa, 100, 1).rel_error, 1e-4);
}

TEST(TrainValidSplit, EightTwoAndDisjoint) {
  auto [train, valid] = adapt::TrainValidSplit(20, 1, "spk");
  EXPECT_EQ(train.size(), 16u);
  EXPECT_EQ(valid.size(), 4u);
  std::set<std::size_t> all(train.begin(), train.end());
  all.insert(valid.begin(), valid.end());
  EXPECT_EQ(all.size(), 20u);
  EXPECT_EQ(adapt::TrainValidSplit(20, 1, "spk"), adapt::TrainValidSplit(20, 1, "spk"));
}

class AdaptFixture : public ::testing::Test {
 protected:
  AdaptFixture() : mc(oracle::TinyModel()), utts(oracle::TinyCorpus(10, 8)) {
    finetune::FinetuneConfig fc;
    fc.total_steps = 30;
    fc.batch_size = 4;
    fc.peak_lr = 5e-3;
    si = finetune::Finetune(utts, mc, fc, model::InitRecognizer(mc, 1), 0).params;
    cfg.speaker = utts[0].speaker_id;
    cfg.peak_lr = 1e-3;
    cfg.warmup_steps = 2;
    cfg.decay_steps = 18;
    cfg.eval_every = 5;
  }
  model::ModelConfig mc;
  std::vector<corpus::Utterance> utts;
  nn::ParamStore si;
  adapt::AdaptConfig cfg;
};

TEST_F(AdaptFixture, ZeroStepsReturnsSiParameters) {
  cfg.warmup_steps = 0;
  cfg.decay_steps = 0;
  auto r = adapt::Adapt(si, utts, mc, cfg);
  EXPECT_EQ(r.params, si);
  EXPECT_EQ(r.best_step, 0u);
}

TEST_F(AdaptFixture, ValidationLossDoesNotRiseAndSiIsUntouched) {
  const std::string before = ckpt::ContentHash(ckpt::Encode({ckpt::Stage::kSi, "", "", "", {}, si}));
  auto r = adapt::Adapt(si, utts, mc, cfg);
  EXPECT_LE(r.best_valid_loss, r.initial_valid_loss);
  EXPECT_EQ(ckpt::ContentHash(ckpt::Encode({ckpt::Stage::kSi, "", "", "", {}, si})), before);
  EXPECT_EQ(r.log.size(), 21u);
  EXPECT_EQ(adapt::LogCsv(r.log).rfind("step,train_loss,valid_loss,lr\n", 0), 0u);
}

TEST_F(AdaptFixture, UnknownSpeakerIsAnError) {
  cfg.speaker = "nobody";
  EXPECT_THROW(adapt::Adapt(si, utts, mc, cfg), ConfigError);
}

}  // namespace
}  // namespace avsd
