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

#include "avsd/finetune.hpp"
#include "oracles.hpp"

namespace avsd {
namespace {

using ad::Var;

Tensor RandomLogits(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t = Tensor::Matrix(r, c);
  for (double& v : t.vec()) v = rng.Normal();
  return t;
}

TEST(CeLoss, Examples) {
  Tensor p = Tensor::FromRows({{0.5, 0.5, 0.0}, {0.25, 0.0, 0.75}});
  EXPECT_NEAR(finetune::CeLoss(p, {0, 0}), (std::log(2.0) + std::log(4.0)) / 2.0, 1e-12);
  EXPECT_NEAR((std::log(2.0) + std::log(4.0)) / 2.0, 1.0397, 1e-4);
  EXPECT_EQ(finetune::CeLoss(Tensor::FromRows({{1.0, 0.0}, {0.0, 1.0}}), {0, 1}), 0.0);
  EXPECT_THROW(finetune::CeLoss(Tensor::Matrix(0, 3), {}), ConfigError);
  EXPECT_THROW(finetune::CeLoss(p, {0, 3}), ConfigError);
}

TEST(CeLoss, LogitVersionAgreesWithProbabilities) {
  Rng rng(1);
  const Tensor logits = RandomLogits(4, 6, rng);
  ad::Tape tape(false);
  Var x = tape.Input(logits);
  const std::vector<int> t{1, 5, 0, 2};
  EXPECT_NEAR(finetune::CeLoss(x, t).value().item(), finetune::CeLoss(ad::Softmax(x).value(), t), 1e-12);
}

TEST(CtcLoss, Examples) {
  auto one = finetune::CtcLoss(Tensor::FromRows({{0.7, 0.2, 0.1}}), {0}, 2);
  ASSERT_TRUE(one.feasible);
  EXPECT_NEAR(one.loss, -std::log(0.7), 1e-12);
  auto uni = finetune::CtcLoss(Tensor::Matrix(2, 3, 1.0 / 3.0), {0}, 2);
  EXPECT_NEAR(uni.loss, std::log(3.0), 1e-12);
  auto infeasible = finetune::CtcLoss(Tensor::FromRows({{0.3, 0.3, 0.4}}), {0, 1}, 2);
  EXPECT_FALSE(infeasible.feasible);
  EXPECT_TRUE(std::isinf(infeasible.loss));
  EXPECT_THROW(finetune::CtcLoss(Tensor::FromRows({{0.3, 0.3, 0.3}}), {0}, 2), NumericError);
}

TEST(CtcLoss, MatchesBruteForce) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 1 + rng.Index(6), C = 2 + rng.Index(3);
    std::vector<int> labels(rng.Index(4));
    for (int& l : labels) l = static_cast<int>(rng.Index(C - 1));
    const Tensor p = oracle::RandomPosteriors(T, C, rng);
    const int blank = static_cast<int>(C) - 1;
    auto r = finetune::CtcLoss(p, labels, blank);
    const double brute = oracle::BruteCtcNll(p, labels, blank);
    EXPECT_EQ(r.feasible, !std::isinf(brute));
    if (r.feasible) EXPECT_NEAR(r.loss, brute, 1e-6);
  }
}

TEST(CtcLoss, InvariantToPermutingUnusedColumns) {
  Rng rng(3);
  const Tensor p = oracle::RandomPosteriors(5, 5, rng);
  Tensor q = p;
  for (std::size_t t = 0; t < 5; ++t) std::swap(q(t, 2), q(t, 3));
  EXPECT_NEAR(finetune::CtcLoss(p, {0, 1, 0}, 4).loss, finetune::CtcLoss(q, {0, 1, 0}, 4).loss, 1e-12);
}

TEST(JointLoss, Arithmetic) {
  EXPECT_NEAR(finetune::JointLoss(1.0, 2.0, 0.1), 1.2, 1e-15);
  EXPECT_EQ(finetune::JointLoss(1.0, 2.0, 0.0), 1.0);
  ad::Tape tape(false);
  Var ce = tape.Input(Tensor::Scalar(0.5));
  EXPECT_EQ(finetune::JointLoss(ce, std::nullopt, 0.1).value().item(), 0.5);
}

TEST(Gradients, LossesWithRespectToLogits) {
  Rng rng(4);
  nn::ParamStore ps;
  ps.Set("dec", RandomLogits(4, 5, rng));
  ps.Set("ctc", RandomLogits(6, 5, rng));
  const std::vector<int> target{1, 3, 0, 4}, transcript{1, 3, 0};
  auto ce = [&](nn::Binder& p) { return finetune::CeLoss(p("dec"), target); };
  auto ctc = [&](nn::Binder& p) { return *ad::CtcNll(ad::LogSoftmax(p("ctc")), transcript, 4); };
  auto joint = [&](nn::Binder& p) {
    return finetune::JointLoss(finetune::CeLoss(p("dec"), target), ad::CtcNll(ad::LogSoftmax(p("ctc")), transcript, 4),
                               0.1);
  };
  EXPECT_LT(oracle::FiniteDifference(ps, ce, 100, 1).rel_error, 1e-4);
  EXPECT_LT(oracle::FiniteDifference(ps, ctc, 100, 1).rel_error, 1e-4);
  EXPECT_LT(oracle::FiniteDifference(ps, joint, 100, 1).rel_error, 1e-4);
}

TEST(Gradients, RecognizerLossThroughWholeModel) {
  const auto mc = oracle::TinyModel();
  // Zero-initialized biases put ReLU inputs of blank image regions exactly on the kink.
  auto ps = oracle::Jitter(model::InitRecognizer(mc, 2), 0.05, 3);
  const auto utts = oracle::TinyCorpus(1, 5);
  auto loss = [&](nn::Binder& p) { return finetune::RecognizerLoss(p, mc, utts[0], 0.1).total; };
  EXPECT_LT(oracle::FiniteDifference(ps, loss, 5, 2).rel_error, 1e-4);
}

TEST(InitFromPretrained, CopiesEncoderAndNamesMissingTensors) {
  const auto mc = oracle::TinyModel();
  const auto pre = model::InitAv2vec(mc, 3);
  const auto ps = finetune::InitFromPretrained(pre, mc, 4);
  std::size_t copied = 0;
  for (const auto& [name, v] : ps.all())
    if (model::IsEncoderParam(name)) {
      EXPECT_EQ(v, pre.Get(name)) << name;
      ++copied;
    } else {
      EXPECT_FALSE(pre.Contains(name) && pre.Get(name) == v) << name;
    }
  EXPECT_GT(copied, 0u);
  auto broken = pre;
  broken.Erase("encoder.block0.ln1.g");
  try {
    finetune::InitFromPretrained(broken, mc, 4);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.block0.ln1.g"), std::string::npos) << e.what();
  }
}

TEST(Finetune, EncoderBitwiseConstantWhileFrozen) {
  const auto mc = oracle::TinyModel();
  const auto utts = oracle::TinyCorpus(6, 6);
  finetune::FinetuneConfig cfg;
  cfg.total_steps = 3;
  cfg.batch_size = 2;
  const auto init = model::InitRecognizer(mc, 1);
  auto frozen = finetune::Finetune(utts, mc, cfg, init, 3);
  for (const auto& [name, v] : init.all()) {
    if (model::IsEncoderParam(name)) EXPECT_EQ(frozen.params.Get(name), v) << name;
  }
  EXPECT_NE(frozen.params.Get("ctc.proj.w"), init.Get("ctc.proj.w"));
  cfg.total_steps = 5;
  auto thawed = finetune::Finetune(utts, mc, cfg, init, 3);
  EXPECT_NE(thawed.params.Get("encoder.block0.ln1.g"), init.Get("encoder.block0.ln1.g"));
  EXPECT_TRUE(thawed.log[2].frozen);
  EXPECT_FALSE(thawed.log[3].frozen);
  const std::string csv = finetune::LogCsv(thawed.log);
  EXPECT_EQ(csv.rfind("step,L_ce,L_ctc,L_si,lr,frozen\n", 0), 0u);
}

TEST(Finetune, DefaultFreezeIsTenPercent) {
  finetune::FinetuneConfig cfg;
  cfg.total_steps = 2000;
  EXPECT_EQ(cfg.ConfiguredFreezeSteps(), 200u);
  cfg.freeze_steps = 7;
  EXPECT_EQ(cfg.ConfiguredFreezeSteps(), 7u);
}

TEST(Finetune, LossFallsOnTinyCorpus) {
  auto mc = oracle::TinyModel();
  const auto utts = oracle::TinyCorpus(8, 7);
  finetune::FinetuneConfig cfg;
  cfg.total_steps = 60;
  cfg.batch_size = 4;
  cfg.peak_lr = 5e-3;
  auto r = finetune::Finetune(utts, mc, cfg, model::InitRecognizer(mc, 1), 0);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    first += r.log[i].si;
    last += r.log[r.log.size() - 1 - i].si;
  }
  EXPECT_LT(last, first);
}

}  // namespace
}  // namespace avsd
