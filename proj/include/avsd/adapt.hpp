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

// Speaker adaptation of a speaker-independent recognizer with a KL penalty
// toward its own output distributions, realized as cross-entropy against
// interpolated soft targets.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "avsd/finetune.hpp"

namespace avsd::adapt {

using ad::Var;

inline constexpr double kProbFloor = 1e-12;

struct AdaptConfig {
  double rho = 0.1;
  double mu = 0.1;
  double peak_lr = 2e-4;
  std::size_t warmup_steps = 20;
  std::size_t decay_steps = 180;
  double final_lr_scale = 0.05;
  std::size_t batch_size = 4;
  std::size_t eval_every = 10;
  std::string speaker;
  nn::AdamOptions adam;
  std::uint64_t seed = 1;

  std::size_t total_steps() const { return warmup_steps + decay_steps; }
  void Validate() const {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("adapt: rho must be in [0,1]");
    if (!(mu >= 0.0)) throw ConfigError("adapt: mu must be >= 0");
    if (batch_size == 0 || eval_every == 0) throw ConfigError("adapt: batch_size and eval_every must be positive");
  }
};

/// (1/N) Σ_n Σ_i P_SI ln(P_SI / P_SD). P_SD entries are floored at 1e-12.
inline double KldLoss(const Tensor& p_si, const Tensor& p_sd) {
  if (p_si.shape() != p_sd.shape() || p_si.rank() != 2)
    throw ShapeError("kld_loss: shapes " + ShapeString(p_si.shape()) + " and " + ShapeString(p_sd.shape()));
  double s = 0.0;
  bool clamped = false;
  for (std::size_t i = 0; i < p_si.size(); ++i) {
    if (p_si[i] <= 0.0) continue;
    double q = p_sd[i];
    if (q < kProbFloor) {
      q = kProbFloor;
      clamped = true;
    }
    s += p_si[i] * std::log(p_si[i] / q);
  }
  if (clamped) spdlog::warn("kld_loss: speaker-dependent probability clamped at {}", kProbFloor);
  return s / static_cast<double>(p_si.rows());
}

/// Differentiable KL term over speaker-dependent logits; P_SI is constant.
inline Var KldLoss(Var sd_logits, const Tensor& p_si) {
  ad::Tape& tape = *sd_logits.tape;
  const double n = static_cast<double>(p_si.rows());
  double entropy_term = 0.0;
  for (double v : p_si.values())
    if (v > 0.0) entropy_term += v * std::log(v);
  Var cross = ad::Sum(ad::MulConst(ad::LogSoftmax(sd_logits), p_si));
  return ad::Scale(ad::Sub(tape.Input(Tensor::Scalar(entropy_term), "kld.entropy"), cross), 1.0 / n);
}

/// (1−ρ)·onehot(targets) + ρ·P_SI.
inline Tensor SoftTargets(const std::vector<int>& targets, const Tensor& p_si, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("adapt_loss: rho=" + std::to_string(rho) + " outside [0,1]");
  if (p_si.rows() != targets.size()) throw ShapeError("adapt_loss: P_SI rows differ from target count");
  Tensor q = finetune::OneHot(targets, p_si.cols());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = (1.0 - rho) * q[i] + rho * p_si[i];
  return q;
}

/// Cross-entropy against soft targets plus μ·L_ctc.
inline Var AdaptLoss(Var sd_logits, const Tensor& p_si, const std::vector<int>& targets, double rho, double mu,
                     const std::optional<Var>& l_ctc) {
  if (targets.empty()) throw ConfigError("adapt_loss: empty target sequence");
  Var ce = ad::SoftCrossEntropy(sd_logits, SoftTargets(targets, p_si, rho));
  return finetune::JointLoss(ce, l_ctc, mu);
}

inline double AdaptLoss(const Tensor& p_sd, const Tensor& p_si, const std::vector<int>& targets, double rho,
                        double mu, double l_ctc) {
  const Tensor q = SoftTargets(targets, p_si, rho);
  if (p_sd.shape() != q.shape()) throw ShapeError("adapt_loss: P_SD shape " + ShapeString(p_sd.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i)
    if (q[i] > 0.0) s -= q[i] * std::log(std::max(p_sd[i], kProbFloor));
  return s / static_cast<double>(q.rows()) + mu * l_ctc;
}

/// Teacher-forced decoder posteriors ((L+1)×(|U|+1)) of a frozen model.
inline Tensor DecoderPosteriors(const nn::ParamStore& params, const model::ModelConfig& mc,
                                const corpus::Utterance& u) {
  ad::Tape tape(false);
  nn::Binder p(tape, params);
  auto [in, target] = model::TeacherForcing(mc.vocabulary(), u.transcript);
  return ad::Softmax(finetune::RecognizerForward(p, mc, model::Frames(u, mc.view), in).decoder_logits).value();
}

/// 8:2 split of one speaker's utterances, shuffled by a speaker-keyed stream.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> TrainValidSplit(std::size_t n,
                                                                                     std::uint64_t seed,
                                                                                     const std::string& speaker) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = Rng::Stream(seed, "adapt/split/" + speaker);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.Index(i)]);
  const std::size_t n_valid = n < 2 ? 0 : std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.2 * n)));
  std::vector<std::size_t> valid(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_valid));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_valid), idx.end());
  std::sort(train.begin(), train.end());
  std::sort(valid.begin(), valid.end());
  return {train, valid};
}

struct LogRow {
  std::size_t step;
  double train_loss;
  double valid_loss;  // NaN between evaluations
  double lr;
};

struct AdaptResult {
  nn::ParamStore params;
  std::size_t best_step = 0;
  double initial_valid_loss = 0.0;
  double best_valid_loss = 0.0;
  std::vector<LogRow> log;
};

class Adapter {
 public:
  Adapter(const nn::ParamStore& si, const model::ModelConfig& mc, const AdaptConfig& cfg)
      : si_(si), mc_(mc), cfg_(cfg) {
    cfg_.Validate();
  }

  double Loss(nn::Binder& p, const corpus::Utterance& u, const Tensor& p_si, Var* out) const {
    const model::Vocabulary vocab = mc_.vocabulary();
    auto [in, target] = model::TeacherForcing(vocab, u.transcript);
    finetune::RecognizerOutput r = finetune::RecognizerForward(p, mc_, model::Frames(u, mc_.view), in);
    std::optional<Var> ctc = ad::CtcNll(r.ctc_log_probs, u.transcript, vocab.blank());
    if (!ctc) spdlog::warn("{}: no CTC alignment, CTC term skipped", u.utt_id);
    Var loss = AdaptLoss(r.decoder_logits, p_si, target, cfg_.rho, cfg_.mu, ctc);
    if (out) *out = loss;
    return loss.value().item();
  }

  double ValidLoss(const nn::ParamStore& params, const std::vector<const corpus::Utterance*>& valid,
                   const std::vector<Tensor>& p_si) const {
    double s = 0.0;
    for (std::size_t i = 0; i < valid.size(); ++i) {
      ad::Tape tape(false);
      nn::Binder p(tape, params);
      s += Loss(p, *valid[i], p_si[i], nullptr);
    }
    return s / static_cast<double>(valid.size());
  }

  AdaptResult Run(const std::vector<corpus::Utterance>& utts) const {
    std::vector<const corpus::Utterance*> own;
    for (const auto& u : utts)
      if (u.speaker_id == cfg_.speaker) own.push_back(&u);
    if (own.empty()) throw ConfigError("adapt: no utterances for speaker '" + cfg_.speaker + "'");
    auto [train_idx, valid_idx] = TrainValidSplit(own.size(), cfg_.seed, cfg_.speaker);
    std::vector<const corpus::Utterance*> train, valid;
    for (std::size_t i : train_idx) train.push_back(own[i]);
    for (std::size_t i : valid_idx) valid.push_back(own[i]);
    if (valid.empty()) {
      spdlog::warn("adapt: speaker {} has one utterance, validating on it", cfg_.speaker);
      valid = train;
    }
    std::vector<Tensor> p_train, p_valid;
    for (const auto* u : train) p_train.push_back(DecoderPosteriors(si_, mc_, *u));
    for (const auto* u : valid) p_valid.push_back(DecoderPosteriors(si_, mc_, *u));

    AdaptResult out;
    nn::ParamStore params = si_;
    out.params = params;
    out.initial_valid_loss = out.best_valid_loss = ValidLoss(params, valid, p_valid);
    out.log.push_back({0, std::nan(""), out.initial_valid_loss, 0.0});
    nn::Adam adam(cfg_.adam);
    const nn::LrSchedule sched{cfg_.peak_lr, cfg_.warmup_steps, 0, cfg_.decay_steps, cfg_.final_lr_scale};
    for (std::size_t step = 0; step < cfg_.total_steps(); ++step) {
      Rng pick = Rng::Stream(cfg_.seed, "adapt/batch/" + cfg_.speaker, step);
      ad::Tape tape;
      nn::Binder p(tape, params);
      Rng drop = Rng::Stream(cfg_.seed, "adapt/dropout/" + cfg_.speaker, step);
      p.SetDropout(mc_.dropout, drop);
      Var total;
      for (std::size_t j = 0; j < cfg_.batch_size; ++j) {
        const std::size_t k = pick.Index(train.size());
        Var l;
        Loss(p, *train[k], p_train[k], &l);
        total = total.valid() ? ad::Add(total, l) : l;
      }
      total = ad::Scale(total, 1.0 / static_cast<double>(cfg_.batch_size));
      tape.Backward(total);
      const double lr = sched.At(step);
      adam.Step(params, p.Gradients(), lr);
      LogRow row{step + 1, total.value().item(), std::nan(""), lr};
      if ((step + 1) % cfg_.eval_every == 0 || step + 1 == cfg_.total_steps()) {
        row.valid_loss = ValidLoss(params, valid, p_valid);
        if (row.valid_loss < out.best_valid_loss) {
          out.best_valid_loss = row.valid_loss;
          out.best_step = step + 1;
          out.params = params;
        }
      }
      out.log.push_back(row);
    }
    return out;
  }

 private:
  const nn::ParamStore& si_;
  model::ModelConfig mc_;
  AdaptConfig cfg_;
};

inline AdaptResult Adapt(const nn::ParamStore& si, const std::vector<corpus::Utterance>& utts,
                         const model::ModelConfig& mc, const AdaptConfig& cfg) {
  return Adapter(si, mc, cfg).Run(utts);
}

inline std::string LogCsv(const std::vector<LogRow>& rows) {
  std::string s = "step,train_loss,valid_loss,lr\n";
  char buf[160];
  for (const LogRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", r.step, r.train_loss, r.valid_loss, r.lr);
    s += buf;
  }
  return s;
}

}  // namespace avsd::adapt
