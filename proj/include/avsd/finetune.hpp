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

// Hybrid CTC/attention fine-tuning of a video-only recognizer, optionally
// initialized from a self-distillation checkpoint.

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "avsd/corpus.hpp"
#include "avsd/model.hpp"
#include "avsd/nn.hpp"

namespace avsd::finetune {

using ad::Var;

struct FinetuneConfig {
  /// CTC weight.
  double mu = 0.1;
  /// Encoder updates withheld at the start; unset means 10% of total_steps.
  std::optional<std::size_t> freeze_steps;
  bool transfer = false;
  double peak_lr = 1e-3;
  double warmup_frac = 0.1;
  double hold_frac = 0.4;
  double final_lr_scale = 0.05;
  std::size_t total_steps = 2000;
  std::size_t batch_size = 8;
  nn::AdamOptions adam;
  std::uint64_t seed = 1;

  void Validate() const {
    if (!(mu >= 0.0)) throw ConfigError("finetune: mu must be >= 0");
    if (batch_size == 0) throw ConfigError("finetune: batch_size must be positive");
  }
  std::size_t ConfiguredFreezeSteps() const {
    return freeze_steps ? *freeze_steps : static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(total_steps)));
  }
};

// ---------------------------------------------------------------------------
// Losses

inline Tensor OneHot(const std::vector<int>& targets, std::size_t classes) {
  Tensor t = Tensor::Matrix(targets.size(), classes);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= classes)
      throw ConfigError("target " + std::to_string(targets[i]) + " outside " + std::to_string(classes) + " classes");
    t(i, static_cast<std::size_t>(targets[i])) = 1.0;
  }
  return t;
}

/// −(1/N) Σ log P(t_n | t_<n) from decoder logits (N×V) and the N targets.
inline Var CeLoss(Var logits, const std::vector<int>& targets) {
  if (targets.empty()) throw ConfigError("ce_loss: empty target sequence");
  if (logits.value().rows() != targets.size())
    throw ShapeError("ce_loss: " + std::to_string(logits.value().rows()) + " logit rows for " +
                     std::to_string(targets.size()) + " targets");
  return ad::SoftCrossEntropy(logits, OneHot(targets, logits.value().cols()));
}

/// Same quantity from already normalized probabilities.
inline double CeLoss(const Tensor& probs, const std::vector<int>& targets) {
  if (targets.empty()) throw ConfigError("ce_loss: empty target sequence");
  if (probs.rows() != targets.size()) throw ShapeError("ce_loss: row count differs from target count");
  double s = 0.0;
  for (std::size_t n = 0; n < targets.size(); ++n) {
    if (targets[n] < 0 || static_cast<std::size_t>(targets[n]) >= probs.cols())
      throw ConfigError("ce_loss: token " + std::to_string(targets[n]) + " outside vocabulary");
    s -= std::log(probs(n, static_cast<std::size_t>(targets[n])));
  }
  return s / static_cast<double>(targets.size());
}

struct CtcResult {
  bool feasible = false;
  double loss = std::numeric_limits<double>::infinity();
};

/// CTC negative log-likelihood from posteriors (T×|U'|, rows sum to one).
inline CtcResult CtcLoss(const Tensor& posteriors, const std::vector<int>& transcript, int blank) {
  if (posteriors.rank() != 2) throw ShapeError("ctc_loss: posteriors must be T×C");
  Tensor logp(posteriors.shape());
  for (std::size_t t = 0; t < posteriors.rows(); ++t) {
    double s = 0.0;
    for (std::size_t k = 0; k < posteriors.cols(); ++k) {
      s += posteriors(t, k);
      logp(t, k) = std::log(posteriors(t, k));
    }
    if (std::abs(s - 1.0) > 1e-6) throw NumericError("ctc_loss: posterior row " + std::to_string(t) + " sums to " +
                                                     std::to_string(s));
  }
  ad::CtcAlignment a = ad::CtcForwardBackward(logp, transcript, blank);
  return {a.feasible, a.nll};
}

inline double JointLoss(double l_ce, double l_ctc, double mu) { return l_ce + mu * l_ctc; }

/// L_ce + μ·L_ctc, or L_ce alone when the CTC term is infeasible.
inline Var JointLoss(Var l_ce, const std::optional<Var>& l_ctc, double mu) {
  if (!l_ctc) return l_ce;
  return ad::Add(l_ce, ad::Scale(*l_ctc, mu));
}

// ---------------------------------------------------------------------------
// Recognizer forward

struct RecognizerOutput {
  Var decoder_logits;  // (L+1)×(|U|+1)
  Var ctc_log_probs;   // T×|U'|
};

inline RecognizerOutput RecognizerForward(nn::Binder& p, const model::ModelConfig& cfg, const Tensor& frames,
                                          const std::vector<int>& decoder_inputs) {
  model::EncoderOutput enc = model::EncodeVideo(p, cfg, frames);
  return {model::DecoderForward(p, cfg, enc.out, decoder_inputs), ad::LogSoftmax(model::CtcLogits(p, enc.out))};
}

struct UtteranceLoss {
  Var total;
  double ce = 0.0;
  std::optional<double> ctc;
  Var decoder_logits;
};

/// Joint loss of one utterance; an infeasible CTC term is dropped with a warning.
inline UtteranceLoss RecognizerLoss(nn::Binder& p, const model::ModelConfig& cfg, const corpus::Utterance& u,
                                    double mu) {
  const model::Vocabulary vocab = cfg.vocabulary();
  vocab.Check(u.transcript);
  auto [in, target] = model::TeacherForcing(vocab, u.transcript);
  RecognizerOutput out = RecognizerForward(p, cfg, model::Frames(u, cfg.view), in);
  UtteranceLoss r;
  r.decoder_logits = out.decoder_logits;
  Var ce = CeLoss(out.decoder_logits, target);
  r.ce = ce.value().item();
  std::optional<Var> ctc = ad::CtcNll(out.ctc_log_probs, u.transcript, vocab.blank());
  if (ctc) {
    r.ctc = ctc->value().item();
  } else {
    spdlog::warn("{}: no CTC alignment for {} labels in {} frames, CTC term skipped", u.utt_id, u.transcript.size(),
                 out.ctc_log_probs.value().rows());
  }
  r.total = JointLoss(ce, ctc, mu);
  return r;
}

// ---------------------------------------------------------------------------
// Initialization

/// Fresh recognizer whose encoder-side tensors are copied from `pretrained`.
inline nn::ParamStore InitFromPretrained(const nn::ParamStore& pretrained, const model::ModelConfig& cfg,
                                         std::uint64_t seed) {
  nn::ParamStore ps = model::InitRecognizer(cfg, seed);
  std::vector<std::string> missing;
  for (auto& [name, value] : ps.all()) {
    if (!model::IsEncoderParam(name)) continue;
    if (!pretrained.Contains(name)) {
      missing.push_back(name);
      continue;
    }
    const Tensor& src = pretrained.Get(name);
    if (src.shape() != value.shape())
      throw ShapeError("init_from_pretrained: '" + name + "' has shape " + ShapeString(src.shape()) + ", expected " +
                       ShapeString(value.shape()));
    value = src;
  }
  if (!missing.empty()) {
    std::string msg = "init_from_pretrained: checkpoint lacks";
    for (const auto& n : missing) msg += " " + n;
    throw ShapeError(msg);
  }
  return ps;
}

// ---------------------------------------------------------------------------
// Training loop

struct LogRow {
  std::size_t step;
  double ce, ctc, si, lr;
  bool frozen;
};

struct FinetuneResult {
  nn::ParamStore params;
  std::size_t freeze_steps = 0;
  std::vector<LogRow> log;
};

/// Fine-tunes `init` for cfg.total_steps; the encoder side stays fixed for
/// the first `freeze_steps` updates.
inline FinetuneResult Finetune(const std::vector<corpus::Utterance>& utts, const model::ModelConfig& mc,
                               const FinetuneConfig& cfg, nn::ParamStore init, std::size_t freeze_steps) {
  cfg.Validate();
  if (utts.empty()) throw ConfigError("finetune: no utterances");
  FinetuneResult out;
  out.params = std::move(init);
  out.freeze_steps = freeze_steps;
  nn::Adam adam(cfg.adam);
  const nn::LrSchedule sched =
      nn::LrSchedule::TriStage(cfg.peak_lr, cfg.total_steps, cfg.warmup_frac, cfg.hold_frac, cfg.final_lr_scale);
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    const bool frozen = step < freeze_steps;
    Rng pick = Rng::Stream(cfg.seed, "finetune/batch", step);
    ad::Tape tape;
    nn::Binder p(tape, out.params, [frozen](const std::string& n) { return !(frozen && model::IsEncoderParam(n)); });
    Rng drop = Rng::Stream(cfg.seed, "finetune/dropout", step);
    p.SetDropout(mc.dropout, drop);
    Var total;
    LogRow row{step, 0.0, 0.0, 0.0, sched.At(step), frozen};
    std::size_t ctc_count = 0;
    for (std::size_t j = 0; j < cfg.batch_size; ++j) {
      UtteranceLoss l = RecognizerLoss(p, mc, utts[pick.Index(utts.size())], cfg.mu);
      total = total.valid() ? ad::Add(total, l.total) : l.total;
      row.ce += l.ce;
      if (l.ctc) {
        row.ctc += *l.ctc;
        ++ctc_count;
      }
    }
    const double inv = 1.0 / static_cast<double>(cfg.batch_size);
    total = ad::Scale(total, inv);
    row.ce *= inv;
    row.ctc = ctc_count ? row.ctc / static_cast<double>(ctc_count) : 0.0;
    row.si = total.value().item();
    tape.Backward(total);
    adam.Step(out.params, p.Gradients(), row.lr);
    out.log.push_back(row);
  }
  return out;
}

inline std::string LogCsv(const std::vector<LogRow>& rows) {
  std::string s = "step,L_ce,L_ctc,L_si,lr,frozen\n";
  char buf[200];
  for (const LogRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%d\n", r.step, r.ce, r.ctc, r.si, r.lr, r.frozen ? 1 : 0);
    s += buf;
  }
  return s;
}

}  // namespace avsd::finetune
