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

// Audio-visual self-distillation pretraining: a student encoder regresses,
// at masked positions only, the instance-normalized average of the last k
// block outputs of an EMA teacher that sees clean, unmasked audio and video.

#pragma once

#include <functional>
#include <set>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "avsd/corpus.hpp"
#include "avsd/frontend.hpp"
#include "avsd/model.hpp"
#include "avsd/nn.hpp"

namespace avsd::pretrain {

using ad::Var;

enum class TargetNorm { kTime, kChannel };

struct PretrainConfig {
  double p_noise = 0.25;
  double p_m = 0.5;
  double p_a = 0.5;
  double audio_coverage = 0.8;
  double video_coverage = 0.3;
  std::size_t audio_span = 10;
  std::size_t video_span = 5;
  double snr_low_db = 0.0;
  double snr_high_db = 20.0;
  /// Number of top teacher blocks averaged into the target (k).
  std::size_t target_layers = 3;
  /// time: normalize each channel over the utterance; channel: each frame over channels.
  TargetNorm target_norm = TargetNorm::kTime;
  double lambda_begin = 0.999;
  double lambda_end = 0.9999;
  std::size_t lambda_warmup = 30000;
  double peak_lr = 5e-4;
  double warmup_frac = 0.03;
  double hold_frac = 0.90;
  double final_lr_scale = 0.05;
  std::size_t total_steps = 400000;
  std::size_t batch_size = 8;
  nn::AdamOptions adam;
  std::uint64_t seed = 1;

  void Validate(const model::ModelConfig& mc) const {
    for (double p : {p_noise, p_m, p_a, audio_coverage, video_coverage})
      if (p < 0.0 || p > 1.0) throw ConfigError("pretrain: probabilities and coverages must be in [0,1]");
    if (target_layers == 0 || target_layers > mc.encoder.blocks)
      throw ConfigError("pretrain: target_layers must be in [1, encoder blocks]");
    if (!(lambda_begin <= lambda_end && lambda_end <= 1.0)) throw ConfigError("pretrain: need lambda_begin <= lambda_end <= 1");
    if (audio_span == 0 || video_span == 0) throw ConfigError("pretrain: span lengths must be positive");
    if (batch_size == 0) throw ConfigError("pretrain: batch_size must be positive");
  }
};

/// EMA decay at `step`: linear from begin to end over `warmup` steps, then
/// constant. With warmup = 0 the end value applies from the first step.
inline double LambdaSchedule(std::size_t step, double begin, double end, std::size_t warmup) {
  if (warmup == 0 || step >= warmup) return end;
  return begin + (end - begin) * static_cast<double>(step) / static_cast<double>(warmup);
}

/// θ ← λθ + (1−λ)φ for every teacher tensor.
inline void EmaUpdate(nn::ParamStore& teacher, const nn::ParamStore& student, double lambda) {
  for (auto& [name, theta] : teacher.all()) {
    const Tensor& phi = student.Get(name);
    if (phi.shape() != theta.shape())
      throw ShapeError("ema_update: '" + name + "' teacher " + ShapeString(theta.shape()) + " vs student " +
                       ShapeString(phi.shape()));
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = lambda * theta[i] + (1.0 - lambda) * phi[i];
  }
}

/// Teacher copy of the student's Transformer stack. Frontends are not
/// copied: the teacher reads them from the student store.
inline nn::ParamStore MakeTeacher(const nn::ParamStore& student) {
  nn::ParamStore t;
  for (const auto& [name, value] : student.all())
    if (model::IsTeacherParam(name)) t.Set(name, value);
  return t;
}

struct TeacherOutput {
  Var average;  // before the stop-gradient node
  Var targets;  // StopGradient(average)
};

/// Builds regression targets from the clean audio and the unmasked video.
/// `p` must resolve encoder names to the teacher and everything else to the
/// student (see nn::Binder's overlay constructor).
inline TeacherOutput TeacherTargets(nn::Binder& p, const model::ModelConfig& cfg, const Tensor& audio_stacked,
                                    const Tensor& frames, std::size_t k, TargetNorm norm = TargetNorm::kTime) {
  if (k == 0 || k > cfg.encoder.blocks)
    throw ConfigError("teacher_targets: k=" + std::to_string(k) + " with " + std::to_string(cfg.encoder.blocks) +
                      " blocks");
  ad::Tape& tape = p.tape();
  auto fe = frontend::FrontendForward(p, cfg.frontend, tape.Input(audio_stacked, "teacher.audio"),
                                      tape.Input(frames, "teacher.video"));
  model::EncoderOutput enc = model::EncoderForward(p, cfg, frontend::Fuse(p, fe.audio, fe.video));
  Var sum;
  for (std::size_t i = cfg.encoder.blocks - k; i < cfg.encoder.blocks; ++i) {
    Var layer = enc.blocks[i];
    Var normed = norm == TargetNorm::kTime ? ad::InstanceNorm(layer)
                                           : ad::Transpose(ad::InstanceNorm(ad::Transpose(layer)));
    sum = sum.valid() ? ad::Add(sum, normed) : normed;
  }
  Var avg = ad::Scale(sum, 1.0 / static_cast<double>(k));
  return {avg, ad::StopGradient(avg)};
}

/// Σ_{t∈rows} ||x_t − y_t||² over the given (masked) rows.
inline Var MaskedRegressionLoss(Var predictions, Var targets, const std::vector<std::size_t>& rows) {
  Var d = ad::Sub(ad::SelectRows(predictions, rows), ad::SelectRows(targets, rows));
  return ad::Sum(ad::Mul(d, d));
}

inline double MaskedRegressionLoss(const Tensor& predictions, const Tensor& targets,
                                   const std::vector<std::size_t>& rows) {
  double s = 0.0;
  for (std::size_t t : rows)
    for (std::size_t j = 0; j < predictions.cols(); ++j) {
      const double d = predictions(t, j) - targets(t, j);
      s += d * d;
    }
  return s;
}

/// Everything the student consumes for one utterance, drawn up front.
struct StudentInput {
  Tensor audio_clean;   // stacked, T×104
  Tensor audio_noisy;   // stacked, T×104
  Tensor frames;        // T×H×W
  std::vector<std::size_t> audio_mask, video_mask;
  frontend::ModalityChoice modality = frontend::ModalityChoice::kBoth;

  std::vector<std::size_t> MaskUnion() const {
    std::set<std::size_t> u(audio_mask.begin(), audio_mask.end());
    u.insert(video_mask.begin(), video_mask.end());
    return {u.begin(), u.end()};
  }
};

inline StudentInput DrawStudentInput(const corpus::Utterance& utt, const model::ModelConfig& mc,
                                     const PretrainConfig& cfg, Rng& rng) {
  StudentInput in;
  in.audio_clean = frontend::StackAudioFrames(utt.audio, corpus::kAudioStack);
  in.frames = model::Frames(utt, mc.view);
  const std::size_t T = in.frames.dim(0);
  if (in.audio_clean.rows() != T)
    throw ShapeError("pretrain: " + utt.utt_id + " audio/video lengths differ after stacking");
  in.audio_noisy =
      frontend::AddNoise(in.audio_clean, cfg.p_noise, rng.Uniform(cfg.snr_low_db, cfg.snr_high_db), rng);
  in.audio_mask = frontend::MakeSpanMask(T, cfg.audio_coverage, cfg.audio_span, rng);
  in.video_mask = frontend::MakeSpanMask(T, cfg.video_coverage, cfg.video_span, rng);
  in.modality = frontend::DrawModality(cfg.p_m, cfg.p_a, rng);
  return in;
}

/// Student predictions x_t (T×width) for a drawn input.
inline Var StudentForward(nn::Binder& p, const model::ModelConfig& cfg, const StudentInput& in) {
  ad::Tape& tape = p.tape();
  auto fe = frontend::FrontendForward(p, cfg.frontend, tape.Input(in.audio_noisy, "student.audio"),
                                      tape.Input(in.frames, "student.video"));
  Var fa = ad::ReplaceRows(fe.audio, in.audio_mask, p("mask.audio"));
  Var fv = ad::ReplaceRows(fe.video, in.video_mask, p("mask.video"));
  if (in.modality == frontend::ModalityChoice::kVideoOnly) fa = ad::Scale(fa, 0.0);
  if (in.modality == frontend::ModalityChoice::kAudioOnly) fv = ad::Scale(fv, 0.0);
  model::EncoderOutput enc = model::EncoderForward(p, cfg, frontend::Fuse(p, fa, fv));
  return nn::Linear(p, "pretrain.head", enc.out);
}

struct Av2vecState {
  nn::ParamStore student;
  nn::ParamStore teacher;
  nn::Adam optimizer;
  std::size_t step = 0;
};

inline Av2vecState InitState(const model::ModelConfig& mc, const PretrainConfig& cfg) {
  Av2vecState s;
  s.student = model::InitAv2vec(mc, cfg.seed);
  s.teacher = MakeTeacher(s.student);
  s.optimizer = nn::Adam(cfg.adam);
  return s;
}

struct StepResult {
  double raw_loss = 0.0;         // Σ over the batch of the masked squared error
  double normalized_loss = 0.0;  // batch mean of raw / masked count (what is optimized)
  double lambda = 0.0;
  double lr = 0.0;
  std::size_t masked_positions = 0;
  bool skipped = false;
};

/// One optimizer update of the student followed by the EMA teacher update.
inline StepResult PretrainStep(Av2vecState& state, const std::vector<const corpus::Utterance*>& batch,
                               const model::ModelConfig& mc, const PretrainConfig& cfg) {
  StepResult r;
  const nn::LrSchedule sched =
      nn::LrSchedule::TriStage(cfg.peak_lr, cfg.total_steps, cfg.warmup_frac, cfg.hold_frac, cfg.final_lr_scale);
  r.lr = sched.At(state.step);
  r.lambda = LambdaSchedule(state.step, cfg.lambda_begin, cfg.lambda_end, cfg.lambda_warmup);

  ad::Tape tape;
  nn::Binder student(tape, state.student);
  Rng drop = Rng::Stream(cfg.seed, "pretrain/dropout", state.step);
  student.SetDropout(mc.dropout, drop);
  nn::Binder teacher(tape, state.teacher, state.student, [](const std::string&) { return false; });
  Var total;
  std::size_t used = 0;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    Rng rng = Rng::Stream(cfg.seed, "pretrain/utt", state.step * cfg.batch_size + j);
    StudentInput in = DrawStudentInput(*batch[j], mc, cfg, rng);
    const std::vector<std::size_t> masked = in.MaskUnion();
    if (masked.empty()) {
      spdlog::warn("pretrain step {}: empty mask for {}, skipped", state.step, batch[j]->utt_id);
      continue;
    }
    TeacherOutput y = TeacherTargets(teacher, mc, in.audio_clean, in.frames, cfg.target_layers, cfg.target_norm);
    Var x = StudentForward(student, mc, in);
    Var raw = MaskedRegressionLoss(x, y.targets, masked);
    r.raw_loss += raw.value().item();
    r.masked_positions += masked.size();
    Var norm = ad::Scale(raw, 1.0 / static_cast<double>(masked.size()));
    total = total.valid() ? ad::Add(total, norm) : norm;
    ++used;
  }
  if (used == 0) {
    spdlog::warn("pretrain step {}: every mask empty, step skipped", state.step);
    r.skipped = true;
    ++state.step;
    return r;
  }
  total = ad::Scale(total, 1.0 / static_cast<double>(used));
  r.normalized_loss = total.value().item();
  tape.Backward(total);
  state.optimizer.Step(state.student, student.Gradients(), r.lr);
  EmaUpdate(state.teacher, state.student, r.lambda);
  ++state.step;
  return r;
}

struct LogRow {
  std::size_t step;
  double raw_loss;
  double lambda;
  double lr;
};

struct PretrainResult {
  nn::ParamStore student;
  nn::ParamStore teacher;
  std::vector<LogRow> log;
};

/// Runs `cfg.total_steps` updates over uniformly sampled batches.
inline PretrainResult Pretrain(const std::vector<corpus::Utterance>& utts, const model::ModelConfig& mc,
                               const PretrainConfig& cfg) {
  cfg.Validate(mc);
  if (utts.empty()) throw ConfigError("pretrain: no utterances");
  Av2vecState state = InitState(mc, cfg);
  PretrainResult out;
  while (state.step < cfg.total_steps) {
    Rng pick = Rng::Stream(cfg.seed, "pretrain/batch", state.step);
    std::vector<const corpus::Utterance*> batch;
    for (std::size_t j = 0; j < cfg.batch_size; ++j) batch.push_back(&utts[pick.Index(utts.size())]);
    const std::size_t step = state.step;
    StepResult r = PretrainStep(state, batch, mc, cfg);
    out.log.push_back({step, r.raw_loss, r.lambda, r.lr});
  }
  out.student = std::move(state.student);
  out.teacher = std::move(state.teacher);
  return out;
}

inline std::string LogCsv(const std::vector<LogRow>& rows) {
  std::string s = "step,L_reg,lambda,lr\n";
  char buf[160];
  for (const LogRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", r.step, r.raw_loss, r.lambda, r.lr);
    s += buf;
  }
  return s;
}

}  // namespace avsd::pretrain
