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

// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (capped at 125).
//
//   acceptance            all criteria
//   acceptance 1 4 9      selected criteria

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "avsd/adapt.hpp"
#include "avsd/decode.hpp"
#include "avsd/finetune.hpp"
#include "avsd/metrics.hpp"
#include "avsd/pretrain.hpp"
#include "cli_run.hpp"
#include "oracles.hpp"
#include "trend_protocol.hpp"

namespace avsd {
namespace {

using ad::Var;

// Tolerances.
constexpr double kCtcTol = 1e-6;
constexpr double kFdTol = 1e-4;
constexpr double kEq78Tol = 1e-8;
constexpr double kMaskTol = 0.06;
constexpr double kDropoutTol = 0.02;
constexpr double kDecodeScoreTol = 1e-9;
constexpr int kTrendSeeds = 5;
constexpr int kTrendNeeded = 4;
constexpr double kTrendSecondsPerSeed = 600.0;

struct Outcome {
  bool pass = true;
  std::string detail;

  void Check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

std::string Fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Tensor Log(const Tensor& p) {
  Tensor l(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) l[i] = std::log(p[i]);
  return l;
}

Tensor RandomDistributions(std::size_t n, std::size_t v, Rng& rng) {
  Tensor p = Tensor::Matrix(n, v);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += (p(i, j) = std::exp(rng.Normal()));
    for (std::size_t j = 0; j < v; ++j) p(i, j) /= s;
  }
  return p;
}

Outcome Ctc() {
  Outcome o;
  const Tensor uniform = Tensor::Matrix(2, 3, 1.0 / 3.0);
  const double hand = ad::CtcForwardBackward(Log(uniform), {0}, 2).nll;
  o.Check(std::abs(hand + std::log(1.0 / 3.0)) < kCtcTol, Fmt("hand example %.12g", hand));
  Rng rng(2024);
  double worst = 0.0;
  int checked = 0;
  for (int draw = 0; draw < 100; ++draw) {
    const std::size_t T = 1 + rng.Index(6), C = 2 + rng.Index(3);  // |U'| in [2,4]
    const int blank = static_cast<int>(C) - 1;
    const Tensor p = oracle::RandomPosteriors(T, C, rng);
    const Tensor lp = Log(p);
    for (std::size_t len = 0; len <= 3; ++len) {
      std::vector<int> labels(len);
      for (int& l : labels) l = static_cast<int>(rng.Index(C - 1));
      const auto a = ad::CtcForwardBackward(lp, labels, blank);
      const double brute = oracle::BruteCtcNll(p, labels, blank);
      ++checked;
      if (std::isinf(brute)) {
        o.Check(!a.feasible, "infeasible instance reported feasible");
      } else if (!a.feasible) {
        o.Check(false, "feasible instance reported infeasible");
      } else {
        worst = std::max(worst, std::abs(a.nll - brute));
      }
    }
  }
  o.Check(worst < kCtcTol, Fmt("max |ctc - brute| = %.3g", worst));
  if (o.pass) o.detail = Fmt("%g instances, max |diff| %.2g", checked, worst);
  return o;
}

Outcome Gradients() {
  Outcome o;
  std::string summary;
  auto check = [&](const char* name, const oracle::FdReport& r) {
    summary += std::string(name) + "=" + Fmt("%.1e ", r.rel_error);
    o.Check(r.rel_error < kFdTol, std::string(name) + Fmt(" rel error %.3g", r.rel_error));
  };
  const auto mc = oracle::TinyModel();
  const auto vocab = mc.vocabulary();
  const auto utts = oracle::TinyCorpus(2, 11);
  const auto& u = utts[0];
  auto [in, target] = model::TeacherForcing(vocab, u.transcript);
  const auto rec = oracle::Jitter(model::InitRecognizer(mc, 7), 0.05, 8);
  Rng rng(9);
  const Tensor si = RandomDistributions(target.size(), vocab.decoder_classes(), rng);
  auto fwd = [&](nn::Binder& p) { return finetune::RecognizerForward(p, mc, model::Frames(u, mc.view), in); };

  {
    pretrain::PretrainConfig pc;
    pc.target_layers = 2;
    auto state = pretrain::InitState(mc, pc);
    state.student = oracle::Jitter(state.student, 0.05, 10);
    Rng r(11);
    auto sin = pretrain::DrawStudentInput(u, mc, pc, r);
    sin.modality = frontend::ModalityChoice::kBoth;
    ad::Tape tt(false);
    nn::Binder tb(tt, state.teacher, state.student, [](const std::string&) { return false; });
    const Tensor y =
        pretrain::TeacherTargets(tb, mc, frontend::StackAudioFrames(u.audio, corpus::kAudioStack), u.lip, 2)
            .targets.value();
    auto lreg = [&](nn::Binder& p) {
      return pretrain::MaskedRegressionLoss(pretrain::StudentForward(p, mc, sin), p.tape().Input(y), sin.MaskUnion());
    };
    check("L_reg", oracle::FiniteDifference(state.student, lreg, 3, 1));
  }
  auto ce = [&](nn::Binder& p) { return finetune::CeLoss(fwd(p).decoder_logits, target); };
  auto ctc = [&](nn::Binder& p) { return *ad::CtcNll(fwd(p).ctc_log_probs, u.transcript, vocab.blank()); };
  auto lsi = [&](nn::Binder& p) { return finetune::RecognizerLoss(p, mc, u, 0.1).total; };
  auto kld = [&](nn::Binder& p) { return adapt::KldLoss(fwd(p).decoder_logits, si); };
  auto sa = [&](nn::Binder& p) {
    auto out = fwd(p);
    return adapt::AdaptLoss(out.decoder_logits, si, target, 0.3, 0.1,
                            ad::CtcNll(out.ctc_log_probs, u.transcript, vocab.blank()));
  };
  check("L_ce", oracle::FiniteDifference(rec, ce, 3, 2));
  check("L_ctc", oracle::FiniteDifference(rec, ctc, 3, 3));
  check("L_si", oracle::FiniteDifference(rec, lsi, 3, 4));
  check("L_kld", oracle::FiniteDifference(rec, kld, 3, 5));
  check("L_sa", oracle::FiniteDifference(rec, sa, 3, 6));
  if (o.pass) o.detail = summary;
  return o;
}

Outcome SoftLabelEquivalence() {
  Outcome o;
  const auto mc = oracle::TinyModel();
  const auto params = oracle::Jitter(model::InitRecognizer(mc, 5), 0.05, 6);
  const auto utts = oracle::TinyCorpus(3, 4);
  Rng rng(4);
  double worst = 0.0;
  for (double rho : {0.0, 0.1, 0.5, 1.0})
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
      for (const auto& [name, g] : a) {
        const Tensor& h = b.at(name);
        for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, std::abs(g[i] - h[i]));
      }
    }
  o.Check(worst < kEq78Tol, Fmt("max |grad diff| %.3g", worst));
  if (o.pass) o.detail = Fmt("max |grad diff| %.2g", worst);
  return o;
}

Outcome Ema() {
  Outcome o;
  const auto mc = oracle::TinyModel();
  const auto student0 = model::InitAv2vec(mc, 1);
  const auto teacher = pretrain::MakeTeacher(student0);
  const auto student = oracle::Jitter(student0, 0.1, 2);
  for (double lambda : {0.999, 0.99945, 0.9999, 0.5}) {
    auto t = teacher;
    pretrain::EmaUpdate(t, student, lambda);
    for (const auto& [name, v] : t.all()) {
      const Tensor& th = teacher.Get(name);
      const Tensor& ph = student.Get(name);
      for (std::size_t i = 0; i < v.size(); ++i)
        if (v[i] != lambda * th[i] + (1.0 - lambda) * ph[i]) {
          o.Check(false, name + " not bitwise equal");
          break;
        }
    }
  }
  o.Check(pretrain::LambdaSchedule(0, 0.999, 0.9999, 30000) == 0.999, "lambda(0)");
  o.Check(pretrain::LambdaSchedule(30000, 0.999, 0.9999, 30000) == 0.9999, "lambda(n_warmup)");
  o.Check(pretrain::LambdaSchedule(100000, 0.999, 0.9999, 30000) == 0.9999, "lambda beyond warmup");
  pretrain::PretrainConfig defaults;
  o.Check(defaults.lambda_begin == 0.999 && defaults.lambda_end == 0.9999, "default lambda endpoints");
  if (o.pass) o.detail = Fmt("%g teacher tensors bitwise, schedule 0.999 -> 0.9999", teacher.size());
  return o;
}

Outcome MaskedRegression() {
  Outcome o;
  const auto mc = oracle::TinyModel();
  pretrain::PretrainConfig pc;
  pc.target_layers = 2;
  auto state = pretrain::InitState(mc, pc);
  const auto utts = oracle::TinyCorpus(4, 3);
  Rng rng(12);
  for (const auto& u : utts) {
    auto in = pretrain::DrawStudentInput(u, mc, pc, rng);
    const auto mask = in.MaskUnion();
    ad::Tape tape;
    nn::Binder student(tape, state.student);
    nn::Binder tb(tape, state.teacher, state.student, [](const std::string&) { return false; });
    auto y = pretrain::TeacherTargets(tb, mc, in.audio_clean, in.frames, 2);
    Var x = pretrain::StudentForward(student, mc, in);
    Var loss = pretrain::MaskedRegressionLoss(x, y.targets, mask);
    tape.Backward(loss);
    const Tensor g = tape.Grad(y.average);
    for (double v : g.values()) o.Check(v == 0.0, "nonzero gradient at teacher outputs");
    const std::set<std::size_t> m(mask.begin(), mask.end());
    Tensor perturbed = y.targets.value();
    for (std::size_t t = 0; t < perturbed.rows(); ++t)
      if (!m.count(t))
        for (std::size_t j = 0; j < perturbed.cols(); ++j) perturbed(t, j) += 10.0 + rng.Normal();
    const double l0 = pretrain::MaskedRegressionLoss(x.value(), y.targets.value(), mask);
    const double l1 = pretrain::MaskedRegressionLoss(x.value(), perturbed, mask);
    o.Check(l0 == l1, Fmt("unmasked perturbation changed loss by %.3g", l1 - l0));
    o.Check(l0 == loss.value().item(), "tensor and graph losses differ");
  }
  if (o.pass) o.detail = "unmasked perturbation delta 0, teacher-output gradient 0";
  return o;
}

Outcome MaskStatistics() {
  Outcome o;
  const pretrain::PretrainConfig pc;
  constexpr std::size_t kFrames = 1000;
  double audio = 0.0, video = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    audio += static_cast<double>(frontend::MakeSpanMask(kFrames, pc.audio_coverage, pc.audio_span, rng).size()) /
             kFrames / 100.0;
    video += static_cast<double>(frontend::MakeSpanMask(kFrames, pc.video_coverage, pc.video_span, rng).size()) /
             kFrames / 100.0;
  }
  o.Check(std::abs(audio - pc.audio_coverage) <= kMaskTol, Fmt("audio coverage %.4f", audio));
  o.Check(std::abs(video - pc.video_coverage) <= kMaskTol, Fmt("video coverage %.4f", video));
  // Informational: the short synthetic utterances overshoot the configured coverage.
  {
    corpus::CorpusSpec cs;
    cs.num_speakers = 2;
    cs.utterances_per_speaker = 10;
    const model::ModelConfig mc;
    double a = 0.0, v = 0.0, frames = 0.0;
    Rng rng(1);
    for (int rep = 0; rep < 100; ++rep)
      for (const auto& u : corpus::GenerateUtterances(cs)) {
        auto in = pretrain::DrawStudentInput(u, mc, pc, rng);
        a += static_cast<double>(in.audio_mask.size());
        v += static_cast<double>(in.video_mask.size());
        frames += static_cast<double>(in.frames.dim(0));
      }
    std::printf("  corpus-length utterances: audio coverage %.3f, video coverage %.3f\n", a / frames, v / frames);
  }
  std::string dropout;
  for (auto [pm, pa] : {std::pair{0.5, 0.5}, std::pair{0.2, 0.7}}) {
    Rng rng(17);
    std::map<frontend::ModalityChoice, int> n;
    for (int i = 0; i < 10000; ++i) ++n[frontend::DrawModality(pm, pa, rng)];
    const double both = n[frontend::ModalityChoice::kBoth] / 1e4;
    const double aud = n[frontend::ModalityChoice::kAudioOnly] / 1e4;
    const double vid = n[frontend::ModalityChoice::kVideoOnly] / 1e4;
    o.Check(std::abs(both - pm) <= kDropoutTol, Fmt("p(both) %.4f vs %.2f", both, pm));
    o.Check(std::abs(aud - (1 - pm) * pa) <= kDropoutTol, Fmt("p(audio) %.4f", aud));
    o.Check(std::abs(vid - (1 - pm) * (1 - pa)) <= kDropoutTol, Fmt("p(video) %.4f", vid));
    dropout += Fmt(" (%.3f,%.3f,%.3f)", both, aud, vid);
  }
  if (o.pass) o.detail = Fmt("T=1000: audio %.3f video %.3f; modality", audio, video) + dropout;
  return o;
}

Outcome DecodeOracle() {
  Outcome o;
  using oracle::FakeSession;
  int cases = 0;
  double worst = 0.0;
  for (std::size_t U = 1; U <= 3; ++U)
    for (std::size_t M = 1; M <= 3; ++M)
      for (double alpha : {0.0, 0.3, 0.7, 1.0})
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
          std::vector<FakeSession> models;
          for (std::size_t m = 0; m < M; ++m) models.emplace_back(U, 4, seed * 10 + m);
          std::vector<FakeSession*> raw;
          std::vector<decode::Session*> sessions;
          for (auto& m : models) {
            raw.push_back(&m);
            sessions.push_back(&m);
          }
          decode::DecodeConfig cfg;
          cfg.alpha = alpha;
          cfg.beam = 1000;
          cfg.max_length = 3;
          const auto got = decode::BeamSearch(sessions, cfg);
          const auto want = oracle::BruteDecode(raw, 3, alpha);
          ++cases;
          o.Check(got.tokens == want.tokens, Fmt("argmax differs (U=%g M=%g alpha=%g seed=%g)", U, M, alpha, seed));
          worst = std::max(worst, std::abs(got.score - want.score));
        }
  o.Check(worst < kDecodeScoreTol, Fmt("score diff %.3g", worst));
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    FakeSession one(3, 5, seed);
    std::vector<FakeSession> many(4, one);
    std::vector<decode::Session*> s1{&one}, sm;
    for (auto& m : many) sm.push_back(&m);
    decode::DecodeConfig cfg;
    cfg.alpha = 0.4;
    cfg.beam = 3;
    const auto a = decode::BeamSearch(s1, cfg), b = decode::BeamSearch(sm, cfg);
    o.Check(a.tokens == b.tokens && std::abs(a.score - b.score) < 1e-12, "M identical models differ from M=1");
  }
  if (o.pass) o.detail = Fmt("%g exhaustive instances, max score diff %.2g; M=4 identical == M=1", cases, worst);
  return o;
}

std::string RandomString(Rng& rng, std::size_t max_len) {
  std::string s(rng.Index(max_len + 1), 'a');
  for (char& c : s) c = static_cast<char>('a' + rng.Index(4));
  return s;
}

Outcome Cer() {
  Outcome o;
  Rng rng(77);
  for (int i = 0; i < 1000; ++i) {
    const std::string r = RandomString(rng, 12), h = RandomString(rng, 12);
    const auto c = metrics::EditDistance(std::vector<char>(r.begin(), r.end()), std::vector<char>(h.begin(), h.end()));
    if (c.total() != oracle::Levenshtein(r, h)) {
      o.Check(false, "edit distance differs from oracle on '" + r + "' / '" + h + "'");
      break;
    }
  }
  const double third = metrics::Cer({{"u", "s", 1, 0, 0, 3}});
  o.Check(std::abs(third - 100.0 / 3.0) < 1e-9, Fmt("(1,0,0)/3 -> %.4f", third));
  const double over = metrics::Cer({metrics::ScoreUtterance("u", "s", std::string("ab"), std::string("xyzwv"))});
  o.Check(std::abs(over - 250.0) < 1e-9, Fmt("insertion-heavy CER %.4f", over));
  std::vector<metrics::UttScore> het;
  for (int i = 0; i < 60; ++i)
    het.push_back(metrics::ScoreUtterance("u" + std::to_string(i), "s", RandomString(rng, 8) + "a", RandomString(rng, 8)));
  const auto a = metrics::BootstrapCi(het, 2000, 0.95, 5), b = metrics::BootstrapCi(het, 2000, 0.95, 5);
  o.Check(a.low == b.low && a.high == b.high, "bootstrap not deterministic per seed");
  const std::vector<metrics::UttScore> same(25, {"u", "s", 1, 1, 0, 5});
  const auto z = metrics::BootstrapCi(same, 2000, 0.95, 5);
  o.Check(z.low == 40.0 && z.high == 40.0, Fmt("homogeneous interval [%.4f, %.4f]", z.low, z.high));
  if (o.pass) o.detail = Fmt("1000 pairs; 33.33%% -> %.4f; 250%% -> %.1f; CI [%.2f, %.2f] deterministic", third, over, a.low, a.high);
  return o;
}

Outcome Trends() {
  Outcome o;
  int a = 0, b = 0, c = 0, d = 0;
  double slowest = 0.0;
  for (int seed = 1; seed <= kTrendSeeds; ++seed) {
    const auto r = trend::RunSeed(trend::BaseConfig(static_cast<std::uint64_t>(seed)));
    const bool ok_a = r.cer_pretrained < r.cer_scratch;
    const bool ok_b = r.cer_transfer_low < r.cer_scratch_low;
    const bool ok_c = r.cer_sd_kld <= r.cer_si && r.cer_sd_kld <= r.cer_sd_ce;
    const bool ok_d = r.cer_ensemble < 0.5 * (r.cer_lip + r.cer_face);
    a += ok_a;
    b += ok_b;
    c += ok_c;
    d += ok_d;
    slowest = std::max(slowest, r.seconds);
    std::printf("  seed %d  a: %.1f vs %.1f %s | b: %.1f vs %.1f %s | c: SI %.1f KLD %.1f CE %.1f %s | "
                "d: lip %.1f face %.1f ens %.1f %s | %.0fs\n",
                seed, r.cer_pretrained, r.cer_scratch, ok_a ? "ok" : "--", r.cer_transfer_low, r.cer_scratch_low,
                ok_b ? "ok" : "--", r.cer_si, r.cer_sd_kld, r.cer_sd_ce, ok_c ? "ok" : "--", r.cer_lip, r.cer_face,
                r.cer_ensemble, ok_d ? "ok" : "--", r.seconds);
    std::fflush(stdout);
  }
  auto line = [&](const char* name, int wins) {
    std::printf("criterion 9%s: %s (%d/%d seeds)\n", name, wins >= kTrendNeeded ? "PASS" : "FAIL", wins, kTrendSeeds);
    o.Check(wins >= kTrendNeeded, std::string("9") + name);
  };
  line("a", a);
  line("b", b);
  line("c", c);
  line("d", d);
  o.Check(slowest < kTrendSecondsPerSeed, Fmt("slowest seed %.0fs", slowest));
  if (o.pass) o.detail = Fmt("a %g/5, b %g/5, c %g/5, d %g/5", a, b, c, d) + Fmt("; slowest seed %.0fs", slowest);
  return o;
}

Outcome Determinism() {
  Outcome o;
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "avsd_acceptance";
  const auto x = clirun::RunPipeline(root / "run1");
  const auto y = clirun::RunPipeline(root / "run2");
  int files = 0;
  for (auto [p, q] : {std::pair{x.pretrain, y.pretrain}, std::pair{x.si, y.si}, std::pair{x.sd, y.sd},
                      std::pair{x.hyps, y.hyps}, std::pair{x.report, y.report}}) {
    ++files;
    o.Check(corpus::detail::ReadFile(p) == corpus::detail::ReadFile(q), p.filename().string() + " differs");
  }
  if (o.pass) o.detail = Fmt("%g artifacts bitwise identical across two runs", files);
  return o;
}

}  // namespace
}  // namespace avsd

int main(int argc, char** argv) {
  using namespace avsd;
  spdlog::set_level(spdlog::level::warn);
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, Ctc},        {2, Gradients},    {3, SoftLabelEquivalence}, {4, Ema},    {5, MaskedRegression},
      {6, MaskStatistics}, {7, DecodeOracle}, {8, Cer},             {9, Trends}, {10, Determinism}};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& [id, run] : criteria) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d: %s (%s)\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return std::min(failed, 125);
}
