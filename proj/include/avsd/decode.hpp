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

// Joint CTC/attention beam search over an ensemble of recognizers, each
// reading its own visual view of the utterance.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "avsd/finetune.hpp"

namespace avsd::decode {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct DecodeConfig {
  /// CTC weight in the per-step interpolation.
  double alpha = 0.1;
  std::size_t beam = 8;
  /// Maximum number of non-EOS tokens; 0 means the number of frames.
  std::size_t max_length = 0;
  /// Per-model weights; empty means 1/M each.
  std::vector<double> weights;

  void Validate(std::size_t num_models) const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("decode: alpha must be in [0,1]");
    if (beam == 0) throw ConfigError("decode: beam must be positive");
    if (num_models == 0) throw ConfigError("decode: at least one model is required");
    if (!weights.empty()) {
      if (weights.size() != num_models) throw ConfigError("decode: one weight per model is required");
      double s = 0.0;
      for (double w : weights) {
        if (w < 0.0) throw ConfigError("decode: negative ensemble weight");
        s += w;
      }
      if (std::abs(s - 1.0) > 1e-6) throw ConfigError("decode: ensemble weights must sum to 1");
    }
  }
};

/// One model's view of one utterance: CTC log posteriors (T×(|U|+1), blank
/// last) and next-token distributions over U ∪ {EOS} (EOS last).
class Session {
 public:
  virtual ~Session() = default;
  virtual const Tensor& CtcLogProbs() const = 0;
  virtual std::vector<double> NextTokenProbs(const std::vector<int>& prefix) = 0;
  virtual std::size_t num_tokens() const = 0;
};

/// Session backed by a trained recognizer; the encoder runs once.
class RecognizerSession : public Session {
 public:
  RecognizerSession(const nn::ParamStore& params, const model::ModelConfig& cfg, const Tensor& frames)
      : params_(params), cfg_(cfg) {
    ad::Tape tape(false);
    nn::Binder p(tape, params_);
    model::EncoderOutput enc = model::EncodeVideo(p, cfg_, frames);
    memory_ = enc.out.value();
    ctc_ = ad::LogSoftmax(model::CtcLogits(p, enc.out)).value();
  }

  const Tensor& CtcLogProbs() const override { return ctc_; }
  std::size_t num_tokens() const override { return cfg_.num_tokens; }

  std::vector<double> NextTokenProbs(const std::vector<int>& prefix) override {
    ad::Tape tape(false);
    nn::Binder p(tape, params_);
    std::vector<int> in{cfg_.vocabulary().bos()};
    in.insert(in.end(), prefix.begin(), prefix.end());
    Tensor probs = ad::Softmax(model::DecoderForward(p, cfg_, tape.Input(memory_, "memory"), in)).value();
    auto last = probs.row(probs.rows() - 1);
    return {last.begin(), last.end()};
  }

 private:
  const nn::ParamStore& params_;
  model::ModelConfig cfg_;
  Tensor memory_;
  Tensor ctc_;
};

/// Weighted mean of M next-token distributions. Rows must sum to one.
inline std::vector<double> EnsembleNextToken(const std::vector<std::vector<double>>& dists,
                                             const std::vector<double>& weights = {}) {
  if (dists.empty()) throw ConfigError("ensemble: no distributions");
  const std::size_t V = dists[0].size();
  std::vector<double> out(V, 0.0);
  for (std::size_t m = 0; m < dists.size(); ++m) {
    if (dists[m].size() != V) throw ShapeError("ensemble: distributions differ in size");
    double s = 0.0;
    for (double v : dists[m]) s += v;
    if (std::abs(s - 1.0) > 1e-6)
      throw NumericError("ensemble: distribution " + std::to_string(m) + " sums to " + std::to_string(s));
    const double w = weights.empty() ? 1.0 / static_cast<double>(dists.size()) : weights[m];
    for (std::size_t i = 0; i < V; ++i) out[i] += w * dists[m][i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// CTC prefix scoring

/// Forward variables of a prefix: r_n / r_b are the log probabilities that
/// frames 1..t emit the prefix ending in a non-blank / blank, and psi is the
/// log probability that the prefix begins the collapsed output.
struct CtcPrefixState {
  std::vector<double> r_n, r_b;
  double psi = 0.0;
  int last = -1;
};

inline CtcPrefixState CtcInitialState(const Tensor& log_probs, int blank) {
  const std::size_t T = log_probs.rows();
  CtcPrefixState s;
  s.r_n.assign(T, kNegInf);
  s.r_b.assign(T, kNegInf);
  double acc = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    acc += log_probs(t, static_cast<std::size_t>(blank));
    s.r_b[t] = acc;
  }
  s.psi = 0.0;
  return s;
}

/// State of prefix + c. Its psi is the log prefix probability of the extension.
inline CtcPrefixState CtcExtend(const CtcPrefixState& g, int c, const Tensor& log_probs, int blank) {
  const std::size_t T = log_probs.rows();
  const std::size_t cc = static_cast<std::size_t>(c);
  CtcPrefixState h;
  h.last = c;
  h.r_n.assign(T, kNegInf);
  h.r_b.assign(T, kNegInf);
  if (T == 0) {
    h.psi = kNegInf;
    return h;
  }
  h.r_n[0] = g.last < 0 ? log_probs(0, cc) : kNegInf;
  double psi = h.r_n[0];
  for (std::size_t t = 1; t < T; ++t) {
    const double phi = g.last == c ? g.r_b[t - 1] : ad::detail::LogAdd(g.r_b[t - 1], g.r_n[t - 1]);
    h.r_n[t] = ad::detail::LogAdd(h.r_n[t - 1], phi) + log_probs(t, cc);
    h.r_b[t] = ad::detail::LogAdd(h.r_b[t - 1], h.r_n[t - 1]) + log_probs(t, static_cast<std::size_t>(blank));
    psi = ad::detail::LogAdd(psi, phi + log_probs(t, cc));
  }
  h.psi = psi;
  return h;
}

/// Log probability that the collapsed output is exactly the prefix.
inline double CtcCompleteScore(const CtcPrefixState& g) {
  if (g.r_n.empty()) return g.last < 0 ? 0.0 : kNegInf;
  return ad::detail::LogAdd(g.r_n.back(), g.r_b.back());
}

// ---------------------------------------------------------------------------
// Beam search

struct Hypothesis {
  std::vector<int> tokens;
  double score = 0.0;
  bool finished = false;
  std::vector<CtcPrefixState> ctc;  // one per model
};

struct DecodeResult {
  std::vector<int> tokens;
  double score = kNegInf;
  bool finished = false;
  std::vector<std::string> warnings;
};

/// Per-step score increment of every candidate extension of `h` (tokens
/// 0..|U|-1 then EOS), with the extended CTC states.
struct Expansion {
  std::vector<double> increments;
  std::vector<std::vector<CtcPrefixState>> states;  // [candidate][model]; empty for EOS
};

inline Expansion Expand(std::vector<Session*>& sessions, const Hypothesis& h, const DecodeConfig& cfg) {
  const std::size_t U = sessions[0]->num_tokens();
  const int blank = static_cast<int>(U);
  const std::size_t M = sessions.size();
  std::vector<std::vector<double>> att;
  att.reserve(M);
  for (Session* s : sessions) att.push_back(s->NextTokenProbs(h.tokens));
  const std::vector<double> p_att = EnsembleNextToken(att, cfg.weights);
  Expansion e;
  e.increments.assign(U + 1, kNegInf);
  e.states.resize(U + 1);
  for (std::size_t c = 0; c <= U; ++c) {
    double ctc = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      const CtcPrefixState& g = h.ctc[m];
      double num;
      if (c == U) {
        num = CtcCompleteScore(g);
      } else {
        e.states[c].push_back(CtcExtend(g, static_cast<int>(c), sessions[m]->CtcLogProbs(), blank));
        num = e.states[c].back().psi;
      }
      const double ratio = (g.psi == kNegInf || num == kNegInf) ? 0.0 : std::exp(num - g.psi);
      const double w = cfg.weights.empty() ? 1.0 / static_cast<double>(M) : cfg.weights[m];
      ctc += w * ratio;
    }
    const double mix = (1.0 - cfg.alpha) * p_att[c] + cfg.alpha * ctc;
    e.increments[c] = mix > 0.0 ? std::log(mix) : kNegInf;
  }
  return e;
}

inline DecodeResult BeamSearch(std::vector<Session*> sessions, const DecodeConfig& cfg) {
  cfg.Validate(sessions.size());
  const std::size_t U = sessions[0]->num_tokens();
  std::size_t T = sessions[0]->CtcLogProbs().rows();
  for (Session* s : sessions) {
    if (s->num_tokens() != U) throw ConfigError("decode: models disagree on vocabulary size");
    if (s->CtcLogProbs().cols() != U + 1) throw ShapeError("decode: CTC posteriors need |U|+1 columns");
    T = std::min(T, s->CtcLogProbs().rows());
  }
  const std::size_t max_len = cfg.max_length ? cfg.max_length : T;

  Hypothesis root;
  for (Session* s : sessions) root.ctc.push_back(CtcInitialState(s->CtcLogProbs(), static_cast<int>(U)));
  std::vector<Hypothesis> active{root}, finished;
  for (std::size_t len = 0; len <= max_len && !active.empty(); ++len) {
    std::vector<Hypothesis> next;
    for (const Hypothesis& h : active) {
      Expansion e = Expand(sessions, h, cfg);
      for (std::size_t c = 0; c <= U; ++c) {
        if (e.increments[c] == kNegInf) continue;
        if (c < U && len == max_len) continue;
        Hypothesis n;
        n.tokens = h.tokens;
        n.score = h.score + e.increments[c];
        if (c == U) {
          n.finished = true;
          finished.push_back(std::move(n));
        } else {
          n.tokens.push_back(static_cast<int>(c));
          n.ctc = std::move(e.states[c]);
          next.push_back(std::move(n));
        }
      }
    }
    std::stable_sort(next.begin(), next.end(),
                     [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; });
    if (next.size() > cfg.beam) next.resize(cfg.beam);
    active = std::move(next);
    // Increments are log probabilities, so no active hypothesis can overtake
    // a finished one that already scores higher.
    if (!finished.empty() && !active.empty()) {
      double best_f = kNegInf;
      for (const auto& f : finished) best_f = std::max(best_f, f.score);
      if (best_f > active.front().score) break;
    }
  }
  DecodeResult r;
  auto better = [](const Hypothesis& a, const Hypothesis& b) { return a.score < b.score; };
  if (!finished.empty()) {
    const Hypothesis& best = *std::max_element(finished.begin(), finished.end(), better);
    r.tokens = best.tokens;
    r.score = best.score;
    r.finished = true;
  } else {
    r.warnings.push_back("no finished hypothesis");
    spdlog::warn("decode: no hypothesis reached EOS, returning best unfinished");
    if (!active.empty()) {
      const Hypothesis& best = *std::max_element(active.begin(), active.end(), better);
      r.tokens = best.tokens;
      r.score = best.score;
    }
  }
  return r;
}

/// Decodes one utterance with recognizers that each read their own view.
inline DecodeResult DecodeUtterance(const std::vector<const nn::ParamStore*>& models,
                                    const std::vector<model::ModelConfig>& configs, const corpus::Utterance& u,
                                    const DecodeConfig& cfg) {
  if (models.size() != configs.size()) throw ConfigError("decode: one config per model is required");
  std::vector<std::unique_ptr<RecognizerSession>> owned;
  std::vector<Session*> sessions;
  for (std::size_t m = 0; m < models.size(); ++m) {
    owned.push_back(std::make_unique<RecognizerSession>(*models[m], configs[m], model::Frames(u, configs[m].view)));
    sessions.push_back(owned.back().get());
  }
  return BeamSearch(sessions, cfg);
}

}  // namespace avsd::decode
