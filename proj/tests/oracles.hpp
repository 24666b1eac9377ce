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

// Reference implementations shared by the unit tests and the acceptance
// binary. Each one takes the slow, obvious route.

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "avsd/corpus.hpp"
#include "avsd/decode.hpp"
#include "avsd/model.hpp"
#include "avsd/nn.hpp"

namespace avsd::oracle {

/// A model small enough for finite differences.
inline model::ModelConfig TinyModel(std::size_t num_tokens = 5) {
  model::ModelConfig mc;
  mc.frontend.feature_dim = 6;
  mc.frontend.model_width = 8;
  mc.frontend.conv1_channels = 2;
  mc.frontend.conv2_channels = 3;
  mc.encoder.blocks = 2;
  mc.encoder.heads = 2;
  mc.encoder.ffn = 12;
  mc.encoder.pos_groups = 2;
  mc.decoder.blocks = 1;
  mc.decoder.heads = 2;
  mc.decoder.ffn = 12;
  mc.num_tokens = num_tokens;
  mc.dropout = 0.0;
  return mc;
}

/// A handful of short utterances whose transcripts fit in `num_tokens`.
inline std::vector<corpus::Utterance> TinyCorpus(std::size_t n, std::uint64_t seed, std::size_t num_tokens = 5) {
  corpus::CorpusSpec spec;
  spec.num_speakers = 1;
  spec.utterances_per_speaker = n;
  spec.num_phones = num_tokens;
  spec.min_phones = 2;
  spec.max_phones = 3;
  spec.seed = seed;
  return corpus::GenerateUtterances(spec);
}

using LossFn = std::function<ad::Var(nn::Binder&)>;

struct FdReport {
  double rel_error = 0.0;  // ||analytic − numeric|| / max(||analytic||, ||numeric||)
  std::size_t coords = 0;
};

/// Compares the tape gradient of `loss` against central differences on up
/// to `per_tensor` random coordinates of every parameter that receives one.
inline FdReport FiniteDifference(const nn::ParamStore& params, const LossFn& loss, std::size_t per_tensor,
                                 std::uint64_t seed, double h = 1e-5) {
  nn::NamedTensors analytic;
  {
    ad::Tape tape(true);
    nn::Binder p(tape, params);
    ad::Var l = loss(p);
    tape.Backward(l);
    analytic = p.Gradients();
  }
  auto eval = [&](const nn::ParamStore& ps) {
    ad::Tape tape(false);
    nn::Binder p(tape, ps);
    return loss(p).value().item();
  };
  Rng rng(seed);
  nn::ParamStore work = params;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  FdReport r;
  for (const auto& [name, g] : analytic) {
    const std::size_t take = std::min(per_tensor, g.size());
    for (std::size_t k = 0; k < take; ++k) {
      const std::size_t i = take == g.size() ? k : rng.Index(g.size());
      Tensor& w = work.Mutable(name);
      const double orig = w[i];
      w[i] = orig + h;
      const double up = eval(work);
      w[i] = orig - h;
      const double down = eval(work);
      w[i] = orig;
      const double num = (up - down) / (2.0 * h);
      diff2 += (g[i] - num) * (g[i] - num);
      a2 += g[i] * g[i];
      n2 += num * num;
      ++r.coords;
    }
  }
  const double scale = std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
  r.rel_error = std::sqrt(diff2) / scale;
  return r;
}

/// Adds N(0, sigma^2) noise to every parameter.
inline nn::ParamStore Jitter(nn::ParamStore ps, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> names;
  for (const auto& [name, t] : ps.all()) names.push_back(name);
  for (const std::string& name : names) {
    Tensor& w = ps.Mutable(name);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += sigma * rng.Normal();
  }
  return ps;
}

/// Collapses a CTC path: merge repeats, then drop blanks.
inline std::vector<int> Collapse(const std::vector<int>& path, int blank) {
  std::vector<int> out;
  int prev = -1;
  for (int s : path) {
    if (s != prev && s != blank) out.push_back(s);
    prev = s;
  }
  return out;
}

/// Visits every length-T path over C symbols with its probability.
inline void ForEachPath(const Tensor& probs, const std::function<void(const std::vector<int>&, double)>& visit) {
  const std::size_t T = probs.rows(), C = probs.cols();
  std::vector<int> path(T, 0);
  while (true) {
    double p = 1.0;
    for (std::size_t t = 0; t < T; ++t) p *= probs(t, static_cast<std::size_t>(path[t]));
    visit(path, p);
    std::size_t t = 0;
    while (t < T && static_cast<std::size_t>(++path[t]) == C) path[t++] = 0;
    if (t == T) return;
  }
}

/// −ln Σ over paths that collapse to `labels`; +inf when none does.
inline double BruteCtcNll(const Tensor& probs, const std::vector<int>& labels, int blank) {
  double total = 0.0;
  ForEachPath(probs, [&](const std::vector<int>& path, double p) {
    if (Collapse(path, blank) == labels) total += p;
  });
  return total > 0.0 ? -std::log(total) : std::numeric_limits<double>::infinity();
}

/// Probability that the collapsed output starts with (or, with exact, equals) g.
inline double BrutePrefixProb(const Tensor& probs, const std::vector<int>& g, int blank, bool exact) {
  double total = 0.0;
  ForEachPath(probs, [&](const std::vector<int>& path, double p) {
    const auto y = Collapse(path, blank);
    const bool ok = exact ? y == g : (y.size() >= g.size() && std::equal(g.begin(), g.end(), y.begin()));
    if (ok) total += p;
  });
  return total;
}

/// Random row-stochastic T×C matrix.
inline Tensor RandomPosteriors(std::size_t T, std::size_t C, Rng& rng) {
  Tensor p = Tensor::Matrix(T, C);
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += (p(t, c) = std::exp(2.0 * rng.Normal()));
    for (std::size_t c = 0; c < C; ++c) p(t, c) /= s;
  }
  return p;
}

/// Session with fixed CTC posteriors and next-token distributions that are
/// a deterministic function of the prefix.
class FakeSession : public decode::Session {
 public:
  FakeSession(std::size_t num_tokens, std::size_t T, std::uint64_t seed, double sharpness = 1.5)
      : U_(num_tokens), seed_(seed), sharpness_(sharpness) {
    Rng rng(seed);
    Tensor p = RandomPosteriors(T, U_ + 1, rng);
    log_ = Tensor(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) log_[i] = std::log(p[i]);
    probs_ = p;
  }
  const Tensor& CtcLogProbs() const override { return log_; }
  const Tensor& CtcProbs() const { return probs_; }
  std::size_t num_tokens() const override { return U_; }
  std::vector<double> NextTokenProbs(const std::vector<int>& prefix) override {
    std::uint64_t key = seed_ * 1000003u + 17;
    for (int t : prefix) key = key * 31 + static_cast<std::uint64_t>(t) + 1;
    Rng rng(MixBits(key));
    std::vector<double> d(U_ + 1);
    double s = 0.0;
    for (double& v : d) s += (v = std::exp(sharpness_ * rng.Normal()));
    for (double& v : d) v /= s;
    return d;
  }

 private:
  std::size_t U_;
  std::uint64_t seed_;
  double sharpness_;
  Tensor log_, probs_;
};

/// Score of a complete hypothesis computed from brute-force CTC prefix
/// probabilities: Σ_n log[(1−α)·avg P_att + α·avg ψ(y_≤n)/ψ(y_<n)] with the
/// EOS step using the exact-match probability.
inline double BruteHypothesisScore(std::vector<FakeSession*>& models, const std::vector<int>& y, double alpha) {
  const std::size_t M = models.size();
  const int blank = static_cast<int>(models[0]->num_tokens());
  double score = 0.0;
  std::vector<int> prefix;
  for (std::size_t n = 0; n <= y.size(); ++n) {
    const bool eos = n == y.size();
    const std::size_t c = eos ? models[0]->num_tokens() : static_cast<std::size_t>(y[n]);
    double att = 0.0, ctc = 0.0;
    std::vector<int> ext = prefix;
    if (!eos) ext.push_back(y[n]);
    for (FakeSession* m : models) {
      att += m->NextTokenProbs(prefix)[c] / static_cast<double>(M);
      const double base = BrutePrefixProb(m->CtcProbs(), prefix, blank, false);
      const double num = BrutePrefixProb(m->CtcProbs(), ext, blank, eos);
      ctc += (base > 0.0 ? num / base : 0.0) / static_cast<double>(M);
    }
    const double mix = (1.0 - alpha) * att + alpha * ctc;
    if (mix <= 0.0) return -std::numeric_limits<double>::infinity();
    score += std::log(mix);
    if (!eos) prefix.push_back(y[n]);
  }
  return score;
}

struct BruteBest {
  std::vector<int> tokens;
  double score = -std::numeric_limits<double>::infinity();
};

/// Argmax over every token sequence of length ≤ max_len.
inline BruteBest BruteDecode(std::vector<FakeSession*>& models, std::size_t max_len, double alpha) {
  const std::size_t U = models[0]->num_tokens();
  BruteBest best;
  std::vector<std::vector<int>> frontier{{}};
  for (std::size_t len = 0; len <= max_len; ++len) {
    std::vector<std::vector<int>> next;
    for (const auto& y : frontier) {
      const double s = BruteHypothesisScore(models, y, alpha);
      if (s > best.score) best = {y, s};
      if (len < max_len)
        for (std::size_t c = 0; c < U; ++c) {
          next.push_back(y);
          next.back().push_back(static_cast<int>(c));
        }
    }
    frontier = std::move(next);
  }
  return best;
}

/// Plain Levenshtein distance.
template <typename Seq>
std::size_t Levenshtein(const Seq& a, const Seq& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace avsd::oracle
