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

// Parameter storage, layer building blocks and the Adam optimizer.

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "avsd/autodiff.hpp"
#include "avsd/rng.hpp"

namespace avsd::nn {

using ad::NamedTensors;
using ad::Tape;
using ad::Var;

/// Named parameter tensors in deterministic (lexicographic) order.
class ParamStore {
 public:
  void Set(const std::string& name, Tensor value) { params_[name] = std::move(value); }
  bool Contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& Get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("no parameter named '" + name + "'");
    return it->second;
  }
  Tensor& Mutable(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("no parameter named '" + name + "'");
    return it->second;
  }
  void Erase(const std::string& name) { params_.erase(name); }

  const NamedTensors& all() const { return params_; }
  NamedTensors& all() { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t NumScalars() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  std::vector<std::string> NamesWithPrefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (auto it = params_.lower_bound(prefix); it != params_.end() && it->first.rfind(prefix, 0) == 0; ++it)
      out.push_back(it->first);
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.params_ == b.params_; }

 private:
  NamedTensors params_;
};

/// Binds ParamStore entries onto a Tape on first use. Parameters for which
/// `trainable` returns false are bound as constants and receive no gradient.
class Binder {
 public:
  using Predicate = std::function<bool(const std::string&)>;

  Binder(Tape& tape, const ParamStore& store, Predicate trainable = nullptr)
      : tape_(tape), store_(store), trainable_(std::move(trainable)) {}

  /// Names found in `overlay` are taken from it; everything else from `store`.
  Binder(Tape& tape, const ParamStore& overlay, const ParamStore& store, Predicate trainable = nullptr)
      : tape_(tape), store_(store), overlay_(&overlay), trainable_(std::move(trainable)) {}

  Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    const bool train = tape_.recording() && (!trainable_ || trainable_(name));
    const Tensor& value = (overlay_ && overlay_->Contains(name)) ? overlay_->Get(name) : store_.Get(name);
    Var v = train ? tape_.Param(value, name) : tape_.Input(value, name);
    cache_.emplace(name, v);
    if (train) bound_.emplace_back(name, v);
    return v;
  }

  Tape& tape() { return tape_; }

  /// Enables inverted dropout on residual branches for this graph. `rng`
  /// must outlive the Binder. Ignored on tapes that do not record.
  void SetDropout(double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0,1)");
    dropout_ = rate;
    dropout_rng_ = &rng;
  }

  Var Dropout(Var x) {
    if (dropout_ == 0.0 || dropout_rng_ == nullptr || !tape_.recording()) return x;
    Tensor mask(x.shape());
    const double keep = 1.0 - dropout_;
    for (double& m : mask.vec()) m = dropout_rng_->Bernoulli(keep) ? 1.0 / keep : 0.0;
    return ad::MulConst(x, mask);
  }

  /// Gradients of the trainable parameters touched so far (call after Backward).
  NamedTensors Gradients() const {
    NamedTensors g;
    for (const auto& [name, v] : bound_) g.emplace(name, tape_.Grad(v));
    return g;
  }

 private:
  Tape& tape_;
  const ParamStore& store_;
  const ParamStore* overlay_ = nullptr;
  Predicate trainable_;
  double dropout_ = 0.0;
  Rng* dropout_rng_ = nullptr;
  std::unordered_map<std::string, Var> cache_;
  std::vector<std::pair<std::string, Var>> bound_;
};

// ---------------------------------------------------------------------------
// Initialization

inline Tensor XavierUniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.vec()) v = rng.Uniform(-a, a);
  return t;
}

inline Tensor NormalInit(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.vec()) v = rng.Normal(0.0, stddev);
  return t;
}

inline void InitLinear(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  ps.Set(prefix + ".w", XavierUniform({in, out}, in, out, rng));
  ps.Set(prefix + ".b", Tensor(Shape{out}));
}

inline void InitLayerNorm(ParamStore& ps, const std::string& prefix, std::size_t dim) {
  ps.Set(prefix + ".g", Tensor(Shape{dim}, 1.0));
  ps.Set(prefix + ".b", Tensor(Shape{dim}));
}

inline void InitAttention(ParamStore& ps, const std::string& prefix, std::size_t dim, Rng& rng) {
  for (const char* p : {".q", ".k", ".v", ".o"}) InitLinear(ps, prefix + p, dim, dim, rng);
}

inline void InitFeedForward(ParamStore& ps, const std::string& prefix, std::size_t dim, std::size_t hidden,
                            Rng& rng) {
  InitLinear(ps, prefix + ".fc1", dim, hidden, rng);
  InitLinear(ps, prefix + ".fc2", hidden, dim, rng);
}

// ---------------------------------------------------------------------------
// Layers

inline Var Linear(Binder& p, const std::string& prefix, Var x) {
  return ad::AddRow(ad::MatMul(x, p(prefix + ".w")), p(prefix + ".b"));
}

inline Var LayerNormLayer(Binder& p, const std::string& prefix, Var x) {
  return ad::LayerNorm(x, p(prefix + ".g"), p(prefix + ".b"));
}

inline Var FeedForward(Binder& p, const std::string& prefix, Var x) {
  return Linear(p, prefix + ".fc2", ad::Gelu(Linear(p, prefix + ".fc1", x)));
}

inline Tensor CausalMask(std::size_t n) {
  Tensor m = Tensor::Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m(i, j) = -1e9;
  return m;
}

/// Multi-head scaled dot-product attention of `query` over `memory`.
inline Var MultiHeadAttention(Binder& p, const std::string& prefix, Var query, Var memory, std::size_t heads,
                              bool causal) {
  const std::size_t dim = query.value().cols();
  if (heads == 0 || dim % heads != 0)
    throw ShapeError(prefix + ": width " + std::to_string(dim) + " not divisible by heads");
  const std::size_t dh = dim / heads;
  Var q = Linear(p, prefix + ".q", query);
  Var k = Linear(p, prefix + ".k", memory);
  Var v = Linear(p, prefix + ".v", memory);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = ad::SliceCols(q, h * dh, dh);
    Var kh = ad::SliceCols(k, h * dh, dh);
    Var vh = ad::SliceCols(v, h * dh, dh);
    Var scores = ad::Scale(ad::MatMulNT(qh, kh), scale);
    if (causal) scores = ad::AddConst(scores, CausalMask(scores.value().rows()));
    outs.push_back(ad::MatMul(ad::Softmax(scores), vh));
  }
  Var cat = heads == 1 ? outs[0] : ad::ConcatCols(outs);
  return Linear(p, prefix + ".o", cat);
}

/// Fixed sinusoidal position table (n×dim).
inline Tensor SinusoidalPositions(std::size_t n, std::size_t dim) {
  Tensor t = Tensor::Matrix(n, dim);
  for (std::size_t pos = 0; pos < n; ++pos)
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      t(pos, i) = (i % 2 == 0) ? std::sin(static_cast<double>(pos) * freq) : std::cos(static_cast<double>(pos) * freq);
    }
  return t;
}

// ---------------------------------------------------------------------------
// Optimization

/// Piecewise learning rate: linear warmup, constant hold, exponential decay
/// to final_scale·peak. Steps past the schedule stay at the final value.
struct LrSchedule {
  double peak = 1e-3;
  std::size_t warmup = 0;
  std::size_t hold = 0;
  std::size_t decay = 0;
  double final_scale = 0.05;

  /// Splits `total` steps by fractions; the decay phase gets the remainder.
  static LrSchedule TriStage(double peak, std::size_t total, double warmup_frac, double hold_frac,
                             double final_scale) {
    LrSchedule s;
    s.peak = peak;
    s.final_scale = final_scale;
    s.warmup = static_cast<std::size_t>(std::llround(warmup_frac * static_cast<double>(total)));
    s.hold = std::min(total - std::min(total, s.warmup),
                      static_cast<std::size_t>(std::llround(hold_frac * static_cast<double>(total))));
    s.decay = total - std::min(total, s.warmup + s.hold);
    return s;
  }

  double At(std::size_t step) const {
    if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    step -= warmup;
    if (step < hold) return peak;
    step -= hold;
    if (decay == 0) return peak;
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(decay));
    return peak * std::pow(final_scale, frac);
  }
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-6;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

class Adam {
 public:
  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  /// Applies one update to every parameter that has a gradient entry.
  /// Returns the pre-clip global gradient norm.
  double Step(ParamStore& params, const NamedTensors& grads, double lr) {
    double sq = 0.0;
    for (const auto& [_, g] : grads)
      for (double v : g.values()) sq += v * v;
    const double norm = std::sqrt(sq);
    const double clip = (opt_.clip_norm > 0.0 && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0;
    ++step_;
    for (const auto& [name, g] : grads) {
      Tensor& w = params.Mutable(name);
      if (w.shape() != g.shape()) throw ShapeError("adam: gradient shape mismatch for " + name);
      auto [it, fresh] = state_.try_emplace(name);
      State& s = it->second;
      if (fresh) {
        s.m = Tensor(w.shape());
        s.v = Tensor(w.shape());
      }
      // Bias correction counts this parameter's own updates, so tensors that
      // join late (after a freeze) start with a fresh estimate.
      ++s.steps;
      const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(s.steps));
      const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(s.steps));
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] * clip;
        s.m[i] = opt_.beta1 * s.m[i] + (1.0 - opt_.beta1) * gi;
        s.v[i] = opt_.beta2 * s.v[i] + (1.0 - opt_.beta2) * gi * gi;
        w[i] -= lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + opt_.epsilon);
      }
    }
    return norm;
  }

  std::size_t steps() const { return step_; }

 private:
  struct State {
    Tensor m, v;
    std::size_t steps = 0;
  };
  AdamOptions opt_;
  std::size_t step_ = 0;
  std::map<std::string, State> state_;
};

/// Adds src into dst entry by entry, creating missing entries.
inline void AccumulateGrads(NamedTensors& dst, const NamedTensors& src, double weight = 1.0) {
  for (const auto& [name, g] : src) {
    auto [it, fresh] = dst.try_emplace(name, Tensor(g.shape()));
    Tensor& d = it->second;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += weight * g[i];
  }
}

}  // namespace avsd::nn
