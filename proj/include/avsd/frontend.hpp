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

// Audio/visual frontends, frame stacking, span masking, feature corruption,
// modality dropout, noise injection and channel-wise fusion.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <utility>
#include <vector>

#include "avsd/autodiff.hpp"
#include "avsd/nn.hpp"
#include "avsd/rng.hpp"

namespace avsd::frontend {

using ad::Var;

/// Concatenates `factor` consecutive rows into one; a trailing remainder
/// shorter than `factor` is dropped.
inline Tensor StackAudioFrames(const Tensor& frames, std::size_t factor) {
  if (frames.rank() != 2) throw ShapeError("stack_audio_frames: expected T×D, got " + ShapeString(frames.shape()));
  if (factor < 1) throw ConfigError("stack_audio_frames: factor must be >= 1");
  if (frames.rows() < factor)
    throw ShapeError("stack_audio_frames: " + std::to_string(frames.rows()) + " frames < factor " +
                     std::to_string(factor));
  const std::size_t t_out = frames.rows() / factor, d = frames.cols();
  Tensor out = Tensor::Matrix(t_out, d * factor);
  std::copy(frames.data(), frames.data() + t_out * factor * d, out.data());
  return out;
}

/// Span mask over [0, T): span starts are drawn uniformly without replacement
/// and each covers `span_len` frames (clipped at T) until the masked fraction
/// reaches `coverage`. Returns the sorted masked indices.
inline std::vector<std::size_t> MakeSpanMask(std::size_t T, double coverage, std::size_t span_len, Rng& rng) {
  if (coverage < 0.0 || coverage > 1.0) throw ConfigError("span mask: coverage must be in [0,1]");
  if (span_len < 1) throw ConfigError("span mask: span_len must be >= 1");
  std::vector<char> masked(T, 0);
  std::size_t count = 0;
  std::vector<std::size_t> starts(T);
  for (std::size_t i = 0; i < T; ++i) starts[i] = i;
  std::size_t remaining = T;
  while (remaining > 0 && static_cast<double>(count) < coverage * static_cast<double>(T)) {
    const std::size_t pick = static_cast<std::size_t>(rng.Index(remaining));
    const std::size_t s = starts[pick];
    starts[pick] = starts[--remaining];
    for (std::size_t t = s; t < std::min(T, s + span_len); ++t)
      if (!masked[t]) {
        masked[t] = 1;
        ++count;
      }
  }
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < T; ++t)
    if (masked[t]) out.push_back(t);
  return out;
}

/// Replaces the masked rows of `features` by `embedding`.
inline Tensor Corrupt(const Tensor& features, const std::vector<std::size_t>& mask, const Tensor& embedding) {
  if (features.rank() != 2) throw ShapeError("corrupt: expected T×D features");
  if (embedding.size() != features.cols())
    throw ShapeError("corrupt: embedding size " + std::to_string(embedding.size()) + " != feature dim " +
                     std::to_string(features.cols()));
  Tensor out = features;
  for (std::size_t t : mask) {
    if (t >= features.rows()) throw ShapeError("corrupt: index " + std::to_string(t) + " out of range");
    std::copy(embedding.data(), embedding.data() + embedding.size(), out.row(t).begin());
  }
  return out;
}

enum class ModalityChoice { kBoth, kAudioOnly, kVideoOnly };

/// With probability p_m keep both streams; otherwise audio alone with
/// probability p_a, else video alone.
inline ModalityChoice DrawModality(double p_m, double p_a, Rng& rng) {
  if (p_m < 0.0 || p_m > 1.0 || p_a < 0.0 || p_a > 1.0)
    throw ConfigError("modality dropout: probabilities must be in [0,1]");
  if (rng.Bernoulli(p_m)) return ModalityChoice::kBoth;
  return rng.Bernoulli(p_a) ? ModalityChoice::kAudioOnly : ModalityChoice::kVideoOnly;
}

/// Zeroes the dropped stream (all-zero tensor of the same shape).
inline std::pair<Tensor, Tensor> ModalityDropout(const Tensor& audio_feats, const Tensor& video_feats, double p_m,
                                                 double p_a, Rng& rng) {
  const ModalityChoice c = DrawModality(p_m, p_a, rng);
  Tensor a = c == ModalityChoice::kVideoOnly ? Tensor(audio_feats.shape()) : audio_feats;
  Tensor v = c == ModalityChoice::kAudioOnly ? Tensor(video_feats.shape()) : video_feats;
  return {std::move(a), std::move(v)};
}

/// With probability p_noise adds white Gaussian noise at `snr_db` relative
/// to the mean power of `audio`; otherwise returns it unchanged.
inline Tensor AddNoise(const Tensor& audio, double p_noise, double snr_db, Rng& rng) {
  if (p_noise < 0.0 || p_noise > 1.0) throw ConfigError("add_noise: p_noise must be in [0,1]");
  if (!rng.Bernoulli(p_noise)) return audio;
  if (std::isinf(snr_db) && snr_db > 0) return audio;
  double power = 0.0;
  for (double v : audio.values()) power += v * v;
  power /= static_cast<double>(std::max<std::size_t>(1, audio.size()));
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  Tensor out = audio;
  for (double& v : out.vec()) v += rng.Normal(0.0, sigma);
  return out;
}

/// Random crop to `crop`×`crop` and horizontal flip with probability
/// flip_prob on a T×H×W frame stack (one draw per utterance).
inline Tensor AugmentFrames(const Tensor& frames, std::size_t crop, double flip_prob, Rng& rng) {
  const std::size_t T = frames.dim(0), H = frames.dim(1), W = frames.dim(2);
  if (crop > H || crop > W) throw ShapeError("augment: crop larger than frame");
  const std::size_t r0 = static_cast<std::size_t>(rng.Index(H - crop + 1));
  const std::size_t c0 = static_cast<std::size_t>(rng.Index(W - crop + 1));
  const bool flip = rng.Bernoulli(flip_prob);
  Tensor out(Shape{T, crop, crop});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t r = 0; r < crop; ++r)
      for (std::size_t c = 0; c < crop; ++c) {
        const std::size_t sc = flip ? c0 + crop - 1 - c : c0 + c;
        out[(t * crop + r) * crop + c] = frames[(t * H + r0 + r) * W + sc];
      }
  return out;
}

/// Deterministic center crop used at test time when augmentation is on.
inline Tensor CenterCrop(const Tensor& frames, std::size_t crop) {
  const std::size_t T = frames.dim(0), H = frames.dim(1), W = frames.dim(2);
  if (crop > H || crop > W) throw ShapeError("center crop larger than frame");
  const std::size_t r0 = (H - crop) / 2, c0 = (W - crop) / 2;
  Tensor out(Shape{T, crop, crop});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t r = 0; r < crop; ++r)
      for (std::size_t c = 0; c < crop; ++c) out[(t * crop + r) * crop + c] = frames[(t * H + r0 + r) * W + c0 + c];
  return out;
}

// ---------------------------------------------------------------------------
// Parametric frontends

struct FrontendConfig {
  std::size_t audio_in = 104;      // 26 features × 4 stacked frames
  std::size_t feature_dim = 64;    // D_fa = D_fv
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
  std::size_t pool_grid = 2;
  std::size_t model_width = 64;
};

inline void InitFrontends(nn::ParamStore& ps, const FrontendConfig& cfg, Rng& rng) {
  nn::InitLinear(ps, "frontend.audio", cfg.audio_in, cfg.feature_dim, rng);
  ps.Set("frontend.video.conv1.w", nn::XavierUniform({cfg.conv1_channels, 1, 3, 3}, 9, cfg.conv1_channels * 9, rng));
  ps.Set("frontend.video.conv1.b", Tensor(Shape{cfg.conv1_channels}));
  ps.Set("frontend.video.conv2.w", nn::XavierUniform({cfg.conv2_channels, cfg.conv1_channels, 3, 3},
                                                     cfg.conv1_channels * 9, cfg.conv2_channels * 9, rng));
  ps.Set("frontend.video.conv2.b", Tensor(Shape{cfg.conv2_channels}));
  nn::InitLinear(ps, "frontend.video.proj", cfg.conv2_channels * cfg.pool_grid * cfg.pool_grid, cfg.feature_dim, rng);
  nn::InitLayerNorm(ps, "fusion.ln", 2 * cfg.feature_dim);
  nn::InitLinear(ps, "fusion.fc", 2 * cfg.feature_dim, cfg.model_width, rng);
}

/// Stacked audio (T×104) → F_a (T×D).
inline Var AudioFrontend(nn::Binder& p, Var audio_stacked) { return nn::Linear(p, "frontend.audio", audio_stacked); }

/// Frame stack (T×H×W) → F_v (T×D): two strided 3×3 convolutions with ReLU,
/// average pooling onto a small grid, then a projection.
inline Var VideoFrontend(nn::Binder& p, const FrontendConfig& cfg, Var frames) {
  const Shape& s = frames.shape();
  if (s.size() != 3) throw ShapeError("video frontend: expected T×H×W frames, got " + ShapeString(s));
  Var x = ad::Reshape(frames, {s[0], 1, s[1], s[2]});
  x = ad::Relu(ad::Conv2d(x, p("frontend.video.conv1.w"), p("frontend.video.conv1.b"), {2, 1}));
  x = ad::Relu(ad::Conv2d(x, p("frontend.video.conv2.w"), p("frontend.video.conv2.b"), {2, 1}));
  x = ad::PoolGrid(x, cfg.pool_grid, cfg.pool_grid);
  return nn::Linear(p, "frontend.video.proj", x);
}

/// Channel-wise concatenation [F_a, F_v] → layer norm → projection to the
/// model width.
inline Var Fuse(nn::Binder& p, Var audio_feats, Var video_feats) {
  if (audio_feats.value().rows() != video_feats.value().rows())
    throw ShapeError("fuse: audio has " + std::to_string(audio_feats.value().rows()) + " frames, video has " +
                     std::to_string(video_feats.value().rows()));
  Var cat = ad::ConcatCols({audio_feats, video_feats});
  return nn::Linear(p, "fusion.fc", nn::LayerNormLayer(p, "fusion.ln", cat));
}

struct FrontendOutput {
  Var audio;  // F_a
  Var video;  // F_v
};

/// Runs both frontends; their frame counts must agree.
inline FrontendOutput FrontendForward(nn::Binder& p, const FrontendConfig& cfg, Var audio_stacked, Var frames) {
  if (audio_stacked.value().rows() != frames.shape()[0])
    throw ShapeError("frontend: " + std::to_string(audio_stacked.value().rows()) + " stacked audio frames vs " +
                     std::to_string(frames.shape()[0]) + " video frames");
  return {AudioFrontend(p, audio_stacked), VideoFrontend(p, cfg, frames)};
}

}  // namespace avsd::frontend
