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

// Encoder/decoder topology shared by every training stage: frontends and
// fusion, a pre-LN Transformer encoder with a convolutional relative
// position layer, and a pre-LN Transformer decoder with cross attention.

#pragma once

#include <string>
#include <vector>

#include "avsd/corpus.hpp"
#include "avsd/frontend.hpp"
#include "avsd/nn.hpp"

namespace avsd::model {

using ad::Var;

enum class View { kLip, kFace };

inline std::string ViewName(View v) { return v == View::kLip ? "lip" : "face"; }
inline View ParseView(const std::string& s) {
  if (s == "lip") return View::kLip;
  if (s == "face") return View::kFace;
  throw ConfigError("unknown view '" + s + "' (expected lip|face)");
}

inline const Tensor& Frames(const corpus::Utterance& u, View v) { return v == View::kLip ? u.lip : u.face; }

/// Token spaces. Tokens are [0, n). Each output head appends one special at
/// index n: blank for CTC, EOS for the decoder output, BOS for the decoder
/// input embedding.
class Vocabulary {
 public:
  explicit Vocabulary(std::size_t num_tokens = 32) : n_(num_tokens) {
    if (n_ == 0 || n_ > corpus::kTokenSymbols.size()) throw ConfigError("vocabulary: size must be in [1,32]");
  }
  std::size_t num_tokens() const { return n_; }
  int blank() const { return static_cast<int>(n_); }
  int bos() const { return static_cast<int>(n_); }
  int eos() const { return static_cast<int>(n_); }
  std::size_t ctc_classes() const { return n_ + 1; }
  std::size_t decoder_classes() const { return n_ + 1; }
  bool IsToken(int t) const { return t >= 0 && static_cast<std::size_t>(t) < n_; }
  std::string symbols() const { return std::string(corpus::kTokenSymbols.substr(0, n_)); }

  void Check(const std::vector<int>& transcript) const {
    for (int t : transcript)
      if (!IsToken(t)) throw ConfigError("token " + std::to_string(t) + " outside vocabulary of " + std::to_string(n_));
  }

 private:
  std::size_t n_;
};

struct EncoderConfig {
  std::size_t blocks = 4;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t pos_kernel = 5;
  std::size_t pos_groups = 4;
};

struct DecoderConfig {
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t ffn = 256;
};

struct ModelConfig {
  frontend::FrontendConfig frontend;
  EncoderConfig encoder;
  DecoderConfig decoder;
  std::size_t num_tokens = 32;
  View view = View::kLip;
  /// Residual-branch dropout while training.
  double dropout = 0.1;

  std::size_t width() const { return frontend.model_width; }
  Vocabulary vocabulary() const { return Vocabulary(num_tokens); }
};

inline std::string BlockPrefix(const std::string& stack, std::size_t i) { return stack + ".block" + std::to_string(i); }

inline void InitEncoder(nn::ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
  const std::size_t w = cfg.width(), g = cfg.encoder.pos_groups;
  if (w % g != 0) throw ConfigError("encoder: width not divisible by pos_groups");
  ps.Set("encoder.pos.w", nn::XavierUniform({w, w / g, cfg.encoder.pos_kernel}, (w / g) * cfg.encoder.pos_kernel,
                                            (w / g) * cfg.encoder.pos_kernel, rng));
  ps.Set("encoder.pos.b", Tensor(Shape{w}));
  for (std::size_t i = 0; i < cfg.encoder.blocks; ++i) {
    const std::string b = BlockPrefix("encoder", i);
    nn::InitLayerNorm(ps, b + ".ln1", w);
    nn::InitAttention(ps, b + ".attn", w, rng);
    nn::InitLayerNorm(ps, b + ".ln2", w);
    nn::InitFeedForward(ps, b + ".ffn", w, cfg.encoder.ffn, rng);
  }
  nn::InitLayerNorm(ps, "encoder.ln_final", w);
}

inline void InitDecoder(nn::ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
  const std::size_t w = cfg.width();
  const Vocabulary vocab = cfg.vocabulary();
  ps.Set("decoder.embed", nn::NormalInit({vocab.decoder_classes(), w}, 1.0 / std::sqrt(static_cast<double>(w)), rng));
  for (std::size_t i = 0; i < cfg.decoder.blocks; ++i) {
    const std::string b = BlockPrefix("decoder", i);
    nn::InitLayerNorm(ps, b + ".ln1", w);
    nn::InitAttention(ps, b + ".self", w, rng);
    nn::InitLayerNorm(ps, b + ".ln2", w);
    nn::InitAttention(ps, b + ".cross", w, rng);
    nn::InitLayerNorm(ps, b + ".ln3", w);
    nn::InitFeedForward(ps, b + ".ffn", w, cfg.decoder.ffn, rng);
  }
  nn::InitLayerNorm(ps, "decoder.ln_final", w);
  nn::InitLinear(ps, "decoder.out", w, vocab.decoder_classes(), rng);
  nn::InitLinear(ps, "ctc.proj", w, vocab.ctc_classes(), rng);
}

/// Parameters of the self-distillation student: frontends, mask embeddings,
/// fusion, encoder and the regression head.
inline nn::ParamStore InitAv2vec(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng = Rng::Stream(seed, "init/av2vec");
  nn::ParamStore ps;
  frontend::InitFrontends(ps, cfg.frontend, rng);
  ps.Set("mask.audio", nn::NormalInit({cfg.frontend.feature_dim}, 1.0, rng));
  ps.Set("mask.video", nn::NormalInit({cfg.frontend.feature_dim}, 1.0, rng));
  InitEncoder(ps, cfg, rng);
  nn::InitLinear(ps, "pretrain.head", cfg.width(), cfg.width(), rng);
  return ps;
}

/// Video-only recognizer: visual frontend, fusion, encoder, decoder, CTC head.
inline nn::ParamStore InitRecognizer(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng = Rng::Stream(seed, "init/recognizer");
  nn::ParamStore ps;
  frontend::InitFrontends(ps, cfg.frontend, rng);
  for (const std::string& n : ps.NamesWithPrefix("frontend.audio")) ps.Erase(n);
  InitEncoder(ps, cfg, rng);
  InitDecoder(ps, cfg, rng);
  return ps;
}

/// Names that make up the encoder in the sense of transfer: everything a
/// recognizer copies from a pretrained student.
inline bool IsEncoderParam(const std::string& name) {
  return name.rfind("frontend.video.", 0) == 0 || name.rfind("fusion.", 0) == 0 || name.rfind("encoder.", 0) == 0;
}

/// Names updated by the EMA teacher (Transformer stack only).
inline bool IsTeacherParam(const std::string& name) { return name.rfind("encoder.", 0) == 0; }

struct EncoderOutput {
  Var out;                   // after the final layer norm
  std::vector<Var> blocks;   // raw output of every block
};

inline Var EncoderBlock(nn::Binder& p, const ModelConfig& cfg, const std::string& b, Var x) {
  Var h = nn::LayerNormLayer(p, b + ".ln1", x);
  x = ad::Add(x, p.Dropout(nn::MultiHeadAttention(p, b + ".attn", h, h, cfg.encoder.heads, false)));
  return ad::Add(x, p.Dropout(nn::FeedForward(p, b + ".ffn", nn::LayerNormLayer(p, b + ".ln2", x))));
}

inline EncoderOutput EncoderForward(nn::Binder& p, const ModelConfig& cfg, Var x) {
  x = ad::Add(x, ad::Gelu(ad::Conv1dTime(x, p("encoder.pos.w"), p("encoder.pos.b"), cfg.encoder.pos_groups)));
  EncoderOutput out;
  for (std::size_t i = 0; i < cfg.encoder.blocks; ++i) {
    x = EncoderBlock(p, cfg, BlockPrefix("encoder", i), x);
    out.blocks.push_back(x);
  }
  out.out = nn::LayerNormLayer(p, "encoder.ln_final", x);
  return out;
}

/// Encoder representation of a video-only input: the audio stream is the
/// all-zero feature tensor, exactly as under modality dropout.
inline EncoderOutput EncodeVideo(nn::Binder& p, const ModelConfig& cfg, const Tensor& frames) {
  ad::Tape& tape = p.tape();
  Var v = frontend::VideoFrontend(p, cfg.frontend, tape.Input(frames, "frames"));
  Var a = tape.Input(Tensor::Matrix(frames.dim(0), cfg.frontend.feature_dim), "audio.zero");
  return EncoderForward(p, cfg, frontend::Fuse(p, a, v));
}

/// Teacher-forced decoder logits for the given input tokens (BOS first).
inline Var DecoderForward(nn::Binder& p, const ModelConfig& cfg, Var memory, const std::vector<int>& inputs) {
  const std::size_t w = cfg.width();
  Var x = ad::Scale(ad::Embedding(p("decoder.embed"), inputs), std::sqrt(static_cast<double>(w)));
  x = p.Dropout(ad::AddConst(x, nn::SinusoidalPositions(inputs.size(), w)));
  for (std::size_t i = 0; i < cfg.decoder.blocks; ++i) {
    const std::string b = BlockPrefix("decoder", i);
    Var h = nn::LayerNormLayer(p, b + ".ln1", x);
    x = ad::Add(x, p.Dropout(nn::MultiHeadAttention(p, b + ".self", h, h, cfg.decoder.heads, true)));
    h = nn::LayerNormLayer(p, b + ".ln2", x);
    x = ad::Add(x, p.Dropout(nn::MultiHeadAttention(p, b + ".cross", h, memory, cfg.decoder.heads, false)));
    x = ad::Add(x, p.Dropout(nn::FeedForward(p, b + ".ffn", nn::LayerNormLayer(p, b + ".ln3", x))));
  }
  return nn::Linear(p, "decoder.out", nn::LayerNormLayer(p, "decoder.ln_final", x));
}

inline Var CtcLogits(nn::Binder& p, Var encoder_out) { return nn::Linear(p, "ctc.proj", encoder_out); }

/// BOS-prefixed decoder inputs and EOS-terminated targets for a transcript.
inline std::pair<std::vector<int>, std::vector<int>> TeacherForcing(const Vocabulary& vocab,
                                                                    const std::vector<int>& transcript) {
  std::vector<int> in{vocab.bos()};
  in.insert(in.end(), transcript.begin(), transcript.end());
  std::vector<int> target = transcript;
  target.push_back(vocab.eos());
  return {in, target};
}

}  // namespace avsd::model
