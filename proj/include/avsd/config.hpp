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

// Run configuration: "key = value" lines grouped under [section] headers
// (or written as section.key), '#' comments. Unknown keys are rejected.

#pragma once

#include <charconv>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "avsd/adapt.hpp"
#include "avsd/checkpoint.hpp"
#include "avsd/decode.hpp"
#include "avsd/pretrain.hpp"

namespace avsd::config {

struct ScoreConfig {
  std::size_t bootstrap_samples = 10000;
  double level = 0.95;
  std::uint64_t seed = 1;
};

struct RunConfig {
  std::uint64_t seed = 1;
  /// Share of each speaker's utterances held out for testing.
  double test_fraction = 0.2;
  corpus::CorpusSpec corpus;
  model::ModelConfig model;
  pretrain::PretrainConfig pretrain;
  finetune::FinetuneConfig finetune;
  adapt::AdaptConfig adapt;
  decode::DecodeConfig decode;
  ScoreConfig score;

  /// Propagates the run seed into the stage configs.
  void ApplySeed() {
    pretrain.seed = DeriveSeed(seed, "stage/pretrain");
    finetune.seed = DeriveSeed(seed, "stage/finetune");
    adapt.seed = DeriveSeed(seed, "stage/adapt");
  }

  void Validate() const {
    corpus.Validate();
    pretrain.Validate(model);
    finetune.Validate();
    adapt.Validate();
    if (!(decode.alpha >= 0.0 && decode.alpha <= 1.0)) throw ConfigError("decode.alpha must be in [0,1]");
    if (decode.beam == 0) throw ConfigError("decode.beam must be positive");
    if (!(score.level > 0.0 && score.level < 1.0)) throw ConfigError("score.level must be in (0,1)");
    if (score.bootstrap_samples == 0) throw ConfigError("score.bootstrap_samples must be positive");
    const std::size_t w = model.width();
    if (w % model.encoder.heads || w % model.decoder.heads) throw ConfigError("model.width must divide by head counts");
    if (w % model.encoder.pos_groups) throw ConfigError("model.width must divide by model.pos_groups");
    if (!(model.dropout >= 0.0 && model.dropout < 1.0)) throw ConfigError("model.dropout must be in [0,1)");
    if (model.num_tokens < corpus.num_phones) throw ConfigError("model.num_tokens must cover corpus.num_phones");
  }
};

namespace detail {

inline std::string Trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double ToDouble(const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError("expected a number, got '" + v + "'");
  return d;
}

inline std::uint64_t ToUnsigned(const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return out;
}

inline bool ToBool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

inline double ToProbability(const std::string& v) {
  const double d = ToDouble(v);
  if (!(d >= 0.0 && d <= 1.0)) throw ConfigError("probability " + v + " outside [0,1]");
  return d;
}

inline std::string Fmt(double d) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

}  // namespace detail

struct Field {
  std::string key;  // section.name
  std::string doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

/// The complete schema in canonical order.
inline const std::vector<Field>& Schema() {
  using namespace detail;
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    auto size = [&f](std::string key, std::string doc, auto member) {
      f.push_back({std::move(key), std::move(doc),
                   [member](RunConfig& c, const std::string& v) { member(c) = static_cast<std::size_t>(ToUnsigned(v)); },
                   [member](const RunConfig& c) { return std::to_string(member(c)); }});
    };
    auto u64 = [&f](std::string key, std::string doc, auto member) {
      f.push_back({std::move(key), std::move(doc),
                   [member](RunConfig& c, const std::string& v) { member(c) = ToUnsigned(v); },
                   [member](const RunConfig& c) { return std::to_string(member(c)); }});
    };
    auto real = [&f](std::string key, std::string doc, auto member) {
      f.push_back({std::move(key), std::move(doc),
                   [member](RunConfig& c, const std::string& v) { member(c) = ToDouble(v); },
                   [member](const RunConfig& c) { return Fmt(member(c)); }});
    };
    auto prob = [&f](std::string key, std::string doc, auto member) {
      f.push_back({std::move(key), std::move(doc),
                   [member](RunConfig& c, const std::string& v) { member(c) = ToProbability(v); },
                   [member](const RunConfig& c) { return Fmt(member(c)); }});
    };
    auto flag = [&f](std::string key, std::string doc, auto member) {
      f.push_back({std::move(key), std::move(doc),
                   [member](RunConfig& c, const std::string& v) { member(c) = ToBool(v); },
                   [member](const RunConfig& c) {
                     return std::string(member(c) ? "true" : "false");
                   }});
    };
#define AVSD_M(expr) [](auto& c) -> auto& { return c.expr; }
    u64("run.seed", "master seed for every training stage", AVSD_M(seed));
    prob("run.test_fraction", "share of each speaker's utterances held out for testing", AVSD_M(test_fraction));

    size("corpus.num_speakers", "speakers in the corpus", AVSD_M(corpus.num_speakers));
    size("corpus.utterances_per_speaker", "utterances per speaker", AVSD_M(corpus.utterances_per_speaker));
    size("corpus.num_phones", "phone inventory size P", AVSD_M(corpus.num_phones));
    f.push_back({"corpus.language", "source | target",
                 [](RunConfig& c, const std::string& v) { c.corpus.language = corpus::ParseLanguage(v); },
                 [](const RunConfig& c) { return corpus::LanguageName(c.corpus.language); }});
    prob("corpus.overlap", "fraction of phone templates shared across languages", AVSD_M(corpus.overlap));
    prob("corpus.occlusion_prob", "probability q of a face occluder", AVSD_M(corpus.occlusion_prob));
    size("corpus.min_phones", "shortest transcript", AVSD_M(corpus.min_phones));
    size("corpus.max_phones", "longest transcript", AVSD_M(corpus.max_phones));
    size("corpus.min_duration", "shortest phone, video frames", AVSD_M(corpus.min_duration));
    size("corpus.max_duration", "longest phone, video frames", AVSD_M(corpus.max_duration));
    real("corpus.audio_noise", "audio noise standard deviation", AVSD_M(corpus.audio_noise));
    real("corpus.pixel_noise", "pixel noise standard deviation", AVSD_M(corpus.pixel_noise));
    u64("corpus.seed", "corpus master seed", AVSD_M(corpus.seed));

    f.push_back({"model.view", "lip | face",
                 [](RunConfig& c, const std::string& v) { c.model.view = model::ParseView(v); },
                 [](const RunConfig& c) { return model::ViewName(c.model.view); }});
    size("model.width", "Transformer width", AVSD_M(model.frontend.model_width));
    size("model.feature_dim", "frontend feature size", AVSD_M(model.frontend.feature_dim));
    size("model.conv1_channels", "first visual conv channels", AVSD_M(model.frontend.conv1_channels));
    size("model.conv2_channels", "second visual conv channels", AVSD_M(model.frontend.conv2_channels));
    size("model.pool_grid", "visual pooling grid side", AVSD_M(model.frontend.pool_grid));
    size("model.encoder_blocks", "encoder blocks", AVSD_M(model.encoder.blocks));
    size("model.encoder_heads", "encoder attention heads", AVSD_M(model.encoder.heads));
    size("model.encoder_ffn", "encoder feed-forward size", AVSD_M(model.encoder.ffn));
    size("model.pos_kernel", "positional convolution kernel", AVSD_M(model.encoder.pos_kernel));
    size("model.pos_groups", "positional convolution groups", AVSD_M(model.encoder.pos_groups));
    size("model.decoder_blocks", "decoder blocks", AVSD_M(model.decoder.blocks));
    size("model.decoder_heads", "decoder attention heads", AVSD_M(model.decoder.heads));
    size("model.decoder_ffn", "decoder feed-forward size", AVSD_M(model.decoder.ffn));
    size("model.num_tokens", "token vocabulary size |U|", AVSD_M(model.num_tokens));
    real("model.dropout", "residual-branch dropout rate while training", AVSD_M(model.dropout));

    prob("pretrain.p_noise", "probability of adding noise to the student audio", AVSD_M(pretrain.p_noise));
    prob("pretrain.p_m", "probability of keeping both modalities", AVSD_M(pretrain.p_m));
    prob("pretrain.p_a", "probability of keeping audio when one is dropped", AVSD_M(pretrain.p_a));
    prob("pretrain.audio_coverage", "masked fraction of audio frames", AVSD_M(pretrain.audio_coverage));
    prob("pretrain.video_coverage", "masked fraction of video frames", AVSD_M(pretrain.video_coverage));
    size("pretrain.audio_span", "audio mask span length", AVSD_M(pretrain.audio_span));
    size("pretrain.video_span", "video mask span length", AVSD_M(pretrain.video_span));
    real("pretrain.snr_low_db", "lowest noise SNR", AVSD_M(pretrain.snr_low_db));
    real("pretrain.snr_high_db", "highest noise SNR", AVSD_M(pretrain.snr_high_db));
    size("pretrain.target_layers", "teacher blocks averaged into targets (k)", AVSD_M(pretrain.target_layers));
    f.push_back({"pretrain.target_norm", "time (per channel over time) | channel (per frame over channels)",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "time") c.pretrain.target_norm = pretrain::TargetNorm::kTime;
                   else if (v == "channel") c.pretrain.target_norm = pretrain::TargetNorm::kChannel;
                   else throw ConfigError("expected time or channel, got '" + v + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.pretrain.target_norm == pretrain::TargetNorm::kTime ? "time" : "channel");
                 }});
    real("pretrain.lambda_begin", "EMA decay at step 0", AVSD_M(pretrain.lambda_begin));
    real("pretrain.lambda_end", "EMA decay after warmup", AVSD_M(pretrain.lambda_end));
    size("pretrain.lambda_warmup", "steps of linear EMA decay ramp", AVSD_M(pretrain.lambda_warmup));
    real("pretrain.peak_lr", "peak learning rate", AVSD_M(pretrain.peak_lr));
    prob("pretrain.warmup_frac", "fraction of steps in LR warmup", AVSD_M(pretrain.warmup_frac));
    prob("pretrain.hold_frac", "fraction of steps at peak LR", AVSD_M(pretrain.hold_frac));
    real("pretrain.final_lr_scale", "final LR as a fraction of peak", AVSD_M(pretrain.final_lr_scale));
    size("pretrain.total_steps", "optimizer updates", AVSD_M(pretrain.total_steps));
    size("pretrain.batch_size", "utterances per update", AVSD_M(pretrain.batch_size));
    real("pretrain.beta1", "Adam beta1", AVSD_M(pretrain.adam.beta1));
    real("pretrain.beta2", "Adam beta2", AVSD_M(pretrain.adam.beta2));
    real("pretrain.epsilon", "Adam epsilon", AVSD_M(pretrain.adam.epsilon));
    real("pretrain.clip_norm", "gradient norm clip, 0 disables", AVSD_M(pretrain.adam.clip_norm));

    real("finetune.mu", "CTC loss weight", AVSD_M(finetune.mu));
    f.push_back({"finetune.freeze_steps", "encoder-frozen updates; auto = 10% of total_steps",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "auto") c.finetune.freeze_steps.reset();
                   else c.finetune.freeze_steps = static_cast<std::size_t>(ToUnsigned(v));
                 },
                 [](const RunConfig& c) {
                   return c.finetune.freeze_steps ? std::to_string(*c.finetune.freeze_steps) : std::string("auto");
                 }});
    flag("finetune.transfer", "cross-lingual transfer: no frozen steps", AVSD_M(finetune.transfer));
    real("finetune.peak_lr", "peak learning rate", AVSD_M(finetune.peak_lr));
    prob("finetune.warmup_frac", "fraction of steps in LR warmup", AVSD_M(finetune.warmup_frac));
    prob("finetune.hold_frac", "fraction of steps at peak LR", AVSD_M(finetune.hold_frac));
    real("finetune.final_lr_scale", "final LR as a fraction of peak", AVSD_M(finetune.final_lr_scale));
    size("finetune.total_steps", "optimizer updates", AVSD_M(finetune.total_steps));
    size("finetune.batch_size", "utterances per update", AVSD_M(finetune.batch_size));
    real("finetune.beta1", "Adam beta1", AVSD_M(finetune.adam.beta1));
    real("finetune.beta2", "Adam beta2", AVSD_M(finetune.adam.beta2));
    real("finetune.epsilon", "Adam epsilon", AVSD_M(finetune.adam.epsilon));
    real("finetune.clip_norm", "gradient norm clip, 0 disables", AVSD_M(finetune.adam.clip_norm));

    prob("adapt.rho", "KLD regularization weight", AVSD_M(adapt.rho));
    real("adapt.mu", "CTC loss weight", AVSD_M(adapt.mu));
    real("adapt.peak_lr", "peak learning rate", AVSD_M(adapt.peak_lr));
    size("adapt.warmup_steps", "LR warmup updates", AVSD_M(adapt.warmup_steps));
    size("adapt.decay_steps", "LR decay updates", AVSD_M(adapt.decay_steps));
    real("adapt.final_lr_scale", "final LR as a fraction of peak", AVSD_M(adapt.final_lr_scale));
    size("adapt.batch_size", "utterances per update", AVSD_M(adapt.batch_size));
    size("adapt.eval_every", "updates between validation passes", AVSD_M(adapt.eval_every));
    f.push_back({"adapt.speaker", "target speaker id",
                 [](RunConfig& c, const std::string& v) { c.adapt.speaker = v; },
                 [](const RunConfig& c) { return c.adapt.speaker; }});

    prob("decode.alpha", "CTC weight in joint decoding", AVSD_M(decode.alpha));
    size("decode.beam", "beam size", AVSD_M(decode.beam));
    size("decode.max_length", "maximum output tokens, 0 = number of frames", AVSD_M(decode.max_length));
    f.push_back({"decode.weights", "comma-separated per-model weights, empty = equal",
                 [](RunConfig& c, const std::string& v) {
                   c.decode.weights.clear();
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ','))
                     if (!Trim(item).empty()) c.decode.weights.push_back(ToDouble(Trim(item)));
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (double w : c.decode.weights) s += (s.empty() ? "" : ",") + Fmt(w);
                   return s;
                 }});

    size("score.bootstrap_samples", "bootstrap resamples B", AVSD_M(score.bootstrap_samples));
    real("score.level", "confidence level", AVSD_M(score.level));
    u64("score.seed", "bootstrap seed", AVSD_M(score.seed));
#undef AVSD_M
    return f;
  }();
  return fields;
}

inline const Field* FindField(const std::string& key) {
  for (const Field& f : Schema())
    if (f.key == key) return &f;
  return nullptr;
}

/// Applies one "section.key = value" assignment.
inline void Set(RunConfig& cfg, const std::string& key, const std::string& value) {
  const Field* f = FindField(key);
  if (!f) throw ConfigError("unknown key '" + key + "'");
  f->set(cfg, value);
}

/// Applies a "section.key=value" override string.
inline void ApplyOverride(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  Set(cfg, detail::Trim(assignment.substr(0, eq)), detail::Trim(assignment.substr(eq + 1)));
}

inline RunConfig Parse(const std::string& text, const std::string& origin = "config") {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::Trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = detail::Trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    std::string key = detail::Trim(line.substr(0, eq));
    if (key.find('.') == std::string::npos && !section.empty()) key = section + "." + key;
    try {
      Set(cfg, key, detail::Trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

inline RunConfig LoadFile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return Parse(ss.str(), path.string());
}

/// Canonical text: every key in schema order, one per line.
inline std::string Serialize(const RunConfig& cfg) {
  std::string out;
  for (const Field& f : Schema()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

inline std::string Digest(const RunConfig& cfg) { return ckpt::Sha256Hex(Serialize(cfg)); }

/// Schema listing with defaults, for --help style output.
inline std::string Describe() {
  RunConfig defaults;
  std::string out;
  for (const Field& f : Schema()) out += f.key + " = " + f.get(defaults) + "    # " + f.doc + "\n";
  return out;
}

}  // namespace avsd::config
