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

// Deterministic synthetic audio-visual corpus.
//
// Each language draws its phones from a shared bank of phone templates; a
// template fixes the mouth shape, the extraoral cues visible in the full
// face view, and the acoustic embedding. Speakers warp the mouth geometry,
// shift brightness, bias the audio and articulate every phone slightly
// differently. All randomness comes from counter-derived streams, so one
// master seed determines the whole corpus.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "avsd/error.hpp"
#include "avsd/rng.hpp"
#include "avsd/tensor.hpp"

namespace avsd::corpus {

enum class Language { kSource, kTarget };

inline std::string LanguageName(Language l) { return l == Language::kSource ? "source" : "target"; }
inline Language ParseLanguage(const std::string& s) {
  if (s == "source") return Language::kSource;
  if (s == "target") return Language::kTarget;
  throw ConfigError("unknown language '" + s + "' (expected source|target)");
}

/// Symbols used to spell token ids as text; id i is kTokenSymbols[i].
inline constexpr std::string_view kTokenSymbols = "abcdefghijklmnopqrstuvwxyz012345";
inline constexpr std::size_t kAudioStack = 4;

struct CorpusSpec {
  std::size_t num_speakers = 8;
  std::size_t utterances_per_speaker = 20;
  std::size_t num_phones = 20;
  Language language = Language::kTarget;
  /// Fraction of phone templates the source language shares with the target.
  double overlap = 0.5;
  std::size_t lip_size = 16;
  std::size_t face_size = 24;
  std::size_t audio_dim = 26;
  /// Probability that an utterance's face view carries an occluder.
  double occlusion_prob = 0.0;
  std::size_t min_phones = 3;
  std::size_t max_phones = 6;
  /// Video frames per phone.
  std::size_t min_duration = 2;
  std::size_t max_duration = 4;
  double audio_noise = 0.6;
  double pixel_noise = 0.08;
  std::uint64_t seed = 1;

  void Validate() const {
    if (occlusion_prob < 0.0 || occlusion_prob > 1.0) throw ConfigError("corpus: occlusion_prob must be in [0,1]");
    if (overlap < 0.0 || overlap > 1.0) throw ConfigError("corpus: overlap must be in [0,1]");
    if (num_phones < 2) throw ConfigError("corpus: need at least 2 phones");
    if (num_phones > kTokenSymbols.size()) throw ConfigError("corpus: at most 32 phones");
    if (min_phones < 1 || min_phones > max_phones) throw ConfigError("corpus: bad transcript length range");
    if (min_duration < 1 || min_duration > max_duration) throw ConfigError("corpus: bad phone duration range");
    if (lip_size != 16 || face_size != 24) throw ConfigError("corpus: frame sizes are fixed at 16 (lip) and 24 (face)");
    if (num_speakers == 0) throw ConfigError("corpus: num_speakers must be positive");
  }
};

struct Utterance {
  std::string utt_id;
  std::string speaker_id;
  Language language = Language::kTarget;
  std::vector<int> transcript;
  Tensor audio;  // T_a × audio_dim
  Tensor lip;    // T_v × 16 × 16
  Tensor face;   // T_v × 24 × 24
  bool occluded = false;
  /// Phone (token) shown in each video frame; empty when loaded from disk.
  std::vector<int> frame_phones;

  std::size_t num_video_frames() const { return lip.empty() ? 0 : lip.dim(0); }
};

inline std::string TokensToText(const std::vector<int>& tokens) {
  std::string s;
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= kTokenSymbols.size())
      throw FormatError("token id " + std::to_string(t) + " has no symbol");
    s += kTokenSymbols[static_cast<std::size_t>(t)];
  }
  return s;
}

inline std::vector<int> TextToTokens(const std::string& text) {
  std::vector<int> out;
  for (char c : text) {
    auto pos = kTokenSymbols.find(c);
    if (pos == std::string_view::npos) throw FormatError(std::string("unknown token symbol '") + c + "'");
    out.push_back(static_cast<int>(pos));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Templates and speakers

struct PhoneTemplate {
  double half_width = 4.0;
  double half_height = 2.0;
  double opening = 0.5;
  double teeth = 0.0;
  double cheek = 0.0;
  double brow = 0.0;
  std::vector<double> audio;
};

inline PhoneTemplate MakeTemplate(std::uint64_t seed, std::size_t template_id, std::size_t audio_dim) {
  Rng rng = Rng::Stream(seed, "template", template_id);
  PhoneTemplate t;
  t.half_width = rng.Uniform(2.5, 6.0);
  t.half_height = rng.Uniform(1.0, 4.5);
  t.opening = rng.Uniform(0.1, 0.9);
  t.teeth = rng.Bernoulli(0.5) ? 1.0 : 0.0;
  t.cheek = rng.Uniform(-1.0, 1.0);
  t.brow = rng.Uniform(-1.0, 1.0);
  t.audio.resize(audio_dim);
  for (double& v : t.audio) v = rng.Normal();
  return t;
}

/// Template id used by phone `phone` of `language`. The target language uses
/// ids [0, P); the source language reuses the first round(overlap·P) of them
/// and draws the rest from [P, 2P).
inline std::size_t TemplateId(const CorpusSpec& spec, Language language, std::size_t phone) {
  if (language == Language::kTarget) return phone;
  const auto shared = static_cast<std::size_t>(std::llround(spec.overlap * static_cast<double>(spec.num_phones)));
  return phone < shared ? phone : spec.num_phones + phone;
}

struct SpeakerStyle {
  std::string speaker_id;
  std::uint64_t seed = 0;
  double scale_x = 1.0, scale_y = 1.0;
  double shift_x = 0.0, shift_y = 0.0;
  double gain = 1.0, offset = 0.0;
  std::vector<double> audio_bias;

  /// Speaker-specific articulation offsets (width, height) for a template.
  std::pair<double, double> Articulation(std::size_t template_id) const {
    Rng rng = Rng::Stream(seed, "articulation", template_id);
    const double dw = rng.Normal(0.0, 0.25);
    const double dh = rng.Normal(0.0, 0.25);
    return {dw, dh};
  }
};

inline std::string SpeakerId(Language language, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%03zu", language == Language::kSource ? "src" : "tgt", index);
  return buf;
}

inline SpeakerStyle MakeSpeaker(const CorpusSpec& spec, std::size_t index) {
  const std::uint64_t sseed = DeriveSeed(spec.seed, LanguageName(spec.language) + "/speaker", index);
  Rng rng(sseed);
  SpeakerStyle s;
  s.speaker_id = SpeakerId(spec.language, index);
  s.seed = sseed;
  s.scale_x = rng.Uniform(0.8, 1.2);
  s.scale_y = rng.Uniform(0.8, 1.2);
  s.shift_x = rng.Uniform(-0.8, 0.8);
  s.shift_y = rng.Uniform(-0.8, 0.8);
  s.gain = rng.Uniform(0.85, 1.15);
  s.offset = rng.Uniform(-0.08, 0.08);
  s.audio_bias.resize(spec.audio_dim);
  for (double& v : s.audio_bias) v = rng.Normal(0.0, 0.4);
  return s;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline double Sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double RoundToFloat(double v) { return static_cast<double>(static_cast<float>(v)); }

struct MouthShape {
  double half_width, half_height, opening, teeth, cheek, brow;
};

inline MouthShape ShapeFor(const PhoneTemplate& t, const SpeakerStyle& s, std::size_t template_id) {
  auto [dw, dh] = s.Articulation(template_id);
  return {std::max(1.5, (t.half_width + dw) * s.scale_x), std::max(0.6, (t.half_height + dh) * s.scale_y),
          t.opening, t.teeth, t.cheek, t.brow};
}

inline MouthShape Blend(const MouthShape& a, const MouthShape& b, double w) {
  auto mix = [w](double x, double y) { return (1.0 - w) * x + w * y; };
  return {mix(a.half_width, b.half_width), mix(a.half_height, b.half_height), mix(a.opening, b.opening),
          mix(a.teeth, b.teeth),           mix(a.cheek, b.cheek),             mix(a.brow, b.brow)};
}

constexpr double kSkin = 0.55;

/// Noise-free mouth image intensity at lip-crop pixel (r, c).
inline double MouthPixel(const MouthShape& m, const SpeakerStyle& s, double r, double c) {
  const double cy = 7.5 + s.shift_y, cx = 7.5 + s.shift_x;
  const double dx = (c - cx) / m.half_width, dy = (r - cy) / m.half_height;
  const double outer = Sigmoid(4.0 * (1.0 - std::sqrt(dx * dx + dy * dy)));
  const double iw = 0.75 * m.half_width, ih = std::max(0.3, m.opening * m.half_height);
  const double ix = (c - cx) / iw, iy = (r - cy) / ih;
  const double inner = Sigmoid(4.0 * (1.0 - std::sqrt(ix * ix + iy * iy)));
  const double cavity = (r < cy && m.teeth > 0.5) ? 0.85 * m.teeth + 0.05 : 0.05;
  double v = kSkin * (1.0 - outer) + 0.25 * outer;
  return v * (1.0 - inner) + cavity * inner;
}

}  // namespace detail

/// Row/column of the lip crop's top-left corner inside the face view.
inline constexpr std::size_t kLipRowInFace = 7;
inline constexpr std::size_t kLipColInFace = 4;

/// Renders one utterance from its phone sequence. Durations, noise and the
/// occluder are drawn from `sub_seed`.
inline Utterance RenderUtterance(const std::vector<int>& phones, const SpeakerStyle& speaker, std::uint64_t sub_seed,
                                 const CorpusSpec& spec) {
  if (phones.empty()) throw ConfigError("render: empty phone sequence");
  Rng rng(sub_seed);
  const std::size_t L = spec.lip_size, F = spec.face_size, A = spec.audio_dim;

  std::vector<std::size_t> durations;
  std::size_t tv = 0;
  for (std::size_t i = 0; i < phones.size(); ++i) {
    durations.push_back(static_cast<std::size_t>(rng.IntIn(static_cast<int>(spec.min_duration),
                                                           static_cast<int>(spec.max_duration))));
    tv += durations.back();
  }
  Utterance u;
  u.speaker_id = speaker.speaker_id;
  u.language = spec.language;
  u.transcript = phones;
  u.occluded = rng.Bernoulli(spec.occlusion_prob);
  u.audio = Tensor(Shape{tv * kAudioStack, A});
  u.lip = Tensor(Shape{tv, L, L});
  u.face = Tensor(Shape{tv, F, F});

  // Occluder placement is fixed per utterance; it jitters per frame.
  const int occ_row = rng.IntIn(9, 14), occ_col = rng.IntIn(2, 10);
  const double occ_level = rng.Uniform(0.0, 0.25);

  std::vector<PhoneTemplate> templates;
  std::vector<std::size_t> template_ids;
  for (int p : phones) {
    if (p < 0 || static_cast<std::size_t>(p) >= spec.num_phones)
      throw ConfigError("render: phone " + std::to_string(p) + " outside inventory");
    template_ids.push_back(TemplateId(spec, spec.language, static_cast<std::size_t>(p)));
    templates.push_back(MakeTemplate(spec.seed, template_ids.back(), A));
  }

  std::size_t frame = 0;
  for (std::size_t i = 0; i < phones.size(); ++i) {
    const detail::MouthShape cur = detail::ShapeFor(templates[i], speaker, template_ids[i]);
    for (std::size_t d = 0; d < durations[i]; ++d, ++frame) {
      detail::MouthShape m = cur;
      if (d == 0 && i > 0) m = detail::Blend(detail::ShapeFor(templates[i - 1], speaker, template_ids[i - 1]), cur, 0.5);
      u.frame_phones.push_back(phones[i]);

      for (std::size_t a = 0; a < kAudioStack; ++a) {
        double* row = u.audio.data() + (frame * kAudioStack + a) * A;
        for (std::size_t k = 0; k < A; ++k)
          row[k] = detail::RoundToFloat(templates[i].audio[k] + speaker.audio_bias[k] +
                                        rng.Normal(0.0, spec.audio_noise));
      }

      double* lip = u.lip.data() + frame * L * L;
      for (std::size_t r = 0; r < L; ++r)
        for (std::size_t c = 0; c < L; ++c) {
          const double v = detail::MouthPixel(m, speaker, static_cast<double>(r), static_cast<double>(c));
          lip[r * L + c] =
              detail::RoundToFloat(speaker.gain * v + speaker.offset + rng.Normal(0.0, spec.pixel_noise));
        }

      double* face = u.face.data() + frame * F * F;
      for (std::size_t r = 0; r < F; ++r)
        for (std::size_t c = 0; c < F; ++c) {
          const double dy = (static_cast<double>(r) - 11.5) / 12.5, dx = (static_cast<double>(c) - 11.5) / 11.0;
          double v = dx * dx + dy * dy <= 1.0 ? detail::kSkin : 0.15;
          if (r >= 1 && r <= 2 && ((c >= 4 && c <= 8) || (c >= 15 && c <= 19))) v = 0.3 + 0.25 * m.brow;
          if (r >= 4 && r <= 5 && ((c >= 5 && c <= 7) || (c >= 16 && c <= 18))) v = 0.1;
          if (r >= 9 && r <= 20 && (c <= 3 || c >= 20)) v = detail::kSkin + 0.2 * m.cheek;
          face[r * F + c] =
              detail::RoundToFloat(speaker.gain * v + speaker.offset + rng.Normal(0.0, spec.pixel_noise));
        }
      for (std::size_t r = 0; r < L; ++r)
        for (std::size_t c = 0; c < L; ++c) face[(r + kLipRowInFace) * F + c + kLipColInFace] = lip[r * L + c];

      if (u.occluded) {
        const int jr = rng.IntIn(-1, 1), jc = rng.IntIn(-1, 1);
        for (int r = occ_row + jr; r < occ_row + jr + 10; ++r)
          for (int c = occ_col + jc; c < occ_col + jc + 12; ++c)
            if (r >= 0 && c >= 0 && r < static_cast<int>(F) && c < static_cast<int>(F))
              face[static_cast<std::size_t>(r) * F + static_cast<std::size_t>(c)] = detail::RoundToFloat(occ_level);
      }
    }
  }
  return u;
}

/// Samples a transcript of distinct consecutive phones.
inline std::vector<int> SampleTranscript(const CorpusSpec& spec, Rng& rng) {
  const int n = rng.IntIn(static_cast<int>(spec.min_phones), static_cast<int>(spec.max_phones));
  std::vector<int> out;
  while (static_cast<int>(out.size()) < n) {
    const int p = static_cast<int>(rng.Index(spec.num_phones));
    if (!out.empty() && out.back() == p) continue;
    out.push_back(p);
  }
  return out;
}

/// Generates every utterance of the corpus in memory, speaker-major order.
inline std::vector<Utterance> GenerateUtterances(const CorpusSpec& spec) {
  spec.Validate();
  std::vector<Utterance> out;
  out.reserve(spec.num_speakers * spec.utterances_per_speaker);
  const std::string lang = LanguageName(spec.language);
  for (std::size_t s = 0; s < spec.num_speakers; ++s) {
    const SpeakerStyle speaker = MakeSpeaker(spec, s);
    for (std::size_t k = 0; k < spec.utterances_per_speaker; ++k) {
      const std::uint64_t index = s * spec.utterances_per_speaker + k;
      Rng text_rng = Rng::Stream(spec.seed, lang + "/transcript", index);
      Utterance u = RenderUtterance(SampleTranscript(spec, text_rng), speaker,
                                    DeriveSeed(spec.seed, lang + "/render", index), spec);
      char buf[64];
      std::snprintf(buf, sizeof buf, "%s_u%04zu", speaker.speaker_id.c_str(), k);
      u.utt_id = buf;
      out.push_back(std::move(u));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature files: "AVTN", u32 rank, u32 dims[rank], f32 little-endian payload.

namespace detail {

inline void PutU32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t GetU32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string ReadFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void WriteFile(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

inline std::string EncodeFeature(const Tensor& t) {
  std::string out = "AVTN";
  detail::PutU32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::PutU32(out, static_cast<std::uint32_t>(d));
  for (double v : t.values()) detail::PutU32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

inline Tensor DecodeFeature(const std::string& bytes, const std::string& what = "feature") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8 || bytes.compare(0, 4, "AVTN") != 0) throw FormatError(what + ": bad magic");
  const std::uint32_t rank = detail::GetU32(p + 4);
  if (rank > 8 || bytes.size() < 8 + 4ull * rank) throw FormatError(what + ": truncated header");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(detail::GetU32(p + 8 + 4 * i));
  const std::size_t n = NumElements(shape);
  const std::size_t off = 8 + 4ull * rank;
  if (bytes.size() != off + 4 * n) throw FormatError(what + ": payload size mismatch");
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(detail::GetU32(p + off + 4 * i));
  return Tensor(std::move(shape), std::move(data));
}

inline void WriteFeature(const std::filesystem::path& path, const Tensor& t) {
  detail::WriteFile(path, EncodeFeature(t));
}

inline Tensor ReadFeature(const std::filesystem::path& path) {
  return DecodeFeature(detail::ReadFile(path), path.string());
}

/// Writes feature files and `manifest.jsonl` under `dir`; returns the
/// manifest path.
inline std::filesystem::path WriteCorpus(const std::vector<Utterance>& utts, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "feats", ec);
  if (ec) throw IoError("cannot create " + (dir / "feats").string() + ": " + ec.message());
  std::string manifest;
  for (const Utterance& u : utts) {
    const std::string base = "feats/" + u.utt_id;
    WriteFeature(dir / (base + ".audio.avtn"), u.audio);
    WriteFeature(dir / (base + ".lip.avtn"), u.lip);
    WriteFeature(dir / (base + ".face.avtn"), u.face);
    nlohmann::ordered_json row;
    row["utt_id"] = u.utt_id;
    row["speaker_id"] = u.speaker_id;
    row["lang"] = LanguageName(u.language);
    row["audio_path"] = base + ".audio.avtn";
    row["lip_path"] = base + ".lip.avtn";
    row["face_path"] = base + ".face.avtn";
    row["transcript"] = TokensToText(u.transcript);
    row["num_video_frames"] = u.num_video_frames();
    row["occluded"] = u.occluded;
    manifest += row.dump() + "\n";
  }
  const fs::path mpath = dir / "manifest.jsonl";
  detail::WriteFile(mpath, manifest);
  return mpath;
}

/// Loads every utterance listed in a manifest (paths relative to it).
inline std::vector<Utterance> LoadCorpus(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest.string());
  const auto dir = manifest.parent_path();
  std::vector<Utterance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto row = nlohmann::json::parse(line);
      Utterance u;
      u.utt_id = row.at("utt_id").get<std::string>();
      u.speaker_id = row.at("speaker_id").get<std::string>();
      u.language = ParseLanguage(row.at("lang").get<std::string>());
      u.transcript = TextToTokens(row.at("transcript").get<std::string>());
      u.audio = ReadFeature(dir / row.at("audio_path").get<std::string>());
      u.lip = ReadFeature(dir / row.at("lip_path").get<std::string>());
      u.face = ReadFeature(dir / row.at("face_path").get<std::string>());
      u.occluded = row.at("occluded").get<bool>();
      if (u.num_video_frames() != row.at("num_video_frames").get<std::size_t>())
        throw FormatError("num_video_frames disagrees with lip features");
      out.push_back(std::move(u));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(manifest.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace avsd::corpus
