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

// Checkpoint container: "AVCK", u32 version, u64 header length, JSON header,
// then the float32 little-endian payload of every tensor in header order.

#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"
#include <openssl/evp.h>

#include "avsd/corpus.hpp"
#include "avsd/nn.hpp"

namespace avsd::ckpt {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

inline constexpr std::string_view kMagic = "AVCK";
inline constexpr std::uint32_t kVersion = 1;

enum class Stage { kPretrain, kSi, kSd };

inline std::string StageName(Stage s) {
  switch (s) {
    case Stage::kPretrain: return "pretrain";
    case Stage::kSi: return "si";
    case Stage::kSd: return "sd";
  }
  return "?";
}

inline Stage ParseStage(const std::string& s) {
  if (s == "pretrain") return Stage::kPretrain;
  if (s == "si") return Stage::kSi;
  if (s == "sd") return Stage::kSd;
  throw FormatError("checkpoint: unknown stage '" + s + "'");
}

inline std::string Sha256Hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 15];
  }
  return out;
}

/// Content hash in the style of a git blob id, over SHA-256.
inline std::string ContentHash(std::string_view bytes) {
  std::string framed = "blob " + std::to_string(bytes.size());
  framed.push_back('\0');
  framed.append(bytes);
  return Sha256Hex(framed);
}

struct Checkpoint {
  Stage stage = Stage::kPretrain;
  std::string speaker_id;
  std::string config_text;
  std::string vocabulary;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
  nn::ParamStore params;

  std::string config_digest() const { return Sha256Hex(config_text); }
};

inline std::string Encode(const Checkpoint& c) {
  nlohmann::ordered_json h;
  h["stage"] = StageName(c.stage);
  h["speaker_id"] = c.speaker_id;
  h["config_digest"] = c.config_digest();
  h["config"] = c.config_text;
  h["vocabulary"] = c.vocabulary;
  h["metadata"] = c.metadata;
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.params.all()) {
    table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    offset += 4 * t.size();
  }
  h["tensors"] = table;
  const std::string header = h.dump();
  std::string out(kMagic);
  corpus::detail::PutU32(out, kVersion);
  const std::uint64_t hl = header.size();
  out.append(reinterpret_cast<const char*>(&hl), 8);
  out += header;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : c.params.all())
    for (double v : t.values()) {
      const float f = static_cast<float>(v);
      out.append(reinterpret_cast<const char*>(&f), 4);
    }
  return out;
}

inline Checkpoint Decode(const std::string& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < 16 || std::string_view(bytes).substr(0, 4) != kMagic)
    throw FormatError(what + ": bad magic, not a checkpoint");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t version = corpus::detail::GetU32(p + 4);
  if (version != kVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  std::uint64_t hl;
  std::memcpy(&hl, p + 8, 8);
  if (hl > bytes.size() - 16) throw FormatError(what + ": truncated header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(16, hl));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": header is not valid JSON (" + e.what() + ")");
  }
  Checkpoint c;
  try {
    c.stage = ParseStage(h.at("stage").get<std::string>());
    c.speaker_id = h.at("speaker_id").get<std::string>();
    c.config_text = h.at("config").get<std::string>();
    c.vocabulary = h.at("vocabulary").get<std::string>();
    c.metadata = nlohmann::ordered_json::parse(h.at("metadata").dump());
    if (h.at("config_digest").get<std::string>() != c.config_digest())
      throw FormatError(what + ": config digest does not match the stored config");
    const std::size_t payload = bytes.size() - 16 - hl;
    const char* base = bytes.data() + 16 + hl;
    for (const auto& e : h.at("tensors")) {
      const std::string name = e.at("name").get<std::string>();
      const Shape shape = e.at("shape").get<Shape>();
      const std::uint64_t off = e.at("offset").get<std::uint64_t>();
      const std::uint64_t count = e.at("count").get<std::uint64_t>();
      if (count != NumElements(shape)) throw FormatError(what + ": tensor '" + name + "' count disagrees with shape");
      if (off > payload || count * 4 > payload - off)
        throw FormatError(what + ": payload truncated at tensor '" + name + "'");
      std::vector<double> v(count);
      for (std::uint64_t i = 0; i < count; ++i) {
        float f;
        std::memcpy(&f, base + off + 4 * i, 4);
        v[i] = f;
      }
      c.params.Set(name, Tensor(shape, std::move(v)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": malformed header (" + e.what() + ")");
  }
  return c;
}

inline void Save(const Checkpoint& c, const std::filesystem::path& path) { corpus::detail::WriteFile(path, Encode(c)); }

inline Checkpoint Load(const std::filesystem::path& path) {
  return Decode(corpus::detail::ReadFile(path), path.string());
}

inline Checkpoint LoadStage(const std::filesystem::path& path, Stage expected) {
  Checkpoint c = Load(path);
  if (c.stage != expected)
    throw StageMismatchError(path.string() + ": expected a '" + StageName(expected) + "' checkpoint, found '" +
                             StageName(c.stage) + "'");
  return c;
}

/// Parameters rounded to float32 storage precision, as a save/load cycle would.
inline nn::ParamStore RoundToStorage(nn::ParamStore ps) {
  for (auto& [_, t] : ps.all())
    for (double& v : t.vec()) v = static_cast<float>(v);
  return ps;
}

}  // namespace avsd::ckpt
