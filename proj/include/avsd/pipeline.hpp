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

// Stage orchestration shared by the command-line tool and the experiments:
// each stage consumes utterances (and checkpoints) and yields a checkpoint.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "avsd/config.hpp"
#include "avsd/metrics.hpp"

namespace avsd::pipeline {

namespace fs = std::filesystem;
using config::RunConfig;
using Json = nlohmann::ordered_json;

/// Reads AVSD_LOG (trace|debug|info|warn|error|off; default info).
inline void ConfigureLogging() {
  const char* env = std::getenv("AVSD_LOG");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
}

enum class Split { kAll, kTrain, kTest };

inline Split ParseSplit(const std::string& s) {
  if (s == "all") return Split::kAll;
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + s + "' (expected all|train|test)");
}

/// Per speaker, the last ceil(fraction·n) utterances in id order are test.
inline std::vector<corpus::Utterance> SelectSplit(const std::vector<corpus::Utterance>& utts, Split split,
                                                  double test_fraction) {
  if (split == Split::kAll) return utts;
  std::map<std::string, std::vector<const corpus::Utterance*>> by;
  for (const auto& u : utts) by[u.speaker_id].push_back(&u);
  std::map<std::string, bool> is_test;
  for (auto& [spk, group] : by) {
    std::sort(group.begin(), group.end(), [](auto* a, auto* b) { return a->utt_id < b->utt_id; });
    const std::size_t n_test =
        static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(group.size()) - 1e-9));
    for (std::size_t i = 0; i < group.size(); ++i) is_test[group[i]->utt_id] = i >= group.size() - n_test;
  }
  std::vector<corpus::Utterance> out;
  for (const auto& u : utts)
    if (is_test[u.utt_id] == (split == Split::kTest)) out.push_back(u);
  return out;
}

inline std::vector<corpus::Utterance> FilterSpeakers(const std::vector<corpus::Utterance>& utts,
                                                     const std::vector<std::string>& speakers) {
  if (speakers.empty()) return utts;
  std::vector<corpus::Utterance> out;
  for (const auto& u : utts)
    if (std::find(speakers.begin(), speakers.end(), u.speaker_id) != speakers.end()) out.push_back(u);
  return out;
}

/// Model configuration stored in a checkpoint, with an optional view override.
inline model::ModelConfig ModelOf(const ckpt::Checkpoint& c) { return config::Parse(c.config_text).model; }

inline std::string CheckpointDigest(const ckpt::Checkpoint& c) { return ckpt::Sha256Hex(ckpt::Encode(c)); }

inline ckpt::Checkpoint MakeCheckpoint(ckpt::Stage stage, const RunConfig& cfg, nn::ParamStore params) {
  ckpt::Checkpoint c;
  c.stage = stage;
  c.config_text = config::Serialize(cfg);
  c.vocabulary = cfg.model.vocabulary().symbols();
  c.params = ckpt::RoundToStorage(std::move(params));
  return c;
}

struct PretrainOutput {
  ckpt::Checkpoint checkpoint;
  std::vector<pretrain::LogRow> log;
};

inline PretrainOutput RunPretrain(const RunConfig& cfg, const std::vector<corpus::Utterance>& utts) {
  pretrain::PretrainResult r = pretrain::Pretrain(utts, cfg.model, cfg.pretrain);
  PretrainOutput out{MakeCheckpoint(ckpt::Stage::kPretrain, cfg, std::move(r.student)), std::move(r.log)};
  out.checkpoint.metadata["steps"] = cfg.pretrain.total_steps;
  out.checkpoint.metadata["num_utterances"] = utts.size();
  out.checkpoint.metadata["view"] = model::ViewName(cfg.model.view);
  return out;
}

struct FinetuneOutput {
  ckpt::Checkpoint checkpoint;
  std::vector<finetune::LogRow> log;
};

/// Supervised training from scratch (`init` null) or from a pretrain checkpoint.
inline FinetuneOutput RunFinetune(const RunConfig& cfg, const std::vector<corpus::Utterance>& utts,
                                  const ckpt::Checkpoint* init) {
  nn::ParamStore params;
  std::size_t freeze = 0;
  if (init) {
    if (init->stage != ckpt::Stage::kPretrain)
      throw StageMismatchError("finetune: --init needs a 'pretrain' checkpoint, found '" +
                               ckpt::StageName(init->stage) + "'");
    params = finetune::InitFromPretrained(init->params, cfg.model, cfg.finetune.seed);
    freeze = cfg.finetune.transfer ? 0 : cfg.finetune.ConfiguredFreezeSteps();
  } else {
    if (cfg.finetune.transfer) throw ConfigError("finetune: transfer requires an --init checkpoint");
    params = model::InitRecognizer(cfg.model, cfg.finetune.seed);
  }
  finetune::FinetuneResult r = finetune::Finetune(utts, cfg.model, cfg.finetune, std::move(params), freeze);
  FinetuneOutput out{MakeCheckpoint(ckpt::Stage::kSi, cfg, std::move(r.params)), std::move(r.log)};
  Json& m = out.checkpoint.metadata;
  m["freeze_steps"] = freeze;
  m["transfer"] = cfg.finetune.transfer;
  m["parent_digest"] = init ? CheckpointDigest(*init) : "";
  m["num_utterances"] = utts.size();
  m["view"] = model::ViewName(cfg.model.view);
  return out;
}

struct AdaptOutput {
  ckpt::Checkpoint checkpoint;
  adapt::AdaptResult result;
};

/// Speaker adaptation of an SI checkpoint; the model shape comes from the
/// checkpoint, the objective and schedule from `cfg`.
inline AdaptOutput RunAdapt(const RunConfig& cfg, const std::vector<corpus::Utterance>& utts,
                            const ckpt::Checkpoint& si) {
  if (si.stage != ckpt::Stage::kSi)
    throw StageMismatchError("adapt: expected an 'si' checkpoint, found '" + ckpt::StageName(si.stage) + "'");
  RunConfig stored = config::Parse(si.config_text);
  stored.adapt = cfg.adapt;
  stored.seed = cfg.seed;
  adapt::AdaptResult r = adapt::Adapt(si.params, utts, stored.model, cfg.adapt);
  AdaptOutput out{MakeCheckpoint(ckpt::Stage::kSd, stored, r.params), r};
  out.checkpoint.speaker_id = cfg.adapt.speaker;
  Json& m = out.checkpoint.metadata;
  m["speaker_id"] = cfg.adapt.speaker;
  m["parent_digest"] = CheckpointDigest(si);
  m["best_step"] = r.best_step;
  m["initial_valid_loss"] = r.initial_valid_loss;
  m["best_valid_loss"] = r.best_valid_loss;
  m["view"] = model::ViewName(stored.model.view);
  return out;
}

struct DecodeRecord {
  std::string utt_id;
  std::string speaker_id;
  std::string hypothesis;
  double score = 0.0;
  std::vector<std::string> models_used;
  std::vector<std::string> warnings;
};

struct LoadedModel {
  std::string name;
  nn::ParamStore params;
  model::ModelConfig cfg;
};

inline LoadedModel LoadModel(const ckpt::Checkpoint& c, const std::string& name,
                             std::optional<model::View> view = std::nullopt) {
  if (c.stage == ckpt::Stage::kPretrain)
    throw StageMismatchError(name + ": a 'pretrain' checkpoint has no decoder and cannot be decoded");
  LoadedModel m{name, c.params, ModelOf(c)};
  if (view) m.cfg.view = *view;
  return m;
}

inline std::vector<DecodeRecord> DecodeAll(const std::vector<LoadedModel>& models,
                                           const std::vector<corpus::Utterance>& utts,
                                           const decode::DecodeConfig& cfg) {
  std::vector<const nn::ParamStore*> ps;
  std::vector<model::ModelConfig> cfgs;
  std::vector<std::string> names;
  for (const auto& m : models) {
    ps.push_back(&m.params);
    cfgs.push_back(m.cfg);
    names.push_back(m.name + ":" + model::ViewName(m.cfg.view));
  }
  std::vector<DecodeRecord> out;
  out.reserve(utts.size());
  for (const auto& u : utts) {
    decode::DecodeResult r = decode::DecodeUtterance(ps, cfgs, u, cfg);
    out.push_back({u.utt_id, u.speaker_id, corpus::TokensToText(r.tokens), r.score, names, r.warnings});
  }
  return out;
}

inline std::string DecodeJsonl(const std::vector<DecodeRecord>& records) {
  std::string s;
  for (const auto& r : records) {
    Json row;
    row["utt_id"] = r.utt_id;
    row["hypothesis"] = r.hypothesis;
    row["score"] = r.score;
    row["models_used"] = r.models_used;
    row["warnings"] = r.warnings;
    s += row.dump() + "\n";
  }
  return s;
}

inline std::map<std::string, std::string> ReadHypotheses(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto row = nlohmann::json::parse(line);
      out[row.at("utt_id").get<std::string>()] = row.at("hypothesis").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

/// Scores hypotheses against the reference transcripts of `utts`.
inline std::vector<metrics::UttScore> ScoreAll(const std::vector<corpus::Utterance>& utts,
                                               const std::map<std::string, std::string>& hyps) {
  std::vector<metrics::UttScore> scores;
  for (const auto& u : utts) {
    auto it = hyps.find(u.utt_id);
    if (it == hyps.end()) continue;
    scores.push_back(metrics::ScoreUtterance(u.utt_id, u.speaker_id, corpus::TokensToText(u.transcript), it->second));
  }
  if (scores.empty()) throw ConfigError("score: no hypothesis matches an utterance of the manifest");
  return scores;
}

/// CER of decoding `utts` with the given models.
inline double EvaluateCer(const std::vector<LoadedModel>& models, const std::vector<corpus::Utterance>& utts,
                          const decode::DecodeConfig& cfg) {
  std::map<std::string, std::string> hyps;
  for (const auto& r : DecodeAll(models, utts, cfg)) hyps[r.utt_id] = r.hypothesis;
  return metrics::Cer(ScoreAll(utts, hyps));
}

}  // namespace avsd::pipeline
