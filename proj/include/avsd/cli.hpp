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

// Command-line front end: gen-corpus, pretrain, finetune, adapt, decode, score.
// Exit status 0 on success, 1 on runtime failure, 2 on usage or config errors.

#pragma once

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "avsd/pipeline.hpp"

namespace avsd::cli {

namespace fs = std::filesystem;
using pipeline::Json;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

inline void AddCommon(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "run configuration file")->required();
  app->add_option("--set", c.overrides, "override a key, section.key=value (repeatable)");
}

inline config::RunConfig LoadConfig(const Common& c) {
  config::RunConfig cfg = config::LoadFile(c.config_path);
  for (const auto& o : c.overrides) config::ApplyOverride(cfg, o);
  cfg.ApplySeed();
  cfg.Validate();
  return cfg;
}

inline std::vector<std::string> SplitList(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!config::detail::Trim(item).empty()) out.push_back(config::detail::Trim(item));
  return out;
}

/// Writes `<output>.meta.json` describing how an artifact was produced.
inline void WriteMeta(const fs::path& output, const std::string& command, const config::RunConfig& cfg,
                      const std::vector<fs::path>& inputs, Json extra = Json::object()) {
  Json m;
  m["command"] = command;
  m["seed"] = cfg.seed;
  m["config_digest"] = config::Digest(cfg);
  Json in = Json::array();
  for (const auto& p : inputs)
    in.push_back({{"path", p.filename().string()}, {"content_hash", ckpt::ContentHash(corpus::detail::ReadFile(p))}});
  m["inputs"] = in;
  for (auto& [k, v] : extra.items()) m[k] = v;
  corpus::detail::WriteFile(fs::path(output.string() + ".meta.json"), m.dump(2) + "\n");
}

inline void EnsureParent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

inline int Run(int argc, const char* const* argv) {
  pipeline::ConfigureLogging();
  CLI::App app{"avsd: audio-visual speech recognition toolkit"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen-corpus", "render a synthetic corpus");
  std::string out_dir;
  AddCommon(gen, common);
  gen->add_option("--out", out_dir, "output directory")->required();

  std::string manifest, out, log_path, init_path, speakers, split_name;
  bool transfer = false;

  auto* pre = app.add_subcommand("pretrain", "self-distillation pretraining");
  AddCommon(pre, common);
  pre->add_option("--manifest", manifest, "corpus manifest")->required();
  pre->add_option("--out", out, "output checkpoint")->required();
  pre->add_option("--log", log_path, "training log CSV");
  pre->add_option("--speakers", speakers, "comma-separated speaker filter");
  pre->add_option("--split", split_name, "all|train|test (default all)");

  auto* fin = app.add_subcommand("finetune", "CTC/attention fine-tuning");
  AddCommon(fin, common);
  fin->add_option("--manifest", manifest, "corpus manifest")->required();
  fin->add_option("--out", out, "output checkpoint")->required();
  fin->add_option("--init", init_path, "pretrain checkpoint to initialize the encoder");
  fin->add_flag("--transfer", transfer, "cross-lingual transfer: encoder is never frozen");
  fin->add_option("--log", log_path, "training log CSV");
  fin->add_option("--speakers", speakers, "comma-separated speaker filter");
  fin->add_option("--split", split_name, "all|train|test (default train)");

  auto* ada = app.add_subcommand("adapt", "speaker adaptation of an SI checkpoint");
  std::string speaker;
  AddCommon(ada, common);
  ada->add_option("--manifest", manifest, "corpus manifest")->required();
  ada->add_option("--init", init_path, "si checkpoint")->required();
  ada->add_option("--speaker", speaker, "target speaker id (overrides adapt.speaker)");
  ada->add_option("--out-dir", out_dir, "directory for sd_<speaker>.ckpt")->required();
  ada->add_option("--split", split_name, "all|train|test (default train)");

  auto* dec = app.add_subcommand("decode", "joint CTC/attention ensemble decoding");
  std::string models, views;
  AddCommon(dec, common);
  dec->add_option("--manifest", manifest, "corpus manifest")->required();
  dec->add_option("--models", models, "comma-separated checkpoints")->required();
  dec->add_option("--views", views, "comma-separated lip|face, one per model (default: each model's own)");
  dec->add_option("--out", out, "output JSON Lines")->required();
  dec->add_option("--speakers", speakers, "comma-separated speaker filter");
  dec->add_option("--split", split_name, "all|train|test (default test)");

  auto* sco = app.add_subcommand("score", "CER report with bootstrap intervals");
  std::string hyps_path;
  AddCommon(sco, common);
  sco->add_option("--manifest", manifest, "corpus manifest")->required();
  sco->add_option("--hyps", hyps_path, "decode output")->required();
  sco->add_option("--out", out, "report CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const config::RunConfig cfg = LoadConfig(common);
    const fs::path config_path = common.config_path;
    auto load = [&](const char* default_split) {
      auto utts = corpus::LoadCorpus(manifest);
      utts = pipeline::FilterSpeakers(utts, SplitList(speakers));
      return pipeline::SelectSplit(utts, pipeline::ParseSplit(split_name.empty() ? default_split : split_name),
                                   cfg.test_fraction);
    };

    if (*gen) {
      const fs::path m = corpus::WriteCorpus(corpus::GenerateUtterances(cfg.corpus), out_dir);
      WriteMeta(m, "gen-corpus", cfg, {config_path});
      spdlog::info("wrote {}", m.string());
    } else if (*pre) {
      auto utts = load("all");
      auto r = pipeline::RunPretrain(cfg, utts);
      EnsureParent(out);
      ckpt::Save(r.checkpoint, out);
      if (!log_path.empty()) corpus::detail::WriteFile(log_path, pretrain::LogCsv(r.log));
      WriteMeta(out, "pretrain", cfg, {config_path, manifest});
    } else if (*fin) {
      config::RunConfig c = cfg;
      if (transfer) c.finetune.transfer = true;
      auto utts = load("train");
      std::optional<ckpt::Checkpoint> init;
      if (!init_path.empty()) init = ckpt::Load(init_path);
      auto r = pipeline::RunFinetune(c, utts, init ? &*init : nullptr);
      EnsureParent(out);
      ckpt::Save(r.checkpoint, out);
      if (!log_path.empty()) corpus::detail::WriteFile(log_path, finetune::LogCsv(r.log));
      std::vector<fs::path> inputs{config_path, manifest};
      if (init) inputs.push_back(init_path);
      WriteMeta(out, "finetune", c, inputs,
                {{"freeze_steps", r.checkpoint.metadata["freeze_steps"]}, {"transfer", c.finetune.transfer}});
    } else if (*ada) {
      config::RunConfig c = cfg;
      if (!speaker.empty()) c.adapt.speaker = speaker;
      if (c.adapt.speaker.empty()) throw ConfigError("adapt: no speaker given (--speaker or adapt.speaker)");
      const ckpt::Checkpoint si = ckpt::LoadStage(init_path, ckpt::Stage::kSi);
      auto r = pipeline::RunAdapt(c, load("train"), si);
      fs::create_directories(out_dir);
      const fs::path path = fs::path(out_dir) / ("sd_" + c.adapt.speaker + ".ckpt");
      ckpt::Save(r.checkpoint, path);
      corpus::detail::WriteFile(fs::path(out_dir) / ("sd_" + c.adapt.speaker + ".log.csv"),
                                adapt::LogCsv(r.result.log));
      WriteMeta(path, "adapt", c, {config_path, manifest, init_path},
                {{"speaker_id", c.adapt.speaker}, {"parent_digest", r.checkpoint.metadata["parent_digest"]}});
    } else if (*dec) {
      const auto paths = SplitList(models);
      const auto view_names = SplitList(views);
      if (!view_names.empty() && view_names.size() != paths.size())
        throw ConfigError("decode: --views needs one entry per model");
      std::vector<pipeline::LoadedModel> loaded;
      std::vector<fs::path> inputs{config_path, manifest};
      for (std::size_t i = 0; i < paths.size(); ++i) {
        std::optional<model::View> v;
        if (!view_names.empty()) v = model::ParseView(view_names[i]);
        loaded.push_back(pipeline::LoadModel(ckpt::Load(paths[i]), fs::path(paths[i]).filename().string(), v));
        inputs.push_back(paths[i]);
      }
      auto records = pipeline::DecodeAll(loaded, load("test"), cfg.decode);
      EnsureParent(out);
      corpus::detail::WriteFile(out, pipeline::DecodeJsonl(records));
      WriteMeta(out, "decode", cfg, inputs);
    } else if (*sco) {
      auto scores = pipeline::ScoreAll(corpus::LoadCorpus(manifest), pipeline::ReadHypotheses(hyps_path));
      auto rows = metrics::SpeakerReport(scores, cfg.score.bootstrap_samples, cfg.score.level, cfg.score.seed);
      EnsureParent(out);
      corpus::detail::WriteFile(out, metrics::ReportCsv(rows));
      WriteMeta(out, "score", cfg, {config_path, manifest, hyps_path});
      spdlog::info("CER {:.2f}% [{:.2f}, {:.2f}] over {} utterances", rows.back().cer, rows.back().ci.low,
                   rows.back().ci.high, rows.back().num_utts);
    }
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const StageMismatchError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}

}  // namespace avsd::cli
