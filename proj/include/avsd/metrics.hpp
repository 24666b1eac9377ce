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

// Character error rate, bootstrap intervals and per-speaker reports.

#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "avsd/error.hpp"
#include "avsd/rng.hpp"

namespace avsd::metrics {

struct EditCounts {
  std::size_t S = 0, I = 0, D = 0;
  std::size_t total() const { return S + I + D; }
  friend bool operator==(const EditCounts&, const EditCounts&) = default;
};

struct UttScore {
  std::string utt_id;
  std::string speaker_id;
  std::size_t S = 0, I = 0, D = 0, N = 0;
};

/// Unit-cost alignment of hyp against ref. On equal cost the backtrace
/// prefers match/substitution, then deletion, then insertion.
template <typename Seq>
EditCounts EditDistance(const Seq& ref, const Seq& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});
  EditCounts c;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++c.S;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++c.D;
      --i;
    } else {
      ++c.I;
      --j;
    }
  }
  return c;
}

template <typename Seq>
UttScore ScoreUtterance(std::string utt_id, std::string speaker_id, const Seq& ref, const Seq& hyp) {
  EditCounts c = EditDistance(ref, hyp);
  return {std::move(utt_id), std::move(speaker_id), c.S, c.I, c.D, ref.size()};
}

/// 100·(ΣS+ΣI+ΣD)/ΣN.
inline double Cer(const std::vector<UttScore>& scores) {
  std::size_t err = 0, n = 0;
  for (const auto& s : scores) {
    err += s.S + s.I + s.D;
    n += s.N;
  }
  if (n == 0) throw ConfigError("cer: total reference length is zero");
  return 100.0 * static_cast<double>(err) / static_cast<double>(n);
}

struct Interval {
  double low = 0.0, high = 0.0;
};

/// Percentile interval of CER over B utterance-level resamples.
inline Interval BootstrapCi(const std::vector<UttScore>& scores, std::size_t B = 10000, double level = 0.95,
                            std::uint64_t seed = 1) {
  if (scores.empty()) throw ConfigError("bootstrap_ci: no scores");
  if (B == 0) throw ConfigError("bootstrap_ci: B must be positive");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap_ci: level must be in (0,1)");
  const std::size_t n = scores.size();
  std::vector<double> cers;
  cers.reserve(B);
  for (std::size_t b = 0; b < B; ++b) {
    Rng rng = Rng::Stream(seed, "bootstrap", b);
    std::size_t err = 0, len = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const UttScore& s = scores[rng.Index(n)];
      err += s.S + s.I + s.D;
      len += s.N;
    }
    cers.push_back(len ? 100.0 * static_cast<double>(err) / static_cast<double>(len) : 0.0);
  }
  std::sort(cers.begin(), cers.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(B - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, B - 1);
    return cers[lo] + (pos - static_cast<double>(lo)) * (cers[hi] - cers[lo]);
  };
  const double tail = (1.0 - level) / 2.0;
  return {quantile(tail), quantile(1.0 - tail)};
}

struct ReportRow {
  std::string speaker_id;
  std::size_t num_utts = 0, N = 0, S = 0, I = 0, D = 0;
  double cer = 0.0;
  Interval ci;
};

/// One row per speaker (sorted by id) followed by "ALL".
inline std::vector<ReportRow> SpeakerReport(const std::vector<UttScore>& scores, std::size_t B = 10000,
                                            double level = 0.95, std::uint64_t seed = 1) {
  std::map<std::string, std::vector<UttScore>> by;
  for (const auto& s : scores) by[s.speaker_id].push_back(s);
  auto row = [&](const std::string& id, const std::vector<UttScore>& group) {
    ReportRow r;
    r.speaker_id = id;
    r.num_utts = group.size();
    for (const auto& s : group) {
      r.N += s.N;
      r.S += s.S;
      r.I += s.I;
      r.D += s.D;
    }
    r.cer = Cer(group);
    r.ci = BootstrapCi(group, B, level, seed);
    return r;
  };
  std::vector<ReportRow> rows;
  for (const auto& [id, group] : by) rows.push_back(row(id, group));
  rows.push_back(row("ALL", scores));
  return rows;
}

inline std::string ReportCsv(const std::vector<ReportRow>& rows) {
  std::string s = "speaker_id,num_utts,N,S,I,D,CER,ci_low,ci_high\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%zu,%zu,%zu,%.4f,%.4f,%.4f\n", r.speaker_id.c_str(), r.num_utts, r.N,
                  r.S, r.I, r.D, r.cer, r.ci.low, r.ci.high);
    s += buf;
  }
  return s;
}

}  // namespace avsd::metrics
