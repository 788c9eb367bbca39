// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <optional>
#include <regex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "selfvqa/corpus.hpp"
#include "selfvqa/run_result.hpp"
#include "selfvqa/util/text.hpp"

namespace selfvqa::metrics {

// Strips whitespace, a leading "$", a trailing "%" and "," separators, then
// parses a plain decimal. Anything else is not a number.
inline std::optional<double> parse_numeric(std::string_view raw) {
  auto s = text::trim(raw);
  if (!s.empty() && s.front() == '$') s.remove_prefix(1);
  if (!s.empty() && s.back() == '%') s.remove_suffix(1);
  std::string cleaned;
  cleaned.reserve(s.size());
  for (char c : text::trim(s)) {
    if (c != ',') cleaned.push_back(c);
  }
  static const std::regex kDecimal(R"([+-]?(\d+\.?\d*|\.\d+))");
  if (cleaned.empty() || !std::regex_match(cleaned, kDecimal)) return std::nullopt;
  std::string_view digits = cleaned;
  if (digits.front() == '+') digits.remove_prefix(1);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
  if (ec != std::errc() || ptr != digits.data() + digits.size()) return std::nullopt;
  return value;
}

// Numbers within 5% of the gold value match; a zero gold needs an exact zero.
// Strings match case-insensitively after trimming.
inline bool relaxed_match(std::string_view pred, std::string_view gold) {
  auto p = parse_numeric(pred);
  auto g = parse_numeric(gold);
  if (p && g) {
    if (*g == 0.0) return *p == 0.0;
    return std::abs(*p - *g) <= 0.05 * std::abs(*g);
  }
  return text::lower(text::trim(pred)) == text::lower(text::trim(gold));
}

// Edit distance over code points, unit costs.
inline std::size_t levenshtein(std::u32string_view a, std::u32string_view b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::size_t levenshtein(std::string_view a, std::string_view b) {
  return levenshtein(text::utf8_decode(a), text::utf8_decode(b));
}

inline constexpr double kAnlsThreshold = 0.5;

inline double anls_single(std::string_view pred, std::string_view gold) {
  auto p = text::utf8_decode(text::lower(text::trim(pred)));
  auto g = text::utf8_decode(text::lower(text::trim(gold)));
  const auto longest = std::max(p.size(), g.size());
  if (longest == 0) return 1.0;
  const double nl = static_cast<double>(levenshtein(p, g)) / static_cast<double>(longest);
  return nl < kAnlsThreshold ? 1.0 - nl : 0.0;
}

inline double anls_score(std::string_view pred, std::span<const std::string> golds) {
  if (golds.empty()) throw std::invalid_argument("anls_score: no gold answers");
  double best = 0.0;
  for (const auto& g : golds) best = std::max(best, anls_single(pred, g));
  return best;
}

// Per-example score under the task metric. RA compares against the first gold.
inline double score_answer(std::string_view pred, std::span<const std::string> golds, MetricKind kind) {
  if (golds.empty()) throw std::invalid_argument("score_answer: no gold answers");
  if (kind == MetricKind::RelaxedAccuracy) return relaxed_match(pred, golds.front()) ? 1.0 : 0.0;
  return anls_score(pred, golds);
}

// Binary correctness used for pool promotion and the oracle aggregator.
// For ANLS any surviving per-gold score lies above the 0.5 cutoff.
inline bool is_correct(std::string_view pred, std::span<const std::string> golds, MetricKind kind) {
  if (kind == MetricKind::RelaxedAccuracy) return score_answer(pred, golds, kind) == 1.0;
  return anls_score(pred, golds) > kAnlsThreshold;
}

// One scored example: either a guest run or a direct model answer.
struct RunOutcome {
  RunStatus status = RunStatus::Error;
  std::optional<std::string> answer;

  bool passed() const { return status == RunStatus::Ok && answer.has_value(); }

  static RunOutcome from_run(const GuestRunResult& r) { return {r.status, r.answer}; }
  static RunOutcome direct(std::string answer) { return {RunStatus::Ok, std::move(answer)}; }
};

struct ExampleScore {
  std::string id;
  double score = 0.0;
  RunStatus status = RunStatus::Error;
  bool passed = false;
};

struct MetricReport {
  std::string task;
  Split split = Split::Validation;
  std::string label;  // row name, e.g. a pool id or aggregator
  double metric_value = 0.0;
  double code_pass_rate = 0.0;
  std::size_t n_examples = 0;
  std::vector<ExampleScore> per_example;

  static std::string csv_header() { return "task,split,label,metric_pct,cpr_pct,n"; }

  std::string csv_row() const {
    return text::csv_escape(task) + "," + std::string(to_string(split)) + "," + text::csv_escape(label) + "," +
           percent(metric_value) + "," + percent(code_pass_rate) + "," + std::to_string(n_examples);
  }

  static std::string markdown_header() {
    return "| task | split | label | metric% | CPR% | n |\n|---|---|---|---|---|---|";
  }

  std::string markdown_row() const {
    return "| " + task + " | " + std::string(to_string(split)) + " | " + label + " | " + percent(metric_value) +
           " | " + percent(code_pass_rate) + " | " + std::to_string(n_examples) + " |";
  }

  static std::string percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", fraction * 100.0);
    return buf;
  }
};

struct ScoredItem {
  const VqaExample* example = nullptr;
  RunOutcome outcome;
};

// Mean per-example score and code pass rate. Failed runs score zero, so for
// relaxed accuracy metric_value <= code_pass_rate always holds.
inline MetricReport aggregate_report(std::span<const ScoredItem> results, MetricKind kind, std::string task = {},
                                     Split split = Split::Validation, std::string label = {}) {
  if (results.empty()) throw std::invalid_argument("aggregate_report: no results");
  MetricReport rep;
  rep.task = std::move(task);
  rep.split = split;
  rep.label = std::move(label);
  double total = 0.0;
  std::size_t passed = 0;
  for (const auto& item : results) {
    ExampleScore es;
    es.id = item.example->id;
    es.status = item.outcome.status;
    es.passed = item.outcome.passed();
    if (es.passed) {
      ++passed;
      es.score = score_answer(*item.outcome.answer, item.example->gold_answers, kind);
    }
    total += es.score;
    rep.per_example.push_back(std::move(es));
  }
  rep.n_examples = results.size();
  rep.metric_value = total / static_cast<double>(results.size());
  rep.code_pass_rate = static_cast<double>(passed) / static_cast<double>(results.size());
  return rep;
}

}  // namespace selfvqa::metrics
