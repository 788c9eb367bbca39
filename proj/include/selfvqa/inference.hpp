// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "selfvqa/corpus.hpp"
#include "selfvqa/metrics.hpp"
#include "selfvqa/prompts.hpp"
#include "selfvqa/selfplay.hpp"
#include "selfvqa/util/hash.hpp"
#include "selfvqa/util/parallel.hpp"
#include "selfvqa/util/random.hpp"
#include "selfvqa/util/text.hpp"

namespace selfvqa::inference {

// ---------------------------------------------------------------------------
// Embeddings

// Sparse vector sorted by index. Dense embedders use indices 0..d-1.
using Embedding = std::vector<std::pair<std::uint64_t, double>>;

inline double dot(const Embedding& a, const Embedding& b) {
  double s = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i].first == b[j].first) s += a[i++].second * b[j++].second;
    else if (a[i].first < b[j].first) ++i;
    else ++j;
  }
  return s;
}

inline double cosine(const Embedding& a, const Embedding& b) {
  const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

inline Embedding from_counts(const std::map<std::uint64_t, double>& counts) {
  return Embedding(counts.begin(), counts.end());
}

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual Embedding embed(std::string_view text, std::string_view image_ref) const = 0;
};

// Character 3-gram term frequencies over the lowercased question.
class TrigramEmbedder final : public Embedder {
 public:
  Embedding embed(std::string_view text, std::string_view) const override {
    auto s = text::lower(text::trim(text));
    std::map<std::uint64_t, double> counts;
    if (s.size() < 3) {
      if (!s.empty()) counts[hash::fnv1a64(s)] += 1.0;
    } else {
      for (std::size_t i = 0; i + 3 <= s.size(); ++i) counts[hash::fnv1a64(std::string_view(s).substr(i, 3))] += 1.0;
    }
    return from_counts(counts);
  }
};

// ---------------------------------------------------------------------------
// Code complexity

namespace detail {

// Replaces comments and string literals (including triple-quoted ones) with
// spaces, keeping line structure.
inline std::string strip_comments_and_strings(std::string_view src) {
  std::string out;
  out.reserve(src.size());
  std::size_t i = 0;
  while (i < src.size()) {
    char c = src[i];
    if (c == '#') {
      while (i < src.size() && src[i] != '\n') {
        out.push_back(' ');
        ++i;
      }
      continue;
    }
    if (c == '"' || c == '\'') {
      const bool triple = i + 2 < src.size() && src[i + 1] == c && src[i + 2] == c;
      const std::size_t qlen = triple ? 3 : 1;
      out.append(qlen, ' ');
      i += qlen;
      while (i < src.size()) {
        if (src[i] == '\\' && i + 1 < src.size()) {
          out.append(2, ' ');
          i += 2;
          continue;
        }
        if (!triple && src[i] == '\n') break;
        if (src[i] == c && (!triple || (i + 2 < src.size() && src[i + 1] == c && src[i + 2] == c))) {
          out.append(qlen, ' ');
          i += qlen;
          break;
        }
        out.push_back(src[i] == '\n' ? '\n' : ' ');
        ++i;
      }
      continue;
    }
    out.push_back(c);
    ++i;
  }
  return out;
}

inline bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
inline bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

}  // namespace detail

// Control-flow keywords that add branching, looping or comprehension.
inline const std::set<std::string, std::less<>>& control_flow_keywords() {
  static const std::set<std::string, std::less<>> kw{"if", "elif", "else", "for", "while", "try", "except"};
  return kw;
}

// Lexical estimate: control-flow keywords plus call sites (an identifier
// directly followed by "("), ignoring comments, strings, definitions and
// keyword-led parentheses.
inline std::size_t code_complexity(std::string_view program) {
  static const std::set<std::string, std::less<>> kNotCalls{
      "if", "elif", "while", "for", "in", "and", "or", "not", "return", "lambda", "yield", "assert",
      "del", "is", "except", "with", "else", "def", "class", "import", "from", "as", "raise"};
  const auto code = detail::strip_comments_and_strings(program);
  std::size_t score = 0;
  std::string prev_word;
  std::size_t i = 0;
  while (i < code.size()) {
    if (!detail::ident_start(code[i]) || (i > 0 && detail::ident_char(code[i - 1]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < code.size() && detail::ident_char(code[j])) ++j;
    std::string word = code.substr(i, j - i);
    if (control_flow_keywords().count(word)) ++score;
    std::size_t k = j;
    while (k < code.size() && (code[k] == ' ' || code[k] == '\t')) ++k;
    const bool defined = prev_word == "def" || prev_word == "class";
    if (k < code.size() && code[k] == '(' && !kNotCalls.count(word) && !defined) ++score;
    prev_word = std::move(word);
    i = j;
  }
  return score;
}

// ---------------------------------------------------------------------------
// Exemplar sampling

struct SamplingStrategy {
  enum class Kind { UniformRandom, EmbeddingSimilarity, ComplexityCluster };
  Kind kind = Kind::UniformRandom;
  std::shared_ptr<const Embedder> embedder;
  std::size_t k = 8;
  std::uint64_t seed = 0;

  void validate() const {
    if (k == 0) throw std::invalid_argument("sampling strategy needs k >= 1");
    if (kind != Kind::UniformRandom && !embedder) throw std::invalid_argument("sampling strategy needs an embedder");
  }
};

inline std::string_view to_string(SamplingStrategy::Kind k) {
  switch (k) {
    case SamplingStrategy::Kind::UniformRandom: return "uniform";
    case SamplingStrategy::Kind::EmbeddingSimilarity: return "similarity";
    case SamplingStrategy::Kind::ComplexityCluster: return "complexity_cluster";
  }
  return "?";
}

inline std::optional<SamplingStrategy::Kind> parse_strategy(std::string_view s) {
  if (s == "uniform" || s == "random") return SamplingStrategy::Kind::UniformRandom;
  if (s == "similarity" || s == "embedding") return SamplingStrategy::Kind::EmbeddingSimilarity;
  if (s == "complexity_cluster" || s == "complexity") return SamplingStrategy::Kind::ComplexityCluster;
  return std::nullopt;
}

namespace detail {

inline std::vector<std::size_t> rank_by_similarity(const std::vector<Embedding>& embs, const Embedding& target,
                                                   std::span<const std::size_t> candidates) {
  std::vector<std::pair<double, std::size_t>> scored;
  for (auto i : candidates) scored.emplace_back(cosine(target, embs[i]), i);
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::size_t> out;
  for (const auto& s : scored) out.push_back(s.second);
  return out;
}

}  // namespace detail

/**
 * Picks k exemplars from a pool for one example.
 *
 * A pool smaller than k is returned whole. Similarity ranks by cosine between
 * question embeddings, ties kept in pool order. Complexity clustering splits
 * the pool into complexity tertiles, picks the tertile whose centroid is
 * closest to the example, samples inside it and tops up from the remaining
 * exemplars by similarity when the tertile is short.
 */
inline std::vector<Exemplar> sample_exemplars(const FewShotPool& pool, const VqaExample& example,
                                              const SamplingStrategy& strategy) {
  strategy.validate();
  if (pool.size() <= strategy.k) return pool.exemplars;
  rng::Engine eng(hash::derive_seed(strategy.seed, pool.id(), example.id));
  const auto pick = [&](std::span<const std::size_t> idx) {
    std::vector<Exemplar> out;
    for (auto i : idx) out.push_back(pool.exemplars[i]);
    return out;
  };

  if (strategy.kind == SamplingStrategy::Kind::UniformRandom) {
    return pick(rng::sample_indices(pool.size(), strategy.k, eng));
  }

  std::vector<Embedding> embs;
  embs.reserve(pool.size());
  for (const auto& e : pool.exemplars) embs.push_back(strategy.embedder->embed(e.question, e.image_ref));
  const auto target = strategy.embedder->embed(example.question, example.image_ref);
  std::vector<std::size_t> all(pool.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  if (strategy.kind == SamplingStrategy::Kind::EmbeddingSimilarity) {
    auto ranked = detail::rank_by_similarity(embs, target, all);
    ranked.resize(strategy.k);
    return pick(ranked);
  }

  // Complexity tertiles by rank, stable on pool order.
  std::vector<std::pair<std::size_t, std::size_t>> by_complexity;
  for (std::size_t i = 0; i < pool.size(); ++i) by_complexity.emplace_back(code_complexity(pool.exemplars[i].program), i);
  std::stable_sort(by_complexity.begin(), by_complexity.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::vector<std::size_t>> buckets(3);
  for (std::size_t r = 0; r < by_complexity.size(); ++r) buckets[r * 3 / by_complexity.size()].push_back(by_complexity[r].second);

  std::size_t best_bucket = 0;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    if (buckets[b].empty()) continue;
    std::map<std::uint64_t, double> centroid;
    for (auto i : buckets[b]) {
      for (const auto& [dim, v] : embs[i]) centroid[dim] += v / static_cast<double>(buckets[b].size());
    }
    const double sim = cosine(target, from_counts(centroid));
    if (sim > best_sim) {
      best_sim = sim;
      best_bucket = b;
    }
  }
  auto& bucket = buckets[best_bucket];
  std::vector<std::size_t> chosen;
  for (auto r : rng::sample_indices(bucket.size(), strategy.k, eng)) chosen.push_back(bucket[r]);
  if (chosen.size() < strategy.k) {
    std::vector<std::size_t> rest;
    std::set<std::size_t> in_bucket(bucket.begin(), bucket.end());
    for (auto i : all) {
      if (!in_bucket.count(i)) rest.push_back(i);
    }
    for (auto i : detail::rank_by_similarity(embs, target, rest)) {
      if (chosen.size() >= strategy.k) break;
      chosen.push_back(i);
    }
  }
  return pick(chosen);
}

// ---------------------------------------------------------------------------
// Candidates and aggregation

struct CandidateAnswer {
  std::size_t pool_id = 0;  // 1-based position in the configured pool order
  std::string pool_name;
  std::optional<std::string> answer;
  RunStatus status = RunStatus::Error;
  std::optional<GuestRunResult> run;  // absent for direct answers
  std::string program;
  std::optional<std::string> error;

  static CandidateAnswer of(std::size_t pool_id, std::optional<std::string> answer) {
    CandidateAnswer c;
    c.pool_id = pool_id;
    c.pool_name = "pool" + std::to_string(pool_id);
    c.answer = std::move(answer);
    c.status = c.answer ? RunStatus::Ok : RunStatus::Error;
    return c;
  }
};

inline nlohmann::ordered_json to_json(const CandidateAnswer& c) {
  nlohmann::ordered_json j;
  j["pool_id"] = c.pool_id;
  j["pool"] = c.pool_name;
  j["answer"] = c.answer ? nlohmann::json(*c.answer) : nlohmann::json(nullptr);
  j["status"] = to_string(c.status);
  if (c.run) {
    if (c.run->error_type) j["error_type"] = *c.run->error_type;
    j["tool_calls"] = c.run->tool_calls.size();
  }
  if (c.error) j["error"] = *c.error;
  return j;
}

enum class Aggregator { Majority, Judge, Oracle };

inline std::string_view to_string(Aggregator a) {
  switch (a) {
    case Aggregator::Majority: return "Majority";
    case Aggregator::Judge: return "VLM-Judge";
    case Aggregator::Oracle: return "Oracle";
  }
  return "?";
}

inline std::optional<Aggregator> parse_aggregator(std::string_view s) {
  auto l = text::lower(s);
  if (l == "majority") return Aggregator::Majority;
  if (l == "judge" || l == "vlm-judge") return Aggregator::Judge;
  if (l == "oracle") return Aggregator::Oracle;
  return std::nullopt;
}

struct AggregateDecision {
  std::string final_answer;
  Aggregator method = Aggregator::Majority;
  std::size_t chosen_pool_id = 0;
  std::optional<std::string> rationale;  // judge reply
  std::optional<std::string> fallback;   // why the judge fell back to majority
  bool tie = false;                      // majority plurality was shared
  bool is_upper_bound = false;           // oracle decisions
  bool correct_present = true;           // oracle: some candidate matched gold
};

inline nlohmann::ordered_json to_json(const AggregateDecision& d) {
  nlohmann::ordered_json j;
  j["method"] = to_string(d.method);
  j["answer"] = d.final_answer;
  j["pool_id"] = d.chosen_pool_id;
  if (d.fallback) j["fallback"] = *d.fallback;
  if (d.tie) j["tie"] = true;
  if (d.method == Aggregator::Oracle) j["correct_present"] = d.correct_present;
  return j;
}

class AggregationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Voting key: trimmed, lowercased, and numbers rendered canonically.
inline std::string normalize_answer(std::string_view answer) {
  auto s = text::lower(text::trim(answer));
  if (auto v = metrics::parse_numeric(s)) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, *v);
    if (ec == std::errc()) return std::string(buf, ptr);
  }
  return s;
}

// Plurality over normalized answers; ties go to the lowest pool id and the
// answer text returned is that candidate's own.
inline AggregateDecision majority_vote(std::span<const CandidateAnswer> candidates) {
  struct Tally {
    std::size_t votes = 0;
    std::size_t first_pool = std::numeric_limits<std::size_t>::max();
    const CandidateAnswer* first = nullptr;
  };
  std::map<std::string, Tally> tallies;
  for (const auto& c : candidates) {
    if (!c.answer) continue;
    auto& t = tallies[normalize_answer(*c.answer)];
    ++t.votes;
    if (c.pool_id < t.first_pool) {
      t.first_pool = c.pool_id;
      t.first = &c;
    }
  }
  if (tallies.empty()) throw AggregationError("majority_vote: no candidate produced an answer");
  const Tally* best = nullptr;
  std::size_t at_top = 0;
  for (const auto& [key, t] : tallies) {
    if (!best || t.votes > best->votes || (t.votes == best->votes && t.first_pool < best->first_pool)) best = &t;
  }
  for (const auto& [key, t] : tallies) at_top += t.votes == best->votes ? 1 : 0;
  AggregateDecision d;
  d.method = Aggregator::Majority;
  d.final_answer = *best->first->answer;
  d.chosen_pool_id = best->first->pool_id;
  d.tie = at_top > 1;
  return d;
}

// Last "Final Choice: Answer N" in a judge reply, tolerant of case and
// spacing.
inline std::optional<std::size_t> parse_judge_choice(std::string_view reply) {
  static const std::regex kChoice(R"(final\s*choice\s*:?\s*answer\s*(\d+))", std::regex::icase);
  std::optional<std::size_t> last;
  const std::string s(reply);
  for (auto it = std::sregex_iterator(s.begin(), s.end(), kChoice); it != std::sregex_iterator(); ++it) {
    const auto digits = (*it)[1].str();
    std::size_t n = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), n);
    last = ec == std::errc() ? std::optional<std::size_t>(n) : std::optional<std::size_t>(0);
  }
  return last;
}

// Asks the judge model to pick among present answers (numbered in pool
// order). Unparsable or out-of-range replies and backend failures fall back to
// majority, with the cause recorded.
inline AggregateDecision judge_select(EngineContext& ctx, const VqaExample& example,
                                      std::span<const CandidateAnswer> candidates, const std::string& judge_backend) {
  std::vector<const CandidateAnswer*> present;
  std::vector<std::string> answers;
  for (const auto& c : candidates) {
    if (!c.answer) continue;
    present.push_back(&c);
    answers.push_back(*c.answer);
  }
  if (present.empty()) throw AggregationError("judge_select: no candidate produced an answer");

  auto fallback = [&](std::string cause, std::optional<std::string> reply) {
    auto d = majority_vote(candidates);
    d.method = Aggregator::Judge;
    d.fallback = std::move(cause);
    d.rationale = std::move(reply);
    return d;
  };

  std::string reply;
  try {
    gw::ModelRequest req;
    req.parts = ctx.prompts.render_judge(example, answers);
    req.role = gw::Role::Judge;
    req.sampling = {0.0, 1, 2048};
    reply = ctx.gateway.cached_generate(judge_backend, req).candidates.front();
  } catch (const std::exception& e) {
    return fallback(std::string("judge backend failed: ") + e.what(), std::nullopt);
  }
  auto choice = parse_judge_choice(reply);
  if (!choice) return fallback("no 'Final Choice: Answer N' in judge reply", reply);
  if (*choice < 1 || *choice > present.size()) {
    return fallback("judge chose answer " + std::to_string(*choice) + " of " + std::to_string(present.size()), reply);
  }
  AggregateDecision d;
  d.method = Aggregator::Judge;
  d.final_answer = *present[*choice - 1]->answer;
  d.chosen_pool_id = present[*choice - 1]->pool_id;
  d.rationale = std::move(reply);
  return d;
}

// Upper bound: the best-scoring correct candidate, earliest pool on ties, else
// the first present answer. Under relaxed accuracy this is the first correct
// candidate; under ANLS it also keeps the oracle at or above every pool.
inline AggregateDecision oracle_select(std::span<const CandidateAnswer> candidates,
                                       std::span<const std::string> gold_answers, MetricKind kind) {
  if (gold_answers.empty()) throw AggregationError("oracle_select: gold answers required");
  const CandidateAnswer* first_present = nullptr;
  const CandidateAnswer* best = nullptr;
  double best_score = 0.0;
  for (const auto& c : candidates) {
    if (!c.answer) continue;
    if (!first_present) first_present = &c;
    if (!metrics::is_correct(*c.answer, gold_answers, kind)) continue;
    const double score = metrics::score_answer(*c.answer, gold_answers, kind);
    if (!best || score > best_score) {
      best = &c;
      best_score = score;
    }
  }
  if (!first_present) throw AggregationError("oracle_select: no candidate produced an answer");
  AggregateDecision d;
  d.method = Aggregator::Oracle;
  d.is_upper_bound = true;
  d.correct_present = best != nullptr;
  const auto* chosen = best ? best : first_present;
  d.final_answer = *chosen->answer;
  d.chosen_pool_id = chosen->pool_id;
  return d;
}

// ---------------------------------------------------------------------------
// Inference runs

struct InferenceConfig {
  SamplingStrategy strategy;
  double temperature = 0.0;
  int max_output = 2048;
  std::size_t parallelism = 1;
  std::string judge_backend;
};

// One generation with a k-shot prompt from the pool, then execution (or a
// direct answer). Failures are recorded in the candidate, never thrown.
inline CandidateAnswer infer_one(EngineContext& ctx, const TaskSpec& task, const VqaExample& example,
                                 const FewShotPool& pool, std::size_t pool_id, const InferenceConfig& cfg) {
  CandidateAnswer cand;
  cand.pool_id = pool_id;
  cand.pool_name = pool.id();
  try {
    auto sample = pool.empty() ? std::vector<Exemplar>{} : sample_exemplars(pool, example, cfg.strategy);
    gw::ModelRequest req;
    req.parts = sample.empty() ? ctx.prompts.render_zero_shot(pool.seed, example)
                               : ctx.prompts.render_few_shot(sample, example);
    req.role = gw::Role::Orchestrator;
    req.sampling = {cfg.temperature, 1, cfg.max_output};
    auto reply = ctx.gateway.cached_generate(ctx.orchestrator, req).candidates.front();
    if (!pool.seed.runs_code()) {
      cand.answer = std::string(text::trim(reply));
      cand.status = RunStatus::Ok;
      return cand;
    }
    cand.program = extract_program(reply);
    auto run = execute_program(ctx, task, example, pool.seed, cand.program, 0);
    cand.status = run.status;
    if (run.passed()) cand.answer = run.answer;
    cand.run = std::move(run);
  } catch (const std::exception& e) {
    cand.status = RunStatus::Error;
    cand.answer.reset();
    cand.error = e.what();
  }
  return cand;
}

struct ExampleRecord {
  const VqaExample* example = nullptr;
  std::vector<CandidateAnswer> candidates;
  std::map<Aggregator, std::optional<AggregateDecision>> decisions;  // nullopt: nothing to aggregate
};

struct MixedEvaluation {
  std::vector<metrics::MetricReport> per_pool;
  std::map<Aggregator, metrics::MetricReport> aggregated;
  std::map<Aggregator, std::size_t> tie_counts;
  std::map<Aggregator, std::size_t> fallback_counts;
  std::vector<ExampleRecord> records;
  bool labeled = true;

  double best_single() const {
    double best = 0.0;
    for (const auto& r : per_pool) best = std::max(best, r.metric_value);
    return best;
  }

  // Relative change against the best single pool; absent when that is zero.
  std::optional<double> delta(Aggregator a) const {
    auto it = aggregated.find(a);
    const double base = best_single();
    if (it == aggregated.end() || base == 0.0) return std::nullopt;
    return (it->second.metric_value - base) / base;
  }
};

inline metrics::RunOutcome decision_outcome(const std::optional<AggregateDecision>& d) {
  if (!d) return {RunStatus::Error, std::nullopt};
  return metrics::RunOutcome::direct(d->final_answer);
}

/**
 * Runs every pool on every example, aggregates with each requested method and
 * scores per-pool and aggregated answers. Unlabeled splits yield candidates
 * and decisions only; the oracle is refused on them.
 */
inline MixedEvaluation evaluate_mixed(EngineContext& ctx, const TaskSpec& task, std::span<const FewShotPool> pools,
                                      std::span<const VqaExample> examples, Split split,
                                      std::span<const Aggregator> aggregators, const InferenceConfig& cfg) {
  if (pools.empty()) throw std::invalid_argument("evaluate_mixed: no pools configured");
  if (examples.empty()) throw std::invalid_argument("evaluate_mixed: no examples");
  MixedEvaluation out;
  out.labeled = std::all_of(examples.begin(), examples.end(), [](const auto& e) { return e.labeled(); });
  const bool wants_oracle = std::find(aggregators.begin(), aggregators.end(), Aggregator::Oracle) != aggregators.end();
  if (wants_oracle && !out.labeled) {
    throw AggregationError("oracle aggregation needs gold labels; split " + std::string(to_string(split)) +
                           " of task " + task.name + " is unlabeled");
  }
  const bool wants_judge = std::find(aggregators.begin(), aggregators.end(), Aggregator::Judge) != aggregators.end();
  if (wants_judge && cfg.judge_backend.empty()) throw AggregationError("judge aggregation needs a judge backend");

  out.records.resize(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    out.records[i].example = &examples[i];
    out.records[i].candidates.resize(pools.size());
  }
  parallel_for(examples.size() * pools.size(), cfg.parallelism, [&](std::size_t job) {
    const auto e = job / pools.size(), p = job % pools.size();
    out.records[e].candidates[p] = infer_one(ctx, task, examples[e], pools[p], p + 1, cfg);
  });
  parallel_for(examples.size(), cfg.parallelism, [&](std::size_t e) {
    auto& rec = out.records[e];
    for (auto agg : aggregators) {
      const bool any = std::any_of(rec.candidates.begin(), rec.candidates.end(), [](const auto& c) { return c.answer.has_value(); });
      if (!any) {
        rec.decisions[agg] = std::nullopt;
        continue;
      }
      switch (agg) {
        case Aggregator::Majority: rec.decisions[agg] = majority_vote(rec.candidates); break;
        case Aggregator::Judge: rec.decisions[agg] = judge_select(ctx, *rec.example, rec.candidates, cfg.judge_backend); break;
        case Aggregator::Oracle:
          rec.decisions[agg] = oracle_select(rec.candidates, rec.example->gold_answers, task.metric_kind);
          break;
      }
    }
  });

  for (auto agg : aggregators) {
    for (const auto& rec : out.records) {
      const auto& d = rec.decisions.at(agg);
      if (d && d->tie) ++out.tie_counts[agg];
      if (d && d->fallback) ++out.fallback_counts[agg];
    }
  }
  if (!out.labeled) return out;

  for (std::size_t p = 0; p < pools.size(); ++p) {
    std::vector<metrics::ScoredItem> items;
    for (const auto& rec : out.records) {
      const auto& c = rec.candidates[p];
      items.push_back({rec.example, {c.status, c.answer}});
    }
    out.per_pool.push_back(metrics::aggregate_report(items, task.metric_kind, task.name, split, pools[p].id()));
  }
  for (auto agg : aggregators) {
    std::vector<metrics::ScoredItem> items;
    for (const auto& rec : out.records) items.push_back({rec.example, decision_outcome(rec.decisions.at(agg))});
    out.aggregated[agg] = metrics::aggregate_report(items, task.metric_kind, task.name, split,
                                                    "Mixed [Agg=" + std::string(to_string(agg)) + "]");
  }
  return out;
}

inline std::string delta_text(std::optional<double> d) {
  if (!d) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.1f%%", *d * 100.0);
  return buf;
}

// Summary rows: each pool, then each aggregator with its change against the
// best single pool.
inline std::string summary_csv(const MixedEvaluation& ev) {
  std::string out = metrics::MetricReport::csv_header() + ",delta_pct,ties,fallbacks\n";
  for (const auto& r : ev.per_pool) out += r.csv_row() + ",,,\n";
  for (const auto& [agg, r] : ev.aggregated) {
    auto ties = ev.tie_counts.count(agg) ? ev.tie_counts.at(agg) : 0;
    auto falls = ev.fallback_counts.count(agg) ? ev.fallback_counts.at(agg) : 0;
    out += r.csv_row() + "," + delta_text(ev.delta(agg)) + "," + std::to_string(ties) + "," + std::to_string(falls) + "\n";
  }
  return out;
}

inline std::string summary_markdown(const MixedEvaluation& ev) {
  std::string out = "| task | split | label | metric [CPR%] | Δ% | n |\n|---|---|---|---|---|---|\n";
  auto row = [&](const metrics::MetricReport& r, const std::string& delta) {
    out += "| " + r.task + " | " + std::string(to_string(r.split)) + " | " + r.label + " | " +
           metrics::MetricReport::percent(r.metric_value) + " [" + metrics::MetricReport::percent(r.code_pass_rate) +
           "] | " + delta + " | " + std::to_string(r.n_examples) + " |\n";
  };
  for (const auto& r : ev.per_pool) row(r, "");
  for (const auto& [agg, r] : ev.aggregated) row(r, delta_text(ev.delta(agg)));
  return out;
}

}  // namespace selfvqa::inference
