// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "selfvqa/corpus.hpp"
#include "selfvqa/metrics.hpp"
#include "selfvqa/modelgw.hpp"
#include "selfvqa/prompts.hpp"
#include "selfvqa/sandbox.hpp"
#include "selfvqa/util/hash.hpp"
#include "selfvqa/util/io.hpp"
#include "selfvqa/util/parallel.hpp"
#include "selfvqa/util/random.hpp"

namespace selfvqa {

struct TrainConfig {
  std::size_t steps = 3;
  std::vector<std::size_t> shots_schedule{0, 4, 8};
  int n_samples = 4;
  std::size_t refinement_rounds = 2;
  std::uint64_t rng_seed = 0;
  std::size_t worker_parallelism = 1;
  double temperature = 0.7;
  int max_output = 2048;

  // Step i uses shots_schedule[i]; step 0 is always zero-shot.
  void validate() const {
    if (steps == 0) throw std::invalid_argument("train.steps must be >= 1");
    if (shots_schedule.size() < steps) {
      throw std::invalid_argument("train.shots_schedule has " + std::to_string(shots_schedule.size()) +
                                  " entries for " + std::to_string(steps) + " steps");
    }
    if (shots_schedule.front() != 0) throw std::invalid_argument("train.shots_schedule[0] must be 0");
    if (n_samples < 1) throw std::invalid_argument("train.n_samples must be >= 1");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["steps"] = steps;
    j["shots_schedule"] = shots_schedule;
    j["n_samples"] = n_samples;
    j["refinement_rounds"] = refinement_rounds;
    j["rng_seed"] = rng_seed;
    j["temperature"] = temperature;
    j["max_output"] = max_output;
    return j;
  }

  // Worker count does not change results, so it is not part of the hash.
  std::string hash() const { return hash::sha256_hex(to_json().dump()); }
};

struct FewShotPool {
  SeedKind seed;
  std::size_t step_index = 0;
  std::vector<Exemplar> exemplars;
  std::string provenance;

  bool empty() const { return exemplars.empty(); }
  std::size_t size() const { return exemplars.size(); }
  std::string id() const { return seed.id() + "@step" + std::to_string(step_index); }
};

struct StepStats {
  std::size_t step_index = 0;
  std::size_t shots = 0;
  double metric_value = 0.0;
  double code_pass_rate = 0.0;
  std::size_t n_examples = 0;
  std::size_t pool_size_before = 0;
  std::size_t pool_size_after = 0;
  std::size_t refinement_rescues = 0;
  std::optional<std::string> warning;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step_index;
    j["shots"] = shots;
    j["metric"] = metric_value;
    j["code_pass_rate"] = code_pass_rate;
    j["n_examples"] = n_examples;
    j["pool_size_before"] = pool_size_before;
    j["pool_size_after"] = pool_size_after;
    j["refinement_rescues"] = refinement_rescues;
    if (warning) j["warning"] = *warning;
    return j;
  }

  static StepStats from_json(const nlohmann::json& j) {
    StepStats s;
    s.step_index = j.at("step").get<std::size_t>();
    s.shots = j.value("shots", std::size_t{0});
    s.metric_value = j.at("metric").get<double>();
    s.code_pass_rate = j.at("code_pass_rate").get<double>();
    s.n_examples = j.value("n_examples", std::size_t{0});
    s.pool_size_before = j.value("pool_size_before", std::size_t{0});
    s.pool_size_after = j.value("pool_size_after", std::size_t{0});
    s.refinement_rescues = j.value("refinement_rescues", std::size_t{0});
    if (j.contains("warning")) s.warning = j["warning"].get<std::string>();
    return s;
  }
};

class SelfPlayError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything the loop needs to talk to models and run programs.
struct EngineContext {
  gw::Gateway& gateway;
  const PromptRenderer& prompts;
  sandbox::GuestRunner& runner;
  std::string orchestrator;
  ImageStore images;
  sandbox::RunLimits limits;
};

// Bridges ImageObject calls to the seed's tool backend through the gateway.
inline sandbox::ToolHandle make_tool_handle(EngineContext& ctx, std::string tool_backend, std::string image_ref) {
  return [&ctx, tool_backend = std::move(tool_backend), image_ref = std::move(image_ref)](
             ToolMethod method, const std::optional<std::string>& question) {
    gw::ModelRequest req;
    req.parts = ctx.prompts.render_tool_call(method, question.value_or(""), image_ref);
    req.role = gw::Role::Tool;
    req.sampling = {0.0, 1, 256};
    auto resp = ctx.gateway.cached_generate(tool_backend, req);
    return std::string(text::trim(resp.candidates.front()));
  };
}

// Executes one program for an example under the seed's tool policy.
inline GuestRunResult execute_program(EngineContext& ctx, const TaskSpec& task, const VqaExample& example,
                                      const SeedKind& seed, const std::string& program, std::size_t attempt) {
  if (text::trim(program).empty()) return GuestRunResult::error("EmptyProgram", "the model returned no code");
  sandbox::GuestProgram gp{program, task.answer_var, {example.id, seed.id(), attempt}};
  std::optional<sandbox::ToolHandle> tool;
  if (seed.kind == SeedKind::Kind::ToolApi) tool = make_tool_handle(ctx, *seed.tool_backend, example.image_ref);
  return ctx.runner.run(gp, ctx.images.path(example.image_ref).string(), tool ? &*tool : nullptr, ctx.limits);
}

struct SolveOutcome {
  GuestRunResult result;
  std::string program;
  bool rescued = false;  // final success came out of a refinement round
  std::size_t refinement_prompts = 0;
};

/**
 * Samples n candidate programs, runs them in sample order, and refines each
 * failing one up to `refinement_rounds` times. Returns the first candidate
 * whose final run passed, or the last failure.
 */
inline SolveOutcome solve_example(EngineContext& ctx, const TaskSpec& task, const VqaExample& example,
                                  const SeedKind& seed, std::span<const Exemplar> pool_sample, const TrainConfig& cfg) {
  try {
    gw::ModelRequest req;
    req.parts = pool_sample.empty() ? ctx.prompts.render_zero_shot(seed, example)
                                    : ctx.prompts.render_few_shot(pool_sample, example);
    req.sampling = {cfg.temperature, cfg.n_samples, cfg.max_output};
    req.role = gw::Role::Orchestrator;
    auto resp = ctx.gateway.cached_generate(ctx.orchestrator, req);

    if (!seed.runs_code()) {
      SolveOutcome out;
      out.result = GuestRunResult::ok(std::string(text::trim(resp.candidates.front())));
      return out;
    }

    SolveOutcome last;
    std::size_t refinement_prompts = 0;
    for (std::size_t c = 0; c < resp.candidates.size(); ++c) {
      std::string program = extract_program(resp.candidates[c]);
      auto result = execute_program(ctx, task, example, seed, program, 0);
      std::size_t round = 0;
      while (!result.passed() && round < cfg.refinement_rounds) {
        ++round;
        ++refinement_prompts;
        auto cls = classify_error(result);
        gw::ModelRequest fix;
        fix.parts = req.parts;
        auto tail = ctx.prompts.render_refinement(cls, program, result.error_type.value_or(""),
                                                  result.error_trace.value_or(""), task.answer_var);
        fix.parts.insert(fix.parts.end(), tail.begin(), tail.end());
        fix.sampling = {cfg.temperature, 1, cfg.max_output};
        fix.role = gw::Role::Orchestrator;
        program = extract_program(ctx.gateway.cached_generate(ctx.orchestrator, fix).candidates.front());
        result = execute_program(ctx, task, example, seed, program, round);
      }
      last = SolveOutcome{std::move(result), std::move(program), round > 0, refinement_prompts};
      if (last.result.passed()) return last;
    }
    return last;
  } catch (const gw::GatewayError& e) {
    throw SelfPlayError("example " + example.id + ": " + e.what());
  } catch (const sandbox::SandboxError& e) {
    throw SelfPlayError("example " + example.id + ": " + e.what());
  }
}

struct StepResult {
  FewShotPool pool;
  StepStats stats;
  std::vector<SolveOutcome> outcomes;  // parallel to the input examples
};

// Exemplars drawn for one example: shots_schedule[step] distinct entries of
// the previous pool, seeded by (rng_seed, step, seed kind, example id).
inline std::vector<Exemplar> draw_exemplars(const FewShotPool& prev_pool, std::size_t shots, const TrainConfig& cfg,
                                            std::size_t step_index, const SeedKind& seed, const VqaExample& example) {
  if (shots == 0 || prev_pool.empty()) return {};
  rng::Engine eng(hash::derive_seed(cfg.rng_seed, std::to_string(step_index), seed.id(), example.id));
  std::vector<Exemplar> out;
  for (auto i : rng::sample_indices(prev_pool.size(), shots, eng)) out.push_back(prev_pool.exemplars[i]);
  return out;
}

inline StepResult run_training_step(EngineContext& ctx, const TaskSpec& task, const SeedKind& seed,
                                    const FewShotPool& prev_pool, std::span<const VqaExample> examples,
                                    const TrainConfig& cfg, std::size_t step_index) {
  if (examples.empty()) throw SelfPlayError("training step " + std::to_string(step_index) + ": no examples");
  StepResult out;
  out.stats.step_index = step_index;
  out.stats.shots = step_index < cfg.shots_schedule.size() ? cfg.shots_schedule[step_index] : 0;
  out.stats.pool_size_before = prev_pool.size();
  if (step_index >= 1 && prev_pool.empty()) {
    out.stats.warning = "previous pool is empty; step " + std::to_string(step_index) + " ran zero-shot";
  }

  out.outcomes.resize(examples.size());
  parallel_for(examples.size(), cfg.worker_parallelism, [&](std::size_t i) {
    auto sample = draw_exemplars(prev_pool, out.stats.shots, cfg, step_index, seed, examples[i]);
    out.outcomes[i] = solve_example(ctx, task, examples[i], seed, sample, cfg);
  });

  out.pool.seed = seed;
  out.pool.step_index = step_index;
  out.pool.provenance = cfg.hash();
  std::set<std::string> promoted;
  std::vector<metrics::ScoredItem> scored;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    const auto& o = out.outcomes[i];
    scored.push_back({&ex, metrics::RunOutcome::from_run(o.result)});
    if (o.rescued && o.result.passed()) ++out.stats.refinement_rescues;
    if (!o.result.passed() || !ex.labeled()) continue;
    if (!metrics::is_correct(*o.result.answer, ex.gold_answers, task.metric_kind)) continue;
    if (!promoted.insert(ex.id).second) continue;
    out.pool.exemplars.push_back({ex.id, ex.image_ref, ex.question, o.program, *o.result.answer, seed, step_index});
  }
  auto report = metrics::aggregate_report(scored, task.metric_kind, task.name, Split::Train, seed.id());
  out.stats.metric_value = report.metric_value;
  out.stats.code_pass_rate = report.code_pass_rate;
  out.stats.n_examples = report.n_examples;
  out.stats.pool_size_after = out.pool.size();
  return out;
}

/**
 * Persists pools as `<root>/<task>/<seed>/step_<n>/{exemplars.jsonl,manifest.json}`.
 * Files contain no timestamps, so identical runs produce identical bytes.
 */
class PoolStore {
 public:
  explicit PoolStore(std::filesystem::path root) : root_(std::move(root)) {}

  std::filesystem::path dir(const std::string& task, const std::string& seed_id, std::size_t step) const {
    return root_ / task / seed_id / ("step_" + std::to_string(step));
  }

  void save(const std::string& task, const FewShotPool& pool, const std::optional<StepStats>& stats = {}) const {
    auto d = dir(task, pool.seed.id(), pool.step_index);
    std::string lines;
    for (const auto& e : pool.exemplars) lines += to_json(e).dump() + "\n";
    io::write_file(d / "exemplars.jsonl", lines);
    nlohmann::ordered_json m;
    m["task"] = task;
    m["seed"] = pool.seed.id();
    m["step"] = pool.step_index;
    m["provenance"] = pool.provenance;
    m["exemplars"] = pool.size();
    if (stats) m["stats"] = stats->to_json();
    io::write_json(d / "manifest.json", m);
  }

  bool exists(const std::string& task, const std::string& seed_id, std::size_t step) const {
    return std::filesystem::exists(dir(task, seed_id, step) / "manifest.json");
  }

  FewShotPool load(const std::string& task, const std::string& seed_id, std::size_t step) const {
    auto d = dir(task, seed_id, step);
    if (!exists(task, seed_id, step)) {
      throw SelfPlayError("pool not found for task " + task + ", seed " + seed_id + ", step " + std::to_string(step) +
                          " (" + d.string() + ")");
    }
    auto m = io::read_json(d / "manifest.json");
    FewShotPool pool;
    pool.seed = SeedKind::parse(seed_id);
    pool.step_index = step;
    pool.provenance = m.value("provenance", "");
    auto body = io::read_file(d / "exemplars.jsonl");
    for (const auto& line : text::split_lines(body)) {
      if (text::trim(line).empty()) continue;
      pool.exemplars.push_back(exemplar_from_json(nlohmann::json::parse(line)));
    }
    return pool;
  }

  std::optional<StepStats> load_stats(const std::string& task, const std::string& seed_id, std::size_t step) const {
    auto m = io::read_json(dir(task, seed_id, step) / "manifest.json");
    if (!m.contains("stats")) return std::nullopt;
    return StepStats::from_json(m["stats"]);
  }

  // Highest persisted step for a seed, if any.
  std::optional<std::size_t> last_step(const std::string& task, const std::string& seed_id) const {
    std::optional<std::size_t> best;
    auto d = root_ / task / seed_id;
    std::error_code ec;
    if (!std::filesystem::is_directory(d, ec)) return best;
    for (const auto& entry : std::filesystem::directory_iterator(d)) {
      auto name = entry.path().filename().string();
      if (!text::starts_with(name, "step_")) continue;
      auto n = static_cast<std::size_t>(std::stoul(name.substr(5)));
      if (!best || n > *best) best = n;
    }
    return best;
  }

  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

using TrainingHistory = std::vector<std::pair<FewShotPool, StepStats>>;

// Runs steps 0..steps-1 for each seed; every step consumes the pool produced
// by the step immediately before it.
inline std::map<std::string, TrainingHistory> run_training(EngineContext& ctx, const TaskSpec& task,
                                                           std::span<const SeedKind> seeds,
                                                           std::span<const VqaExample> train_examples,
                                                           const TrainConfig& cfg, const PoolStore* store = nullptr) {
  cfg.validate();
  std::map<std::string, TrainingHistory> out;
  for (const auto& seed : seeds) {
    FewShotPool prev;
    prev.seed = seed;
    auto& history = out[seed.id()];
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      StepResult r;
      try {
        r = run_training_step(ctx, task, seed, prev, train_examples, cfg, step);
      } catch (const std::exception& e) {
        throw SelfPlayError("seed " + seed.id() + ", step " + std::to_string(step) + ": " + e.what());
      }
      if (store) store->save(task.name, r.pool, r.stats);
      history.emplace_back(r.pool, r.stats);
      prev = std::move(r.pool);
    }
  }
  return out;
}

// The direct-QA pool: labeled training examples used verbatim as
// question/answer exemplars, no code.
inline FewShotPool make_direct_pool(std::span<const VqaExample> train_examples, std::size_t n, std::uint64_t seed,
                                    std::string provenance = {}) {
  std::vector<VqaExample> labeled;
  for (const auto& ex : train_examples) {
    if (ex.labeled()) labeled.push_back(ex);
  }
  auto chosen = n == 0 ? labeled : sample_subset(labeled, n, seed);
  FewShotPool pool;
  pool.seed = SeedKind::direct();
  pool.step_index = 0;
  pool.provenance = std::move(provenance);
  for (const auto& ex : chosen) {
    pool.exemplars.push_back({ex.id, ex.image_ref, ex.question, "", ex.gold_answers.front(), pool.seed, 0});
  }
  return pool;
}

inline std::string step_label(const StepStats& s) {
  return std::to_string(s.shots) + "-shot [Step " + std::to_string(s.step_index) + "]";
}

inline std::string stats_csv(const std::string& task, const std::map<std::string, TrainingHistory>& runs) {
  std::string out =
      "task,seed,step,shots,metric_pct,cpr_pct,n,pool_size_before,pool_size_after,refinement_rescues\n";
  for (const auto& [seed_id, history] : runs) {
    for (const auto& [pool, s] : history) {
      out += text::csv_escape(task) + "," + text::csv_escape(seed_id) + "," + std::to_string(s.step_index) + "," +
             std::to_string(s.shots) + "," + metrics::MetricReport::percent(s.metric_value) + "," +
             metrics::MetricReport::percent(s.code_pass_rate) + "," + std::to_string(s.n_examples) + "," +
             std::to_string(s.pool_size_before) + "," + std::to_string(s.pool_size_after) + "," +
             std::to_string(s.refinement_rescues) + "\n";
    }
  }
  return out;
}

// "metric [CPR]" cells, one row per step label and one column per seed.
inline std::string stats_markdown(const std::string& task, const std::map<std::string, TrainingHistory>& runs) {
  std::string out = "| " + task + " |";
  std::string sep = "|---|";
  for (const auto& [seed_id, history] : runs) {
    out += " " + seed_id + " |";
    sep += "---|";
  }
  out += "\n" + sep + "\n";
  std::size_t rows = 0;
  for (const auto& [seed_id, history] : runs) rows = std::max(rows, history.size());
  for (std::size_t i = 0; i < rows; ++i) {
    std::string label;
    std::string cells;
    for (const auto& [seed_id, history] : runs) {
      if (i < history.size()) {
        const auto& s = history[i].second;
        label = step_label(s);
        cells += " " + metrics::MetricReport::percent(s.metric_value) + " [" +
                 metrics::MetricReport::percent(s.code_pass_rate) + "] |";
      } else {
        cells += " - |";
      }
    }
    out += "| " + label + " |" + cells + "\n";
  }
  return out;
}

}  // namespace selfvqa
