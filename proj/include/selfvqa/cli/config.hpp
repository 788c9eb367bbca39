// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "selfvqa/corpus.hpp"
#include "selfvqa/inference.hpp"
#include "selfvqa/modelgw.hpp"
#include "selfvqa/prompts.hpp"
#include "selfvqa/sandbox.hpp"
#include "selfvqa/selfplay.hpp"
#include "selfvqa/util/hash.hpp"
#include "selfvqa/util/io.hpp"

namespace selfvqa::cli {

namespace fs = std::filesystem;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BackendDef {
  gw::BackendConfig config;
  std::string kind = "http";  // "http" or "scripted"
  fs::path script;            // scripted backends only
};

struct PoolRef {
  std::string seed_id;
  std::optional<std::size_t> step;  // default: last persisted step
};

struct InferenceSettings {
  inference::SamplingStrategy::Kind strategy = inference::SamplingStrategy::Kind::UniformRandom;
  std::size_t k = 8;
  std::uint64_t seed = 0;
  double temperature = 0.0;
  std::vector<inference::Aggregator> aggregators{inference::Aggregator::Majority};
  std::vector<PoolRef> pools;
  std::size_t direct_pool_size = 0;  // 0 keeps every labeled training example
  std::size_t parallelism = 1;
};

struct SandboxSettings {
  std::string runner = "process";  // "process" or "scripted"
  std::vector<std::string> guest_command{"python3", "-m", "selfvqa_shim"};
  fs::path script;
  sandbox::RunLimits limits;
};

/**
 * Parsed engine configuration. Relative paths are resolved against the
 * directory of the config file. Credentials are never stored here, only the
 * names of the environment variables that hold them.
 */
struct EngineConfig {
  fs::path base_dir;
  fs::path dataset_root;
  fs::path templates_dir;
  std::vector<TaskSpec> tasks;
  std::vector<BackendDef> backends;
  std::string orchestrator;
  std::string judge;
  std::vector<SeedKind> seeds;
  TrainConfig train;
  InferenceSettings inference;
  SandboxSettings sandbox;
  bool cache_enabled = true;
  fs::path cache_dir;
  fs::path run_dir;
  nlohmann::json raw;

  const TaskSpec& task(const std::string& name) const {
    if (name.empty()) {
      if (tasks.size() == 1) return tasks.front();
      throw ConfigError("several tasks configured; pass --task");
    }
    for (const auto& t : tasks) {
      if (t.name == name) return t;
    }
    throw ConfigError("unknown task: " + name);
  }

  bool has_backend(const std::string& id) const {
    for (const auto& b : backends) {
      if (b.config.backend_id == id) return true;
    }
    return false;
  }

  // Digest of the experiment-defining settings. Output locations and worker
  // counts are left out so that runs can be compared across directories.
  std::string hash() const {
    auto j = raw;
    j.erase("run_dir");
    j.erase("cache");
    if (j.contains("train")) j["train"].erase("parallelism");
    if (j.contains("inference")) j["inference"].erase("parallelism");
    return hash::sha256_hex(j.dump());
  }
};

// Sets a leaf addressed by a dotted path. The value is parsed as JSON when
// possible, otherwise taken as a string.
inline void apply_override(nlohmann::json& root, std::string_view assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override must look like key.path=value: " + std::string(assignment));
  }
  std::string path(assignment.substr(0, eq));
  std::string value(assignment.substr(eq + 1));
  nlohmann::json* node = &root;
  std::size_t start = 0;
  for (;;) {
    auto dot = path.find('.', start);
    auto key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("empty key in override path: " + path);
    if (!node->is_object()) throw ConfigError("override path crosses a non-object: " + path);
    if (dot == std::string::npos) {
      try {
        (*node)[key] = nlohmann::json::parse(value);
      } catch (const nlohmann::json::parse_error&) {
        (*node)[key] = value;
      }
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

namespace detail {

inline fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline std::chrono::milliseconds seconds_to_ms(double s) {
  return std::chrono::milliseconds(static_cast<long long>(s * 1000.0));
}

}  // namespace detail

inline EngineConfig parse_config(const nlohmann::json& j, const fs::path& base_dir) {
  EngineConfig c;
  c.raw = j;
  c.base_dir = base_dir;
  try {
    c.dataset_root = detail::resolve(base_dir, j.value("dataset_root", "."));
    c.templates_dir = detail::resolve(base_dir, j.value("templates_dir", "templates"));
    c.run_dir = detail::resolve(base_dir, j.value("run_dir", "run"));

    for (const auto& t : j.at("tasks")) {
      TaskSpec spec;
      spec.name = t.at("name").get<std::string>();
      if (spec.name.empty()) throw ConfigError("task name is empty");
      auto metric = parse_metric_kind(t.at("metric").get<std::string>());
      if (!metric) throw ConfigError("task " + spec.name + ": unknown metric " + t.at("metric").dump());
      spec.metric_kind = *metric;
      for (const auto& [split_name, path] : t.at("splits").items()) {
        auto split = parse_split(split_name);
        if (!split) throw ConfigError("task " + spec.name + ": unknown split " + split_name);
        spec.split_paths[*split] = detail::resolve(c.dataset_root, path.get<std::string>());
      }
      for (const auto& s : t.value("unlabeled_splits", nlohmann::json::array())) {
        auto split = parse_split(s.get<std::string>());
        if (!split) throw ConfigError("task " + spec.name + ": unknown split " + s.dump());
        spec.unlabeled_splits.insert(*split);
      }
      spec.answer_var = t.value("answer_var", "ans");
      spec.train_subset = t.value("train_subset", std::size_t{1000});
      spec.subset_seed = t.value("subset_seed", std::uint64_t{0});
      c.tasks.push_back(std::move(spec));
    }

    for (const auto& b : j.at("backends")) {
      BackendDef def;
      def.config.backend_id = b.at("id").get<std::string>();
      def.kind = b.value("kind", "http");
      def.config.endpoint = b.value("endpoint", "");
      def.config.auth_env = b.value("auth_env", "");
      def.config.model = b.value("model", "");
      def.config.rate_limit = b.value("rate_limit", 1.0);
      def.config.timeout = detail::seconds_to_ms(b.value("timeout_s", 60.0));
      def.config.max_in_flight = b.value("max_in_flight", 8);
      if (b.contains("retry")) {
        def.config.retry.max_attempts = b["retry"].value("max_attempts", 3);
        def.config.retry.backoff = detail::seconds_to_ms(b["retry"].value("backoff_s", 0.5));
      }
      if (b.contains("api_key") || b.contains("token")) {
        throw ConfigError("backend " + def.config.backend_id + ": credentials must come from auth_env, not the config");
      }
      if (def.kind == "scripted") {
        def.script = detail::resolve(base_dir, b.at("script").get<std::string>());
      } else if (def.kind == "http") {
        if (def.config.endpoint.empty()) throw ConfigError("backend " + def.config.backend_id + ": endpoint missing");
      } else {
        throw ConfigError("backend " + def.config.backend_id + ": unknown kind " + def.kind);
      }
      if (!(def.config.rate_limit > 0)) throw ConfigError("backend " + def.config.backend_id + ": rate_limit must be > 0");
      if (def.config.timeout.count() <= 0) throw ConfigError("backend " + def.config.backend_id + ": timeout must be > 0");
      c.backends.push_back(std::move(def));
    }

    c.orchestrator = j.at("orchestrator").get<std::string>();
    c.judge = j.value("judge", "");

    for (const auto& s : j.at("seeds")) {
      auto kind = s.at("kind").get<std::string>();
      if (kind == "pot") c.seeds.push_back(SeedKind::pot());
      else if (kind == "tool") c.seeds.push_back(SeedKind::tool(s.at("tool").get<std::string>()));
      else if (kind == "direct") c.seeds.push_back(SeedKind::direct());
      else throw ConfigError("unknown seed kind: " + kind);
    }

    if (j.contains("train")) {
      const auto& t = j["train"];
      c.train.steps = t.value("steps", c.train.steps);
      c.train.shots_schedule = t.value("shots_schedule", c.train.shots_schedule);
      c.train.n_samples = t.value("n_samples", c.train.n_samples);
      c.train.refinement_rounds = t.value("refinement_rounds", c.train.refinement_rounds);
      c.train.rng_seed = t.value("rng_seed", c.train.rng_seed);
      c.train.worker_parallelism = t.value("parallelism", c.train.worker_parallelism);
      c.train.temperature = t.value("temperature", c.train.temperature);
      c.train.max_output = t.value("max_output", c.train.max_output);
    }

    if (j.contains("inference")) {
      const auto& inf = j["inference"];
      if (inf.contains("strategy")) {
        auto k = inference::parse_strategy(inf["strategy"].get<std::string>());
        if (!k) throw ConfigError("unknown sampling strategy: " + inf["strategy"].dump());
        c.inference.strategy = *k;
      }
      c.inference.k = inf.value("k", c.inference.k);
      c.inference.seed = inf.value("seed", c.inference.seed);
      c.inference.temperature = inf.value("temperature", c.inference.temperature);
      c.inference.direct_pool_size = inf.value("direct_pool_size", c.inference.direct_pool_size);
      c.inference.parallelism = inf.value("parallelism", c.inference.parallelism);
      if (inf.contains("aggregators")) {
        c.inference.aggregators.clear();
        for (const auto& a : inf["aggregators"]) {
          auto agg = inference::parse_aggregator(a.get<std::string>());
          if (!agg) throw ConfigError("unknown aggregator: " + a.dump());
          c.inference.aggregators.push_back(*agg);
        }
      }
      for (const auto& p : inf.value("pools", nlohmann::json::array())) {
        PoolRef ref;
        ref.seed_id = p.at("seed").get<std::string>();
        if (p.contains("step")) ref.step = p["step"].get<std::size_t>();
        c.inference.pools.push_back(std::move(ref));
      }
    }
    if (c.inference.pools.empty()) {
      for (const auto& s : c.seeds) c.inference.pools.push_back({s.id(), std::nullopt});
    }

    if (j.contains("sandbox")) {
      const auto& s = j["sandbox"];
      c.sandbox.runner = s.value("runner", c.sandbox.runner);
      c.sandbox.guest_command = s.value("guest_command", c.sandbox.guest_command);
      if (s.contains("script")) c.sandbox.script = detail::resolve(base_dir, s["script"].get<std::string>());
      c.sandbox.limits.wall_timeout = detail::seconds_to_ms(s.value("wall_timeout_s", 30.0));
      c.sandbox.limits.max_tool_calls = s.value("max_tool_calls", c.sandbox.limits.max_tool_calls);
      c.sandbox.limits.max_output_bytes = s.value("max_output_bytes", c.sandbox.limits.max_output_bytes);
    }

    if (j.contains("cache")) {
      c.cache_enabled = j["cache"].value("enabled", true);
      if (j["cache"].contains("dir")) c.cache_dir = detail::resolve(base_dir, j["cache"]["dir"].get<std::string>());
    }
    if (c.cache_dir.empty()) c.cache_dir = c.run_dir / "cache";
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }

  // Cross references.
  auto require_backend = [&](const std::string& id, const std::string& who) {
    if (!c.has_backend(id)) throw ConfigError(who + " refers to unknown backend id '" + id + "'");
  };
  require_backend(c.orchestrator, "orchestrator");
  if (!c.judge.empty()) require_backend(c.judge, "judge");
  for (const auto& s : c.seeds) {
    if (s.kind == SeedKind::Kind::ToolApi) require_backend(*s.tool_backend, "seed " + s.id());
  }
  std::set<std::string> seed_ids;
  for (const auto& s : c.seeds) seed_ids.insert(s.id());
  for (const auto& p : c.inference.pools) {
    if (p.seed_id != "direct" && !seed_ids.count(p.seed_id)) {
      throw ConfigError("inference pool '" + p.seed_id + "' is not a configured seed");
    }
  }
  if (c.tasks.empty()) throw ConfigError("no tasks configured");
  if (c.sandbox.runner == "scripted" && c.sandbox.script.empty()) throw ConfigError("scripted sandbox needs a script");
  if (c.sandbox.runner != "scripted" && c.sandbox.runner != "process") {
    throw ConfigError("unknown sandbox runner: " + c.sandbox.runner);
  }
  c.train.validate();
  return c;
}

inline EngineConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json j;
  try {
    j = io::read_json(path);
  } catch (const io::IoError& e) {
    throw ConfigError(e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  return parse_config(j, fs::absolute(path).parent_path());
}

}  // namespace selfvqa::cli
