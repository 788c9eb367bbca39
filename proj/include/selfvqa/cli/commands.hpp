// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "selfvqa/cli/config.hpp"
#include "selfvqa/corpus.hpp"
#include "selfvqa/http_backend.hpp"
#include "selfvqa/inference.hpp"
#include "selfvqa/metrics.hpp"
#include "selfvqa/modelgw.hpp"
#include "selfvqa/prompts.hpp"
#include "selfvqa/sandbox.hpp"
#include "selfvqa/selfplay.hpp"
#include "selfvqa/util/io.hpp"
#include "selfvqa/version.hpp"

#ifndef SELFVQA_TEMPLATES_DIR
#define SELFVQA_TEMPLATES_DIR ""
#endif

namespace selfvqa::cli {

struct CommonOptions {
  fs::path config;
  std::string task;
  std::vector<std::string> overrides;
  bool deterministic = false;
  std::optional<std::size_t> parallelism;
};

// Advisory lock on a run directory; a second holder fails immediately.
class RunLock {
 public:
  explicit RunLock(const fs::path& run_dir) {
    fs::create_directories(run_dir);
    auto path = run_dir / ".lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) throw ConfigError("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw ConfigError("run directory " + run_dir.string() + " is in use by another command");
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }

 private:
  int fd_ = -1;
};

inline std::string utc_timestamp() {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  ::gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline EngineConfig load_with_options(const CommonOptions& opt) {
  auto overrides = opt.overrides;
  if (opt.deterministic) {
    overrides.push_back("train.parallelism=1");
    overrides.push_back("inference.parallelism=1");
  } else if (opt.parallelism) {
    overrides.push_back("train.parallelism=" + std::to_string(*opt.parallelism));
    overrides.push_back("inference.parallelism=" + std::to_string(*opt.parallelism));
  }
  return load_config(opt.config, overrides);
}

// Owns every runtime object the loops need. Not movable: the context holds
// references into it.
class Engine {
 public:
  explicit Engine(const EngineConfig& cfg) : gateway_(std::make_shared<gw::SteadyClock>()) {
    auto templates_dir = cfg.templates_dir;
    if (!fs::exists(templates_dir / "manifest.json") && std::string(SELFVQA_TEMPLATES_DIR).size()) {
      templates_dir = SELFVQA_TEMPLATES_DIR;
    }
    renderer_ = std::make_unique<PromptRenderer>(TemplateStore::load(templates_dir));
    ImageStore images(cfg.dataset_root);
    for (const auto& b : cfg.backends) {
      std::shared_ptr<gw::Backend> backend;
      if (b.kind == "scripted") {
        backend = gw::ScriptedBackend::from_json(io::read_json(b.script));
      } else {
        backend = std::make_shared<gw::HttpBackend>(b.config, images);
      }
      gateway_.register_backend(b.config, std::move(backend));
    }
    if (cfg.cache_enabled) gateway_.enable_cache(cfg.cache_dir);
    if (cfg.sandbox.runner == "scripted") {
      runner_ = sandbox::ScriptedRunner::from_json(io::read_json(cfg.sandbox.script));
    } else {
      runner_ = std::make_unique<sandbox::ProcessRunner>(cfg.sandbox.guest_command);
    }
    ctx_ = std::make_unique<EngineContext>(
        EngineContext{gateway_, *renderer_, *runner_, cfg.orchestrator, images, cfg.sandbox.limits});
  }
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  EngineContext& context() { return *ctx_; }
  gw::Gateway& gateway() { return gateway_; }

 private:
  gw::Gateway gateway_;
  std::unique_ptr<PromptRenderer> renderer_;
  std::unique_ptr<sandbox::GuestRunner> runner_;
  std::unique_ptr<EngineContext> ctx_;
};

inline std::vector<VqaExample> load_split(const EngineConfig& cfg, const TaskSpec& task, Split split) {
  auto it = task.split_paths.find(split);
  if (it == task.split_paths.end()) {
    throw ConfigError("task " + task.name + " has no " + std::string(to_string(split)) + " split");
  }
  LoadOptions opts;
  opts.images = ImageStore(cfg.dataset_root);
  opts.require_labels = !task.unlabeled_splits.count(split);
  return load_dataset(it->second, split, opts);
}

// Updates one entry of <run_dir>/run_manifest.json. Only the started/finished
// fields carry timestamps.
inline void record_manifest(const EngineConfig& cfg, const std::string& entry_key, nlohmann::json entry) {
  auto path = cfg.run_dir / "run_manifest.json";
  nlohmann::json m = fs::exists(path) ? io::read_json(path) : nlohmann::json::object();
  m["engine_version"] = kEngineVersion;
  m["config_hash"] = cfg.hash();
  m["config"] = cfg.raw;
  m["entries"][entry_key] = std::move(entry);
  io::write_json(path, m);
}

inline int cmd_train(const CommonOptions& opt, std::ostream& out, std::ostream& err) {
  try {
    auto cfg = load_with_options(opt);
    const auto& task = cfg.task(opt.task);
    RunLock lock(cfg.run_dir);
    const auto started = utc_timestamp();
    Engine engine(cfg);

    auto train = load_split(cfg, task, Split::Train);
    if (task.train_subset > 0) train = sample_subset(train, task.train_subset, task.subset_seed);

    PoolStore store(cfg.run_dir / "pools");
    auto runs = run_training(engine.context(), task, cfg.seeds, train, cfg.train, &store);

    bool wants_direct = false;
    for (const auto& p : cfg.inference.pools) wants_direct |= p.seed_id == "direct";
    if (wants_direct) {
      store.save(task.name, make_direct_pool(train, cfg.inference.direct_pool_size, task.subset_seed, cfg.train.hash()));
    }

    io::write_file(cfg.run_dir / "stats" / (task.name + ".csv"), stats_csv(task.name, runs));
    const auto table = stats_markdown(task.name, runs);
    io::write_file(cfg.run_dir / "stats" / (task.name + ".md"), table);

    nlohmann::json entry;
    entry["command"] = "train";
    entry["task"] = task.name;
    entry["examples"] = train.size();
    entry["seeds"] = nlohmann::json::array();
    for (const auto& s : cfg.seeds) entry["seeds"].push_back(s.id());
    entry["steps"] = cfg.train.steps;
    entry["started_at"] = started;
    entry["finished_at"] = utc_timestamp();
    record_manifest(cfg, "train/" + task.name, entry);

    auto stats = engine.gateway().stats();
    out << table;
    out << "backend calls: " << stats.backend_calls << ", cache hits: " << stats.cache_hits << "\n";
    for (const auto& [seed, history] : runs) {
      for (const auto& [pool, s] : history) {
        if (s.warning) err << "warning: " << seed << ": " << *s.warning << "\n";
      }
    }
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

inline std::vector<FewShotPool> load_pools(const EngineConfig& cfg, const TaskSpec& task) {
  PoolStore store(cfg.run_dir / "pools");
  std::vector<FewShotPool> pools;
  for (const auto& ref : cfg.inference.pools) {
    std::size_t step = 0;
    if (ref.step) {
      step = *ref.step;
    } else if (auto last = store.last_step(task.name, ref.seed_id)) {
      step = *last;
    } else {
      throw ConfigError("missing pool for task " + task.name + ", seed " + ref.seed_id + " (no step persisted)");
    }
    if (!store.exists(task.name, ref.seed_id, step)) {
      throw ConfigError("missing pool for task " + task.name + ", seed " + ref.seed_id + ", step " +
                        std::to_string(step));
    }
    pools.push_back(store.load(task.name, ref.seed_id, step));
  }
  return pools;
}

struct EvalOptions {
  CommonOptions common;
  std::string split = "validation";
  std::vector<std::string> aggregators;  // empty: use the config
};

inline int cmd_eval(const EvalOptions& opt, std::ostream& out, std::ostream& err) {
  try {
    auto cfg = load_with_options(opt.common);
    const auto& task = cfg.task(opt.common.task);
    auto split = parse_split(opt.split);
    if (!split) throw ConfigError("unknown split: " + opt.split);
    auto aggregators = cfg.inference.aggregators;
    if (!opt.aggregators.empty()) {
      aggregators.clear();
      for (const auto& a : opt.aggregators) {
        auto agg = inference::parse_aggregator(a);
        if (!agg) throw ConfigError("unknown aggregator: " + a);
        if (std::find(aggregators.begin(), aggregators.end(), *agg) == aggregators.end()) aggregators.push_back(*agg);
      }
    }
    const bool oracle = std::find(aggregators.begin(), aggregators.end(), inference::Aggregator::Oracle) != aggregators.end();
    if (oracle && task.unlabeled_splits.count(*split)) {
      throw ConfigError("the oracle aggregator needs gold labels, and split " + opt.split + " of task " + task.name +
                        " is unlabeled");
    }
    RunLock lock(cfg.run_dir);
    const auto started = utc_timestamp();
    auto pools = load_pools(cfg, task);
    auto examples = load_split(cfg, task, *split);
    Engine engine(cfg);

    inference::InferenceConfig icfg;
    icfg.strategy.kind = cfg.inference.strategy;
    icfg.strategy.k = cfg.inference.k;
    icfg.strategy.seed = cfg.inference.seed;
    if (icfg.strategy.kind != inference::SamplingStrategy::Kind::UniformRandom) {
      icfg.strategy.embedder = std::make_shared<inference::TrigramEmbedder>();
    }
    icfg.temperature = cfg.inference.temperature;
    icfg.parallelism = cfg.inference.parallelism;
    icfg.judge_backend = cfg.judge.empty() ? cfg.orchestrator : cfg.judge;

    auto ev = inference::evaluate_mixed(engine.context(), task, pools, examples, *split, aggregators, icfg);

    auto dir = cfg.run_dir / "eval" / (task.name + "_" + std::string(to_string(*split)));
    std::string lines;
    for (const auto& rec : ev.records) {
      nlohmann::ordered_json j;
      j["id"] = rec.example->id;
      j["candidates"] = nlohmann::json::array();
      for (const auto& c : rec.candidates) j["candidates"].push_back(inference::to_json(c));
      j["decisions"] = nlohmann::json::array();
      for (auto agg : aggregators) {
        const auto& d = rec.decisions.at(agg);
        if (d) {
          j["decisions"].push_back(inference::to_json(*d));
        } else {
          j["decisions"].push_back({{"method", std::string(inference::to_string(agg))}, {"answer", nullptr}});
        }
      }
      lines += j.dump() + "\n";
    }
    io::write_file(dir / "candidates.jsonl", lines);
    if (ev.labeled) {
      io::write_file(dir / "summary.csv", inference::summary_csv(ev));
      io::write_file(dir / "summary.md", inference::summary_markdown(ev));
      out << inference::summary_markdown(ev);
    } else {
      out << "split " << opt.split << " is unlabeled: wrote predictions only (" << ev.records.size() << " examples)\n";
    }

    nlohmann::json entry;
    entry["command"] = "eval";
    entry["task"] = task.name;
    entry["split"] = opt.split;
    entry["aggregators"] = nlohmann::json::array();
    for (auto a : aggregators) entry["aggregators"].push_back(std::string(inference::to_string(a)));
    entry["started_at"] = started;
    entry["finished_at"] = utc_timestamp();
    record_manifest(cfg, "eval/" + task.name + "/" + opt.split, entry);
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

namespace detail {

inline std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& line : text::split_lines(io::read_file(path))) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          cur.push_back(c);
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        fields.push_back(std::move(cur));
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    fields.push_back(std::move(cur));
    rows.push_back(std::move(fields));
  }
  return rows;
}

}  // namespace detail

struct ReportOptions {
  std::vector<fs::path> run_dirs;
  std::optional<fs::path> csv_out;
};

// Cross-run comparison of training stats and evaluation summaries. Runs whose
// config hashes differ are flagged.
inline int cmd_report(const ReportOptions& opt, std::ostream& out, std::ostream& err) {
  try {
    if (opt.run_dirs.empty()) throw ConfigError("no run directories given");
    struct Run {
      fs::path dir;
      std::string hash;
    };
    std::vector<Run> runs;
    for (const auto& d : opt.run_dirs) {
      auto manifest = d / "run_manifest.json";
      if (!fs::exists(manifest)) throw ConfigError("no run manifest in " + d.string());
      auto m = io::read_json(manifest);
      runs.push_back({d, m.at("config_hash").get<std::string>()});
    }
    std::set<std::string> hashes;
    for (const auto& r : runs) hashes.insert(r.hash);
    const bool mismatch = hashes.size() > 1;

    std::string csv = "run,config,flag,kind,task,split_or_seed,label,metric_pct,cpr_pct,n\n";
    std::string md = "| run | config | flag | kind | task | split/seed | label | metric [CPR%] | n |\n|---|---|---|---|---|---|---|---|---|\n";
    auto emit = [&](const Run& r, const std::string& kind, const std::string& task, const std::string& where,
                    const std::string& label, const std::string& metric, const std::string& cpr, const std::string& n) {
      const auto short_hash = r.hash.substr(0, 12);
      const std::string flag = mismatch ? "config-mismatch" : "";
      csv += text::csv_escape(r.dir.filename().string()) + "," + short_hash + "," + flag + "," + kind + "," +
             text::csv_escape(task) + "," + text::csv_escape(where) + "," + text::csv_escape(label) + "," + metric + "," +
             cpr + "," + n + "\n";
      md += "| " + r.dir.filename().string() + " | " + short_hash + " | " + flag + " | " + kind + " | " + task + " | " +
            where + " | " + label + " | " + metric + " [" + cpr + "] | " + n + " |\n";
    };
    for (const auto& r : runs) {
      std::vector<fs::path> stats_files, eval_files;
      if (fs::is_directory(r.dir / "stats")) {
        for (const auto& e : fs::directory_iterator(r.dir / "stats")) {
          if (e.path().extension() == ".csv") stats_files.push_back(e.path());
        }
      }
      if (fs::is_directory(r.dir / "eval")) {
        for (const auto& e : fs::directory_iterator(r.dir / "eval")) {
          if (fs::exists(e.path() / "summary.csv")) eval_files.push_back(e.path() / "summary.csv");
        }
      }
      std::sort(stats_files.begin(), stats_files.end());
      std::sort(eval_files.begin(), eval_files.end());
      for (const auto& f : stats_files) {
        auto rows = detail::read_csv_rows(f);
        for (std::size_t i = 1; i < rows.size(); ++i) {
          const auto& row = rows[i];
          if (row.size() < 7) continue;
          emit(r, "train", row[0], row[1], row[3] + "-shot [Step " + row[2] + "]", row[4], row[5], row[6]);
        }
      }
      for (const auto& f : eval_files) {
        auto rows = detail::read_csv_rows(f);
        for (std::size_t i = 1; i < rows.size(); ++i) {
          const auto& row = rows[i];
          if (row.size() < 6) continue;
          auto label = row[2];
          if (row.size() > 6 && !row[6].empty()) label += " (" + row[6] + ")";
          emit(r, "eval", row[0], row[1], label, row[3], row[4], row[5]);
        }
      }
    }
    if (mismatch) md += "\nconfig hashes differ across runs: results are not directly comparable\n";
    out << md;
    if (opt.csv_out) io::write_file(*opt.csv_out, csv);
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

struct InspectOptions {
  CommonOptions common;
  std::string seed;
  std::optional<std::size_t> step;
};

inline int cmd_pools_inspect(const InspectOptions& opt, std::ostream& out, std::ostream& err) {
  try {
    auto cfg = load_with_options(opt.common);
    const auto& task = cfg.task(opt.common.task);
    PoolStore store(cfg.run_dir / "pools");
    std::vector<std::string> seeds;
    if (!opt.seed.empty()) {
      seeds.push_back(opt.seed);
    } else {
      for (const auto& p : cfg.inference.pools) seeds.push_back(p.seed_id);
    }
    for (const auto& seed : seeds) {
      auto step = opt.step ? opt.step : store.last_step(task.name, seed);
      if (!step) throw ConfigError("no pool persisted for task " + task.name + ", seed " + seed);
      auto pool = store.load(task.name, seed, *step);
      out << "== " << task.name << " / " << seed << " / step " << *step << ": " << pool.size() << " exemplars\n";
      for (const auto& e : pool.exemplars) {
        out << "\n-- " << e.example_id << "\nQ: " << e.question << "\nA: " << e.answer << "\n";
        if (!e.program.empty()) out << e.program << "\n";
      }
      out << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace selfvqa::cli
