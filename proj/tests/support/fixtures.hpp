// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "selfvqa/corpus.hpp"
#include "selfvqa/modelgw.hpp"
#include "selfvqa/prompts.hpp"
#include "selfvqa/sandbox.hpp"
#include "selfvqa/selfplay.hpp"
#include "selfvqa/util/io.hpp"

namespace selfvqa::fixtures {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    auto base = fs::temp_directory_path() / "selfvqa-test";
    fs::create_directories(base);
    std::string tmpl = (base / "XXXXXX").string();
    if (::mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& p) const { return path_ / p; }

 private:
  fs::path path_;
};

inline fs::path templates_dir() { return SELFVQA_TEMPLATES_DIR; }

inline const PromptRenderer& renderer() {
  static const PromptRenderer r(TemplateStore::load(templates_dir()));
  return r;
}

inline std::string pad3(std::size_t i) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%03zu", i);
  return buf;
}

inline VqaExample make_example(std::string id, std::string question, std::vector<std::string> golds,
                               Split split = Split::Train) {
  VqaExample ex;
  ex.id = std::move(id);
  ex.image_ref = "img/" + ex.id + ".png";
  ex.question = std::move(question);
  ex.gold_answers = std::move(golds);
  ex.split = split;
  return ex;
}

inline std::size_t count_images_in(const gw::ModelRequest& r) { return count_images(r.parts); }

/**
 * Synthetic self-play task whose success rates are exact by construction.
 *
 * Example i asks "What is the value for item NNN?" with gold answer i. The
 * scripted generator returns a correct program for zero-shot prompts iff
 * zero_shot_ok(i), and for prompts with at least `few_shot_min_images` images
 * iff few_shot_ok(i); otherwise the program runs fine but answers "wrong".
 */
struct SyntheticTask {
  std::vector<VqaExample> examples;
  nlohmann::json backend_script;
  nlohmann::json runner_script;

  static std::string question(std::size_t i) { return "What is the value for item " + pad3(i) + "?"; }

  static SyntheticTask build(std::size_t n, const std::function<bool(std::size_t)>& zero_shot_ok,
                             const std::function<bool(std::size_t)>& few_shot_ok, std::size_t few_shot_min_images = 5) {
    SyntheticTask t;
    t.backend_script["rules"] = nlohmann::json::array();
    t.runner_script["programs"] = nlohmann::json::array();
    for (std::size_t i = 0; i < n; ++i) {
      const auto tag = pad3(i);
      t.examples.push_back(make_example("e" + tag, question(i), {std::to_string(i)}));
      auto add = [&](const std::string& kind, bool ok, nlohmann::json rule) {
        const auto program = "ans = execute()  # " + kind + " " + tag + (ok ? " ok" : " bad");
        rule["final_contains"] = {"item " + tag + "?"};
        rule["replies"] = {program};
        rule["name"] = kind + tag;
        t.backend_script["rules"].push_back(rule);
        t.runner_script["programs"].push_back(
            {{"source", program}, {"result", {{"status", "ok"}, {"answer", ok ? std::to_string(i) : "wrong"}}}});
      };
      add("fs", few_shot_ok(i), {{"min_images", few_shot_min_images}});
      add("zs", zero_shot_ok(i), {{"max_images", 1}});
    }
    return t;
  }
};

// Gateway + scripted backend + scripted runner wired into an EngineContext.
struct ScriptedEngine {
  std::shared_ptr<gw::ScriptedBackend> backend;
  std::unique_ptr<gw::Gateway> gateway;
  std::unique_ptr<sandbox::ScriptedRunner> runner;
  std::unique_ptr<EngineContext> ctx;

  ScriptedEngine(const nlohmann::json& backend_script, const nlohmann::json& runner_script, bool cache = false,
                 fs::path cache_dir = {}) {
    backend = gw::ScriptedBackend::from_json(backend_script);
    gateway = std::make_unique<gw::Gateway>(std::make_shared<gw::FakeClock>());
    gw::BackendConfig cfg;
    cfg.backend_id = "gen";
    gateway->register_backend(cfg, backend);
    if (cache) gateway->enable_cache(std::move(cache_dir));
    runner = sandbox::ScriptedRunner::from_json(runner_script);
    ctx = std::make_unique<EngineContext>(EngineContext{*gateway, renderer(), *runner, "gen", ImageStore{}, {}});
  }
};

}  // namespace selfvqa::fixtures
