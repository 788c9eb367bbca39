// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "selfvqa/selfplay.hpp"
#include "support/fixtures.hpp"

using namespace selfvqa;
using fixtures::ScriptedEngine;
using fixtures::SyntheticTask;
using fixtures::TempDir;
using nlohmann::json;

namespace {

TaskSpec task(MetricKind kind = MetricKind::RelaxedAccuracy) {
  TaskSpec t;
  t.name = "synthetic";
  t.metric_kind = kind;
  return t;
}

TrainConfig config(std::size_t steps = 1, int n_samples = 1, std::size_t rounds = 2) {
  TrainConfig c;
  c.steps = steps;
  c.n_samples = n_samples;
  c.refinement_rounds = rounds;
  c.rng_seed = 42;
  return c;
}

json runner_entry(const std::string& source, json result) { return {{"source", source}, {"result", result}}; }
json ok(const std::string& a) { return {{"status", "ok"}, {"answer", a}}; }
json err(const std::string& type) { return {{"status", "error"}, {"error_type", type}, {"error_trace", "trace"}}; }

// Question "Q1?" is solved only after a NameError refinement; "Q2?" never.
struct RefineScenario {
  json backend = {{"rules", json::array({
                               {{"name", "fix"}, {"final_contains", {"missing import statements"}},
                                {"replies", {"prog_fixed"}}},
                               {{"name", "generic-fix"}, {"final_contains", {"try again please"}},
                                {"replies", {"prog_still_broken"}}},
                               {{"name", "q1"}, {"final_contains", {"Q1?"}}, {"replies", {"prog_crash", "prog_ok_wrong"}}},
                               {{"name", "q2"}, {"final_contains", {"Q2?"}}, {"replies", {"prog_type_error"}}},
                           })}};
  json runner = {{"programs", json::array({runner_entry("prog_crash", err("NameError")),
                                           runner_entry("prog_fixed", ok("5")),
                                           runner_entry("prog_ok_wrong", ok("6")),
                                           runner_entry("prog_type_error", err("TypeError")),
                                           runner_entry("prog_still_broken", err("TypeError"))})}};
};

std::size_t count_rule(const gw::ScriptedBackend& b, const std::string& rule) {
  std::size_t n = 0;
  for (const auto& inv : b.invocations()) n += inv.rule == rule;
  return n;
}

std::string read(const std::filesystem::path& p) { return io::read_file(p); }

}  // namespace

TEST(SolveExample, RefinementRescuesFirstCandidate) {
  RefineScenario s;
  ScriptedEngine e(s.backend, s.runner);
  auto ex = fixtures::make_example("e1", "Q1?", {"5"});
  auto out = solve_example(*e.ctx, task(), ex, SeedKind::pot(), {}, config(1, 2));
  EXPECT_TRUE(out.result.passed());
  EXPECT_EQ(out.result.answer, "5");
  EXPECT_TRUE(out.rescued);
  EXPECT_EQ(out.program, "prog_fixed");
  EXPECT_EQ(out.refinement_prompts, 1u);
  auto log = e.backend->invocations();
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(log[0].rule, "q1");
  EXPECT_EQ(log[1].rule, "fix");
  // The refinement request extends the original prompt with the failed program and the template.
  const auto& fix = log[1].request.parts;
  ASSERT_EQ(fix.size(), log[0].request.parts.size() + 2);
  EXPECT_EQ(fix[fix.size() - 2].payload, "prog_crash");
  EXPECT_NE(fix.back().payload.find("NamedError:  trace."), std::string::npos);
  EXPECT_EQ(log[1].request.sampling.n_samples, 1);
}

TEST(SolveExample, AllFailReturnsLastError) {
  RefineScenario s;
  ScriptedEngine e(s.backend, s.runner);
  auto ex = fixtures::make_example("e2", "Q2?", {"1"});
  auto out = solve_example(*e.ctx, task(), ex, SeedKind::pot(), {}, config(1, 3, 2));
  EXPECT_FALSE(out.result.passed());
  EXPECT_EQ(out.result.error_type, "TypeError");
  EXPECT_EQ(out.program, "prog_still_broken");
  EXPECT_EQ(out.refinement_prompts, 6u);
  EXPECT_EQ(count_rule(*e.backend, "generic-fix"), 6u);
}

TEST(SolveExample, ZeroRoundsNeverRefines) {
  RefineScenario s;
  ScriptedEngine e(s.backend, s.runner);
  auto ex = fixtures::make_example("e1", "Q1?", {"5"});
  auto out = solve_example(*e.ctx, task(), ex, SeedKind::pot(), {}, config(1, 1, 0));
  EXPECT_FALSE(out.result.passed());
  EXPECT_EQ(out.refinement_prompts, 0u);
  EXPECT_EQ(e.backend->invocation_count(), 1u);
}

TEST(SolveExample, FirstPassingCandidateWinsEvenIfWrong) {
  // Candidate order: crash then ok-wrong. Without refinement the second one is returned.
  RefineScenario s;
  ScriptedEngine e(s.backend, s.runner);
  auto ex = fixtures::make_example("e1", "Q1?", {"5"});
  auto out = solve_example(*e.ctx, task(), ex, SeedKind::pot(), {}, config(1, 2, 0));
  EXPECT_EQ(out.result.answer, "6");
  EXPECT_FALSE(out.rescued);
}

TEST(SolveExample, GatewayErrorsCarryExampleId) {
  ScriptedEngine e(json{{"rules", json::array()}}, json{{"programs", json::array()}});
  auto ex = fixtures::make_example("lost-42", "Q?", {"1"});
  try {
    solve_example(*e.ctx, task(), ex, SeedKind::pot(), {}, config());
    FAIL();
  } catch (const SelfPlayError& err) {
    EXPECT_NE(std::string(err.what()).find("lost-42"), std::string::npos);
  }
}

TEST(SolveExample, EmptyProgramIsAnError) {
  ScriptedEngine e(json{{"rules", {{{"final_contains", {"Q?"}}, {"replies", {"  "}}}}}},
                   json{{"programs", json::array()}});
  auto ex = fixtures::make_example("e", "Q?", {"1"});
  auto out = solve_example(*e.ctx, task(), ex, SeedKind::pot(), {}, config(1, 1, 0));
  EXPECT_EQ(out.result.error_type, "EmptyProgram");
}

TEST(SolveExample, DirectSeedAnswersWithoutSandbox) {
  ScriptedEngine e(json{{"rules", {{{"final_contains", {"Q?"}}, {"replies", {" Twitter \n"}}}}}},
                   json{{"programs", json::array()}});
  auto ex = fixtures::make_example("e", "Q?", {"twitter"});
  auto out = solve_example(*e.ctx, task(), ex, SeedKind::direct(), {}, config());
  EXPECT_EQ(out.result.answer, "Twitter");
  EXPECT_EQ(e.runner->run_count(), 0u);
}

TEST(SolveExample, ToolSeedRoutesCallsThroughToolBackend) {
  std::shared_ptr<gw::ScriptedBackend> orchestrator = gw::ScriptedBackend::from_json(
      json{{"rules", {{{"final_contains", {"Q?"}}, {"replies", {"ask What is the value?\nstore"}}}}}});
  std::shared_ptr<gw::ScriptedBackend> tool = gw::ScriptedBackend::from_json(
      json{{"rules", {{{"role", "tool"}, {"contains", {"What is the value?"}}, {"replies", {" 3 "}}}}}});
  gw::Gateway g(std::make_shared<gw::FakeClock>());
  gw::BackendConfig oc, tc;
  oc.backend_id = "orch";
  tc.backend_id = "toolm";
  g.register_backend(oc, orchestrator);
  g.register_backend(tc, tool);
  sandbox::ProcessRunner runner({SELFVQA_BRIDGE_STUB});
  EngineContext ctx{g, fixtures::renderer(), runner, "orch", ImageStore{}, {}};
  auto ex = fixtures::make_example("e", "Q?", {"3"});
  auto out = solve_example(ctx, task(), ex, SeedKind::tool("toolm"), {}, config());
  EXPECT_EQ(out.result.answer, "3");
  ASSERT_EQ(tool->invocation_count(), 1u);
  EXPECT_EQ(fixtures::count_images_in(tool->invocations()[0].request), 1u);
  // A PoT seed running the same program has no tool.
  auto pot = solve_example(ctx, task(), ex, SeedKind::pot(), {}, config(1, 1, 0));
  EXPECT_EQ(pot.result.error_type, "ToolUnavailable");
}

TEST(TrainingStep, PromotesOnlyCorrect) {
  json backend{{"rules", json::array()}}, runner{{"programs", json::array()}};
  for (int i = 1; i <= 3; ++i) {
    auto q = "Q" + std::to_string(i) + "?";
    auto prog = "p" + std::to_string(i);
    backend["rules"].push_back({{"final_contains", {q}}, {"replies", {prog}}});
    runner["programs"].push_back(runner_entry(prog, ok(i == 3 ? "wrong" : std::to_string(i))));
  }
  ScriptedEngine e(backend, runner);
  std::vector<VqaExample> ex;
  for (int i = 1; i <= 3; ++i) ex.push_back(fixtures::make_example("e" + std::to_string(i), "Q" + std::to_string(i) + "?", {std::to_string(i)}));
  FewShotPool empty;
  auto r = run_training_step(*e.ctx, task(), SeedKind::pot(), empty, ex, config(), 0);
  EXPECT_EQ(r.pool.size(), 2u);
  EXPECT_EQ(r.stats.pool_size_after, 2u);
  EXPECT_DOUBLE_EQ(r.stats.metric_value, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.stats.code_pass_rate, 1.0);
  EXPECT_EQ(r.pool.exemplars[0].example_id, "e1");
  EXPECT_EQ(r.pool.exemplars[1].program, "p2");
  EXPECT_EQ(r.pool.exemplars[1].answer, "2");
}

TEST(TrainingStep, EmptyExamplesRejected) {
  ScriptedEngine e(json{{"rules", json::array()}}, json{{"programs", json::array()}});
  EXPECT_THROW(run_training_step(*e.ctx, task(), SeedKind::pot(), {}, {}, config(), 0), SelfPlayError);
}

TEST(TrainingStep, DeduplicatesByExampleId) {
  auto t = SyntheticTask::build(3, [](std::size_t) { return true; }, [](std::size_t) { return true; });
  ScriptedEngine e(t.backend_script, t.runner_script);
  auto ex = t.examples;
  ex.push_back(ex[0]);
  auto r = run_training_step(*e.ctx, task(), SeedKind::pot(), {}, ex, config(), 0);
  EXPECT_EQ(r.pool.size(), 3u);
}

TEST(TrainingStep, ZeroShotPurityAtStepZero) {
  auto t = SyntheticTask::build(20, [](std::size_t i) { return i % 2 == 0; }, [](std::size_t) { return true; });
  ScriptedEngine e(t.backend_script, t.runner_script);
  run_training_step(*e.ctx, task(), SeedKind::pot(), {}, t.examples, config(1, 2), 0);
  ASSERT_GT(e.backend->invocation_count(), 0u);
  for (const auto& inv : e.backend->invocations()) EXPECT_EQ(count_images(inv.request.parts), 1u);
}

TEST(TrainingStep, StepOneRendersFourExemplars) {
  auto t = SyntheticTask::build(40, [](std::size_t i) { return i % 4 == 0; }, [](std::size_t) { return true; });
  ScriptedEngine e(t.backend_script, t.runner_script);
  auto cfg = config(2);
  auto s0 = run_training_step(*e.ctx, task(), SeedKind::pot(), {}, t.examples, cfg, 0);
  ASSERT_EQ(s0.pool.size(), 10u);
  e.backend->clear_log();
  auto s1 = run_training_step(*e.ctx, task(), SeedKind::pot(), s0.pool, t.examples, cfg, 1);
  EXPECT_EQ(s1.stats.shots, 4u);
  std::set<std::string> pool_ids;
  for (const auto& x : s0.pool.exemplars) pool_ids.insert(x.image_ref);
  for (const auto& inv : e.backend->invocations()) {
    const auto& parts = inv.request.parts;
    ASSERT_EQ(count_images(parts), 5u);
    ASSERT_EQ(parts.size(), 1u + 3u * 4u + 2u);
    std::set<std::string> drawn;
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_TRUE(pool_ids.count(parts[1 + 3 * k].payload));
      drawn.insert(parts[1 + 3 * k].payload);
    }
    EXPECT_EQ(drawn.size(), 4u);
  }
}

TEST(TrainingStep, SmallPoolIsUsedWhole) {
  auto t = SyntheticTask::build(10, [](std::size_t i) { return i < 2; }, [](std::size_t) { return true; }, 3);
  ScriptedEngine e(t.backend_script, t.runner_script);
  auto cfg = config(2);
  auto s0 = run_training_step(*e.ctx, task(), SeedKind::pot(), {}, t.examples, cfg, 0);
  ASSERT_EQ(s0.pool.size(), 2u);
  e.backend->clear_log();
  run_training_step(*e.ctx, task(), SeedKind::pot(), s0.pool, t.examples, cfg, 1);
  for (const auto& inv : e.backend->invocations()) EXPECT_EQ(count_images(inv.request.parts), 3u);
}

TEST(TrainingStep, EmptyPreviousPoolWarns) {
  auto t = SyntheticTask::build(5, [](std::size_t) { return false; }, [](std::size_t) { return true; });
  ScriptedEngine e(t.backend_script, t.runner_script);
  auto r = run_training_step(*e.ctx, task(), SeedKind::pot(), {}, t.examples, config(2), 1);
  ASSERT_TRUE(r.stats.warning.has_value());
  EXPECT_EQ(r.stats.metric_value, 0.0);
}

TEST(TrainingStep, DrawsAreDeterministicPerExample) {
  FewShotPool pool;
  for (int i = 0; i < 30; ++i) pool.exemplars.push_back({"x" + std::to_string(i), "", "", "p", "a", SeedKind::pot(), 0});
  auto ex = fixtures::make_example("e7", "Q?", {"1"});
  auto cfg = config();
  auto a = draw_exemplars(pool, 8, cfg, 1, SeedKind::pot(), ex);
  EXPECT_EQ(a, draw_exemplars(pool, 8, cfg, 1, SeedKind::pot(), ex));
  EXPECT_NE(a, draw_exemplars(pool, 8, cfg, 2, SeedKind::pot(), ex));
  auto other = fixtures::make_example("e8", "Q?", {"1"});
  EXPECT_NE(a, draw_exemplars(pool, 8, cfg, 1, SeedKind::pot(), other));
}

TEST(Training, ThirtyThenSixtyPercent) {
  auto t = SyntheticTask::build(100, [](std::size_t i) { return i % 10 < 3; }, [](std::size_t i) { return i % 10 < 6; });
  ScriptedEngine e(t.backend_script, t.runner_script);
  std::vector<SeedKind> seeds{SeedKind::pot()};
  auto cfg = config(2, 4);
  auto runs = run_training(*e.ctx, task(), seeds, t.examples, cfg);
  const auto& h = runs.at("pot");
  ASSERT_EQ(h.size(), 2u);
  EXPECT_DOUBLE_EQ(h[0].second.metric_value, 0.30);
  EXPECT_DOUBLE_EQ(h[1].second.metric_value, 0.60);
  EXPECT_EQ(h[0].first.size(), 30u);
  EXPECT_EQ(h[1].first.size(), 60u);
  EXPECT_EQ(h[1].second.pool_size_before, 30u);
}

TEST(Training, ThreeStepsShotCounts) {
  auto t = SyntheticTask::build(30, [](std::size_t i) { return i % 3 == 0; }, [](std::size_t) { return true; });
  ScriptedEngine e(t.backend_script, t.runner_script);
  std::vector<SeedKind> seeds{SeedKind::pot(), SeedKind::tool("gemini")};
  auto runs = run_training(*e.ctx, task(), seeds, t.examples, config(3));
  for (const auto& [seed, h] : runs) {
    ASSERT_EQ(h.size(), 3u);
    EXPECT_EQ(h[0].second.shots, 0u);
    EXPECT_EQ(h[1].second.shots, 4u);
    EXPECT_EQ(h[2].second.shots, 8u);
    EXPECT_EQ(h[2].second.pool_size_before, h[1].second.pool_size_after);
  }
  auto csv = stats_csv("synthetic", runs);
  EXPECT_EQ(text::split_lines(csv).size(), 1u + 6u);
  EXPECT_NE(stats_markdown("synthetic", runs).find("| 8-shot [Step 2] |"), std::string::npos);
}

TEST(Training, SingleStepIsZeroShotOnly) {
  auto t = SyntheticTask::build(10, [](std::size_t) { return true; }, [](std::size_t) { return true; });
  ScriptedEngine e(t.backend_script, t.runner_script);
  std::vector<SeedKind> seeds{SeedKind::pot()};
  auto runs = run_training(*e.ctx, task(), seeds, t.examples, config(1));
  EXPECT_EQ(runs.at("pot").size(), 1u);
  for (const auto& inv : e.backend->invocations()) EXPECT_EQ(count_images(inv.request.parts), 1u);
}

TEST(Training, ErrorsNameSeedAndStep) {
  auto t = SyntheticTask::build(3, [](std::size_t) { return true; }, [](std::size_t) { return true; });
  t.backend_script["rules"].erase(0);  // few-shot rule for example 000
  ScriptedEngine e(t.backend_script, t.runner_script);
  std::vector<SeedKind> seeds{SeedKind::pot()};
  try {
    run_training(*e.ctx, task(), seeds, t.examples, config(2));
    FAIL();
  } catch (const SelfPlayError& err) {
    std::string what = err.what();
    EXPECT_NE(what.find("seed pot, step 1"), std::string::npos) << what;
    EXPECT_NE(what.find("e000"), std::string::npos) << what;
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.shots_schedule = {0, 4};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.shots_schedule = {1, 4, 8};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.steps = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.worker_parallelism = 8;
  EXPECT_EQ(c.hash(), TrainConfig{}.hash());
  c.rng_seed = 1;
  EXPECT_NE(c.hash(), TrainConfig{}.hash());
}

namespace {

std::map<std::string, std::string> snapshot(const std::filesystem::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(root)) {
    if (entry.is_regular_file()) files[std::filesystem::relative(entry.path(), root).string()] = read(entry.path());
  }
  return files;
}

std::map<std::string, std::string> train_into(const std::filesystem::path& dir, std::size_t workers) {
  auto t = SyntheticTask::build(40, [](std::size_t i) { return i % 5 < 2; }, [](std::size_t i) { return i % 5 < 4; });
  ScriptedEngine e(t.backend_script, t.runner_script);
  std::vector<SeedKind> seeds{SeedKind::pot(), SeedKind::tool("screenai")};
  auto cfg = config(3, 2);
  cfg.worker_parallelism = workers;
  PoolStore store(dir);
  auto runs = run_training(*e.ctx, task(), seeds, t.examples, cfg, &store);
  io::write_file(dir / "stats.csv", stats_csv("synthetic", runs));
  return snapshot(dir);
}

}  // namespace

TEST(Training, ByteIdenticalReruns) {
  TempDir a, b, c;
  auto first = train_into(a.path(), 1);
  EXPECT_EQ(first, train_into(b.path(), 1));
  EXPECT_EQ(first, train_into(c.path(), 6));
  EXPECT_EQ(first.size(), 2u * 3u * 2u + 1u);
}

TEST(PoolStore, RoundTripAndLookup) {
  TempDir tmp;
  PoolStore store(tmp.path());
  FewShotPool pool;
  pool.seed = SeedKind::tool("gemini");
  pool.step_index = 1;
  pool.provenance = "abc";
  pool.exemplars.push_back({"e1", "img/e1.png", "Q?", "ans = 1", "1", pool.seed, 1});
  StepStats stats;
  stats.step_index = 1;
  stats.metric_value = 0.25;
  store.save("chartqa", pool, stats);
  auto back = store.load("chartqa", "tool-gemini", 1);
  EXPECT_EQ(back.exemplars, pool.exemplars);
  EXPECT_EQ(back.provenance, "abc");
  EXPECT_EQ(store.load_stats("chartqa", "tool-gemini", 1)->metric_value, 0.25);
  EXPECT_EQ(store.last_step("chartqa", "tool-gemini"), 1u);
  EXPECT_FALSE(store.last_step("chartqa", "pot").has_value());
  try {
    store.load("chartqa", "pot", 2);
    FAIL();
  } catch (const SelfPlayError& e) {
    std::string what = e.what();
    EXPECT_NE(what.find("seed pot"), std::string::npos);
    EXPECT_NE(what.find("step 2"), std::string::npos);
  }
}

TEST(Training, CachedRerunMakesNoBackendCalls) {
  TempDir tmp;
  auto t = SyntheticTask::build(20, [](std::size_t i) { return i % 2 == 0; }, [](std::size_t) { return true; });
  std::vector<SeedKind> seeds{SeedKind::pot()};
  std::size_t first_calls = 0;
  {
    ScriptedEngine e(t.backend_script, t.runner_script, true, tmp / "cache");
    run_training(*e.ctx, task(), seeds, t.examples, config(2, 2));
    first_calls = e.gateway->stats().backend_calls;
  }
  ScriptedEngine e(t.backend_script, t.runner_script, true, tmp / "cache");
  run_training(*e.ctx, task(), seeds, t.examples, config(2, 2));
  EXPECT_GT(first_calls, 0u);
  EXPECT_EQ(e.gateway->stats().backend_calls, 0u);
  EXPECT_EQ(e.backend->invocation_count(), 0u);
}

TEST(DirectPool, UsesLabeledTrainingExamples) {
  std::vector<VqaExample> train;
  for (int i = 0; i < 10; ++i) train.push_back(fixtures::make_example("d" + std::to_string(i), "Q?", {std::to_string(i)}));
  train[3].gold_answers.clear();
  auto all = make_direct_pool(train, 0, 1);
  EXPECT_EQ(all.size(), 9u);
  auto some = make_direct_pool(train, 4, 1);
  EXPECT_EQ(some.size(), 4u);
  for (const auto& x : some.exemplars) {
    EXPECT_EQ(x.seed, SeedKind::direct());
    EXPECT_EQ(x.answer, x.example_id.substr(1));
  }
}
