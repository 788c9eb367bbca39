// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned here.
// Exit status is the number of failed criteria.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "selfvqa/inference.hpp"
#include "selfvqa/metrics.hpp"
#include "selfvqa/sandbox.hpp"
#include "selfvqa/selfplay.hpp"
#include "selfvqa/util/hash.hpp"
#include "selfvqa/util/random.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace selfvqa;
using namespace std::chrono_literals;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr auto kMetricBudget = 10s;
constexpr auto kProgressionBudget = 60s;
constexpr auto kTimeoutGrace = 1s;
constexpr auto kGuestWall = 2s;
constexpr std::size_t kLongPairs = 1000;
constexpr std::size_t kRandomRaPairs = 200;
constexpr std::size_t kAggregationScenarios = 500;

// SHA-256 of the rendered instruction parts, computed from the template files
// with plain string replacement.
constexpr const char* kPotSha = "a5c27286d97388e10da389077ff749b7db64a88385c308137ef402ddb94a651c";
constexpr const char* kToolSha = "5b18a57136eac94b83fde86e3a537844d1de30531f1a7e22368092ed52c5109d";
constexpr const char* kJudgeSha = "297b779bb3083031139c3babda75d0ba627e2d8cdae3dddb0e99bd6ec7b923bd";

struct Check {
  bool ok = true;
  std::string detail;

  void expect(bool cond, const std::string& what) {
    if (!cond && ok) detail = what;
    ok = ok && cond;
  }
};

using Seconds = std::chrono::duration<double>;

std::string fmt_secs(Seconds s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2fs", s.count());
  return buf;
}

// Metric oracle: exhaustive short pairs plus long random pairs.
Check metric_oracle() {
  Check c;
  const auto start = std::chrono::steady_clock::now();
  auto strings = oracle::all_strings("aBc", 6);
  std::size_t pairs = 0;
  for (const auto& a : strings) {
    for (const auto& b : strings) {
      const std::vector<std::string> gold{b};
      ++pairs;
      if (metrics::anls_score(a, gold) != oracle::anls(a, gold)) {
        c.expect(false, "ANLS mismatch on '" + a + "' vs '" + b + "'");
      }
    }
  }
  rng::Engine eng(20260401);
  const std::string alphabet = "abcdeABCDE0123";
  auto rand_string = [&] {
    std::string s;
    auto n = 7 + rng::uniform_below(eng, 34);
    for (std::size_t i = 0; i < n; ++i) s.push_back(alphabet[rng::uniform_below(eng, alphabet.size())]);
    return s;
  };
  for (std::size_t i = 0; i < kLongPairs; ++i) {
    auto a = rand_string();
    // Half of the pairs are near-duplicates so both sides of the cutoff occur.
    auto b = i % 2 ? rand_string() : a;
    if (i % 2 == 0) {
      for (std::size_t k = 0, edits = rng::uniform_below(eng, a.size()); k < edits; ++k) {
        b[rng::uniform_below(eng, b.size())] = alphabet[rng::uniform_below(eng, alphabet.size())];
      }
    }
    const std::vector<std::string> gold{b};
    ++pairs;
    if (metrics::anls_score(a, gold) != oracle::anls(a, gold)) c.expect(false, "ANLS mismatch on long pair " + a);
  }
  const Seconds took = std::chrono::steady_clock::now() - start;
  c.expect(took < kMetricBudget, "took " + fmt_secs(took));
  if (c.ok) c.detail = std::to_string(pairs) + " pairs in " + fmt_secs(took);
  return c;
}

Check relaxed_accuracy_vectors() {
  Check c;
  c.expect(metrics::relaxed_match("104", "100"), "104 vs 100");
  c.expect(!metrics::relaxed_match("106", "100"), "106 vs 100");
  c.expect(metrics::relaxed_match("TWITTER", "twitter"), "case-insensitive string");
  c.expect(metrics::relaxed_match("0", "0"), "zero gold, exact");
  c.expect(!metrics::relaxed_match("0.001", "0"), "zero gold, off by 0.001");
  rng::Engine eng(99);
  for (std::size_t i = 0; i < kRandomRaPairs; ++i) {
    auto g = static_cast<std::int64_t>(rng::uniform_below(eng, 20001)) - 10000;
    auto spread = std::max<std::int64_t>(1, (g < 0 ? -g : g) / 10);
    auto p = g + static_cast<std::int64_t>(rng::uniform_below(eng, 2 * spread + 1)) - spread;
    if (metrics::relaxed_match(std::to_string(p), std::to_string(g)) != oracle::relaxed_match_int(p, g)) {
      c.expect(false, std::to_string(p) + " vs " + std::to_string(g));
    }
  }
  if (c.ok) c.detail = "5 documented vectors + " + std::to_string(kRandomRaPairs) + " random pairs";
  return c;
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (auto p = s.find(from); p != std::string::npos; p = s.find(from, p + to.size())) s.replace(p, from.size(), to);
  return s;
}

Check prompt_fidelity() {
  Check c;
  const auto& r = fixtures::renderer();
  const auto dir = fixtures::templates_dir();
  auto file = [&](const char* name) { return io::read_file(dir / name); };
  auto ex = fixtures::make_example("q1", "What is the third largest contributor?", {"Twitter"});

  auto pot = r.render_zero_shot(SeedKind::pot(), ex);
  c.expect(pot.size() == 3 && pot[0].payload == file("pot_zero_shot.txt"), "PoT differs from template file");
  c.expect(hash::sha256_hex(pot[0].payload) == kPotSha, "PoT golden hash");
  c.expect(pot[2].payload == "Question: What is the third largest contributor?", "PoT question part");

  auto tool = r.render_zero_shot(SeedKind::tool("vision"), ex);
  std::string iface = file("image_object_interface.txt");
  while (!iface.empty() && (iface.back() == '\n' || iface.back() == ' ')) iface.pop_back();
  const auto tool_golden = replace_all(file("tool_zero_shot.txt"), "{INTERFACE_DESCRIPTION_PROMPT}", iface);
  c.expect(tool[0].payload == tool_golden, "ToolApi differs from template file");
  c.expect(hash::sha256_hex(tool[0].payload) == kToolSha, "ToolApi golden hash");

  auto missing = r.render_refinement(RefinementClass::MissingAnswerVar, "x = 1", "", "", "ans");
  c.expect(missing[1].payload ==
               "This code is missing the final answer variable. The final answer should be assigned to the answer "
               "variable (ans). Correct the missing variable mistake and try again.\n",
           "missing-answer-var refinement");
  auto named = r.render_refinement(RefinementClass::UnresolvedName, "x = np.max(v)", "NameError",
                                   "name 'np' is not defined", "ans");
  c.expect(named[1].payload ==
               "This code has raised NamedError:  name 'np' is not defined. There might be missing import statements. "
               "Correct the NameError mistake and try again.\n",
           "name-error refinement");
  auto generic = r.render_refinement(RefinementClass::Generic, "x = 1/0", "ZeroDivisionError", "division by zero", "ans");
  c.expect(generic[1].payload ==
               "The code above is a valid Python code, however it raised ZeroDivisionError: division by zero\n"
               "Correct the mistake and try again please.\n",
           "generic refinement");
  c.expect(missing[0].payload == "x = 1" && named[0].payload == "x = np.max(v)", "refinement carries the program");

  const std::vector<std::string> answers{"Twitter", "Google", "Apple", "Pandora"};
  auto judge = r.render_judge(ex, answers);
  c.expect(judge[0].payload == file("judge.txt"), "judge differs from template file");
  c.expect(hash::sha256_hex(judge[0].payload) == kJudgeSha, "judge golden hash");
  c.expect(judge[3].payload == "Answer 1: Twitter\nAnswer 2: Google\nAnswer 3: Apple\nAnswer 4: Pandora",
           "judge candidate block");
  if (c.ok) c.detail = "PoT, ToolApi, 3 refinement classes, judge";
  return c;
}

TaskSpec synthetic_task() {
  TaskSpec t;
  t.name = "synthetic";
  t.metric_kind = MetricKind::RelaxedAccuracy;
  return t;
}

TrainConfig two_steps() {
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.shots_schedule = {0, 4};
  cfg.n_samples = 4;
  cfg.refinement_rounds = 2;
  cfg.rng_seed = 7;
  return cfg;
}

Check progression(const fs::path& pools_dir) {
  Check c;
  const auto start = std::chrono::steady_clock::now();
  auto t = fixtures::SyntheticTask::build(
      100, [](std::size_t i) { return i % 10 < 3; }, [](std::size_t i) { return i % 10 < 6; });
  fixtures::ScriptedEngine e(t.backend_script, t.runner_script);
  PoolStore store(pools_dir);
  const std::vector<SeedKind> seeds{SeedKind::pot()};
  auto runs = run_training(*e.ctx, synthetic_task(), seeds, t.examples, two_steps(), &store);
  const auto& h = runs.at("pot");
  const Seconds took = std::chrono::steady_clock::now() - start;
  c.expect(h.size() == 2, "expected two steps");
  if (h.size() == 2) {
    c.expect(h[0].second.metric_value == 0.30, "step 0 metric " + std::to_string(h[0].second.metric_value));
    c.expect(h[1].second.metric_value == 0.60, "step 1 metric " + std::to_string(h[1].second.metric_value));
    c.expect(h[0].first.size() == 30, "step 0 pool " + std::to_string(h[0].first.size()));
    c.expect(h[1].first.size() == 60, "step 1 pool " + std::to_string(h[1].first.size()));
  }
  c.expect(took < kProgressionBudget, "took " + fmt_secs(took));
  c.expect(e.gateway->stats().backend_calls > 0, "no scripted calls made");
  if (c.ok) c.detail = "30% -> 60%, pools 30 -> 60, " + fmt_secs(took);
  return c;
}

// Re-scores every persisted exemplar against the gold labels of its example.
struct AuditResult {
  std::size_t pools = 0, exemplars = 0, failures = 0;
  std::string first_failure;
};

AuditResult audit_pools(const fs::path& pools_root, const std::string& task, MetricKind kind,
                        const std::map<std::string, std::vector<std::string>>& gold_by_id) {
  AuditResult a;
  PoolStore store(pools_root);
  if (!fs::is_directory(pools_root / task)) return a;
  for (const auto& seed_dir : fs::directory_iterator(pools_root / task)) {
    for (const auto& step_dir : fs::directory_iterator(seed_dir.path())) {
      const auto step = static_cast<std::size_t>(std::stoul(step_dir.path().filename().string().substr(5)));
      auto pool = store.load(task, seed_dir.path().filename().string(), step);
      ++a.pools;
      for (const auto& ex : pool.exemplars) {
        ++a.exemplars;
        auto it = gold_by_id.find(ex.example_id);
        if (it == gold_by_id.end() || !metrics::is_correct(ex.answer, it->second, kind)) {
          if (!a.failures) a.first_failure = step_dir.path().string() + ": " + ex.example_id;
          ++a.failures;
        }
      }
    }
  }
  return a;
}

// Runs the CLI; returns its exit status.
int run_cli(const std::string& args) {
  const std::string cmd = std::string(SELFVQA_CLI) + " " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path copy_demo(const fs::path& into) {
  fs::create_directories(into);
  for (const auto& e : fs::directory_iterator(SELFVQA_DEMO_DIR)) {
    if (e.path().filename() == "run") continue;
    fs::copy(e.path(), into / e.path().filename(), fs::copy_options::recursive);
  }
  return into / "config.json";
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  if (!fs::exists(root)) return files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = io::read_file(e.path());
  }
  return files;
}

Check promotion_audit(const fs::path& synthetic_pools, const std::vector<fs::path>& demo_runs) {
  Check c;
  std::map<std::string, std::vector<std::string>> synthetic_golds;
  auto t = fixtures::SyntheticTask::build(100, [](std::size_t) { return true; }, [](std::size_t) { return true; });
  for (const auto& ex : t.examples) synthetic_golds[ex.id] = ex.gold_answers;
  AuditResult total;
  auto add = [&](const AuditResult& a, const std::string& where) {
    total.pools += a.pools;
    total.exemplars += a.exemplars;
    total.failures += a.failures;
    c.expect(a.failures == 0, where + ": " + a.first_failure);
    c.expect(a.pools > 0, where + ": no pools found");
  };
  add(audit_pools(synthetic_pools, "synthetic", MetricKind::RelaxedAccuracy, synthetic_golds), "synthetic");

  std::map<std::string, std::vector<std::string>> demo_golds;
  LoadOptions opts;
  opts.images = ImageStore(fs::path(SELFVQA_DEMO_DIR) / "data");
  for (const auto& ex : load_dataset(opts.images.root() / "train.jsonl", Split::Train, opts)) {
    demo_golds[ex.id] = ex.gold_answers;
  }
  for (const auto& run : demo_runs) {
    add(audit_pools(run / "pools", "demo-charts", MetricKind::RelaxedAccuracy, demo_golds), run.string());
  }
  // Negative control: a pool holding one wrong answer must be flagged.
  const auto tampered_root = synthetic_pools.parent_path() / "tampered-pools";
  FewShotPool bad;
  bad.seed = SeedKind::pot();
  bad.exemplars.push_back({"e001", "img/e001.png", "q", "ans = 2", "2", bad.seed, 0});
  PoolStore(tampered_root).save("synthetic", bad);
  c.expect(audit_pools(tampered_root, "synthetic", MetricKind::RelaxedAccuracy, synthetic_golds).failures == 1,
           "audit missed a tampered exemplar");
  if (c.ok) {
    c.detail = std::to_string(total.exemplars) + " exemplars in " + std::to_string(total.pools) + " pools, " +
               std::to_string(1 + demo_runs.size()) + " run dirs";
  }
  return c;
}

// Random candidate sets scored per pool and through every aggregator.
Check aggregation_properties() {
  Check c;
  rng::Engine eng(4242);
  const std::vector<std::string> vocab{"12", "12.0", "13", "Twitter", "twitter ", "Twiter", "Google", "0", "0.5", "1,000",
                                       "1000", "apple"};
  const std::vector<std::string> garbage{"", "I cannot decide.", "Final Answer: 2", "Choice: Answer 1",
                                         "final choice answer", "Answer 3: Apple", "Final Choice: Answer"};
  json judge_script = {{"rules", json::array({{{"role", "judge"}, {"replies", garbage}}})}};
  fixtures::ScriptedEngine e(judge_script, {{"programs", json::array()}});
  std::size_t judge_calls = 0, fallbacks = 0, ties = 0;
  for (std::size_t s = 0; s < kAggregationScenarios; ++s) {
    const auto kind = s % 2 ? MetricKind::Anls : MetricKind::RelaxedAccuracy;
    const std::size_t pools = 1 + rng::uniform_below(eng, 5);
    const std::size_t n = 1 + rng::uniform_below(eng, 12);
    std::vector<double> pool_sum(pools, 0.0);
    double oracle_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<std::string> golds{vocab[rng::uniform_below(eng, vocab.size())]};
      std::vector<inference::CandidateAnswer> cands;
      for (std::size_t p = 0; p < pools; ++p) {
        std::optional<std::string> a;
        if (rng::uniform_below(eng, 6) != 0) a = vocab[rng::uniform_below(eng, vocab.size())];
        cands.push_back(inference::CandidateAnswer::of(p + 1, a));
        if (a) pool_sum[p] += metrics::score_answer(*a, golds, kind);
      }
      const bool any = std::any_of(cands.begin(), cands.end(), [](const auto& x) { return x.answer.has_value(); });
      if (!any) continue;

      auto selective = [&](const inference::AggregateDecision& d) {
        return std::any_of(cands.begin(), cands.end(), [&](const auto& x) {
          return x.answer && *x.answer == d.final_answer && x.pool_id == d.chosen_pool_id;
        });
      };
      auto o = inference::oracle_select(cands, golds, kind);
      c.expect(selective(o), "oracle not selective");
      oracle_sum += metrics::score_answer(o.final_answer, golds, kind);

      auto m = inference::majority_vote(cands);
      c.expect(selective(m), "majority not selective");
      // Reference plurality: count normalized votes, earliest pool wins ties.
      std::map<std::string, std::pair<std::size_t, std::size_t>> votes;  // key -> (count, first pool)
      for (const auto& x : cands) {
        if (!x.answer) continue;
        auto& v = votes.try_emplace(inference::normalize_answer(*x.answer), 0, x.pool_id).first->second;
        ++v.first;
      }
      std::size_t best_count = 0, best_pool = 0;
      for (const auto& [k, v] : votes) {
        if (v.first > best_count || (v.first == best_count && v.second < best_pool)) {
          best_count = v.first;
          best_pool = v.second;
        }
      }
      c.expect(m.chosen_pool_id == best_pool, "majority tie-break or plurality wrong in scenario " + std::to_string(s));
      ties += m.tie;

      auto j = inference::judge_select(*e.ctx, fixtures::make_example("s", "Which one?", golds), cands, "gen");
      ++judge_calls;
      fallbacks += j.fallback.has_value();
      c.expect(selective(j), "judge not selective");
    }
    const double best_pool_metric = *std::max_element(pool_sum.begin(), pool_sum.end()) / static_cast<double>(n);
    c.expect(oracle_sum / static_cast<double>(n) >= best_pool_metric,
             "oracle below best pool in scenario " + std::to_string(s));
  }
  c.expect(judge_calls > 0 && fallbacks == judge_calls,
           "judge fallback engaged on " + std::to_string(fallbacks) + "/" + std::to_string(judge_calls));
  if (c.ok) {
    c.detail = std::to_string(kAggregationScenarios) + " scenarios, " + std::to_string(ties) + " majority ties, judge fallback " +
               std::to_string(fallbacks) + "/" + std::to_string(judge_calls);
  }
  return c;
}

Check determinism(const fs::path& a_dir, const fs::path& b_dir) {
  Check c;
  auto a = copy_demo(a_dir), b = copy_demo(b_dir);
  c.expect(run_cli("train --config " + a.string() + " --deterministic") == 0, "first train failed");
  c.expect(run_cli("train --config " + b.string() + " --deterministic") == 0, "second train failed");
  auto pa = tree(a_dir / "run" / "pools"), pb = tree(b_dir / "run" / "pools");
  auto sa = tree(a_dir / "run" / "stats"), sb = tree(b_dir / "run" / "stats");
  c.expect(!pa.empty() && !sa.empty(), "no outputs written");
  c.expect(pa == pb, "pool files differ");
  c.expect(sa == sb, "stats CSVs differ");
  if (c.ok) c.detail = std::to_string(pa.size() + sa.size()) + " files byte-identical";
  return c;
}

Check sandbox_limits() {
  Check c;
  sandbox::ProcessRunner runner({SELFVQA_BRIDGE_STUB});
  sandbox::GuestProgram prog;
  prog.source = "loop";
  prog.origin.example_id = "acceptance";
  sandbox::RunLimits lim;
  lim.wall_timeout = kGuestWall;
  const auto start = std::chrono::steady_clock::now();
  auto r = runner.run(prog, "img/x.png", nullptr, lim);
  const Seconds took = std::chrono::steady_clock::now() - start;
  c.expect(r.status == RunStatus::Timeout, "nonterminating guest status " + std::string(to_string(r.status)));
  c.expect(took < kGuestWall + kTimeoutGrace, "timeout reported after " + fmt_secs(took));

  sandbox::ToolHandle tool = [](ToolMethod, const std::optional<std::string>&) -> std::string { return "1"; };
  prog.source = "ask a\nask b\nask c\nask d\nstore";
  lim.max_tool_calls = 3;
  auto b = runner.run(prog, "img/x.png", &tool, lim);
  c.expect(b.status == RunStatus::Error && b.error_type == "ToolBudgetExceeded",
           "budget overrun gave " + b.error_type.value_or("no error"));
  if (c.ok) c.detail = "Timeout after " + fmt_secs(took) + " (wall " + fmt_secs(kGuestWall) + "), ToolBudgetExceeded";
  return c;
}

}  // namespace

int main() {
  fixtures::TempDir tmp;
  int failed = 0;
  auto report = [&](const char* name, const std::function<Check()>& fn) {
    Check c;
    try {
      c = fn();
    } catch (const std::exception& e) {
      c.ok = false;
      c.detail = std::string("exception: ") + e.what();
    }
    std::cout << (c.ok ? "PASS" : "FAIL") << "  " << name << "  (" << c.detail << ")" << std::endl;
    failed += c.ok ? 0 : 1;
  };

  report("metric-oracle-equivalence", metric_oracle);
  report("relaxed-accuracy-vectors", relaxed_accuracy_vectors);
  report("prompt-fidelity", prompt_fidelity);
  report("selfplay-progression-30-60", [&] { return progression(tmp / "synthetic-pools"); });
  report("determinism-train", [&] { return determinism(tmp / "demo-a", tmp / "demo-b"); });
  report("promotion-soundness-audit",
         [&] { return promotion_audit(tmp / "synthetic-pools", {tmp / "demo-a" / "run", tmp / "demo-b" / "run"}); });
  report("aggregation-properties", aggregation_properties);
  report("sandbox-limits", sandbox_limits);

  std::cout << (failed ? "FAILED " : "ALL PASSED ") << "(" << failed << " of 8 criteria failed)" << std::endl;
  return failed;
}
