// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "selfvqa/cli/commands.hpp"
#include "selfvqa/version.hpp"

namespace {

void add_common(CLI::App* cmd, selfvqa::cli::CommonOptions& opt) {
  cmd->add_option("--config", opt.config, "engine config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--task", opt.task, "task name (optional when only one is configured)");
  cmd->add_option("--set", opt.overrides, "override a config leaf: key.path=value")->take_all();
  cmd->add_flag("--deterministic", opt.deterministic, "single worker, reproducible ordering");
  cmd->add_option("--parallelism", opt.parallelism, "worker count for training and inference");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-play few-shot environments for visual question answering"};
  app.set_version_flag("--version", std::string(selfvqa::kEngineVersion));
  app.require_subcommand(1);

  selfvqa::cli::CommonOptions train_opt;
  auto* train = app.add_subcommand("train", "build few-shot pools from a training split");
  add_common(train, train_opt);

  selfvqa::cli::EvalOptions eval_opt;
  auto* eval = app.add_subcommand("eval", "run pools on a split and aggregate their answers");
  add_common(eval, eval_opt.common);
  eval->add_option("--split", eval_opt.split, "validation or test")->capture_default_str();
  eval->add_option("--aggregator", eval_opt.aggregators, "majority, judge, oracle (repeatable)")->take_all();

  selfvqa::cli::ReportOptions report_opt;
  std::string report_csv;
  auto* report = app.add_subcommand("report", "compare run directories");
  report->add_option("runs", report_opt.run_dirs, "run directories")->required();
  report->add_option("--csv", report_csv, "also write the table as CSV");

  selfvqa::cli::InspectOptions inspect_opt;
  auto* pools = app.add_subcommand("pools", "pool utilities");
  pools->require_subcommand(1);
  auto* inspect = pools->add_subcommand("inspect", "print exemplars of persisted pools");
  add_common(inspect, inspect_opt.common);
  inspect->add_option("--seed", inspect_opt.seed, "seed id, e.g. pot, tool-gemini, direct");
  inspect->add_option("--step", inspect_opt.step, "step index (default: last)");

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) return selfvqa::cli::cmd_train(train_opt, std::cout, std::cerr);
  if (eval->parsed()) return selfvqa::cli::cmd_eval(eval_opt, std::cout, std::cerr);
  if (report->parsed()) {
    if (!report_csv.empty()) report_opt.csv_out = report_csv;
    return selfvqa::cli::cmd_report(report_opt, std::cout, std::cerr);
  }
  if (inspect->parsed()) return selfvqa::cli::cmd_pools_inspect(inspect_opt, std::cout, std::cerr);
  return 1;
}
