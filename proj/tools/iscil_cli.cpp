// Copyright 2026 The IsCiL Desk Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line front end: pretrain, run, unlearn, report.
//
// Exit codes: 0 success, 2 config error, 3 numeric failure, 1 anything else.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "iscil/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace iscil;

namespace {

int cmd_pretrain(const std::string& config, std::uint64_t seed, const fs::path& out) {
  const auto cfg = harness::config_from_json(harness::parse_config_text(harness::read_file(config)));
  fs::create_directories(out);
  const auto base = harness::obtain_base(cfg, out, seed);
  const auto goals = env::GoalTable(cfg.env);
  const auto policy = [&](const env::PolicyInput& in) { return to_action(nn::forward(base, nullptr, in.obs.values, in.goal_embedding)); };
  double gc = 0;
  const auto tasks = harness::pretrain_tasks(cfg.env, cfg.scenario.pretrain_objects, cfg.scenario.task_length);
  for (const auto& t : tasks) gc += env::evaluate_gc(policy, cfg.env, goals, t, cfg.eval_episodes, harness::eval_seed(seed, t.id));
  std::printf("pretrained base written to %s; mean GC over %zu pre-training tasks: %.4f\n", (out / "base.json").c_str(), tasks.size(),
              gc / static_cast<double>(tasks.size()));
  return 0;
}

int cmd_run(const std::string& config, std::uint64_t seed, const fs::path& out, int stop_after) {
  const auto rec = harness::run_experiment(harness::read_file(config), seed, out,
                                           stop_after >= 0 ? std::optional<int>(stop_after) : std::nullopt);
  if (rec.completed < rec.scores.num_stages()) {
    std::printf("stopped after %d of %d stages; rerun to resume\n", rec.completed, rec.scores.num_stages());
    return 0;
  }
  std::printf("FWT %.4f  BWT %.4f  AUC %.4f  (provenance %s)\n", rec.summary.fwt, rec.summary.bwt, rec.summary.auc,
              rec.provenance.c_str());
  if (!rec.summary.flagged.empty())
    std::printf("warning: %zu task(s) used the single-difference BWT case (p = i + 1)\n", rec.summary.flagged.size());
  return 0;
}

int cmd_unlearn(std::uint64_t seed, const fs::path& out, int task) {
  const auto event = harness::unlearn_checkpoint(out, seed, task);
  std::printf("%s\n", event.dump().c_str());
  return 0;
}

// The report config lists run directories: {"version":1,"runs":["dir", ...]}.
int cmd_report(const std::string& config, const fs::path& out) {
  const auto j = harness::parse_config_text(harness::read_file(config));
  if (j.value("version", 0) != harness::kConfigVersion || !j.contains("runs") || !j.at("runs").is_array())
    throw ConfigError("report config needs version 1 and a 'runs' array");
  const fs::path root = fs::path(config).parent_path();
  std::vector<json> results;
  for (const auto& r : j.at("runs")) {
    fs::path dir = r.get<std::string>();
    if (dir.is_relative()) dir = root / dir;
    if (!fs::exists(dir / "results.json")) throw ConfigError("report: no results.json in " + dir.string());
    results.push_back(json::parse(harness::read_file(dir / "results.json")));
  }
  const auto rows = harness::aggregate(results);
  fs::create_directories(out);
  harness::write_file(out / "report.csv", harness::report_csv(rows));
  const auto table = harness::report_table(rows);
  harness::write_file(out / "report.txt", table);
  std::fputs(table.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual imitation learning with skill prototypes and adapters"};
  app.require_subcommand(1);

  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  int stop_after = -1;
  int task = -1;
  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON config file")->required();
    sub->add_option("--seed", seed, "experiment seed")->required();
    sub->add_option("--out", out, "output directory")->required();
  };
  auto* pre = app.add_subcommand("pretrain", "pre-train the base policy");
  common(pre);
  auto* run = app.add_subcommand("run", "run (or resume) a continual-learning experiment");
  common(run);
  run->add_option("--stop-after", stop_after, "stop once this many stages are complete");
  auto* unl = app.add_subcommand("unlearn", "remove a task from the checkpoint in a run directory");
  common(unl);
  unl->add_option("--task", task, "task id to unlearn")->required();
  auto* rep = app.add_subcommand("report", "aggregate results across runs (--seed is recorded only)");
  common(rep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*pre) return cmd_pretrain(config, seed, out);
    if (*run) return cmd_run(config, seed, out, stop_after);
    if (*unl) return cmd_unlearn(seed, out, task);
    if (*rep) return cmd_report(config, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericFailure& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
