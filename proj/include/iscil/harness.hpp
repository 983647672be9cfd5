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

#pragma once

// Scenario streams, pre-training, the stage loop and experiment persistence.
//
// Run directory layout:
//   config.json         copy of the config bytes
//   base.json           pre-trained base checkpoint
//   demos/stage_NN.jsonl
//   scores.csv          score matrix, rewritten after every stage
//   stage_reports.jsonl one line per completed stage
//   checkpoint.json     completed stage count + method state (resume point)
//   bank.json           IsCiL prototype bank (IsCiL runs only)
//   results.json        metric summary and provenance
//   timings.jsonl       wall time per stage (kept out of the deterministic files)

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "iscil/baselines.hpp"
#include "iscil/common.hpp"
#include "iscil/envsim.hpp"
#include "iscil/iscil.hpp"
#include "iscil/metrics.hpp"
#include "iscil/numnet.hpp"
#include "iscil/training.hpp"

namespace iscil::harness {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Scenario streams
// ---------------------------------------------------------------------------

enum class ScenarioKind { kComplete, kSemi, kIncomplete };

struct Schedule {
  int every = 5;
  int count = 1;

  bool operator==(const Schedule&) const = default;
};

struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::kComplete;
  int num_stages = 20;
  int tasks_per_stage = 1;
  int demos_per_task = 4;
  int task_length = 4;
  std::vector<int> pretrain_objects{0, 1, 2, 3};
  std::optional<Schedule> unseen;   // new evaluation-only tasks
  std::optional<Schedule> unlearn;  // task removal events

  bool operator==(const ScenarioSpec&) const = default;
};

struct ScenarioStream {
  std::vector<StageDataset> stages;
  std::map<int, std::vector<env::Task>> unseen;  // stage -> tasks first evaluated there
  std::map<int, std::vector<int>> unlearn;       // stage -> task ids removed after training
};

inline const char* kind_name(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::kComplete: return "complete";
    case ScenarioKind::kSemi: return "semi";
    case ScenarioKind::kIncomplete: return "incomplete";
  }
  return "?";
}

inline ScenarioKind kind_from_name(const std::string& s) {
  if (s == "complete") return ScenarioKind::kComplete;
  if (s == "semi") return ScenarioKind::kSemi;
  if (s == "incomplete") return ScenarioKind::kIncomplete;
  throw ConfigError("unknown scenario kind '" + s + "'");
}

inline void validate(const ScenarioSpec& s, const env::EnvSpec& spec) {
  if (s.num_stages < 1) throw ConfigError("scenario: num_stages must be >= 1");
  if (s.tasks_per_stage < 1) throw ConfigError("scenario: tasks_per_stage must be >= 1");
  if (s.demos_per_task < 1) throw ConfigError("scenario: demos_per_task must be >= 1");
  if (s.task_length < 1 || s.task_length > spec.num_objects) throw ConfigError("scenario: task_length out of range");
  if (s.kind == ScenarioKind::kSemi && s.num_stages % 2 != 0) throw ConfigError("scenario: semi streams need an even stage count");
  if (s.pretrain_objects.size() < 2) throw ConfigError("scenario: need at least 2 pre-training objects");
  std::set<int> seen;
  for (int o : s.pretrain_objects) {
    if (o < 0 || o >= spec.num_objects) throw ConfigError("scenario: pre-training object out of range");
    if (!seen.insert(o).second) throw ConfigError("scenario: duplicate pre-training object");
  }
  if (static_cast<int>(seen.size()) >= spec.num_objects) throw ConfigError("scenario: pre-training objects must be a proper subset");
  for (const auto* sch : {&s.unseen, &s.unlearn})
    if (*sch && ((*sch)->every < 1 || (*sch)->count < 1)) throw ConfigError("scenario: schedule values must be positive");
}

// True at the last stage of every `every`-stage block.
inline bool due(const std::optional<Schedule>& s, int stage) { return s && (stage + 1) % s->every == 0; }

inline ScenarioStream build_stream(const ScenarioSpec& sc, const env::EnvSpec& spec, std::uint64_t seed) {
  validate(sc, spec);
  auto pool = env::enumerate_tasks(spec, sc.task_length);
  Rng rng(derive_seed(seed, Stream::kStream));
  std::shuffle(pool.begin(), pool.end(), rng);

  const int distinct_stages = sc.kind == ScenarioKind::kSemi ? sc.num_stages / 2 : sc.num_stages;
  const std::size_t needed = static_cast<std::size_t>(distinct_stages * sc.tasks_per_stage);
  std::size_t unseen_needed = 0;
  for (int s = 0; s < sc.num_stages; ++s)
    if (due(sc.unseen, s)) unseen_needed += static_cast<std::size_t>(sc.unseen->count);
  if (needed + unseen_needed > pool.size()) throw ConfigError("scenario: not enough distinct tasks in the pool");

  ScenarioStream out;
  std::size_t next = 0;
  std::vector<std::vector<env::Task>> stage_tasks;
  for (int s = 0; s < distinct_stages; ++s) {
    std::vector<env::Task> ts(pool.begin() + static_cast<std::ptrdiff_t>(next),
                              pool.begin() + static_cast<std::ptrdiff_t>(next + static_cast<std::size_t>(sc.tasks_per_stage)));
    next += static_cast<std::size_t>(sc.tasks_per_stage);
    std::sort(ts.begin(), ts.end(), [](const env::Task& a, const env::Task& b) { return a.id < b.id; });
    stage_tasks.push_back(std::move(ts));
  }
  if (sc.kind == ScenarioKind::kSemi)
    for (int s = 0; s < distinct_stages; ++s) stage_tasks.push_back(stage_tasks[static_cast<std::size_t>(s)]);

  const auto len = static_cast<std::size_t>(sc.task_length);
  for (int s = 0; s < sc.num_stages; ++s) {
    StageDataset st;
    st.stage_index = s;
    st.tasks = stage_tasks[static_cast<std::size_t>(s)];
    for (std::size_t k = 0; k < st.tasks.size(); ++k) {
      const auto& task = st.tasks[k];
      // Ordinal of the task within its pass; drives the round-robin corruption.
      const std::size_t ordinal = static_cast<std::size_t>(s % distinct_stages) * st.tasks.size() + k;
      std::set<int> corruption;
      if (sc.kind == ScenarioKind::kIncomplete) {
        corruption.insert(task.subgoals[ordinal % len]);
      } else if (sc.kind == ScenarioKind::kSemi) {
        const std::size_t j = ordinal % len;
        corruption.insert(task.subgoals[s < distinct_stages ? j : (j + len / 2) % len]);
      }
      for (int d = 0; d < sc.demos_per_task; ++d) {
        const auto demo_seed = derive_seed(seed, Stream::kDemo,
                                           {static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(task.id),
                                            static_cast<std::uint64_t>(d)});
        st.demos.push_back(env::generate_demonstration(spec, task, demo_seed, corruption));
      }
    }
    out.stages.push_back(std::move(st));
  }

  for (int s = 0; s < sc.num_stages; ++s) {
    if (due(sc.unseen, s)) {
      std::vector<env::Task> ts(pool.begin() + static_cast<std::ptrdiff_t>(next),
                                pool.begin() + static_cast<std::ptrdiff_t>(next + static_cast<std::size_t>(sc.unseen->count)));
      next += static_cast<std::size_t>(sc.unseen->count);
      out.unseen[s] = std::move(ts);
    }
  }

  // Unlearn events pick among tasks trained before the event stage that do not
  // come back later and were not removed already.
  std::set<int> removed;
  for (int s = 0; s < sc.num_stages; ++s) {
    if (!due(sc.unlearn, s)) continue;
    std::set<int> future;
    for (int f = s; f < sc.num_stages; ++f)
      for (const auto& t : out.stages[static_cast<std::size_t>(f)].tasks) future.insert(t.id);
    std::vector<int> eligible;
    for (int p = 0; p < s; ++p)
      for (const auto& t : out.stages[static_cast<std::size_t>(p)].tasks)
        if (!future.count(t.id) && !removed.count(t.id) &&
            std::find(eligible.begin(), eligible.end(), t.id) == eligible.end())
          eligible.push_back(t.id);
    Rng pick(derive_seed(seed, Stream::kStream, {static_cast<std::uint64_t>(s)}));
    std::shuffle(eligible.begin(), eligible.end(), pick);
    eligible.resize(std::min(eligible.size(), static_cast<std::size_t>(sc.unlearn->count)));
    std::sort(eligible.begin(), eligible.end());
    for (int id : eligible) removed.insert(id);
    if (!eligible.empty()) out.unlearn[s] = eligible;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int updates = 20000;
  std::size_t batch_size = 64;
  int demos_per_task = 6;
  std::vector<std::size_t> hidden{128, 128};
  nn::AdamConfig adam{};

  bool operator==(const PretrainConfig&) const = default;
};

inline json to_json(const PretrainConfig& c) {
  return {{"updates", c.updates}, {"batch_size", c.batch_size}, {"demos_per_task", c.demos_per_task}, {"hidden", c.hidden}, {"lr", c.adam.lr}};
}

inline PretrainConfig pretrain_config_from_json(const json& j) {
  PretrainConfig c;
  c.updates = j.value("updates", c.updates);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.demos_per_task = j.value("demos_per_task", c.demos_per_task);
  c.hidden = j.value("hidden", c.hidden);
  c.adam.lr = j.value("lr", c.adam.lr);
  if (c.updates < 0 || c.batch_size < 1 || c.demos_per_task < 1 || c.hidden.empty())
    throw ConfigError("pretrain: updates >= 0, batch_size >= 1, demos_per_task >= 1 and a hidden layer are required");
  return c;
}

inline std::vector<env::Task> pretrain_tasks(const env::EnvSpec& spec, const std::vector<int>& objects, int task_length) {
  return env::enumerate_tasks(spec, std::min(task_length, static_cast<int>(objects.size())), objects);
}

// Behavior cloning of the full base on every task over `objects`.
inline nn::Mlp pretrain(const env::EnvSpec& spec, const std::vector<int>& objects, int task_length, const PretrainConfig& cfg,
                        std::uint64_t seed) {
  if (objects.size() < 2) throw ConfigError("pretrain: need at least 2 objects");
  const auto goals = env::GoalTable(spec);
  StageDataset data;
  for (const auto& t : pretrain_tasks(spec, objects, task_length))
    for (int d = 0; d < cfg.demos_per_task; ++d)
      data.demos.push_back(env::generate_demonstration(
          spec, t, derive_seed(seed, Stream::kPretrain, {static_cast<std::uint64_t>(t.id), static_cast<std::uint64_t>(d)})));
  std::vector<std::size_t> dims{static_cast<std::size_t>(spec.policy_input_dim())};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(2);
  auto base = nn::make_mlp(dims, nn::Activation::kRelu, derive_seed(seed, Stream::kPretrain));
  const auto table = make_table(all_transitions(data), goals);
  Rng rng(derive_seed(seed, Stream::kBatch, {~0ULL}));
  auto adam = nn::make_adam(base, cfg.adam);
  for (int u = 0; u < cfg.updates; ++u) {
    auto g = nn::grad(base, nullptr, gather(table, sample_indices(rng, table.size(), cfg.batch_size)), nn::Trainable::kFullBase);
    check_loss(g.loss, "pretrain");
    nn::adam_step(adam, base, *g.base);
  }
  if (!nn::all_finite(base)) throw NumericFailure("pretrain: parameters diverged");
  return base;
}

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

inline TrainBudget budget_from_json(const json& j, int default_updates) {
  TrainBudget b;
  b.updates = j.value("updates", default_updates);
  b.batch_size = j.value("batch_size", b.batch_size);
  b.adam.lr = j.value("lr", b.adam.lr);
  if (b.updates < 0 || b.batch_size < 1 || !(b.adam.lr > 0)) throw ConfigError("method: invalid training budget");
  return b;
}

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"iscil", "seqft", "seqlora", "ewc", "l2m", "l2m_g",
                                              "tail_task", "tail_goal", "clpu", "er", "multitask"};
  return names;
}

inline std::unique_ptr<Method> make_method(const json& m, nn::Mlp base, const env::EnvSpec& spec, std::uint64_t seed) {
  const auto name = m.value("name", std::string());
  using namespace baselines;
  if (name == "iscil") return std::make_unique<core::IsCilMethod>(std::move(base), spec, core::config_from_json(m), seed);
  if (name == "seqft") return std::make_unique<SeqFtMethod>(std::move(base), budget_from_json(m, 2000), seed);
  if (name == "seqlora")
    return std::make_unique<SeqLoraMethod>(std::move(base), m.value("rank", 64), budget_from_json(m, 2000), seed);
  if (name == "ewc")
    return std::make_unique<EwcMethod>(std::move(base), budget_from_json(m, 2000), seed, m.value("gamma", 0.9), m.value("alpha", 10.0),
                                       m.value("fisher_samples", std::size_t{256}));
  if (name == "l2m" || name == "l2m_g")
    return std::make_unique<L2mMethod>(std::move(base), spec, name == "l2m" ? QueryMode::kState : QueryMode::kStateGoal,
                                       m.value("pool_size", std::size_t{100}), m.value("rank", 4), budget_from_json(m, 2000), seed);
  if (name == "tail_task" || name == "clpu")
    return std::make_unique<TailMethod>(std::move(base), IdentifierKind::kTask, m.value("rank", 16), budget_from_json(m, 1500), seed,
                                        name == "clpu");
  if (name == "tail_goal")
    return std::make_unique<TailMethod>(std::move(base), IdentifierKind::kSubgoal, m.value("rank", 4), budget_from_json(m, 500), seed);
  if (name == "er") {
    if (!m.contains("quota")) throw ConfigError("er: 'quota' is required");
    const auto q = m.at("quota").get<long long>();
    if (q < 0) throw ConfigError("er: quota must be >= 0");
    return std::make_unique<ErMethod>(std::move(base), static_cast<std::size_t>(q), false, budget_from_json(m, 2000), seed);
  }
  if (name == "multitask") return std::make_unique<ErMethod>(std::move(base), 0, true, budget_from_json(m, 2000), seed);
  throw ConfigError("unknown method '" + name + "'");
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

inline constexpr int kConfigVersion = 1;

struct RunConfig {
  json method;
  env::EnvSpec env;
  ScenarioSpec scenario;
  PretrainConfig pretrain;
  std::optional<std::string> base_checkpoint;  // reuse a pre-trained base instead of pre-training
  int eval_episodes = 10;
};

inline std::optional<Schedule> schedule_from_json(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  Schedule s;
  s.every = j.at(key).value("every", s.every);
  s.count = j.at(key).value("count", s.count);
  return s;
}

inline json schedule_to_json(const std::optional<Schedule>& s) {
  if (!s) return nullptr;
  return {{"every", s->every}, {"count", s->count}};
}

inline ScenarioSpec scenario_from_json(const json& j) {
  ScenarioSpec s;
  s.kind = kind_from_name(j.value("kind", std::string("complete")));
  s.num_stages = j.value("num_stages", s.num_stages);
  s.tasks_per_stage = j.value("tasks_per_stage", s.tasks_per_stage);
  s.demos_per_task = j.value("demos_per_task", s.demos_per_task);
  s.task_length = j.value("task_length", s.task_length);
  s.pretrain_objects = j.value("pretrain_objects", s.pretrain_objects);
  s.unseen = schedule_from_json(j, "unseen");
  s.unlearn = schedule_from_json(j, "unlearn");
  return s;
}

inline json to_json(const ScenarioSpec& s) {
  return {{"kind", kind_name(s.kind)},
          {"num_stages", s.num_stages},
          {"tasks_per_stage", s.tasks_per_stage},
          {"demos_per_task", s.demos_per_task},
          {"task_length", s.task_length},
          {"pretrain_objects", s.pretrain_objects},
          {"unseen", schedule_to_json(s.unseen)},
          {"unlearn", schedule_to_json(s.unlearn)}};
}

inline RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  if (j.value("version", 0) != kConfigVersion) throw ConfigError("config: unsupported or missing version (expected 1)");
  RunConfig c;
  try {
    c.method = j.at("method");
    c.env = env::spec_from_json(j.value("env", json::object()));
    env::validate(c.env);
    c.scenario = scenario_from_json(j.value("scenario", json::object()));
    validate(c.scenario, c.env);
    c.pretrain = pretrain_config_from_json(j.value("pretrain", json::object()));
    if (j.contains("base_checkpoint") && !j.at("base_checkpoint").is_null())
      c.base_checkpoint = j.at("base_checkpoint").get<std::string>();
    c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const InvalidTaskError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.eval_episodes < 1) throw ConfigError("config: eval_episodes must be >= 1");
  if (!c.method.is_object()) throw ConfigError("config: 'method' must be an object");
  const auto name = c.method.value("name", std::string());
  if (std::find(method_names().begin(), method_names().end(), name) == method_names().end())
    throw ConfigError("config: unknown method '" + name + "'");
  return c;
}

inline json parse_config_text(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& bytes) {
  const auto tmp = fs::path(p.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << bytes;
  }
  fs::rename(tmp, p);
}

inline std::string provenance_hash(const std::string& config_bytes, std::uint64_t seed) {
  return hex64(fnv1a64(config_bytes + "\nseed=" + std::to_string(seed)));
}

// Identifies everything that must match for runs to be aggregated together.
inline std::string scenario_key(const RunConfig& c) {
  return hex64(fnv1a64(json{{"scenario", to_json(c.scenario)}, {"env", env::spec_to_json(c.env)}, {"episodes", c.eval_episodes}}.dump()));
}

// ---------------------------------------------------------------------------
// Stage loop
// ---------------------------------------------------------------------------

// Evaluation seed of a task: independent of the stage so that an unchanged
// policy scores identically at every stage.
inline std::uint64_t eval_seed(std::uint64_t seed, int task_id) {
  return derive_seed(seed, Stream::kEval, {static_cast<std::uint64_t>(task_id)});
}

struct LoopState {
  metrics::ScoreMatrix scores;
  std::vector<json> reports;  // one per completed stage
  int completed = 0;
};

inline json to_json(const LoopState& s) {
  std::ostringstream csv;
  metrics::write_csv(csv, s.scores);
  return {{"completed", s.completed}, {"scores", csv.str()}, {"reports", s.reports}};
}

inline LoopState loop_state_from_json(const json& j) {
  LoopState s;
  s.completed = j.at("completed").get<int>();
  std::istringstream csv(j.at("scores").get<std::string>());
  s.scores = metrics::read_csv(csv);
  s.reports = j.at("reports").get<std::vector<json>>();
  return s;
}

struct LoopOptions {
  int eval_episodes = 10;
  std::optional<int> stop_after;  // stop once this many stages are complete
  std::function<void(const LoopState&, const Method&, double wall_seconds)> on_stage;
};

// Trains, unlearns and evaluates stage by stage, continuing from state.completed.
inline void run_stages(Method& method, const ScenarioStream& stream, const Context& ctx, LoopState& state, const LoopOptions& opt) {
  const int n = static_cast<int>(stream.stages.size());
  if (state.scores.num_stages() != n) state.scores = metrics::ScoreMatrix(n);

  // Rebuild the availability bookkeeping for stages already done.
  std::map<int, env::Task> active;  // task id -> task, evaluated every stage
  std::set<int> removed;
  const auto advance = [&](int s) {
    for (const auto& t : stream.stages[static_cast<std::size_t>(s)].tasks) active[t.id] = t;
    if (const auto it = stream.unseen.find(s); it != stream.unseen.end())
      for (const auto& t : it->second) active.emplace(t.id, t);
    if (const auto it = stream.unlearn.find(s); it != stream.unlearn.end())
      for (int id : it->second) {
        active.erase(id);
        removed.insert(id);
      }
  };
  for (int s = 0; s < state.completed; ++s) advance(s);

  for (int s = state.completed; s < n; ++s) {
    if (opt.stop_after && s >= *opt.stop_after) return;
    const auto t0 = std::chrono::steady_clock::now();
    const auto& stage = stream.stages[static_cast<std::size_t>(s)];
    json report{{"stage", s}, {"method", method.name()}};
    try {
      report["train"] = method.train_stage(stage, ctx);
    } catch (const NumericFailure&) {
      throw;
    } catch (const Error& e) {
      report["error"] = e.what();
    }
    for (const auto& t : stage.tasks) state.scores.mark_trained(t.id, s);
    if (const auto it = stream.unseen.find(s); it != stream.unseen.end())
      for (const auto& t : it->second) {
        auto& row = state.scores.row(t.id);
        if (row.trained.empty()) row.unseen = true;
      }
    if (const auto it = stream.unlearn.find(s); it != stream.unlearn.end()) {
      json events = json::array();
      for (int id : it->second) {
        json e{{"task", id}, {"supported", method.supports_unlearning()}};
        if (method.supports_unlearning()) e["removed"] = method.unlearn(id);
        events.push_back(e);
        state.scores.set_horizon(id, s - 1);
      }
      report["unlearn"] = events;
    }
    advance(s);

    std::size_t fallback_before = 0;
    const auto* tail = dynamic_cast<const baselines::TailMethod*>(&method);
    if (tail) fallback_before = tail->fallbacks();
    const auto policy = method.policy();
    for (const auto& [id, task] : active) {
      state.scores.set(id, s, env::evaluate_gc(policy, ctx.spec, ctx.goals, task, opt.eval_episodes, eval_seed(ctx.seed, id)));
      if (!removed.count(id)) state.scores.set_horizon(id, n - 1);
    }
    if (tail) report["base_fallback_actions"] = tail->fallbacks() - fallback_before;

    state.reports.push_back(report);
    state.completed = s + 1;
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opt.on_stage) opt.on_stage(state, method, wall);
  }
}

// ---------------------------------------------------------------------------
// Experiments on disk
// ---------------------------------------------------------------------------

struct ResultsRecord {
  metrics::ScoreMatrix scores;
  std::vector<json> reports;
  std::vector<double> wall_seconds;
  std::string provenance;
  metrics::Summary summary;
  int completed = 0;
};

inline json summary_to_json(const metrics::Summary& s) {
  json per = json::object();
  for (const auto& [task, m] : s.per_task)
    per[std::to_string(task)] = {{"fwt", m.fwt}, {"bwt", m.bwt}, {"auc", m.auc}, {"bwt_flagged", m.bwt_flagged}};
  return {{"fwt", s.fwt}, {"bwt", s.bwt}, {"auc", s.auc}, {"bwt_flagged_tasks", s.flagged}, {"per_task", per}};
}

inline nn::Mlp obtain_base(const RunConfig& cfg, const fs::path& out, std::uint64_t seed) {
  if (cfg.base_checkpoint) return nn::load_base_checkpoint(json::parse(read_file(*cfg.base_checkpoint)));
  const auto path = out / "base.json";
  const auto hash = hex64(fnv1a64(json{{"pretrain", to_json(cfg.pretrain)},
                                       {"env", env::spec_to_json(cfg.env)},
                                       {"objects", cfg.scenario.pretrain_objects},
                                       {"seed", seed}}
                                      .dump()));
  if (fs::exists(path)) {
    const auto j = json::parse(read_file(path));
    if (j.value("config_hash", "") == hash) return nn::load_base_checkpoint(j);
  }
  auto base = pretrain(cfg.env, cfg.scenario.pretrain_objects, cfg.scenario.task_length, cfg.pretrain, seed);
  write_file(path, nn::base_checkpoint(base, hash).dump());
  return base;
}

inline std::string reports_jsonl(const std::vector<json>& reports) {
  std::string s;
  for (const auto& r : reports) s += r.dump() + "\n";
  return s;
}

// Runs (or resumes) the experiment described by the config bytes in `out`.
inline ResultsRecord run_experiment(const std::string& config_bytes, std::uint64_t seed, const fs::path& out,
                                    std::optional<int> stop_after = std::nullopt) {
  const auto cfg = config_from_json(parse_config_text(config_bytes));
  fs::create_directories(out / "demos");
  const auto provenance = provenance_hash(config_bytes, seed);

  const auto ckpt_path = out / "checkpoint.json";
  std::optional<json> ckpt;
  if (fs::exists(ckpt_path)) {
    auto j = json::parse(read_file(ckpt_path));
    if (j.value("provenance", "") != provenance)
      throw ConfigError("run directory holds a checkpoint from a different config or seed");
    ckpt = std::move(j);
  }
  write_file(out / "config.json", config_bytes);

  const auto ctx = make_context(cfg.env, seed);
  const auto stream = build_stream(cfg.scenario, cfg.env, seed);
  for (const auto& st : stream.stages) {
    char name[32];
    std::snprintf(name, sizeof name, "stage_%02d.jsonl", st.stage_index);
    if (fs::exists(out / "demos" / name)) continue;
    std::ostringstream demos;
    env::write_demonstrations(demos, cfg.env, st.demos);
    write_file(out / "demos" / name, demos.str());
  }

  auto method = make_method(cfg.method, obtain_base(cfg, out, seed), cfg.env, seed);
  LoopState state;
  std::vector<double> walls;
  if (ckpt) {
    method->load(ckpt->at("method"));
    state = loop_state_from_json(ckpt->at("loop"));
    std::ifstream tin(out / "timings.jsonl");
    std::string line;
    while (std::getline(tin, line) && static_cast<int>(walls.size()) < state.completed)
      walls.push_back(json::parse(line).at("seconds").get<double>());
  }

  LoopOptions opt;
  opt.eval_episodes = cfg.eval_episodes;
  opt.stop_after = stop_after;
  opt.on_stage = [&](const LoopState& st, const Method& m, double wall) {
    walls.push_back(wall);
    std::ostringstream csv;
    metrics::write_csv(csv, st.scores);
    write_file(out / "scores.csv", csv.str());
    write_file(out / "stage_reports.jsonl", reports_jsonl(st.reports));
    std::string timings;
    for (std::size_t i = 0; i < walls.size(); ++i) timings += json{{"stage", i}, {"seconds", walls[i]}}.dump() + "\n";
    write_file(out / "timings.jsonl", timings);
    write_file(ckpt_path, json{{"format", "iscil-run"},
                               {"version", 1},
                               {"provenance", provenance},
                               {"loop", to_json(st)},
                               {"method", m.save()}}
                              .dump());
  };
  try {
    run_stages(*method, stream, ctx, state, opt);
  } catch (const NumericFailure&) {
    write_file(out / "stage_reports.jsonl", reports_jsonl(state.reports));
    throw;
  }

  ResultsRecord rec;
  rec.scores = state.scores;
  rec.reports = state.reports;
  rec.wall_seconds = walls;
  rec.provenance = provenance;
  rec.completed = state.completed;
  if (state.completed == static_cast<int>(stream.stages.size())) {
    rec.summary = metrics::summarize(state.scores);
    if (const auto* is = dynamic_cast<const core::IsCilMethod*>(method.get()))
      write_file(out / "bank.json", retrieval::to_json(is->state().memory).dump());
    write_file(out / "results.json", json{{"provenance", provenance},
                                          {"method", cfg.method.at("name")},
                                          {"seed", seed},
                                          {"scenario_key", scenario_key(cfg)},
                                          {"scenario", to_json(cfg.scenario)},
                                          {"summary", summary_to_json(rec.summary)},
                                          {"unseen_summary", summary_to_json(metrics::summarize_unseen(state.scores))}}
                                         .dump(2));
  }
  return rec;
}

// Applies task unlearning to the checkpoint stored in a run directory.
inline json unlearn_checkpoint(const fs::path& out, std::uint64_t seed, int task_id) {
  const auto config_bytes = read_file(out / "config.json");
  const auto cfg = config_from_json(parse_config_text(config_bytes));
  const auto ckpt_path = out / "checkpoint.json";
  if (!fs::exists(ckpt_path)) throw ConfigError("no checkpoint in " + out.string());
  auto ckpt = json::parse(read_file(ckpt_path));
  if (ckpt.value("provenance", "") != provenance_hash(config_bytes, seed)) throw ConfigError("checkpoint does not match config and seed");
  auto method = make_method(cfg.method, obtain_base(cfg, out, seed), cfg.env, seed);
  method->load(ckpt.at("method"));
  if (!method->supports_unlearning()) throw ConfigError("method '" + method->name() + "' does not support unlearning");
  const auto removed = method->unlearn(task_id);
  ckpt["method"] = method->save();
  write_file(ckpt_path, ckpt.dump());
  if (const auto* is = dynamic_cast<const core::IsCilMethod*>(method.get()))
    write_file(out / "bank.json", retrieval::to_json(is->state().memory).dump());
  const json event{{"task", task_id}, {"removed", removed}};
  std::ofstream(out / "unlearn_events.jsonl", std::ios::app) << event.dump() << "\n";
  return event;
}

// ---------------------------------------------------------------------------
// Reports across runs
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string method;
  std::size_t seeds = 0;
  metrics::MeanStd fwt, bwt, auc;
};

// Aggregates results.json records per method (mean and population stddev over seeds).
inline std::vector<ReportRow> aggregate(const std::vector<json>& results) {
  if (results.empty()) throw ConfigError("report: no results");
  const auto key = results.front().at("scenario_key").get<std::string>();
  std::map<std::string, std::vector<const json*>> by_method;
  std::vector<std::string> order;
  for (const auto& r : results) {
    if (r.at("scenario_key").get<std::string>() != key)
      throw ConfigError("report: results come from different scenarios (scenario_key " + r.at("scenario_key").get<std::string>() +
                        " vs " + key + ")");
    const auto m = r.at("method").get<std::string>();
    if (!by_method.count(m)) order.push_back(m);
    by_method[m].push_back(&r);
  }
  std::vector<ReportRow> rows;
  for (const auto& m : order) {
    std::vector<double> f, b, a;
    for (const auto* r : by_method[m]) {
      const auto& s = r->at("summary");
      f.push_back(s.at("fwt").get<double>());
      b.push_back(s.at("bwt").get<double>());
      a.push_back(s.at("auc").get<double>());
    }
    rows.push_back({m, f.size(), metrics::mean_std(f), metrics::mean_std(b), metrics::mean_std(a)});
  }
  return rows;
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string s = "# mean and population stddev (divisor n) across seeds\nmethod,seeds,fwt_mean,fwt_std,bwt_mean,bwt_std,auc_mean,auc_std\n";
  for (const auto& r : rows) {
    s += r.method + "," + std::to_string(r.seeds);
    for (const auto& v : {r.fwt, r.bwt, r.auc}) s += "," + metrics::format_cell(v.mean) + "," + metrics::format_cell(v.stddev);
    s += "\n";
  }
  return s;
}

inline std::string report_table(const std::vector<ReportRow>& rows) {
  std::string s;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %5s  %-15s  %-15s  %-15s\n", "method", "seeds", "FWT", "BWT", "AUC");
  s += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %5zu  %6.3f ± %-6.3f  %6.3f ± %-6.3f  %6.3f ± %-6.3f\n", r.method.c_str(), r.seeds,
                  r.fwt.mean, r.fwt.stddev, r.bwt.mean, r.bwt.stddev, r.auc.mean, r.auc.stddev);
    s += buf;
  }
  return s;
}

}  // namespace iscil::harness
