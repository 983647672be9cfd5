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

// Prototype-based skill incremental learning over a frozen base policy.
//
// Per stage, every sub-goal present in the retained demonstrations becomes a new
// skill: its transitions are encoded, an adapter is initialized (optionally
// from the skill that the memory retrieves most often for that data), trained
// with the imitation loss, and stored next to a k-means prototype of the
// embeddings. At run time the current (obs, goal) is encoded, the best matching
// prototype picks the adapter, and the adapted base network produces the action.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "iscil/common.hpp"
#include "iscil/envsim.hpp"
#include "iscil/numnet.hpp"
#include "iscil/retrieval.hpp"
#include "iscil/training.hpp"

namespace iscil::core {

enum class DonorSelection { kMode, kAverageScore };

struct IsCilConfig {
  int rank = 4;
  std::size_t bases = 20;
  TrainBudget budget{};
  bool adapter_init = true;
  DonorSelection donor = DonorSelection::kMode;
  double lora_init_std = 0.02;
  int kmeans_max_iters = 100;
  std::size_t encoder_dim = 32;
  double goal_weight = 1.0;

  bool operator==(const IsCilConfig&) const = default;
};

struct IsCilState {
  nn::Mlp base;  // frozen after pre-training
  retrieval::PrototypeMemory memory;
  retrieval::StateEncoder encoder;
  IsCilConfig config;
  std::uint64_t seed = 0;

  bool operator==(const IsCilState&) const = default;
};

inline IsCilState make_state(nn::Mlp base, const env::EnvSpec& spec, IsCilConfig config, std::uint64_t seed) {
  IsCilState s;
  s.encoder = retrieval::make_encoder(static_cast<std::size_t>(spec.obs_dim()), static_cast<std::size_t>(spec.goal_embed_dim),
                                      config.encoder_dim, seed, config.goal_weight);
  s.base = std::move(base);
  s.config = config;
  s.seed = seed;
  return s;
}

struct NewSkillReport {
  retrieval::SkillId skill;
  int subgoal = 0;
  std::set<int> tasks;
  std::optional<retrieval::SkillId> donor;
  double final_loss = 0;
  std::size_t transitions = 0;
  std::size_t bases = 0;
  bool k_reduced = false;
};

struct StageReport {
  int stage = 0;
  std::vector<NewSkillReport> skills;
};

inline nlohmann::json to_json(const StageReport& r) {
  nlohmann::json skills = nlohmann::json::array();
  for (const auto& s : r.skills) {
    skills.push_back({{"skill", s.skill.str()},
                      {"subgoal", s.subgoal},
                      {"tasks", s.tasks},
                      {"donor", s.donor ? nlohmann::json(s.donor->str()) : nlohmann::json(nullptr)},
                      {"final_loss", s.final_loss},
                      {"transitions", s.transitions},
                      {"bases", s.bases},
                      {"k_reduced", s.k_reduced}});
  }
  return {{"stage", r.stage}, {"skills", skills}};
}

inline std::vector<retrieval::Vector> encode_rows(const retrieval::StateEncoder& enc,
                                                  const std::vector<const env::Transition*>& rows,
                                                  const env::GoalTable& goals) {
  std::vector<retrieval::Vector> out;
  out.reserve(rows.size());
  for (const auto* t : rows) out.push_back(retrieval::encode(enc, t->obs, goals[t->goal]));
  return out;
}

inline StageReport learn_stage(IsCilState& state, const StageDataset& stage, const env::GoalTable& goals) {
  // Sub-goal -> retained transitions (pooled across the stage's tasks) and contributing tasks.
  std::map<int, std::vector<const env::Transition*>> by_goal;
  std::map<int, std::set<int>> tasks_of_goal;
  for (const auto& d : stage.demos) {
    for (const auto& t : d.transitions) {
      by_goal[t.goal].push_back(&t);
      tasks_of_goal[t.goal].insert(d.task_id);
    }
  }
  if (by_goal.empty()) throw EmptyStageError("learn_stage: stage " + std::to_string(stage.stage_index) + " has no retained transitions");

  StageReport report;
  report.stage = stage.stage_index;
  const auto& cfg = state.config;
  const auto stage_key = static_cast<std::uint64_t>(stage.stage_index);
  for (const auto& [goal, rows] : by_goal) {
    const auto goal_key = static_cast<std::uint64_t>(goal);
    const retrieval::SkillId id{stage.stage_index, goal};
    const auto embeddings = encode_rows(state.encoder, rows, goals);

    NewSkillReport sr;
    sr.skill = id;
    sr.subgoal = goal;
    sr.tasks = tasks_of_goal[goal];
    sr.transitions = rows.size();

    nn::LoraAdapter adapter;
    if (cfg.adapter_init && !state.memory.empty()) {
      const auto donor = cfg.donor == DonorSelection::kMode ? retrieval::mode_retrieved(state.memory, embeddings)
                                                            : retrieval::best_average_score(state.memory, embeddings);
      adapter = state.memory.find(donor)->adapter;  // deep copy
      sr.donor = donor;
    } else {
      adapter = nn::make_lora(state.base, cfg.rank, derive_seed(state.seed, Stream::kAdapterInit, {stage_key, goal_key}),
                              cfg.lora_init_std);
    }

    const auto table = make_table(rows, goals);
    train_adapter(state.base, adapter, table, cfg.budget, derive_seed(state.seed, Stream::kBatch, {stage_key, goal_key}),
                  "iscil skill " + id.str());
    sr.final_loss = nn::imitation_loss(state.base, &adapter, whole(table));
    check_loss(sr.final_loss, "iscil skill " + id.str());

    retrieval::KMeansResult km;
    auto proto = retrieval::build_prototype(embeddings, cfg.bases, id, {sr.tasks, goal, stage.stage_index},
                                            derive_seed(state.seed, Stream::kKMeans, {stage_key, goal_key}),
                                            cfg.kmeans_max_iters, &km);
    sr.bases = proto.bases.size();
    sr.k_reduced = km.k_reduced;
    state.memory.add_skill(std::move(proto), std::move(adapter));
    report.skills.push_back(std::move(sr));
  }
  return report;
}

// Adapter chosen for (obs, goal), or nullptr when the memory is empty.
inline const nn::LoraAdapter* select_adapter(const IsCilState& state, std::span<const double> obs,
                                             std::span<const double> goal) {
  if (state.memory.empty()) return nullptr;
  const auto s = retrieval::encode(state.encoder, obs, goal);
  return &retrieval::retrieve(state.memory, s).adapter;
}

inline env::Action act(const IsCilState& state, std::span<const double> obs, std::span<const double> goal) {
  return to_action(nn::forward(state.base, select_adapter(state, obs, goal), obs, goal));
}

inline std::vector<retrieval::SkillEntry> unlearn_task(IsCilState& state, int task_id) {
  return state.memory.remove_skills([task_id](const retrieval::SkillPrototype& p) { return retrieval::tagged_with_task(p, task_id); });
}

inline env::ActFn policy_of(const IsCilState& state) {
  return [&state](const env::PolicyInput& in) { return act(state, in.obs.values, in.goal_embedding); };
}

// GC of a task given only its sub-goal sequence; nothing is trained.
inline double evaluate_unseen(const IsCilState& state, const env::EnvSpec& spec, const env::GoalTable& goals,
                              const env::Task& task, int episodes, std::uint64_t seed) {
  return env::evaluate_gc(policy_of(state), spec, goals, task, episodes, seed);
}

// ---------------------------------------------------------------------------
// Checkpoint: base + encoder + prototype bank/adapter registry + config hash.
// ---------------------------------------------------------------------------

inline nlohmann::json config_to_json(const IsCilConfig& c) {
  return {{"rank", c.rank},
          {"bases", c.bases},
          {"updates_per_skill", c.budget.updates},
          {"batch_size", c.budget.batch_size},
          {"lr", c.budget.adam.lr},
          {"beta1", c.budget.adam.beta1},
          {"beta2", c.budget.adam.beta2},
          {"eps", c.budget.adam.eps},
          {"adapter_init", c.adapter_init},
          {"donor", c.donor == DonorSelection::kMode ? "mode" : "average_score"},
          {"lora_init_std", c.lora_init_std},
          {"kmeans_max_iters", c.kmeans_max_iters},
          {"encoder_dim", c.encoder_dim},
          {"goal_weight", c.goal_weight}};
}

inline IsCilConfig config_from_json(const nlohmann::json& j) {
  IsCilConfig c;
  c.rank = j.value("rank", c.rank);
  c.bases = j.value("bases", c.bases);
  c.budget.updates = j.value("updates_per_skill", c.budget.updates);
  c.budget.batch_size = j.value("batch_size", c.budget.batch_size);
  c.budget.adam.lr = j.value("lr", c.budget.adam.lr);
  c.budget.adam.beta1 = j.value("beta1", c.budget.adam.beta1);
  c.budget.adam.beta2 = j.value("beta2", c.budget.adam.beta2);
  c.budget.adam.eps = j.value("eps", c.budget.adam.eps);
  c.adapter_init = j.value("adapter_init", c.adapter_init);
  const auto donor = j.value("donor", std::string("mode"));
  if (donor == "mode") c.donor = DonorSelection::kMode;
  else if (donor == "average_score") c.donor = DonorSelection::kAverageScore;
  else throw ConfigError("iscil: unknown donor selection '" + donor + "'");
  c.lora_init_std = j.value("lora_init_std", c.lora_init_std);
  c.kmeans_max_iters = j.value("kmeans_max_iters", c.kmeans_max_iters);
  c.encoder_dim = j.value("encoder_dim", c.encoder_dim);
  c.goal_weight = j.value("goal_weight", c.goal_weight);
  if (c.rank < 1 || c.bases < 1 || c.budget.updates < 0 || c.budget.batch_size < 1)
    throw ConfigError("iscil: rank, bases and batch_size must be positive");
  return c;
}

inline nlohmann::json to_json(const IsCilState& s) {
  const auto cfg = config_to_json(s.config);
  return {{"format", "iscil-state"},
          {"version", 1},
          {"config", cfg},
          {"config_hash", hex64(fnv1a64(cfg.dump()))},
          {"seed", s.seed},
          {"base", nn::to_json(s.base)},
          {"encoder", retrieval::to_json(s.encoder)},
          {"bank", retrieval::to_json(s.memory)}};
}

inline IsCilState state_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "iscil-state" || j.value("version", 0) != 1) throw FormatError("not a version-1 IsCiL state");
  IsCilState s;
  s.config = config_from_json(j.at("config"));
  if (j.at("config_hash").get<std::string>() != hex64(fnv1a64(config_to_json(s.config).dump())))
    throw FormatError("IsCiL state: config hash mismatch");
  s.seed = j.at("seed").get<std::uint64_t>();
  s.base = nn::mlp_from_json(j.at("base"));
  s.encoder = retrieval::encoder_from_json(j.at("encoder"));
  s.memory = retrieval::memory_from_json(j.at("bank"));
  return s;
}

// Method-interface wrapper used by the harness.
class IsCilMethod : public Method {
 public:
  IsCilMethod(nn::Mlp base, const env::EnvSpec& spec, IsCilConfig config, std::uint64_t seed)
      : state_(make_state(std::move(base), spec, config, seed)) {}

  std::string name() const override { return "iscil"; }
  nlohmann::json train_stage(const StageDataset& stage, const Context& ctx) override {
    return to_json(learn_stage(state_, stage, ctx.goals));
  }
  env::Action act(const env::PolicyInput& in) const override { return core::act(state_, in.obs.values, in.goal_embedding); }
  bool supports_unlearning() const override { return true; }
  std::vector<std::string> unlearn(int task_id) override {
    std::vector<std::string> out;
    for (const auto& e : unlearn_task(state_, task_id)) out.push_back(e.prototype.id.str());
    return out;
  }
  nlohmann::json save() const override { return to_json(state_); }
  void load(const nlohmann::json& j) override { state_ = state_from_json(j); }

  const IsCilState& state() const { return state_; }
  IsCilState& state() { return state_; }

 private:
  IsCilState state_;
};

}  // namespace iscil::core
