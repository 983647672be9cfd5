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

// Comparison methods over the same base policy: sequential fine-tuning (full
// and rank-64 adapter), online EWC, an L2M-style key/adapter pool, TAIL with
// task or sub-goal identifiers, experience replay, the multi-task store, and
// CLPU unlearning on top of TAIL-task.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
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

namespace iscil::baselines {

using nn::LoraAdapter;
using nn::Mlp;
using nn::Vector;

inline env::Action base_act(const Mlp& base, const LoraAdapter* adapter, const env::PolicyInput& in) {
  return to_action(nn::forward(base, adapter, in.obs.values, in.goal_embedding));
}

// ---------------------------------------------------------------------------
// Seq-FT / Seq-LoRA
// ---------------------------------------------------------------------------

// Full-base imitation training on the stage's transitions.
inline void seqft_stage(Mlp& base, const StageDataset& stage, const TrainBudget& budget, const env::GoalTable& goals,
                        std::uint64_t seed) {
  const auto table = make_table(all_transitions(stage), goals);
  if (table.size() == 0) throw EmptyStageError("seqft: stage has no transitions");
  Rng rng(derive_seed(seed, Stream::kBatch, {static_cast<std::uint64_t>(stage.stage_index)}));
  auto adam = nn::make_adam(base, budget.adam);
  for (int u = 0; u < budget.updates; ++u) {
    const auto batch = gather(table, sample_indices(rng, table.size(), budget.batch_size));
    auto g = nn::grad(base, nullptr, batch, nn::Trainable::kFullBase);
    check_loss(g.loss, "seqft");
    nn::adam_step(adam, base, *g.base);
  }
}

inline void seqlora_stage(const Mlp& base, LoraAdapter& adapter, const StageDataset& stage, const TrainBudget& budget,
                          const env::GoalTable& goals, std::uint64_t seed) {
  const auto table = make_table(all_transitions(stage), goals);
  if (table.size() == 0) throw EmptyStageError("seqlora: stage has no transitions");
  train_adapter(base, adapter, table, budget, derive_seed(seed, Stream::kBatch, {static_cast<std::uint64_t>(stage.stage_index)}),
                "seqlora");
}

class SeqFtMethod : public Method {
 public:
  SeqFtMethod(Mlp base, TrainBudget budget, std::uint64_t seed) : base_(std::move(base)), budget_(budget), seed_(seed) {}
  std::string name() const override { return "seqft"; }
  nlohmann::json train_stage(const StageDataset& stage, const Context& ctx) override {
    seqft_stage(base_, stage, budget_, ctx.goals, seed_);
    return {{"stage", stage.stage_index}};
  }
  env::Action act(const env::PolicyInput& in) const override { return base_act(base_, nullptr, in); }
  nlohmann::json save() const override { return {{"base", nn::to_json(base_)}}; }
  void load(const nlohmann::json& j) override { base_ = nn::mlp_from_json(j.at("base")); }
  const Mlp& base() const { return base_; }

 private:
  Mlp base_;
  TrainBudget budget_;
  std::uint64_t seed_;
};

class SeqLoraMethod : public Method {
 public:
  SeqLoraMethod(Mlp base, int rank, TrainBudget budget, std::uint64_t seed)
      : base_(std::move(base)), adapter_(nn::make_lora(base_, rank, derive_seed(seed, Stream::kAdapterInit))), budget_(budget), seed_(seed) {}
  std::string name() const override { return "seqlora"; }
  nlohmann::json train_stage(const StageDataset& stage, const Context& ctx) override {
    seqlora_stage(base_, adapter_, stage, budget_, ctx.goals, seed_);
    return {{"stage", stage.stage_index}};
  }
  env::Action act(const env::PolicyInput& in) const override { return base_act(base_, &adapter_, in); }
  nlohmann::json save() const override { return {{"base", nn::to_json(base_)}, {"adapter", nn::to_json(adapter_)}}; }
  void load(const nlohmann::json& j) override {
    base_ = nn::mlp_from_json(j.at("base"));
    adapter_ = nn::lora_from_json(j.at("adapter"));
  }
  const LoraAdapter& adapter() const { return adapter_; }

 private:
  Mlp base_;
  LoraAdapter adapter_;
  TrainBudget budget_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Online EWC
// ---------------------------------------------------------------------------

struct FisherState {
  Mlp fisher;  // running diagonal F̄, same shape as the base
  Mlp anchor;  // θ* from the end of the previous stage
  double gamma = 0.9;
  double alpha = 10.0;
  bool initialized = false;

  bool operator==(const FisherState&) const = default;
};

inline FisherState make_fisher(const Mlp& base, double gamma = 0.9, double alpha = 10.0) {
  return FisherState{nn::zeros_like(base), base, gamma, alpha, false};
}

// F̄ <- gamma * F̄ + (1 - gamma) * F, or F itself on the first stage.
inline void fisher_ema(FisherState& st, const Mlp& stage_fisher) {
  if (!st.initialized) {
    st.fisher = stage_fisher;
    st.initialized = true;
    return;
  }
  auto fb = nn::blocks(st.fisher);
  const auto sb = nn::blocks(stage_fisher);
  for (std::size_t b = 0; b < fb.size(); ++b)
    for (std::size_t k = 0; k < fb[b].size(); ++k) fb[b][k] = st.gamma * fb[b][k] + (1 - st.gamma) * sb[b][k];
}

// Empirical diagonal Fisher: mean over samples of the squared per-sample gradient
// of the imitation loss.
inline Mlp empirical_fisher(const Mlp& base, const TransitionTable& table, std::size_t max_samples, std::uint64_t seed) {
  Mlp acc = nn::zeros_like(base);
  std::vector<std::size_t> idx;
  if (table.size() <= max_samples) {
    for (std::size_t i = 0; i < table.size(); ++i) idx.push_back(i);
  } else {
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, table.size() - 1);
    for (std::size_t i = 0; i < max_samples; ++i) idx.push_back(pick(rng));
  }
  for (std::size_t i : idx) {
    const auto g = nn::grad(base, nullptr, gather(table, {i}), nn::Trainable::kFullBase);
    auto ab = nn::blocks(acc);
    const auto gb = nn::blocks(*g.base);
    for (std::size_t b = 0; b < ab.size(); ++b)
      for (std::size_t k = 0; k < ab[b].size(); ++k) ab[b][k] += gb[b][k] * gb[b][k];
  }
  for (auto s : nn::blocks(acc))
    for (auto& v : s) v /= static_cast<double>(idx.size());
  return acc;
}

inline double ewc_penalty(const Mlp& base, const FisherState& st) {
  if (!st.initialized) return 0.0;
  const auto pb = nn::blocks(base);
  const auto fb = nn::blocks(st.fisher);
  const auto ab = nn::blocks(st.anchor);
  double s = 0;
  for (std::size_t b = 0; b < pb.size(); ++b)
    for (std::size_t k = 0; k < pb[b].size(); ++k) {
      const double d = pb[b][k] - ab[b][k];
      s += fb[b][k] * d * d;
    }
  return st.alpha * s;
}

// Seq-FT loop plus the gradient of alpha * Σ F̄ (θ - θ*)^2; afterwards the stage
// Fisher is folded into F̄ and θ* moves to the final parameters.
inline void ewc_stage(Mlp& base, FisherState& st, const StageDataset& stage, const TrainBudget& budget,
                      const env::GoalTable& goals, std::uint64_t seed, std::size_t fisher_samples = 256) {
  const auto table = make_table(all_transitions(stage), goals);
  if (table.size() == 0) throw EmptyStageError("ewc: stage has no transitions");
  const auto stage_key = static_cast<std::uint64_t>(stage.stage_index);
  Rng rng(derive_seed(seed, Stream::kBatch, {stage_key}));
  auto adam = nn::make_adam(base, budget.adam);
  for (int u = 0; u < budget.updates; ++u) {
    const auto batch = gather(table, sample_indices(rng, table.size(), budget.batch_size));
    auto g = nn::grad(base, nullptr, batch, nn::Trainable::kFullBase);
    check_loss(g.loss, "ewc");
    if (st.initialized) {
      auto gb = nn::blocks(*g.base);
      const auto pb = nn::blocks(base);
      const auto fb = nn::blocks(st.fisher);
      const auto ab = nn::blocks(st.anchor);
      for (std::size_t b = 0; b < gb.size(); ++b)
        for (std::size_t k = 0; k < gb[b].size(); ++k) gb[b][k] += 2 * st.alpha * fb[b][k] * (pb[b][k] - ab[b][k]);
    }
    nn::adam_step(adam, base, *g.base);
  }
  if (!nn::all_finite(base)) throw NumericFailure("ewc: parameters diverged");
  fisher_ema(st, empirical_fisher(base, table, fisher_samples, derive_seed(seed, Stream::kFisher, {stage_key})));
  st.anchor = base;
}

class EwcMethod : public Method {
 public:
  EwcMethod(Mlp base, TrainBudget budget, std::uint64_t seed, double gamma = 0.9, double alpha = 10.0,
            std::size_t fisher_samples = 256)
      : base_(std::move(base)), fisher_(make_fisher(base_, gamma, alpha)), budget_(budget), seed_(seed), fisher_samples_(fisher_samples) {}
  std::string name() const override { return "ewc"; }
  nlohmann::json train_stage(const StageDataset& stage, const Context& ctx) override {
    ewc_stage(base_, fisher_, stage, budget_, ctx.goals, seed_, fisher_samples_);
    return {{"stage", stage.stage_index}};
  }
  env::Action act(const env::PolicyInput& in) const override { return base_act(base_, nullptr, in); }
  nlohmann::json save() const override {
    return {{"base", nn::to_json(base_)},
            {"fisher", nn::to_json(fisher_.fisher)},
            {"anchor", nn::to_json(fisher_.anchor)},
            {"gamma", fisher_.gamma},
            {"alpha", fisher_.alpha},
            {"initialized", fisher_.initialized}};
  }
  void load(const nlohmann::json& j) override {
    base_ = nn::mlp_from_json(j.at("base"));
    fisher_.fisher = nn::mlp_from_json(j.at("fisher"));
    fisher_.anchor = nn::mlp_from_json(j.at("anchor"));
    fisher_.gamma = j.at("gamma").get<double>();
    fisher_.alpha = j.at("alpha").get<double>();
    fisher_.initialized = j.at("initialized").get<bool>();
  }

 private:
  Mlp base_;
  FisherState fisher_;
  TrainBudget budget_;
  std::uint64_t seed_;
  std::size_t fisher_samples_;
};

// ---------------------------------------------------------------------------
// L2M: key/adapter pool with nearest-key routing
// ---------------------------------------------------------------------------

enum class QueryMode { kState, kStateGoal };

struct L2mPool {
  std::vector<Vector> keys;
  std::vector<LoraAdapter> adapters;
  std::vector<std::int64_t> usage;
  QueryMode mode = QueryMode::kState;
  double key_lr = 0.01;

  std::size_t size() const { return keys.size(); }
  bool operator==(const L2mPool&) const = default;
};

inline std::size_t query_dim(QueryMode mode, const env::EnvSpec& spec) {
  return static_cast<std::size_t>(mode == QueryMode::kState ? spec.obs_dim() : spec.policy_input_dim());
}

inline L2mPool make_l2m_pool(const Mlp& base, std::size_t size, int rank, QueryMode mode, std::size_t qdim, std::uint64_t seed,
                             double key_lr = 0.01) {
  L2mPool p;
  p.mode = mode;
  p.key_lr = key_lr;
  Rng rng(derive_seed(seed, Stream::kL2mKeys));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < size; ++i) {
    Vector k(qdim);
    for (auto& x : k) x = normal(rng);
    p.keys.push_back(retrieval::normalized(k));
    p.adapters.push_back(nn::make_lora(base, rank, derive_seed(seed, Stream::kAdapterInit, {i})));
    p.usage.push_back(0);
  }
  return p;
}

inline Vector l2m_query(QueryMode mode, std::span<const double> obs, std::span<const double> goal) {
  return retrieval::normalized(mode == QueryMode::kState ? Vector(obs.begin(), obs.end()) : nn::concat(obs, goal));
}

// Nearest key by cosine similarity; earliest key wins ties.
inline std::size_t l2m_retrieve(const L2mPool& pool, std::span<const double> query) {
  std::size_t best = 0;
  double best_sim = -INFINITY;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const double sim = retrieval::dot(pool.keys[i], query) / retrieval::norm2(pool.keys[i]);
    if (sim > best_sim) {
      best_sim = sim;
      best = i;
    }
  }
  return best;
}

// One ascent step on cos(key, query) toward a unit query.
inline void l2m_pull_key(Vector& key, std::span<const double> query, double lr) {
  const double n = retrieval::norm2(key);
  const double c = retrieval::dot(key, query) / n;
  for (std::size_t i = 0; i < key.size(); ++i) key[i] += lr * (query[i] / n - c * key[i] / (n * n));
}

// Routes a batch of unit queries: every query picks its key with the keys as
// they were before the batch, then each chosen key takes one ascent step per
// matched query. Returns the chosen key per query.
inline std::vector<std::size_t> l2m_route(L2mPool& pool, const std::vector<Vector>& queries) {
  std::vector<std::size_t> chosen;
  chosen.reserve(queries.size());
  for (const auto& q : queries) chosen.push_back(l2m_retrieve(pool, q));
  for (std::size_t i = 0; i < queries.size(); ++i) {
    ++pool.usage[chosen[i]];
    l2m_pull_key(pool.keys[chosen[i]], queries[i], pool.key_lr);
  }
  return chosen;
}

inline void l2m_stage(L2mPool& pool, const Mlp& base, const StageDataset& stage, const TrainBudget& budget,
                      const env::GoalTable& goals, std::uint64_t seed) {
  const auto rows = all_transitions(stage);
  const auto table = make_table(rows, goals);
  if (table.size() == 0) throw EmptyStageError("l2m: stage has no transitions");
  std::vector<Vector> queries;
  queries.reserve(rows.size());
  for (const auto* t : rows) queries.push_back(l2m_query(pool.mode, t->obs, goals[t->goal]));

  Rng rng(derive_seed(seed, Stream::kBatch, {static_cast<std::uint64_t>(stage.stage_index)}));
  std::map<std::size_t, nn::AdamState> adam;
  for (int u = 0; u < budget.updates; ++u) {
    const auto idx = sample_indices(rng, table.size(), budget.batch_size);
    std::vector<Vector> q;
    q.reserve(idx.size());
    for (auto i : idx) q.push_back(queries[i]);
    const auto keys = l2m_route(pool, q);
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < idx.size(); ++i) groups[keys[i]].push_back(idx[i]);
    for (const auto& [key, members] : groups) {
      auto& ad = pool.adapters[key];
      auto it = adam.find(key);
      if (it == adam.end()) it = adam.emplace(key, nn::make_adam(ad, budget.adam)).first;
      auto g = nn::grad(base, &ad, gather(table, members), nn::Trainable::kAdapterOnly);
      check_loss(g.loss, "l2m");
      nn::adam_step(it->second, ad, *g.adapter);
    }
  }
}

class L2mMethod : public Method {
 public:
  L2mMethod(Mlp base, const env::EnvSpec& spec, QueryMode mode, std::size_t pool_size, int rank, TrainBudget budget,
            std::uint64_t seed)
      : base_(std::move(base)),
        pool_(make_l2m_pool(base_, pool_size, rank, mode, query_dim(mode, spec), seed)),
        budget_(budget),
        seed_(seed) {}
  std::string name() const override { return pool_.mode == QueryMode::kState ? "l2m" : "l2m_g"; }
  nlohmann::json train_stage(const StageDataset& stage, const Context& ctx) override {
    l2m_stage(pool_, base_, stage, budget_, ctx.goals, seed_);
    std::size_t used = 0;
    for (auto u : pool_.usage) used += u > 0;
    return {{"stage", stage.stage_index}, {"keys_used", used}};
  }
  env::Action act(const env::PolicyInput& in) const override {
    const auto q = l2m_query(pool_.mode, in.obs.values, in.goal_embedding);
    return base_act(base_, &pool_.adapters[l2m_retrieve(pool_, q)], in);
  }
  nlohmann::json save() const override {
    nlohmann::json ads = nlohmann::json::array();
    for (const auto& a : pool_.adapters) ads.push_back(nn::to_json(a));
    return {{"base", nn::to_json(base_)}, {"keys", pool_.keys}, {"usage", pool_.usage}, {"adapters", ads}};
  }
  void load(const nlohmann::json& j) override {
    base_ = nn::mlp_from_json(j.at("base"));
    pool_.keys = j.at("keys").get<std::vector<Vector>>();
    pool_.usage = j.at("usage").get<std::vector<std::int64_t>>();
    pool_.adapters.clear();
    for (const auto& a : j.at("adapters")) pool_.adapters.push_back(nn::lora_from_json(a));
  }
  const L2mPool& pool() const { return pool_; }

 private:
  Mlp base_;
  L2mPool pool_;
  TrainBudget budget_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// TAIL (task or sub-goal identifiers) and CLPU unlearning
// ---------------------------------------------------------------------------

enum class IdentifierKind { kTask, kSubgoal };

struct TailRegistry {
  IdentifierKind kind = IdentifierKind::kTask;
  int rank = 16;
  std::map<int, LoraAdapter> adapters;

  bool operator==(const TailRegistry&) const = default;
};

inline TailRegistry make_tail_registry(IdentifierKind kind, std::optional<int> rank = std::nullopt) {
  return TailRegistry{kind, rank.value_or(kind == IdentifierKind::kTask ? 16 : 4), {}};
}

// TAIL-task: one adapter per task, trained only on that task's demonstrations.
// TAIL-goal: one adapter per sub-goal, trained on every transition labeled with
// it; a sub-goal seen again later keeps training (overwriting) the same adapter.
inline void tail_stage(TailRegistry& reg, const Mlp& base, const StageDataset& stage, const TrainBudget& budget,
                       const env::GoalTable& goals, std::uint64_t seed) {
  std::map<int, std::vector<const env::Transition*>> groups;
  if (reg.kind == IdentifierKind::kTask) {
    for (const auto& d : stage.demos)
      for (const auto& t : d.transitions) groups[d.task_id].push_back(&t);
  } else {
    for (const auto& d : stage.demos)
      for (const auto& t : d.transitions) groups[t.goal].push_back(&t);
  }
  if (groups.empty()) throw EmptyStageError("tail: stage has no transitions");
  const auto stage_key = static_cast<std::uint64_t>(stage.stage_index);
  for (const auto& [id, rows] : groups) {
    const auto id_key = static_cast<std::uint64_t>(id);
    auto it = reg.adapters.find(id);
    if (it == reg.adapters.end())
      it = reg.adapters.emplace(id, nn::make_lora(base, reg.rank, derive_seed(seed, Stream::kAdapterInit, {id_key}))).first;
    train_adapter(base, it->second, make_table(rows, goals), budget, derive_seed(seed, Stream::kBatch, {id_key, stage_key}),
                  "tail adapter " + std::to_string(id));
  }
}

inline const LoraAdapter* tail_lookup(const TailRegistry& reg, int identifier) {
  const auto it = reg.adapters.find(identifier);
  return it == reg.adapters.end() ? nullptr : &it->second;
}

inline env::Action tail_act(const TailRegistry& reg, const Mlp& base, int identifier, const env::PolicyInput& in) {
  return base_act(base, tail_lookup(reg, identifier), in);
}

// Deletes the task's isolated adapter; returns whether one existed.
inline bool clpu_unlearn(TailRegistry& reg, int task_id) { return reg.adapters.erase(task_id) > 0; }

class TailMethod : public Method {
 public:
  // `unlearnable` turns TAIL-task into CLPU.
  TailMethod(Mlp base, IdentifierKind kind, std::optional<int> rank, TrainBudget budget, std::uint64_t seed, bool unlearnable = false)
      : base_(std::move(base)), reg_(make_tail_registry(kind, rank)), budget_(budget), seed_(seed), unlearnable_(unlearnable) {
    if (unlearnable && kind != IdentifierKind::kTask) throw ConfigError("clpu requires task identifiers");
  }
  std::string name() const override {
    if (unlearnable_) return "clpu";
    return reg_.kind == IdentifierKind::kTask ? "tail_task" : "tail_goal";
  }
  nlohmann::json train_stage(const StageDataset& stage, const Context& ctx) override {
    tail_stage(reg_, base_, stage, budget_, ctx.goals, seed_);
    return {{"stage", stage.stage_index}, {"adapters", reg_.adapters.size()}};
  }
  env::Action act(const env::PolicyInput& in) const override {
    const int id = reg_.kind == IdentifierKind::kTask ? in.task_id : in.goal_id;
    const auto* ad = tail_lookup(reg_, id);
    if (!ad) ++fallbacks_;
    return base_act(base_, ad, in);
  }
  bool supports_unlearning() const override { return unlearnable_; }
  std::vector<std::string> unlearn(int task_id) override {
    if (!unlearnable_) return {};
    if (clpu_unlearn(reg_, task_id)) return {"task" + std::to_string(task_id)};
    return {};
  }
  nlohmann::json save() const override {
    nlohmann::json ads = nlohmann::json::array();
    for (const auto& [id, a] : reg_.adapters) ads.push_back({{"id", id}, {"adapter", nn::to_json(a)}});
    return {{"base", nn::to_json(base_)}, {"adapters", ads}};
  }
  void load(const nlohmann::json& j) override {
    base_ = nn::mlp_from_json(j.at("base"));
    reg_.adapters.clear();
    for (const auto& e : j.at("adapters")) reg_.adapters.emplace(e.at("id").get<int>(), nn::lora_from_json(e.at("adapter")));
  }
  const TailRegistry& registry() const { return reg_; }
  // Number of actions produced by the base fallback (unknown identifier).
  std::size_t fallbacks() const { return fallbacks_; }

 private:
  Mlp base_;
  TailRegistry reg_;
  TrainBudget budget_;
  std::uint64_t seed_;
  bool unlearnable_;
  mutable std::size_t fallbacks_ = 0;
};

// ---------------------------------------------------------------------------
// Experience replay and the multi-task store
// ---------------------------------------------------------------------------

struct ReplayBuffer {
  std::vector<env::Transition> items;
  std::size_t quota = 0;  // per stage; ignored when store_all
  bool store_all = false;
  int stages_seen = 0;

  bool operator==(const ReplayBuffer&) const = default;
};

// Batch indices for a 1:1 mix: the first half of the batch comes from the
// current stage, the second from the buffer, each drawn uniformly with
// replacement. With an empty buffer this is exactly the Seq-FT draw.
struct MixedDraw {
  std::vector<std::size_t> current;
  std::vector<std::size_t> replay;
};

inline MixedDraw draw_mixed(Rng& rng, std::size_t n_current, std::size_t n_replay, std::size_t batch) {
  MixedDraw d;
  if (n_replay == 0) {
    d.current = sample_indices(rng, n_current, batch);
    return d;
  }
  const std::size_t half = batch / 2;
  std::uniform_int_distribution<std::size_t> cur(0, n_current - 1);
  std::uniform_int_distribution<std::size_t> rep(0, n_replay - 1);
  for (std::size_t i = 0; i < batch - half; ++i) d.current.push_back(cur(rng));
  for (std::size_t i = 0; i < half; ++i) d.replay.push_back(rep(rng));
  return d;
}

inline void er_stage(Mlp& base, ReplayBuffer& buffer, const StageDataset& stage, const TrainBudget& budget,
                     const env::GoalTable& goals, std::uint64_t seed) {
  const auto rows = all_transitions(stage);
  const auto table = make_table(rows, goals);
  if (table.size() == 0) throw EmptyStageError("er: stage has no transitions");
  std::vector<const env::Transition*> stored;
  for (const auto& t : buffer.items) stored.push_back(&t);
  const auto replay = make_table(stored, goals);
  const auto stage_key = static_cast<std::uint64_t>(stage.stage_index);
  Rng rng(derive_seed(seed, Stream::kBatch, {stage_key}));
  auto adam = nn::make_adam(base, budget.adam);
  for (int u = 0; u < budget.updates; ++u) {
    const auto draw = draw_mixed(rng, table.size(), replay.size(), budget.batch_size);
    nn::Batch batch = gather(table, draw.current);
    if (!draw.replay.empty()) {
      const auto extra = gather(replay, draw.replay);
      batch.inputs.data.insert(batch.inputs.data.end(), extra.inputs.data.begin(), extra.inputs.data.end());
      batch.inputs.rows += extra.inputs.rows;
      batch.targets.data.insert(batch.targets.data.end(), extra.targets.data.begin(), extra.targets.data.end());
      batch.targets.rows += extra.targets.rows;
    }
    auto g = nn::grad(base, nullptr, batch, nn::Trainable::kFullBase);
    check_loss(g.loss, "er");
    nn::adam_step(adam, base, *g.base);
  }
  if (buffer.store_all) {
    for (const auto* t : rows) buffer.items.push_back(*t);
  } else if (buffer.quota > 0) {
    std::vector<std::size_t> order(rows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng pick(derive_seed(seed, Stream::kReplay, {stage_key}));
    std::shuffle(order.begin(), order.end(), pick);
    order.resize(std::min(buffer.quota, order.size()));
    std::sort(order.begin(), order.end());
    for (auto i : order) buffer.items.push_back(*rows[i]);
  }
  ++buffer.stages_seen;
}

inline nlohmann::json to_json(const env::Transition& t) { return {{"obs", t.obs}, {"goal", t.goal}, {"action", t.action}}; }

inline env::Transition transition_from_json(const nlohmann::json& j) {
  return env::Transition{j.at("obs").get<std::vector<double>>(), j.at("goal").get<int>(), j.at("action").get<env::Action>()};
}

class ErMethod : public Method {
 public:
  // store_all turns ER into the multi-task baseline.
  ErMethod(Mlp base, std::size_t quota, bool store_all, TrainBudget budget, std::uint64_t seed)
      : base_(std::move(base)), budget_(budget), seed_(seed) {
    buffer_.quota = quota;
    buffer_.store_all = store_all;
  }
  std::string name() const override { return buffer_.store_all ? "multitask" : "er"; }
  nlohmann::json train_stage(const StageDataset& stage, const Context& ctx) override {
    er_stage(base_, buffer_, stage, budget_, ctx.goals, seed_);
    return {{"stage", stage.stage_index}, {"buffer", buffer_.items.size()}};
  }
  env::Action act(const env::PolicyInput& in) const override { return base_act(base_, nullptr, in); }
  nlohmann::json save() const override {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& t : buffer_.items) items.push_back(to_json(t));
    return {{"base", nn::to_json(base_)}, {"buffer", items}, {"stages_seen", buffer_.stages_seen}};
  }
  void load(const nlohmann::json& j) override {
    base_ = nn::mlp_from_json(j.at("base"));
    buffer_.items.clear();
    for (const auto& t : j.at("buffer")) buffer_.items.push_back(transition_from_json(t));
    buffer_.stages_seen = j.at("stages_seen").get<int>();
  }
  const Mlp& base() const { return base_; }
  const ReplayBuffer& buffer() const { return buffer_; }

 private:
  Mlp base_;
  ReplayBuffer buffer_;
  TrainBudget budget_;
  std::uint64_t seed_;
};

}  // namespace iscil::baselines
