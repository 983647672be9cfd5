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

// Pieces shared by IsCiL and the baselines: stage datasets, batch assembly,
// the Adam training loop, and the common method interface the harness drives.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "iscil/common.hpp"
#include "iscil/envsim.hpp"
#include "iscil/numnet.hpp"

namespace iscil {

struct StageDataset {
  int stage_index = 0;
  std::vector<env::Task> tasks;
  std::vector<env::Demonstration> demos;
};

// Everything a method needs to know about the world, shared by every method of a run.
struct Context {
  env::EnvSpec spec;
  env::GoalTable goals;
  std::uint64_t seed = 0;
};

inline Context make_context(const env::EnvSpec& spec, std::uint64_t seed) { return Context{spec, env::GoalTable(spec), seed}; }

// Dense copy of a set of transitions as policy inputs/targets.
struct TransitionTable {
  nn::Matrix inputs;
  nn::Matrix targets;

  std::size_t size() const { return inputs.rows; }
};

inline TransitionTable make_table(const std::vector<const env::Transition*>& rows, const env::GoalTable& goals) {
  TransitionTable t;
  if (rows.empty()) return t;
  const std::size_t in = rows.front()->obs.size() + goals[rows.front()->goal].size();
  t.inputs = nn::Matrix(rows.size(), in);
  t.targets = nn::Matrix(rows.size(), 2);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& tr = *rows[r];
    auto row = t.inputs.row(r);
    std::copy(tr.obs.begin(), tr.obs.end(), row.begin());
    const auto g = goals[tr.goal];
    std::copy(g.begin(), g.end(), row.begin() + static_cast<std::ptrdiff_t>(tr.obs.size()));
    t.targets(r, 0) = tr.action[0];
    t.targets(r, 1) = tr.action[1];
  }
  return t;
}

inline std::vector<const env::Transition*> all_transitions(const StageDataset& stage) {
  std::vector<const env::Transition*> out;
  for (const auto& d : stage.demos)
    for (const auto& t : d.transitions) out.push_back(&t);
  return out;
}

inline std::vector<const env::Transition*> transitions_of_task(const StageDataset& stage, int task_id) {
  std::vector<const env::Transition*> out;
  for (const auto& d : stage.demos)
    if (d.task_id == task_id)
      for (const auto& t : d.transitions) out.push_back(&t);
  return out;
}

inline nn::Batch gather(const TransitionTable& table, const std::vector<std::size_t>& idx) {
  nn::Batch b{nn::Matrix(idx.size(), table.inputs.cols), nn::Matrix(idx.size(), table.targets.cols)};
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src_in = table.inputs.row(idx[i]);
    const auto src_out = table.targets.row(idx[i]);
    std::copy(src_in.begin(), src_in.end(), b.inputs.row(i).begin());
    std::copy(src_out.begin(), src_out.end(), b.targets.row(i).begin());
  }
  return b;
}

inline nn::Batch whole(const TransitionTable& table) { return nn::Batch{table.inputs, table.targets}; }

// Uniform draw with replacement. When the pool is no larger than the batch the
// whole pool is used, in order, and the generator is not advanced.
inline std::vector<std::size_t> sample_indices(Rng& rng, std::size_t pool, std::size_t batch) {
  std::vector<std::size_t> idx;
  if (pool <= batch) {
    for (std::size_t i = 0; i < pool; ++i) idx.push_back(i);
    return idx;
  }
  std::uniform_int_distribution<std::size_t> pick(0, pool - 1);
  idx.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) idx.push_back(pick(rng));
  return idx;
}

struct TrainBudget {
  int updates = 500;
  std::size_t batch_size = 64;
  nn::AdamConfig adam{};

  bool operator==(const TrainBudget&) const = default;
};

inline void check_loss(double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw NumericFailure(where + ": training loss is not finite");
}

// Adapter-only imitation training on a fixed table with a fresh Adam state.
// Returns the loss of the last update (NaN when no update ran).
inline double train_adapter(const nn::Mlp& base, nn::LoraAdapter& adapter, const TransitionTable& table,
                            const TrainBudget& budget, std::uint64_t batch_seed, const std::string& where) {
  if (table.size() == 0) throw EmptyBatchError(where + ": no transitions");
  Rng rng(batch_seed);
  auto adam = nn::make_adam(adapter, budget.adam);
  double last = std::numeric_limits<double>::quiet_NaN();
  for (int u = 0; u < budget.updates; ++u) {
    const auto batch = gather(table, sample_indices(rng, table.size(), budget.batch_size));
    auto g = nn::grad(base, &adapter, batch, nn::Trainable::kAdapterOnly);
    check_loss(g.loss, where);
    nn::adam_step(adam, adapter, *g.adapter);
    last = g.loss;
  }
  if (!nn::all_finite(adapter)) throw NumericFailure(where + ": adapter parameters diverged");
  return last;
}

inline env::Action to_action(const nn::Vector& v) { return {v.at(0), v.at(1)}; }

// Common stage interface. The harness treats every method through it.
class Method {
 public:
  virtual ~Method() = default;
  virtual std::string name() const = 0;
  // Returns a per-stage report (method specific JSON object).
  virtual nlohmann::json train_stage(const StageDataset& stage, const Context& ctx) = 0;
  virtual env::Action act(const env::PolicyInput& in) const = 0;
  virtual bool supports_unlearning() const { return false; }
  // Removes what the method learned from the task; returns descriptions of the removed units.
  virtual std::vector<std::string> unlearn(int /*task_id*/) { return {}; }
  // Full learned state; load(save()) restores a method that behaves identically.
  virtual nlohmann::json save() const = 0;
  virtual void load(const nlohmann::json& j) = 0;

  env::ActFn policy() const {
    return [this](const env::PolicyInput& in) { return act(in); };
  }
};

}  // namespace iscil
