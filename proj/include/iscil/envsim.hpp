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

// Point-mass "toy kitchen": an agent on the unit square visits an ordered list of
// objects. Each visit is a sub-goal; a task is an ordered list of distinct
// sub-goals drawn from the object pool.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "iscil/common.hpp"

namespace iscil::env {

using Vec2 = std::array<double, 2>;
using Action = Vec2;

struct EnvSpec {
  int num_objects = 7;
  std::vector<Vec2> object_positions;
  double reach_radius = 0.05;
  double max_speed = 0.05;
  int horizon = 400;
  double dt = 1.0;
  double obs_noise_sigma = 0.0;
  int goal_embed_dim = 8;
  std::uint64_t embed_seed = 7;
  // Scripted expert: proportional gain and Gaussian action noise.
  double expert_gain = 1.0;
  double expert_noise = 0.005;

  int obs_dim() const { return 4 + num_objects; }
  int policy_input_dim() const { return obs_dim() + goal_embed_dim; }

  bool operator==(const EnvSpec&) const = default;
};

// Objects equally spaced on a circle of radius 0.4 about (0.5, 0.5), first object
// at the top.
inline std::vector<Vec2> circle_layout(int n, double radius = 0.4) {
  std::vector<Vec2> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const double angle = std::numbers::pi / 2 + 2 * std::numbers::pi * k / n;
    out.push_back({0.5 + radius * std::cos(angle), 0.5 + radius * std::sin(angle)});
  }
  return out;
}

inline EnvSpec default_spec() {
  EnvSpec spec;
  spec.object_positions = circle_layout(spec.num_objects);
  return spec;
}

inline double distance(const Vec2& a, const Vec2& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

inline void validate(const EnvSpec& spec) {
  if (spec.num_objects < 1 || static_cast<int>(spec.object_positions.size()) != spec.num_objects)
    throw ConfigError("env: object_positions must have num_objects entries");
  if (spec.horizon <= 0) throw ConfigError("env: horizon must be positive");
  if (spec.goal_embed_dim < 1) throw ConfigError("env: goal_embed_dim must be positive");
  if (!(spec.max_speed > 0) || !(spec.dt > 0) || !(spec.reach_radius > 0))
    throw ConfigError("env: max_speed, dt and reach_radius must be positive");
  double min_gap = INFINITY;
  for (std::size_t i = 0; i < spec.object_positions.size(); ++i)
    for (std::size_t j = i + 1; j < spec.object_positions.size(); ++j)
      min_gap = std::min(min_gap, distance(spec.object_positions[i], spec.object_positions[j]));
  if (min_gap == 0.0) throw ConfigError("env: object positions must be pairwise distinct");
  if (spec.num_objects > 1 && !(spec.reach_radius < min_gap / 2))
    throw ConfigError("env: reach_radius must be below half the minimum object spacing");
}

// Unit-norm goal vector for a sub-goal id; a pure function of (id, embed_seed).
inline std::vector<double> goal_embedding(const EnvSpec& spec, int id) {
  Rng rng(derive_seed(spec.embed_seed, Stream::kGoalEmbed, {static_cast<std::uint64_t>(id)}));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(spec.goal_embed_dim));
  double norm = 0;
  do {
    norm = 0;
    for (auto& x : v) {
      x = normal(rng);
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

class GoalTable {
 public:
  GoalTable() = default;
  explicit GoalTable(const EnvSpec& spec) {
    for (int i = 0; i < spec.num_objects; ++i) table_.push_back(goal_embedding(spec, i));
  }
  std::span<const double> operator[](int id) const { return table_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(table_.size()); }

 private:
  std::vector<std::vector<double>> table_;
};

struct Task {
  int id = 0;
  std::vector<int> subgoals;

  bool operator==(const Task&) const = default;
};

inline void validate_task(const EnvSpec& spec, const Task& task) {
  if (task.subgoals.empty()) throw InvalidTaskError("task " + std::to_string(task.id) + ": no sub-goals");
  std::set<int> seen;
  for (int g : task.subgoals) {
    if (g < 0 || g >= spec.num_objects)
      throw InvalidTaskError("task " + std::to_string(task.id) + ": sub-goal " + std::to_string(g) +
                             " outside object pool");
    if (!seen.insert(g).second)
      throw InvalidTaskError("task " + std::to_string(task.id) + ": duplicate sub-goal " + std::to_string(g));
  }
}

// Every ordered selection of `length` distinct objects out of `objects`, in
// lexicographic order. Task ids are positions in the enumeration over the full
// pool, so the same sub-goal sequence always carries the same id.
inline std::vector<Task> enumerate_tasks(const EnvSpec& spec, int length, std::vector<int> objects = {}) {
  if (objects.empty())
    for (int i = 0; i < spec.num_objects; ++i) objects.push_back(i);
  std::sort(objects.begin(), objects.end());
  std::set<int> allowed(objects.begin(), objects.end());
  std::vector<Task> out;
  std::vector<int> current;
  std::vector<bool> used(static_cast<std::size_t>(spec.num_objects), false);
  int next_id = 0;
  std::function<void()> rec = [&] {
    if (static_cast<int>(current.size()) == length) {
      const bool keep = std::all_of(current.begin(), current.end(), [&](int g) { return allowed.count(g) > 0; });
      if (keep) out.push_back(Task{next_id, current});
      ++next_id;
      return;
    }
    for (int g = 0; g < spec.num_objects; ++g) {
      if (used[static_cast<std::size_t>(g)]) continue;
      used[static_cast<std::size_t>(g)] = true;
      current.push_back(g);
      rec();
      current.pop_back();
      used[static_cast<std::size_t>(g)] = false;
    }
  };
  rec();
  return out;
}

// Layout: [pos.x, pos.y, vel.x, vel.y, flag_0 .. flag_{n-1}].
struct Observation {
  std::vector<double> values;

  Vec2 pos() const { return {values[0], values[1]}; }
  Vec2 vel() const { return {values[2], values[3]}; }
  double flag(int object) const { return values[4 + static_cast<std::size_t>(object)]; }

  bool operator==(const Observation&) const = default;
};

struct EnvState {
  EnvSpec spec;
  Task task;
  Vec2 pos{};
  Vec2 vel{};
  std::vector<double> flags;
  std::size_t next_subgoal = 0;  // index into task.subgoals of the first unachieved sub-goal
  int t = 0;
  bool done = false;
  Observation obs;
  Rng noise_rng;

  std::optional<int> current_goal() const {
    if (next_subgoal >= task.subgoals.size()) return std::nullopt;
    return task.subgoals[next_subgoal];
  }
  int achieved_count() const { return static_cast<int>(next_subgoal); }

  bool operator==(const EnvState& o) const {
    return spec == o.spec && task == o.task && pos == o.pos && vel == o.vel && flags == o.flags &&
           next_subgoal == o.next_subgoal && t == o.t && done == o.done && obs == o.obs;
  }
};

namespace detail {

inline void refresh_observation(EnvState& s) {
  auto& v = s.obs.values;
  v.assign(static_cast<std::size_t>(s.spec.obs_dim()), 0.0);
  v[0] = s.pos[0];
  v[1] = s.pos[1];
  v[2] = s.vel[0];
  v[3] = s.vel[1];
  std::copy(s.flags.begin(), s.flags.end(), v.begin() + 4);
  if (s.spec.obs_noise_sigma > 0) {
    std::normal_distribution<double> normal(0.0, s.spec.obs_noise_sigma);
    for (std::size_t i = 0; i < 4; ++i) v[i] += normal(s.noise_rng);
  }
}

}  // namespace detail

inline Vec2 clamp_speed(const Vec2& a, double max_speed) {
  const double n = std::hypot(a[0], a[1]);
  if (!(n > max_speed)) return a;
  const double k = max_speed / n;
  return {a[0] * k, a[1] * k};
}

inline EnvState reset(const EnvSpec& spec, const Task& task, std::uint64_t seed) {
  validate_task(spec, task);
  EnvState s;
  s.spec = spec;
  s.task = task;
  Rng rng(derive_seed(seed, Stream::kReset));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  s.pos = {unit(rng), unit(rng)};
  s.flags.assign(static_cast<std::size_t>(spec.num_objects), 0.0);
  s.noise_rng.seed(derive_seed(seed, Stream::kReset, {1}));
  detail::refresh_observation(s);
  return s;
}

struct StepResult {
  std::optional<int> achieved;
  bool done = false;
};

// Sub-goals only count when achieved in task order; passing through any other
// object has no effect.
inline StepResult step(EnvState& s, const Action& action) {
  if (s.done) throw EpisodeFinishedError("step called on a finished episode");
  const Vec2 a = clamp_speed(action, s.spec.max_speed);
  s.pos = {s.pos[0] + a[0] * s.spec.dt, s.pos[1] + a[1] * s.spec.dt};
  s.vel = a;
  ++s.t;
  StepResult r;
  if (auto g = s.current_goal()) {
    if (distance(s.pos, s.spec.object_positions[static_cast<std::size_t>(*g)]) < s.spec.reach_radius) {
      s.flags[static_cast<std::size_t>(*g)] = 1.0;
      ++s.next_subgoal;
      r.achieved = *g;
    }
  }
  s.done = !s.current_goal().has_value() || s.t >= s.spec.horizon;
  r.done = s.done;
  detail::refresh_observation(s);
  return r;
}

// Proportional controller toward the target object plus Gaussian noise.
inline Action scripted_expert(const EnvState& s, int target, Rng& rng) {
  const auto& obj = s.spec.object_positions.at(static_cast<std::size_t>(target));
  Vec2 a{s.spec.expert_gain * (obj[0] - s.pos[0]), s.spec.expert_gain * (obj[1] - s.pos[1])};
  if (s.spec.expert_noise > 0) {
    std::normal_distribution<double> normal(0.0, s.spec.expert_noise);
    a[0] += normal(rng);
    a[1] += normal(rng);
  }
  return clamp_speed(a, s.spec.max_speed);
}

inline Action scripted_expert(const EnvState& s, int target, std::uint64_t noise_seed) {
  Rng rng(derive_seed(noise_seed, Stream::kExpert));
  return scripted_expert(s, target, rng);
}

struct Transition {
  std::vector<double> obs;
  int goal = 0;
  Action action{};

  bool operator==(const Transition&) const = default;
};

struct Segment {
  int subgoal = 0;
  std::size_t begin = 0;  // half-open range into Demonstration::transitions
  std::size_t end = 0;

  bool operator==(const Segment&) const = default;
};

struct Demonstration {
  int task_id = 0;
  std::vector<int> task_subgoals;
  std::vector<Transition> transitions;
  std::vector<Segment> segments;   // retained segments, in task order
  std::vector<int> corrupted;      // removed sub-goals, in task order

  bool operator==(const Demonstration&) const = default;
};

inline Demonstration generate_demonstration(const EnvSpec& spec, const Task& task, std::uint64_t seed,
                                            const std::set<int>& corruption = {}) {
  EnvState s = reset(spec, task, seed);
  Rng noise(derive_seed(seed, Stream::kExpert));
  std::vector<Transition> full;
  std::vector<int> labels;
  while (!s.done) {
    const int g = *s.current_goal();
    const Action a = scripted_expert(s, g, noise);
    full.push_back(Transition{s.obs.values, g, a});
    step(s, a);
  }
  if (s.current_goal().has_value())
    throw DemoGenerationError("expert failed task " + std::to_string(task.id) + " within horizon " +
                              std::to_string(spec.horizon));

  Demonstration d;
  d.task_id = task.id;
  d.task_subgoals = task.subgoals;
  std::size_t i = 0;
  for (int g : task.subgoals) {
    std::size_t j = i;
    while (j < full.size() && full[j].goal == g) ++j;
    if (corruption.count(g)) {
      d.corrupted.push_back(g);
    } else {
      const std::size_t begin = d.transitions.size();
      d.transitions.insert(d.transitions.end(), full.begin() + static_cast<std::ptrdiff_t>(i),
                           full.begin() + static_cast<std::ptrdiff_t>(j));
      d.segments.push_back(Segment{g, begin, d.transitions.size()});
    }
    i = j;
  }
  return d;
}

// Input passed to every policy at each environment step.
struct PolicyInput {
  const Observation& obs;
  int goal_id;
  std::span<const double> goal_embedding;
  int task_id;
};

using ActFn = std::function<Action(const PolicyInput&)>;

struct EpisodeResult {
  int achieved = 0;
  int steps = 0;
};

inline EpisodeResult run_episode(const ActFn& policy, const EnvSpec& spec, const GoalTable& goals, const Task& task,
                                 std::uint64_t episode_seed) {
  EnvState s = reset(spec, task, episode_seed);
  while (!s.done) {
    const int g = *s.current_goal();
    step(s, policy(PolicyInput{s.obs, g, goals[g], task.id}));
  }
  return {s.achieved_count(), s.t};
}

// Mean fraction of sub-goals completed. Episode k starts from the seed stream
// derived from (seed, k).
inline double evaluate_gc(const ActFn& policy, const EnvSpec& spec, const GoalTable& goals, const Task& task,
                          int episodes, std::uint64_t seed) {
  if (episodes < 1) throw ConfigError("evaluate_gc: episodes must be >= 1");
  double total = 0;
  for (int k = 0; k < episodes; ++k) {
    const auto r = run_episode(policy, spec, goals, task, derive_seed(seed, Stream::kEval, {static_cast<std::uint64_t>(k)}));
    total += static_cast<double>(r.achieved) / static_cast<double>(task.subgoals.size());
  }
  return total / episodes;
}

inline ActFn expert_policy(const EnvSpec& spec, std::uint64_t noise_seed = 0) {
  auto rng = std::make_shared<Rng>(derive_seed(noise_seed, Stream::kExpert));
  return [spec, rng](const PolicyInput& in) {
    EnvState probe;
    probe.spec = spec;
    probe.pos = in.obs.pos();
    return scripted_expert(probe, in.goal_id, *rng);
  };
}

// ---------------------------------------------------------------------------
// Line-delimited JSON demonstration files.
//
//   line 1: {"record":"header","version":1,"spec":{...},"demos":[{"task_id",
//            "subgoals","corrupted","segments":[[g,begin,end],...],"length"}]}
//   then one line per transition, demos in header order:
//           {"task_id":T,"demo":k,"t":i,"obs":[...],"goal_id":g,"action":[ax,ay]}
//
// Reals are written with 17 significant digits so reading back is bit-exact.
// ---------------------------------------------------------------------------

inline constexpr int kDemoFormatVersion = 1;

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline nlohmann::json spec_to_json(const EnvSpec& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& p : s.object_positions) objs.push_back({p[0], p[1]});
  return {{"num_objects", s.num_objects},   {"object_positions", objs},
          {"reach_radius", s.reach_radius}, {"max_speed", s.max_speed},
          {"horizon", s.horizon},           {"dt", s.dt},
          {"obs_noise_sigma", s.obs_noise_sigma}, {"goal_embed_dim", s.goal_embed_dim},
          {"embed_seed", s.embed_seed},     {"expert_gain", s.expert_gain},
          {"expert_noise", s.expert_noise}};
}

// Missing keys keep their defaults, so config files only list overrides.
inline EnvSpec spec_from_json(const nlohmann::json& j) {
  EnvSpec s = default_spec();
  s.num_objects = j.value("num_objects", s.num_objects);
  if (j.contains("object_positions")) {
    s.object_positions.clear();
    for (const auto& p : j.at("object_positions")) s.object_positions.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  } else if (s.num_objects != static_cast<int>(s.object_positions.size())) {
    s.object_positions = circle_layout(s.num_objects);
  }
  s.reach_radius = j.value("reach_radius", s.reach_radius);
  s.max_speed = j.value("max_speed", s.max_speed);
  s.horizon = j.value("horizon", s.horizon);
  s.dt = j.value("dt", s.dt);
  s.obs_noise_sigma = j.value("obs_noise_sigma", s.obs_noise_sigma);
  s.goal_embed_dim = j.value("goal_embed_dim", s.goal_embed_dim);
  s.embed_seed = j.value("embed_seed", s.embed_seed);
  s.expert_gain = j.value("expert_gain", s.expert_gain);
  s.expert_noise = j.value("expert_noise", s.expert_noise);
  validate(s);
  return s;
}

inline void write_demonstrations(std::ostream& out, const EnvSpec& spec, const std::vector<Demonstration>& demos) {
  nlohmann::json meta = nlohmann::json::array();
  for (const auto& d : demos) {
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& s : d.segments) segs.push_back({s.subgoal, s.begin, s.end});
    meta.push_back({{"task_id", d.task_id},
                    {"subgoals", d.task_subgoals},
                    {"corrupted", d.corrupted},
                    {"segments", segs},
                    {"length", d.transitions.size()}});
  }
  nlohmann::json header = {{"record", "header"}, {"version", kDemoFormatVersion}, {"spec", spec_to_json(spec)}, {"demos", meta}};
  out << header.dump() << '\n';
  for (std::size_t k = 0; k < demos.size(); ++k) {
    const auto& d = demos[k];
    for (std::size_t t = 0; t < d.transitions.size(); ++t) {
      const auto& tr = d.transitions[t];
      out << "{\"task_id\":" << d.task_id << ",\"demo\":" << k << ",\"t\":" << t << ",\"obs\":[";
      for (std::size_t i = 0; i < tr.obs.size(); ++i) out << (i ? "," : "") << format_real(tr.obs[i]);
      out << "],\"goal_id\":" << tr.goal << ",\"action\":[" << format_real(tr.action[0]) << ','
          << format_real(tr.action[1]) << "]}\n";
    }
  }
}

struct DemoFile {
  EnvSpec spec;
  std::vector<Demonstration> demos;
};

inline DemoFile read_demonstrations(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("demo file: missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("demo file: bad header: ") + e.what());
  }
  if (header.value("record", "") != "header" || header.value("version", 0) != kDemoFormatVersion)
    throw FormatError("demo file: unsupported header");
  DemoFile f;
  f.spec = spec_from_json(header.at("spec"));
  for (const auto& m : header.at("demos")) {
    Demonstration d;
    d.task_id = m.at("task_id").get<int>();
    d.task_subgoals = m.at("subgoals").get<std::vector<int>>();
    d.corrupted = m.at("corrupted").get<std::vector<int>>();
    for (const auto& s : m.at("segments"))
      d.segments.push_back(Segment{s.at(0).get<int>(), s.at(1).get<std::size_t>(), s.at(2).get<std::size_t>()});
    d.transitions.reserve(m.at("length").get<std::size_t>());
    f.demos.push_back(std::move(d));
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const auto k = j.at("demo").get<std::size_t>();
    if (k >= f.demos.size()) throw FormatError("demo file: transition references unknown demo");
    auto& d = f.demos[k];
    if (j.at("t").get<std::size_t>() != d.transitions.size()) throw FormatError("demo file: transitions out of order");
    Transition tr;
    tr.obs = j.at("obs").get<std::vector<double>>();
    tr.goal = j.at("goal_id").get<int>();
    tr.action = {j.at("action").at(0).get<double>(), j.at("action").at(1).get<double>()};
    d.transitions.push_back(std::move(tr));
  }
  return f;
}

}  // namespace iscil::env
