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

// Skill retrieval: a fixed state encoder, multi-basis skill prototypes scored by
// max cosine similarity, and the prototype -> adapter memory.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "iscil/common.hpp"
#include "iscil/numnet.hpp"

namespace iscil::retrieval {

using nn::Matrix;
using nn::Vector;

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline Vector normalized(std::span<const double> a) {
  const double n = norm2(a);
  if (!(n > 0) || !std::isfinite(n)) throw DegenerateInputError("cannot normalize a zero or non-finite vector");
  Vector out(a.begin(), a.end());
  for (auto& x : out) x /= n;
  return out;
}

// ---------------------------------------------------------------------------
// State encoder
// ---------------------------------------------------------------------------

// s = normalize(P * concat(obs, goal_weight * goal)). P is a seeded Gaussian
// matrix orthonormalized along its shorter side: orthonormal rows when
// dim <= input width, orthonormal columns (an isometry) otherwise.
struct StateEncoder {
  Matrix projection;  // dim × (obs_dim + goal_dim)
  std::size_t obs_dim = 0;
  std::size_t goal_dim = 0;
  double goal_weight = 1.0;

  std::size_t dim() const { return projection.rows; }
  bool operator==(const StateEncoder&) const = default;
};

namespace detail {

// Modified Gram-Schmidt over `count` vectors of length `len`, accessed through `at(v, i)`.
template <class At>
void orthonormalize(std::size_t count, std::size_t len, At&& at) {
  for (std::size_t v = 0; v < count; ++v) {
    for (std::size_t u = 0; u < v; ++u) {
      double p = 0;
      for (std::size_t i = 0; i < len; ++i) p += at(u, i) * at(v, i);
      for (std::size_t i = 0; i < len; ++i) at(v, i) -= p * at(u, i);
    }
    double n = 0;
    for (std::size_t i = 0; i < len; ++i) n += at(v, i) * at(v, i);
    n = std::sqrt(n);
    if (!(n > 1e-12)) throw DegenerateInputError("encoder: rank-deficient projection draw");
    for (std::size_t i = 0; i < len; ++i) at(v, i) /= n;
  }
}

}  // namespace detail

inline StateEncoder make_encoder(std::size_t obs_dim, std::size_t goal_dim, std::size_t dim, std::uint64_t seed,
                                 double goal_weight = 1.0) {
  StateEncoder enc;
  enc.obs_dim = obs_dim;
  enc.goal_dim = goal_dim;
  enc.goal_weight = goal_weight;
  const std::size_t in = obs_dim + goal_dim;
  enc.projection = Matrix(dim, in);
  Rng rng(derive_seed(seed, Stream::kEncoder));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& x : enc.projection.data) x = normal(rng);
  auto& p = enc.projection;
  if (dim <= in)
    detail::orthonormalize(dim, in, [&](std::size_t v, std::size_t i) -> double& { return p(v, i); });
  else
    detail::orthonormalize(in, dim, [&](std::size_t v, std::size_t i) -> double& { return p(i, v); });
  return enc;
}

inline Vector encode(const StateEncoder& enc, std::span<const double> obs, std::span<const double> goal) {
  if (obs.size() != enc.obs_dim || goal.size() != enc.goal_dim)
    throw DimensionError("encode: input dims differ from encoder");
  Vector s(enc.dim(), 0.0);
  const auto& p = enc.projection;
  for (std::size_t r = 0; r < p.rows; ++r) {
    const auto row = p.row(r);
    double acc = 0;
    for (std::size_t i = 0; i < obs.size(); ++i) acc += row[i] * obs[i];
    for (std::size_t i = 0; i < goal.size(); ++i) acc += row[obs.size() + i] * enc.goal_weight * goal[i];
    s[r] = acc;
  }
  const double n = norm2(s);
  if (!(n > 0)) throw DegenerateInputError("encode: zero state embedding");
  for (auto& x : s) x /= n;
  return s;
}

// ---------------------------------------------------------------------------
// Prototypes and memory
// ---------------------------------------------------------------------------

struct SkillId {
  int stage = 0;
  int subgoal = 0;

  auto operator<=>(const SkillId&) const = default;
  std::string str() const { return "s" + std::to_string(stage) + "g" + std::to_string(subgoal); }
};

struct SkillPrototype {
  SkillId id;
  std::vector<Vector> bases;  // unit vectors
  std::set<int> source_tasks;
  int source_subgoal = 0;
  int source_stage = 0;

  bool operator==(const SkillPrototype&) const = default;
};

// max over bases of the cosine similarity; bases and s are unit vectors.
inline double similarity(const SkillPrototype& proto, std::span<const double> s) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& b : proto.bases) {
    if (b.size() != s.size()) throw DimensionError("similarity: basis and state dims differ");
    best = std::max(best, dot(b, s));
  }
  return best;
}

struct SkillEntry {
  SkillPrototype prototype;
  nn::LoraAdapter adapter;

  bool operator==(const SkillEntry&) const = default;
};

// Ordered skill set with its one-to-one prototype -> adapter mapping. Each
// prototype is stored together with its adapter, so the mapping stays total and
// injective through any sequence of adds and removals.
class PrototypeMemory {
 public:
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<SkillEntry>& entries() const { return entries_; }
  const SkillEntry& at(std::size_t i) const { return entries_.at(i); }

  const SkillEntry* find(const SkillId& id) const {
    for (const auto& e : entries_)
      if (e.prototype.id == id) return &e;
    return nullptr;
  }

  void add_skill(SkillPrototype proto, nn::LoraAdapter adapter) {
    if (find(proto.id)) throw ConflictError("memory: skill " + proto.id.str() + " already present");
    if (proto.bases.empty()) throw DimensionError("memory: prototype has no bases");
    entries_.push_back(SkillEntry{std::move(proto), std::move(adapter)});
  }

  // Removes every entry whose prototype matches; returns them in insertion order.
  std::vector<SkillEntry> remove_skills(const std::function<bool(const SkillPrototype&)>& pred) {
    std::vector<SkillEntry> removed;
    std::vector<SkillEntry> kept;
    for (auto& e : entries_) (pred(e.prototype) ? removed : kept).push_back(std::move(e));
    entries_ = std::move(kept);
    return removed;
  }

  bool operator==(const PrototypeMemory&) const = default;

 private:
  std::vector<SkillEntry> entries_;
};

inline bool tagged_with_task(const SkillPrototype& p, int task_id) { return p.source_tasks.count(task_id) > 0; }

// Index of the best-scoring entry; the earliest inserted wins ties.
inline std::size_t retrieve_index(const PrototypeMemory& memory, std::span<const double> s) {
  if (memory.empty()) throw NoSkillError("retrieve: memory is empty");
  std::size_t best = 0;
  double best_score = similarity(memory.at(0).prototype, s);
  for (std::size_t i = 1; i < memory.size(); ++i) {
    const double v = similarity(memory.at(i).prototype, s);
    if (v > best_score) {
      best_score = v;
      best = i;
    }
  }
  return best;
}

inline const SkillEntry& retrieve(const PrototypeMemory& memory, std::span<const double> s) {
  return memory.at(retrieve_index(memory, s));
}

// Mean similarity of each skill over the embeddings, in insertion order.
inline std::vector<std::pair<SkillId, double>> average_score(const PrototypeMemory& memory,
                                                             const std::vector<Vector>& embeddings) {
  if (memory.empty() || embeddings.empty()) throw NoSkillError("average_score: empty memory or embeddings");
  std::vector<std::pair<SkillId, double>> out;
  for (const auto& e : memory.entries()) {
    double total = 0;
    for (const auto& s : embeddings) total += similarity(e.prototype, s);
    out.emplace_back(e.prototype.id, total / static_cast<double>(embeddings.size()));
  }
  return out;
}

inline SkillId best_average_score(const PrototypeMemory& memory, const std::vector<Vector>& embeddings) {
  const auto scores = average_score(memory, embeddings);
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i].second > scores[best].second) best = i;
  return scores[best].first;
}

// Most frequently retrieved skill over the embeddings; ties go to the earliest inserted.
inline SkillId mode_retrieved(const PrototypeMemory& memory, const std::vector<Vector>& embeddings) {
  if (memory.empty() || embeddings.empty()) throw NoSkillError("mode_retrieved: empty memory or embeddings");
  std::vector<std::size_t> counts(memory.size(), 0);
  for (const auto& s : embeddings) ++counts[retrieve_index(memory, s)];
  std::size_t best = 0;
  for (std::size_t i = 1; i < counts.size(); ++i)
    if (counts[i] > counts[best]) best = i;
  return memory.at(best).prototype.id;
}

// ---------------------------------------------------------------------------
// KMeans
// ---------------------------------------------------------------------------

struct KMeansResult {
  std::vector<Vector> centroids;       // unit length
  std::vector<std::size_t> assignment;
  std::vector<double> inertia;         // after each Lloyd iteration, raw centroids
  std::size_t k_used = 0;
  bool k_reduced = false;
  int iterations = 0;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Lloyd's algorithm from k-means++ seeding. K is reduced to the number of points
// when there are fewer points than K. Stops at an assignment fixpoint or after
// max_iters; empty clusters keep their previous centroid.
inline KMeansResult kmeans(const std::vector<Vector>& points, std::size_t k, std::uint64_t seed, int max_iters = 100) {
  if (points.empty()) throw EmptyBatchError("kmeans: no points");
  if (k == 0) throw ConfigError("kmeans: K must be >= 1");
  const std::size_t dim = points.front().size();
  for (const auto& p : points)
    if (p.size() != dim) throw DimensionError("kmeans: points differ in dimension");

  KMeansResult r;
  r.k_reduced = points.size() < k;
  r.k_used = std::min(k, points.size());
  const std::size_t n = points.size();
  Rng rng(derive_seed(seed, Stream::kKMeans));

  // k-means++
  std::vector<Vector> centroids;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  centroids.push_back(points[pick(rng)]);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(points[i], centroids[0]);
  while (centroids.size() < r.k_used) {
    double total = 0;
    for (double v : d2) total += v;
    std::size_t chosen = 0;
    if (total > 0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng);
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        if (target < d2[i]) {
          chosen = i;
          break;
        }
        target -= d2[i];
      }
    } else {
      chosen = pick(rng);
    }
    centroids.push_back(points[chosen]);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(points[i], centroids.back()));
  }

  auto assign = [&](std::vector<std::size_t>& a) {
    double inertia = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = squared_distance(points[i], centroids[0]);
      for (std::size_t c = 1; c < centroids.size(); ++c) {
        const double d = squared_distance(points[i], centroids[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      a[i] = best;
      inertia += best_d;
    }
    return inertia;
  };

  r.assignment.assign(n, 0);
  assign(r.assignment);
  for (int it = 0; it < max_iters; ++it) {
    std::vector<Vector> sums(centroids.size(), Vector(dim, 0.0));
    std::vector<std::size_t> counts(centroids.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[r.assignment[i]];
      for (std::size_t d = 0; d < dim; ++d) sums[r.assignment[i]][d] += points[i][d];
    }
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t d = 0; d < dim; ++d) centroids[c][d] = sums[c][d] / static_cast<double>(counts[c]);
    }
    std::vector<std::size_t> next(n);
    const double inertia = assign(next);
    r.inertia.push_back(inertia);
    ++r.iterations;
    const bool fixpoint = next == r.assignment;
    r.assignment = std::move(next);
    if (fixpoint) break;
  }

  for (auto& c : centroids) {
    const double nc = norm2(c);
    // A centroid can cancel to zero only for antipodal clusters; fall back to a member point.
    if (!(nc > 1e-12)) {
      for (std::size_t i = 0; i < n; ++i)
        if (&centroids[r.assignment[i]] == &c) {
          c = points[i];
          break;
        }
    }
    r.centroids.push_back(normalized(c));
  }
  return r;
}

struct PrototypeTags {
  std::set<int> source_tasks;
  int source_subgoal = 0;
  int source_stage = 0;
};

inline SkillPrototype build_prototype(const std::vector<Vector>& embeddings, std::size_t k, SkillId id,
                                      PrototypeTags tags, std::uint64_t seed, int max_iters = 100,
                                      KMeansResult* diagnostics = nullptr) {
  if (embeddings.empty()) throw EmptyBatchError("build_prototype: no embeddings");
  auto km = kmeans(embeddings, k, seed, max_iters);
  SkillPrototype p;
  p.id = id;
  p.bases = km.centroids;
  p.source_tasks = std::move(tags.source_tasks);
  p.source_subgoal = tags.source_subgoal;
  p.source_stage = tags.source_stage;
  if (diagnostics) *diagnostics = std::move(km);
  return p;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline constexpr int kBankVersion = 1;

inline nlohmann::json to_json(const StateEncoder& e) {
  return {{"projection", nn::to_json(e.projection)}, {"obs_dim", e.obs_dim}, {"goal_dim", e.goal_dim}, {"goal_weight", e.goal_weight}};
}

inline StateEncoder encoder_from_json(const nlohmann::json& j) {
  StateEncoder e;
  e.projection = nn::matrix_from_json(j.at("projection"));
  e.obs_dim = j.at("obs_dim").get<std::size_t>();
  e.goal_dim = j.at("goal_dim").get<std::size_t>();
  e.goal_weight = j.at("goal_weight").get<double>();
  return e;
}

inline nlohmann::json to_json(const SkillPrototype& p) {
  return {{"stage", p.id.stage},
          {"subgoal", p.id.subgoal},
          {"source_tasks", p.source_tasks},
          {"source_subgoal", p.source_subgoal},
          {"source_stage", p.source_stage},
          {"k", p.bases.size()},
          {"bases", p.bases}};
}

inline SkillPrototype prototype_from_json(const nlohmann::json& j) {
  SkillPrototype p;
  p.id = SkillId{j.at("stage").get<int>(), j.at("subgoal").get<int>()};
  p.source_tasks = j.at("source_tasks").get<std::set<int>>();
  p.source_subgoal = j.at("source_subgoal").get<int>();
  p.source_stage = j.at("source_stage").get<int>();
  p.bases = j.at("bases").get<std::vector<Vector>>();
  if (p.bases.size() != j.at("k").get<std::size_t>()) throw FormatError("prototype: basis count mismatch");
  return p;
}

// Prototype bank plus adapter registry, paired entry by entry.
inline nlohmann::json to_json(const PrototypeMemory& m) {
  nlohmann::json skills = nlohmann::json::array();
  for (const auto& e : m.entries()) skills.push_back({{"prototype", to_json(e.prototype)}, {"adapter", nn::to_json(e.adapter)}});
  return {{"format", "iscil-bank"}, {"version", kBankVersion}, {"skills", skills}};
}

inline PrototypeMemory memory_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "iscil-bank" || j.value("version", 0) != kBankVersion)
    throw FormatError("not a version-1 prototype bank");
  PrototypeMemory m;
  for (const auto& s : j.at("skills")) m.add_skill(prototype_from_json(s.at("prototype")), nn::lora_from_json(s.at("adapter")));
  return m;
}

}  // namespace iscil::retrieval
