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

// Score matrix C[task, stage] and the continual-learning metrics computed from
// it. Stages are 0-based column indices.
//
//   FWT_t = mean_{i in I_t} C[t,i]
//   BWT_t = mean_{i in I_t} (1 / (p - i - 1)) * sum_{j=i+1..p} (C[t,j] - C[t,i])
//           0 when p == i; the raw single difference (flagged) when p == i + 1
//   AUC_t = mean_{i in I_t} (1 / (p - i + 1)) * sum_{j=i..p} C[t,j]
//
// p is the last stage at which the task is available.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "iscil/common.hpp"

namespace iscil::metrics {

struct TaskRow {
  std::vector<double> scores;  // one per stage; NaN where undefined
  std::set<int> trained;       // I_t
  int horizon = -1;            // p
  bool unseen = false;         // evaluated but never trained

  bool operator==(const TaskRow& o) const {
    if (trained != o.trained || horizon != o.horizon || unseen != o.unseen || scores.size() != o.scores.size()) return false;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool a = std::isnan(scores[i]), b = std::isnan(o.scores[i]);
      if (a != b || (!a && scores[i] != o.scores[i])) return false;
    }
    return true;
  }
};

class ScoreMatrix {
 public:
  ScoreMatrix() = default;
  explicit ScoreMatrix(int num_stages) : num_stages_(num_stages) {
    if (num_stages < 0) throw ConfigError("score matrix: negative stage count");
  }

  int num_stages() const { return num_stages_; }
  const std::map<int, TaskRow>& rows() const { return rows_; }

  TaskRow& row(int task) {
    auto it = rows_.find(task);
    if (it == rows_.end()) {
      TaskRow r;
      r.scores.assign(static_cast<std::size_t>(num_stages_), std::numeric_limits<double>::quiet_NaN());
      it = rows_.emplace(task, std::move(r)).first;
    }
    return it->second;
  }
  const TaskRow& row(int task) const {
    const auto it = rows_.find(task);
    if (it == rows_.end()) throw IncompleteMatrixError("score matrix: no row for task " + std::to_string(task));
    return it->second;
  }

  void set(int task, int stage, double value) {
    check_stage(stage);
    if (!(value >= 0.0 && value <= 1.0)) throw DimensionError("score matrix: GC score outside [0,1]");
    row(task).scores[static_cast<std::size_t>(stage)] = value;
  }
  double get(int task, int stage) const {
    check_stage(stage);
    return row(task).scores[static_cast<std::size_t>(stage)];
  }
  void mark_trained(int task, int stage) {
    check_stage(stage);
    auto& r = row(task);
    r.trained.insert(stage);
    r.unseen = false;
  }
  void set_horizon(int task, int stage) {
    check_stage(stage);
    row(task).horizon = stage;
  }

  // Appends an undefined column.
  void add_stage() {
    ++num_stages_;
    for (auto& [_, r] : rows_) r.scores.push_back(std::numeric_limits<double>::quiet_NaN());
  }

  bool operator==(const ScoreMatrix&) const = default;

 private:
  void check_stage(int stage) const {
    if (stage < 0 || stage >= num_stages_) throw DimensionError("score matrix: stage " + std::to_string(stage) + " out of range");
  }

  int num_stages_ = 0;
  std::map<int, TaskRow> rows_;
};

struct TaskMetrics {
  double fwt = 0;
  double bwt = 0;
  double auc = 0;
  bool bwt_flagged = false;  // some i in I_t had p == i + 1
};

struct Summary {
  std::map<int, TaskMetrics> per_task;
  double fwt = 0;
  double bwt = 0;
  double auc = 0;
  std::vector<int> flagged;  // tasks whose BWT used the p == i + 1 carve-out
};

namespace detail {

inline double at(const TaskRow& r, int task, int stage) {
  const double v = r.scores.at(static_cast<std::size_t>(stage));
  if (std::isnan(v))
    throw IncompleteMatrixError("score matrix: missing C[" + std::to_string(task) + "," + std::to_string(stage) + "]");
  return v;
}

inline void check_row(const TaskRow& r, int task) {
  if (r.trained.empty()) throw IncompleteMatrixError("task " + std::to_string(task) + " has no training stage");
  if (r.horizon < *r.trained.rbegin())
    throw IncompleteMatrixError("task " + std::to_string(task) + ": horizon precedes a training stage");
}

}  // namespace detail

inline TaskMetrics task_metrics(const TaskRow& r, int task) {
  detail::check_row(r, task);
  const int p = r.horizon;
  TaskMetrics m;
  for (int i : r.trained) {
    const double ci = detail::at(r, task, i);
    m.fwt += ci;
    if (p == i) {
      m.auc += ci;
      continue;
    }
    double diff = 0, sum = ci;
    for (int j = i + 1; j <= p; ++j) {
      const double cj = detail::at(r, task, j);
      diff += cj - ci;
      sum += cj;
    }
    if (p == i + 1) {
      m.bwt += diff;
      m.bwt_flagged = true;
    } else {
      m.bwt += diff / static_cast<double>(p - i - 1);
    }
    m.auc += sum / static_cast<double>(p - i + 1);
  }
  const auto n = static_cast<double>(r.trained.size());
  m.fwt /= n;
  m.bwt /= n;
  m.auc /= n;
  return m;
}

// Metrics over every trained task (unseen rows are skipped).
inline Summary summarize(const ScoreMatrix& c) {
  Summary s;
  for (const auto& [task, r] : c.rows()) {
    if (r.unseen) continue;
    const auto m = task_metrics(r, task);
    s.per_task.emplace(task, m);
    if (m.bwt_flagged) s.flagged.push_back(task);
  }
  if (s.per_task.empty()) return s;
  for (const auto& [_, m] : s.per_task) {
    s.fwt += m.fwt;
    s.bwt += m.bwt;
    s.auc += m.auc;
  }
  const auto n = static_cast<double>(s.per_task.size());
  s.fwt /= n;
  s.bwt /= n;
  s.auc /= n;
  return s;
}

// Adaptation variant: unseen tasks only, with the first evaluated stage standing
// in for the (absent) training stage.
inline Summary summarize_unseen(const ScoreMatrix& c) {
  ScoreMatrix view(c.num_stages());
  for (const auto& [task, r] : c.rows()) {
    if (!r.unseen) continue;
    auto& v = view.row(task);
    v = r;
    v.trained.clear();
    for (int i = 0; i < c.num_stages(); ++i)
      if (!std::isnan(r.scores[static_cast<std::size_t>(i)])) {
        v.trained.insert(i);
        break;
      }
    v.unseen = false;
  }
  return summarize(view);
}

// ---------------------------------------------------------------------------
// CSV: task,unseen,trained,horizon,s0..s{n-1}; trained stages joined by ';',
// undefined cells empty, reals with 17 significant digits.
// ---------------------------------------------------------------------------

inline std::string format_cell(double v) {
  if (std::isnan(v)) return {};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline void write_csv(std::ostream& out, const ScoreMatrix& c) {
  out << "task,unseen,trained,horizon";
  for (int i = 0; i < c.num_stages(); ++i) out << ",s" << i;
  out << "\n";
  for (const auto& [task, r] : c.rows()) {
    out << task << "," << (r.unseen ? 1 : 0) << ",";
    bool first = true;
    for (int i : r.trained) {
      out << (first ? "" : ";") << i;
      first = false;
    }
    out << "," << r.horizon;
    for (double v : r.scores) out << "," << format_cell(v);
    out << "\n";
  }
}

inline ScoreMatrix read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("score csv: empty input");
  const auto header = split(line, ',');
  if (header.size() < 4 || header[0] != "task") throw FormatError("score csv: bad header");
  ScoreMatrix c(static_cast<int>(header.size() - 4));
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto cells = split(line, ',');
      if (cells.size() != header.size()) throw FormatError("score csv: ragged row");
      const int task = std::stoi(cells[0]);
      auto& r = c.row(task);
      r.unseen = cells[1] == "1";
      if (!cells[2].empty())
        for (const auto& s : split(cells[2], ';')) r.trained.insert(std::stoi(s));
      r.horizon = std::stoi(cells[3]);
      for (std::size_t i = 4; i < cells.size(); ++i)
        r.scores[i - 4] = cells[i].empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(cells[i]);
    }
  } catch (const std::invalid_argument&) {
    throw FormatError("score csv: unparsable number");
  } catch (const std::out_of_range&) {
    throw FormatError("score csv: number out of range");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Cross-seed aggregation
// ---------------------------------------------------------------------------

struct MeanStd {
  double mean = 0;
  double stddev = 0;  // population: divides by n
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  if (xs.empty()) throw ConfigError("mean_std: no values");
  MeanStd r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  double ss = 0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  r.stddev = std::sqrt(ss / static_cast<double>(xs.size()));
  return r;
}

}  // namespace iscil::metrics
