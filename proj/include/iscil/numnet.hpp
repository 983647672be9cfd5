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

// Dense float64 kernel: an MLP policy, per-layer low-rank adapters, analytic
// backprop for the behavior-cloning loss, and Adam.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "iscil/common.hpp"

namespace iscil::nn {

using Vector = std::vector<double>;

// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

inline void require_dims(bool ok, const char* what) {
  if (!ok) throw DimensionError(what);
}

// out = x * w^T ; x: n×k, w: m×k
inline Matrix matmul_bt(const Matrix& x, const Matrix& w) {
  require_dims(x.cols == w.cols, "matmul_bt: inner dimensions differ");
  Matrix out(x.rows, w.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xi = x.data.data() + i * x.cols;
    for (std::size_t j = 0; j < w.rows; ++j) {
      const double* wj = w.data.data() + j * w.cols;
      double s = 0;
      for (std::size_t l = 0; l < x.cols; ++l) s += xi[l] * wj[l];
      out(i, j) = s;
    }
  }
  return out;
}

// out = x * m ; x: n×k, m: k×p
inline Matrix matmul(const Matrix& x, const Matrix& m) {
  require_dims(x.cols == m.rows, "matmul: inner dimensions differ");
  Matrix out(x.rows, m.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double* oi = out.data.data() + i * out.cols;
    for (std::size_t l = 0; l < x.cols; ++l) {
      const double xil = x(i, l);
      if (xil == 0.0) continue;
      const double* ml = m.data.data() + l * m.cols;
      for (std::size_t j = 0; j < m.cols; ++j) oi[j] += xil * ml[j];
    }
  }
  return out;
}

// out = d^T * x ; d: n×m, x: n×k -> m×k
inline Matrix matmul_at(const Matrix& d, const Matrix& x) {
  require_dims(d.rows == x.rows, "matmul_at: row counts differ");
  Matrix out(d.cols, x.cols);
  for (std::size_t i = 0; i < d.rows; ++i) {
    const double* xi = x.data.data() + i * x.cols;
    for (std::size_t j = 0; j < d.cols; ++j) {
      const double dij = d(i, j);
      if (dij == 0.0) continue;
      double* oj = out.data.data() + j * out.cols;
      for (std::size_t l = 0; l < x.cols; ++l) oj[l] += dij * xi[l];
    }
  }
  return out;
}

enum class Activation { kRelu, kTanh, kIdentity };

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::kRelu: return x > 0 ? x : 0.0;
    case Activation::kTanh: return std::tanh(x);
    case Activation::kIdentity: return x;
  }
  return x;
}

// Derivative expressed through the pre-activation value.
inline double activate_grad(Activation a, double pre) {
  switch (a) {
    case Activation::kRelu: return pre > 0 ? 1.0 : 0.0;
    case Activation::kTanh: {
      const double t = std::tanh(pre);
      return 1 - t * t;
    }
    case Activation::kIdentity: return 1.0;
  }
  return 1.0;
}

struct Dense {
  Matrix weight;  // d_out × d_in
  Vector bias;    // d_out

  bool operator==(const Dense&) const = default;
};

// The policy network. Activation between layers, none after the last one.
struct Mlp {
  std::vector<Dense> layers;
  Activation activation = Activation::kRelu;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().weight.cols; }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().weight.rows; }

  bool operator==(const Mlp&) const = default;
};

// Per-layer factors of W' = W + scale * B * A.
struct LoraFactor {
  Matrix a;  // rank × d_in
  Matrix b;  // d_out × rank

  bool operator==(const LoraFactor&) const = default;
};

struct LoraAdapter {
  std::vector<LoraFactor> layers;
  int rank = 0;
  double scale = 1.0;

  bool operator==(const LoraAdapter&) const = default;
};

inline void validate_chain(const Mlp& m) {
  require_dims(!m.layers.empty(), "mlp: no layers");
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    require_dims(l.bias.size() == l.weight.rows, "mlp: bias length differs from layer width");
    if (i > 0) require_dims(l.weight.cols == m.layers[i - 1].weight.rows, "mlp: layer dimensions do not chain");
  }
}

inline void validate_adapter(const Mlp& base, const LoraAdapter& ad) {
  require_dims(ad.layers.size() == base.layers.size(), "lora: layer count differs from base");
  require_dims(ad.rank >= 1, "lora: rank must be >= 1");
  for (std::size_t i = 0; i < ad.layers.size(); ++i) {
    const auto& f = ad.layers[i];
    const auto& w = base.layers[i].weight;
    require_dims(f.a.rows == static_cast<std::size_t>(ad.rank) && f.a.cols == w.cols, "lora: A shape mismatch");
    require_dims(f.b.rows == w.rows && f.b.cols == static_cast<std::size_t>(ad.rank), "lora: B shape mismatch");
  }
}

// He-normal hidden layers, fan-in scaled output layer, zero biases.
inline Mlp make_mlp(const std::vector<std::size_t>& dims, Activation act, std::uint64_t seed) {
  require_dims(dims.size() >= 2, "make_mlp: need at least input and output dims");
  Rng rng(seed);
  Mlp m;
  m.activation = act;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    Dense d{Matrix(dims[i + 1], dims[i]), Vector(dims[i + 1], 0.0)};
    const bool last = i + 2 == dims.size();
    const double stddev = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(dims[i]));
    std::normal_distribution<double> normal(0.0, stddev);
    for (auto& w : d.weight.data) w = normal(rng);
    m.layers.push_back(std::move(d));
  }
  return m;
}

// A ~ N(0, init_std^2), B = 0, so a fresh adapter leaves the base output unchanged.
// alpha defaults to the rank, giving scale 1.
inline LoraAdapter make_lora(const Mlp& base, int rank, std::uint64_t seed, double init_std = 0.02,
                             std::optional<double> alpha = std::nullopt) {
  require_dims(rank >= 1, "make_lora: rank must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, init_std);
  LoraAdapter ad;
  ad.rank = rank;
  ad.scale = alpha.value_or(static_cast<double>(rank)) / rank;
  for (const auto& l : base.layers) {
    LoraFactor f{Matrix(static_cast<std::size_t>(rank), l.weight.cols), Matrix(l.weight.rows, static_cast<std::size_t>(rank))};
    for (auto& x : f.a.data) x = normal(rng);
    ad.layers.push_back(std::move(f));
  }
  return ad;
}

inline Mlp merged(const Mlp& base, const LoraAdapter& ad) {
  validate_adapter(base, ad);
  Mlp out = base;
  for (std::size_t i = 0; i < base.layers.size(); ++i) {
    const Matrix ba = matmul(ad.layers[i].b, ad.layers[i].a);
    auto& w = out.layers[i].weight.data;
    for (std::size_t k = 0; k < w.size(); ++k) w[k] += ad.scale * ba.data[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter-block visitation. Mlp and LoraAdapter are both "parameter sets": a
// fixed, ordered list of contiguous double blocks. Optimizers, gradient checks
// and counting all work on that view.
// ---------------------------------------------------------------------------

template <class F>
void for_each_block(Mlp& m, F&& f) {
  for (auto& l : m.layers) {
    f(std::span<double>(l.weight.data));
    f(std::span<double>(l.bias));
  }
}
template <class F>
void for_each_block(const Mlp& m, F&& f) {
  for (const auto& l : m.layers) {
    f(std::span<const double>(l.weight.data));
    f(std::span<const double>(l.bias));
  }
}
template <class F>
void for_each_block(LoraAdapter& a, F&& f) {
  for (auto& l : a.layers) {
    f(std::span<double>(l.a.data));
    f(std::span<double>(l.b.data));
  }
}
template <class F>
void for_each_block(const LoraAdapter& a, F&& f) {
  for (const auto& l : a.layers) {
    f(std::span<const double>(l.a.data));
    f(std::span<const double>(l.b.data));
  }
}

template <class P>
concept ParameterSet = requires(P& p, const P& cp) {
  for_each_block(p, [](std::span<double>) {});
  for_each_block(cp, [](std::span<const double>) {});
};

template <ParameterSet P>
std::vector<std::span<double>> blocks(P& p) {
  std::vector<std::span<double>> out;
  for_each_block(p, [&](std::span<double> s) { out.push_back(s); });
  return out;
}
template <ParameterSet P>
std::vector<std::span<const double>> blocks(const P& p) {
  std::vector<std::span<const double>> out;
  for_each_block(p, [&](std::span<const double> s) { out.push_back(s); });
  return out;
}

template <ParameterSet P>
std::int64_t param_count(const P& p) {
  std::int64_t n = 0;
  for_each_block(p, [&](std::span<const double> s) { n += static_cast<std::int64_t>(s.size()); });
  return n;
}

// Same shape as `p`, every entry zero.
template <ParameterSet P>
P zeros_like(const P& p) {
  P out = p;
  for_each_block(out, [](std::span<double> s) { std::fill(s.begin(), s.end(), 0.0); });
  return out;
}

template <ParameterSet P>
bool all_finite(const P& p) {
  bool ok = true;
  for_each_block(p, [&](std::span<const double> s) {
    for (double x : s) ok = ok && std::isfinite(x);
  });
  return ok;
}

// ---------------------------------------------------------------------------
// Forward / loss / gradients
// ---------------------------------------------------------------------------

// Behavior-cloning batch: rows of concat(obs, goal) and the expert actions.
struct Batch {
  Matrix inputs;
  Matrix targets;

  std::size_t size() const { return inputs.rows; }
};

inline Vector concat(std::span<const double> a, std::span<const double> b) {
  Vector out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

struct ForwardCache {
  std::vector<Matrix> inputs;   // input to each layer
  std::vector<Matrix> pre;      // pre-activation output of each layer
  std::vector<Matrix> lora_u;   // x * A^T per layer (adapter only)
};

inline Matrix forward_batch(const Mlp& base, const LoraAdapter* adapter, const Matrix& x, ForwardCache* cache = nullptr) {
  validate_chain(base);
  if (adapter) validate_adapter(base, *adapter);
  require_dims(x.cols == base.input_dim(), "forward: input width differs from network input");
  Matrix h = x;
  for (std::size_t i = 0; i < base.layers.size(); ++i) {
    const auto& layer = base.layers[i];
    Matrix z = matmul_bt(h, layer.weight);
    for (std::size_t r = 0; r < z.rows; ++r)
      for (std::size_t c = 0; c < z.cols; ++c) z(r, c) += layer.bias[c];
    if (adapter) {
      const auto& f = adapter->layers[i];
      Matrix u = matmul_bt(h, f.a);
      const Matrix delta = matmul_bt(u, f.b);
      for (std::size_t k = 0; k < z.data.size(); ++k) z.data[k] += adapter->scale * delta.data[k];
      if (cache) cache->lora_u.push_back(std::move(u));
    }
    if (cache) {
      cache->inputs.push_back(h);
      cache->pre.push_back(z);
    }
    if (i + 1 < base.layers.size())
      for (auto& v : z.data) v = activate(base.activation, v);
    h = std::move(z);
  }
#ifndef NDEBUG
  for (double v : h.data)
    if (!std::isfinite(v)) throw NumericFailure("forward: non-finite output");
#endif
  return h;
}

inline Vector forward(const Mlp& base, const LoraAdapter* adapter, std::span<const double> input) {
  Matrix x(1, input.size());
  std::copy(input.begin(), input.end(), x.data.begin());
  return forward_batch(base, adapter, x).data;
}

inline Vector forward(const Mlp& base, const LoraAdapter* adapter, std::span<const double> obs,
                      std::span<const double> goal) {
  return forward(base, adapter, concat(obs, goal));
}

// Mean over the batch of the squared L2 action error.
inline double imitation_loss(const Mlp& base, const LoraAdapter* adapter, const Batch& batch) {
  if (batch.size() == 0) throw EmptyBatchError("imitation_loss: empty batch");
  const Matrix y = forward_batch(base, adapter, batch.inputs);
  require_dims(y.cols == batch.targets.cols && y.rows == batch.targets.rows, "imitation_loss: target shape mismatch");
  double total = 0;
  for (std::size_t k = 0; k < y.data.size(); ++k) {
    const double d = y.data[k] - batch.targets.data[k];
    total += d * d;
  }
  return total / static_cast<double>(batch.size());
}

enum class Trainable { kAdapterOnly, kFullBase };

struct Gradients {
  double loss = 0;
  std::optional<Mlp> base;             // present in kFullBase mode
  std::optional<LoraAdapter> adapter;  // present in kAdapterOnly mode
};

inline Gradients grad(const Mlp& base, const LoraAdapter* adapter, const Batch& batch, Trainable mode) {
  if (batch.size() == 0) throw EmptyBatchError("grad: empty batch");
  if (mode == Trainable::kAdapterOnly && adapter == nullptr)
    throw DimensionError("grad: adapter-only mode requires an adapter");
  ForwardCache cache;
  const Matrix y = forward_batch(base, adapter, batch.inputs, &cache);
  require_dims(y.rows == batch.targets.rows && y.cols == batch.targets.cols, "grad: target shape mismatch");

  Gradients out;
  const double n = static_cast<double>(batch.size());
  Matrix dz(y.rows, y.cols);
  double total = 0;
  for (std::size_t k = 0; k < y.data.size(); ++k) {
    const double d = y.data[k] - batch.targets.data[k];
    total += d * d;
    dz.data[k] = 2.0 * d / n;
  }
  out.loss = total / n;

  if (mode == Trainable::kFullBase) out.base = zeros_like(base);
  if (mode == Trainable::kAdapterOnly) out.adapter = zeros_like(*adapter);

  for (std::size_t i = base.layers.size(); i-- > 0;) {
    const auto& layer = base.layers[i];
    const Matrix& x = cache.inputs[i];
    if (i + 1 < base.layers.size()) {
      const Matrix& pre = cache.pre[i];
      for (std::size_t k = 0; k < dz.data.size(); ++k) dz.data[k] *= activate_grad(base.activation, pre.data[k]);
    }
    if (out.base) {
      auto& g = out.base->layers[i];
      g.weight = matmul_at(dz, x);
      for (std::size_t r = 0; r < dz.rows; ++r)
        for (std::size_t c = 0; c < dz.cols; ++c) g.bias[c] += dz(r, c);
    }
    Matrix dv;  // dz * B, n × rank
    if (adapter) {
      const auto& f = adapter->layers[i];
      dv = matmul(dz, f.b);
      if (out.adapter) {
        auto& g = out.adapter->layers[i];
        g.b = matmul_at(dz, cache.lora_u[i]);
        for (auto& v : g.b.data) v *= adapter->scale;
        g.a = matmul_at(dv, x);
        for (auto& v : g.a.data) v *= adapter->scale;
      }
    }
    if (i == 0) break;
    Matrix dx = matmul(dz, layer.weight);
    if (adapter) {
      const Matrix extra = matmul(dv, adapter->layers[i].a);
      for (std::size_t k = 0; k < dx.data.size(); ++k) dx.data[k] += adapter->scale * extra.data[k];
    }
    dz = std::move(dx);
  }
  if (!std::isfinite(out.loss)) throw NumericFailure("grad: non-finite loss");
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamConfig&) const = default;
};

struct AdamState {
  AdamConfig config;
  std::vector<Vector> m;
  std::vector<Vector> v;
  std::int64_t step = 0;

  bool operator==(const AdamState&) const = default;
};

template <ParameterSet P>
AdamState make_adam(const P& params, AdamConfig config = {}) {
  AdamState s;
  s.config = config;
  for_each_block(params, [&](std::span<const double> b) {
    s.m.emplace_back(b.size(), 0.0);
    s.v.emplace_back(b.size(), 0.0);
  });
  return s;
}

template <ParameterSet P>
void adam_step(AdamState& state, P& params, const P& grads) {
  auto pb = blocks(params);
  const auto gb = blocks(grads);
  require_dims(pb.size() == gb.size() && pb.size() == state.m.size(), "adam: block count mismatch");
  ++state.step;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t b = 0; b < pb.size(); ++b) {
    require_dims(pb[b].size() == gb[b].size() && pb[b].size() == state.m[b].size(), "adam: block shape mismatch");
    auto& m = state.m[b];
    auto& v = state.v[b];
    for (std::size_t k = 0; k < pb[b].size(); ++k) {
      const double g = gb[b][k];
      m[k] = c.beta1 * m[k] + (1 - c.beta1) * g;
      v[k] = c.beta2 * v[k] + (1 - c.beta2) * g * g;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      pb[b][k] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints (JSON). nlohmann writes shortest round-trip doubles, so a
// write/read cycle is bit-exact.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json to_json(const Matrix& m) { return {{"rows", m.rows}, {"cols", m.cols}, {"data", m.data}}; }

inline Matrix matrix_from_json(const nlohmann::json& j) {
  Matrix m;
  m.rows = j.at("rows").get<std::size_t>();
  m.cols = j.at("cols").get<std::size_t>();
  m.data = j.at("data").get<std::vector<double>>();
  if (m.data.size() != m.rows * m.cols) throw FormatError("matrix: data length mismatch");
  return m;
}

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
    case Activation::kIdentity: return "identity";
  }
  return "relu";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  if (s == "identity") return Activation::kIdentity;
  throw FormatError("unknown activation '" + s + "'");
}

inline nlohmann::json to_json(const Mlp& m) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers) layers.push_back({{"weight", to_json(l.weight)}, {"bias", l.bias}});
  return {{"activation", activation_name(m.activation)}, {"layers", layers}};
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  Mlp m;
  m.activation = activation_from_name(j.at("activation").get<std::string>());
  for (const auto& l : j.at("layers"))
    m.layers.push_back(Dense{matrix_from_json(l.at("weight")), l.at("bias").get<Vector>()});
  validate_chain(m);
  return m;
}

inline nlohmann::json to_json(const LoraAdapter& a) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : a.layers) layers.push_back({{"a", to_json(l.a)}, {"b", to_json(l.b)}});
  return {{"rank", a.rank}, {"scale", a.scale}, {"layers", layers}};
}

inline LoraAdapter lora_from_json(const nlohmann::json& j) {
  LoraAdapter a;
  a.rank = j.at("rank").get<int>();
  a.scale = j.at("scale").get<double>();
  for (const auto& l : j.at("layers")) a.layers.push_back(LoraFactor{matrix_from_json(l.at("a")), matrix_from_json(l.at("b"))});
  return a;
}

inline nlohmann::json to_json(const AdamState& s) {
  return {{"lr", s.config.lr}, {"beta1", s.config.beta1}, {"beta2", s.config.beta2},
          {"eps", s.config.eps}, {"m", s.m},     {"v", s.v},         {"step", s.step}};
}

inline AdamState adam_from_json(const nlohmann::json& j) {
  AdamState s;
  s.config = AdamConfig{j.at("lr").get<double>(), j.at("beta1").get<double>(), j.at("beta2").get<double>(),
                        j.at("eps").get<double>()};
  s.m = j.at("m").get<std::vector<Vector>>();
  s.v = j.at("v").get<std::vector<Vector>>();
  s.step = j.at("step").get<std::int64_t>();
  return s;
}

// Versioned container for a base network, used for pre-trained checkpoints.
inline nlohmann::json base_checkpoint(const Mlp& base, const std::string& config_hash = {}) {
  return {{"format", "iscil-base"}, {"version", kCheckpointVersion}, {"config_hash", config_hash}, {"base", to_json(base)}};
}

inline Mlp load_base_checkpoint(const nlohmann::json& j) {
  if (j.value("format", "") != "iscil-base" || j.value("version", 0) != kCheckpointVersion)
    throw FormatError("not a version-1 base checkpoint");
  return mlp_from_json(j.at("base"));
}

}  // namespace iscil::nn
