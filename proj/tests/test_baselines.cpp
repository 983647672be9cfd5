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

#include <cmath>
#include <memory>

#include <gtest/gtest.h>

#include "iscil/baselines.hpp"
#include "test_util.hpp"

using namespace iscil;
using namespace iscil::baselines;
using iscil::testing::make_stage;
using iscil::testing::small_budget;
using iscil::testing::task_of;
using iscil::testing::tiny_base;

namespace {

const env::EnvSpec kSpec = env::default_spec();
const env::GoalTable kGoals(kSpec);

const env::Task kTaskA = task_of(kSpec, {0, 4, 2, 6});
const env::Task kTaskB = task_of(kSpec, {1, 5, 3, 2});

double stage_loss(const Mlp& base, const StageDataset& st) {
  return nn::imitation_loss(base, nullptr, whole(make_table(all_transitions(st), kGoals)));
}

env::Action act_at(const Method& m, const env::Task& task, std::uint64_t seed) {
  const auto s = env::reset(kSpec, task, seed);
  const int g = task.subgoals[0];
  return m.act(env::PolicyInput{s.obs, g, kGoals[g], task.id});
}

}  // namespace

TEST(SeqFt, ZeroUpdatesLeaveBaseUnchanged) {
  auto base = tiny_base(kSpec);
  const auto before = base;
  seqft_stage(base, make_stage(kSpec, 0, {kTaskA}, 1, 1), small_budget(0), kGoals, 1);
  EXPECT_EQ(base, before);
}

TEST(SeqFt, SingleUpdateMatchesManualAdamStep) {
  const auto stage = make_stage(kSpec, 0, {kTaskA}, 1, 1);
  auto base = tiny_base(kSpec);
  auto oracle = base;
  TrainBudget b = small_budget(1);
  b.batch_size = 100000;  // whole stage, no sampling
  seqft_stage(base, stage, b, kGoals, 1);
  const auto g = nn::grad(oracle, nullptr, whole(make_table(all_transitions(stage), kGoals)), nn::Trainable::kFullBase);
  auto adam = nn::make_adam(oracle);
  nn::adam_step(adam, oracle, *g.base);
  EXPECT_EQ(base, oracle);
}

TEST(SeqFt, LaterStageRaisesEarlierLoss) {
  const auto a = make_stage(kSpec, 0, {kTaskA}, 2, 1);
  const auto b = make_stage(kSpec, 1, {kTaskB}, 2, 1);
  auto base = tiny_base(kSpec);
  seqft_stage(base, a, small_budget(400), kGoals, 1);
  const double after_a = stage_loss(base, a);
  seqft_stage(base, b, small_budget(400), kGoals, 1);
  EXPECT_GT(stage_loss(base, a), after_a);
}

TEST(SeqFt, EmptyStageRejected) {
  auto base = tiny_base(kSpec);
  EXPECT_THROW(seqft_stage(base, StageDataset{}, small_budget(1), kGoals, 1), EmptyStageError);
}

TEST(Ewc, ZeroFisherMatchesSeqFt) {
  const auto a = make_stage(kSpec, 1, {kTaskA}, 1, 1);
  auto ft = tiny_base(kSpec);
  auto ewc = ft;
  auto st = make_fisher(ewc);
  st.initialized = true;
  st.anchor = tiny_base(kSpec, 77);
  seqft_stage(ft, a, small_budget(40), kGoals, 5);
  ewc_stage(ewc, st, a, small_budget(40), kGoals, 5);
  EXPECT_EQ(ft, ewc);
}

TEST(Ewc, FisherMovingAverage) {
  Mlp one;
  one.activation = nn::Activation::kIdentity;
  one.layers.push_back(nn::Dense{nn::Matrix(1, 1, 1.0), Vector{1.0}});
  auto st = make_fisher(one);
  fisher_ema(st, one);  // first stage: taken as is
  EXPECT_EQ(st.fisher, one);
  auto next = one;
  next.layers[0].weight.data[0] = 0.0;
  next.layers[0].bias[0] = 2.0;
  fisher_ema(st, next);
  EXPECT_NEAR(st.fisher.layers[0].weight.data[0], 0.9, 1e-15);
  EXPECT_NEAR(st.fisher.layers[0].bias[0], 1.1, 1e-15);
}

TEST(Ewc, EmpiricalFisherIsMeanSquaredGradient) {
  const auto st = make_stage(kSpec, 0, {kTaskA}, 1, 1);
  const auto base = tiny_base(kSpec);
  const auto table = make_table(all_transitions(st), kGoals);
  const auto f = empirical_fisher(base, table, table.size(), 1);
  auto oracle = nn::zeros_like(base);
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto g = nn::grad(base, nullptr, gather(table, {i}), nn::Trainable::kFullBase);
    auto ob = nn::blocks(oracle);
    const auto gb = nn::blocks(*g.base);
    for (std::size_t b = 0; b < ob.size(); ++b)
      for (std::size_t k = 0; k < ob[b].size(); ++k) ob[b][k] += gb[b][k] * gb[b][k] / static_cast<double>(table.size());
  }
  const auto fb = nn::blocks(f);
  const auto ob = nn::blocks(oracle);
  for (std::size_t b = 0; b < fb.size(); ++b)
    for (std::size_t k = 0; k < fb[b].size(); ++k) EXPECT_NEAR(fb[b][k], ob[b][k], 1e-12 * std::max(1.0, ob[b][k]));
}

TEST(Ewc, StrongerPenaltyRetainsEarlierStage) {
  const auto a = make_stage(kSpec, 0, {kTaskA}, 1, 1);
  const auto b = make_stage(kSpec, 1, {kTaskB}, 1, 1);
  double previous = INFINITY;
  for (double alpha : {0.0, 10.0, 1e3, 1e5, 1e9}) {
    auto base = tiny_base(kSpec);
    auto st = make_fisher(base, 0.9, alpha);
    ewc_stage(base, st, a, small_budget(200), kGoals, 1);
    ewc_stage(base, st, b, small_budget(200), kGoals, 1);
    const double loss_a = stage_loss(base, a);
    EXPECT_LT(loss_a, previous) << "alpha " << alpha;
    previous = loss_a;
  }
}

TEST(Ewc, DriftShrinksWithPenaltyUnderUniformFisher) {
  const auto b = make_stage(kSpec, 1, {kTaskB}, 1, 1);
  const auto anchor = tiny_base(kSpec);
  double previous = INFINITY;
  for (double alpha : {0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1e3}) {
    auto base = anchor;
    auto st = make_fisher(base, 0.9, alpha);
    for (auto s : nn::blocks(st.fisher))
      for (auto& x : s) x = 1.0;
    st.initialized = true;
    ewc_stage(base, st, b, small_budget(200), kGoals, 1);
    double drift = 0;
    const auto now = nn::blocks(base);
    const auto then = nn::blocks(anchor);
    for (std::size_t k = 0; k < now.size(); ++k)
      for (std::size_t i = 0; i < now[k].size(); ++i) drift += (now[k][i] - then[k][i]) * (now[k][i] - then[k][i]);
    EXPECT_LE(std::sqrt(drift), previous) << "alpha " << alpha;
    previous = std::sqrt(drift);
  }
}

TEST(L2m, SingleKeyTakesEveryQuery) {
  const auto base = tiny_base(kSpec);
  auto pool = make_l2m_pool(base, 1, 2, QueryMode::kState, query_dim(QueryMode::kState, kSpec), 1);
  const auto st = make_stage(kSpec, 0, {kTaskA}, 1, 1);
  l2m_stage(pool, base, st, small_budget(10), kGoals, 1);
  EXPECT_EQ(pool.usage[0], 10 * 32);
}

TEST(L2m, RoutingFollowsClusters) {
  L2mPool pool;
  pool.keys = {{1, 0, 0}, {0, 1, 0}};
  pool.usage = {0, 0};
  pool.adapters.resize(2);
  std::vector<Vector> q;
  for (int i = 0; i < 7; ++i) q.push_back(retrieval::normalized(Vector{1, 0.05 * i, 0.1}));
  for (int i = 0; i < 4; ++i) q.push_back(retrieval::normalized(Vector{0.05 * i, 1, 0.1}));
  const auto chosen = l2m_route(pool, q);
  EXPECT_EQ(pool.usage, (std::vector<std::int64_t>{7, 4}));
  for (std::size_t i = 0; i < q.size(); ++i) EXPECT_EQ(chosen[i], i < 7 ? 0u : 1u);
}

TEST(L2m, KeysRetrieveThemselves) {
  const auto pool = make_l2m_pool(tiny_base(kSpec), 10, 2, QueryMode::kStateGoal, query_dim(QueryMode::kStateGoal, kSpec), 3);
  for (std::size_t i = 0; i < pool.size(); ++i) EXPECT_EQ(l2m_retrieve(pool, retrieval::normalized(pool.keys[i])), i);
}

TEST(L2m, PullIncreasesCosine) {
  Vector key = retrieval::normalized(Vector{1, 0.5});
  const Vector q = retrieval::normalized(Vector{0, 1});
  const double before = retrieval::dot(key, q) / retrieval::norm2(key);
  l2m_pull_key(key, q, 0.1);
  EXPECT_GT(retrieval::dot(key, q) / retrieval::norm2(key), before);
}

TEST(Tail, TaskAdaptersAreIsolated) {
  const auto base = tiny_base(kSpec);
  auto reg = make_tail_registry(IdentifierKind::kTask);
  EXPECT_EQ(reg.rank, 16);
  tail_stage(reg, base, make_stage(kSpec, 0, {kTaskA}, 1, 1), small_budget(20), kGoals, 1);
  const auto a = reg.adapters.at(kTaskA.id);
  tail_stage(reg, base, make_stage(kSpec, 1, {kTaskB}, 1, 1), small_budget(20), kGoals, 1);
  EXPECT_EQ(reg.adapters.at(kTaskA.id), a);
  EXPECT_EQ(reg.adapters.size(), 2u);
}

TEST(Tail, GoalAdaptersAreOverwritten) {
  const auto base = tiny_base(kSpec);
  auto reg = make_tail_registry(IdentifierKind::kSubgoal);
  EXPECT_EQ(reg.rank, 4);
  tail_stage(reg, base, make_stage(kSpec, 0, {kTaskA}, 1, 1), small_budget(20), kGoals, 1);
  const auto shared = reg.adapters.at(2);  // sub-goal 2 appears in both tasks
  const auto only_a = reg.adapters.at(0);
  tail_stage(reg, base, make_stage(kSpec, 1, {kTaskB}, 1, 1), small_budget(20), kGoals, 1);
  EXPECT_NE(reg.adapters.at(2), shared);
  EXPECT_EQ(reg.adapters.at(0), only_a);
  EXPECT_EQ(reg.adapters.size(), 7u);
}

TEST(Tail, UnknownIdentifierFallsBackToBase) {
  TailMethod m(tiny_base(kSpec), IdentifierKind::kTask, std::nullopt, small_budget(10), 1);
  const auto ctx = make_context(kSpec, 1);
  m.train_stage(make_stage(kSpec, 0, {kTaskA}, 1, 1), ctx);
  SeqFtMethod plain(tiny_base(kSpec), small_budget(0), 1);
  EXPECT_EQ(act_at(m, kTaskB, 4), act_at(plain, kTaskB, 4));
  EXPECT_EQ(m.fallbacks(), 1u);
  act_at(m, kTaskA, 4);
  EXPECT_EQ(m.fallbacks(), 1u);
}

TEST(Er, ZeroQuotaMatchesSeqFt) {
  ErMethod er(tiny_base(kSpec), 0, false, small_budget(30), 2);
  SeqFtMethod ft(tiny_base(kSpec), small_budget(30), 2);
  const auto ctx = make_context(kSpec, 2);
  for (int s = 0; s < 3; ++s) {
    const auto st = make_stage(kSpec, s, {s % 2 ? kTaskB : kTaskA}, 1, 3);
    er.train_stage(st, ctx);
    ft.train_stage(st, ctx);
  }
  EXPECT_EQ(er.base(), ft.base());
  EXPECT_TRUE(er.buffer().items.empty());
}

TEST(Er, DrawIsHalfAndHalfAndUniform) {
  Rng rng(11);
  const std::size_t n_rep = 10, draws = 2000, batch = 64;
  std::vector<double> counts(n_rep, 0.0);
  for (std::size_t i = 0; i < draws; ++i) {
    const auto d = draw_mixed(rng, 50, n_rep, batch);
    ASSERT_EQ(d.current.size(), batch / 2);
    ASSERT_EQ(d.replay.size(), batch / 2);
    for (auto r : d.replay) counts[r] += 1;
  }
  const double expected = static_cast<double>(draws * batch / 2) / n_rep;
  double chi2 = 0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 27.88);  // 9 degrees of freedom at the 0.001 level
}

TEST(Er, BufferGrowsByQuota) {
  ErMethod er(tiny_base(kSpec), 10, false, small_budget(5), 2);
  ErMethod all(tiny_base(kSpec), 0, true, small_budget(5), 2);
  const auto ctx = make_context(kSpec, 2);
  std::size_t total = 0;
  for (int s = 0; s < 3; ++s) {
    const auto st = make_stage(kSpec, s, {s % 2 ? kTaskB : kTaskA}, 1, 3);
    total += all_transitions(st).size();
    er.train_stage(st, ctx);
    all.train_stage(st, ctx);
    EXPECT_EQ(er.buffer().items.size(), 10u * static_cast<std::size_t>(s + 1));
  }
  EXPECT_EQ(all.buffer().items.size(), total);
  EXPECT_EQ(all.name(), "multitask");
}

TEST(Clpu, UnlearnRemovesOnlyThatTask) {
  TailMethod m(tiny_base(kSpec), IdentifierKind::kTask, std::nullopt, small_budget(10), 1, true);
  const auto ctx = make_context(kSpec, 1);
  const auto sa = make_stage(kSpec, 0, {kTaskA}, 1, 1);
  const auto sb = make_stage(kSpec, 1, {kTaskB}, 1, 1);
  m.train_stage(sa, ctx);
  m.train_stage(sb, ctx);
  EXPECT_TRUE(m.unlearn(9999).empty());
  EXPECT_EQ(m.unlearn(kTaskA.id).size(), 1u);
  TailMethod only_b(tiny_base(kSpec), IdentifierKind::kTask, std::nullopt, small_budget(10), 1, true);
  only_b.train_stage(sb, ctx);
  EXPECT_EQ(m.registry(), only_b.registry());
  SeqFtMethod plain(tiny_base(kSpec), small_budget(0), 1);
  EXPECT_EQ(act_at(m, kTaskA, 6), act_at(plain, kTaskA, 6));
  EXPECT_THROW(TailMethod(tiny_base(kSpec), IdentifierKind::kSubgoal, std::nullopt, small_budget(1), 1, true), ConfigError);
}

TEST(Methods, SaveLoadRoundTrip) {
  const auto ctx = make_context(kSpec, 1);
  const auto st = make_stage(kSpec, 0, {kTaskA, kTaskB}, 1, 1);
  auto make = [&](std::uint64_t base_seed) {
    std::vector<std::unique_ptr<Method>> v;
    v.push_back(std::make_unique<SeqFtMethod>(tiny_base(kSpec, base_seed), small_budget(5), 1));
    v.push_back(std::make_unique<SeqLoraMethod>(tiny_base(kSpec, base_seed), 8, small_budget(5), 1));
    v.push_back(std::make_unique<EwcMethod>(tiny_base(kSpec, base_seed), small_budget(5), 1));
    v.push_back(std::make_unique<L2mMethod>(tiny_base(kSpec, base_seed), kSpec, QueryMode::kStateGoal, 4, 2, small_budget(5), 1));
    v.push_back(std::make_unique<TailMethod>(tiny_base(kSpec, base_seed), IdentifierKind::kSubgoal, std::nullopt, small_budget(5), 1));
    v.push_back(std::make_unique<ErMethod>(tiny_base(kSpec, base_seed), 5, false, small_budget(5), 1));
    return v;
  };
  auto trained = make(3);
  auto fresh = make(8);
  for (std::size_t i = 0; i < trained.size(); ++i) {
    trained[i]->train_stage(st, ctx);
    fresh[i]->load(nlohmann::json::parse(trained[i]->save().dump()));
    EXPECT_EQ(fresh[i]->save(), trained[i]->save()) << trained[i]->name();
    EXPECT_EQ(act_at(*fresh[i], kTaskA, 2), act_at(*trained[i], kTaskA, 2)) << trained[i]->name();
  }
}
