#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "moxe/errors.hpp"
#include "moxe/gradcheck.hpp"
#include "moxe/router.hpp"

using namespace moxe;

namespace {

RouterParams zero_router(std::size_t d, std::size_t e, double gamma) {
  RouterParams p;
  p.gate_weight = Tensor::zeros({d, e});
  p.gate_bias = Tensor::zeros({e});
  p.difficulty_weight = Tensor::zeros({d});
  p.difficulty_bias = Tensor::zeros({1});
  p.gamma = gamma;
  p.groups = half_split_groups(e);
  return p;
}

std::vector<double> uniform_vec(std::size_t n, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

std::vector<double> to_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(Difficulty, Anchors) {
  auto p = zero_router(2, 4, 1.0);
  EXPECT_EQ(difficulty_score(p, Tensor::vector({3, -4})).item(), 0.5);
  p.difficulty_bias = Tensor::vector({-30.0});
  EXPECT_LT(difficulty_score(p, Tensor::vector({3, -4})).item(), 1e-12);
  p.difficulty_bias = Tensor::zeros({1});
  p.difficulty_weight = Tensor::vector({1, 0});
  EXPECT_NEAR(difficulty_score(p, Tensor::vector({std::log(3.0), 5})).item(), 0.75, 1e-15);
}

TEST(ModulationBias, Anchors) {
  const auto groups = half_split_groups(4);
  for (double v : to_vec(modulation_bias(Tensor::vector({0.0}), 3.0, groups))) EXPECT_EQ(v, 0.0);
  for (double v : to_vec(modulation_bias(Tensor::vector({0.8}), 0.0, groups))) EXPECT_EQ(v, 0.0);
  const auto delta = to_vec(modulation_bias(Tensor::vector({0.5}), 2.0, groups));
  EXPECT_EQ(delta, (std::vector<double>{1, 1, -1, -1}));
}

TEST(Groups, HalfSplit) {
  const auto g = half_split_groups(8);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(g[i], i < 4 ? ExpertGroup::mlstm : ExpertGroup::slstm);
}

TEST(Route, UniformWithoutBias) {
  auto p = zero_router(3, 4, 0.0);
  auto d = route(p, Tensor::vector({1, 2, 3}), 2);
  for (double v : d.probs.values()) EXPECT_DOUBLE_EQ(v, 0.25);
  EXPECT_DOUBLE_EQ(d.normalized_entropy, 1.0);
  ASSERT_EQ(d.topk.size(), 2u);
  EXPECT_EQ(d.topk[0].expert, 0u);
  EXPECT_EQ(d.topk[1].expert, 1u);
  EXPECT_DOUBLE_EQ(d.topk[0].weight, 0.25);
}

TEST(Route, FullTopKSelectsEveryExpert) {
  std::mt19937_64 rng(1);
  auto p = init_router(3, 4, 1.0, rng);
  auto d = route(p, Tensor::vector({0.3, -0.2, 0.9}), 4);
  ASSERT_EQ(d.topk.size(), 4u);
  std::vector<bool> seen(4, false);
  for (const auto& e : d.topk) {
    seen[e.expert] = true;
    EXPECT_EQ(e.weight, d.probs[e.expert]);
  }
  for (bool s : seen) EXPECT_TRUE(s);
}

TEST(Route, BiasedZeroGate) {
  auto p = zero_router(2, 4, 1.0);
  auto d = route(p, Tensor::vector({1, 1}), 2);
  EXPECT_EQ(d.difficulty.item(), 0.5);
  EXPECT_EQ(to_vec(d.adjusted_logits), (std::vector<double>{0.5, 0.5, -0.5, -0.5}));
  // e^{0.5} / (2e^{0.5} + 2e^{-0.5}) = 1 / (2 + 2e^{-1})
  const double hi = 1.0 / (2.0 + 2.0 * std::exp(-1.0));
  const double lo = 0.5 - hi;
  EXPECT_NEAR(hi, 0.3655, 5e-5);
  EXPECT_NEAR(d.probs[0], hi, 1e-15);
  EXPECT_NEAR(d.probs[1], hi, 1e-15);
  EXPECT_NEAR(d.probs[2], lo, 1e-15);
  EXPECT_NEAR(d.probs[3], lo, 1e-15);
  // Unbiased probabilities ignore δ.
  for (double v : d.unbiased_probs.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Route, RejectsBadK) {
  auto p = zero_router(2, 4, 1.0);
  EXPECT_THROW(route(p, Tensor::vector({1, 1}), 0), ContractError);
  EXPECT_THROW(route(p, Tensor::vector({1, 1}), 5), ContractError);
}

TEST(Route, TiesGoToLowerIndex) {
  const auto idx = top_k_indices(std::vector<double>{0.2, 0.3, 0.3, 0.2}, 3);
  EXPECT_EQ(idx, (std::vector<std::size_t>{1, 2, 0}));
}

TEST(Entropy, Anchors) {
  EXPECT_DOUBLE_EQ(normalized_entropy(std::vector<double>(5, 0.2)), 1.0);
  EXPECT_EQ(normalized_entropy(std::vector<double>{0, 1, 0}), 0.0);
  EXPECT_DOUBLE_EQ(normalized_entropy(std::vector<double>{0.5, 0.5, 0, 0}), 0.5);
  EXPECT_THROW(normalized_entropy(std::vector<double>{1.0}), ContractError);
}

TEST(GroupMass, Anchors) {
  auto m = group_mass(std::vector<double>(8, 0.125), half_split_groups(8));
  EXPECT_DOUBLE_EQ(m.mlstm, 0.5);
  EXPECT_DOUBLE_EQ(m.slstm, 0.5);
  m = group_mass(std::vector<double>{0, 1, 0, 0}, half_split_groups(4));
  EXPECT_EQ(m.mlstm, 1.0);
  EXPECT_EQ(m.slstm, 0.0);
  m = group_mass(std::vector<double>{0.4, 0.1, 0.3, 0.2}, half_split_groups(4));
  EXPECT_DOUBLE_EQ(m.mlstm, 0.5);
  EXPECT_DOUBLE_EQ(m.slstm, 0.5);
}

TEST(RoutingRatio, Anchors) {
  const auto groups = half_split_groups(4);
  const std::vector<double> z{0.3, -1.2, 0.8, 2.0};
  auto r = routing_ratio(z, 0.0, 1.7, groups);
  EXPECT_NEAR(r.exact / r.correction, 1.0, 1e-12);
  EXPECT_EQ(r.predicted, 1.0);

  // Balanced: both groups hold the same logit multiset.
  r = routing_ratio(std::vector<double>{0.4, -0.9, -0.9, 0.4}, 0.5, 1.0, groups);
  EXPECT_NEAR(r.correction, 1.0, 1e-15);
  EXPECT_NEAR(r.exact, 2.718281828459045, 1e-12);

  r = routing_ratio(z, 0.7, 1.5, groups);
  EXPECT_NEAR(r.exact / (r.predicted * r.correction), 1.0, 1e-9);

  EXPECT_THROW(routing_ratio(std::vector<double>{0, 0, -1e6, -1e6}, 0.5, 1.0, groups), DegenerateRoutingError);
}

TEST(RoutingRatio, DecisionMatchesValueForm) {
  std::mt19937_64 rng(2);
  auto p = init_router(3, 6, 2.0, rng);
  auto d = route(p, Tensor::vector({0.5, 1.5, -0.4}), 2);
  auto a = routing_ratio(d);
  auto b = routing_ratio(d.raw_logits.values(), d.difficulty.item(), 2.0, p.groups);
  EXPECT_NEAR(a.exact / b.exact, 1.0, 1e-12);
  EXPECT_EQ(a.correction, b.correction);
  EXPECT_EQ(a.predicted, b.predicted);
}

TEST(RouterProperties, RatioIdentityOverRandomDraws) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> gamma(0, 4), diff(0, 1);
  std::uniform_int_distribution<int> half(1, 4);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t e = 2 * static_cast<std::size_t>(half(rng));
    const auto z = uniform_vec(e, rng, -5, 5);
    const auto r = routing_ratio(z, diff(rng), gamma(rng), half_split_groups(e));
    worst = std::max(worst, std::fabs(r.exact / (r.predicted * r.correction) - 1.0));
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(RouterProperties, GroupMassMonotoneInDifficulty) {
  std::mt19937_64 rng(4);
  const auto groups = half_split_groups(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z = Tensor::vector(uniform_vec(4, rng, -3, 3));
    double prev = -1.0;
    for (int i = 0; i <= 10; ++i) {
      auto b = route_logits(z, Tensor::vector({0.1 * i}), Tensor::scalar(1.0), groups, 2);
      const double pm = group_mass(b.probs.values(), groups).mlstm;
      EXPECT_GT(pm, prev);
      prev = pm;
    }
  }
}

TEST(RouterProperties, ZeroGammaLeavesProbabilitiesUnbiased) {
  std::mt19937_64 rng(5);
  auto p = init_router(4, 4, 0.0, rng);
  const Tensor h({6, 4}, uniform_vec(24, rng, -2, 2));
  auto b = route_sequence(p, h, 2);
  for (double v : b.bias.values()) EXPECT_EQ(v, 0.0);
  const auto pv = b.probs.values(), uv = b.unbiased_probs.values();
  for (std::size_t i = 0; i < pv.size(); ++i) EXPECT_EQ(pv[i], uv[i]);
}

TEST(RouterProperties, TopKAndRanges) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = init_router(5, 8, 3.0, rng);
    const Tensor h({4, 5}, uniform_vec(20, rng, -50, 50));
    auto b = route_sequence(p, h, 3);
    for (std::size_t t = 0; t < 4; ++t) {
      const auto row_p = b.probs.values().subspan(t * 8, 8);
      const auto sel = b.selected(t);
      double selected_sum = 0.0, min_selected = 1.0, max_unselected = 0.0;
      for (std::size_t e = 0; e < 8; ++e) {
        const bool chosen = std::find(sel.begin(), sel.end(), e) != sel.end();
        if (chosen) {
          selected_sum += b.gate_weights.at(t, e);
          min_selected = std::min(min_selected, row_p[e]);
          EXPECT_EQ(b.gate_weights.at(t, e), row_p[e]);
        } else {
          max_unselected = std::max(max_unselected, row_p[e]);
          EXPECT_EQ(b.gate_weights.at(t, e), 0.0);
        }
      }
      EXPECT_GE(min_selected, max_unselected);
      EXPECT_LE(selected_sum, 1.0 + 1e-15);
      EXPECT_GE(b.difficulty[t], 0.0);
      EXPECT_LE(b.difficulty[t], 1.0);
      EXPECT_GE(b.entropy[t], 0.0);
      EXPECT_LE(b.entropy[t], 1.0 + 1e-15);
    }
  }
}

TEST(RouterProperties, RenormalizedWeightsSumToOne) {
  std::mt19937_64 rng(7);
  auto p = init_router(3, 4, 1.0, rng);
  auto b = route_sequence(p, Tensor({2, 3}, uniform_vec(6, rng, -1, 1)), 2, true);
  for (std::size_t t = 0; t < 2; ++t) {
    double s = 0;
    for (std::size_t e = 0; e < 4; ++e) s += b.gate_weights.at(t, e);
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(RouterGradients, RouteMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  auto p = init_router(4, 4, 1.3, rng);
  const Tensor w1({3, 4}, uniform_vec(12, rng, -1, 1));
  const Tensor w2({3, 4}, uniform_vec(12, rng, -1, 1));
  std::vector<Tensor> params{p.gate_weight.clone(), p.gate_bias.clone(), p.difficulty_weight.clone(),
                             p.difficulty_bias.clone(), Tensor({3, 4}, uniform_vec(12, rng, -1, 1))};
  auto f = [&](std::span<const Tensor> q) {
    RouterParams local = p;
    local.gate_weight = q[0];
    local.gate_bias = q[1];
    local.difficulty_weight = q[2];
    local.difficulty_bias = q[3];
    auto b = route_sequence(local, q[4], 2);
    return add(sum(mul(b.probs, w1)), sum(mul(b.gate_weights, w2)));
  };
  EXPECT_LE(finite_diff_check(f, params).max_rel_error, 1e-5);
}

TEST(RouterGradients, GammaPath) {
  std::mt19937_64 rng(9);
  const auto groups = half_split_groups(4);
  const Tensor w({2, 4}, uniform_vec(8, rng, -1, 1));
  std::vector<Tensor> params{Tensor({2, 4}, uniform_vec(8, rng, -1, 1)), Tensor::vector({0.3, 0.8}),
                             Tensor::scalar(1.5)};
  auto f = [&](std::span<const Tensor> q) { return sum(mul(route_logits(q[0], q[1], q[2], groups, 2).probs, w)); };
  auto r = finite_diff_check(f, params);
  EXPECT_LE(r.max_rel_error, 1e-5);

  Tape tape;
  auto g = tape.watch(params[2]);
  tape.backward(sum(mul(route_logits(params[0], params[1], g, groups, 2).probs, w)));
  EXPECT_NE(g.grad()[0], 0.0);
}
