#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "moxe/errors.hpp"
#include "moxe/gradcheck.hpp"
#include "moxe/model.hpp"

using namespace moxe;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.vocab_size = 16;
  c.embed_dim = 8;
  c.num_layers = 2;
  c.num_experts = 4;
  c.top_k = 2;
  c.num_heads = 2;
  c.seed = seed;
  return c;
}

std::vector<double> to_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Tensor random_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = n(rng);
  return Tensor({rows, cols}, std::move(v));
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, static_cast<int>(vocab) - 1);
  std::vector<int> t(n);
  for (auto& x : t) x = u(rng);
  return t;
}

void zero_expert_outputs(ModelParams& p) {
  for (auto& layer : p.layers) {
    for (auto& ex : layer.experts) {
      if (ex.kind == CellKind::ffn) {
        ex.ffn.w2 = Tensor::zeros(ex.ffn.w2.shape());
        ex.ffn.b2 = Tensor::zeros(ex.ffn.b2.shape());
      } else {
        ex.out = Tensor::zeros(ex.out.shape());
      }
    }
  }
}

}  // namespace

// ---- config -------------------------------------------------------------------------

TEST(Config, TextRoundTrip) {
  ModelConfig c = tiny_config(7);
  c.gamma = 0.3;
  c.capacity_factor = kUnlimitedCapacity;
  c.expert_kind = ExpertKind::ffn;
  c.group_loss_enabled = false;
  c.mixer_order = MixerOrder::mlstm_first;
  c.lambdas.z = 1.0 / 3.0;

  ModelConfig back;
  std::istringstream in(c.to_text());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    ASSERT_NE(eq, std::string::npos);
    ASSERT_TRUE(back.set(line.substr(0, eq), line.substr(eq + 1))) << line;
  }
  EXPECT_EQ(back.to_text(), c.to_text());
  EXPECT_EQ(back.lambdas.z, c.lambdas.z);
  EXPECT_TRUE(back.unlimited_capacity());
}

TEST(Config, EveryKeyIsSettable) {
  ModelConfig c;
  std::istringstream in(c.to_text());
  std::string line;
  std::vector<std::string> seen;
  while (std::getline(in, line)) seen.push_back(line.substr(0, line.find('=')));
  EXPECT_EQ(seen, ModelConfig::keys());
  EXPECT_FALSE(c.set("no_such_key", "1"));
}

TEST(Config, RejectsBadValues) {
  ModelConfig c;
  EXPECT_THROW(c.set("embed_dim", "abc"), ConfigError);
  EXPECT_THROW(c.set("embed_dim", "-3"), ConfigError);
  EXPECT_THROW(c.set("gamma", "1.0x"), ConfigError);
  EXPECT_THROW(c.set("group_loss", "maybe"), ConfigError);
  EXPECT_THROW(c.set("expert_kind", "transformer"), ConfigError);

  auto invalid = [](auto mutate) {
    ModelConfig m = tiny_config();
    mutate(m);
    EXPECT_THROW(m.validate(), ConfigError);
  };
  invalid([](ModelConfig& m) { m.top_k = 0; });
  invalid([](ModelConfig& m) { m.top_k = 5; });
  invalid([](ModelConfig& m) { m.num_experts = 3; });
  invalid([](ModelConfig& m) { m.num_heads = 3; });
  invalid([](ModelConfig& m) { m.gamma = -0.1; });
  invalid([](ModelConfig& m) { m.lambdas.aux = -1.0; });
  invalid([](ModelConfig& m) { m.capacity_factor = 0.0; });
  invalid([](ModelConfig& m) { m.vocab_size = 1; });
  EXPECT_NO_THROW(tiny_config().validate());
}

TEST(Config, CapacityFormula) {
  ModelConfig c = tiny_config();
  c.capacity_factor = 1.0;
  EXPECT_EQ(expert_capacity(c, 8), 2u);
  c.capacity_factor = 1.25;
  EXPECT_EQ(expert_capacity(c, 8), 3u);
  EXPECT_EQ(expert_capacity(c, 1), 1u);
  c.capacity_factor = kUnlimitedCapacity;
  EXPECT_EQ(expert_capacity(c, 37), 37u);
}

// ---- dispatch ----------------------------------------------------------------------------

TEST(Dispatch, AdversarialSingleExpert) {
  std::vector<std::size_t> sel(8, 2);  // every token wants expert 2
  const auto plan = dispatch(sel, 8, 4, 1, 2);
  EXPECT_EQ(plan.served(), 2u);
  EXPECT_EQ(plan.dropped.size(), 6u);
  EXPECT_EQ(plan.tokens[2], (std::vector<std::size_t>{0, 1}));
  for (std::size_t e : {0u, 1u, 3u}) EXPECT_TRUE(plan.tokens[e].empty());
}

TEST(Dispatch, SecondChoiceStillServedWhenFirstIsFull) {
  // k = 2, capacity 1: token 1's first choice (expert 0) is full.
  std::vector<std::size_t> sel{0, 1, 0, 2};
  const auto plan = dispatch(sel, 2, 4, 2, 1);
  EXPECT_EQ(plan.tokens[0], (std::vector<std::size_t>{0}));
  EXPECT_EQ(plan.tokens[1], (std::vector<std::size_t>{0}));
  EXPECT_EQ(plan.tokens[2], (std::vector<std::size_t>{1}));
  ASSERT_EQ(plan.dropped.size(), 1u);
  EXPECT_EQ(plan.dropped[0], (std::pair<std::size_t, std::size_t>{1, 0}));
}

TEST(Dispatch, CapacityNeverExceeded) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 1 + rng() % 40, E = 2 + 2 * (rng() % 4), k = 1 + rng() % E;
    ModelConfig c = tiny_config();
    c.num_experts = E;
    c.capacity_factor = std::uniform_real_distribution<double>(0.25, 2.0)(rng);
    const std::size_t cap = expert_capacity(c, T);
    std::vector<std::size_t> sel;
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<std::size_t> e(E);
      for (std::size_t i = 0; i < E; ++i) e[i] = i;
      std::shuffle(e.begin(), e.end(), rng);
      sel.insert(sel.end(), e.begin(), e.begin() + k);
    }
    const auto plan = dispatch(sel, T, E, k, cap);
    for (const auto& tokens : plan.tokens) {
      EXPECT_LE(tokens.size(), cap);
      EXPECT_TRUE(std::is_sorted(tokens.begin(), tokens.end()));
    }
    EXPECT_EQ(plan.served() + plan.dropped.size(), T * k);
  }
}

TEST(Dispatch, RejectsBadShapes) {
  std::vector<std::size_t> sel{0, 1, 2};
  EXPECT_THROW(dispatch(sel, 2, 4, 2, 1), DimensionError);
  std::vector<std::size_t> out_of_range{4};
  EXPECT_THROW(dispatch(out_of_range, 1, 4, 1, 1), DimensionError);
}

// ---- layer --------------------------------------------------------------------------------

TEST(Layer, MixerIsIdentityWithZeroOutputProjections) {
  auto p = init_model(tiny_config());
  auto& m = p.layers[0].mixer;
  m.slstm_out = Tensor::zeros({8, 8});
  m.mlstm_out = Tensor::zeros({8, 8});
  std::mt19937_64 rng(3);
  const Tensor h = random_rows(7, 8, rng);
  for (auto order : {MixerOrder::slstm_first, MixerOrder::mlstm_first}) {
    EXPECT_EQ(to_vec(sequence_mix(m, h, order)), to_vec(h));
  }
}

TEST(Layer, MixerShapeAndCausality) {
  ModelConfig c = tiny_config();
  c.embed_dim = 16;
  c.num_heads = 4;
  auto p = init_model(c);
  std::mt19937_64 rng(4);
  const Tensor h = random_rows(7, 16, rng);
  const Tensor y = sequence_mix(p.layers[0].mixer, h, c.mixer_order);
  ASSERT_EQ(y.shape(), (Shape{7, 16}));

  auto hv = to_vec(h);
  for (std::size_t j = 16 * 4; j < hv.size(); ++j) hv[j] += 0.5;  // perturb rows ≥ 4
  const Tensor y2 = sequence_mix(p.layers[0].mixer, Tensor({7, 16}, hv), c.mixer_order);
  const auto a = to_vec(y), b = to_vec(y2);
  for (std::size_t j = 0; j < 16 * 4; ++j) EXPECT_EQ(a[j], b[j]);
  bool changed = false;
  for (std::size_t j = 16 * 4; j < a.size(); ++j) changed |= a[j] != b[j];
  EXPECT_TRUE(changed);
}

TEST(Layer, DenseLimitMatchesExplicitWeightedSum) {
  ModelConfig c = tiny_config();
  c.top_k = c.num_experts;
  c.capacity_factor = kUnlimitedCapacity;
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    c.seed = 100 + trial;
    const auto p = init_model(c);
    const auto& layer = p.layers[0];
    const std::size_t S = 3 + trial % 6;
    const Tensor h = random_rows(S, 8, rng);
    const auto out = layer_forward(layer, h, c);

    // y = h₁ + Σ_i p_i(t)·E_i(u)(t), every expert over the full sequence.
    const Tensor h1 = sequence_mix(layer.mixer, h, c.mixer_order);
    const Tensor u = rms_norm(h1, layer.expert_norm, 1e-6);
    const auto probs = to_vec(route_sequence(layer.router, u, c.top_k).probs);
    auto expected = to_vec(h1);
    for (std::size_t e = 0; e < c.num_experts; ++e) {
      const auto ye = to_vec(expert_forward(layer.experts[e], u));
      for (std::size_t t = 0; t < S; ++t)
        for (std::size_t j = 0; j < 8; ++j) expected[t * 8 + j] += probs[t * c.num_experts + e] * ye[t * 8 + j];
    }
    const auto got = to_vec(out.hidden);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);
    EXPECT_TRUE(out.plan.dropped.empty());
  }
}

TEST(Layer, ZeroExpertOutputsLeaveMixerOutput) {
  for (auto kind : {ExpertKind::mixed, ExpertKind::ffn}) {
    ModelConfig c = tiny_config();
    c.expert_kind = kind;
    auto p = init_model(c);
    zero_expert_outputs(p);
    std::mt19937_64 rng(6);
    const Tensor h = random_rows(5, 8, rng);
    const auto out = layer_forward(p.layers[0], h, c);
    EXPECT_EQ(to_vec(out.hidden), to_vec(out.mixed));
  }
}

TEST(Layer, ExpertEvaluationsAreKPerTokenMinusDrops) {
  ModelConfig c = tiny_config();
  c.capacity_factor = 0.5;
  const auto p = init_model(c);
  std::mt19937_64 rng(8);
  const Tensor h = random_rows(12, 8, rng);
  const auto out = layer_forward(p.layers[0], h, c);
  EXPECT_EQ(out.plan.served(), c.top_k * 12 - out.plan.dropped.size());
  for (const auto& t : out.plan.tokens) EXPECT_LE(t.size(), expert_capacity(c, 12));
}

// ---- model -----------------------------------------------------------------------------------

TEST(Model, ForwardShapeAndInitialLoss) {
  ModelConfig c = tiny_config();
  c.vocab_size = 64;
  const auto p = init_model(c);
  std::mt19937_64 rng(9);
  const auto in = random_tokens(32, 64, rng), tg = random_tokens(32, 64, rng);
  const auto out = model_forward(p, c, in);
  ASSERT_EQ(out.logits.shape(), (Shape{32, 64}));
  for (double x : out.logits.values()) ASSERT_TRUE(std::isfinite(x));
  const std::vector<std::vector<int>> ins{in}, tgs{tg};
  const double ce = batch_forward(p, c, ins, tgs).task_ce.item();
  EXPECT_NEAR(ce, std::log(64.0), 0.1 * std::log(64.0));
}

TEST(Model, RejectsBadTokens) {
  const auto c = tiny_config();
  const auto p = init_model(c);
  EXPECT_THROW(model_forward(p, c, std::vector<int>{}), InputError);
  EXPECT_THROW(model_forward(p, c, std::vector<int>{1, 16}), InputError);
  EXPECT_THROW(model_forward(p, c, std::vector<int>{-1}), InputError);
}

TEST(Model, DeterministicGivenSeed) {
  const auto c = tiny_config(21);
  const std::vector<int> in{3, 1, 4, 1, 5, 9, 2, 6};
  EXPECT_EQ(to_vec(model_forward(init_model(c), c, in).logits), to_vec(model_forward(init_model(c), c, in).logits));
  const auto other = tiny_config(22);
  EXPECT_NE(to_vec(model_forward(init_model(other), other, in).logits),
            to_vec(model_forward(init_model(c), c, in).logits));
}

TEST(Model, BatchOutputsAreConsistent) {
  const auto c = tiny_config();
  const auto p = init_model(c);
  const std::vector<std::vector<int>> in{{1, 2, 3, 4, 5}, {6, 7, 8, 9, 10}}, tg{{2, 3, 4, 5, 6}, {7, 8, 9, 10, 11}};
  const auto out = batch_forward(p, c, in, tg);
  EXPECT_EQ(out.tokens, 10u);
  ASSERT_EQ(out.layers.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(out.layers[l].tokens(), 10u);
    EXPECT_EQ(out.layers[l].batch, 2u);
    std::size_t served = 0;
    for (auto n : out.dispatched[l]) served += n;
    EXPECT_LE(served, c.top_k * 10);
    double f = 0.0;
    for (double x : out.layers[l].dispatch_fraction) f += x;
    EXPECT_NEAR(f, static_cast<double>(served) / (c.top_k * 10.0), 1e-15);
  }
  const std::vector<std::vector<int>> short_tg{{1}};
  EXPECT_THROW(batch_forward(p, c, std::span(in).first(1), short_tg), DimensionError);
}

TEST(Model, TotalLossGradientCheck) {
  // The entropy target is a constant, so the reference holds it at its
  // unperturbed value.
  for (std::uint64_t seed : {1u, 2u}) {
    ModelConfig c = tiny_config(seed);
    c.lambdas = {0.5, 0.5, 0.1, 0.3};
    const auto base = init_model(c);
    const std::vector<std::vector<int>> in{{1, 5, 3, 9}}, tg{{5, 3, 9, 2}};
    std::vector<std::vector<double>> entropy;
    for (const auto& l : batch_forward(base, c, in, tg).layers) entropy.push_back(l.entropy);

    std::vector<Tensor> params;
    for_each_parameter(base, [&](const std::string&, const Tensor& t) { params.push_back(t.clone()); });
    auto f = [&](std::span<const Tensor> q) {
      ModelParams local = base;
      std::size_t i = 0;
      for_each_parameter(local, [&](const std::string&, Tensor& t) { t = q[i++]; });
      auto out = batch_forward(local, c, in, tg);
      for (std::size_t l = 0; l < out.layers.size(); ++l) out.layers[l].entropy = entropy[l];
      return batch_loss(out, c).total;
    };
    const auto r = finite_diff_check(f, params);
    EXPECT_LE(r.max_tensor_rel_error, 1e-5) << "seed " << seed;
  }
}

TEST(Model, ParameterNamesAreUniqueAndCountMatchesReport) {
  for (auto kind : {ExpertKind::mixed, ExpertKind::mlstm_only, ExpertKind::slstm_only, ExpertKind::ffn}) {
    ModelConfig c = tiny_config();
    c.expert_kind = kind;
    const auto p = init_model(c);
    std::set<std::string> names;
    std::size_t visits = 0;
    for_each_parameter(p, [&](const std::string& n, const Tensor&) {
      names.insert(n);
      ++visits;
    });
    EXPECT_EQ(names.size(), visits);
    EXPECT_EQ(parameter_count(p), active_param_and_flop_report(c).total_params) << to_string(kind);
  }
}

TEST(Model, ExpertComputeRatio) {
  for (auto [e, k] : {std::pair<std::size_t, std::size_t>{4, 1}, {4, 2}, {8, 2}, {4, 4}}) {
    ModelConfig c = tiny_config();
    c.num_experts = e;
    c.top_k = k;
    const auto r = active_param_and_flop_report(c);
    EXPECT_NEAR(r.expert_compute_ratio, static_cast<double>(k) / static_cast<double>(e), 1e-15);
    EXPECT_LT(r.active_params, r.total_params + (k == e ? 1u : 0u));
  }
  ModelConfig a = tiny_config(), b = tiny_config();
  b.num_experts = 8;
  EXPECT_EQ(active_param_and_flop_report(a).expert_macs_per_token,
            active_param_and_flop_report(b).expert_macs_per_token);
}

// ---- incremental decoding ------------------------------------------------------------------

TEST(Decoder, MatchesFullForwardWithoutCapacity) {
  ModelConfig c = tiny_config(3);
  c.capacity_factor = kUnlimitedCapacity;
  const auto p = init_model(c);
  std::mt19937_64 rng(12);
  const auto in = random_tokens(20, 16, rng);
  const auto full = to_vec(model_forward(p, c, in).logits);
  IncrementalDecoder dec(p, c);
  for (std::size_t t = 0; t < in.size(); ++t) {
    const auto step = to_vec(dec.step(in[t]));
    for (std::size_t v = 0; v < 16; ++v) EXPECT_NEAR(step[v], full[t * 16 + v], 1e-10);
  }
  EXPECT_EQ(dec.position(), 20u);
  EXPECT_EQ(dec.expert_evaluations(), c.top_k * c.num_layers * 20);  // summed over layers
}

TEST(Decoder, MatchesFullForwardWithPlannedCapacity) {
  ModelConfig c = tiny_config(4);
  c.capacity_factor = 0.75;
  const auto p = init_model(c);
  std::mt19937_64 rng(13);
  const auto in = random_tokens(16, 16, rng);
  const auto fwd = model_forward(p, c, in);
  const auto full = to_vec(fwd.logits);
  std::size_t served = 0;
  for (const auto& l : fwd.layers) served += l.plan.served();
  IncrementalDecoder dec(p, c, in.size());
  for (std::size_t t = 0; t < in.size(); ++t) {
    const auto step = to_vec(dec.step(in[t]));
    for (std::size_t v = 0; v < 16; ++v) EXPECT_NEAR(step[v], full[t * 16 + v], 1e-10);
  }
  EXPECT_EQ(dec.expert_evaluations(), served);
}

TEST(Decoder, StateSizeIsConstant) {
  const auto c = tiny_config();
  const auto p = init_model(c);
  IncrementalDecoder dec(p, c);
  const std::size_t initial = dec.state_size();
  EXPECT_GT(initial, 0u);
  for (int t = 0; t < 50; ++t) {
    dec.step(t % 16);
    EXPECT_EQ(dec.state_size(), initial);
  }
  EXPECT_THROW(dec.step(16), InputError);
}
