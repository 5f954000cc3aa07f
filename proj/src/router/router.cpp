#include "moxe/router.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "moxe/errors.hpp"

namespace moxe {

namespace {

void check_groups(std::span<const ExpertGroup> groups, std::size_t experts) {
  if (groups.size() != experts) {
    throw DimensionError("router: group map has " + std::to_string(groups.size()) + " entries for " +
                         std::to_string(experts) + " experts");
  }
}

double log_sum_exp(std::span<const double> z, std::span<const ExpertGroup> groups, ExpertGroup which) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < z.size(); ++i)
    if (groups[i] == which) mx = std::max(mx, z[i]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i)
    if (groups[i] == which) s += std::exp(z[i] - mx);
  return mx + std::log(s);
}

}  // namespace

std::vector<ExpertGroup> half_split_groups(std::size_t num_experts) {
  std::vector<ExpertGroup> g(num_experts, ExpertGroup::slstm);
  std::fill(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(num_experts / 2), ExpertGroup::mlstm);
  return g;
}

RouterParams init_router(std::size_t dim, std::size_t num_experts, double gamma, std::mt19937_64& rng) {
  if (gamma < 0.0) throw ConfigError("router: gamma must be non-negative");
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> w(dim * num_experts), wd(dim);
  for (auto& x : w) x = u(rng);
  for (auto& x : wd) x = u(rng);
  RouterParams p;
  p.gate_weight = Tensor({dim, num_experts}, std::move(w));
  p.gate_bias = Tensor::zeros({num_experts});
  p.difficulty_weight = Tensor::vector(std::move(wd));
  p.difficulty_bias = Tensor::zeros({1});
  p.gamma = gamma;
  p.groups = half_split_groups(num_experts);
  return p;
}

Tensor difficulty_score(const RouterParams& params, const Tensor& h) {
  if (h.rank() == 1) return difficulty_score(params, reshape(h, {1, h.dim(0)}));
  return sigmoid(add(matvec(h, params.difficulty_weight), params.difficulty_bias));
}

Tensor modulation_bias(const Tensor& difficulty, const Tensor& gamma, std::span<const ExpertGroup> groups) {
  if (gamma.numel() != 1) throw DimensionError("modulation_bias: gamma must be a single value");
  std::vector<double> signs(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) signs[i] = groups[i] == ExpertGroup::mlstm ? 1.0 : -1.0;
  const Tensor row_signs = reshape(mul(Tensor::vector(std::move(signs)), gamma), {1, groups.size()});
  return matmul(reshape(difficulty, {difficulty.numel(), 1}), row_signs);
}

Tensor modulation_bias(const Tensor& difficulty, double gamma, std::span<const ExpertGroup> groups) {
  return modulation_bias(difficulty, Tensor::scalar(gamma), groups);
}

std::vector<std::size_t> top_k_indices(std::span<const double> p, std::size_t k) {
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
  idx.resize(k);
  return idx;
}

double normalized_entropy(std::span<const double> p) {
  if (p.size() < 2) throw ContractError("normalized_entropy: needs at least two experts");
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h / std::log(static_cast<double>(p.size()));
}

RouterBatch route_logits(const Tensor& raw_logits, const Tensor& difficulty, const Tensor& gamma,
                         std::span<const ExpertGroup> groups, std::size_t k, bool renormalize) {
  const Tensor raw = raw_logits.rank() == 1 ? reshape(raw_logits, {1, raw_logits.numel()}) : raw_logits;
  if (raw.rank() != 2) throw DimensionError("route_logits: raw logits must be [S×E]");
  const std::size_t tokens = raw.dim(0), experts = raw.dim(1);
  check_groups(groups, experts);
  if (difficulty.numel() != tokens) throw DimensionError("route_logits: one difficulty per token required");
  if (k < 1 || k > experts) {
    throw ContractError("route: k=" + std::to_string(k) + " outside [1, " + std::to_string(experts) + "]");
  }
  if (experts < 2) throw ContractError("route: at least two experts are required");

  RouterBatch b;
  b.k = k;
  b.raw_logits = raw;
  b.difficulty = reshape(difficulty, {tokens});
  b.bias = modulation_bias(b.difficulty, gamma, groups);
  b.logits = add(raw, b.bias);
  b.probs = softmax(b.logits, 1);
  b.unbiased_probs = softmax(raw, 1);

  const auto pv = b.probs.values();
  const auto uv = b.unbiased_probs.values();
  b.entropy.resize(tokens);
  b.topk.resize(tokens * k);
  std::vector<unsigned char> mask(tokens * experts, 0);
  for (std::size_t t = 0; t < tokens; ++t) {
    b.entropy[t] = normalized_entropy(uv.subspan(t * experts, experts));
    const auto sel = top_k_indices(pv.subspan(t * experts, experts), k);
    for (std::size_t j = 0; j < k; ++j) {
      b.topk[t * k + j] = sel[j];
      mask[t * experts + sel[j]] = 1;
    }
  }
  b.gate_weights = masked_weights(b.probs, mask, renormalize);
  return b;
}

RouterBatch route_sequence(const RouterParams& params, const Tensor& h, std::size_t k, bool renormalize) {
  if (h.rank() != 2) throw DimensionError("route_sequence: expected [S×d] hidden states");
  const Tensor raw = add(matmul(h, params.gate_weight), params.gate_bias);
  return route_logits(raw, difficulty_score(params, h), Tensor::scalar(params.gamma), params.groups, k, renormalize);
}

RouterDecision decision_at(const RouterBatch& batch, std::size_t t, double gamma, std::span<const ExpertGroup> groups) {
  RouterDecision d;
  d.raw_logits = row(batch.raw_logits, t);
  d.bias = row(batch.bias, t);
  d.adjusted_logits = row(batch.logits, t);
  d.probs = row(batch.probs, t);
  d.unbiased_probs = row(batch.unbiased_probs, t);
  d.difficulty = slice(batch.difficulty, t, 1);
  d.normalized_entropy = batch.entropy[t];
  for (std::size_t e : batch.selected(t)) d.topk.push_back({e, batch.gate_weights.at(t, e)});
  d.gamma = gamma;
  d.groups.assign(groups.begin(), groups.end());
  return d;
}

RouterDecision route(const RouterParams& params, const Tensor& h, std::size_t k, bool renormalize) {
  if (h.rank() != 1) throw DimensionError("route: expected a single hidden vector");
  for (double v : h.values())
    if (!std::isfinite(v)) throw NumericError("route: non-finite hidden state");
  return decision_at(route_sequence(params, reshape(h, {1, h.dim(0)}), k, renormalize), 0, params.gamma,
                     params.groups);
}

GroupMass group_mass(std::span<const double> p, std::span<const ExpertGroup> groups) {
  check_groups(groups, p.size());
  GroupMass m;
  for (std::size_t i = 0; i < p.size(); ++i) (groups[i] == ExpertGroup::mlstm ? m.mlstm : m.slstm) += p[i];
  return m;
}

RatioCheck routing_ratio(std::span<const double> raw_logits, double difficulty, double gamma,
                         std::span<const ExpertGroup> groups) {
  check_groups(groups, raw_logits.size());
  std::vector<double> z(raw_logits.begin(), raw_logits.end());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += groups[i] == ExpertGroup::mlstm ? gamma * difficulty : -gamma * difficulty;
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - mx);
  for (auto& x : p) x /= s;
  const GroupMass m = group_mass(p, groups);
  if (!(m.slstm > 0.0)) throw DegenerateRoutingError("routing_ratio: sLSTM group has zero probability mass");
  RatioCheck r;
  r.exact = m.mlstm / m.slstm;
  r.predicted = std::exp(2.0 * gamma * difficulty);
  r.correction = std::exp(log_sum_exp(raw_logits, groups, ExpertGroup::mlstm) -
                          log_sum_exp(raw_logits, groups, ExpertGroup::slstm));
  return r;
}

RatioCheck routing_ratio(const RouterDecision& decision) {
  const auto raw = decision.raw_logits.values();
  const GroupMass m = group_mass(decision.probs.values(), decision.groups);
  if (!(m.slstm > 0.0)) throw DegenerateRoutingError("routing_ratio: sLSTM group has zero probability mass");
  RatioCheck r;
  r.exact = m.mlstm / m.slstm;
  r.predicted = std::exp(2.0 * decision.gamma * decision.difficulty.item());
  r.correction = std::exp(log_sum_exp(raw, decision.groups, ExpertGroup::mlstm) -
                          log_sum_exp(raw, decision.groups, ExpertGroup::slstm));
  return r;
}

}  // namespace moxe
