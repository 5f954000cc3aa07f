#include "moxe/losses.hpp"

#include <cmath>
#include <string>

#include "moxe/errors.hpp"

namespace moxe {

namespace {

Tensor group_indicator(std::span<const ExpertGroup> groups, ExpertGroup which) {
  std::vector<double> v(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) v[i] = groups[i] == which ? 1.0 : 0.0;
  return Tensor::vector(std::move(v));
}

double effective_scale(double scale, std::size_t experts) {
  return scale > 0.0 ? scale : static_cast<double>(experts);
}

Tensor average(const std::vector<Tensor>& terms) {
  Tensor acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, 1.0 / static_cast<double>(terms.size()));
}

void require_finite_term(const Tensor& t, const char* name) {
  if (!std::isfinite(t.item())) throw NumericError(std::string("non-finite loss term: ") + name);
}

}  // namespace

std::vector<double> RoutingStats::mean_probs() const {
  const std::size_t n = tokens(), e = num_experts();
  std::vector<double> m(e, 0.0);
  const auto pv = probs.values();
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < e; ++i) m[i] += pv[t * e + i];
  for (auto& x : m) x /= static_cast<double>(n);
  return m;
}

GroupMass RoutingStats::mean_group_mass() const { return group_mass(mean_probs(), groups); }

std::vector<double> dispatch_fractions(std::span<const std::size_t> dispatched, std::size_t k, std::size_t tokens) {
  std::vector<double> f(dispatched.size());
  const double slots = static_cast<double>(k * tokens);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<double>(dispatched[i]) / slots;
  return f;
}

RoutingStats make_routing_stats(std::span<const RouterBatch> sequences, std::span<const std::size_t> dispatched,
                                std::span<const ExpertGroup> groups) {
  if (sequences.empty()) throw ContractError("make_routing_stats: no sequences");
  if (dispatched.size() != groups.size()) throw DimensionError("make_routing_stats: one count per expert required");
  RoutingStats s;
  s.groups.assign(groups.begin(), groups.end());
  s.batch = sequences.size();
  s.seq_len = sequences.front().tokens();
  std::vector<Tensor> probs, raw, diff;
  for (const auto& b : sequences) {
    probs.push_back(b.probs);
    raw.push_back(b.raw_logits);
    diff.push_back(reshape(b.difficulty, {b.tokens(), 1}));
    s.entropy.insert(s.entropy.end(), b.entropy.begin(), b.entropy.end());
  }
  if (sequences.size() == 1) {
    s.probs = probs[0];
    s.raw_logits = raw[0];
    s.difficulty = sequences[0].difficulty;
  } else {
    s.probs = concat_rows(probs);
    s.raw_logits = concat_rows(raw);
    s.difficulty = reshape(concat_rows(diff), {s.entropy.size()});
  }
  s.dispatch_fraction = dispatch_fractions(dispatched, sequences.front().k, s.entropy.size());
  return s;
}

Tensor difficulty_loss(const RoutingStats& stats) {
  const Tensor target = Tensor::vector(stats.entropy);
  return mean(square(sub(stats.difficulty, target)));
}

double group_loss_value(double p_m, double p_s) {
  auto term = [](double x) { return x > 0.0 ? x * std::log(2.0 * x) : 0.0; };
  return term(p_m) + term(p_s);
}

Tensor group_loss(const RoutingStats& stats) {
  const Tensor p = mean(stats.probs, 0);
  const Tensor pm = dot(p, group_indicator(stats.groups, ExpertGroup::mlstm));
  const Tensor ps = dot(p, group_indicator(stats.groups, ExpertGroup::slstm));
  return add(xlogax(pm, 2.0), xlogax(ps, 2.0));
}

Tensor z_loss(const RoutingStats& stats) { return mean(square(logsumexp_rows(stats.raw_logits))); }

double load_balance_value(std::span<const double> p, std::span<const double> f, double scale) {
  if (p.size() != f.size()) throw DimensionError("load_balance: p and f differ in length");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * f[i];
  return effective_scale(scale, p.size()) * s;
}

Tensor load_balance_loss(const RoutingStats& stats, double scale_factor) {
  const Tensor p = mean(stats.probs, 0);
  return scale(dot(p, Tensor::vector(stats.dispatch_fraction)), effective_scale(scale_factor, stats.num_experts()));
}

LossBundle total_loss(const Tensor& task_ce, std::span<const RoutingStats> layers, const LossWeights& lambdas,
                      const AuxOptions& options) {
  LossBundle b;
  b.task_ce = task_ce;
  b.lambdas = lambdas;
  if (!options.group_enabled) b.lambdas.group = 0.0;
  require_finite_term(task_ce, "task_ce");

  if (layers.empty()) {
    b.difficulty = b.group = b.z = b.aux = Tensor::scalar(0.0);
    b.total = task_ce;
    return b;
  }
  std::vector<Tensor> ld, lg, lz, la;
  for (const auto& s : layers) {
    ld.push_back(difficulty_loss(s));
    lg.push_back(group_loss(s));
    lz.push_back(z_loss(s));
    la.push_back(load_balance_loss(s, options.aux_scale));
    b.layer_difficulty.push_back(ld.back().item());
    b.layer_group.push_back(lg.back().item());
    b.layer_z.push_back(lz.back().item());
    b.layer_aux.push_back(la.back().item());
  }
  b.difficulty = average(ld);
  b.group = average(lg);
  b.z = average(lz);
  b.aux = average(la);
  require_finite_term(b.difficulty, "l_d");
  require_finite_term(b.group, "l_group");
  require_finite_term(b.z, "l_z");
  require_finite_term(b.aux, "l_aux");

  Tensor total = task_ce;
  const std::pair<double, const Tensor*> terms[] = {
      {b.lambdas.difficulty, &b.difficulty}, {b.lambdas.group, &b.group}, {b.lambdas.z, &b.z}, {b.lambdas.aux, &b.aux}};
  for (const auto& [lambda, term] : terms) {
    if (lambda != 0.0) total = add(total, scale(*term, lambda));
  }
  b.total = total;
  require_finite_term(b.total, "total");
  return b;
}

}  // namespace moxe
