#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "moxe/router.hpp"
#include "moxe/tensor.hpp"

namespace moxe {

// Routing record of one layer over all N = B·S tokens of a batch.
struct RoutingStats {
  Tensor probs;                // [N×E], p (biased)
  Tensor raw_logits;           // [N×E], z̃
  Tensor difficulty;           // [N]
  std::vector<double> entropy; // [N], H̃ from p̃
  std::vector<double> dispatch_fraction;  // [E], f_i
  std::vector<ExpertGroup> groups;
  std::size_t batch = 1;
  std::size_t seq_len = 0;

  std::size_t tokens() const { return entropy.size(); }
  std::size_t num_experts() const { return groups.size(); }
  std::vector<double> mean_probs() const;  // p_i, values only
  GroupMass mean_group_mass() const;       // batch-mean (p_m, p_s)
};

// Per-sequence router outputs are stacked in order; dispatched[i] counts the
// token slots served by expert i, so f_i = dispatched[i] / (k·N).
RoutingStats make_routing_stats(std::span<const RouterBatch> sequences, std::span<const std::size_t> dispatched,
                                std::span<const ExpertGroup> groups);
std::vector<double> dispatch_fractions(std::span<const std::size_t> dispatched, std::size_t k, std::size_t tokens);

// mean (d − H̃)², with H̃ a constant target.
Tensor difficulty_loss(const RoutingStats& stats);
// p_m log 2p_m + p_s log 2p_s on the batch-mean group masses.
Tensor group_loss(const RoutingStats& stats);
double group_loss_value(double p_m, double p_s);
// mean over tokens of (logsumexp z̃)².
Tensor z_loss(const RoutingStats& stats);
// scale · Σ f_i p_i; scale ≤ 0 means E.
Tensor load_balance_loss(const RoutingStats& stats, double scale = 0.0);
double load_balance_value(std::span<const double> p, std::span<const double> f, double scale = 0.0);

struct LossWeights {
  double difficulty = 0.01;
  double group = 0.01;
  double z = 0.001;
  double aux = 0.01;
};

struct LossBundle {
  Tensor task_ce;
  Tensor difficulty, group, z, aux;  // averaged over layers
  Tensor total;
  LossWeights lambdas;
  std::vector<double> layer_difficulty, layer_group, layer_z, layer_aux;
};

struct AuxOptions {
  double aux_scale = 0.0;  // E_s; ≤ 0 means E
  bool group_enabled = true;
};

// total = ce + Σ λ·term. A disabled group loss is still reported but carries
// no weight. Throws NumericError naming the first non-finite term.
LossBundle total_loss(const Tensor& task_ce, std::span<const RoutingStats> layers, const LossWeights& lambdas,
                      const AuxOptions& options = {});

}  // namespace moxe
