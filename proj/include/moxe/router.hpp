#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "moxe/tensor.hpp"

namespace moxe {

enum class ExpertGroup : std::uint8_t { mlstm, slstm };

// First half of the experts is the mLSTM group, second half the sLSTM group.
std::vector<ExpertGroup> half_split_groups(std::size_t num_experts);

struct RouterParams {
  Tensor gate_weight;        // [d × E]
  Tensor gate_bias;          // [E]
  Tensor difficulty_weight;  // [d]
  Tensor difficulty_bias;    // [1]
  double gamma = 1.0;
  std::vector<ExpertGroup> groups;

  std::size_t num_experts() const { return groups.size(); }

  template <class F>
  void for_each_tensor(F&& f) {
    f("gate_weight", gate_weight);
    f("gate_bias", gate_bias);
    f("difficulty_weight", difficulty_weight);
    f("difficulty_bias", difficulty_bias);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    f("gate_weight", gate_weight);
    f("gate_bias", gate_bias);
    f("difficulty_weight", difficulty_weight);
    f("difficulty_bias", difficulty_bias);
  }
};

// Gate weights ~ U(±1/√d), difficulty head likewise, biases 0.
RouterParams init_router(std::size_t dim, std::size_t num_experts, double gamma, std::mt19937_64& rng);

// Routing of S tokens. Row t of every [S×E] tensor belongs to token t.
struct RouterBatch {
  Tensor raw_logits;      // z̃
  Tensor difficulty;      // [S], d in [0, 1]
  Tensor bias;            // δ = ±γd
  Tensor logits;          // z = z̃ + δ
  Tensor probs;           // p = softmax(z)
  Tensor unbiased_probs;  // p̃ = softmax(z̃)
  Tensor gate_weights;    // p on the selected experts, 0 elsewhere
  std::vector<double> entropy;     // H̃ per token, from p̃ (values only)
  std::vector<std::size_t> topk;   // [S×k] expert ids, descending p, ties to the lower id
  std::size_t k = 0;

  std::size_t tokens() const { return difficulty.numel(); }
  std::size_t num_experts() const { return raw_logits.dim(1); }
  std::span<const std::size_t> selected(std::size_t t) const { return {topk.data() + t * k, k}; }
};

struct TopKEntry {
  std::size_t expert;
  double weight;
};

// Single-token view. Tensors are rows of a RouterBatch and stay on its tape.
struct RouterDecision {
  Tensor raw_logits, bias, adjusted_logits, probs, unbiased_probs;  // [E]
  Tensor difficulty;                                               // [1]
  double normalized_entropy = 0.0;
  std::vector<TopKEntry> topk;
  double gamma = 0.0;
  std::vector<ExpertGroup> groups;
};

Tensor difficulty_score(const RouterParams& params, const Tensor& h);  // h [d] -> [1], or [S×d] -> [S]

// δ for each token: d [S] (or [1]) times +γ / −γ by group; gamma is [1].
Tensor modulation_bias(const Tensor& difficulty, const Tensor& gamma, std::span<const ExpertGroup> groups);
Tensor modulation_bias(const Tensor& difficulty, double gamma, std::span<const ExpertGroup> groups);

// Everything downstream of the raw logits and difficulty.
RouterBatch route_logits(const Tensor& raw_logits, const Tensor& difficulty, const Tensor& gamma,
                         std::span<const ExpertGroup> groups, std::size_t k, bool renormalize = false);

RouterBatch route_sequence(const RouterParams& params, const Tensor& h, std::size_t k, bool renormalize = false);
RouterDecision route(const RouterParams& params, const Tensor& h, std::size_t k, bool renormalize = false);
RouterDecision decision_at(const RouterBatch& batch, std::size_t t, double gamma, std::span<const ExpertGroup> groups);

// Indices of the k largest entries, descending, ties to the lower index.
std::vector<std::size_t> top_k_indices(std::span<const double> p, std::size_t k);

// −Σ p log p / log E with 0·log 0 = 0.
double normalized_entropy(std::span<const double> p);

struct GroupMass {
  double mlstm = 0.0;
  double slstm = 0.0;
};
GroupMass group_mass(std::span<const double> p, std::span<const ExpertGroup> groups);

struct RatioCheck {
  double exact;      // p_m / p_s
  double predicted;  // exp(2γd)
  double correction; // Σ_m exp(z̃) / Σ_s exp(z̃)
};
RatioCheck routing_ratio(const RouterDecision& decision);
RatioCheck routing_ratio(std::span<const double> raw_logits, double difficulty, double gamma,
                         std::span<const ExpertGroup> groups);

}  // namespace moxe
