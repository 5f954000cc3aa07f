#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moxe/cells.hpp"
#include "moxe/losses.hpp"
#include "moxe/router.hpp"
#include "moxe/tensor.hpp"

namespace moxe {

enum class ExpertKind { mixed, mlstm_only, slstm_only, ffn };
enum class MixerOrder { slstm_first, mlstm_first };

std::string_view to_string(ExpertKind k);
std::string_view to_string(MixerOrder o);
ExpertKind parse_expert_kind(std::string_view text);
MixerOrder parse_mixer_order(std::string_view text);

inline constexpr double kUnlimitedCapacity = std::numeric_limits<double>::infinity();

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_experts = 4;
  std::size_t top_k = 2;
  std::size_t num_heads = 2;
  double gamma = 1.0;
  LossWeights lambdas;
  double capacity_factor = 1.25;  // kUnlimitedCapacity disables dropping
  ExpertKind expert_kind = ExpertKind::mixed;
  bool group_loss_enabled = true;
  bool renormalize_topk = false;
  double aux_scale = 0.0;  // E_s; ≤ 0 means E
  MixerOrder mixer_order = MixerOrder::slstm_first;
  ForgetGate forget_gate = ForgetGate::sigmoid;
  std::uint64_t seed = 0;

  bool unlimited_capacity() const { return capacity_factor == kUnlimitedCapacity; }
  AuxOptions aux_options() const { return {aux_scale, group_loss_enabled}; }

  // Throws ConfigError on the first violated constraint.
  void validate() const;
  // Sets one field from its text form; false if the key is not a model key.
  bool set(std::string_view key, std::string_view value);
  // key=value lines, in a fixed order, readable by set().
  std::string to_text() const;
  static const std::vector<std::string>& keys();
};

// Capacity of one expert for T tokens: ceil(C·T/E), or T when unlimited.
std::size_t expert_capacity(const ModelConfig& config, std::size_t tokens);

// ---- parameters -----------------------------------------------------------------

struct MixerParams {
  Tensor slstm_norm, mlstm_norm;  // RMS gains [d]
  SLstmParams slstm;
  Tensor slstm_out;  // [d×d]
  MLstmParams mlstm;
  Tensor mlstm_out;  // [d×d]
};

enum class CellKind { mlstm, slstm, ffn };

struct ExpertParams {
  CellKind kind = CellKind::ffn;
  SLstmParams slstm;
  MLstmParams mlstm;
  FfnParams ffn;
  Tensor out;  // [d×d] output projection of recurrent experts
};

struct LayerParams {
  MixerParams mixer;
  Tensor expert_norm;  // [d]
  RouterParams router;
  std::vector<ExpertParams> experts;
};

struct ModelParams {
  Tensor embedding;  // [V×d]
  std::vector<LayerParams> layers;
  Tensor final_norm;  // [d]
  Tensor head;        // [d×V]
  Tensor head_bias;   // [V]
};

// Visits every trainable tensor with a stable dotted name, in a fixed order.
void for_each_parameter(ModelParams& params, const std::function<void(const std::string&, Tensor&)>& f);
void for_each_parameter(const ModelParams& params, const std::function<void(const std::string&, const Tensor&)>& f);
std::size_t parameter_count(const ModelParams& params);

std::vector<CellKind> expert_kinds(const ModelConfig& config);
ModelParams init_model(const ModelConfig& config);

// ---- forward ----------------------------------------------------------------------

struct DispatchPlan {
  std::size_t capacity = 0;
  std::vector<std::vector<std::size_t>> tokens;  // per expert, increasing positions
  std::vector<std::vector<double>> weights;      // gate weight of each entry in `tokens`
  std::vector<std::pair<std::size_t, std::size_t>> dropped;  // (token, expert)

  std::size_t served() const;
  std::vector<std::size_t> counts() const;
};

// Greedy in token order over each token's selections (highest weight first).
// `selected` is [T×k]; `gate_weights` is [T×E] values or empty.
DispatchPlan dispatch(std::span<const std::size_t> selected, std::size_t tokens, std::size_t num_experts,
                      std::size_t k, std::size_t capacity, std::span<const double> gate_weights = {});

Tensor sequence_mix(const MixerParams& mixer, const Tensor& h, MixerOrder order);
// Expert applied to a (sub-)sequence of normalized rows, from a zero state.
Tensor expert_forward(const ExpertParams& expert, const Tensor& rows);

struct LayerOutput {
  Tensor hidden;  // [S×d]
  Tensor mixed;   // h₁, the mixer output
  RouterBatch routing;
  DispatchPlan plan;
};

LayerOutput layer_forward(const LayerParams& layer, const Tensor& h, const ModelConfig& config);

struct ModelOutput {
  Tensor logits;  // [S×V]
  std::vector<LayerOutput> layers;
};

ModelOutput model_forward(const ModelParams& params, const ModelConfig& config, std::span<const int> tokens);

struct BatchOutput {
  Tensor task_ce;                    // mean next-token CE over B·S targets
  std::vector<RoutingStats> layers;  // per layer, all sequences
  std::vector<std::vector<std::size_t>> dispatched;  // [layer][expert]
  std::vector<double> layer_group_gap;               // |p_m − p_s| of the batch means
  std::size_t tokens = 0;
};

BatchOutput batch_forward(const ModelParams& params, const ModelConfig& config,
                          std::span<const std::vector<int>> inputs, std::span<const std::vector<int>> targets);

LossBundle batch_loss(const BatchOutput& out, const ModelConfig& config);

// ---- inference ------------------------------------------------------------------------

// Token-at-a-time decoding with carried recurrent states; matches
// model_forward on the same prefix. Capacity limits apply only when the
// full length is known up front (planned_length > 0).
class IncrementalDecoder {
 public:
  IncrementalDecoder(const ModelParams& params, const ModelConfig& config, std::size_t planned_length = 0);
  Tensor step(int token);  // logits [V]
  std::size_t position() const { return position_; }
  std::size_t state_size() const;
  std::size_t expert_evaluations() const { return expert_evaluations_; }

 private:
  struct LayerState {
    SLstmState mixer_s;
    MLstmState mixer_m;
    std::vector<SLstmState> expert_s;
    std::vector<MLstmState> expert_m;
    std::vector<std::size_t> served;
  };
  const ModelParams& params_;
  ModelConfig config_;
  std::vector<LayerState> layers_;
  std::size_t capacity_ = 0;
  std::size_t position_ = 0;
  std::size_t expert_evaluations_ = 0;
};

// ---- accounting -----------------------------------------------------------------------

struct CostReport {
  std::size_t total_params = 0;
  std::size_t expert_params = 0;         // all experts, all layers
  std::size_t active_params = 0;         // per token: everything but the unused experts
  double expert_macs_per_token = 0.0;    // k average-sized experts per layer
  std::size_t dense_expert_macs_per_token = 0;  // if all E experts ran
  double total_macs_per_token = 0.0;
  double expert_compute_ratio = 0.0;     // expert_macs / dense_expert_macs = k/E
};

CostReport active_param_and_flop_report(const ModelConfig& config);

}  // namespace moxe
