#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>

#include "moxe/tensor.hpp"

namespace moxe {

enum class ForgetGate { sigmoid, exponential };

// Scalar-memory cell with exponential input gate, log-domain stabilizer and
// block-diagonal (per-head) recurrent weights. There is no input-gate bias:
// from a zero state c/n is invariant to a constant shift of the input gate.
struct SLstmParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t num_heads = 1;
  ForgetGate forget_gate = ForgetGate::sigmoid;
  Tensor input_weight;  // [input × 4·hidden], gate blocks z | i | f | o
  Tensor bias;          // [3·hidden], blocks z | f | o
  Tensor recurrent;     // [4·heads × head_dim × head_dim]

  template <class F>
  void for_each_tensor(F&& f) {
    f("input_weight", input_weight);
    f("bias", bias);
    f("recurrent", recurrent);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    f("input_weight", input_weight);
    f("bias", bias);
    f("recurrent", recurrent);
  }
};

struct SLstmState {
  Tensor c, n, h, m;  // each [hidden]
  static SLstmState zeros(std::size_t hidden);
};

// Matrix-memory cell. Gates read the input only, never the previous output.
struct MLstmParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  ForgetGate forget_gate = ForgetGate::sigmoid;
  Tensor input_weight;  // [input × (4·hidden + 2)], blocks q | k | v | o | i | f
  Tensor bias;          // [4·hidden + 2]

  template <class F>
  void for_each_tensor(F&& f) {
    f("input_weight", input_weight);
    f("bias", bias);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    f("input_weight", input_weight);
    f("bias", bias);
  }
};

struct MLstmState {
  Tensor c;  // [hidden × hidden]
  Tensor n;  // [hidden]
  Tensor m;  // [1]
  static MLstmState zeros(std::size_t hidden);
};

// Two-layer stateless expert used by the FFN ablation.
struct FfnParams {
  Tensor w1, b1;  // [d × 4d], [4d]
  Tensor w2, b2;  // [4d × d], [d]

  template <class F>
  void for_each_tensor(F&& f) {
    f("w1", w1);
    f("b1", b1);
    f("w2", w2);
    f("b2", b2);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    f("w1", w1);
    f("b1", b1);
    f("w2", w2);
    f("b2", b2);
  }
};

inline constexpr std::size_t kFfnExpansion = 4;
inline constexpr double kSLstmNormalizerFloor = 1e-6;
inline constexpr double kSLstmForgetBias = 1.0;
inline constexpr double kMLstmForgetBias = 2.0;

// Weights ~ U(±1/√fan_in); forget-gate biases as above, all other biases 0.
SLstmParams init_slstm(std::size_t input_dim, std::size_t hidden_dim, std::size_t num_heads, ForgetGate forget,
                       std::mt19937_64& rng);
MLstmParams init_mlstm(std::size_t input_dim, std::size_t hidden_dim, ForgetGate forget, std::mt19937_64& rng);
FfnParams init_ffn(std::size_t dim, std::mt19937_64& rng);

struct SLstmStep {
  Tensor h;           // o ⊙ c/n
  Tensor normalized;  // c/n before the output gate
  SLstmState state;
};

struct MLstmStep {
  Tensor h;        // o ⊙ readout
  Tensor readout;  // C·q / max(|nᵀq|, e^{-m})
  MLstmState state;
};

SLstmStep slstm_step(const SLstmParams& params, const Tensor& x, const SLstmState& state);
// Same recurrence from an already projected input W·x + b ([4·hidden]).
SLstmStep slstm_step_projected(const SLstmParams& params, const Tensor& projected, const SLstmState& state,
                               std::size_t step_index = 0);

MLstmStep mlstm_step(const MLstmParams& params, const Tensor& x, const MLstmState& state);
MLstmStep mlstm_step_projected(const MLstmParams& params, const Tensor& projected, const MLstmState& state,
                               std::size_t step_index = 0);

// x: [d] or [rows×d]; SiLU between the layers.
Tensor ffn_forward(const FfnParams& params, const Tensor& x);

template <class State>
struct SequenceOutput {
  Tensor outputs;  // [S×hidden]
  State state;     // after the last step
};

// Left-to-right scan; the input projection is applied to all rows at once.
SequenceOutput<SLstmState> sequence_forward(const SLstmParams& params, const Tensor& xs, SLstmState initial);
SequenceOutput<MLstmState> sequence_forward(const MLstmParams& params, const Tensor& xs, MLstmState initial);

// Number of doubles carried between steps.
std::size_t state_size(const SLstmState& s);
std::size_t state_size(const MLstmState& s);

std::string_view to_string(ForgetGate g);
ForgetGate parse_forget_gate(std::string_view text);

}  // namespace moxe
