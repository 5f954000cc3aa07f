#include "moxe/cells.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "moxe/errors.hpp"

namespace moxe {

namespace {

Tensor uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor log_forget(const Tensor& pre, ForgetGate gate) {
  return gate == ForgetGate::exponential ? pre : log_sigmoid(pre);
}

void require_finite(const Tensor& t, const char* cell, std::size_t step) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(cell) + ": non-finite state at step " + std::to_string(step));
    }
  }
}

Tensor project_rows(const Tensor& xs, const Tensor& weight, const Tensor& bias) {
  return add(matmul(xs, weight), bias);
}

Tensor project_one(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 1 || x.dim(0) != weight.dim(0)) {
    throw DimensionError("cell input " + shape_to_string(x.shape()) + " does not match weight " +
                         shape_to_string(weight.shape()));
  }
  return reshape(project_rows(reshape(x, {1, x.dim(0)}), weight, bias), {weight.dim(1)});
}

// The sLSTM bias has no input-gate block; re-insert zeros to match the
// z | i | f | o projection layout.
Tensor slstm_bias(const SLstmParams& params) {
  const std::size_t h = params.hidden_dim;
  if (params.bias.numel() != 3 * h) throw DimensionError("slstm: bias must have 3·hidden entries");
  const Tensor blocks[] = {reshape(slice(params.bias, 0, h), {h, 1}), Tensor::zeros({h, 1}),
                           reshape(slice(params.bias, h, 2 * h), {2 * h, 1})};
  return reshape(concat_rows(blocks), {4 * h});
}

void check_state(const Tensor& t, std::size_t hidden, const char* what) {
  if (t.numel() != hidden) throw DimensionError(std::string(what) + " does not match the hidden size");
}

}  // namespace

SLstmState SLstmState::zeros(std::size_t hidden) {
  return {Tensor::zeros({hidden}), Tensor::zeros({hidden}), Tensor::zeros({hidden}), Tensor::zeros({hidden})};
}

MLstmState MLstmState::zeros(std::size_t hidden) {
  return {Tensor::zeros({hidden, hidden}), Tensor::zeros({hidden}), Tensor::zeros({1})};
}

SLstmParams init_slstm(std::size_t input_dim, std::size_t hidden_dim, std::size_t num_heads, ForgetGate forget,
                       std::mt19937_64& rng) {
  if (num_heads == 0 || hidden_dim % num_heads != 0) {
    throw ConfigError("sLSTM hidden size must be divisible by the head count");
  }
  const std::size_t hd = hidden_dim / num_heads;
  SLstmParams p;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  p.num_heads = num_heads;
  p.forget_gate = forget;
  p.input_weight = uniform_init({input_dim, 4 * hidden_dim}, input_dim, rng);
  p.recurrent = uniform_init({4 * num_heads, hd, hd}, hd, rng);
  std::vector<double> b(3 * hidden_dim, 0.0);
  for (std::size_t j = 0; j < hidden_dim; ++j) b[hidden_dim + j] = kSLstmForgetBias;
  p.bias = Tensor::vector(std::move(b));
  return p;
}

MLstmParams init_mlstm(std::size_t input_dim, std::size_t hidden_dim, ForgetGate forget, std::mt19937_64& rng) {
  MLstmParams p;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  p.forget_gate = forget;
  p.input_weight = uniform_init({input_dim, 4 * hidden_dim + 2}, input_dim, rng);
  std::vector<double> b(4 * hidden_dim + 2, 0.0);
  b.back() = kMLstmForgetBias;
  p.bias = Tensor::vector(std::move(b));
  return p;
}

FfnParams init_ffn(std::size_t dim, std::mt19937_64& rng) {
  const std::size_t inner = kFfnExpansion * dim;
  FfnParams p;
  p.w1 = uniform_init({dim, inner}, dim, rng);
  p.b1 = Tensor::zeros({inner});
  p.w2 = uniform_init({inner, dim}, inner, rng);
  p.b2 = Tensor::zeros({dim});
  return p;
}

// ---- sLSTM --------------------------------------------------------------------

SLstmStep slstm_step_projected(const SLstmParams& params, const Tensor& projected, const SLstmState& state,
                               std::size_t step_index) {
  const std::size_t h = params.hidden_dim;
  if (projected.numel() != 4 * h) throw DimensionError("slstm: projected input must have 4·hidden entries");
  check_state(state.c, h, "slstm state c");
  check_state(state.n, h, "slstm state n");
  check_state(state.h, h, "slstm state h");
  check_state(state.m, h, "slstm state m");

  const Tensor pre = add(projected, block_diag_matvec(params.recurrent, state.h, params.num_heads));
  const Tensor z = tanh(slice(pre, 0, h));
  const Tensor pre_i = slice(pre, h, h);
  const Tensor log_f = log_forget(slice(pre, 2 * h, h), params.forget_gate);
  const Tensor o = sigmoid(slice(pre, 3 * h, h));

  // m_t = max(log f + m_{t-1}, log i); both gates are rescaled by e^{-m_t}.
  const Tensor decayed = add(log_f, state.m);
  const Tensor m = maximum(decayed, pre_i);
  const Tensor i_gate = exp(sub(pre_i, m));
  const Tensor f_gate = exp(sub(decayed, m));

  SLstmStep out;
  out.state.c = add(mul(f_gate, state.c), mul(i_gate, z));
  out.state.n = add(mul(f_gate, state.n), i_gate);
  out.state.m = m;
  out.normalized = div(out.state.c, max_scalar(out.state.n, kSLstmNormalizerFloor));
  out.h = mul(o, out.normalized);
  out.state.h = out.h;
  require_finite(out.h, "slstm_step", step_index);
  require_finite(out.state.n, "slstm_step", step_index);
  return out;
}

SLstmStep slstm_step(const SLstmParams& params, const Tensor& x, const SLstmState& state) {
  return slstm_step_projected(params, project_one(x, params.input_weight, slstm_bias(params)), state);
}

// ---- mLSTM --------------------------------------------------------------------

MLstmStep mlstm_step_projected(const MLstmParams& params, const Tensor& projected, const MLstmState& state,
                               std::size_t step_index) {
  const std::size_t h = params.hidden_dim;
  if (projected.numel() != 4 * h + 2) throw DimensionError("mlstm: projected input must have 4·hidden+2 entries");
  check_state(state.c, h * h, "mlstm state C");
  check_state(state.n, h, "mlstm state n");
  check_state(state.m, 1, "mlstm state m");

  const Tensor q = slice(projected, 0, h);
  const Tensor k = scale(slice(projected, h, h), 1.0 / std::sqrt(static_cast<double>(h)));
  const Tensor v = slice(projected, 2 * h, h);
  const Tensor o = sigmoid(slice(projected, 3 * h, h));
  const Tensor pre_i = slice(projected, 4 * h, 1);
  const Tensor log_f = log_forget(slice(projected, 4 * h + 1, 1), params.forget_gate);

  const Tensor decayed = add(log_f, state.m);
  const Tensor m = maximum(decayed, pre_i);
  const Tensor i_gate = exp(sub(pre_i, m));
  const Tensor f_gate = exp(sub(decayed, m));

  MLstmStep out;
  out.state.c = rank1_update(state.c, f_gate, i_gate, v, k);
  out.state.n = add(mul(f_gate, state.n), mul(i_gate, k));
  out.state.m = m;
  // The stored C and n carry a factor e^{-m}; flooring at e^{-m} equals a
  // floor of 1 on the unscaled normalizer.
  const Tensor denom = maximum(abs(dot(out.state.n, q)), exp(neg(m)));
  out.readout = div(matvec(out.state.c, q), denom);
  out.h = mul(o, out.readout);
  require_finite(out.h, "mlstm_step", step_index);
  return out;
}

MLstmStep mlstm_step(const MLstmParams& params, const Tensor& x, const MLstmState& state) {
  return mlstm_step_projected(params, project_one(x, params.input_weight, params.bias), state);
}

// ---- FFN ----------------------------------------------------------------------

Tensor ffn_forward(const FfnParams& params, const Tensor& x) {
  if (x.rank() == 1) return reshape(ffn_forward(params, reshape(x, {1, x.dim(0)})), {params.w2.dim(1)});
  const Tensor hidden = add(matmul(x, params.w1), params.b1);
  const Tensor activated = mul(hidden, sigmoid(hidden));
  return add(matmul(activated, params.w2), params.b2);
}

// ---- sequences ----------------------------------------------------------------

SequenceOutput<SLstmState> sequence_forward(const SLstmParams& params, const Tensor& xs, SLstmState initial) {
  if (xs.rank() != 2 || xs.dim(0) == 0) throw DimensionError("sequence_forward: expected a non-empty [S×d] input");
  const Tensor projected = project_rows(xs, params.input_weight, slstm_bias(params));
  std::vector<Tensor> outputs;
  outputs.reserve(xs.dim(0));
  SLstmState state = std::move(initial);
  for (std::size_t t = 0; t < xs.dim(0); ++t) {
    auto step = slstm_step_projected(params, row(projected, t), state, t);
    outputs.push_back(step.h);
    state = std::move(step.state);
  }
  return {stack_rows(outputs), std::move(state)};
}

SequenceOutput<MLstmState> sequence_forward(const MLstmParams& params, const Tensor& xs, MLstmState initial) {
  if (xs.rank() != 2 || xs.dim(0) == 0) throw DimensionError("sequence_forward: expected a non-empty [S×d] input");
  const Tensor projected = project_rows(xs, params.input_weight, params.bias);
  std::vector<Tensor> outputs;
  outputs.reserve(xs.dim(0));
  MLstmState state = std::move(initial);
  for (std::size_t t = 0; t < xs.dim(0); ++t) {
    auto step = mlstm_step_projected(params, row(projected, t), state, t);
    outputs.push_back(step.h);
    state = std::move(step.state);
  }
  return {stack_rows(outputs), std::move(state)};
}

std::size_t state_size(const SLstmState& s) { return s.c.numel() + s.n.numel() + s.h.numel() + s.m.numel(); }
std::size_t state_size(const MLstmState& s) { return s.c.numel() + s.n.numel() + s.m.numel(); }

std::string_view to_string(ForgetGate g) { return g == ForgetGate::sigmoid ? "sigmoid" : "exp"; }

ForgetGate parse_forget_gate(std::string_view text) {
  if (text == "sigmoid") return ForgetGate::sigmoid;
  if (text == "exp" || text == "exponential") return ForgetGate::exponential;
  throw ConfigError("unknown forget gate '" + std::string(text) + "'");
}

}  // namespace moxe
