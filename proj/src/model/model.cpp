#include "moxe/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "common/text.hpp"
#include "moxe/errors.hpp"

namespace moxe {

namespace {

using text::format_double;
using text::parse_bool;
using text::parse_double;
using text::parse_number;

constexpr double kNormEps = 1e-6;

Tensor uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

template <class Params, class F>
void visit_cell(const std::string& prefix, Params& cell, F& f) {
  cell.for_each_tensor([&](const char* name, auto& t) { f(prefix + name, t); });
}

template <class Model, class F>
void visit_all(Model& p, F&& f) {
  f("embedding", p.embedding);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string base = "layers." + std::to_string(l) + ".";
    f(base + "mixer.slstm_norm", layer.mixer.slstm_norm);
    visit_cell(base + "mixer.slstm.", layer.mixer.slstm, f);
    f(base + "mixer.slstm_out", layer.mixer.slstm_out);
    f(base + "mixer.mlstm_norm", layer.mixer.mlstm_norm);
    visit_cell(base + "mixer.mlstm.", layer.mixer.mlstm, f);
    f(base + "mixer.mlstm_out", layer.mixer.mlstm_out);
    f(base + "expert_norm", layer.expert_norm);
    visit_cell(base + "router.", layer.router, f);
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
      auto& ex = layer.experts[e];
      const std::string eb = base + "experts." + std::to_string(e) + ".";
      switch (ex.kind) {
        case CellKind::mlstm:
          visit_cell(eb + "mlstm.", ex.mlstm, f);
          f(eb + "out", ex.out);
          break;
        case CellKind::slstm:
          visit_cell(eb + "slstm.", ex.slstm, f);
          f(eb + "out", ex.out);
          break;
        case CellKind::ffn:
          visit_cell(eb + "ffn.", ex.ffn, f);
          break;
      }
    }
  }
  f("final_norm", p.final_norm);
  f("head", p.head);
  f("head_bias", p.head_bias);
}

Tensor mix_slstm(const MixerParams& m, const Tensor& h, SLstmState state, SLstmState* final_state) {
  auto out = sequence_forward(m.slstm, rms_norm(h, m.slstm_norm, kNormEps), std::move(state));
  if (final_state) *final_state = std::move(out.state);
  return add(h, matmul(out.outputs, m.slstm_out));
}

Tensor mix_mlstm(const MixerParams& m, const Tensor& h, MLstmState state, MLstmState* final_state) {
  auto out = sequence_forward(m.mlstm, rms_norm(h, m.mlstm_norm, kNormEps), std::move(state));
  if (final_state) *final_state = std::move(out.state);
  return add(h, matmul(out.outputs, m.mlstm_out));
}

Tensor mix_with_state(const MixerParams& m, const Tensor& h, MixerOrder order, SLstmState& s, MLstmState& ms) {
  if (order == MixerOrder::slstm_first) {
    const Tensor a = mix_slstm(m, h, s, &s);
    return mix_mlstm(m, a, ms, &ms);
  }
  const Tensor a = mix_mlstm(m, h, ms, &ms);
  return mix_slstm(m, a, s, &s);
}

std::size_t slstm_params(std::size_t d, std::size_t heads) { return d * 4 * d + 3 * d + 4 * d * d / heads; }
std::size_t mlstm_params(std::size_t d) { return d * (4 * d + 2) + 4 * d + 2; }
std::size_t ffn_params(std::size_t d) { return d * 4 * d + 4 * d + 4 * d * d + d; }

std::size_t slstm_macs(std::size_t d, std::size_t heads) { return 4 * d * d + 4 * d * d / heads; }
// Projection, rank-1 update, C·q read-out and the normalizer dot product.
std::size_t mlstm_macs(std::size_t d) { return d * (4 * d + 2) + 2 * d * d + d; }
std::size_t ffn_macs(std::size_t d) { return 8 * d * d; }

}  // namespace

// ---- enums ------------------------------------------------------------------------

std::string_view to_string(ExpertKind k) {
  switch (k) {
    case ExpertKind::mixed: return "mixed";
    case ExpertKind::mlstm_only: return "mlstm-only";
    case ExpertKind::slstm_only: return "slstm-only";
    case ExpertKind::ffn: return "ffn";
  }
  return "mixed";
}

std::string_view to_string(MixerOrder o) { return o == MixerOrder::slstm_first ? "slstm-mlstm" : "mlstm-slstm"; }

ExpertKind parse_expert_kind(std::string_view text) {
  if (text == "mixed") return ExpertKind::mixed;
  if (text == "mlstm-only") return ExpertKind::mlstm_only;
  if (text == "slstm-only") return ExpertKind::slstm_only;
  if (text == "ffn") return ExpertKind::ffn;
  throw ConfigError("unknown expert_kind '" + std::string(text) + "'");
}

MixerOrder parse_mixer_order(std::string_view text) {
  if (text == "slstm-mlstm") return MixerOrder::slstm_first;
  if (text == "mlstm-slstm") return MixerOrder::mlstm_first;
  throw ConfigError("unknown mixer_order '" + std::string(text) + "'");
}

// ---- config -----------------------------------------------------------------------

const std::vector<std::string>& ModelConfig::keys() {
  static const std::vector<std::string> k{
      "vocab_size",   "embed_dim",     "num_layers",         "num_experts",      "top_k",      "num_heads",
      "gamma",        "lambda_d",      "lambda_group",       "lambda_z",         "lambda_aux", "capacity_factor",
      "expert_kind",  "group_loss",    "renormalize_topk",   "aux_scale",        "mixer_order", "forget_gate",
      "seed"};
  return k;
}

bool ModelConfig::set(std::string_view key, std::string_view value) {
  if (key == "vocab_size") vocab_size = parse_number<std::size_t>(key, value);
  else if (key == "embed_dim") embed_dim = parse_number<std::size_t>(key, value);
  else if (key == "num_layers") num_layers = parse_number<std::size_t>(key, value);
  else if (key == "num_experts") num_experts = parse_number<std::size_t>(key, value);
  else if (key == "top_k") top_k = parse_number<std::size_t>(key, value);
  else if (key == "num_heads") num_heads = parse_number<std::size_t>(key, value);
  else if (key == "gamma") gamma = parse_double(key, value);
  else if (key == "lambda_d") lambdas.difficulty = parse_double(key, value);
  else if (key == "lambda_group") lambdas.group = parse_double(key, value);
  else if (key == "lambda_z") lambdas.z = parse_double(key, value);
  else if (key == "lambda_aux") lambdas.aux = parse_double(key, value);
  else if (key == "capacity_factor")
    capacity_factor = value == "unlimited" ? kUnlimitedCapacity : parse_double(key, value);
  else if (key == "expert_kind") expert_kind = parse_expert_kind(value);
  else if (key == "group_loss") group_loss_enabled = parse_bool(key, value);
  else if (key == "renormalize_topk") renormalize_topk = parse_bool(key, value);
  else if (key == "aux_scale") aux_scale = parse_double(key, value);
  else if (key == "mixer_order") mixer_order = parse_mixer_order(value);
  else if (key == "forget_gate") forget_gate = parse_forget_gate(value);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
  else return false;
  return true;
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "vocab_size=" << vocab_size << '\n'
     << "embed_dim=" << embed_dim << '\n'
     << "num_layers=" << num_layers << '\n'
     << "num_experts=" << num_experts << '\n'
     << "top_k=" << top_k << '\n'
     << "num_heads=" << num_heads << '\n'
     << "gamma=" << format_double(gamma) << '\n'
     << "lambda_d=" << format_double(lambdas.difficulty) << '\n'
     << "lambda_group=" << format_double(lambdas.group) << '\n'
     << "lambda_z=" << format_double(lambdas.z) << '\n'
     << "lambda_aux=" << format_double(lambdas.aux) << '\n'
     << "capacity_factor=" << (unlimited_capacity() ? "unlimited" : format_double(capacity_factor)) << '\n'
     << "expert_kind=" << to_string(expert_kind) << '\n'
     << "group_loss=" << (group_loss_enabled ? "true" : "false") << '\n'
     << "renormalize_topk=" << (renormalize_topk ? "true" : "false") << '\n'
     << "aux_scale=" << format_double(aux_scale) << '\n'
     << "mixer_order=" << to_string(mixer_order) << '\n'
     << "forget_gate=" << to_string(forget_gate) << '\n'
     << "seed=" << seed << '\n';
  return os.str();
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (embed_dim == 0) fail("embed_dim must be positive");
  if (num_layers == 0) fail("num_layers must be positive");
  if (num_experts < 2) fail("num_experts must be at least 2");
  if (expert_kind == ExpertKind::mixed && num_experts % 2 != 0) fail("num_experts must be even for mixed experts");
  if (top_k < 1 || top_k > num_experts) fail("top_k must lie in [1, num_experts]");
  if (num_heads == 0 || embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) fail("gamma must be a finite non-negative number");
  for (double l : {lambdas.difficulty, lambdas.group, lambdas.z, lambdas.aux}) {
    if (!(l >= 0.0) || !std::isfinite(l)) fail("loss weights must be finite and non-negative");
  }
  if (!(capacity_factor > 0.0)) fail("capacity_factor must be positive or 'unlimited'");
  if (!std::isfinite(aux_scale)) fail("aux_scale must be finite");
}

std::size_t expert_capacity(const ModelConfig& config, std::size_t tokens) {
  if (config.unlimited_capacity()) return tokens;
  const double cap = std::ceil(config.capacity_factor * static_cast<double>(tokens) /
                               static_cast<double>(config.num_experts));
  return static_cast<std::size_t>(cap);
}

// ---- parameters ---------------------------------------------------------------------

void for_each_parameter(ModelParams& params, const std::function<void(const std::string&, Tensor&)>& f) {
  visit_all(params, f);
}

void for_each_parameter(const ModelParams& params,
                        const std::function<void(const std::string&, const Tensor&)>& f) {
  visit_all(params, f);
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t n = 0;
  for_each_parameter(params, [&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

std::vector<CellKind> expert_kinds(const ModelConfig& config) {
  std::vector<CellKind> kinds(config.num_experts);
  for (std::size_t e = 0; e < config.num_experts; ++e) {
    switch (config.expert_kind) {
      case ExpertKind::mixed:
        kinds[e] = e < config.num_experts / 2 ? CellKind::mlstm : CellKind::slstm;
        break;
      case ExpertKind::mlstm_only: kinds[e] = CellKind::mlstm; break;
      case ExpertKind::slstm_only: kinds[e] = CellKind::slstm; break;
      case ExpertKind::ffn: kinds[e] = CellKind::ffn; break;
    }
  }
  return kinds;
}

ModelParams init_model(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const std::size_t d = config.embed_dim;
  ModelParams p;
  {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> e(config.vocab_size * d);
    for (auto& x : e) x = u(rng);
    p.embedding = Tensor({config.vocab_size, d}, std::move(e));
  }
  const auto kinds = expert_kinds(config);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerParams layer;
    layer.mixer.slstm_norm = Tensor::filled({d}, 1.0);
    layer.mixer.slstm = init_slstm(d, d, config.num_heads, config.forget_gate, rng);
    layer.mixer.slstm_out = uniform({d, d}, d, rng);
    layer.mixer.mlstm_norm = Tensor::filled({d}, 1.0);
    layer.mixer.mlstm = init_mlstm(d, d, config.forget_gate, rng);
    layer.mixer.mlstm_out = uniform({d, d}, d, rng);
    layer.expert_norm = Tensor::filled({d}, 1.0);
    layer.router = init_router(d, config.num_experts, config.gamma, rng);
    for (CellKind kind : kinds) {
      ExpertParams ex;
      ex.kind = kind;
      switch (kind) {
        case CellKind::mlstm:
          ex.mlstm = init_mlstm(d, d, config.forget_gate, rng);
          ex.out = uniform({d, d}, d, rng);
          break;
        case CellKind::slstm:
          ex.slstm = init_slstm(d, d, config.num_heads, config.forget_gate, rng);
          ex.out = uniform({d, d}, d, rng);
          break;
        case CellKind::ffn:
          ex.ffn = init_ffn(d, rng);
          break;
      }
      layer.experts.push_back(std::move(ex));
    }
    p.layers.push_back(std::move(layer));
  }
  p.final_norm = Tensor::filled({d}, 1.0);
  p.head = uniform({d, config.vocab_size}, d, rng);
  p.head_bias = Tensor::zeros({config.vocab_size});
  return p;
}

// ---- dispatch ---------------------------------------------------------------------------

std::size_t DispatchPlan::served() const {
  std::size_t n = 0;
  for (const auto& t : tokens) n += t.size();
  return n;
}

std::vector<std::size_t> DispatchPlan::counts() const {
  std::vector<std::size_t> c(tokens.size());
  for (std::size_t e = 0; e < tokens.size(); ++e) c[e] = tokens[e].size();
  return c;
}

DispatchPlan dispatch(std::span<const std::size_t> selected, std::size_t tokens, std::size_t num_experts,
                      std::size_t k, std::size_t capacity, std::span<const double> gate_weights) {
  if (selected.size() != tokens * k) throw DimensionError("dispatch: selections must be [T×k]");
  if (!gate_weights.empty() && gate_weights.size() != tokens * num_experts) {
    throw DimensionError("dispatch: gate weights must be [T×E]");
  }
  DispatchPlan plan;
  plan.capacity = capacity;
  plan.tokens.resize(num_experts);
  plan.weights.resize(num_experts);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t e = selected[t * k + j];
      if (e >= num_experts) throw DimensionError("dispatch: expert index out of range");
      if (plan.tokens[e].size() < capacity) {
        plan.tokens[e].push_back(t);
        plan.weights[e].push_back(gate_weights.empty() ? 0.0 : gate_weights[t * num_experts + e]);
      } else {
        plan.dropped.emplace_back(t, e);
      }
    }
  }
  return plan;
}

// ---- forward ----------------------------------------------------------------------------

Tensor sequence_mix(const MixerParams& mixer, const Tensor& h, MixerOrder order) {
  if (h.rank() != 2 || h.dim(0) == 0) throw DimensionError("sequence_mix: expected non-empty [S×d]");
  SLstmState s = SLstmState::zeros(mixer.slstm.hidden_dim);
  MLstmState m = MLstmState::zeros(mixer.mlstm.hidden_dim);
  return mix_with_state(mixer, h, order, s, m);
}

Tensor expert_forward(const ExpertParams& expert, const Tensor& rows) {
  switch (expert.kind) {
    case CellKind::mlstm:
      return matmul(sequence_forward(expert.mlstm, rows, MLstmState::zeros(expert.mlstm.hidden_dim)).outputs,
                    expert.out);
    case CellKind::slstm:
      return matmul(sequence_forward(expert.slstm, rows, SLstmState::zeros(expert.slstm.hidden_dim)).outputs,
                    expert.out);
    case CellKind::ffn:
      return ffn_forward(expert.ffn, rows);
  }
  throw ContractError("expert_forward: unknown expert kind");
}

LayerOutput layer_forward(const LayerParams& layer, const Tensor& h, const ModelConfig& config) {
  const std::size_t tokens = h.dim(0);
  LayerOutput out;
  out.mixed = sequence_mix(layer.mixer, h, config.mixer_order);
  const Tensor u = rms_norm(out.mixed, layer.expert_norm, kNormEps);
  out.routing = route_sequence(layer.router, u, config.top_k, config.renormalize_topk);
  out.plan = dispatch(out.routing.topk, tokens, config.num_experts, config.top_k, expert_capacity(config, tokens),
                      out.routing.gate_weights.values());
  Tensor y = out.mixed;
  for (std::size_t e = 0; e < layer.experts.size(); ++e) {
    const auto& assigned = out.plan.tokens[e];
    if (assigned.empty()) continue;
    const Tensor expert_out = expert_forward(layer.experts[e], gather_rows(u, assigned));
    y = add(y, scatter_rows_weighted(expert_out, out.routing.gate_weights, e, assigned, tokens));
  }
  out.hidden = y;
  return out;
}

ModelOutput model_forward(const ModelParams& params, const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw InputError("model_forward: empty token sequence");
  std::vector<std::size_t> ids(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= config.vocab_size) {
      throw InputError("token id " + std::to_string(tokens[i]) + " outside vocabulary of " +
                       std::to_string(config.vocab_size));
    }
    ids[i] = static_cast<std::size_t>(tokens[i]);
  }
  ModelOutput out;
  Tensor h = gather_rows(params.embedding, ids);
  for (const auto& layer : params.layers) {
    out.layers.push_back(layer_forward(layer, h, config));
    h = out.layers.back().hidden;
  }
  out.logits = add(matmul(rms_norm(h, params.final_norm, kNormEps), params.head), params.head_bias);
  return out;
}

BatchOutput batch_forward(const ModelParams& params, const ModelConfig& config,
                          std::span<const std::vector<int>> inputs, std::span<const std::vector<int>> targets) {
  if (inputs.empty() || inputs.size() != targets.size()) throw DimensionError("batch_forward: inputs/targets mismatch");
  BatchOutput out;
  std::vector<Tensor> logits;
  std::vector<int> all_targets;
  std::vector<std::vector<RouterBatch>> routing(config.num_layers);
  out.dispatched.assign(config.num_layers, std::vector<std::size_t>(config.num_experts, 0));
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    if (inputs[b].size() != targets[b].size()) throw DimensionError("batch_forward: target length mismatch");
    auto fwd = model_forward(params, config, inputs[b]);
    logits.push_back(fwd.logits);
    all_targets.insert(all_targets.end(), targets[b].begin(), targets[b].end());
    for (std::size_t l = 0; l < config.num_layers; ++l) {
      routing[l].push_back(std::move(fwd.layers[l].routing));
      const auto counts = fwd.layers[l].plan.counts();
      for (std::size_t e = 0; e < config.num_experts; ++e) out.dispatched[l][e] += counts[e];
    }
  }
  out.tokens = all_targets.size();
  out.task_ce = cross_entropy(logits.size() == 1 ? logits[0] : concat_rows(logits), all_targets);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    out.layers.push_back(make_routing_stats(routing[l], out.dispatched[l], params.layers[l].router.groups));
    const GroupMass m = out.layers.back().mean_group_mass();
    out.layer_group_gap.push_back(std::fabs(m.mlstm - m.slstm));
  }
  return out;
}

LossBundle batch_loss(const BatchOutput& out, const ModelConfig& config) {
  return total_loss(out.task_ce, out.layers, config.lambdas, config.aux_options());
}

// ---- incremental decoding ---------------------------------------------------------------

IncrementalDecoder::IncrementalDecoder(const ModelParams& params, const ModelConfig& config,
                                       std::size_t planned_length)
    : params_(params), config_(config) {
  config_.validate();
  capacity_ = planned_length > 0 ? expert_capacity(config, planned_length) : static_cast<std::size_t>(-1);
  const std::size_t d = config.embed_dim;
  for (const auto& layer : params.layers) {
    LayerState s;
    s.mixer_s = SLstmState::zeros(d);
    s.mixer_m = MLstmState::zeros(d);
    for (const auto& ex : layer.experts) {
      s.expert_s.push_back(SLstmState::zeros(ex.kind == CellKind::slstm ? d : 0));
      s.expert_m.push_back(MLstmState::zeros(ex.kind == CellKind::mlstm ? d : 0));
    }
    s.served.assign(layer.experts.size(), 0);
    layers_.push_back(std::move(s));
  }
}

Tensor IncrementalDecoder::step(int token) {
  if (token < 0 || static_cast<std::size_t>(token) >= config_.vocab_size) {
    throw InputError("token id " + std::to_string(token) + " outside vocabulary");
  }
  const std::size_t id = static_cast<std::size_t>(token);
  Tensor h = gather_rows(params_.embedding, std::span<const std::size_t>(&id, 1));
  for (std::size_t l = 0; l < params_.layers.size(); ++l) {
    const auto& layer = params_.layers[l];
    auto& st = layers_[l];
    const Tensor mixed = mix_with_state(layer.mixer, h, config_.mixer_order, st.mixer_s, st.mixer_m);
    const Tensor u = rms_norm(mixed, layer.expert_norm, kNormEps);
    const RouterBatch r = route_sequence(layer.router, u, config_.top_k, config_.renormalize_topk);
    Tensor y = mixed;
    const std::size_t only = 0;
    for (std::size_t e : r.selected(0)) {
      if (st.served[e] >= capacity_) continue;
      const auto& ex = layer.experts[e];
      Tensor out;
      switch (ex.kind) {
        case CellKind::mlstm: {
          auto res = sequence_forward(ex.mlstm, u, st.expert_m[e]);
          st.expert_m[e] = std::move(res.state);
          out = matmul(res.outputs, ex.out);
          break;
        }
        case CellKind::slstm: {
          auto res = sequence_forward(ex.slstm, u, st.expert_s[e]);
          st.expert_s[e] = std::move(res.state);
          out = matmul(res.outputs, ex.out);
          break;
        }
        case CellKind::ffn:
          out = ffn_forward(ex.ffn, u);
          break;
      }
      ++st.served[e];
      ++expert_evaluations_;
      y = add(y, scatter_rows_weighted(out, r.gate_weights, e, std::span<const std::size_t>(&only, 1), 1));
    }
    h = y;
  }
  ++position_;
  const Tensor logits = add(matmul(rms_norm(h, params_.final_norm, kNormEps), params_.head), params_.head_bias);
  return reshape(logits, {config_.vocab_size});
}

std::size_t IncrementalDecoder::state_size() const {
  std::size_t n = 0;
  for (const auto& s : layers_) {
    n += moxe::state_size(s.mixer_s) + moxe::state_size(s.mixer_m);
    for (const auto& e : s.expert_s) n += moxe::state_size(e);
    for (const auto& e : s.expert_m) n += moxe::state_size(e);
  }
  return n;
}

// ---- accounting -------------------------------------------------------------------------

CostReport active_param_and_flop_report(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.embed_dim, v = config.vocab_size, E = config.num_experts, k = config.top_k;
  const std::size_t heads = config.num_heads;

  std::size_t expert_params_layer = 0, expert_macs_layer = 0;
  for (CellKind kind : expert_kinds(config)) {
    switch (kind) {
      case CellKind::mlstm:
        expert_params_layer += mlstm_params(d) + d * d;
        expert_macs_layer += mlstm_macs(d) + d * d;
        break;
      case CellKind::slstm:
        expert_params_layer += slstm_params(d, heads) + d * d;
        expert_macs_layer += slstm_macs(d, heads) + d * d;
        break;
      case CellKind::ffn:
        expert_params_layer += ffn_params(d);
        expert_macs_layer += ffn_macs(d);
        break;
    }
  }
  const std::size_t mixer_params = 2 * d + slstm_params(d, heads) + mlstm_params(d) + 2 * d * d;
  const std::size_t router_params = d * E + E + d + 1;
  const std::size_t mixer_macs = slstm_macs(d, heads) + mlstm_macs(d) + 2 * d * d;
  const std::size_t router_macs = d * E + d;
  const std::size_t L = config.num_layers;

  CostReport r;
  r.expert_params = L * expert_params_layer;
  r.total_params = v * d + L * (mixer_params + d + router_params + expert_params_layer) + d + d * v + v;
  // Experts are counted at their average size, k of E per layer.
  r.active_params = r.total_params - r.expert_params + L * expert_params_layer * k / E;
  r.dense_expert_macs_per_token = L * expert_macs_layer;
  r.expert_macs_per_token = static_cast<double>(L * expert_macs_layer) * static_cast<double>(k) / static_cast<double>(E);
  r.total_macs_per_token = static_cast<double>(L * (mixer_macs + router_macs) + d * v) + r.expert_macs_per_token;
  r.expert_compute_ratio = r.expert_macs_per_token / static_cast<double>(r.dense_expert_macs_per_token);
  return r;
}

}  // namespace moxe
