#include "moxe/diagnostics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "moxe/errors.hpp"
#include "moxe/gradcheck.hpp"

namespace moxe {

namespace {

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

long double log_sum_exp_group(std::span<const double> z, std::span<const ExpertGroup> groups, ExpertGroup g) {
  long double mx = -INFINITY;
  for (std::size_t i = 0; i < z.size(); ++i)
    if (groups[i] == g) mx = std::max<long double>(mx, z[i]);
  long double s = 0.0L;
  for (std::size_t i = 0; i < z.size(); ++i)
    if (groups[i] == g) s += std::exp(static_cast<long double>(z[i]) - mx);
  return mx + std::log(s);
}

// p_m / p_s as produced by the routing code itself.
double routed_ratio(std::span<const double> raw, double d, double gamma, std::span<const ExpertGroup> groups) {
  const std::size_t e = raw.size();
  const RouterBatch b = route_logits(Tensor({1, e}, std::vector<double>(raw.begin(), raw.end())),
                                     Tensor::vector({d}), Tensor::scalar(gamma), groups, 1);
  const GroupMass m = group_mass(b.probs.values(), groups);
  return m.mlstm / m.slstm;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    rows.push_back(std::move(fields));
  }
  if (rows.empty()) throw InputError("empty CSV: " + path.string());
  return rows;
}

double csv_number(const std::string& s, const std::filesystem::path& path) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw InputError("non-numeric field '" + s + "' in " + path.string());
  return v;
}

}  // namespace

// ---- report --------------------------------------------------------------------------

void VerificationReport::add(std::string name, double deviation, std::string detail) {
  if (!(deviation <= tolerance)) pass = false;  // NaN fails
  if (cases.empty() || !(deviation <= max_deviation)) max_deviation = deviation;
  cases.push_back({std::move(name), deviation, std::move(detail)});
}

std::string VerificationReport::to_text(bool verbose) const {
  std::ostringstream os;
  os << suite << ": " << (pass ? "PASS" : "FAIL") << "  cases=" << cases.size() << "  max_deviation=" << sci(max_deviation)
     << "  tolerance=" << sci(tolerance) << '\n';
  for (const auto& c : cases) {
    const bool ok = c.deviation <= tolerance;
    if (verbose || !ok) {
      os << "  " << (ok ? "ok   " : "FAIL ") << c.name << "  deviation=" << sci(c.deviation);
      if (!c.detail.empty()) os << "  " << c.detail;
      os << '\n';
    }
  }
  return os.str();
}

// ---- ratio theorem --------------------------------------------------------------------

VerificationReport verify_ratio_theorem(std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw ContractError("verify_ratio_theorem: trials must be positive");
  VerificationReport r("ratio", 1e-9);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> logit(-4.0, 4.0), gamma_dist(0.0, 4.0), unit(0.0, 1.0);
  double worst_identity = 0.0, worst_balanced = 0.0;
  std::string identity_at, balanced_at;

  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t e = 2 * (1 + rng() % 4);
    const auto groups = half_split_groups(e);
    std::vector<double> z(e);
    for (auto& x : z) x = logit(rng);
    const double gamma = gamma_dist(rng), d = unit(rng);
    const long double predicted = std::exp(2.0L * gamma * d);

    const long double correction =
        std::exp(log_sum_exp_group(z, groups, ExpertGroup::mlstm) - log_sum_exp_group(z, groups, ExpertGroup::slstm));
    const double exact = routed_ratio(z, d, gamma, groups);
    const double dev_identity = static_cast<double>(std::fabs(exact / (predicted * correction) - 1.0L));
    if (!(dev_identity <= worst_identity)) {
      worst_identity = dev_identity;
      identity_at = "trial " + std::to_string(t);
    }

    // Shift the sLSTM logits so both groups have the same log-sum-exp.
    const double shift = static_cast<double>(log_sum_exp_group(z, groups, ExpertGroup::mlstm) -
                                             log_sum_exp_group(z, groups, ExpertGroup::slstm));
    for (std::size_t i = 0; i < e; ++i)
      if (groups[i] == ExpertGroup::slstm) z[i] += shift;
    const double balanced = routed_ratio(z, d, gamma, groups);
    const double dev_balanced = static_cast<double>(std::fabs(balanced / predicted - 1.0L));
    if (!(dev_balanced <= worst_balanced)) {
      worst_balanced = dev_balanced;
      balanced_at = "trial " + std::to_string(t);
    }
  }
  r.add("identity p_m/p_s = exp(2*gamma*d)*correction (" + std::to_string(trials) + " trials)", worst_identity,
        identity_at);
  r.add("balanced logits p_m/p_s = exp(2*gamma*d) (" + std::to_string(trials) + " trials)", worst_balanced,
        balanced_at);

  // Fixed anchors.
  {
    const std::vector<double> z{0.3, -1.2, 0.7, 2.0};
    const auto groups = half_split_groups(4);
    const double correction = static_cast<double>(
        std::exp(log_sum_exp_group(z, groups, ExpertGroup::mlstm) - log_sum_exp_group(z, groups, ExpertGroup::slstm)));
    r.add("gamma = 0 gives the correction alone", std::fabs(routed_ratio(z, 0.8, 0.0, groups) / correction - 1.0));
    const std::vector<double> balanced{0.5, -0.25, 0.5, -0.25};
    r.add("balanced, gamma = 1, d = 1 gives e^2",
          std::fabs(routed_ratio(balanced, 1.0, 1.0, groups) / 7.38905609893065 - 1.0));
  }
  return r;
}

// ---- gradients --------------------------------------------------------------------------

VerificationReport verify_gradients(std::uint64_t seed) {
  VerificationReport r("grad", 1e-5);
  std::mt19937_64 rng(seed + 17);
  auto check = [&](const std::string& name, const ScalarFn& f, std::vector<Tensor> params) {
    const auto g = finite_diff_check(f, params);
    r.add(name, g.max_rel_error,
          "coords=" + std::to_string(g.coordinates) + " worst param " + std::to_string(g.worst_param) + "[" +
              std::to_string(g.worst_index) + "] autodiff=" + sci(g.autodiff) + " fd=" + sci(g.numeric));
  };

  for (ForgetGate gate : {ForgetGate::sigmoid, ForgetGate::exponential}) {
    const auto p = init_slstm(4, 4, 2, gate, rng);
    const Tensor w = random_tensor({4}, rng);
    check(std::string("slstm step (") + std::string(to_string(gate)) + " forget)",
          [&](std::span<const Tensor> q) {
            SLstmParams local = p;
            local.input_weight = q[0];
            local.bias = q[1];
            local.recurrent = q[2];
            return sum(mul(slstm_step(local, q[3], SLstmState{q[4], q[5], q[6], q[7]}).h, w));
          },
          {p.input_weight.clone(), p.bias.clone(), p.recurrent.clone(), random_tensor({4}, rng),
           random_tensor({4}, rng), random_tensor({4}, rng, 0.5, 2.0), random_tensor({4}, rng),
           random_tensor({4}, rng)});
  }
  for (ForgetGate gate : {ForgetGate::sigmoid, ForgetGate::exponential}) {
    const auto p = init_mlstm(4, 4, gate, rng);
    const Tensor w = random_tensor({4}, rng);
    check(std::string("mlstm step (") + std::string(to_string(gate)) + " forget)",
          [&](std::span<const Tensor> q) {
            MLstmParams local = p;
            local.input_weight = q[0];
            local.bias = q[1];
            return sum(mul(mlstm_step(local, q[2], MLstmState{q[3], q[4], q[5]}).h, w));
          },
          {p.input_weight.clone(), p.bias.clone(), random_tensor({4}, rng), random_tensor({4, 4}, rng),
           random_tensor({4}, rng, 0.5, 1.5), random_tensor({1}, rng)});
  }
  {
    const auto p = init_ffn(3, rng);
    const Tensor w = random_tensor({2, 3}, rng);
    check("ffn",
          [&](std::span<const Tensor> q) { return sum(mul(ffn_forward(FfnParams{q[0], q[1], q[2], q[3]}, q[4]), w)); },
          {p.w1.clone(), p.b1.clone(), p.w2.clone(), p.b2.clone(), random_tensor({2, 3}, rng)});
  }
  {
    const auto p = init_router(4, 4, 1.3, rng);
    const Tensor w1 = random_tensor({3, 4}, rng), w2 = random_tensor({3, 4}, rng);
    check("router (difficulty, bias, softmax, gates)",
          [&](std::span<const Tensor> q) {
            RouterParams local = p;
            local.gate_weight = q[0];
            local.gate_bias = q[1];
            local.difficulty_weight = q[2];
            local.difficulty_bias = q[3];
            const auto b = route_sequence(local, q[4], 2);
            return add(sum(mul(b.probs, w1)), sum(mul(b.gate_weights, w2)));
          },
          {p.gate_weight.clone(), p.gate_bias.clone(), p.difficulty_weight.clone(), p.difficulty_bias.clone(),
           random_tensor({3, 4}, rng)});
    const auto groups = half_split_groups(4);
    check("router gamma path",
          [&](std::span<const Tensor> q) { return sum(mul(route_logits(q[0], q[1], q[2], groups, 2).probs, w1)); },
          {random_tensor({3, 4}, rng), random_tensor({3}, rng, 0.1, 0.9), Tensor::scalar(1.5)});
  }
  {
    const auto router = init_router(4, 4, 1.2, rng);
    const Tensor h = random_tensor({5, 4}, rng, -1.5, 1.5);
    const std::vector<std::size_t> counts{3, 2, 3, 2};
    const auto target = route_sequence(router, h, 2).entropy;
    auto make = [&](std::span<const Tensor> q) {
      RouterParams local = router;
      local.gate_weight = q[0];
      local.gate_bias = q[1];
      local.difficulty_weight = q[2];
      local.difficulty_bias = q[3];
      const RouterBatch b = route_sequence(local, h, 2);
      auto s = make_routing_stats(std::span<const RouterBatch>(&b, 1), counts, local.groups);
      s.entropy = target;  // constant target: held fixed under perturbation
      return s;
    };
    const std::vector<Tensor> params{router.gate_weight.clone(), router.gate_bias.clone(),
                                     router.difficulty_weight.clone(), router.difficulty_bias.clone()};
    const std::pair<const char*, std::function<Tensor(const RoutingStats&)>> terms[] = {
        {"loss l_d", [](const RoutingStats& s) { return difficulty_loss(s); }},
        {"loss l_group", [](const RoutingStats& s) { return group_loss(s); }},
        {"loss l_z", [](const RoutingStats& s) { return z_loss(s); }},
        {"loss l_aux", [](const RoutingStats& s) { return load_balance_loss(s); }},
    };
    for (const auto& [name, term] : terms) {
      check(name, [&](std::span<const Tensor> q) { return term(make(q)); }, params);
    }
  }

  // Tiny model: S = 4, d = 8, E = 4, k = 2.
  ModelConfig c;
  c.vocab_size = 16;
  c.embed_dim = 8;
  c.num_layers = 2;
  c.num_experts = 4;
  c.top_k = 2;
  c.num_heads = 2;
  c.seed = seed + 1;
  c.lambdas = {0.5, 0.5, 0.1, 0.3};
  {
    const auto base = init_model(c);
    const std::vector<std::vector<int>> in{{1, 5, 3, 9}}, tg{{5, 3, 9, 2}};
    std::vector<std::vector<double>> entropy;
    for (const auto& l : batch_forward(base, c, in, tg).layers) entropy.push_back(l.entropy);
    std::vector<Tensor> params;
    std::vector<std::string> names;
    for_each_parameter(base, [&](const std::string& n, const Tensor& t) {
      params.push_back(t.clone());
      names.push_back(n);
    });
    auto f = [&](std::span<const Tensor> q) {
      ModelParams local = base;
      std::size_t i = 0;
      for_each_parameter(local, [&](const std::string&, Tensor& t) { t = q[i++]; });
      auto out = batch_forward(local, c, in, tg);
      for (std::size_t l = 0; l < out.layers.size(); ++l) out.layers[l].entropy = entropy[l];
      return batch_loss(out, c).total;
    };
    const auto g = finite_diff_check(f, params);
    // Per tensor, the error is scaled by that tensor's largest gradient:
    // entries far below it are dominated by rounding in the differences.
    r.add("tiny model total loss (per-tensor scaled)", g.max_tensor_rel_error,
          "coords=" + std::to_string(g.coordinates) + " worst coordinate " + names[g.worst_param] + "[" +
              std::to_string(g.worst_index) + "] autodiff=" + sci(g.autodiff) + " fd=" + sci(g.numeric));
  }

  // Coverage: every parameter tensor gets a nonzero gradient. Dense routing
  // gives every expert a multi-token stream, so recurrent weights are reached.
  {
    ModelConfig cc = c;
    cc.capacity_factor = kUnlimitedCapacity;
    cc.top_k = cc.num_experts;
    const auto base = init_model(cc);
    std::vector<int> in(24), tg(24);
    for (std::size_t i = 0; i < in.size(); ++i) {
      in[i] = static_cast<int>(rng() % 16);
      tg[i] = static_cast<int>(rng() % 16);
    }
    Tape tape;
    ModelParams watched = base;
    for_each_parameter(watched, [&](const std::string&, Tensor& t) { t = tape.watch(t); });
    const std::vector<std::vector<int>> ins{in}, tgs{tg};
    tape.backward(batch_loss(batch_forward(watched, cc, ins, tgs), cc).total);
    std::size_t missing = 0;
    std::string which;
    for_each_parameter(watched, [&](const std::string& n, const Tensor& t) {
      const auto grad = t.grad();
      if (std::none_of(grad.begin(), grad.end(), [](double x) { return x != 0.0; })) {
        ++missing;
        which += (which.empty() ? "" : ",") + n;
      }
    });
    r.add("every parameter receives a gradient", static_cast<double>(missing),
          missing ? "no gradient: " + which : "");
  }
  return r;
}

// ---- inference cost --------------------------------------------------------------------

double decode_time_cv(const ModelParams& params, const ModelConfig& config, std::size_t positions,
                      std::size_t repeats) {
  if (positions < 2 || repeats == 0) throw ContractError("decode_time_cv: need ≥ 2 positions and ≥ 1 repeat");
  std::vector<double> best(positions, INFINITY);
  std::mt19937_64 rng(config.seed);
  std::vector<int> tokens(positions);
  for (auto& t : tokens) t = static_cast<int>(rng() % config.vocab_size);
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    IncrementalDecoder dec(params, config);
    for (std::size_t i = 0; i < positions; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor logits = dec.step(tokens[i]);
      const auto t1 = std::chrono::steady_clock::now();
      if (!std::isfinite(logits[0])) throw NumericError("decode produced non-finite logits");
      best[i] = std::min(best[i], std::chrono::duration<double>(t1 - t0).count());
    }
  }
  const double mean = std::accumulate(best.begin(), best.end(), 0.0) / static_cast<double>(positions);
  double var = 0.0;
  for (double t : best) var += (t - mean) * (t - mean);
  var /= static_cast<double>(positions);
  return std::sqrt(var) / mean;
}

std::vector<VerificationReport> verify_inference_cost(const ModelConfig& config, std::size_t positions,
                                                      std::size_t repeats) {
  ModelConfig c = config;
  c.capacity_factor = kUnlimitedCapacity;
  c.validate();
  const auto params = init_model(c);
  std::vector<VerificationReport> out;

  {
    VerificationReport r("cost.evaluations", 0.0);
    IncrementalDecoder dec(params, c);
    const std::size_t n = std::min<std::size_t>(positions, 128);
    for (std::size_t i = 0; i < n; ++i) dec.step(static_cast<int>(i % c.vocab_size));
    const double per_token_layer =
        static_cast<double>(dec.expert_evaluations()) / static_cast<double>(n * c.num_layers);
    r.add("expert evaluations per token and layer = k", std::fabs(per_token_layer - static_cast<double>(c.top_k)),
          "measured " + std::to_string(per_token_layer) + ", k = " + std::to_string(c.top_k));
    out.push_back(std::move(r));
  }
  {
    VerificationReport r("cost.ratio", 1e-12);
    for (auto [e, k] : {std::pair<std::size_t, std::size_t>{4, 1}, {4, 2}, {8, 2}, {c.num_experts, c.top_k}}) {
      ModelConfig v = c;
      v.num_experts = e;
      v.top_k = k;
      const auto rep = active_param_and_flop_report(v);
      const double expect = static_cast<double>(k) / static_cast<double>(e);
      r.add("E=" + std::to_string(e) + " k=" + std::to_string(k), std::fabs(rep.expert_compute_ratio - expect),
            "reported " + std::to_string(rep.expert_compute_ratio));
    }
    out.push_back(std::move(r));
  }
  {
    VerificationReport r("cost.state", 0.0);
    IncrementalDecoder dec(params, c);
    const std::size_t initial = dec.state_size();
    double drift = 0.0;
    for (std::size_t i = 0; i < positions; ++i) {
      dec.step(static_cast<int>(i % c.vocab_size));
      drift = std::max(drift, std::fabs(static_cast<double>(dec.state_size()) - static_cast<double>(initial)));
    }
    r.add("decoder state size constant over " + std::to_string(positions) + " positions", drift,
          std::to_string(initial) + " values");
    out.push_back(std::move(r));
  }
  {
    VerificationReport r("cost.timing", 0.2);
    r.add("per-token decode time CV over positions 1.." + std::to_string(positions),
          decode_time_cv(params, c, positions, repeats), "min over " + std::to_string(repeats) + " repeats");
    out.push_back(std::move(r));
  }
  return out;
}

// ---- expert usage -----------------------------------------------------------------------

UsageReport expert_usage_report(const std::filesystem::path& metrics_csv, std::vector<ExpertGroup> groups) {
  const auto rows = read_csv(metrics_csv);
  const auto& header = rows.front();
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> columns;
  std::size_t layers = 0, experts = 0;
  for (std::size_t i = 0; i < header.size(); ++i) {
    unsigned l = 0, e = 0;
    char tail = 0;
    if (std::sscanf(header[i].c_str(), "usage_L%u_E%u%c", &l, &e, &tail) == 2) {
      columns[{l, e}] = i;
      layers = std::max<std::size_t>(layers, l + 1);
      experts = std::max<std::size_t>(experts, e + 1);
    }
  }
  if (header.empty() || header[0] != "step") throw InputError("metrics CSV must start with a step column");
  if (columns.empty()) throw InputError("metrics CSV has no usage columns: " + metrics_csv.string());
  if (columns.size() != layers * experts) throw InputError("metrics CSV usage columns are incomplete");
  if (groups.empty()) {
    if (experts % 2 != 0) throw InputError("odd expert count; pass explicit groups");
    groups = half_split_groups(experts);
  }
  if (groups.size() != experts) throw InputError("group list does not match the expert count");

  UsageReport r;
  r.layers = layers;
  r.experts = experts;
  r.mean_usage.assign(layers, std::vector<double>(experts, 0.0));
  r.mean_mlstm.assign(layers, 0.0);
  r.mean_slstm.assign(layers, 0.0);
  r.gap.assign(layers, {});
  for (std::size_t row = 1; row < rows.size(); ++row) {
    const auto& f = rows[row];
    if (f.size() != header.size()) {
      throw InputError("row " + std::to_string(row) + " of " + metrics_csv.string() + " has " +
                       std::to_string(f.size()) + " fields, expected " + std::to_string(header.size()));
    }
    r.steps.push_back(static_cast<std::uint64_t>(csv_number(f[0], metrics_csv)));
    for (std::size_t l = 0; l < layers; ++l) {
      double m = 0.0, s = 0.0;
      for (std::size_t e = 0; e < experts; ++e) {
        const double u = csv_number(f[columns.at({l, e})], metrics_csv);
        r.mean_usage[l][e] += u;
        (groups[e] == ExpertGroup::mlstm ? m : s) += u;
      }
      const double total = m + s;
      const double mn = total > 0.0 ? m / total : 0.0, sn = total > 0.0 ? s / total : 0.0;
      r.mean_mlstm[l] += mn;
      r.mean_slstm[l] += sn;
      r.gap[l].push_back(std::fabs(mn - sn));
    }
  }
  const double n = static_cast<double>(rows.size() - 1);
  if (n == 0) throw InputError("metrics CSV has no data rows");
  for (std::size_t l = 0; l < layers; ++l) {
    for (auto& u : r.mean_usage[l]) u /= n;
    r.mean_mlstm[l] /= n;
    r.mean_slstm[l] /= n;
  }
  return r;
}

double UsageReport::final_gap(std::size_t last_rows) const {
  if (steps.empty() || last_rows == 0) return 0.0;
  const std::size_t n = std::min(last_rows, steps.size());
  double s = 0.0;
  for (const auto& g : gap)
    for (std::size_t i = g.size() - n; i < g.size(); ++i) s += g[i];
  return s / static_cast<double>(n * gap.size());
}

void UsageReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << "step";
  for (std::size_t l = 0; l < layers; ++l) os << ",gap_L" << l;
  os << '\n';
  for (std::size_t i = 0; i < steps.size(); ++i) {
    os << steps[i];
    for (std::size_t l = 0; l < layers; ++l) os << ',' << gap[l][i];
    os << '\n';
  }
}

std::string UsageReport::to_text() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  for (std::size_t l = 0; l < layers; ++l) {
    os << "layer " << l << ":";
    for (std::size_t e = 0; e < experts; ++e) os << "  E" << e << "=" << mean_usage[l][e];
    os << "  | mLSTM share " << mean_mlstm[l] << "  sLSTM share " << mean_slstm[l] << '\n';
  }
  os << "final group gap (last 100 rows): " << final_gap(100) << '\n';
  return os.str();
}

double final_routing_gap(const std::filesystem::path& routing_csv, std::size_t last_rows) {
  const auto rows = read_csv(routing_csv);
  const auto& header = rows.front();
  const auto it = std::find(header.begin(), header.end(), "mean_gap");
  if (it == header.end()) throw InputError("routing CSV has no mean_gap column: " + routing_csv.string());
  const std::size_t col = static_cast<std::size_t>(it - header.begin());
  if (rows.size() < 2) throw InputError("routing CSV has no data rows");
  const std::size_t n = std::min(last_rows, rows.size() - 1);
  double s = 0.0;
  for (std::size_t i = rows.size() - n; i < rows.size(); ++i) {
    if (rows[i].size() != header.size()) throw InputError("malformed row in " + routing_csv.string());
    s += csv_number(rows[i][col], routing_csv);
  }
  return s / static_cast<double>(n);
}

}  // namespace moxe
