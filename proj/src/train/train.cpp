#include "moxe/train.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "common/text.hpp"
#include "moxe/errors.hpp"

namespace moxe {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

using text::format_double;
using text::parse_bool;
using text::parse_double;
using text::parse_number;

constexpr char kMagic[8] = {'M', 'O', 'X', 'E', 'C', 'K', 'P', 'T'};
constexpr std::string_view kStepKey = "checkpoint_step";
constexpr std::string_view kOptStepKey = "optimizer_step";

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- binary helpers ----

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw InputError("truncated checkpoint: " + path.string());
  }
  return v;
}

std::string get_string(std::istream& is, std::size_t n, const std::filesystem::path& path) {
  if (n > (std::size_t{1} << 30)) throw InputError("corrupt checkpoint (string length): " + path.string());
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw InputError("truncated checkpoint: " + path.string());
  }
  return s;
}

void put_tensor(std::ostream& os, const std::string& name, const Shape& shape, std::span<const double> values) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
}

struct RawTensor {
  Shape shape;
  std::vector<double> values;
};

// ---- CSV helpers ----

// Keeps the header and the rows whose leading step is ≤ last_step.
void truncate_csv(const std::filesystem::path& path, std::uint64_t last_step) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      keep.push_back(line);
      header = false;
      continue;
    }
    const auto comma = line.find(',');
    std::uint64_t step = 0;
    const auto field = std::string_view(line).substr(0, comma);
    if (std::from_chars(field.data(), field.data() + field.size(), step).ec != std::errc()) continue;
    if (step <= last_step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

std::ofstream open_csv(const std::filesystem::path& path, const std::string& header, bool fresh) {
  const bool exists = std::filesystem::exists(path);
  std::ofstream os(path, fresh ? std::ios::trunc : std::ios::app);
  if (!os) throw InputError("cannot write " + path.string());
  if (fresh || !exists) os << header << '\n';
  return os;
}

std::string routing_header(const ModelConfig& c) {
  std::string h = "step";
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const auto L = std::to_string(l);
    h += ",p_mlstm_L" + L + ",p_slstm_L" + L + ",gap_L" + L;
  }
  return h + ",mean_gap";
}

Gradients collect_gradients(const ModelParams& watched) {
  Gradients g;
  for_each_parameter(watched, [&](const std::string&, const Tensor& t) {
    const auto grad = t.grad();
    if (grad.empty()) g.emplace_back(t.numel(), 0.0);
    else g.emplace_back(grad.begin(), grad.end());
  });
  return g;
}

}  // namespace

// ---- configuration -----------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (batch_size == 0) fail("batch_size must be positive");
  if (seq_len < 2) fail("seq_len must be at least 2");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("beta1 and beta2 must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!std::isfinite(grad_clip)) fail("grad_clip must be finite");
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) fail("split_fraction must lie in (0, 1)");
}

bool TrainConfig::set(std::string_view key, std::string_view value) {
  if (key == "batch_size") batch_size = parse_number<std::size_t>(key, value);
  else if (key == "seq_len") seq_len = parse_number<std::size_t>(key, value);
  else if (key == "steps") steps = parse_number<std::size_t>(key, value);
  else if (key == "learning_rate") learning_rate = parse_double(key, value);
  else if (key == "warmup_steps") warmup_steps = parse_number<std::size_t>(key, value);
  else if (key == "beta1") beta1 = parse_double(key, value);
  else if (key == "beta2") beta2 = parse_double(key, value);
  else if (key == "adam_eps") adam_eps = parse_double(key, value);
  else if (key == "grad_clip") grad_clip = parse_double(key, value);
  else if (key == "split_fraction") split_fraction = parse_double(key, value);
  else if (key == "data_seed") data_seed = parse_number<std::uint64_t>(key, value);
  else if (key == "eval_interval") eval_interval = parse_number<std::size_t>(key, value);
  else if (key == "eval_tokens") eval_tokens = parse_number<std::size_t>(key, value);
  else if (key == "checkpoint_interval") checkpoint_interval = parse_number<std::size_t>(key, value);
  else if (key == "log_throughput") log_throughput = parse_bool(key, value);
  else return false;
  return true;
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "batch_size=" << batch_size << '\n'
     << "seq_len=" << seq_len << '\n'
     << "steps=" << steps << '\n'
     << "learning_rate=" << format_double(learning_rate) << '\n'
     << "warmup_steps=" << warmup_steps << '\n'
     << "beta1=" << format_double(beta1) << '\n'
     << "beta2=" << format_double(beta2) << '\n'
     << "adam_eps=" << format_double(adam_eps) << '\n'
     << "grad_clip=" << format_double(grad_clip) << '\n'
     << "split_fraction=" << format_double(split_fraction) << '\n'
     << "data_seed=" << data_seed << '\n'
     << "eval_interval=" << eval_interval << '\n'
     << "eval_tokens=" << eval_tokens << '\n'
     << "checkpoint_interval=" << checkpoint_interval << '\n'
     << "log_throughput=" << (log_throughput ? "true" : "false") << '\n';
  return os.str();
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
}

std::string RunConfig::to_text() const { return model.to_text() + train.to_text(); }

RunConfig parse_run_config(std::string_view input) {
  RunConfig c;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= input.size()) {
    const auto nl = input.find('\n', pos);
    std::string_view line = input.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? input.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = text::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(line_no);
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected key=value");
    const auto key = text::trim(line.substr(0, eq));
    const auto value = text::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": missing key");
    if (!seen.emplace(key).second) throw ConfigError(where + ": duplicate key '" + std::string(key) + "'");
    if (!c.model.set(key, value) && !c.train.set(key, value)) {
      throw ConfigError(where + ": unknown key '" + std::string(key) + "'");
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

// ---- data --------------------------------------------------------------------------

std::vector<int> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read data file " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.empty()) throw InputError("data file is empty: " + path.string());
  std::vector<int> tokens(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) tokens[i] = static_cast<unsigned char>(raw[i]);
  return tokens;
}

Corpus make_corpus(std::vector<int> tokens, double split_fraction, std::uint64_t seed) {
  if (tokens.empty()) throw InputError("empty corpus");
  if (!(split_fraction > 0.0 && split_fraction <= 1.0)) throw ConfigError("split_fraction must lie in (0, 1]");
  for (int t : tokens) {
    if (t < 0 || t > 255) throw InputError("corpus token outside the byte range");
  }
  Corpus c;
  c.split = static_cast<std::size_t>(std::floor(split_fraction * static_cast<double>(tokens.size()) + 1e-9));
  c.split = std::min(c.split, tokens.size());
  c.tokens = std::move(tokens);
  c.seed = seed;
  return c;
}

Corpus load_corpus(const std::filesystem::path& path, double split_fraction, std::uint64_t seed) {
  return make_corpus(read_bytes(path), split_fraction, seed);
}

double unigram_entropy(std::span<const int> tokens) {
  if (tokens.empty()) throw InputError("unigram_entropy: empty stream");
  std::map<int, std::size_t> counts;
  for (int t : tokens) ++counts[t];
  double h = 0.0;
  const double n = static_cast<double>(tokens.size());
  for (const auto& [t, c] : counts) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

BatchSampler::BatchSampler(std::span<const int> stream, std::size_t batch_size, std::size_t seq_len,
                           std::uint64_t seed)
    : stream_(stream), batch_size_(batch_size), seq_len_(seq_len), seed_(seed) {
  if (stream.size() <= seq_len + 1) {
    throw InputError("training stream of " + std::to_string(stream.size()) + " bytes is too short for seq_len " +
                     std::to_string(seq_len));
  }
}

Batch BatchSampler::at(std::uint64_t step) const {
  std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> offset(0, stream_.size() - seq_len_ - 1);
  Batch b;
  for (std::size_t i = 0; i < batch_size_; ++i) {
    const std::size_t o = offset(rng);
    b.offsets.push_back(o);
    b.inputs.emplace_back(stream_.begin() + static_cast<std::ptrdiff_t>(o),
                          stream_.begin() + static_cast<std::ptrdiff_t>(o + seq_len_));
    b.targets.emplace_back(stream_.begin() + static_cast<std::ptrdiff_t>(o + 1),
                           stream_.begin() + static_cast<std::ptrdiff_t>(o + seq_len_ + 1));
  }
  return b;
}

// ---- optimizer -----------------------------------------------------------------------

OptimizerState make_optimizer_state(const ModelParams& params) {
  OptimizerState s;
  for_each_parameter(params, [&](const std::string&, const Tensor& t) {
    s.m.emplace_back(t.numel(), 0.0);
    s.v.emplace_back(t.numel(), 0.0);
  });
  return s;
}

double clip_by_global_norm(Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g) x *= s;
  }
  return norm;
}

void optimizer_step(ModelParams& params, Gradients& grads, OptimizerState& state, const AdamConfig& config,
                    double lr) {
  std::size_t i = 0;
  for_each_parameter(params, [&](const std::string& name, const Tensor& t) {
    if (i >= grads.size() || grads[i].size() != t.numel()) {
      throw DimensionError("optimizer_step: gradient shape mismatch at " + name);
    }
    for (double x : grads[i]) {
      if (!std::isfinite(x)) throw NumericError("non-finite gradient in " + name);
    }
    ++i;
  });
  if (i != grads.size() || state.m.size() != grads.size()) throw DimensionError("optimizer_step: parameter count");

  clip_by_global_norm(grads, config.clip);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  i = 0;
  for_each_parameter(params, [&](const std::string&, Tensor& p) {
    auto w = p.mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config.eps);
    }
    ++i;
  });
}

double scheduled_lr(const TrainConfig& config, std::uint64_t step) {
  if (config.warmup_steps == 0 || step >= config.warmup_steps) return config.learning_rate;
  return config.learning_rate * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
}

// ---- checkpoints ---------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot write checkpoint " + tmp);
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kCheckpointVersion);
    const std::string cfg = ck.config.to_text() + std::string(kStepKey) + "=" + std::to_string(ck.step) + "\n" +
                            std::string(kOptStepKey) + "=" + std::to_string(ck.optimizer.step) + "\n";
    put<std::uint64_t>(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    std::vector<std::pair<std::string, const Tensor*>> named;
    for_each_parameter(ck.params, [&](const std::string& n, const Tensor& t) { named.emplace_back(n, &t); });
    const bool with_opt = ck.optimizer.m.size() == named.size();
    put<std::uint64_t>(os, named.size() * (with_opt ? 3 : 1));
    for (const auto& [n, t] : named) put_tensor(os, n, t->shape(), t->values());
    if (with_opt) {
      for (std::size_t i = 0; i < named.size(); ++i)
        put_tensor(os, "adam.m." + named[i].first, named[i].second->shape(), ck.optimizer.m[i]);
      for (std::size_t i = 0; i < named.size(); ++i)
        put_tensor(os, "adam.v." + named[i].first, named[i].second->shape(), ck.optimizer.v[i]);
    }
    if (!os) throw InputError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot read checkpoint " + path.string());
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw InputError("not a checkpoint file: " + path.string());
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw InputError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  const std::string cfg = get_string(is, get<std::uint64_t>(is, path), path);

  // The run config plus two bookkeeping lines.
  Checkpoint ck;
  std::string run_text;
  std::istringstream lines(cfg);
  std::string line;
  std::uint64_t opt_step = 0;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    const std::string_view key = std::string_view(line).substr(0, eq);
    if (key == kStepKey) ck.step = parse_number<std::uint64_t>(key, std::string_view(line).substr(eq + 1));
    else if (key == kOptStepKey) opt_step = parse_number<std::uint64_t>(key, std::string_view(line).substr(eq + 1));
    else run_text += line + "\n";
  }
  try {
    ck.config = parse_run_config(run_text);
  } catch (const ConfigError& e) {
    throw InputError("checkpoint " + path.string() + " has an invalid config: " + e.what());
  }

  std::map<std::string, RawTensor> tensors;
  const auto count = get<std::uint64_t>(is, path);
  for (std::uint64_t r = 0; r < count; ++r) {
    const std::string name = get_string(is, get<std::uint32_t>(is, path), path);
    RawTensor t;
    const auto rank = get<std::uint32_t>(is, path);
    if (rank > 8) throw InputError("corrupt checkpoint (rank) in " + path.string());
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(get<std::uint64_t>(is, path));
    const std::size_t n = shape_numel(t.shape);
    if (n > (std::size_t{1} << 32)) throw InputError("corrupt checkpoint (size) in " + path.string());
    t.values.resize(n);
    if (n > 0 && !is.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
      throw InputError("truncated checkpoint: " + path.string());
    }
    tensors.emplace(name, std::move(t));
  }

  ck.params = init_model(ck.config.model);
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw InputError("checkpoint is missing tensor " + name);
    if (it->second.shape != shape) {
      throw InputError("checkpoint tensor " + name + " has shape " + shape_to_string(it->second.shape) +
                       ", expected " + shape_to_string(shape));
    }
    auto values = std::move(it->second.values);
    tensors.erase(it);
    return values;
  };
  std::vector<std::pair<std::string, Shape>> names;
  for_each_parameter(ck.params, [&](const std::string& n, Tensor& t) {
    t = Tensor(t.shape(), take(n, t.shape()));
    names.emplace_back(n, t.shape());
  });
  if (!tensors.empty()) {
    ck.optimizer.step = opt_step;
    for (const auto& [n, s] : names) ck.optimizer.m.push_back(take("adam.m." + n, s));
    for (const auto& [n, s] : names) ck.optimizer.v.push_back(take("adam.v." + n, s));
  } else {
    ck.optimizer = make_optimizer_state(ck.params);
  }
  if (!tensors.empty()) throw InputError("checkpoint has unexpected tensor " + tensors.begin()->first);
  return ck;
}

// ---- evaluation ------------------------------------------------------------------------

EvalResult evaluate(const ModelParams& params, const ModelConfig& config, std::span<const int> stream,
                    std::size_t context_len, std::size_t max_tokens) {
  if (context_len == 0) throw ConfigError("context length must be positive");
  if (max_tokens > 0 && stream.size() > max_tokens) stream = stream.first(max_tokens);
  if (stream.size() < 2) throw InputError("evaluation stream needs at least two bytes");
  for (int t : stream) {
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
      throw ConfigError("data contains token " + std::to_string(t) + " outside the model vocabulary of " +
                        std::to_string(config.vocab_size));
    }
  }
  const std::size_t positions = stream.size() - 1;
  const std::size_t windows = (positions + context_len - 1) / context_len;
  std::vector<double> sums(windows, 0.0);
  std::vector<int> failed(windows, 0);

#pragma omp parallel for schedule(dynamic)
  for (std::size_t w = 0; w < windows; ++w) {
    const std::size_t start = w * context_len;
    const std::size_t len = std::min(context_len, positions - start);
    try {
      const auto out = model_forward(params, config, stream.subspan(start, len));
      const auto targets = stream.subspan(start + 1, len);
      sums[w] = cross_entropy(out.logits, targets).item() * static_cast<double>(len);
    } catch (...) {
      failed[w] = 1;
    }
  }
  if (std::find(failed.begin(), failed.end(), 1) != failed.end()) throw NumericError("evaluation failed");

  double total = 0.0;
  for (double s : sums) total += s;
  EvalResult r;
  r.tokens = positions;
  r.ce = total / static_cast<double>(positions);
  if (!std::isfinite(r.ce)) throw NumericError("non-finite evaluation loss");
  r.perplexity = std::exp(r.ce);
  return r;
}

// ---- training loop -------------------------------------------------------------------

std::string metrics_header(const ModelConfig& config) {
  std::string h = "step,ce,l_d,l_group,l_z,l_aux,total,lr,tok_per_s";
  for (std::size_t l = 0; l < config.num_layers; ++l)
    for (std::size_t e = 0; e < config.num_experts; ++e)
      h += ",usage_L" + std::to_string(l) + "_E" + std::to_string(e);
  return h;
}

Trainer::Trainer(RunConfig config, Corpus corpus, std::filesystem::path out_dir)
    : Trainer(config, std::move(corpus), std::move(out_dir), init_model(config.model), {}, 0) {
  optimizer_ = make_optimizer_state(params_);
  open_logs(true);
}

Trainer::Trainer(RunConfig config, Corpus corpus, std::filesystem::path out_dir, ModelParams params,
                 OptimizerState opt, std::uint64_t step)
    : config_((config.validate(), std::move(config))),
      corpus_(std::move(corpus)),
      out_dir_(std::move(out_dir)),
      params_(std::move(params)),
      optimizer_(std::move(opt)),
      step_(step),
      sampler_(corpus_.train(), config_.train.batch_size, config_.train.seq_len,
               config_.train.data_seed) {
  for (int t : corpus_.tokens) {
    if (static_cast<std::size_t>(t) >= config_.model.vocab_size) {
      throw ConfigError("corpus token " + std::to_string(t) + " outside the model vocabulary");
    }
  }
  std::filesystem::create_directories(out_dir_);
  std::ofstream(out_dir_ / "config.txt", std::ios::trunc) << config_.to_text();
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint, const std::vector<int>& tokens,
                        std::filesystem::path out_dir) {
  Checkpoint ck = load_checkpoint(checkpoint);
  Corpus corpus = make_corpus(tokens, ck.config.train.split_fraction, ck.config.train.data_seed);
  Trainer t(ck.config, std::move(corpus), std::move(out_dir), std::move(ck.params), std::move(ck.optimizer), ck.step);
  for (const char* name : {"metrics.csv", "routing.csv", "eval.csv"}) truncate_csv(t.out_dir_ / name, ck.step);
  t.open_logs(false);
  return t;
}

void Trainer::open_logs(bool fresh) {
  metrics_ = open_csv(out_dir_ / "metrics.csv", metrics_header(config_.model), fresh);
  routing_ = open_csv(out_dir_ / "routing.csv", routing_header(config_.model), fresh);
  eval_ = open_csv(out_dir_ / "eval.csv", "step,val_ce,val_ppl,tokens", fresh);
}

void Trainer::save(const std::filesystem::path& path) const {
  save_checkpoint(path, Checkpoint{config_, params_, optimizer_, step_});
}

EvalResult Trainer::validate_now() const {
  return evaluate(params_, config_.model, corpus_.validation(), config_.train.seq_len, config_.train.eval_tokens);
}

void Trainer::log_eval(const EvalResult& r) {
  eval_ << step_ << ',' << fmt(r.ce) << ',' << fmt(r.perplexity) << ',' << r.tokens << '\n';
  eval_.flush();
}

StepRecord Trainer::step() {
  const auto& mc = config_.model;
  const auto& tc = config_.train;
  const std::uint64_t next = step_ + 1;
  const auto t0 = std::chrono::steady_clock::now();
  const Batch batch = sampler_.at(next);

  StepRecord rec;
  Gradients grads;
  try {
    Tape tape;
    ModelParams watched = params_;
    for_each_parameter(watched, [&](const std::string&, Tensor& t) { t = tape.watch(t); });
    const BatchOutput out = batch_forward(watched, mc, batch.inputs, batch.targets);
    const LossBundle loss = batch_loss(out, mc);
    tape.backward(loss.total);
    grads = collect_gradients(watched);

    rec.ce = loss.task_ce.item();
    rec.l_d = loss.difficulty.item();
    rec.l_group = loss.group.item();
    rec.l_z = loss.z.item();
    rec.l_aux = loss.aux.item();
    rec.total = loss.total.item();
    for (const auto& layer : out.layers) {
      rec.usage.insert(rec.usage.end(), layer.dispatch_fraction.begin(), layer.dispatch_fraction.end());
      const GroupMass g = layer.mean_group_mass();
      rec.p_mlstm.push_back(g.mlstm);
      rec.p_slstm.push_back(g.slstm);
    }
    rec.lr = scheduled_lr(tc, next);
    optimizer_step(params_, grads, optimizer_, AdamConfig{tc.beta1, tc.beta2, tc.adam_eps, tc.grad_clip}, rec.lr);
  } catch (const NumericError&) {
    save(checkpoint_path());
    throw;
  }
  step_ = next;
  rec.step = step_;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rec.tok_per_s = tc.log_throughput && secs > 0.0
                      ? static_cast<double>(tc.batch_size * tc.seq_len) / secs
                      : 0.0;

  metrics_ << rec.step;
  for (double v : {rec.ce, rec.l_d, rec.l_group, rec.l_z, rec.l_aux, rec.total, rec.lr, rec.tok_per_s})
    metrics_ << ',' << fmt(v);
  for (double u : rec.usage) metrics_ << ',' << fmt(u);
  metrics_ << '\n';

  routing_ << rec.step;
  double gap_sum = 0.0;
  for (std::size_t l = 0; l < rec.p_mlstm.size(); ++l) {
    const double gap = std::fabs(rec.p_mlstm[l] - rec.p_slstm[l]);
    gap_sum += gap;
    routing_ << ',' << fmt(rec.p_mlstm[l]) << ',' << fmt(rec.p_slstm[l]) << ',' << fmt(gap);
  }
  routing_ << ',' << fmt(gap_sum / static_cast<double>(rec.p_mlstm.size())) << '\n';
  return rec;
}

void Trainer::run(std::optional<std::uint64_t> last_step, const std::function<void(const StepRecord&)>& on_step) {
  const auto& tc = config_.train;
  const std::uint64_t until = last_step.value_or(tc.steps);
  while (step_ < until) {
    const StepRecord rec = step();
    if (on_step) on_step(rec);
    if (tc.eval_interval > 0 && step_ % tc.eval_interval == 0) log_eval(validate_now());
    if (tc.checkpoint_interval > 0 && step_ % tc.checkpoint_interval == 0) save(checkpoint_path());
  }
  metrics_.flush();
  routing_.flush();
  save(checkpoint_path());
}

}  // namespace moxe
