#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moxe/model.hpp"

namespace moxe {

// ---- configuration -----------------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t seq_len = 64;
  std::size_t steps = 2000;
  double learning_rate = 3e-4;
  std::size_t warmup_steps = 100;  // linear warmup, then constant
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global norm; ≤ 0 disables
  double split_fraction = 0.9;
  std::uint64_t data_seed = 0;
  std::size_t eval_interval = 200;  // 0 disables periodic validation
  std::size_t eval_tokens = 8192;   // validation prefix used during training; 0 = all
  std::size_t checkpoint_interval = 500;  // 0 = only at the end
  bool log_throughput = true;  // false writes tok_per_s = 0 for reproducible CSVs

  void validate() const;
  bool set(std::string_view key, std::string_view value);
  std::string to_text() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  void validate() const;
  std::string to_text() const;
};

// Flat key=value lines; '#' starts a comment. Unknown or repeated keys and
// malformed lines are ConfigErrors. Unset keys keep their defaults.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

// ---- data --------------------------------------------------------------------------

// Byte stream with a contiguous split: the first ⌊fraction·n⌋ bytes train, the
// rest validate.
struct Corpus {
  std::vector<int> tokens;
  std::size_t split = 0;
  std::uint64_t seed = 0;

  std::span<const int> train() const { return std::span(tokens).first(split); }
  std::span<const int> validation() const { return std::span(tokens).subspan(split); }
};

std::vector<int> read_bytes(const std::filesystem::path& path);  // InputError if unreadable or empty
Corpus make_corpus(std::vector<int> tokens, double split_fraction, std::uint64_t seed);
Corpus load_corpus(const std::filesystem::path& path, double split_fraction, std::uint64_t seed);
// Entropy of the byte histogram, in nats.
double unigram_entropy(std::span<const int> tokens);

struct Batch {
  std::vector<std::vector<int>> inputs;   // [B][S]
  std::vector<std::vector<int>> targets;  // inputs shifted by one
  std::vector<std::size_t> offsets;
};

// Windows drawn uniformly from the stream. Batch `step` depends only on
// (seed, step), so a resumed run sees the same data.
class BatchSampler {
 public:
  BatchSampler(std::span<const int> stream, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed);
  Batch at(std::uint64_t step) const;

 private:
  std::span<const int> stream_;
  std::size_t batch_size_, seq_len_;
  std::uint64_t seed_;
};

// ---- optimizer -----------------------------------------------------------------------

using Gradients = std::vector<std::vector<double>>;  // one buffer per parameter, visit order

struct OptimizerState {
  Gradients m, v;
  std::uint64_t step = 0;
};

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.95, eps = 1e-8, clip = 1.0;
};

OptimizerState make_optimizer_state(const ModelParams& params);
// Scales all buffers so the global L2 norm is at most max_norm; returns the
// norm before clipping. max_norm ≤ 0 leaves the gradients untouched.
double clip_by_global_norm(Gradients& grads, double max_norm);
// Clips, then applies one bias-corrected adaptive-moment update in place.
// NumericError names the first parameter with a non-finite gradient.
void optimizer_step(ModelParams& params, Gradients& grads, OptimizerState& state, const AdamConfig& config,
                    double lr);
double scheduled_lr(const TrainConfig& config, std::uint64_t step);  // step counts from 1

// ---- checkpoints ---------------------------------------------------------------------

struct Checkpoint {
  RunConfig config;
  ModelParams params;
  OptimizerState optimizer;
  std::uint64_t step = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Written to a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
// InputError on a malformed file, unknown version, or tensor mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- evaluation ------------------------------------------------------------------------

struct EvalResult {
  double ce = 0.0;
  double perplexity = 0.0;
  std::size_t tokens = 0;  // predicted positions
};

// Mean next-token CE over consecutive windows of context_len + 1 bytes (the
// last may be shorter). max_tokens > 0 truncates the stream. Windows run in
// parallel; the reduction order is fixed.
EvalResult evaluate(const ModelParams& params, const ModelConfig& config, std::span<const int> stream,
                    std::size_t context_len, std::size_t max_tokens = 0);

// ---- training loop -------------------------------------------------------------------

struct StepRecord {
  std::uint64_t step = 0;
  double ce = 0.0, l_d = 0.0, l_group = 0.0, l_z = 0.0, l_aux = 0.0, total = 0.0;
  double lr = 0.0;
  double tok_per_s = 0.0;
  std::vector<double> usage;     // [L×E] dispatch fractions f_i
  std::vector<double> p_mlstm;   // [L] batch-mean group masses
  std::vector<double> p_slstm;
};

std::string metrics_header(const ModelConfig& config);

// Owns the parameters, optimizer state and the run directory:
//   config.txt, metrics.csv, routing.csv, eval.csv, checkpoint.bin
class Trainer {
 public:
  // Fresh run; any existing CSVs in out_dir are replaced.
  Trainer(RunConfig config, Corpus corpus, std::filesystem::path out_dir);
  // Continues from a checkpoint. CSV rows past the checkpoint step are dropped
  // so the logs read as one uninterrupted run.
  static Trainer resume(const std::filesystem::path& checkpoint, const std::vector<int>& tokens,
                        std::filesystem::path out_dir);

  // One optimization step; logs it. On a non-finite loss or gradient the
  // current (last good) state is checkpointed and NumericError propagates.
  StepRecord step();
  // Steps until `last_step` (default: the configured total), with periodic
  // validation and checkpoints, then a final checkpoint.
  void run(std::optional<std::uint64_t> last_step = std::nullopt,
           const std::function<void(const StepRecord&)>& on_step = {});

  std::uint64_t current_step() const { return step_; }
  const ModelParams& params() const { return params_; }
  const RunConfig& config() const { return config_; }
  const Corpus& corpus() const { return corpus_; }
  const std::filesystem::path& out_dir() const { return out_dir_; }
  EvalResult validate_now() const;
  void save(const std::filesystem::path& path) const;
  std::filesystem::path checkpoint_path() const { return out_dir_ / "checkpoint.bin"; }

 private:
  Trainer(RunConfig config, Corpus corpus, std::filesystem::path out_dir, ModelParams params, OptimizerState opt,
          std::uint64_t step);
  void open_logs(bool fresh);
  void log_eval(const EvalResult& r);

  RunConfig config_;
  Corpus corpus_;
  std::filesystem::path out_dir_;
  ModelParams params_;
  OptimizerState optimizer_;
  std::uint64_t step_ = 0;
  BatchSampler sampler_;
  std::ofstream metrics_, routing_, eval_;
};

}  // namespace moxe
