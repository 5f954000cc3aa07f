#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "moxe/model.hpp"

namespace moxe {

// One suite, one tolerance: pass ⇔ max_deviation ≤ tolerance.
struct VerificationReport {
  struct Case {
    std::string name;
    double deviation = 0.0;
    std::string detail;
  };

  std::string suite;
  double tolerance = 0.0;
  std::vector<Case> cases;
  double max_deviation = 0.0;
  bool pass = true;

  VerificationReport(std::string suite_name, double tol) : suite(std::move(suite_name)), tolerance(tol) {}
  void add(std::string name, double deviation, std::string detail = {});
  std::size_t case_count() const { return cases.size(); }
  // Summary line, then one line per failing case (all cases if verbose).
  std::string to_text(bool verbose = false) const;
};

// (a) p_m/p_s from the routing path equals exp(2γd)·correction for random
// (z̃, γ ∈ [0,4], d ∈ [0,1]); (b) with group-balanced logits it equals exp(2γd).
VerificationReport verify_ratio_theorem(std::size_t trials = 1000, std::uint64_t seed = 0);

// Autodiff against central differences for each cell step, the router, each
// auxiliary loss, and the total loss of a tiny model; plus a coverage case
// that fails if any model parameter never receives a gradient.
VerificationReport verify_gradients(std::uint64_t seed = 0);

// Expert evaluations per token and layer (= k), reported compute ratio (= k/E),
// constant decoder state, and per-position decode time (CV ≤ 0.2).
std::vector<VerificationReport> verify_inference_cost(const ModelConfig& config, std::size_t positions = 512,
                                                      std::size_t repeats = 5);

// Coefficient of variation of the per-position decode time: each of
// `positions` steps is timed over `repeats` fresh decoders and the minimum kept.
double decode_time_cv(const ModelParams& params, const ModelConfig& config, std::size_t positions,
                      std::size_t repeats);

// ---- expert usage ----------------------------------------------------------------------

struct UsageReport {
  std::size_t layers = 0, experts = 0;
  std::vector<std::uint64_t> steps;
  std::vector<std::vector<double>> mean_usage;  // [layer][expert], over all rows
  std::vector<double> mean_mlstm, mean_slstm;   // [layer], group shares of the usage
  std::vector<std::vector<double>> gap;         // [layer][row], |m − s| of the normalized usage

  double final_gap(std::size_t last_rows) const;  // mean over layers and the last rows
  void write_csv(const std::filesystem::path& path) const;
  std::string to_text() const;
};

// Reads the usage_L*_E* columns of a metrics CSV. Group shares are the
// usage summed per group and normalized by the layer total; groups default to
// the half split. InputError on a malformed file.
UsageReport expert_usage_report(const std::filesystem::path& metrics_csv,
                                std::vector<ExpertGroup> groups = {});

// Mean of the routing.csv mean_gap column (|p_m − p_s| of router
// probabilities, averaged over layers) over the last `last_rows` rows.
double final_routing_gap(const std::filesystem::path& routing_csv, std::size_t last_rows);

}  // namespace moxe
