#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "moxe/tensor.hpp"

namespace moxe {

struct GradCheckResult {
  double max_rel_error = 0.0;
  // Per tensor: max |g − fd| / max(|g|, |fd|) over that tensor's coordinates,
  // then the max over tensors. Insensitive to roundoff in near-zero entries.
  double max_tensor_rel_error = 0.0;
  std::size_t coordinates = 0;
  // Location and values of the worst coordinate.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double autodiff = 0.0;
  double numeric = 0.0;
};

// Scalar function of the given parameters. It is called once with tracked
// leaves and then repeatedly with the raw (untracked) parameters.
using ScalarFn = std::function<Tensor(std::span<const Tensor> params)>;

// Compares the autodiff gradient of `f` with central differences
// (f(θ+εe) − f(θ−εe)) / 2ε coordinate by coordinate. The relative error of a
// coordinate is |g − fd| / max(|g|, 1e-8). Parameters are restored on exit.
GradCheckResult finite_diff_check(const ScalarFn& f, std::span<Tensor> params, double epsilon = 1e-6);

}  // namespace moxe
