#include "moxe/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "moxe/errors.hpp"

namespace moxe {

GradCheckResult finite_diff_check(const ScalarFn& f, std::span<Tensor> params, double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-3)) throw ContractError("finite_diff_check: epsilon must be in (0, 1e-3]");
  for (const auto& p : params) {
    if (p.tracked()) throw ContractError("finite_diff_check: parameters must be untracked");
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Tensor> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape.watch(p));
    Tensor root = f(leaves);
    tape.backward(root);
    for (const auto& leaf : leaves) {
      auto g = leaf.grad();
      analytic.emplace_back(leaf.numel(), 0.0);
      std::copy(g.begin(), g.end(), analytic.back().begin());
    }
  }

  GradCheckResult result;
  std::vector<Tensor> raw(params.begin(), params.end());
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto values = params[p].mutable_values();
    double diff_max = 0.0, scale_max = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + epsilon;
      const double up = f(raw).item();
      values[i] = saved - epsilon;
      const double down = f(raw).item();
      values[i] = saved;

      const double numeric = (up - down) / (2.0 * epsilon);
      const double g = analytic[p][i];
      const double rel = std::fabs(g - numeric) / std::max(std::fabs(g), 1e-8);
      ++result.coordinates;
      const double diff = std::fabs(g - numeric);
      diff_max = std::isfinite(diff) ? std::max(diff_max, diff) : INFINITY;
      scale_max = std::max({scale_max, std::fabs(g), std::fabs(numeric)});
      if (rel > result.max_rel_error || !std::isfinite(rel)) {
        result.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
        result.worst_param = p;
        result.worst_index = i;
        result.autodiff = g;
        result.numeric = numeric;
      }
    }
    const double tensor_rel = scale_max > 0.0 ? diff_max / scale_max : diff_max;
    if (!(tensor_rel <= result.max_tensor_rel_error)) result.max_tensor_rel_error = tensor_rel;
  }
  return result;
}

}  // namespace moxe
