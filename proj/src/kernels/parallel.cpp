#include "moxe/kernels.hpp"

#include <cstdint>

#ifdef MOXE_HAVE_OPENMP
#include <omp.h>
#endif

namespace moxe::kernels {

namespace {
// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1u << 16;

using Index = std::int64_t;
}  // namespace

namespace parallel {

void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                std::size_t m, std::size_t k, std::size_t n) {
  const Index rows = static_cast<Index>(m);
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < rows; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t n, std::size_t k) {
  const Index rows = static_cast<Index>(m);
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < rows; ++i) {
    const double* arow = a.data() + i * n;
    for (std::size_t j = 0; j < k; ++j) {
      const double* brow = b.data() + j * n;
      double acc = 0.0;
      for (std::size_t p = 0; p < n; ++p) acc += arow[p] * brow[p];
      out[i * k + j] += acc;
    }
  }
}

void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t k, std::size_t n) {
  const Index cols = static_cast<Index>(k);
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < cols; ++p) {
    double* row = out.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

}  // namespace parallel

namespace {
bool use_parallel(std::size_t work) { return openmp_enabled() && max_threads() > 1 && work >= kParallelWork; }
}  // namespace

void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                std::size_t m, std::size_t k, std::size_t n) {
  if (use_parallel(m * k * n)) {
    parallel::matmul_acc(a, b, out, m, k, n);
  } else {
    serial::matmul_acc(a, b, out, m, k, n);
  }
}

void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t n, std::size_t k) {
  if (use_parallel(m * k * n)) {
    parallel::matmul_nt_acc(a, b, out, m, n, k);
  } else {
    serial::matmul_nt_acc(a, b, out, m, n, k);
  }
}

void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t k, std::size_t n) {
  if (use_parallel(m * k * n)) {
    parallel::matmul_tn_acc(a, b, out, m, k, n);
  } else {
    serial::matmul_tn_acc(a, b, out, m, k, n);
  }
}

int max_threads() {
#ifdef MOXE_HAVE_OPENMP
  return omp_in_parallel() ? 1 : omp_get_max_threads();
#else
  return 1;
#endif
}

bool openmp_enabled() {
#ifdef MOXE_HAVE_OPENMP
  return true;
#else
  return false;
#endif
}

}  // namespace moxe::kernels
