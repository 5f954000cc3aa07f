#pragma once

#include <cstddef>
#include <span>

// Dense row-major matrix kernels used by the tensor ops.
//
// Two implementations are kept side by side: `serial` is the plain reference
// loop nest, `parallel` distributes output rows across OpenMP threads. Each
// output element is accumulated by exactly one thread in the same k-order as
// the serial kernel, so both produce bit-identical results for any thread
// count. The unqualified entry points dispatch to `parallel` above a work
// threshold when OpenMP is available.
namespace moxe::kernels {

namespace serial {
// out[m×n] += a[m×k] · b[k×n]
void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                std::size_t m, std::size_t k, std::size_t n);
// out[m×k] += a[m×n] · b[k×n]ᵀ
void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t n, std::size_t k);
// out[k×n] += a[m×k]ᵀ · b[m×n]
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t k, std::size_t n);
}  // namespace serial

namespace parallel {
void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                std::size_t m, std::size_t k, std::size_t n);
void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t n, std::size_t k);
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t k, std::size_t n);
}  // namespace parallel

void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                std::size_t m, std::size_t k, std::size_t n);
void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t n, std::size_t k);
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t k, std::size_t n);

// Number of threads the parallel kernels may use (1 without OpenMP).
int max_threads();
bool openmp_enabled();

}  // namespace moxe::kernels
