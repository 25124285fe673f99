#pragma once

// Dense double-precision inner loops. Every kernel has a portable scalar
// reference and an AVX2/FMA variant; the variant is chosen once at startup
// from CPUID and can be pinned with STEMFOLD_ISA=scalar.

#include <cstddef>
#include <span>
#include <string_view>

namespace stemfold::kernels {

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);
bool isa_supported(Isa isa);

// Currently dispatched implementation.
Isa active_isa();
// Overrides dispatch (tests and benchmarks). Throws InvalidArgument if unsupported.
void set_isa(Isa isa);

// C[m x n] += A[m x k] * B[k x n]; all row-major and densely packed.
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
              double* c);
double dot(std::span<const double> x, std::span<const double> y);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

namespace scalar {
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
              double* c);
double dot(std::span<const double> x, std::span<const double> y);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
}  // namespace scalar

namespace avx2 {
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
              double* c);
double dot(std::span<const double> x, std::span<const double> y);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
}  // namespace avx2

}  // namespace stemfold::kernels
