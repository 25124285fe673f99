#include <atomic>
#include <cstdlib>
#include <cstring>

#include "stemfold/errors.hpp"
#include "stemfold/kernels.hpp"

namespace stemfold::kernels {
namespace {

bool cpu_has_avx2_fma() {
#if defined(STEMFOLD_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa detect() {
  if (const char* env = std::getenv("STEMFOLD_ISA"); env != nullptr) {
    if (std::strcmp(env, "scalar") == 0) return Isa::kScalar;
  }
  return cpu_has_avx2_fma() ? Isa::kAvx2 : Isa::kScalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::kAvx2 ? "avx2" : "scalar"; }

bool isa_supported(Isa isa) { return isa == Isa::kScalar || cpu_has_avx2_fma(); }

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw InvalidArgument("instruction set " + std::string(isa_name(isa)) +
                          " is not supported on this CPU");
  }
  current().store(isa, std::memory_order_relaxed);
}

void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
              double* c) {
  if (m == 0 || n == 0 || k == 0) return;
  if (active_isa() == Isa::kAvx2) {
    avx2::gemm_acc(m, n, k, a, b, c);
  } else {
    scalar::gemm_acc(m, n, k, a, b, c);
  }
}

double dot(std::span<const double> x, std::span<const double> y) {
  return active_isa() == Isa::kAvx2 ? avx2::dot(x, y) : scalar::dot(x, y);
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (active_isa() == Isa::kAvx2) {
    avx2::axpy(alpha, x, y);
  } else {
    scalar::axpy(alpha, x, y);
  }
}

}  // namespace stemfold::kernels
