#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "stemfold/errors.hpp"
#include "stemfold/kernels.hpp"

using namespace stemfold;
namespace k = stemfold::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(gen);
  return v;
}

// Naive triple loop, independent of both kernel variants.
std::vector<double> reference_gemm(std::size_t m, std::size_t n, std::size_t kk,
                                   const std::vector<double>& a, const std::vector<double>& b,
                                   std::vector<double> c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      long double s = 0;
      for (std::size_t p = 0; p < kk; ++p) s += static_cast<long double>(a[i * kk + p]) * b[p * n + j];
      c[i * n + j] += static_cast<double>(s);
    }
  }
  return c;
}

double max_rel_diff(const std::vector<double>& x, const std::vector<double>& y) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    worst = std::max(worst, std::abs(x[i] - y[i]) / std::max(1.0, std::abs(y[i])));
  }
  return worst;
}

struct IsaGuard {
  k::Isa saved = k::active_isa();
  ~IsaGuard() { k::set_isa(saved); }
};

}  // namespace

TEST_CASE("scalar isa is always available") {
  CHECK(k::isa_supported(k::Isa::kScalar));
  CHECK(k::isa_name(k::Isa::kScalar) == "scalar");
  CHECK(k::isa_name(k::Isa::kAvx2) == "avx2");
}

TEST_CASE("scalar gemm matches a naive reference") {
  std::mt19937_64 gen(7);
  for (std::size_t m : {1u, 3u, 8u, 13u}) {
    for (std::size_t n : {1u, 4u, 7u, 33u}) {
      for (std::size_t kk : {1u, 5u, 16u, 65u}) {
        const auto a = random_vec(m * kk, gen), b = random_vec(kk * n, gen), c = random_vec(m * n, gen);
        auto got = c;
        k::scalar::gemm_acc(m, n, kk, a.data(), b.data(), got.data());
        CHECK(max_rel_diff(got, reference_gemm(m, n, kk, a, b, c)) < 1e-13);
      }
    }
  }
}

TEST_CASE("avx2 kernels agree with the scalar reference") {
  if (!k::isa_supported(k::Isa::kAvx2)) {
    MESSAGE("AVX2 not supported on this CPU; skipping equivalence");
    return;
  }
  std::mt19937_64 gen(11);
  SUBCASE("gemm over tails and blocks") {
    for (std::size_t m : {1u, 2u, 3u, 4u, 5u, 9u, 31u, 64u}) {
      for (std::size_t n : {1u, 3u, 4u, 5u, 8u, 12u, 17u, 64u, 130u}) {
        for (std::size_t kk : {1u, 2u, 7u, 64u, 129u}) {
          const auto a = random_vec(m * kk, gen), b = random_vec(kk * n, gen), c = random_vec(m * n, gen);
          auto s = c, v = c;
          k::scalar::gemm_acc(m, n, kk, a.data(), b.data(), s.data());
          k::avx2::gemm_acc(m, n, kk, a.data(), b.data(), v.data());
          CHECK(max_rel_diff(v, s) < 1e-12);
        }
      }
    }
  }
  SUBCASE("dot and axpy") {
    for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 8u, 15u, 16u, 17u, 100u, 1001u}) {
      const auto x = random_vec(n, gen), y = random_vec(n, gen);
      const double s = k::scalar::dot(x, y), v = k::avx2::dot(x, y);
      CHECK(std::abs(s - v) <= 1e-12 * std::max(1.0, std::abs(s)));
      auto ys = y, yv = y;
      k::scalar::axpy(0.37, x, ys);
      k::avx2::axpy(0.37, x, yv);
      CHECK(max_rel_diff(yv, ys) < 1e-15);
    }
  }
}

TEST_CASE("dispatch follows set_isa") {
  IsaGuard guard;
  std::mt19937_64 gen(3);
  const std::size_t m = 5, n = 9, kk = 6;
  const auto a = random_vec(m * kk, gen), b = random_vec(kk * n, gen);
  std::vector<double> want(m * n, 0.0), got(m * n, 0.0);
  k::set_isa(k::Isa::kScalar);
  CHECK(k::active_isa() == k::Isa::kScalar);
  k::scalar::gemm_acc(m, n, kk, a.data(), b.data(), want.data());
  k::gemm_acc(m, n, kk, a.data(), b.data(), got.data());
  CHECK(got == want);
  if (k::isa_supported(k::Isa::kAvx2)) {
    k::set_isa(k::Isa::kAvx2);
    std::vector<double> want2(m * n, 0.0), got2(m * n, 0.0);
    k::avx2::gemm_acc(m, n, kk, a.data(), b.data(), want2.data());
    k::gemm_acc(m, n, kk, a.data(), b.data(), got2.data());
    CHECK(got2 == want2);
  } else {
    CHECK_THROWS_AS(k::set_isa(k::Isa::kAvx2), InvalidArgument);
  }
}
