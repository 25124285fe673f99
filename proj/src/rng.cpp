#include "stemfold/rng.hpp"

#include <algorithm>
#include <numeric>

#include "stemfold/errors.hpp"

namespace stemfold {

std::vector<std::size_t> Rng::choose(std::size_t n, std::size_t k) {
  if (k > n) throw InvalidArgument("cannot choose " + std::to_string(k) + " of " +
                                   std::to_string(n));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + uniform_index(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace stemfold
