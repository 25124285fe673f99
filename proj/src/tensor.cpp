#include "stemfold/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "stemfold/errors.hpp"

namespace stemfold {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e == 0) throw InvalidArgument("tensor extents must be positive");
    n *= e;
  }
  return n;
}

namespace detail {
void throw_not_matrix(std::size_t rank) {
  throw InvalidArgument("matrix view of rank-" + std::to_string(rank) + " tensor");
}
}  // namespace detail

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, NoInit)
    : shape_(std::move(shape)), data_(shape_numel(shape_)) {}

Tensor Tensor::uninitialized(std::vector<std::size_t> shape) {
  return Tensor(std::move(shape), NoInit{});
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (data_.size() != shape_numel(shape_)) {
    throw InvalidArgument("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_string());
  }
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::column(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n, 1}, std::move(values));
}


double Tensor::item() const {
  if (data_.size() != 1) throw InvalidArgument("item() on tensor of shape " + shape_string());
  return data_[0];
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw InvalidArgument("cannot reshape " + shape_string() + " to " + std::to_string(shape_numel(shape)) +
                          " elements");
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << ']';
  return os.str();
}

Tensor softmax(const Tensor& scores, std::size_t axis) {
  if (scores.rank() != 2 && scores.rank() != 1) throw InvalidArgument("softmax expects rank 1 or 2");
  if (axis > 1) throw InvalidArgument("softmax axis must be 0 or 1");
  const std::size_t rows = scores.rows();
  const std::size_t cols = scores.cols();
  const std::size_t outer = axis == 1 ? rows : cols;
  const std::size_t inner = axis == 1 ? cols : rows;
  if (inner == 0) throw InvalidArgument("softmax over empty axis");
  for (double v : scores.data()) {
    if (!std::isfinite(v)) throw InvalidArgument("softmax requires finite scores");
  }
  Tensor out = scores;
  auto idx = [&](std::size_t o, std::size_t i) { return axis == 1 ? o * cols + i : i * cols + o; };
  for (std::size_t o = 0; o < outer; ++o) {
    double mx = scores[idx(o, 0)];
    for (std::size_t i = 1; i < inner; ++i) mx = std::max(mx, scores[idx(o, i)]);
    double z = 0.0;
    for (std::size_t i = 0; i < inner; ++i) {
      const double e = std::exp(scores[idx(o, i)] - mx);
      out[idx(o, i)] = e;
      z += e;
    }
    for (std::size_t i = 0; i < inner; ++i) out[idx(o, i)] /= z;
  }
  return out;
}

}  // namespace stemfold
