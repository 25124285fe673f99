#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stemfold {

namespace detail {
// Allocator whose value-less construct() leaves doubles uninitialized.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  using std::allocator<T>::allocator;
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};
[[noreturn]] void throw_not_matrix(std::size_t rank);
}  // namespace detail

// Dense row-major array of doubles. Shapes are lists of positive extents;
// a rank-0 tensor holds a single scalar.
class Tensor {
 public:
  Tensor() = default;
  using Storage = std::vector<double, detail::DefaultInitAllocator<double>>;

  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  // Contents are indeterminate; the caller must write every element.
  static Tensor uninitialized(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor scalar(double value) { return Tensor({1, 1}, {value}); }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);
  static Tensor row(std::vector<double> values);
  static Tensor column(std::vector<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  // Matrix view helpers: rank-2 tensors only (rank-1 is treated as a row).
  std::size_t rows() const {
    if (shape_.size() == 2) return shape_[0];
    if (shape_.size() == 1) return 1;
    detail::throw_not_matrix(shape_.size());
  }
  std::size_t cols() const {
    if (shape_.size() == 2) return shape_[1];
    if (shape_.size() == 1) return shape_[0];
    detail::throw_not_matrix(shape_.size());
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  std::span<double> row_span(std::size_t r) { return data().subspan(r * cols(), cols()); }
  std::span<const double> row_span(std::size_t r) const {
    return data().subspan(r * cols(), cols());
  }

  Tensor reshaped(std::vector<std::size_t> shape) const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  void fill(double value);

  std::string shape_string() const;

 private:
  struct NoInit {};
  Tensor(std::vector<std::size_t> shape, NoInit);

  std::vector<std::size_t> shape_;
  Storage data_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);

// Numerically stable softmax along `axis` of a rank-2 tensor (0 = columns, 1 = rows).
Tensor softmax(const Tensor& scores, std::size_t axis);

}  // namespace stemfold
