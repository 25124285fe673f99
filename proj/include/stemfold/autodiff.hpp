#pragma once

// Reverse-mode automatic differentiation over rank-2 tensors.
//
// A Tape owns every value produced during one forward pass together with the
// closures that propagate adjoints back to its inputs. Vars are lightweight
// handles into a tape. Nodes whose inputs are all constants record no
// closure, so constant sub-expressions cost nothing on the backward pass.
// A tape must not be shared between threads.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "stemfold/tensor.hpp"

namespace stemfold::ad {

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t self)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  const Tensor& value(const Var& v) const { return nodes_[v.id()].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  // Gradient of the last backward() target w.r.t. v; zeros if v did not influence it.
  Tensor grad(const Var& v) const;

  // Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be 1x1. Adjoints of
  // intermediate nodes are released once consumed; leaves keep theirs.
  void backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }

  // Op-implementer interface.
  Var record(Tensor value, std::span<const Var> inputs, Backward fn);
  bool needs_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  const Tensor& value_of(std::uint32_t id) const { return nodes_[id].value; }
  const Tensor& grad_of(std::uint32_t id) const { return nodes_[id].grad; }
  // Adjoint accumulator for an input; allocated as zeros on first use.
  Tensor& grad_acc(std::uint32_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

using Index = std::vector<std::uint32_t>;

// Linear algebra and elementwise arithmetic.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// a (n x d) + bias (1 x d), broadcast over rows.
Var add_row(const Var& a, const Var& bias);
// a (n x d) scaled row-wise by s (n x 1).
Var mul_col(const Var& a, const Var& s);
// Row-wise inner product of two n x d operands -> n x 1.
Var row_dot(const Var& a, const Var& b);

// Nonlinearities.
Var relu(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);

// Shape manipulation.
Var slice_rows(const Var& a, std::size_t start, std::size_t count);
Var slice_cols(const Var& a, std::size_t start, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var gather_rows(const Var& a, const Index& rows);

// Reductions.
Var sum(const Var& a);
// out[segment[i]] += a[i]; output has n_segments rows.
Var segment_sum(const Var& a, const Index& segment, std::size_t n_segments);
// Softmax of column vector `scores` within each segment (max-shifted).
Var segment_softmax(const Var& scores, const Index& segment, std::size_t n_segments);
// Row-wise softmax of a matrix.
Var softmax_rows(const Var& a);

// Fused graph kernels. Each equals a composition of the ops above but keeps
// only one edge-sized intermediate alive.

// relu(p[src[e]] + dt[e] * w + b) + pe[pe_row[e]]; p is n x d, w and b are
// 1 x d, dt (E x 1) and the pe table are constants.
Var edge_message(const Var& p, const Index& src, const Tensor& dt, const Var& w, const Var& b,
                 const Tensor& pe, const Index& pe_row);
// alpha = segment_softmax(scale * row_dot(m, u[dst]), dst); out[r] = sum_{dst[e]=r} alpha_e m_e.
Var attention_aggregate(const Var& m, const Var& u, const Index& dst, std::size_t n_out,
                        double scale);
// out[r] = sum_{dst[e]=r} weights[e] * m_e with constant weights (E x 1).
Var weighted_aggregate(const Var& m, const Tensor& weights, const Index& dst, std::size_t n_out);
// For every group of row indices, A = softmax_rows(scale * Q_g K_g^T); returns an
// n x 1 column whose entry for row k of group g is the mean over queries of A[:, k].
// Rows outside every group are 0.
Var group_attention_pool(const Var& q, const Var& k, const std::vector<Index>& groups,
                         double scale);

}  // namespace stemfold::ad
