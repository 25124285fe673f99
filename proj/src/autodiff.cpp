#include "stemfold/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <mutex>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "stemfold/errors.hpp"
#include "stemfold/kernels.hpp"

namespace stemfold::ad {

const Tensor& Var::value() const { return tape_->value(*this); }

Tape::Tape() {
#if defined(M_MMAP_THRESHOLD)
  // Tapes allocate and free many large buffers; keeping them in the heap
  // avoids a page-fault storm from repeated mmap/munmap.
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
  });
#endif
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Tensor::zeros(n.value.shape());
  return n.grad;
}

Tensor& Tape::grad_acc(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward fn) {
  bool rg = false;
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw InvalidArgument("operands belong to different tapes");
    rg = rg || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, rg ? std::move(fn) : Backward{}, rg});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

void Tape::backward(const Var& loss) {
  if (loss.value().size() != 1) {
    throw InvalidArgument("backward() needs a scalar loss, got shape " +
                          loss.value().shape_string());
  }
  for (Node& n : nodes_) n.grad = Tensor();
  grad_acc(loss.id())[0] = 1.0;
  for (std::uint32_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.grad.size() != 0) {
      n.backward(*this, i);
      n.grad = Tensor();
    }
  }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + a.value().shape_string() +
                          " vs " + b.value().shape_string());
  }
}

Tensor transpose(const Tensor& m) {
  const std::size_t r = m.rows();
  const std::size_t c = m.cols();
  Tensor t = Tensor::uninitialized({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = m[i * c + j];
  }
  return t;
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor y = Tensor::uninitialized(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  const std::uint32_t ia = a.id();
  Var in[] = {a};
  return a.tape().record(std::move(y), in, [ia, deriv](Tape& t, std::uint32_t self) {
    const Tensor& x = t.value_of(ia);
    const Tensor& y = t.value_of(self);
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_acc(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw InvalidArgument("matmul: inner extents differ " + av.shape_string() + " x " +
                          bv.shape_string());
  }
  Tensor c({m, n});
  kernels::gemm_acc(m, n, k, av.data().data(), bv.data().data(), c.data().data());
  const std::uint32_t ia = a.id(), ib = b.id();
  Var in[] = {a, b};
  return a.tape().record(std::move(c), in, [ia, ib, m, n, k](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(ia)) {
      const Tensor bt = transpose(t.value_of(ib));
      kernels::gemm_acc(m, k, n, g.data().data(), bt.data().data(),
                        t.grad_acc(ia).data().data());
    }
    if (t.needs_grad(ib)) {
      const Tensor at = transpose(t.value_of(ia));
      kernels::gemm_acc(k, n, m, at.data().data(), g.data().data(),
                        t.grad_acc(ib).data().data());
    }
  });
}

Var transpose(const Var& a) {
  const std::size_t r = a.rows(), c = a.cols();
  const std::uint32_t ia = a.id();
  Var in[] = {a};
  return a.tape().record(transpose(a.value()), in, [ia, r, c](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_acc(ia);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  kernels::axpy(1.0, b.value().data(), y.data());
  const std::uint32_t ia = a.id(), ib = b.id();
  Var in[] = {a, b};
  return a.tape().record(std::move(y), in, [ia, ib](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(ia)) kernels::axpy(1.0, g.data(), t.grad_acc(ia).data());
    if (t.needs_grad(ib)) kernels::axpy(1.0, g.data(), t.grad_acc(ib).data());
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  kernels::axpy(-1.0, b.value().data(), y.data());
  const std::uint32_t ia = a.id(), ib = b.id();
  Var in[] = {a, b};
  return a.tape().record(std::move(y), in, [ia, ib](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(ia)) kernels::axpy(1.0, g.data(), t.grad_acc(ia).data());
    if (t.needs_grad(ib)) kernels::axpy(-1.0, g.data(), t.grad_acc(ib).data());
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y = Tensor::uninitialized(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
  const std::uint32_t ia = a.id(), ib = b.id();
  Var in[] = {a, b};
  return a.tape().record(std::move(y), in, [ia, ib](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(ia)) {
      const Tensor& z = t.value_of(ib);
      Tensor& ga = t.grad_acc(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * z[i];
    }
    if (t.needs_grad(ib)) {
      const Tensor& x = t.value_of(ia);
      Tensor& gb = t.grad_acc(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var add_row(const Var& a, const Var& bias) {
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  const std::size_t n = x.rows(), d = x.cols();
  if (b.rows() != 1 || b.cols() != d) {
    throw InvalidArgument("add_row: bias " + b.shape_string() + " for " + x.shape_string());
  }
  Tensor y = x;
  for (std::size_t r = 0; r < n; ++r) kernels::axpy(1.0, b.data(), y.row_span(r));
  const std::uint32_t ia = a.id(), ib = bias.id();
  Var in[] = {a, bias};
  return a.tape().record(std::move(y), in, [ia, ib, n](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(ia)) kernels::axpy(1.0, g.data(), t.grad_acc(ia).data());
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_acc(ib);
      for (std::size_t r = 0; r < n; ++r) kernels::axpy(1.0, g.row_span(r), gb.data());
    }
  });
}

Var mul_col(const Var& a, const Var& s) {
  const Tensor& x = a.value();
  const Tensor& sv = s.value();
  const std::size_t n = x.rows(), d = x.cols();
  if (sv.rows() != n || sv.cols() != 1) {
    throw InvalidArgument("mul_col: scale " + sv.shape_string() + " for " + x.shape_string());
  }
  Tensor y = Tensor::uninitialized({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) y[r * d + c] = x[r * d + c] * sv[r];
  }
  const std::uint32_t ia = a.id(), is = s.id();
  Var in[] = {a, s};
  return a.tape().record(std::move(y), in, [ia, is, n, d](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(ia)) {
      const Tensor& sv = t.value_of(is);
      Tensor& ga = t.grad_acc(ia);
      for (std::size_t r = 0; r < n; ++r) {
        kernels::axpy(sv[r], g.row_span(r), ga.row_span(r));
      }
    }
    if (t.needs_grad(is)) {
      const Tensor& x = t.value_of(ia);
      Tensor& gs = t.grad_acc(is);
      for (std::size_t r = 0; r < n; ++r) gs[r] += kernels::dot(g.row_span(r), x.row_span(r));
    }
    (void)d;
  });
}

Var row_dot(const Var& a, const Var& b) {
  require_same_shape(a, b, "row_dot");
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  const std::size_t n = x.rows();
  Tensor y({n, 1});
  for (std::size_t r = 0; r < n; ++r) y[r] = kernels::dot(x.row_span(r), z.row_span(r));
  const std::uint32_t ia = a.id(), ib = b.id();
  Var in[] = {a, b};
  return a.tape().record(std::move(y), in, [ia, ib, n](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(ia)) {
      const Tensor& z = t.value_of(ib);
      Tensor& ga = t.grad_acc(ia);
      for (std::size_t r = 0; r < n; ++r) kernels::axpy(g[r], z.row_span(r), ga.row_span(r));
    }
    if (t.needs_grad(ib)) {
      const Tensor& x = t.value_of(ia);
      Tensor& gb = t.grad_acc(ib);
      for (std::size_t r = 0; r < n; ++r) kernels::axpy(g[r], x.row_span(r), gb.row_span(r));
    }
  });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var softplus(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(const Var& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(const Var& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var slice_rows(const Var& a, std::size_t start, std::size_t count) {
  const Tensor& x = a.value();
  const std::size_t d = x.cols();
  if (count == 0 || start + count > x.rows()) {
    throw InvalidArgument("slice_rows out of range for " + x.shape_string());
  }
  std::vector<double> buf(x.data().begin() + start * d, x.data().begin() + (start + count) * d);
  const std::uint32_t ia = a.id();
  Var in[] = {a};
  return a.tape().record(Tensor({count, d}, std::move(buf)), in,
                         [ia, start, d](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad_of(self);
                           kernels::axpy(1.0, g.data(),
                                         t.grad_acc(ia).data().subspan(start * d, g.size()));
                         });
}

Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  const Tensor& x = a.value();
  const std::size_t n = x.rows(), d = x.cols();
  if (count == 0 || start + count > d) {
    throw InvalidArgument("slice_cols out of range for " + x.shape_string());
  }
  Tensor y = Tensor::uninitialized({n, count});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(x.data().begin() + r * d + start, count, y.data().begin() + r * count);
  }
  const std::uint32_t ia = a.id();
  Var in[] = {a};
  return a.tape().record(std::move(y), in, [ia, start, count, n, d](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_acc(ia);
    for (std::size_t r = 0; r < n; ++r) {
      kernels::axpy(1.0, g.row_span(r), ga.data().subspan(r * d + start, count));
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols of nothing");
  const std::size_t n = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    if (p.rows() != n) throw InvalidArgument("concat_cols: row counts differ");
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor y = Tensor::uninitialized({n, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    const std::size_t w = x.cols();
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(x.data().begin() + r * w, w, y.data().begin() + r * total + off);
    }
    off += w;
  }
  std::vector<std::uint32_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(
      std::move(y), parts, [ids, widths, n, total](Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad_of(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          const std::size_t w = widths[k];
          if (t.needs_grad(ids[k])) {
            Tensor& ga = t.grad_acc(ids[k]);
            for (std::size_t r = 0; r < n; ++r) {
              kernels::axpy(1.0, g.data().subspan(r * total + off, w), ga.row_span(r));
            }
          }
          off += w;
        }
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows of nothing");
  const std::size_t d = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> counts;
  for (const Var& p : parts) {
    if (p.cols() != d) throw InvalidArgument("concat_rows: column counts differ");
    counts.push_back(p.rows());
    total += p.rows();
  }
  std::vector<double> buf;
  buf.reserve(total * d);
  for (const Var& p : parts) buf.insert(buf.end(), p.value().data().begin(), p.value().data().end());
  std::vector<std::uint32_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(Tensor({total, d}, std::move(buf)), parts,
                                [ids, counts, d](Tape& t, std::uint32_t self) {
                                  const Tensor& g = t.grad_of(self);
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    const std::size_t len = counts[k] * d;
                                    if (t.needs_grad(ids[k])) {
                                      kernels::axpy(1.0, g.data().subspan(off, len),
                                                    t.grad_acc(ids[k]).data());
                                    }
                                    off += len;
                                  }
                                });
}

Var gather_rows(const Var& a, const Index& rows) {
  const Tensor& x = a.value();
  const std::size_t n = x.rows(), d = x.cols();
  if (rows.empty()) throw InvalidArgument("gather_rows with empty index");
  Tensor y = Tensor::uninitialized({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw InvalidArgument("gather_rows index out of range");
    std::copy_n(x.data().begin() + rows[i] * d, d, y.data().begin() + i * d);
  }
  const std::uint32_t ia = a.id();
  Var in[] = {a};
  return a.tape().record(std::move(y), in, [ia, rows](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_acc(ia);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      kernels::axpy(1.0, g.row_span(i), ga.row_span(rows[i]));
    }
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::uint32_t ia = a.id();
  Var in[] = {a};
  return a.tape().record(Tensor::scalar(s), in, [ia](Tape& t, std::uint32_t self) {
    const double g = t.grad_of(self)[0];
    for (double& v : t.grad_acc(ia).data()) v += g;
  });
}

Var segment_sum(const Var& a, const Index& segment, std::size_t n_segments) {
  const Tensor& x = a.value();
  const std::size_t n = x.rows(), d = x.cols();
  if (segment.size() != n) throw InvalidArgument("segment_sum: segment ids must match rows");
  if (n_segments == 0) throw InvalidArgument("segment_sum: zero segments");
  Tensor y({n_segments, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (segment[i] >= n_segments) throw InvalidArgument("segment_sum: id out of range");
    kernels::axpy(1.0, x.row_span(i), y.row_span(segment[i]));
  }
  const std::uint32_t ia = a.id();
  Var in[] = {a};
  return a.tape().record(std::move(y), in, [ia, segment](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_acc(ia);
    for (std::size_t i = 0; i < segment.size(); ++i) {
      kernels::axpy(1.0, g.row_span(segment[i]), ga.row_span(i));
    }
  });
}

Var segment_softmax(const Var& scores, const Index& segment, std::size_t n_segments) {
  const Tensor& s = scores.value();
  const std::size_t n = s.rows();
  if (s.cols() != 1) throw InvalidArgument("segment_softmax expects a column vector");
  if (segment.size() != n) throw InvalidArgument("segment_softmax: segment ids must match rows");
  std::vector<double> mx(n_segments, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    if (segment[i] >= n_segments) throw InvalidArgument("segment_softmax: id out of range");
    mx[segment[i]] = std::max(mx[segment[i]], s[i]);
  }
  std::vector<double> z(n_segments, 0.0);
  Tensor y({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::exp(s[i] - mx[segment[i]]);
    z[segment[i]] += y[i];
  }
  for (std::size_t i = 0; i < n; ++i) y[i] /= z[segment[i]];
  const std::uint32_t ia = scores.id();
  Var in[] = {scores};
  return scores.tape().record(
      std::move(y), in, [ia, segment, n_segments](Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad_of(self);
        const Tensor& y = t.value_of(self);
        std::vector<double> inner(n_segments, 0.0);
        for (std::size_t i = 0; i < segment.size(); ++i) inner[segment[i]] += g[i] * y[i];
        Tensor& ga = t.grad_acc(ia);
        for (std::size_t i = 0; i < segment.size(); ++i) {
          ga[i] += y[i] * (g[i] - inner[segment[i]]);
        }
      });
}

Var softmax_rows(const Var& a) {
  Tensor y = softmax(a.value(), 1);
  const std::size_t n = y.rows(), d = y.cols();
  const std::uint32_t ia = a.id();
  Var in[] = {a};
  return a.tape().record(std::move(y), in, [ia, n, d](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value_of(self);
    Tensor& ga = t.grad_acc(ia);
    for (std::size_t r = 0; r < n; ++r) {
      const double inner = kernels::dot(g.row_span(r), y.row_span(r));
      for (std::size_t c = 0; c < d; ++c) {
        ga[r * d + c] += y[r * d + c] * (g[r * d + c] - inner);
      }
    }
  });
}

namespace {

void check_index(const Index& idx, std::size_t bound, const char* op) {
  for (std::uint32_t i : idx) {
    if (i >= bound) throw InvalidArgument(std::string(op) + ": index out of range");
  }
}

}  // namespace

Var edge_message(const Var& p, const Index& src, const Tensor& dt, const Var& w, const Var& b,
                 const Tensor& pe, const Index& pe_row) {
  const Tensor& pv = p.value();
  const std::size_t d = pv.cols(), E = src.size();
  if (dt.size() != E || pe_row.size() != E || pe.cols() != d || w.value().size() != d ||
      b.value().size() != d) {
    throw InvalidArgument("edge_message: misaligned operands");
  }
  check_index(src, pv.rows(), "edge_message");
  check_index(pe_row, pe.rows(), "edge_message");
  Tensor y = Tensor::uninitialized({E, d});
  auto active = std::make_shared<std::vector<unsigned char>>(E * d);
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  for (std::size_t e = 0; e < E; ++e) {
    const double* pr = pv.data().data() + src[e] * d;
    const double* qr = pe.data().data() + pe_row[e] * d;
    for (std::size_t c = 0; c < d; ++c) {
      const double pre = pr[c] + dt[e] * wv[c] + bv[c];
      const bool on = pre > 0.0;
      (*active)[e * d + c] = on;
      y[e * d + c] = (on ? pre : 0.0) + qr[c];
    }
  }
  const std::uint32_t ip = p.id(), iw = w.id(), ib = b.id();
  Var in[] = {p, w, b};
  return p.tape().record(std::move(y), in, [ip, iw, ib, src, dt, active, d](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    const std::size_t E = src.size();
    std::vector<double> dpre(d);
    Tensor* gp = t.needs_grad(ip) ? &t.grad_acc(ip) : nullptr;
    Tensor* gw = t.needs_grad(iw) ? &t.grad_acc(iw) : nullptr;
    Tensor* gb = t.needs_grad(ib) ? &t.grad_acc(ib) : nullptr;
    for (std::size_t e = 0; e < E; ++e) {
      for (std::size_t c = 0; c < d; ++c) dpre[c] = (*active)[e * d + c] ? g[e * d + c] : 0.0;
      if (gp) kernels::axpy(1.0, dpre, gp->row_span(src[e]));
      if (gw) kernels::axpy(dt[e], dpre, gw->data());
      if (gb) kernels::axpy(1.0, dpre, gb->data());
    }
  });
}

Var attention_aggregate(const Var& m, const Var& u, const Index& dst, std::size_t n_out,
                        double scale) {
  const Tensor& mv = m.value();
  const Tensor& uv = u.value();
  const std::size_t E = dst.size(), d = mv.cols();
  if (mv.rows() != E || uv.cols() != d) throw InvalidArgument("attention_aggregate: misaligned operands");
  check_index(dst, std::min(n_out, uv.rows()), "attention_aggregate");
  auto alpha = std::make_shared<std::vector<double>>(E);
  std::vector<double> mx(n_out, -std::numeric_limits<double>::infinity()), z(n_out, 0.0);
  for (std::size_t e = 0; e < E; ++e) {
    (*alpha)[e] = scale * kernels::dot(mv.row_span(e), uv.row_span(dst[e]));
    mx[dst[e]] = std::max(mx[dst[e]], (*alpha)[e]);
  }
  for (std::size_t e = 0; e < E; ++e) {
    (*alpha)[e] = std::exp((*alpha)[e] - mx[dst[e]]);
    z[dst[e]] += (*alpha)[e];
  }
  Tensor y({n_out, d});
  for (std::size_t e = 0; e < E; ++e) {
    (*alpha)[e] /= z[dst[e]];
    kernels::axpy((*alpha)[e], mv.row_span(e), y.row_span(dst[e]));
  }
  const std::uint32_t im = m.id(), iu = u.id();
  Var in[] = {m, u};
  return m.tape().record(std::move(y), in, [im, iu, dst, alpha, n_out, scale](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& mv = t.value_of(im);
    const Tensor& uv = t.value_of(iu);
    const std::size_t E = dst.size();
    const auto& a = *alpha;
    // d alpha_e = m_e . g[dst_e]; d score_e = alpha_e (d alpha_e - sum_seg alpha d alpha)
    std::vector<double> da(E), inner(n_out, 0.0);
    for (std::size_t e = 0; e < E; ++e) {
      da[e] = kernels::dot(mv.row_span(e), g.row_span(dst[e]));
      inner[dst[e]] += a[e] * da[e];
    }
    Tensor* gm = t.needs_grad(im) ? &t.grad_acc(im) : nullptr;
    Tensor* gu = t.needs_grad(iu) ? &t.grad_acc(iu) : nullptr;
    for (std::size_t e = 0; e < E; ++e) {
      const double ds = a[e] * (da[e] - inner[dst[e]]) * scale;
      if (gm) {
        kernels::axpy(a[e], g.row_span(dst[e]), gm->row_span(e));
        kernels::axpy(ds, uv.row_span(dst[e]), gm->row_span(e));
      }
      if (gu) kernels::axpy(ds, mv.row_span(e), gu->row_span(dst[e]));
    }
  });
}

Var weighted_aggregate(const Var& m, const Tensor& weights, const Index& dst, std::size_t n_out) {
  const Tensor& mv = m.value();
  const std::size_t E = dst.size(), d = mv.cols();
  if (mv.rows() != E || weights.size() != E) throw InvalidArgument("weighted_aggregate: misaligned operands");
  check_index(dst, n_out, "weighted_aggregate");
  Tensor y({n_out, d});
  for (std::size_t e = 0; e < E; ++e) kernels::axpy(weights[e], mv.row_span(e), y.row_span(dst[e]));
  const std::uint32_t im = m.id();
  Var in[] = {m};
  return m.tape().record(std::move(y), in, [im, dst, weights](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gm = t.grad_acc(im);
    for (std::size_t e = 0; e < dst.size(); ++e) {
      kernels::axpy(weights[e], g.row_span(dst[e]), gm.row_span(e));
    }
  });
}

Var group_attention_pool(const Var& q, const Var& k, const std::vector<Index>& groups,
                         double scale) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  if (!qv.same_shape(kv)) throw InvalidArgument("group_attention_pool: Q and K shapes differ");
  const std::size_t n = qv.rows(), d = qv.cols();
  Tensor y({n, 1});
  // Row-softmaxed score matrix of every group, kept for the backward pass.
  auto probs = std::make_shared<std::vector<Tensor>>();
  probs->reserve(groups.size());
  for (const Index& grp : groups) {
    check_index(grp, n, "group_attention_pool");
    const std::size_t ng = grp.size();
    if (ng == 0) throw InvalidArgument("group_attention_pool: empty group");
    Tensor qg({ng, d}), kt({d, ng});
    for (std::size_t i = 0; i < ng; ++i) {
      std::copy_n(qv.data().data() + grp[i] * d, d, qg.data().data() + i * d);
      for (std::size_t c = 0; c < d; ++c) kt[c * ng + i] = kv[grp[i] * d + c];
    }
    Tensor s({ng, ng});
    kernels::gemm_acc(ng, ng, d, qg.data().data(), kt.data().data(), s.data().data());
    for (double& v : s.data()) v *= scale;
    Tensor a = softmax(s, 1);
    for (std::size_t kk = 0; kk < ng; ++kk) {
      double acc = 0.0;
      for (std::size_t qq = 0; qq < ng; ++qq) acc += a[qq * ng + kk];
      y[grp[kk]] = acc / static_cast<double>(ng);
    }
    probs->push_back(std::move(a));
  }
  const std::uint32_t iq = q.id(), ik = k.id();
  Var in[] = {q, k};
  return q.tape().record(std::move(y), in, [iq, ik, groups, probs, scale, d](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& qv = t.value_of(iq);
    const Tensor& kv = t.value_of(ik);
    Tensor* gq = t.needs_grad(iq) ? &t.grad_acc(iq) : nullptr;
    Tensor* gk = t.needs_grad(ik) ? &t.grad_acc(ik) : nullptr;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const Index& grp = groups[gi];
      const Tensor& a = (*probs)[gi];
      const std::size_t ng = grp.size();
      const double inv = 1.0 / static_cast<double>(ng);
      // dA[q][k] = g[k] / ng; dS = A * (dA - rowsum(A * dA)), pre-multiplied by scale.
      Tensor ds({ng, ng});
      for (std::size_t qq = 0; qq < ng; ++qq) {
        double inner = 0.0;
        for (std::size_t kk = 0; kk < ng; ++kk) inner += a[qq * ng + kk] * g[grp[kk]] * inv;
        for (std::size_t kk = 0; kk < ng; ++kk) {
          ds[qq * ng + kk] = a[qq * ng + kk] * (g[grp[kk]] * inv - inner) * scale;
        }
      }
      Tensor qg({ng, d}), kg({ng, d});
      for (std::size_t i = 0; i < ng; ++i) {
        std::copy_n(qv.data().data() + grp[i] * d, d, qg.data().data() + i * d);
        std::copy_n(kv.data().data() + grp[i] * d, d, kg.data().data() + i * d);
      }
      if (gq) {
        Tensor dq({ng, d});
        kernels::gemm_acc(ng, d, ng, ds.data().data(), kg.data().data(), dq.data().data());
        for (std::size_t i = 0; i < ng; ++i) kernels::axpy(1.0, dq.row_span(i), gq->row_span(grp[i]));
      }
      if (gk) {
        Tensor dst = transpose(ds);
        Tensor dk({ng, d});
        kernels::gemm_acc(ng, d, ng, dst.data().data(), qg.data().data(), dk.data().data());
        for (std::size_t i = 0; i < ng; ++i) kernels::axpy(1.0, dk.row_span(i), gk->row_span(grp[i]));
      }
    }
  });
}

}  // namespace stemfold::ad
