#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "cstp/autodiff.hpp"
#include "cstp/tensor.hpp"

namespace cstp::ad {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

/// Number of leading repetitions when `suffix` broadcasts over `full`.
inline std::size_t suffix_outer(const char* op, const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size() ||
      !std::equal(suffix.rbegin(), suffix.rend(), full.rbegin())) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(suffix) + " over " +
                     to_string(full));
  }
  return numel(full) / numel(suffix);
}

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

inline void accumulate(Node& target, const Tensor& g) {
  if (!target.requires_grad) return;
  Tensor& buf = target.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return record(std::move(out), {a}, [df](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * df(p.value[i], self.value[i]);
    }
  });
}

inline Tensor permute_tensor(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[perm[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) stride[i] = in_strides[perm[i]];
  Tensor out(out_shape);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < out.size(); ++o) {
    out[o] = x[src];
    for (std::size_t ax = r; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        src += stride[ax];
        break;
      }
      src -= stride[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return record(std::move(out), {a, b}, [](Node& self) {
    detail::accumulate(detail::parent(self, 0), self.grad);
    detail::accumulate(detail::parent(self, 1), self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return record(std::move(out), {a, b}, [](Node& self) {
    detail::accumulate(detail::parent(self, 0), self.grad);
    Node& pb = detail::parent(self, 1);
    if (!pb.requires_grad) return;
    Tensor& g = pb.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return record(std::move(out), {a, b}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

/// a + b where b's shape is a trailing suffix of a's shape.
inline Var add_bcast(const Var& a, const Var& b) {
  const std::size_t outer = detail::suffix_outer("add_bcast", a.shape(), b.shape());
  const std::size_t inner = b.size();
  Tensor out = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += b.value()[i];
  return record(std::move(out), {a, b}, [outer, inner](Node& self) {
    detail::accumulate(detail::parent(self, 0), self.grad);
    Node& pb = detail::parent(self, 1);
    if (!pb.requires_grad) return;
    Tensor& g = pb.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
  });
}

/// a * b where b's shape is a trailing suffix of a's shape.
inline Var mul_bcast(const Var& a, const Var& b) {
  const std::size_t outer = detail::suffix_outer("mul_bcast", a.shape(), b.shape());
  const std::size_t inner = b.size();
  Tensor out = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] *= b.value()[i];
  return record(std::move(out), {a, b}, [outer, inner](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i)
          g[o * inner + i] += self.grad[o * inner + i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i)
          g[i] += self.grad[o * inner + i] * pa.value[o * inner + i];
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= c;
  return record(std::move(out), {a}, [c](Node& self) {
    Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

inline Var add_scalar(const Var& a, double c) {
  Tensor out = a.value();
  for (double& v : out.data()) v += c;
  return record(std::move(out), {a}, [](Node& self) {
    detail::accumulate(detail::parent(self, 0), self.grad);
  });
}

/// a * s for a one-element variable s.
inline Var mul_scalar(const Var& a, const Var& s) {
  if (s.size() != 1) throw ShapeError("mul_scalar: scale must have one element, got " + to_string(s.shape()));
  const double c = s.value()[0];
  Tensor out = a.value();
  for (double& v : out.data()) v *= c;
  return record(std::move(out), {a, s}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& ps = detail::parent(self, 1);
    const double c = ps.value[0];
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
    }
    if (ps.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa.value[i];
      ps.grad_buffer()[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus_scalar(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var silu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Var softplus(const Var& a) {
  return detail::unary(a, softplus_scalar, [](double x, double) { return sigmoid_scalar(x); });
}

inline Var exp(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var square(const Var& a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var sqrt(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& a) {
  return record(Tensor::scalar(a.value().sum()), {a}, [](Node& self) {
    Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (double& v : g.data()) v += self.grad[0];
  });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.size());
  return scale(sum(a), 1.0 / n);
}

/// Sums over the last axis; a rank-1 input reduces to shape [1].
inline Var sum_last(const Var& a) {
  const std::size_t inner = a.value().last_dim();
  const std::size_t outer = a.size() / inner;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape = {1};
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    double acc = 0.0;
    for (std::size_t i = 0; i < inner; ++i) acc += a.value()[o * inner + i];
    out[o] = acc;
  }
  return record(std::move(out), {a}, [outer, inner](Node& self) {
    Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) g[o * inner + i] += self.grad[o];
  });
}

inline Var mse(const Var& a, const Var& b) { return mean(square(sub(a, b))); }

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return record(std::move(out), {a}, [](Node& self) {
    detail::accumulate(detail::parent(self, 0), self.grad);
  });
}

inline Var permute(const Var& a, std::vector<std::size_t> perm) {
  if (perm.size() != a.shape().size()) {
    throw ShapeError("permute: permutation rank does not match " + to_string(a.shape()));
  }
  std::vector<std::size_t> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse.at(perm[i]) = i;
  Tensor out = detail::permute_tensor(a.value(), perm);
  return record(std::move(out), {a}, [inverse](Node& self) {
    Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    detail::accumulate(p, detail::permute_tensor(self.grad, inverse));
  });
}

/// out[i] = a[index[i]], or 0 where index[i] < 0.
inline Var gather(const Var& a, std::vector<long> index, Shape out_shape) {
  if (index.size() != numel(out_shape)) {
    throw ShapeError("gather: index count does not match output shape " + to_string(out_shape));
  }
  Tensor out(out_shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= 0) {
      if (static_cast<std::size_t>(index[i]) >= a.size()) throw ShapeError("gather: index out of range");
      out[i] = a.value()[static_cast<std::size_t>(index[i])];
    }
  }
  return record(std::move(out), {a}, [index = std::move(index)](Node& self) {
    Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i)
      if (index[i] >= 0) g[static_cast<std::size_t>(index[i])] += self.grad[i];
  });
}

/// Sums rows of a [M, w] into out_rows buckets: out[rows[i]] += a[i].
inline Var segment_sum_rows(const Var& a, std::vector<long> rows, std::size_t out_rows) {
  if (a.shape().size() != 2 || rows.size() != a.shape()[0]) {
    throw ShapeError("segment_sum_rows: expected [" + std::to_string(rows.size()) + ", w], got " +
                     to_string(a.shape()));
  }
  const std::size_t w = a.shape()[1];
  Tensor out({out_rows, w});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= out_rows) {
      throw ShapeError("segment_sum_rows: target row out of range");
    }
    for (std::size_t c = 0; c < w; ++c) out[static_cast<std::size_t>(rows[i]) * w + c] += a.value()[i * w + c];
  }
  return record(std::move(out), {a}, [rows = std::move(rows), w](Node& self) {
    Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t c = 0; c < w; ++c) g[i * w + c] += self.grad[static_cast<std::size_t>(rows[i]) * w + c];
  });
}

/// Repeats a [..., d] tensor `times` along a new axis inserted before the last.
inline Var repeat_before_last(const Var& a, std::size_t times) {
  const std::size_t d = a.value().last_dim();
  const std::size_t outer = a.size() / d;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  shape.push_back(times);
  shape.push_back(d);
  std::vector<long> index(outer * times * d);
  std::size_t k = 0;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < times; ++r)
      for (std::size_t i = 0; i < d; ++i) index[k++] = static_cast<long>(o * d + i);
  return gather(a, std::move(index), std::move(shape));
}

inline Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t outer = parts.front().size() / parts.front().value().last_dim();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin())) {
      throw ShapeError("concat_last: incompatible shapes " + to_string(first) + " and " +
                       to_string(s));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  Shape shape = first;
  shape.back() = total;
  Tensor out(shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < widths[k]; ++i) out[o * total + offset + i] = v[o * widths[k] + i];
    offset += widths[k];
  }
  return record(std::move(out), parts, [outer, total, widths](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node& p = detail::parent(self, k);
      if (p.requires_grad) {
        Tensor& g = p.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < widths[k]; ++i)
            g[o * widths[k] + i] += self.grad[o * total + offset + i];
      }
      offset += widths[k];
    }
  });
}

/// Columns [begin, end) of the last axis.
inline Var slice_last(const Var& a, std::size_t begin, std::size_t end) {
  const std::size_t width = a.value().last_dim();
  if (begin >= end || end > width) {
    throw ShapeError("slice_last: invalid range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") for width " + std::to_string(width));
  }
  const std::size_t outer = a.size() / width;
  const std::size_t w = end - begin;
  Shape shape = a.shape();
  shape.back() = w;
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < w; ++i) out[o * w + i] = a.value()[o * width + begin + i];
  return record(std::move(out), {a}, [outer, width, begin, w](Node& self) {
    Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < w; ++i) g[o * width + begin + i] += self.grad[o * w + i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., k] x b[k, n] -> [..., n]; leading axes of a are flattened into rows.
inline Var matmul(const Var& a, const Var& b) {
  if (b.shape().size() != 2 || a.value().last_dim() != b.shape()[0]) {
    throw ShapeError("matmul: inner extents differ for " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t k = b.shape()[0];
  const std::size_t n = b.shape()[1];
  const std::size_t m = a.size() / k;
  Shape shape = a.shape();
  shape.back() = n;
  Tensor out(shape);
  detail::MapMat(out.raw(), m, n).noalias() =
      detail::ConstMapMat(a.value().raw(), m, k) * detail::ConstMapMat(b.value().raw(), k, n);
  return record(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    detail::ConstMapMat g(self.grad.raw(), m, n);
    if (pa.requires_grad) {
      detail::MapMat(pa.grad_buffer().raw(), m, k).noalias() +=
          g * detail::ConstMapMat(pb.value.raw(), k, n).transpose();
    }
    if (pb.requires_grad) {
      detail::MapMat(pb.grad_buffer().raw(), k, n).noalias() +=
          detail::ConstMapMat(pa.value.raw(), m, k).transpose() * g;
    }
  });
}

/// x W + b for x[..., in], W[in, out], b[out].
inline Var linear(const Var& x, const Var& w, const Var& b) { return add_bcast(matmul(x, w), b); }

/// Batched product over identical leading axes: a[L..., m, k] x b[L..., k, n],
/// or b[L..., n, k] transposed when `transpose_b` is set.
inline Var bmm(const Var& a, const Var& b, bool transpose_b = false) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() ||
      !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    throw ShapeError("bmm: incompatible batch shapes " + to_string(sa) + " and " + to_string(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t kb = transpose_b ? sb.back() : sb[sb.size() - 2];
  const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb.back();
  if (k != kb) {
    throw ShapeError("bmm: inner extents differ for " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t batch = a.size() / (m * k);
  Shape shape = sa;
  shape.back() = n;
  Tensor out(shape);
  for (std::size_t l = 0; l < batch; ++l) {
    detail::ConstMapMat am(a.value().raw() + l * m * k, m, k);
    detail::MapMat om(out.raw() + l * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * detail::ConstMapMat(b.value().raw() + l * n * k, n, k).transpose();
    } else {
      om.noalias() = am * detail::ConstMapMat(b.value().raw() + l * k * n, k, n);
    }
  }
  return record(std::move(out), {a, b}, [batch, m, k, n, transpose_b](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    for (std::size_t l = 0; l < batch; ++l) {
      detail::ConstMapMat g(self.grad.raw() + l * m * n, m, n);
      detail::ConstMapMat am(pa.value.raw() + l * m * k, m, k);
      if (transpose_b) {
        detail::ConstMapMat bm(pb.value.raw() + l * n * k, n, k);
        if (pa.requires_grad)
          detail::MapMat(pa.grad_buffer().raw() + l * m * k, m, k).noalias() += g * bm;
        if (pb.requires_grad)
          detail::MapMat(pb.grad_buffer().raw() + l * n * k, n, k).noalias() += g.transpose() * am;
      } else {
        detail::ConstMapMat bm(pb.value.raw() + l * k * n, k, n);
        if (pa.requires_grad)
          detail::MapMat(pa.grad_buffer().raw() + l * m * k, m, k).noalias() += g * bm.transpose();
        if (pb.requires_grad)
          detail::MapMat(pb.grad_buffer().raw() + l * k * n, k, n).noalias() += am.transpose() * g;
      }
    }
  });
}

/// Applies a constant matrix M[p, q] to the second-to-last axis:
/// out[..., i, :] = sum_j M[i, j] x[..., j, :].
inline Var mix_rows(const Tensor& mat, const Var& x) {
  const Shape& sx = x.shape();
  if (mat.rank() != 2 || sx.size() < 2 || sx[sx.size() - 2] != mat.dim(1)) {
    throw ShapeError("mix_rows: cannot apply " + to_string(mat.shape()) + " to " + to_string(sx));
  }
  const std::size_t p = mat.dim(0);
  const std::size_t q = mat.dim(1);
  const std::size_t d = sx.back();
  const std::size_t batch = x.size() / (q * d);
  Shape shape = sx;
  shape[shape.size() - 2] = p;
  Tensor out(shape);
  detail::ConstMapMat mm(mat.raw(), p, q);
  for (std::size_t l = 0; l < batch; ++l) {
    detail::MapMat(out.raw() + l * p * d, p, d).noalias() =
        mm * detail::ConstMapMat(x.value().raw() + l * q * d, q, d);
  }
  return record(std::move(out), {x}, [mat, batch, p, q, d](Node& self) {
    Node& px = detail::parent(self, 0);
    if (!px.requires_grad) return;
    detail::ConstMapMat mm(mat.raw(), p, q);
    for (std::size_t l = 0; l < batch; ++l) {
      detail::MapMat(px.grad_buffer().raw() + l * q * d, q, d).noalias() +=
          mm.transpose() * detail::ConstMapMat(self.grad.raw() + l * p * d, p, d);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and sequence ops

/// Softmax over the last axis with max subtraction.
inline Var softmax_rows(const Var& a) {
  const std::size_t n = a.value().last_dim();
  const std::size_t outer = a.size() / n;
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t o = 0; o < outer; ++o) {
    const double* row = x.raw() + o * n;
    double* y = out.raw() + o * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += (y[i] = std::exp(row[i] - mx));
    for (std::size_t i = 0; i < n; ++i) y[i] /= z;
  }
  return record(std::move(out), {a}, [outer, n](Node& self) {
    Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      const double* y = self.value.raw() + o * n;
      const double* gy = self.grad.raw() + o * n;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += gy[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) g[o * n + i] += y[i] * (gy[i] - dot);
    }
  });
}

/// Normalizes last-axis slices to zero mean and unit variance, then applies
/// gain and bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  if (!(eps > 0.0)) throw ValueError("layer_norm: eps must be positive");
  const std::size_t d = x.value().last_dim();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
  }
  const std::size_t outer = x.size() / d;
  Tensor out(x.shape());
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* row = x.value().raw() + o * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[o] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (row[i] - mu) * is;
      (*xhat)[o * d + i] = h;
      out[o * d + i] = h * gain.value()[i] + bias.value()[i];
    }
  }
  return record(std::move(out), {x, gain, bias}, [xhat, inv_std, outer, d](Node& self) {
    Node& px = detail::parent(self, 0);
    Node& pg = detail::parent(self, 1);
    Node& pb = detail::parent(self, 2);
    const double dd = static_cast<double>(d);
    for (std::size_t o = 0; o < outer; ++o) {
      const double* gy = self.grad.raw() + o * d;
      const double* h = xhat->raw() + o * d;
      if (pg.requires_grad) {
        Tensor& gg = pg.grad_buffer();
        for (std::size_t i = 0; i < d; ++i) gg[i] += gy[i] * h[i];
      }
      if (pb.requires_grad) {
        Tensor& gb = pb.grad_buffer();
        for (std::size_t i = 0; i < d; ++i) gb[i] += gy[i];
      }
      if (px.requires_grad) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          const double gh = gy[i] * pg.value[i];
          s1 += gh;
          s2 += gh * h[i];
        }
        Tensor& gx = px.grad_buffer();
        for (std::size_t i = 0; i < d; ++i) {
          const double gh = gy[i] * pg.value[i];
          gx[o * d + i] += (*inv_std)[o] * (gh - s1 / dd - h[i] * s2 / dd);
        }
      }
    }
  });
}

/// Per-channel causal convolution over the time axis of x[..., T, c] with
/// kernel[k, c]; kernel row k-1 multiplies the current step.
inline Var depthwise_conv1d(const Var& x, const Var& kernel) {
  const Shape& sx = x.shape();
  if (sx.size() < 2 || kernel.shape().size() != 2 || kernel.shape()[1] != sx.back()) {
    throw ShapeError("depthwise_conv1d: kernel " + to_string(kernel.shape()) +
                     " does not match input " + to_string(sx));
  }
  const std::size_t c = sx.back();
  const std::size_t t_len = sx[sx.size() - 2];
  const std::size_t k = kernel.shape()[0];
  const std::size_t batch = x.size() / (t_len * c);
  Tensor out(sx);
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t j = 0; j < k; ++j) {
        // Tap j reads step t - (k - 1 - j).
        const std::size_t back = k - 1 - j;
        if (back > t) continue;
        const double* xr = xv.raw() + (s * t_len + t - back) * c;
        double* yr = out.raw() + (s * t_len + t) * c;
        for (std::size_t ch = 0; ch < c; ++ch) yr[ch] += kv[j * c + ch] * xr[ch];
      }
  return record(std::move(out), {x, kernel}, [batch, t_len, c, k](Node& self) {
    Node& px = detail::parent(self, 0);
    Node& pk = detail::parent(self, 1);
    for (std::size_t s = 0; s < batch; ++s)
      for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t back = k - 1 - j;
          if (back > t) continue;
          const std::size_t src = (s * t_len + t - back) * c;
          const double* gy = self.grad.raw() + (s * t_len + t) * c;
          if (px.requires_grad) {
            Tensor& gx = px.grad_buffer();
            for (std::size_t ch = 0; ch < c; ++ch) gx[src + ch] += pk.value[j * c + ch] * gy[ch];
          }
          if (pk.requires_grad) {
            Tensor& gk = pk.grad_buffer();
            for (std::size_t ch = 0; ch < c; ++ch) gk[j * c + ch] += px.value[src + ch] * gy[ch];
          }
        }
  });
}

/// Diagonal selective state-space scan.
///
/// Shapes: u, delta [S, T, c]; a_diag [c, n]; b, cmat [S, T, n]; skip [c].
/// For each sequence s and channel ch:
///   h_t = exp(delta_t * a_diag[ch]) * h_{t-1} + delta_t * b_t * u_t
///   y_t = <cmat_t, h_t> + skip[ch] * u_t
/// with h_0 = 0. Sequential in T.
inline Var selective_scan(const Var& u, const Var& delta, const Var& a_diag, const Var& b,
                          const Var& cmat, const Var& skip) {
  const Shape& su = u.shape();
  if (su.size() != 3 || delta.shape() != su) {
    throw ShapeError("selective_scan: u/delta must share shape [S, T, c], got " + to_string(su) +
                     " and " + to_string(delta.shape()));
  }
  const std::size_t seqs = su[0], t_len = su[1], c = su[2];
  if (a_diag.shape().size() != 2 || a_diag.shape()[0] != c) {
    throw ShapeError("selective_scan: a_diag must be [c, n], got " + to_string(a_diag.shape()));
  }
  const std::size_t n = a_diag.shape()[1];
  const Shape sbn{seqs, t_len, n};
  if (b.shape() != sbn || cmat.shape() != sbn || skip.shape() != Shape{c}) {
    throw ShapeError("selective_scan: B/C must be " + to_string(sbn) + " and skip [c]");
  }
  // states[s, t, ch, j] after step t; without a tape only the running state is kept.
  const bool keep = grad_enabled();
  auto states = std::make_shared<std::vector<double>>(keep ? seqs * t_len * c * n : 2 * c * n);
  Tensor out(su);
  const double* uv = u.value().raw();
  const double* dv = delta.value().raw();
  const double* av = a_diag.value().raw();
  const double* bv = b.value().raw();
  const double* cv = cmat.value().raw();
  const double* sk = skip.value().raw();
  for (std::size_t s = 0; s < seqs; ++s) {
    for (std::size_t t = 0; t < t_len; ++t) {
      const std::size_t row = s * t_len + t;
      double* h = states->data() + (keep ? row : t % 2) * c * n;
      const double* hp = t ? states->data() + (keep ? row - 1 : (t + 1) % 2) * c * n : nullptr;
      Eigen::Map<const Eigen::ArrayXd> brow(bv + row * n, n), crow(cv + row * n, n);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double dl = dv[row * c + ch];
        const double x = uv[row * c + ch];
        Eigen::Map<Eigen::ArrayXd> hv(h + ch * n, n);
        hv = (dl * Eigen::Map<const Eigen::ArrayXd>(av + ch * n, n)).exp();
        if (hp) {
          hv *= Eigen::Map<const Eigen::ArrayXd>(hp + ch * n, n);
        } else {
          hv.setZero();
        }
        hv += (dl * x) * brow;
        out[row * c + ch] = sk[ch] * x + (crow * hv).sum();
      }
    }
  }
  return record(std::move(out), {u, delta, a_diag, b, cmat, skip},
                [states, seqs, t_len, c, n](Node& self) {
    Node& pu = detail::parent(self, 0);
    Node& pd = detail::parent(self, 1);
    Node& pa = detail::parent(self, 2);
    Node& pb = detail::parent(self, 3);
    Node& pc = detail::parent(self, 4);
    Node& ps = detail::parent(self, 5);
    Tensor gu(pu.value.shape()), gd(pd.value.shape()), ga(pa.value.shape()),
        gb(pb.value.shape()), gc(pc.value.shape()), gs(ps.value.shape());
    const double* uv = pu.value.raw();
    const double* dv = pd.value.raw();
    const double* av = pa.value.raw();
    const double* bv = pb.value.raw();
    const double* cv = pc.value.raw();
    const double* sk = ps.value.raw();
    std::vector<double> carry(c * n);
    for (std::size_t s = 0; s < seqs; ++s) {
      std::fill(carry.begin(), carry.end(), 0.0);
      for (std::size_t t = t_len; t-- > 0;) {
        const std::size_t row = s * t_len + t;
        const double* h = states->data() + row * c * n;
        const double* hp = t ? h - c * n : nullptr;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double gy = self.grad[row * c + ch];
          const double dl = dv[row * c + ch];
          const double x = uv[row * c + ch];
          gs[ch] += gy * x;
          double gx = gy * sk[ch];
          double gdl = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t cj = ch * n + j;
            gc[row * n + j] += gy * h[cj];
            // Total gradient reaching h_t: readout plus the next step's carry.
            const double gh = gy * cv[row * n + j] + carry[cj];
            const double decay = std::exp(dl * av[cj]);
            const double prev = hp ? hp[cj] : 0.0;
            const double gdecay = gh * prev;
            gdl += gh * bv[row * n + j] * x + gdecay * decay * av[cj];
            ga[cj] += gdecay * decay * dl;
            gb[row * n + j] += gh * dl * x;
            gx += gh * dl * bv[row * n + j];
            carry[cj] = gh * decay;
          }
          gu[row * c + ch] += gx;
          gd[row * c + ch] += gdl;
        }
      }
    }
    detail::accumulate(pu, gu);
    detail::accumulate(pd, gd);
    detail::accumulate(pa, ga);
    detail::accumulate(pb, gb);
    detail::accumulate(pc, gc);
    detail::accumulate(ps, gs);
  });
}

}  // namespace cstp::ad
