#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "s2moe/rng.hpp"
#include "s2moe/tensor.hpp"

namespace s2moe {

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

template <class T>
using BackwardFn = std::function<void(Node<T>&)>;

template <class T>
Tensor<T> finish(OpKind op, Shape shape, Buffer<T> value, const std::vector<Tensor<T>>& inputs,
                 BackwardFn<T> fn) {
  if (nan_guard_enabled()) {
    for (std::size_t i = 0; i < value.size(); ++i) {
      if (!std::isfinite(value[i])) {
        throw NumericError(std::string(op_name(op)) + " produced a non-finite value at element " +
                           std::to_string(i) + " (op id " + std::to_string(Tape<T>::active().size()) +
                           ")");
      }
    }
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  const bool tracked = grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) {
                         return t.requires_grad();
                       });
  if (tracked) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward_fn = std::move(fn);
    Tape<T>::active().record(node);
  }
  return Tensor<T>(std::move(node));
}

// Gradient buffer of an input, or nullptr when it does not need one.
template <class T>
T* grad_of(Node<T>& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? in.grad_buffer() : nullptr;
}

enum class Broadcast { same, scalar, row, column };

inline Broadcast broadcast_kind(const Shape& a, const Shape& b, bool allow_column, const char* op) {
  if (a == b) return Broadcast::same;
  if (numel(b) == 1) return Broadcast::scalar;
  if (!a.empty() && b.size() == 1 && b[0] == a.back()) return Broadcast::row;
  if (allow_column && !a.empty() && b.size() == a.size() && b.back() == 1 &&
      std::equal(a.begin(), a.end() - 1, b.begin())) {
    return Broadcast::column;
  }
  throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
}

inline std::size_t broadcast_index(Broadcast kind, std::size_t i, std::size_t last) {
  switch (kind) {
    case Broadcast::same: return i;
    case Broadcast::scalar: return 0;
    case Broadcast::row: return i % last;
    case Broadcast::column: return i / last;
  }
  return i;
}

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* op) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class T>
Tensor<T> unary(OpKind op, const Tensor<T>& x, auto&& forward, auto&& derivative) {
  Buffer<T> y(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = forward(xs[i]);
  return finish<T>(op, x.shape(), std::move(y), {x}, [derivative](Node<T>& self) {
    if (T* gx = grad_of(self, 0)) {
      const auto& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * derivative(xv[i], self.value[i]);
    }
  });
}

}  // namespace detail

/// a[..., k] x b[k, n] -> [..., n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.last_dim() != b.dim(0)) {
    throw ShapeError("matmul: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " do not conform");
  }
  const auto m = static_cast<Eigen::Index>(a.rows());
  const auto k = static_cast<Eigen::Index>(b.dim(0));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Shape out_shape = a.shape();
  out_shape.back() = b.dim(1);
  Buffer<T> out(static_cast<std::size_t>(m * n));
  detail::MatrixMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatrixMap<T>(a.data().data(), m, k) * detail::ConstMatrixMap<T>(b.data().data(), k, n);
  return detail::finish<T>(OpKind::matmul, std::move(out_shape), std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    detail::ConstMatrixMap<T> dy(self.grad.data(), m, n);
    if (T* ga = detail::grad_of(self, 0)) {
      detail::MatrixMap<T>(ga, m, k).noalias() += dy * detail::ConstMatrixMap<T>(self.inputs[1]->value.data(), k, n).transpose();
    }
    if (T* gb = detail::grad_of(self, 1)) {
      detail::MatrixMap<T>(gb, k, n).noalias() += detail::ConstMatrixMap<T>(self.inputs[0]->value.data(), m, k).transpose() * dy;
    }
  });
}

/// a[..., k] x b[n, k]^T -> [..., n]
template <class T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.last_dim() != b.dim(1)) {
    throw ShapeError("matmul_bt: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " do not conform");
  }
  const auto m = static_cast<Eigen::Index>(a.rows());
  const auto k = static_cast<Eigen::Index>(b.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(0));
  Shape out_shape = a.shape();
  out_shape.back() = b.dim(0);
  Buffer<T> out(static_cast<std::size_t>(m * n));
  detail::MatrixMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatrixMap<T>(a.data().data(), m, k) * detail::ConstMatrixMap<T>(b.data().data(), n, k).transpose();
  return detail::finish<T>(OpKind::matmul_bt, std::move(out_shape), std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    detail::ConstMatrixMap<T> dy(self.grad.data(), m, n);
    if (T* ga = detail::grad_of(self, 0)) {
      detail::MatrixMap<T>(ga, m, k).noalias() += dy * detail::ConstMatrixMap<T>(self.inputs[1]->value.data(), n, k);
    }
    if (T* gb = detail::grad_of(self, 1)) {
      detail::MatrixMap<T>(gb, n, k).noalias() += dy.transpose() * detail::ConstMatrixMap<T>(self.inputs[0]->value.data(), m, k);
    }
  });
}

/// Elementwise sum. `b` may match `a`, be a single value, or a row vector
/// over the last axis.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto kind = detail::broadcast_kind(a.shape(), b.shape(), false, "add");
  const std::size_t last = a.last_dim();
  Buffer<T> y(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[detail::broadcast_index(kind, i, last)];
  return detail::finish<T>(OpKind::add, a.shape(), std::move(y), {a, b}, [kind, last](Node<T>& self) {
    if (T* ga = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    }
    if (T* gb = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[detail::broadcast_index(kind, i, last)] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("sub: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
  Buffer<T> y(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  return detail::finish<T>(OpKind::sub, a.shape(), std::move(y), {a, b}, [](Node<T>& self) {
    if (T* ga = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    }
    if (T* gb = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

/// Elementwise product. `b` may match `a`, be a single value, a row vector
/// over the last axis, or a column ([..., 1]) broadcast across it.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto kind = detail::broadcast_kind(a.shape(), b.shape(), true, "mul");
  const std::size_t last = a.last_dim();
  Buffer<T> y(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[detail::broadcast_index(kind, i, last)];
  return detail::finish<T>(OpKind::mul, a.shape(), std::move(y), {a, b}, [kind, last](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (T* ga = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        ga[i] += self.grad[i] * bv[detail::broadcast_index(kind, i, last)];
      }
    }
    if (T* gb = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        gb[detail::broadcast_index(kind, i, last)] += self.grad[i] * av[i];
      }
    }
  });
}

/// scale * a + shift with constant coefficients.
template <class T>
Tensor<T> affine(const Tensor<T>& a, T scale, T shift = T(0)) {
  Buffer<T> y(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = scale * av[i] + shift;
  return detail::finish<T>(OpKind::affine, a.shape(), std::move(y), {a}, [scale](Node<T>& self) {
    if (T* ga = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += scale * self.grad[i];
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      OpKind::relu, x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      OpKind::sigmoid, x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(
      OpKind::exp, x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(
      OpKind::log, x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

/// Softmax along `axis`; the maximum is subtracted before exponentiation.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, long axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "softmax");
  const auto sp = detail::split_axis(x.shape(), ax);
  Buffer<T> y(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.len; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
      T total = 0;
      for (std::size_t j = 0; j < sp.len; ++j) {
        const T e = std::exp(xv[base + j * sp.inner] - mx);
        y[base + j * sp.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < sp.len; ++j) y[base + j * sp.inner] /= total;
    }
  }
  return detail::finish<T>(OpKind::softmax, x.shape(), std::move(y), {x}, [sp](Node<T>& self) {
    T* gx = detail::grad_of(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.len * sp.inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < sp.len; ++j) {
          const std::size_t idx = base + j * sp.inner;
          dot += self.grad[idx] * self.value[idx];
        }
        for (std::size_t j = 0; j < sp.len; ++j) {
          const std::size_t idx = base + j * sp.inner;
          gx[idx] += self.value[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

/// Normalizes over the last axis, then applies gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t d = x.last_dim();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: input " + to_string(x.shape()) + " with gain " + to_string(gain.shape()) +
                     " and bias " + to_string(bias.shape()));
  }
  const std::size_t rows = x.rows();
  Buffer<T> normalized(x.numel());
  Buffer<T> rstd(rows);
  Buffer<T> y(x.numel());
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * rstd[r];
      normalized[r * d + j] = h;
      y[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return detail::finish<T>(
      OpKind::layer_norm, x.shape(), std::move(y), {x, gain, bias},
      [d, rows, normalized = std::move(normalized), rstd = std::move(rstd)](Node<T>& self) {
        const auto& gv = self.inputs[1]->value;
        T* gx = detail::grad_of(self, 0);
        T* gg = detail::grad_of(self, 1);
        T* gb = detail::grad_of(self, 2);
        Buffer<T> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * d;
          const T* h = normalized.data() + r * d;
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = dy[j] * gv[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[j];
            if (gg) gg[j] += dy[j] * h[j];
            if (gb) gb[j] += dy[j];
          }
          if (!gx) continue;
          mean_dh /= static_cast<T>(d);
          mean_dh_h /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
        }
      });
}

/// Rows of `table` [V, d] selected by `ids`; result is [ids.size(), d].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + to_string(table.shape()));
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  Buffer<T> y(ids.size() * d);
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, y.data() + i * d);
  }
  return detail::finish<T>(OpKind::embedding, Shape{ids.size(), d}, std::move(y), {table},
                           [d, saved = std::move(saved)](Node<T>& self) {
                             T* gt = detail::grad_of(self, 0);
                             if (!gt) return;
                             for (std::size_t i = 0; i < saved.size(); ++i) {
                               T* dst = gt + static_cast<std::size_t>(saved[i]) * d;
                               const T* src = self.grad.data() + i * d;
                               for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                             }
                           });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, long axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t ax = detail::normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) {
      throw ShapeError("concat: shapes " + to_string(first) + " and " + to_string(probe) + " differ in rank");
    }
    out_shape[ax] += probe[ax];
    probe[ax] = first[ax];
    if (probe != first) {
      throw ShapeError("concat: shapes " + to_string(first) + " and " + to_string(p.shape()) +
                       " differ off the concat axis");
    }
  }
  const auto sp = detail::split_axis(out_shape, ax);
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(ax) * sp.inner);
  const std::size_t out_width = sp.len * sp.inner;
  Buffer<T> y(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto pv = parts[p].data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv.data() + o * widths[p], widths[p], y.data() + o * out_width + offset);
    }
    offset += widths[p];
  }
  return detail::finish<T>(OpKind::concat, out_shape, std::move(y), parts,
                           [widths, out_width, outer = sp.outer](Node<T>& self) {
                             std::size_t offset = 0;
                             for (std::size_t p = 0; p < widths.size(); ++p) {
                               if (T* g = detail::grad_of(self, p)) {
                                 for (std::size_t o = 0; o < outer; ++o) {
                                   for (std::size_t j = 0; j < widths[p]; ++j) {
                                     g[o * widths[p] + j] += self.grad[o * out_width + offset + j];
                                   }
                                 }
                               }
                               offset += widths[p];
                             }
                           });
}

/// Mean over `axis`; the axis is removed from the result shape.
template <class T>
Tensor<T> mean(const Tensor<T>& x, long axis) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "mean");
  const auto sp = detail::split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  Buffer<T> y(sp.outer * sp.inner, T(0));
  auto xv = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.len; ++j)
      for (std::size_t in = 0; in < sp.inner; ++in) y[o * sp.inner + in] += xv[(o * sp.len + j) * sp.inner + in];
  for (auto& v : y) v /= static_cast<T>(sp.len);
  return detail::finish<T>(OpKind::mean, std::move(out_shape), std::move(y), {x}, [sp](Node<T>& self) {
    T* gx = detail::grad_of(self, 0);
    if (!gx) return;
    const T inv = T(1) / static_cast<T>(sp.len);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.len; ++j)
        for (std::size_t in = 0; in < sp.inner; ++in)
          gx[(o * sp.len + j) * sp.inner + in] += self.grad[o * sp.inner + in] * inv;
  });
}

/// Population variance over `axis`; the axis is removed from the result shape.
template <class T>
Tensor<T> variance(const Tensor<T>& x, long axis) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "variance");
  const auto sp = detail::split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  Buffer<T> means(sp.outer * sp.inner, T(0));
  Buffer<T> y(sp.outer * sp.inner, T(0));
  auto xv = x.data();
  const T n = static_cast<T>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.len; ++j)
      for (std::size_t in = 0; in < sp.inner; ++in) means[o * sp.inner + in] += xv[(o * sp.len + j) * sp.inner + in];
  for (auto& m : means) m /= n;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.len; ++j)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const T c = xv[(o * sp.len + j) * sp.inner + in] - means[o * sp.inner + in];
        y[o * sp.inner + in] += c * c;
      }
  for (auto& v : y) v /= n;
  return detail::finish<T>(OpKind::variance, std::move(out_shape), std::move(y), {x},
                           [sp, means = std::move(means)](Node<T>& self) {
                             T* gx = detail::grad_of(self, 0);
                             if (!gx) return;
                             const auto& xv = self.inputs[0]->value;
                             const T scale = T(2) / static_cast<T>(sp.len);
                             for (std::size_t o = 0; o < sp.outer; ++o)
                               for (std::size_t j = 0; j < sp.len; ++j)
                                 for (std::size_t in = 0; in < sp.inner; ++in) {
                                   const std::size_t idx = (o * sp.len + j) * sp.inner + in;
                                   gx[idx] += self.grad[o * sp.inner + in] * scale * (xv[idx] - means[o * sp.inner + in]);
                                 }
                           });
}

/// Sum of all elements as a rank-0 tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  auto xv = x.data();
  T total = std::accumulate(xv.begin(), xv.end(), T(0));
  return detail::finish<T>(OpKind::sum, Shape{}, {total}, {x}, [](Node<T>& self) {
    if (T* gx = detail::grad_of(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
    }
  });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return affine(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Mean cross-entropy (nats) of logits [..., V] against one target per row.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  const std::size_t vocab = logits.last_dim();
  const std::size_t rows = logits.rows();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " need " + std::to_string(rows) +
                     " targets, got " + std::to_string(targets.size()));
  }
  Buffer<T> probs(logits.numel());
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  auto lv = logits.data();
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(vocab) +
                              ")");
    }
    const T* z = lv.data() + r * vocab;
    const T mx = *std::max_element(z, z + vocab);
    T s = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(z[j] - mx);
      s += probs[r * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= s;
    total += std::log(s) - (z[t] - mx);
  }
  total /= static_cast<T>(rows);
  return detail::finish<T>(OpKind::cross_entropy, Shape{}, {total}, {logits},
                           [rows, vocab, probs = std::move(probs), saved = std::move(saved)](Node<T>& self) {
                             T* gl = detail::grad_of(self, 0);
                             if (!gl) return;
                             const T scale = self.grad[0] / static_cast<T>(rows);
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < vocab; ++j) gl[r * vocab + j] += scale * probs[r * vocab + j];
                               gl[r * vocab + static_cast<std::size_t>(saved[r])] -= scale;
                             }
                           });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Buffer<T> y(x.data().begin(), x.data().end());
  return detail::finish<T>(OpKind::reshape, std::move(shape), std::move(y), {x}, [](Node<T>& self) {
    if (T* gx = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    }
  });
}

/// Rows of x (viewed as [rows, last]) picked by `index`; result [index.size(), last].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
  const std::size_t d = x.last_dim();
  const std::size_t rows = x.rows();
  std::vector<std::size_t> saved(index.begin(), index.end());
  Buffer<T> y(index.size() * d);
  auto xv = x.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw std::out_of_range("gather_rows: row " + std::to_string(index[i]) + " of " + std::to_string(rows));
    }
    std::copy_n(xv.data() + index[i] * d, d, y.data() + i * d);
  }
  return detail::finish<T>(OpKind::gather_rows, Shape{index.size(), d}, std::move(y), {x},
                           [d, saved = std::move(saved)](Node<T>& self) {
                             T* gx = detail::grad_of(self, 0);
                             if (!gx) return;
                             for (std::size_t i = 0; i < saved.size(); ++i)
                               for (std::size_t j = 0; j < d; ++j) gx[saved[i] * d + j] += self.grad[i * d + j];
                           });
}

/// x[rows[i], cols[i]] for each i, as an [n, 1] column.
template <class T>
Tensor<T> gather_elements(const Tensor<T>& x, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  if (x.rank() != 2 || rows.size() != cols.size()) {
    throw ShapeError("gather_elements: source " + to_string(x.shape()) + " with " + std::to_string(rows.size()) +
                     " rows and " + std::to_string(cols.size()) + " cols");
  }
  const std::size_t width = x.dim(1);
  std::vector<std::size_t> flat(rows.size());
  Buffer<T> y(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0) || cols[i] >= width) throw std::out_of_range("gather_elements: index outside source");
    flat[i] = rows[i] * width + cols[i];
    y[i] = x.data()[flat[i]];
  }
  return detail::finish<T>(OpKind::gather_elements, Shape{rows.size(), 1}, std::move(y), {x},
                           [flat = std::move(flat)](Node<T>& self) {
                             if (T* gx = detail::grad_of(self, 0)) {
                               for (std::size_t i = 0; i < flat.size(); ++i) gx[flat[i]] += self.grad[i];
                             }
                           });
}

/// Sums part p's rows into rows index[p] of a zero [rows, width] result,
/// accumulating parts in order.
template <class T>
Tensor<T> combine_rows(std::size_t rows, std::size_t width, const std::vector<Tensor<T>>& parts,
                       const std::vector<std::vector<std::size_t>>& index) {
  if (parts.size() != index.size()) throw ShapeError("combine_rows: parts and index lists differ in count");
  Buffer<T> y(rows * width, T(0));
  for (std::size_t p = 0; p < parts.size(); ++p) {
    if (parts[p].shape() != Shape{index[p].size(), width}) {
      throw ShapeError("combine_rows: part " + to_string(parts[p].shape()) + " does not match " +
                       std::to_string(index[p].size()) + " rows of width " + std::to_string(width));
    }
    auto pv = parts[p].data();
    for (std::size_t i = 0; i < index[p].size(); ++i) {
      if (index[p][i] >= rows) throw std::out_of_range("combine_rows: destination row outside result");
      T* dst = y.data() + index[p][i] * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += pv[i * width + j];
    }
  }
  return detail::finish<T>(OpKind::combine_rows, Shape{rows, width}, std::move(y), parts,
                           [width, index](Node<T>& self) {
                             for (std::size_t p = 0; p < index.size(); ++p) {
                               T* g = detail::grad_of(self, p);
                               if (!g) continue;
                               for (std::size_t i = 0; i < index[p].size(); ++i)
                                 for (std::size_t j = 0; j < width; ++j) g[i * width + j] += self.grad[index[p][i] * width + j];
                             }
                           });
}

/// Scales every row (last axis) to unit Euclidean norm. Zero rows are rejected.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  const std::size_t d = x.last_dim();
  const std::size_t rows = x.rows();
  Buffer<T> norms(rows);
  Buffer<T> y(x.numel());
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
    norms[r] = std::sqrt(s);
    if (!(norms[r] > T(0))) throw std::domain_error("l2_normalize: row " + std::to_string(r) + " has zero norm");
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = xv[r * d + j] / norms[r];
  }
  return detail::finish<T>(OpKind::l2_normalize, x.shape(), std::move(y), {x},
                           [d, rows, norms = std::move(norms)](Node<T>& self) {
                             T* gx = detail::grad_of(self, 0);
                             if (!gx) return;
                             for (std::size_t r = 0; r < rows; ++r) {
                               T dot = 0;
                               for (std::size_t j = 0; j < d; ++j) dot += self.value[r * d + j] * self.grad[r * d + j];
                               for (std::size_t j = 0; j < d; ++j) {
                                 gx[r * d + j] += (self.grad[r * d + j] - self.value[r * d + j] * dot) / norms[r];
                               }
                             }
                           });
}

/// Multi-head causal self-attention on projected q, k, v of shape
/// [batch * seq, d]. Position t attends to positions <= t of its own sequence.
template <class T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t batch,
                           std::size_t seq, std::size_t heads) {
  const std::size_t d = q.last_dim();
  if (q.shape() != Shape{batch * seq, d} || k.shape() != q.shape() || v.shape() != q.shape() || heads == 0 ||
      d % heads != 0) {
    throw ShapeError("causal_attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                     to_string(v.shape()) + " for batch " + std::to_string(batch) + ", seq " +
                     std::to_string(seq) + ", heads " + std::to_string(heads));
  }
  using Index = Eigen::Index;
  const std::size_t dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const Index S = static_cast<Index>(seq), D = static_cast<Index>(dh), stride = static_cast<Index>(d);
  Buffer<T> probs(batch * heads * seq * seq, T(0));
  Buffer<T> out(batch * seq * d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * seq * d + h * dh;
      detail::ConstStridedMap<T> qh(q.data().data() + off, S, D, Eigen::OuterStride<>(stride));
      detail::ConstStridedMap<T> kh(k.data().data() + off, S, D, Eigen::OuterStride<>(stride));
      detail::ConstStridedMap<T> vh(v.data().data() + off, S, D, Eigen::OuterStride<>(stride));
      detail::MatrixMap<T> p(probs.data() + (b * heads + h) * seq * seq, S, S);
      p.noalias() = (qh * kh.transpose()) * scale;
      for (Index i = 0; i < S; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Index j = 0; j <= i; ++j) mx = std::max(mx, p(i, j));
        T total = 0;
        for (Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          total += p(i, j);
        }
        for (Index j = 0; j <= i; ++j) p(i, j) /= total;
        for (Index j = i + 1; j < S; ++j) p(i, j) = T(0);
      }
      detail::StridedMap<T>(out.data() + off, S, D, Eigen::OuterStride<>(stride)).noalias() = p * vh;
    }
  }
  return detail::finish<T>(
      OpKind::attention, q.shape(), std::move(out), {q, k, v},
      [batch, seq, heads, d, dh, scale, probs = std::move(probs)](Node<T>& self) {
        const Index S = static_cast<Index>(seq), D = static_cast<Index>(dh), stride = static_cast<Index>(d);
        T* gq = detail::grad_of(self, 0);
        T* gk = detail::grad_of(self, 1);
        T* gv = detail::grad_of(self, 2);
        detail::RowMatrix<T> dp(S, S);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * seq * d + h * dh;
            detail::ConstStridedMap<T> qh(self.inputs[0]->value.data() + off, S, D, Eigen::OuterStride<>(stride));
            detail::ConstStridedMap<T> kh(self.inputs[1]->value.data() + off, S, D, Eigen::OuterStride<>(stride));
            detail::ConstStridedMap<T> vh(self.inputs[2]->value.data() + off, S, D, Eigen::OuterStride<>(stride));
            detail::ConstStridedMap<T> dout(self.grad.data() + off, S, D, Eigen::OuterStride<>(stride));
            detail::ConstMatrixMap<T> p(probs.data() + (b * heads + h) * seq * seq, S, S);
            if (gv) detail::StridedMap<T>(gv + off, S, D, Eigen::OuterStride<>(stride)).noalias() += p.transpose() * dout;
            if (!gq && !gk) continue;
            dp.noalias() = dout * vh.transpose();
            for (Index i = 0; i < S; ++i) {
              T dot = 0;
              for (Index j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
              for (Index j = 0; j <= i; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
              for (Index j = i + 1; j < S; ++j) dp(i, j) = T(0);
            }
            if (gq) detail::StridedMap<T>(gq + off, S, D, Eigen::OuterStride<>(stride)).noalias() += dp * kh;
            if (gk) detail::StridedMap<T>(gk + off, S, D, Eigen::OuterStride<>(stride)).noalias() += dp.transpose() * qh;
          }
        }
      });
}

/// Inverted dropout: zeroes each element with probability p and rescales
/// survivors by 1 / (1 - p). p == 0 returns x unchanged.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, RngStream& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: probability must lie in [0, 1)");
  if (p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Buffer<T> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
  Buffer<T> y(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * mask[i];
  return detail::finish<T>(OpKind::dropout, x.shape(), std::move(y), {x}, [mask = std::move(mask)](Node<T>& self) {
    if (T* gx = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += self.grad[i] * mask[i];
    }
  });
}

}  // namespace s2moe
