#pragma once

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "unihetero/core/tensor.hpp"

// Differentiable operations. Every op computes its forward value eagerly and,
// when a tape is active and some input requires grad, records a closure that
// accumulates input gradients from the output gradient.
//
// Convention: tensors are row-major and ops act on the last axis; "rows" is
// the product of all leading extents. Broadcasting is limited to add_bias.

namespace unihetero {

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

template <class T, class... Ts>
bool should_track(const Ts&... inputs) {
  return active_tape<T>() != nullptr && (inputs.requires_grad() || ...);
}

template <class T>
Tensor<T> make_result(Shape shape, bool track) {
  Tensor<T> out(std::move(shape));
  if (track) out.set_requires_grad(true);
  return out;
}

template <class T, class F>
void record(F&& fn) {
  active_tape<T>()->record(std::forward<F>(fn));
}

template <class T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

/// a[..., k] x b[k, n] -> [..., n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.rank() != 2 || a.cols() != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const auto m = static_cast<Eigen::Index>(a.rows());
  const auto k = static_cast<Eigen::Index>(a.cols());
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Shape out_shape = a.shape();
  out_shape.back() = b.dim(1);
  const bool track = detail::should_track<T>(a, b);
  auto out = detail::make_result<T>(out_shape, track);
  detail::MatMap<T>(out.ptr(), m, n).noalias() =
      detail::ConstMatMap<T>(a.ptr(), m, k) * detail::ConstMatMap<T>(b.ptr(), k, n);
  if (track) {
    detail::record<T>([a, b, out, m, k, n]() mutable {
      detail::ConstMatMap<T> dout(out.grad_ptr(), m, n);
      if (a.requires_grad()) {
        detail::MatMap<T>(a.grad_ptr(), m, k).noalias() +=
            dout * detail::ConstMatMap<T>(b.ptr(), k, n).transpose();
      }
      if (b.requires_grad()) {
        detail::MatMap<T>(b.grad_ptr(), k, n).noalias() +=
            detail::ConstMatMap<T>(a.ptr(), m, k).transpose() * dout;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("add", a, b);
  const bool track = detail::should_track<T>(a, b);
  auto out = detail::make_result<T>(a.shape(), track);
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  if (track) {
    detail::record<T>([a, b, out]() mutable {
      const T* g = out.grad_ptr();
      if (a.requires_grad())
        for (std::size_t i = 0; i < a.numel(); ++i) a.grad_ptr()[i] += g[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < b.numel(); ++i) b.grad_ptr()[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("sub", a, b);
  const bool track = detail::should_track<T>(a, b);
  auto out = detail::make_result<T>(a.shape(), track);
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  if (track) {
    detail::record<T>([a, b, out]() mutable {
      const T* g = out.grad_ptr();
      if (a.requires_grad())
        for (std::size_t i = 0; i < a.numel(); ++i) a.grad_ptr()[i] += g[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < b.numel(); ++i) b.grad_ptr()[i] -= g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("mul", a, b);
  const bool track = detail::should_track<T>(a, b);
  auto out = detail::make_result<T>(a.shape(), track);
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  if (track) {
    detail::record<T>([a, b, out]() mutable {
      const T* g = out.grad_ptr();
      if (a.requires_grad())
        for (std::size_t i = 0; i < a.numel(); ++i) a.grad_ptr()[i] += g[i] * b[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < b.numel(); ++i) b.grad_ptr()[i] += g[i] * a[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  const bool track = detail::should_track<T>(x);
  auto out = detail::make_result<T>(x.shape(), track);
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * s;
  if (track) {
    detail::record<T>([x, out, s]() mutable {
      for (std::size_t i = 0; i < x.numel(); ++i) x.grad_ptr()[i] += out.grad_ptr()[i] * s;
    });
  }
  return out;
}

/// x[..., n] + bias[n], bias broadcast over the leading axes.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || bias.numel() != x.cols()) throw ShapeError("add_bias", x.shape(), bias.shape());
  const bool track = detail::should_track<T>(x, bias);
  auto out = detail::make_result<T>(x.shape(), track);
  const std::size_t rows = x.rows(), cols = x.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + bias[c];
  if (track) {
    detail::record<T>([x, bias, out, rows, cols]() mutable {
      const T* g = out.grad_ptr();
      if (x.requires_grad())
        for (std::size_t i = 0; i < rows * cols; ++i) x.grad_ptr()[i] += g[i];
      if (bias.requires_grad())
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) bias.grad_ptr()[c] += g[r * cols + c];
    });
  }
  return out;
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  const bool track = detail::should_track<T>(x);
  auto out = detail::make_result<T>(x.shape(), track);
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] / (T(1) + std::exp(-x[i]));
  if (track) {
    detail::record<T>([x, out]() mutable {
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-x[i]));
        x.grad_ptr()[i] += out.grad_ptr()[i] * s * (T(1) + x[i] * (T(1) - s));
      }
    });
  }
  return out;
}

/// GELU, tanh approximation.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  const bool track = detail::should_track<T>(x);
  auto out = detail::make_result<T>(x.shape(), track);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
  }
  if (track) {
    detail::record<T>([x, out]() mutable {
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const T v = x[i];
        const T th = std::tanh(c * (v + k * v * v * v));
        const T dth = (T(1) - th * th) * c * (T(1) + T(3) * k * v * v);
        x.grad_ptr()[i] += out.grad_ptr()[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * dth);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  const bool track = detail::should_track<T>(x);
  auto out = detail::make_result<T>(Shape{1}, track);
  T acc = T(0);
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
  out[0] = acc;
  if (track) {
    detail::record<T>([x, out]() mutable {
      const T g = out.grad_ptr()[0];
      for (std::size_t i = 0; i < x.numel(); ++i) x.grad_ptr()[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Row-wise softmax over the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const bool track = detail::should_track<T>(x);
  auto out = detail::make_result<T>(x.shape(), track);
  const std::size_t rows = x.rows(), cols = x.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * cols;
    T* o = out.ptr() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  if (track) {
    detail::record<T>([x, out, rows, cols]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = out.ptr() + r * cols;
        const T* g = out.grad_ptr() + r * cols;
        T dot = T(0);
        for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
        T* dx = x.grad_ptr() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dx[c] += y[c] * (g[c] - dot);
      }
    });
  }
  return out;
}

/// Row-wise log(sum(exp(x))) -> [rows].
template <class T>
Tensor<T> logsumexp(const Tensor<T>& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  const bool track = detail::should_track<T>(x);
  auto out = detail::make_result<T>(Shape{rows}, track);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    out[r] = mx + std::log(z);
  }
  if (track) {
    detail::record<T>([x, out, rows, cols]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const T g = out.grad_ptr()[r];
        const T lse = out[r];
        for (std::size_t c = 0; c < cols; ++c)
          x.grad_ptr()[r * cols + c] += g * std::exp(x[r * cols + c] - lse);
      }
    });
  }
  return out;
}

/// Mean cross-entropy of row-wise logits against integer targets.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw std::out_of_range("cross_entropy: target id " + std::to_string(t) + " outside vocab of size " +
                              std::to_string(vocab));
    }
  }
  const bool track = detail::should_track<T>(logits);
  auto out = detail::make_result<T>(Shape{1}, track);
  std::vector<T> lse(rows);
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = logits.ptr() + r * vocab;
    const T mx = *std::max_element(in, in + vocab);
    T z = T(0);
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(in[c] - mx);
    lse[r] = mx + std::log(z);
    total += lse[r] - in[targets[r]];
  }
  out[0] = total / static_cast<T>(rows);
  if (track) {
    detail::record<T>([logits, out, targets, lse = std::move(lse), rows, vocab]() mutable {
      const T g = out.grad_ptr()[0] / static_cast<T>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        T* dx = logits.grad_ptr() + r * vocab;
        const T* in = logits.ptr() + r * vocab;
        for (std::size_t c = 0; c < vocab; ++c) dx[c] += g * std::exp(in[c] - lse[r]);
        dx[targets[r]] -= g;
      }
    });
  }
  return out;
}

/// Mean squared error over all elements.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("mse", a, b);
  const auto d = sub(a, b);
  return mean(mul(d, d));
}

/// Row-wise cosine similarity -> [rows]. Zero-norm rows are rejected.
template <class T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("cosine_similarity", a, b);
  const std::size_t rows = a.rows(), cols = a.cols();
  const bool track = detail::should_track<T>(a, b);
  auto out = detail::make_result<T>(Shape{rows}, track);
  std::vector<T> na(rows), nb(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T dot = T(0), aa = T(0), bb = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      const T x = a[r * cols + c], y = b[r * cols + c];
      dot += x * y;
      aa += x * x;
      bb += y * y;
    }
    if (aa == T(0) || bb == T(0)) throw std::domain_error("cosine_similarity: zero-norm input in row " + std::to_string(r));
    na[r] = std::sqrt(aa);
    nb[r] = std::sqrt(bb);
    out[r] = dot / (na[r] * nb[r]);
  }
  if (track) {
    detail::record<T>([a, b, out, na = std::move(na), nb = std::move(nb), rows, cols]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const T g = out.grad_ptr()[r];
        const T cs = out[r];
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          if (a.requires_grad()) a.grad_ptr()[i] += g * (b[i] / (na[r] * nb[r]) - cs * a[i] / (na[r] * na[r]));
          if (b.requires_grad()) b.grad_ptr()[i] += g * (a[i] / (na[r] * nb[r]) - cs * b[i] / (nb[r] * nb[r]));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- normalization

/// y = x / sqrt(mean(x^2) + eps) * weight, over the last axis.
template <class T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps = T(1e-6)) {
  if (weight.rank() != 1 || weight.numel() != x.cols()) throw ShapeError("rmsnorm", x.shape(), weight.shape());
  const std::size_t rows = x.rows(), cols = x.cols();
  const bool track = detail::should_track<T>(x, weight);
  auto out = detail::make_result<T>(x.shape(), track);
  std::vector<T> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * cols;
    T ss = T(0);
    for (std::size_t c = 0; c < cols; ++c) ss += in[c] * in[c];
    inv[r] = T(1) / std::sqrt(ss / static_cast<T>(cols) + eps);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = in[c] * inv[r] * weight[c];
  }
  if (track) {
    detail::record<T>([x, weight, out, inv = std::move(inv), rows, cols]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.ptr() + r * cols;
        const T* g = out.grad_ptr() + r * cols;
        if (weight.requires_grad())
          for (std::size_t c = 0; c < cols; ++c) weight.grad_ptr()[c] += g[c] * in[c] * inv[r];
        if (x.requires_grad()) {
          T dot = T(0);
          for (std::size_t c = 0; c < cols; ++c) dot += g[c] * weight[c] * in[c] * inv[r];
          dot /= static_cast<T>(cols);
          T* dx = x.grad_ptr() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) dx[c] += inv[r] * (g[c] * weight[c] - in[c] * inv[r] * dot);
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, T eps = T(1e-5)) {
  if (weight.rank() != 1 || weight.numel() != x.cols()) throw ShapeError("layernorm", x.shape(), weight.shape());
  if (bias.rank() != 1 || bias.numel() != x.cols()) throw ShapeError("layernorm", x.shape(), bias.shape());
  const std::size_t rows = x.rows(), cols = x.cols();
  const bool track = detail::should_track<T>(x, weight, bias);
  auto out = detail::make_result<T>(x.shape(), track);
  std::vector<T> xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * cols;
    T mu = T(0);
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<T>(cols);
    T var = T(0);
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<T>(cols);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (in[c] - mu) * rstd[r];
      out[r * cols + c] = xhat[r * cols + c] * weight[c] + bias[c];
    }
  }
  if (track) {
    detail::record<T>([x, weight, bias, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, cols]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* g = out.grad_ptr() + r * cols;
        const T* xh = xhat.data() + r * cols;
        if (weight.requires_grad())
          for (std::size_t c = 0; c < cols; ++c) weight.grad_ptr()[c] += g[c] * xh[c];
        if (bias.requires_grad())
          for (std::size_t c = 0; c < cols; ++c) bias.grad_ptr()[c] += g[c];
        if (x.requires_grad()) {
          T mg = T(0), mgx = T(0);
          for (std::size_t c = 0; c < cols; ++c) {
            const T gw = g[c] * weight[c];
            mg += gw;
            mgx += gw * xh[c];
          }
          mg /= static_cast<T>(cols);
          mgx /= static_cast<T>(cols);
          T* dx = x.grad_ptr() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) dx[c] += rstd[r] * (g[c] * weight[c] - mg - xh[c] * mgx);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- indexing & layout

/// out[i] = src[index[i]] over rows of a rank-2 source.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& src, const std::vector<std::size_t>& index) {
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  const std::size_t rows = src.rows(), cols = src.cols();
  for (std::size_t i : index) {
    if (i >= rows) throw std::out_of_range("gather_rows: row " + std::to_string(i) + " of " + shape_str(src.shape()));
  }
  const bool track = detail::should_track<T>(src);
  auto out = detail::make_result<T>(Shape{index.size(), cols}, track);
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(src.ptr() + index[r] * cols, cols, out.ptr() + r * cols);
  if (track) {
    detail::record<T>([src, out, index, cols]() mutable {
      for (std::size_t r = 0; r < index.size(); ++r) {
        T* d = src.grad_ptr() + index[r] * cols;
        const T* g = out.grad_ptr() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) d[c] += g[c];
      }
    });
  }
  return out;
}

/// Copy of `base` with base[index[i]] replaced by src[i]. Indices must be distinct.
template <class T>
Tensor<T> scatter_rows(const Tensor<T>& base, const Tensor<T>& src, const std::vector<std::size_t>& index) {
  const std::size_t rows = base.rows(), cols = base.cols();
  if (src.cols() != cols || src.rows() != index.size()) throw ShapeError("scatter_rows", base.shape(), src.shape());
  std::vector<std::uint8_t> hit(rows, 0);
  for (std::size_t i : index) {
    if (i >= rows) throw std::out_of_range("scatter_rows: row " + std::to_string(i) + " of " + shape_str(base.shape()));
    if (hit[i]) throw std::invalid_argument("scatter_rows: duplicate row " + std::to_string(i));
    hit[i] = 1;
  }
  const bool track = detail::should_track<T>(base, src);
  auto out = detail::make_result<T>(base.shape(), track);
  std::copy(base.data().begin(), base.data().end(), out.data().begin());
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(src.ptr() + r * cols, cols, out.ptr() + index[r] * cols);
  if (track) {
    detail::record<T>([base, src, out, index, hit = std::move(hit), rows, cols]() mutable {
      if (base.requires_grad())
        for (std::size_t r = 0; r < rows; ++r)
          if (!hit[r])
            for (std::size_t c = 0; c < cols; ++c) base.grad_ptr()[r * cols + c] += out.grad_ptr()[r * cols + c];
      if (src.requires_grad())
        for (std::size_t r = 0; r < index.size(); ++r)
          for (std::size_t c = 0; c < cols; ++c) src.grad_ptr()[r * cols + c] += out.grad_ptr()[index[r] * cols + c];
    });
  }
  return out;
}

/// Concatenate rank-2 tensors along the last axis.
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols", parts.front().shape(), p.shape());
    total += p.cols();
    track = track || p.requires_grad();
  }
  track = track && active_tape<T>() != nullptr;
  auto out = detail::make_result<T>(Shape{rows, total}, track);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.ptr() + r * p.cols(), p.cols(), out.ptr() + r * total + offset);
    offset += p.cols();
  }
  if (track) {
    detail::record<T>([parts, out, rows, total]() mutable {
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad())
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < p.cols(); ++c) p.grad_ptr()[r * p.cols() + c] += out.grad_ptr()[r * total + offset + c];
        offset += p.cols();
      }
    });
  }
  return out;
}

/// Concatenate along the first axis; all inputs must agree on trailing extents.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape tail(parts.front().shape().begin() + 1, parts.front().shape().end());
  std::size_t lead = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) throw ShapeError("concat_rows", parts.front().shape(), p.shape());
    lead += p.dim(0);
    track = track || p.requires_grad();
  }
  track = track && active_tape<T>() != nullptr;
  Shape shape = parts.front().shape();
  shape[0] = lead;
  auto out = detail::make_result<T>(shape, track);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.ptr() + offset);
    offset += p.numel();
  }
  if (track) {
    detail::record<T>([parts, out]() mutable {
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad())
          for (std::size_t i = 0; i < p.numel(); ++i) p.grad_ptr()[i] += out.grad_ptr()[offset + i];
        offset += p.numel();
      }
    });
  }
  return out;
}

/// Columns [begin, end) of a tensor viewed as rows x cols.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.rows(), cols = x.cols(), width = end - begin;
  Shape shape = x.shape();
  shape.back() = width;
  const bool track = detail::should_track<T>(x);
  auto out = detail::make_result<T>(shape, track);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.ptr() + r * cols + begin, width, out.ptr() + r * width);
  if (track) {
    detail::record<T>([x, out, rows, cols, begin, width]() mutable {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < width; ++c) x.grad_ptr()[r * cols + begin + c] += out.grad_ptr()[r * width + c];
    });
  }
  return out;
}

/// Leading-axis rows [begin, end).
template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.dim(0)) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " + shape_str(x.shape()));
  }
  const std::size_t stride = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  const bool track = detail::should_track<T>(x);
  auto out = detail::make_result<T>(shape, track);
  std::copy_n(x.ptr() + begin * stride, out.numel(), out.ptr());
  if (track) {
    detail::record<T>([x, out, begin, stride]() mutable {
      for (std::size_t i = 0; i < out.numel(); ++i) x.grad_ptr()[begin * stride + i] += out.grad_ptr()[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) throw ShapeError("reshape", x.shape(), shape);
  const bool track = detail::should_track<T>(x);
  auto out = detail::make_result<T>(std::move(shape), track);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (track) {
    detail::record<T>([x, out]() mutable {
      for (std::size_t i = 0; i < x.numel(); ++i) x.grad_ptr()[i] += out.grad_ptr()[i];
    });
  }
  return out;
}

/// Forward identity; nothing flows back through it.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return x.clone();
}

// ---------------------------------------------------------------- attention

/// Rotary position embedding applied per head to x[N, heads * head_dim].
/// positions[r] is the in-sequence position of row r.
template <class T>
Tensor<T> rope(const Tensor<T>& x, const std::vector<std::size_t>& positions, std::size_t heads, double base = 10000.0) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (positions.size() != rows) throw ShapeError("rope: " + std::to_string(positions.size()) + " positions for " + shape_str(x.shape()));
  if (cols % heads != 0 || (cols / heads) % 2 != 0) throw ShapeError("rope: head dim must be even, got " + shape_str(x.shape()));
  const std::size_t hd = cols / heads, half = hd / 2;
  std::vector<T> cs(rows * half), sn(rows * half);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double angle = static_cast<double>(positions[r]) * freq;
      cs[r * half + i] = static_cast<T>(std::cos(angle));
      sn[r * half + i] = static_cast<T>(std::sin(angle));
    }
  }
  const bool track = detail::should_track<T>(x);
  auto out = detail::make_result<T>(x.shape(), track);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t a = r * cols + h * hd + i, b = a + half;
        const T c = cs[r * half + i], s = sn[r * half + i];
        out[a] = x[a] * c - x[b] * s;
        out[b] = x[a] * s + x[b] * c;
      }
  if (track) {
    detail::record<T>([x, out, cs = std::move(cs), sn = std::move(sn), rows, cols, heads, hd, half]() mutable {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t i = 0; i < half; ++i) {
            const std::size_t a = r * cols + h * hd + i, b = a + half;
            const T c = cs[r * half + i], s = sn[r * half + i];
            const T ga = out.grad_ptr()[a], gb = out.grad_ptr()[b];
            x.grad_ptr()[a] += ga * c + gb * s;
            x.grad_ptr()[b] += -ga * s + gb * c;
          }
    });
  }
  return out;
}

/// One independent sequence inside a packed row matrix, with its L x L
/// visibility matrix (row i may read column j iff allowed[i * L + j]).
struct AttentionSegment {
  std::size_t offset = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> allowed;
};

using AttentionLayout = std::vector<AttentionSegment>;

/// Masked multi-head scaled dot-product attention over packed sequences.
/// q, k, v: [N, heads * head_dim]. Every row must be allowed to see itself.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    std::shared_ptr<const AttentionLayout> layout) {
  detail::require_same("attention(q, k)", q, k);
  detail::require_same("attention(q, v)", q, v);
  const std::size_t n = q.rows(), width = q.cols();
  if (width % heads != 0) throw ShapeError("attention: width " + std::to_string(width) + " not divisible by heads");
  const std::size_t hd = width / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));
  std::size_t prob_count = 0;
  for (const auto& seg : *layout) {
    if (seg.offset + seg.length > n || seg.allowed.size() != seg.length * seg.length)
      throw ShapeError("attention: malformed segment for " + shape_str(q.shape()));
    prob_count += seg.length * seg.length * heads;
  }
  const bool track = detail::should_track<T>(q, k, v);
  auto out = detail::make_result<T>(q.shape(), track);
  auto probs = std::make_shared<AlignedVector<T>>(prob_count, T(0));
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(width));
  std::size_t pofs = 0;
  for (const auto& seg : *layout) {
    const auto len = static_cast<Eigen::Index>(seg.length);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = seg.offset * width + h * hd;
      detail::ConstStridedMap<T> qm(q.ptr() + base, len, static_cast<Eigen::Index>(hd), stride);
      detail::ConstStridedMap<T> km(k.ptr() + base, len, static_cast<Eigen::Index>(hd), stride);
      detail::ConstStridedMap<T> vm(v.ptr() + base, len, static_cast<Eigen::Index>(hd), stride);
      detail::MatMap<T> p(probs->data() + pofs, len, len);
      p.noalias() = qm * km.transpose();
      for (Eigen::Index i = 0; i < len; ++i) {
        const std::uint8_t* allow = seg.allowed.data() + static_cast<std::size_t>(i) * seg.length;
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j < len; ++j)
          if (allow[j]) mx = std::max(mx, p(i, j) * scale_factor);
        T z = T(0);
        for (Eigen::Index j = 0; j < len; ++j) {
          if (allow[j]) {
            p(i, j) = std::exp(p(i, j) * scale_factor - mx);
            z += p(i, j);
          } else {
            p(i, j) = T(0);
          }
        }
        for (Eigen::Index j = 0; j < len; ++j) p(i, j) /= z;
      }
      detail::StridedMap<T>(out.ptr() + base, len, static_cast<Eigen::Index>(hd), stride).noalias() = p * vm;
      pofs += seg.length * seg.length;
    }
  }
  if (track) {
    detail::record<T>([q, k, v, out, probs, layout, heads, hd, width, scale_factor]() mutable {
      const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(width));
      const auto ehd = static_cast<Eigen::Index>(hd);
      std::size_t pofs = 0;
      detail::RowMatrix<T> dp, ds;
      for (const auto& seg : *layout) {
        const auto len = static_cast<Eigen::Index>(seg.length);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t base = seg.offset * width + h * hd;
          detail::ConstStridedMap<T> qm(q.ptr() + base, len, ehd, stride);
          detail::ConstStridedMap<T> km(k.ptr() + base, len, ehd, stride);
          detail::ConstStridedMap<T> vm(v.ptr() + base, len, ehd, stride);
          detail::ConstStridedMap<T> dout(out.grad_ptr() + base, len, ehd, stride);
          detail::ConstMatMap<T> p(probs->data() + pofs, len, len);
          if (v.requires_grad()) detail::StridedMap<T>(v.grad_ptr() + base, len, ehd, stride).noalias() += p.transpose() * dout;
          dp.noalias() = dout * vm.transpose();
          ds.resize(len, len);
          for (Eigen::Index i = 0; i < len; ++i) {
            T dot = T(0);
            for (Eigen::Index j = 0; j < len; ++j) dot += dp(i, j) * p(i, j);
            for (Eigen::Index j = 0; j < len; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * scale_factor;
          }
          if (q.requires_grad()) detail::StridedMap<T>(q.grad_ptr() + base, len, ehd, stride).noalias() += ds * km;
          if (k.requires_grad()) detail::StridedMap<T>(k.grad_ptr() + base, len, ehd, stride).noalias() += ds.transpose() * qm;
          pofs += seg.length * seg.length;
        }
      }
    });
  }
  return out;
}

}  // namespace unihetero
