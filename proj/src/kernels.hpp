// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

// Dense kernels shared by the autodiff ops and the incremental decode path.
// Matrix products go through Eigen maps over the row-major buffers; Eigen is
// built without OpenMP here, so results are bit-reproducible for a given shape.

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <algorithm>
#include <cstddef>
#include <limits>

namespace flythinker::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <typename T>
MapMat<T> map(T* p, std::size_t rows, std::size_t cols, std::size_t stride) {
  return MapMat<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                   Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}
template <typename T>
MapConstMat<T> cmap(const T* p, std::size_t rows, std::size_t cols, std::size_t stride) {
  return MapConstMat<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                        Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}

// c[m x n] (+)= a[m x k] * b[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  auto C = map(c, m, n, n);
  if (accumulate) C.noalias() += cmap(a, m, k, k) * cmap(b, k, n, n);
  else C.noalias() = cmap(a, m, k, k) * cmap(b, k, n, n);
}

// c[m x n] (+)= a[m x k] * b[n x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  auto C = map(c, m, n, n);
  if (accumulate) C.noalias() += cmap(a, m, k, k) * cmap(b, n, k, k).transpose();
  else C.noalias() = cmap(a, m, k, k) * cmap(b, n, k, k).transpose();
}

// c[m x n] (+)= a[k x m]^T * b[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  auto C = map(c, m, n, n);
  if (accumulate) C.noalias() += cmap(a, k, m, m).transpose() * cmap(b, k, n, n);
  else C.noalias() = cmap(a, k, m, m).transpose() * cmap(b, k, n, n);
}

// y[n] = x[k] * w[k x n] (+ bias). Accumulates row by row of w so every output
// sees the same summation order regardless of n.
template <typename T>
void vec_mat(std::size_t k, std::size_t n, const T* x, const T* w, const T* bias, T* y) {
  for (std::size_t j = 0; j < n; ++j) y[j] = T(0);
  for (std::size_t i = 0; i < k; ++i) {
    const T xi = x[i];
    const T* wr = w + i * n;
    for (std::size_t j = 0; j < n; ++j) y[j] += xi * wr[j];
  }
  if (bias) {
    for (std::size_t j = 0; j < n; ++j) y[j] += bias[j];
  }
}

// y[n] = x[k] * w[n x k]^T
template <typename T>
void vec_mat_t(std::size_t k, std::size_t n, const T* x, const T* w, T* y) {
  for (std::size_t j = 0; j < n; ++j) {
    const T* wr = w + j * k;
    T acc = T(0);
    for (std::size_t i = 0; i < k; ++i) acc += x[i] * wr[i];
    y[j] = acc;
  }
}

template <typename T>
void layer_norm_row(std::size_t d, const T* x, const T* gain, const T* bias, T eps, T* y) {
  T mean = 0;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<T>(d);
  T var = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const T c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<T>(d);
  const T rstd = T(1) / std::sqrt(var + eps);
  for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
}

template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)

// Vectorized transcendental math runs on a 64-byte aligned scratch buffer
// padded to a multiple of 16 lanes, so every element takes the packet path
// and the result does not depend on the caller's alignment or length.
template <typename T>
using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;

inline constexpr std::size_t kLanes = 16;

inline std::size_t padded(std::size_t n) { return (n + kLanes - 1) / kLanes * kLanes; }

template <typename T>
Arr<T>& scratch(int slot, std::size_t n) {
  thread_local Arr<T> buf[2];
  Arr<T>& b = buf[slot];
  if (static_cast<std::size_t>(b.size()) < n) b.resize(static_cast<Eigen::Index>(n));
  return b;
}

// Tanh-approximated GELU over n values. `th` receives tanh of the inner
// argument for the backward pass; y may alias x.
template <typename T>
void gelu(std::size_t n, const T* x, T* y, T* th) {
  const std::size_t np = padded(n);
  Arr<T>& X = scratch<T>(0, np);
  Arr<T>& Th = scratch<T>(1, np);
  std::copy_n(x, n, X.data());
  std::fill(X.data() + n, X.data() + np, T(0));
  const auto Xs = X.head(static_cast<Eigen::Index>(np));
  Th.head(static_cast<Eigen::Index>(np)) = (kGeluC<T> * (Xs + T(0.044715) * Xs * Xs * Xs)).tanh();
  for (std::size_t i = 0; i < n; ++i) {
    th[i] = Th[static_cast<Eigen::Index>(i)];
    y[i] = T(0.5) * X[static_cast<Eigen::Index>(i)] * (T(1) + th[i]);
  }
}

// y = softmax(scale * x) over n values.
template <typename T>
void softmax_row(std::size_t n, const T* x, T scale, T* y) {
  const std::size_t np = padded(n);
  Arr<T>& P = scratch<T>(0, np);
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    P[static_cast<Eigen::Index>(i)] = x[i] * scale;
    mx = std::max(mx, P[static_cast<Eigen::Index>(i)]);
  }
  for (std::size_t i = 0; i < n; ++i) P[static_cast<Eigen::Index>(i)] -= mx;
  std::fill(P.data() + n, P.data() + np, T(0));
  auto Ps = P.head(static_cast<Eigen::Index>(np));
  Ps = Ps.exp();
  std::fill(P.data() + n, P.data() + np, T(0));
  const T sum = Ps.sum();
  for (std::size_t i = 0; i < n; ++i) y[i] = P[static_cast<Eigen::Index>(i)] / sum;
}

}  // namespace flythinker::kernels
