// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include "flythinker/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "kernels.hpp"

namespace flythinker {

// ---------------------------------------------------------------------------
// ParamStore

template <typename T>
void ParamStore<T>::add(const std::string& name, Tensor<T> value) {
  if (entries_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
  Tensor<T> grad(value.shape());
  entries_.emplace(name, Entry{std::move(value), std::move(grad)});
}

template <typename T>
const Tensor<T>& ParamStore<T>::value(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second.value;
}

template <typename T>
Tensor<T>& ParamStore<T>::value(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second.value;
}

template <typename T>
Tensor<T>& ParamStore<T>::grad(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second.grad;
}

template <typename T>
void ParamStore<T>::zero_grad() const {
  for (const auto& [name, e] : entries_) e.grad.fill(T(0));
}

template <typename T>
std::vector<std::string> ParamStore<T>::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) n += e.value.size();
  return n;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
std::uint32_t Tape<T>::check(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw DimensionError("invalid tape variable");
  return v.id;
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::variable(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = track_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::parameter(const ParamStore<T>& store, const std::string& name) {
  Node n;
  n.borrowed = &store.value(name);
  if (track_) {
    n.requires_grad = true;
    n.grad_sink = &store.grad(name);
    if (std::find(stores_.begin(), stores_.end(), &store) == stores_.end()) stores_.push_back(&store);
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  const Node& n = nodes_[check(v)];
  return n.borrowed ? *n.borrowed : n.value;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(Var v) {
  Node& n = nodes_[check(v)];
  if (n.grad_sink) {
    n.grad_ready = true;
    return *n.grad_sink;
  }
  if (!n.grad_ready) {
    n.grad = Tensor<T>(value(v).shape());
    n.grad_ready = true;
  }
  return n.grad;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(Var v) {
  return grad_buffer(v);
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::initializer_list<Var> inputs, Backward backward, const char* op) {
  if (!value.all_finite()) throw NonFiniteError(std::string(op) + " produced a non-finite value");
  Node n;
  n.value = std::move(value);
  if (track_) {
    for (Var in : inputs) {
      if (in.valid() && nodes_[check(in)].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
void Tape<T>::backward(Var loss) {
  if (!track_) throw StaleGraphError("backward() on a tape recorded without gradient tracking");
  if (consumed_) throw StaleGraphError("backward() called twice on the same recorded forward pass");
  const std::uint32_t root = check(loss);
  if (value(loss).size() != 1) throw DimensionError("backward() requires a scalar loss");
  consumed_ = true;
  for (const ParamStore<T>* s : stores_) s->zero_grad();
  grad_buffer(loss)[0] = T(1);
  for (std::int64_t i = root; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.grad_ready || !n.backward) continue;
    n.backward(*this, Var{static_cast<std::uint32_t>(i)});
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace ad {
namespace {

template <typename T>
void require_matrix(const Tensor<T>& x, const char* op) {
  if (x.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(x.shape()));
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  require_matrix(A, "matmul");
  require_matrix(B, "matmul");
  if (A.cols() != B.rows()) {
    throw DimensionError("matmul: " + shape_string(A.shape()) + " * " + shape_string(B.shape()));
  }
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor<T> C({m, n});
  kernels::gemm_nn(m, k, n, A.data(), B.data(), C.data(), false);
  return t.record(std::move(C), {a, b}, [a, b, m, k, n](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    if (tp.requires_grad(a)) {
      kernels::gemm_nt(m, n, k, G.data(), tp.value(b).data(), tp.grad_buffer(a).data(), true);
    }
    if (tp.requires_grad(b)) {
      kernels::gemm_tn(k, m, n, tp.value(a).data(), G.data(), tp.grad_buffer(b).data(), true);
    }
  }, "matmul");
}

template <typename T>
Var matmul_nt(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  require_matrix(A, "matmul_nt");
  require_matrix(B, "matmul_nt");
  if (A.cols() != B.cols()) {
    throw DimensionError("matmul_nt: " + shape_string(A.shape()) + " * " + shape_string(B.shape()) + "^T");
  }
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor<T> C({m, n});
  kernels::gemm_nt(m, k, n, A.data(), B.data(), C.data(), false);
  return t.record(std::move(C), {a, b}, [a, b, m, k, n](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    if (tp.requires_grad(a)) {
      kernels::gemm_nn(m, n, k, G.data(), tp.value(b).data(), tp.grad_buffer(a).data(), true);
    }
    if (tp.requires_grad(b)) {
      kernels::gemm_tn(n, m, k, G.data(), tp.value(a).data(), tp.grad_buffer(b).data(), true);
    }
  }, "matmul_nt");
}

template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var bias) {
  const auto& X = t.value(x);
  const auto& W = t.value(w);
  require_matrix(X, "linear");
  require_matrix(W, "linear");
  if (X.cols() != W.rows()) {
    throw DimensionError("linear: " + shape_string(X.shape()) + " * " + shape_string(W.shape()));
  }
  const std::size_t m = X.rows(), k = X.cols(), n = W.cols();
  Tensor<T> Y({m, n});
  kernels::gemm_nn(m, k, n, X.data(), W.data(), Y.data(), false);
  if (bias.valid()) {
    const auto& B = t.value(bias);
    if (B.size() != n) throw DimensionError("linear: bias " + shape_string(B.shape()) + " for width " + std::to_string(n));
    for (std::size_t r = 0; r < m; ++r) {
      T* y = Y.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) y[j] += B[j];
    }
  }
  return t.record(std::move(Y), {x, w, bias}, [x, w, bias, m, k, n](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    if (tp.requires_grad(x)) {
      kernels::gemm_nt(m, n, k, G.data(), tp.value(w).data(), tp.grad_buffer(x).data(), true);
    }
    if (tp.requires_grad(w)) {
      kernels::gemm_tn(k, m, n, tp.value(x).data(), G.data(), tp.grad_buffer(w).data(), true);
    }
    if (bias.valid() && tp.requires_grad(bias)) {
      T* gb = tp.grad_buffer(bias).data();
      for (std::size_t r = 0; r < m; ++r) {
        const T* g = G.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[j];
      }
    }
  }, "linear");
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.shape() != B.shape()) {
    throw DimensionError("add: " + shape_string(A.shape()) + " + " + shape_string(B.shape()));
  }
  Tensor<T> C = A;
  add_into(C, B);
  return t.record(std::move(C), {a, b}, [a, b](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    if (tp.requires_grad(a)) add_into(tp.grad_buffer(a), G);
    if (tp.requires_grad(b)) add_into(tp.grad_buffer(b), G);
  }, "add");
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.shape() != B.shape()) {
    throw DimensionError("mul: " + shape_string(A.shape()) + " * " + shape_string(B.shape()));
  }
  Tensor<T> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
  return t.record(std::move(C), {a, b}, [a, b](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad_buffer(a);
      const auto& vb = tp.value(b);
      for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * vb[i];
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad_buffer(b);
      const auto& va = tp.value(a);
      for (std::size_t i = 0; i < G.size(); ++i) gb[i] += G[i] * va[i];
    }
  }, "mul");
}

template <typename T>
Var scale(Tape<T>& t, Var a, double s) {
  const auto& A = t.value(a);
  const T f = static_cast<T>(s);
  Tensor<T> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * f;
  return t.record(std::move(C), {a}, [a, f](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * f;
  }, "scale");
}

template <typename T>
Var sum(Tape<T>& t, Var a) {
  const auto& A = t.value(a);
  T s = 0;
  for (T v : A.values()) s += v;
  return t.record(Tensor<T>({1}, {s}), {a}, [a](Tape<T>& tp, Var self) {
    const T g = tp.grad(self)[0];
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  }, "sum");
}

template <typename T>
Var tanh(Tape<T>& t, Var a) {
  const auto& A = t.value(a);
  Tensor<T> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = std::tanh(A[i]);
  return t.record(std::move(C), {a}, [a](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    const auto& Y = tp.value(self);
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * (T(1) - Y[i] * Y[i]);
  }, "tanh");
}

template <typename T>
Var gelu(Tape<T>& t, Var a) {
  const auto& A = t.value(a);
  Tensor<T> C(A.shape());
  std::vector<T> th(A.size());
  kernels::gelu(A.size(), A.data(), C.data(), th.data());
  return t.record(std::move(C), {a}, [a, th = std::move(th)](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    const auto& X = tp.value(a);
    auto& ga = tp.grad_buffer(a);
    constexpr T c = kernels::kGeluC<T>;
    for (std::size_t i = 0; i < G.size(); ++i) {
      const T x = X[i];
      const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
      ga[i] += G[i] * (T(0.5) * (T(1) + th[i]) + T(0.5) * x * (T(1) - th[i] * th[i]) * du);
    }
  }, "gelu");
}

template <typename T>
Var gather_rows(Tape<T>& t, Var table, std::span<const std::int64_t> index) {
  const auto& Tb = t.value(table);
  require_matrix(Tb, "gather_rows");
  const std::size_t d = Tb.cols();
  Tensor<T> out({index.size(), d});
  for (std::size_t i = 0; i < index.size(); ++i) {
    const std::int64_t src = index[i];
    if (src < 0) continue;
    if (static_cast<std::size_t>(src) >= Tb.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(src) + " out of range for " +
                           shape_string(Tb.shape()));
    }
    std::copy_n(Tb.data() + static_cast<std::size_t>(src) * d, d, out.data() + i * d);
  }
  std::vector<std::int64_t> idx(index.begin(), index.end());
  return t.record(std::move(out), {table}, [table, idx = std::move(idx), d](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    auto& gt = tp.grad_buffer(table);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0) continue;
      T* dst = gt.data() + static_cast<std::size_t>(idx[i]) * d;
      const T* g = G.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
    }
  }, "gather_rows");
}

template <typename T>
Var add_gathered_rows(Tape<T>& t, Var base, Var src, std::span<const std::int64_t> index, double s) {
  const auto& B = t.value(base);
  const auto& S = t.value(src);
  require_matrix(B, "add_gathered_rows");
  require_matrix(S, "add_gathered_rows");
  if (B.cols() != S.cols()) {
    throw DimensionError("add_gathered_rows: base " + shape_string(B.shape()) + " vs source " +
                         shape_string(S.shape()));
  }
  if (index.size() != B.rows()) throw DimensionError("add_gathered_rows: index length != base rows");
  const std::size_t d = B.cols();
  const T f = static_cast<T>(s);
  Tensor<T> out = B;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const std::int64_t r = index[i];
    if (r < 0) continue;
    if (static_cast<std::size_t>(r) >= S.rows()) {
      throw DimensionError("add_gathered_rows: source row " + std::to_string(r) + " out of range");
    }
    T* o = out.data() + i * d;
    const T* x = S.data() + static_cast<std::size_t>(r) * d;
    for (std::size_t j = 0; j < d; ++j) o[j] += f * x[j];
  }
  std::vector<std::int64_t> idx(index.begin(), index.end());
  return t.record(std::move(out), {base, src}, [base, src, idx = std::move(idx), d, f](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    if (tp.requires_grad(base)) add_into(tp.grad_buffer(base), G);
    if (tp.requires_grad(src)) {
      auto& gs = tp.grad_buffer(src);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0) continue;
        T* dst = gs.data() + static_cast<std::size_t>(idx[i]) * d;
        const T* g = G.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += f * g[j];
      }
    }
  }, "add_gathered_rows");
}

template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, double eps) {
  const auto& X = t.value(x);
  const auto& Gn = t.value(gain);
  const auto& Bs = t.value(bias);
  require_matrix(X, "layer_norm");
  const std::size_t m = X.rows(), d = X.cols();
  if (Gn.size() != d || Bs.size() != d) throw DimensionError("layer_norm: gain/bias width mismatch");
  Tensor<T> Y({m, d});
  std::vector<T> rstd(m);
  const T e = static_cast<T>(eps);
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = X.data() + r * d;
    kernels::layer_norm_row(d, xr, Gn.data(), Bs.data(), e, Y.data() + r * d);
    T mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    rstd[r] = T(1) / std::sqrt(var / static_cast<T>(d) + e);
  }
  return t.record(std::move(Y), {x, gain, bias}, [x, gain, bias, m, d, rstd = std::move(rstd)](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    const auto& X = tp.value(x);
    const auto& Gn = tp.value(gain);
    const bool need_x = tp.requires_grad(x);
    const bool need_g = tp.requires_grad(gain);
    const bool need_b = tp.requires_grad(bias);
    T* gx = need_x ? tp.grad_buffer(x).data() : nullptr;
    T* gg = need_g ? tp.grad_buffer(gain).data() : nullptr;
    T* gb = need_b ? tp.grad_buffer(bias).data() : nullptr;
    std::vector<T> xhat(d), dxhat(d);
    for (std::size_t r = 0; r < m; ++r) {
      const T* xr = X.data() + r * d;
      const T* g = G.data() + r * d;
      T mean = 0;
      for (std::size_t i = 0; i < d; ++i) mean += xr[i];
      mean /= static_cast<T>(d);
      T sum_dxhat = 0, sum_dxhat_xhat = 0;
      for (std::size_t i = 0; i < d; ++i) {
        xhat[i] = (xr[i] - mean) * rstd[r];
        dxhat[i] = g[i] * Gn[i];
        sum_dxhat += dxhat[i];
        sum_dxhat_xhat += dxhat[i] * xhat[i];
        if (gg) gg[i] += g[i] * xhat[i];
        if (gb) gb[i] += g[i];
      }
      if (gx) {
        const T inv_d = T(1) / static_cast<T>(d);
        T* gxr = gx + r * d;
        for (std::size_t i = 0; i < d; ++i) {
          gxr[i] += rstd[r] * (dxhat[i] - inv_d * sum_dxhat - xhat[i] * inv_d * sum_dxhat_xhat);
        }
      }
    }
  }, "layer_norm");
}

template <typename T>
Var softmax_rows(Tape<T>& t, Var x) {
  const auto& X = t.value(x);
  require_matrix(X, "softmax_rows");
  if (!X.all_finite()) throw NonFiniteError("softmax_rows: non-finite input");
  const std::size_t m = X.rows(), n = X.cols();
  Tensor<T> Y({m, n});
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = X.data() + r * n;
    T* yr = Y.data() + r * n;
    const T mx = *std::max_element(xr, xr + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  return t.record(std::move(Y), {x}, [x, m, n](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    const auto& Y = tp.value(self);
    auto& gx = tp.grad_buffer(x);
    for (std::size_t r = 0; r < m; ++r) {
      const T* g = G.data() + r * n;
      const T* y = Y.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      T* o = gx.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += y[j] * (g[j] - dot);
    }
  }, "softmax_rows");
}

template <typename T>
Var causal_attention(Tape<T>& t, Var qkv, std::size_t n_heads, std::size_t seq_len) {
  const auto& QKV = t.value(qkv);
  require_matrix(QKV, "causal_attention");
  if (QKV.cols() % 3 != 0) throw DimensionError("causal_attention: qkv width not divisible by 3");
  const std::size_t d = QKV.cols() / 3;
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
  if (seq_len == 0 || QKV.rows() % seq_len != 0) throw DimensionError("causal_attention: rows not a multiple of seq_len");
  const std::size_t batch = QKV.rows() / seq_len;
  const std::size_t hd = d / n_heads;
  const std::size_t N = seq_len;
  const std::size_t stride = 3 * d;
  const T sc = T(1) / std::sqrt(static_cast<T>(hd));

  Tensor<T> out({batch * N, d});
  // Attention probabilities per (sequence, head), kept for the backward pass.
  std::vector<T> probs(batch * n_heads * N * N, T(0));
  kernels::RowMat<T> S(N, N);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* base = QKV.data() + b * N * stride;
    for (std::size_t h = 0; h < n_heads; ++h) {
      auto Q = kernels::cmap(base + h * hd, N, hd, stride);
      auto K = kernels::cmap(base + d + h * hd, N, hd, stride);
      auto V = kernels::cmap(base + 2 * d + h * hd, N, hd, stride);
      S.noalias() = Q * K.transpose();
      T* P = probs.data() + (b * n_heads + h) * N * N;
      for (std::size_t i = 0; i < N; ++i) kernels::softmax_row(i + 1, S.data() + i * N, sc, P + i * N);
      auto O = kernels::map(out.data() + b * N * d + h * hd, N, hd, d);
      O.noalias() = kernels::cmap(P, N, N, N) * V;
    }
  }
  return t.record(std::move(out), {qkv},
                  [qkv, batch, n_heads, N, d, hd, stride, sc, probs = std::move(probs)](Tape<T>& tp, Var self) {
    const auto& G = tp.grad(self);
    const auto& QKV = tp.value(qkv);
    auto& gq = tp.grad_buffer(qkv);
    kernels::RowMat<T> dP(N, N);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* base = QKV.data() + b * N * stride;
      T* gbase = gq.data() + b * N * stride;
      for (std::size_t h = 0; h < n_heads; ++h) {
        auto Q = kernels::cmap(base + h * hd, N, hd, stride);
        auto K = kernels::cmap(base + d + h * hd, N, hd, stride);
        auto V = kernels::cmap(base + 2 * d + h * hd, N, hd, stride);
        auto dO = kernels::cmap(G.data() + b * N * d + h * hd, N, hd, d);
        auto P = kernels::cmap(probs.data() + (b * n_heads + h) * N * N, N, N, N);
        auto dQ = kernels::map(gbase + h * hd, N, hd, stride);
        auto dK = kernels::map(gbase + d + h * hd, N, hd, stride);
        auto dV = kernels::map(gbase + 2 * d + h * hd, N, hd, stride);
        dV.noalias() += P.transpose() * dO;
        dP.noalias() = dO * V.transpose();
        // dS = P * (dP - rowsum(dP * P)), then fold in the 1/sqrt(hd) scale.
        for (std::size_t i = 0; i < N; ++i) {
          T dot = 0;
          for (std::size_t j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
          for (std::size_t j = 0; j <= i; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * sc;
          for (std::size_t j = i + 1; j < N; ++j) dP(i, j) = 0;
        }
        dQ.noalias() += dP * K;
        dK.noalias() += dP.transpose() * Q;
      }
    }
  }, "causal_attention");
}

template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
  const auto& L = t.value(logits);
  require_matrix(L, "cross_entropy");
  const std::size_t m = L.rows(), V = L.cols();
  if (targets.size() != m || mask.size() != m) throw DimensionError("cross_entropy: targets/mask length != rows");
  std::size_t count = 0;
  for (std::size_t r = 0; r < m; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= V) {
      throw VocabularyError("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary of " +
                            std::to_string(V));
    }
    ++count;
  }
  if (count == 0) throw EmptyLossError("cross_entropy: no positions selected by the loss mask");
  double total = 0;
  for (std::size_t r = 0; r < m; ++r) {
    if (!mask[r]) continue;
    const T* x = L.data() + r * V;
    const T mx = *std::max_element(x, x + V);
    T z = 0;
    for (std::size_t j = 0; j < V; ++j) z += std::exp(x[j] - mx);
    total += static_cast<double>(std::log(z) + mx - x[targets[r]]);
  }
  const T loss = static_cast<T>(total / static_cast<double>(count));
  std::vector<TokenId> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return t.record(Tensor<T>({1}, {loss}), {logits},
                  [logits, m, V, count, tg = std::move(tg), mk = std::move(mk)](Tape<T>& tp, Var self) {
    const T g = tp.grad(self)[0] / static_cast<T>(count);
    const auto& L = tp.value(logits);
    auto& gl = tp.grad_buffer(logits);
    for (std::size_t r = 0; r < m; ++r) {
      if (!mk[r]) continue;
      const T* x = L.data() + r * V;
      T* o = gl.data() + r * V;
      const T mx = *std::max_element(x, x + V);
      T z = 0;
      for (std::size_t j = 0; j < V; ++j) z += std::exp(x[j] - mx);
      for (std::size_t j = 0; j < V; ++j) o[j] += g * std::exp(x[j] - mx) / z;
      o[tg[r]] -= g;
    }
  }, "cross_entropy");
}

#define FLYTHINKER_INSTANTIATE_OPS(T)                                                               \
  template Var matmul<T>(Tape<T>&, Var, Var);                                                      \
  template Var matmul_nt<T>(Tape<T>&, Var, Var);                                                   \
  template Var linear<T>(Tape<T>&, Var, Var, Var);                                                 \
  template Var add<T>(Tape<T>&, Var, Var);                                                         \
  template Var mul<T>(Tape<T>&, Var, Var);                                                         \
  template Var scale<T>(Tape<T>&, Var, double);                                                    \
  template Var sum<T>(Tape<T>&, Var);                                                              \
  template Var tanh<T>(Tape<T>&, Var);                                                             \
  template Var gelu<T>(Tape<T>&, Var);                                                             \
  template Var gather_rows<T>(Tape<T>&, Var, std::span<const std::int64_t>);                       \
  template Var add_gathered_rows<T>(Tape<T>&, Var, Var, std::span<const std::int64_t>, double);    \
  template Var layer_norm<T>(Tape<T>&, Var, Var, Var, double);                                     \
  template Var softmax_rows<T>(Tape<T>&, Var);                                                     \
  template Var causal_attention<T>(Tape<T>&, Var, std::size_t, std::size_t);                       \
  template Var cross_entropy<T>(Tape<T>&, Var, std::span<const TokenId>, std::span<const std::uint8_t>);

FLYTHINKER_INSTANTIATE_OPS(float)
FLYTHINKER_INSTANTIATE_OPS(double)
#undef FLYTHINKER_INSTANTIATE_OPS

}  // namespace ad

template class ParamStore<float>;
template class ParamStore<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace flythinker
