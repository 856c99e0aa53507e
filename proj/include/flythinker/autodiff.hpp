// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

// Tape-based reverse-mode differentiation over dense row-major tensors.
//
// A Tape records every op's output value together with a closure that
// propagates the output gradient back to the op's inputs. Ops are recorded in
// execution order, which is already a topological order, so backward() is a
// single reverse sweep. Parameters live in a ParamStore outside the tape; the
// tape only borrows their values and accumulates into their gradients.

#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "flythinker/tensor.hpp"

namespace flythinker {

// Named parameters with same-shaped gradients, iterated in name order.
// Gradients are mutable so a const store can still be the target of a
// backward pass; the parameter values themselves only change through the
// non-const accessors (optimizer steps, checkpoint restore).
template <typename T>
class ParamStore {
 public:
  struct Entry {
    Tensor<T> value;
    mutable Tensor<T> grad;
  };

  void add(const std::string& name, Tensor<T> value);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor<T>& value(const std::string& name) const;
  Tensor<T>& value(const std::string& name);
  Tensor<T>& grad(const std::string& name) const;

  void zero_grad() const;
  std::vector<std::string> names() const;
  std::size_t parameter_count() const;
  std::size_t tensor_count() const { return entries_.size(); }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<U>());
    return out;
  }

 private:
  std::map<std::string, Entry> entries_;
};

struct Var {
  static constexpr std::uint32_t kInvalid = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = kInvalid;
  bool valid() const noexcept { return id != kInvalid; }
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, Var self)>;

  // With track_gradients=false the tape only evaluates values; no closures
  // are stored and backward() is an error.
  explicit Tape(bool track_gradients = true) : track_(track_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor<T> value);
  // Leaf that owns its gradient (read back with grad()).
  Var variable(Tensor<T> value);
  // Leaf bound to a stored parameter; gradients land in store.grad(name).
  Var parameter(const ParamStore<T>& store, const std::string& name);

  const Tensor<T>& value(Var v) const;
  // Gradient of the last backward() w.r.t. v; zeros if v was unreachable.
  const Tensor<T>& grad(Var v);
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }
  bool tracking() const noexcept { return track_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Every store
  // that contributed a parameter has its gradients zeroed first, so
  // parameters not reachable from the loss end with zero gradient.
  void backward(Var loss);

  // --- op-implementation interface -------------------------------------
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, Backward backward, const char* op);
  Tensor<T>& grad_buffer(Var v);

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* borrowed = nullptr;
    Tensor<T> grad;
    Tensor<T>* grad_sink = nullptr;
    bool grad_ready = false;
    bool requires_grad = false;
    Backward backward;
  };

  std::uint32_t check(Var v) const;

  std::vector<Node> nodes_;
  std::vector<const ParamStore<T>*> stores_;
  bool track_;
  bool consumed_ = false;
};

// Differentiable ops. All of them validate shapes and throw DimensionError on
// mismatch; outputs are checked for NaN/Inf (NonFiniteError).
namespace ad {

template <typename T> Var matmul(Tape<T>& t, Var a, Var b);
// a[m x k] * b[n x k]^T
template <typename T> Var matmul_nt(Tape<T>& t, Var a, Var b);
// x[m x k] * w[k x n] + bias[n]; bias may be an invalid Var.
template <typename T> Var linear(Tape<T>& t, Var x, Var w, Var bias);
template <typename T> Var add(Tape<T>& t, Var a, Var b);
template <typename T> Var mul(Tape<T>& t, Var a, Var b);
template <typename T> Var scale(Tape<T>& t, Var a, double s);
template <typename T> Var sum(Tape<T>& t, Var a);
template <typename T> Var tanh(Tape<T>& t, Var a);
template <typename T> Var gelu(Tape<T>& t, Var a);

// out[i] = table[index[i]], or a zero row where index[i] < 0.
template <typename T> Var gather_rows(Tape<T>& t, Var table, std::span<const std::int64_t> index);
// out[i] = base[i] + s * src[index[i]] where index[i] >= 0, else base[i]
// copied unchanged.
template <typename T>
Var add_gathered_rows(Tape<T>& t, Var base, Var src, std::span<const std::int64_t> index, double s);

template <typename T> Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, double eps = 1e-5);
template <typename T> Var softmax_rows(Tape<T>& t, Var x);

// Multi-head causal self-attention over packed rows. qkv holds `batch`
// sequences of `seq_len` rows each, columns laid out [q | k | v] with
// heads contiguous inside each third. Returns [batch*seq_len x d].
template <typename T> Var causal_attention(Tape<T>& t, Var qkv, std::size_t n_heads, std::size_t seq_len);

// Mean over rows with mask[i] != 0 of -log softmax(logits[i])[targets[i]].
template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask);

}  // namespace ad

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace flythinker
