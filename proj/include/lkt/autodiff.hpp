// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation whose inputs require gradients, in the order
// the operations run. Tape::backward walks that record once in reverse and
// accumulates gradients into every node that requires them. Leaf gradients
// accumulate across calls; interior gradients are reset at the start of each
// backward pass.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "lkt/tensor.hpp"

namespace lkt {

template <typename T>
class Tape;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  Tape<T>* tape = nullptr;
  std::size_t position = 0;

  /// Gradient buffer, zero-initialised on first use.
  Tensor<T>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<T>(value.shape());
      has_grad = true;
    }
    return grad;
  }
};

/// Handle to a value on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }

  /// Accumulated gradient; zeros if backward never reached this value.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& handle() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Node<T>&)>;

  /// With grad disabled nothing is recorded and every result is a constant.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Records an operation. The backward rule is stored only when at least
  /// one input requires a gradient.
  Var<T> record(Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn backward);

  /// Propagates d(loss)/d(node) to every recorded node. The loss must be a
  /// single-element value produced on this tape.
  void backward(const Var<T>& loss);

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  bool grad_enabled_;
  std::vector<std::shared_ptr<Node<T>>> nodes_;
};

// ---- operations ------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// a · bᵀ for a [m×k], b [n×k].
template <typename T>
Var<T> matmul_bt(const Var<T>& a, const Var<T>& b);
/// x · W + bias, with W [in×out] and bias [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
/// Adds a [cols] vector to every row.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> sum(const Var<T>& a);

template <typename T>
Var<T> sigmoid(const Var<T>& x);
template <typename T>
Var<T> tanh(const Var<T>& x);
/// Tanh approximation of GELU.
template <typename T>
Var<T> gelu(const Var<T>& x);

template <typename T>
Var<T> softmax_rows(const Var<T>& x);
/// Row softmax where columns >= key_length receive weight exactly 0.
template <typename T>
Var<T> masked_softmax_rows(const Var<T>& x, std::size_t key_length);

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                  T eps = T(1e-5));

/// Rows of `table` selected by `ids`; any id outside [0, V) throws
/// OutOfVocabularyError.
template <typename T>
Var<T> embedding_lookup(const Var<T>& table, std::span<const std::int32_t> ids);
/// Like embedding_lookup, but a negative id yields a zero row.
template <typename T>
Var<T> embedding_lookup_or_zero(const Var<T>& table, std::span<const std::int32_t> ids);

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> rows);
/// x[rows[i], cols[i]] for each i, as a [n] vector.
template <typename T>
Var<T> gather_elements(const Var<T>& x, std::span<const std::size_t> rows,
                       std::span<const std::size_t> cols);
template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t start, std::size_t count);
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts);

/// Inverted dropout; returns `x` itself when not training or p == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, T p, std::mt19937_64& rng, bool training);

inline constexpr double kProbabilityClamp = 1e-7;

/// Binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]. The sum
/// is divided by `denominator` (defaults to the number of labels).
template <typename T>
Var<T> bce_loss(const Var<T>& probs, std::span<const T> labels, double denominator = 0.0);

/// Softmax cross-entropy of each row of `logits` against `targets`, summed and
/// divided by `denominator` (defaults to the number of rows).
template <typename T>
Var<T> cross_entropy_rows(const Var<T>& logits, std::span<const std::int32_t> targets,
                          double denominator = 0.0);

}  // namespace lkt
