// SPDX-License-Identifier: Apache-2.0
#include "lkt/autodiff.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>

namespace lkt {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.ptr(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

template <typename T>
Tape<T>& tape_of(const Var<T>& v) {
  if (!v.valid() || v.node()->tape == nullptr) {
    throw std::logic_error("operation on a value that does not belong to a tape");
  }
  return *v.node()->tape;
}

template <typename T>
void require_rank2(const Var<T>& v, const char* op) {
  if (v.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_to_string(v.shape()));
  }
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

/// Applies f elementwise; df(x, y) gives dy/dx from the input and output.
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const auto& in = x.value();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return tape_of(x).record(std::move(out), {x}, [df](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * df(src.value[i], self.value[i]);
    }
  });
}

}  // namespace

// ---- Tape -------------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = requires_grad && grad_enabled_;
  node->tape = this;
  if (node->requires_grad) {
    node->position = nodes_.size();
    nodes_.push_back(node);
  }
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->tape = this;
  node->leaf = false;
  bool any = false;
  for (const auto& in : inputs) {
    if (in.node()->tape != this) {
      throw std::logic_error("operation mixes values from different tapes");
    }
    any = any || in.requires_grad();
  }
  if (grad_enabled_ && any) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.handle());
    node->position = nodes_.size();
    nodes_.push_back(node);
  }
  return Var<T>(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (!loss.valid() || loss.node()->tape != this || !loss.requires_grad() ||
      loss.node()->position >= nodes_.size() || nodes_[loss.node()->position] != loss.handle()) {
    throw std::logic_error("backward: loss was not recorded on this tape");
  }
  if (loss.value().size() != 1) {
    throw DimensionError("backward: loss must be a scalar, got " +
                         shape_to_string(loss.shape()));
  }
  for (auto& n : nodes_) {
    if (!n->leaf && n->has_grad) n->grad.fill(T{0});
  }
  auto* root = loss.node();
  if (root->leaf) {
    root->grad_buffer()[0] += T{1};
    return;
  }
  root->grad_buffer()[0] = T{1};
  for (std::size_t i = root->position + 1; i-- > 0;) {
    auto& n = *nodes_[i];
    if (!n.leaf && n.has_grad && n.backward) n.backward(n);
  }
}

// ---- linear algebra ---------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));
  }
  Tensor<T> out({m, n});
  as_matrix(out, m, n).noalias() = as_matrix(a.value(), m, k) * as_matrix(b.value(), k, n);
  return tape_of(a).record(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    auto gc = as_matrix(std::as_const(self.grad), m, n);
    if (na.requires_grad) {
      as_matrix(na.grad_buffer(), m, k).noalias() +=
          gc * as_matrix(std::as_const(nb.value), k, n).transpose();
    }
    if (nb.requires_grad) {
      as_matrix(nb.grad_buffer(), k, n).noalias() +=
          as_matrix(std::as_const(na.value), m, k).transpose() * gc;
    }
  });
}

template <typename T>
Var<T> matmul_bt(const Var<T>& a, const Var<T>& b) {
  require_rank2(a, "matmul_bt");
  require_rank2(b, "matmul_bt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_bt: inner dimensions differ, " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()) + "^T");
  }
  Tensor<T> out({m, n});
  as_matrix(out, m, n).noalias() =
      as_matrix(a.value(), m, k) * as_matrix(b.value(), n, k).transpose();
  return tape_of(a).record(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    auto gc = as_matrix(std::as_const(self.grad), m, n);
    if (na.requires_grad) {
      as_matrix(na.grad_buffer(), m, k).noalias() += gc * as_matrix(std::as_const(nb.value), n, k);
    }
    if (nb.requires_grad) {
      as_matrix(nb.grad_buffer(), n, k).noalias() +=
          gc.transpose() * as_matrix(std::as_const(na.value), m, k);
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank2(x, "linear");
  require_rank2(weight, "linear");
  const std::size_t m = x.shape()[0], k = x.shape()[1], n = weight.shape()[1];
  if (weight.shape()[0] != k || bias.value().size() != n) {
    throw DimensionError("linear: shapes " + shape_to_string(x.shape()) + ", " +
                         shape_to_string(weight.shape()) + ", bias " +
                         shape_to_string(bias.shape()) + " are incompatible");
  }
  Tensor<T> out({m, n});
  auto o = as_matrix(out, m, n);
  o.noalias() = as_matrix(x.value(), m, k) * as_matrix(weight.value(), k, n);
  o.rowwise() += as_matrix(bias.value(), 1, n).row(0);
  return tape_of(x).record(std::move(out), {x, weight, bias}, [m, k, n](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nw = *self.inputs[1];
    auto& nb = *self.inputs[2];
    auto gc = as_matrix(std::as_const(self.grad), m, n);
    if (nx.requires_grad) {
      as_matrix(nx.grad_buffer(), m, k).noalias() += gc * as_matrix(std::as_const(nw.value), k, n).transpose();
    }
    if (nw.requires_grad) {
      as_matrix(nw.grad_buffer(), k, n).noalias() +=
          as_matrix(std::as_const(nx.value), m, k).transpose() * gc;
    }
    if (nb.requires_grad) {
      as_matrix(nb.grad_buffer(), 1, n).row(0) += gc.colwise().sum();
    }
  });
}

// ---- elementwise ------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return tape_of(a).record(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const std::size_t cols = x.value().cols(), rows = x.value().rows();
  if (bias.value().size() != cols) {
    throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) +
                         " does not match last dim of " + shape_to_string(x.shape()));
  }
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += bias.value()[c];
  }
  return tape_of(x).record(std::move(out), {x, bias}, [rows, cols](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (nx.requires_grad) {
      auto& g = nx.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad.at(r, c);
      }
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return tape_of(a).record(std::move(out), {a, b}, [](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.value[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return unary(
      a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T total{0};
  for (auto v : a.value().data()) total += v;
  return tape_of(a).record(Tensor<T>::scalar(total), {a}, [](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.grad_buffer();
    const T d = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d;
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(
      x,
      [](T v) {
        if (v >= 0) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  return unary(
      x,
      [](T v) { return T(0.5) * v * (T{1} + std::tanh(kC * (v + kA * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(kC * (v + kA * v * v * v));
        return T(0.5) * (T{1} + t) +
               T(0.5) * v * (T{1} - t * t) * kC * (T{1} + T{3} * kA * v * v);
      });
}

// ---- normalisation ----------------------------------------------------------

template <typename T>
Var<T> masked_softmax_rows(const Var<T>& x, std::size_t key_length) {
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  if (key_length == 0 || key_length > cols) {
    throw DimensionError("masked_softmax_rows: key length " + std::to_string(key_length) +
                         " outside [1, " + std::to_string(cols) + "]");
  }
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = x.value().row(r);
    auto o = out.row(r);
    T mx = in[0];
    for (std::size_t c = 1; c < key_length; ++c) mx = std::max(mx, in[c]);
    T total{0};
    for (std::size_t c = 0; c < key_length; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (std::size_t c = 0; c < key_length; ++c) o[c] /= total;
  }
  return tape_of(x).record(std::move(out), {x}, [rows, cols, key_length](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      auto y = self.value.row(r);
      auto gy = self.grad.row(r);
      T dot{0};
      for (std::size_t c = 0; c < key_length; ++c) dot += y[c] * gy[c];
      auto gx = g.row(r);
      for (std::size_t c = 0; c < key_length; ++c) gx[c] += y[c] * (gy[c] - dot);
    }
    (void)cols;
  });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  return masked_softmax_rows(x, x.value().cols());
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  if (!(eps > T{0})) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t rows = x.value().rows(), d = x.value().cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: affine parameters must have length " + std::to_string(d));
  }
  Tensor<T> out(x.shape());
  Tensor<T> normed(x.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = x.value().row(r);
    T mean{0};
    for (auto v : in) mean += v;
    mean /= static_cast<T>(d);
    T var{0};
    for (auto v : in) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    auto nrow = normed.row(r);
    auto orow = out.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      nrow[c] = (in[c] - mean) * inv_std[r];
      orow[c] = nrow[c] * gain.value()[c] + bias.value()[c];
    }
  }
  return tape_of(x).record(
      std::move(out), {x, gain, bias},
      [rows, d, normed = std::move(normed), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& nx = *self.inputs[0];
        auto& ng = *self.inputs[1];
        auto& nb = *self.inputs[2];
        std::vector<T> dnorm(d);
        for (std::size_t r = 0; r < rows; ++r) {
          auto gy = self.grad.row(r);
          auto xh = normed.row(r);
          if (ng.requires_grad) {
            auto& g = ng.grad_buffer();
            for (std::size_t c = 0; c < d; ++c) g[c] += gy[c] * xh[c];
          }
          if (nb.requires_grad) {
            auto& g = nb.grad_buffer();
            for (std::size_t c = 0; c < d; ++c) g[c] += gy[c];
          }
          if (nx.requires_grad) {
            T mean_d{0}, mean_dx{0};
            for (std::size_t c = 0; c < d; ++c) {
              dnorm[c] = gy[c] * ng.value[c];
              mean_d += dnorm[c];
              mean_dx += dnorm[c] * xh[c];
            }
            mean_d /= static_cast<T>(d);
            mean_dx /= static_cast<T>(d);
            auto gx = nx.grad_buffer().row(r);
            for (std::size_t c = 0; c < d; ++c) {
              gx[c] += inv_std[r] * (dnorm[c] - mean_d - xh[c] * mean_dx);
            }
          }
        }
      });
}

// ---- indexing ---------------------------------------------------------------

namespace {

template <typename T>
Var<T> lookup_impl(const Var<T>& table, std::span<const std::int32_t> ids, bool allow_zero) {
  require_rank2(table, "embedding_lookup");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw DimensionError("embedding_lookup: no ids");
  std::vector<std::int32_t> rows(ids.begin(), ids.end());
  Tensor<T> out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto id = rows[i];
    if (id < 0 && allow_zero) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw OutOfVocabularyError("embedding_lookup: id " + std::to_string(id) +
                                 " outside vocabulary of size " + std::to_string(vocab));
    }
    auto src = table.value().row(static_cast<std::size_t>(id));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return tape_of(table).record(std::move(out), {table}, [rows = std::move(rows)](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0) continue;
      auto dst = g.row(static_cast<std::size_t>(rows[i]));
      auto gr = self.grad.row(i);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += gr[c];
    }
  });
}

}  // namespace

template <typename T>
Var<T> embedding_lookup(const Var<T>& table, std::span<const std::int32_t> ids) {
  return lookup_impl(table, ids, false);
}

template <typename T>
Var<T> embedding_lookup_or_zero(const Var<T>& table, std::span<const std::int32_t> ids) {
  return lookup_impl(table, ids, true);
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> rows) {
  const std::size_t n_rows = x.value().rows(), cols = x.value().cols();
  if (rows.empty()) throw DimensionError("gather_rows: no rows requested");
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor<T> out({idx.size(), cols});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n_rows) {
      throw DimensionError("gather_rows: row " + std::to_string(idx[i]) + " out of range for " +
                           shape_to_string(x.shape()));
    }
    auto src = x.value().row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return tape_of(x).record(std::move(out), {x}, [idx = std::move(idx)](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = g.row(idx[i]);
      auto gr = self.grad.row(i);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += gr[c];
    }
  });
}

template <typename T>
Var<T> gather_elements(const Var<T>& x, std::span<const std::size_t> rows,
                       std::span<const std::size_t> cols) {
  if (rows.size() != cols.size() || rows.empty()) {
    throw DimensionError("gather_elements: need equal, nonempty row/col index lists");
  }
  const std::size_t n_cols = x.value().cols(), n_rows = x.value().rows();
  std::vector<std::size_t> flat(rows.size());
  Tensor<T> out({rows.size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n_rows || cols[i] >= n_cols) {
      throw DimensionError("gather_elements: index out of range for " + shape_to_string(x.shape()));
    }
    flat[i] = rows[i] * n_cols + cols[i];
    out[i] = x.value()[flat[i]];
  }
  return tape_of(x).record(std::move(out), {x}, [flat = std::move(flat)](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.grad_buffer();
    for (std::size_t i = 0; i < flat.size(); ++i) g[flat[i]] += self.grad[i];
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t start, std::size_t count) {
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  if (count == 0 || start + count > cols) {
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_to_string(x.shape()));
  }
  Tensor<T> out({rows, count});
  for (std::size_t r = 0; r < rows; ++r) {
    auto src = x.value().row(r).subspan(start, count);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return tape_of(x).record(std::move(out), {x}, [rows, start, count](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      auto dst = g.row(r).subspan(start, count);
      auto gr = self.grad.row(r);
      for (std::size_t c = 0; c < count; ++c) dst[c] += gr[c];
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.value().rows() != rows) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor<T> out({rows, total});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r) {
      auto src = p.value().row(r);
      std::copy(src.begin(), src.end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
    }
    offset += w;
  }
  return tape_of(parts[0]).record(std::move(out), parts, [rows, widths](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      auto& in = *self.inputs[p];
      const std::size_t w = widths[p];
      if (in.requires_grad) {
        auto& g = in.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          auto gr = self.grad.row(r).subspan(off, w);
          auto dst = g.row(r);
          for (std::size_t c = 0; c < w; ++c) dst[c] += gr[c];
        }
      }
      off += w;
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t cols = parts[0].value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != cols) throw DimensionError("concat_rows: column counts differ");
    total += p.value().rows();
  }
  Tensor<T> out({total, cols});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.value().size();
  }
  return tape_of(parts[0]).record(std::move(out), parts, [](Node<T>& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->value.size();
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, T p, std::mt19937_64& rng, bool training) {
  if (!(p >= T{0} && p < T{1})) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (!training || p == T{0}) return x;
  const T keep_scale = T{1} / (T{1} - p);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Tensor<T> mask(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = uniform(rng) < static_cast<double>(p) ? T{0} : keep_scale;
    out[i] = x.value()[i] * mask[i];
  }
  return tape_of(x).record(std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

// ---- losses -----------------------------------------------------------------

template <typename T>
Var<T> bce_loss(const Var<T>& probs, std::span<const T> labels, double denominator) {
  if (labels.empty()) throw std::invalid_argument("bce_loss: no masked positions");
  if (probs.value().size() != labels.size()) {
    throw DimensionError("bce_loss: " + std::to_string(probs.value().size()) +
                         " probabilities vs " + std::to_string(labels.size()) + " labels");
  }
  const double denom = denominator > 0.0 ? denominator : static_cast<double>(labels.size());
  const double lo = kProbabilityClamp, hi = 1.0 - kProbabilityClamp;
  std::vector<T> y(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double p = std::clamp(static_cast<double>(probs.value()[i]), lo, hi);
    total -= y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
  }
  return tape_of(probs).record(
      Tensor<T>::scalar(static_cast<T>(total / denom)), {probs},
      [y = std::move(y), denom, lo, hi](Node<T>& self) {
        auto& src = *self.inputs[0];
        if (!src.requires_grad) return;
        auto& g = src.grad_buffer();
        const double d = static_cast<double>(self.grad[0]) / denom;
        for (std::size_t i = 0; i < y.size(); ++i) {
          const double p = static_cast<double>(src.value[i]);
          if (p <= lo || p >= hi) continue;
          g[i] += static_cast<T>(d * (-y[i] / p + (1.0 - y[i]) / (1.0 - p)));
        }
      });
}

template <typename T>
Var<T> cross_entropy_rows(const Var<T>& logits, std::span<const std::int32_t> targets,
                          double denominator) {
  const std::size_t rows = logits.value().rows(), cols = logits.value().cols();
  if (targets.empty()) throw std::invalid_argument("cross_entropy_rows: no masked positions");
  if (targets.size() != rows) throw DimensionError("cross_entropy_rows: one target per row required");
  const double denom = denominator > 0.0 ? denominator : static_cast<double>(rows);
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  Tensor<T> probs(logits.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= cols) {
      throw OutOfVocabularyError("cross_entropy_rows: target " + std::to_string(tgt[r]) +
                                 " outside [0, " + std::to_string(cols) + ")");
    }
    auto in = logits.value().row(r);
    auto pr = probs.row(r);
    double mx = in[0];
    for (auto v : in) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(in[c]) - mx);
    for (std::size_t c = 0; c < cols; ++c) {
      pr[c] = static_cast<T>(std::exp(static_cast<double>(in[c]) - mx) / z);
    }
    total += std::log(z) + mx - static_cast<double>(in[static_cast<std::size_t>(tgt[r])]);
  }
  return tape_of(logits).record(
      Tensor<T>::scalar(static_cast<T>(total / denom)), {logits},
      [tgt = std::move(tgt), probs = std::move(probs), denom](Node<T>& self) {
        auto& src = *self.inputs[0];
        if (!src.requires_grad) return;
        auto& g = src.grad_buffer();
        const T d = static_cast<T>(static_cast<double>(self.grad[0]) / denom);
        for (std::size_t r = 0; r < tgt.size(); ++r) {
          auto gr = g.row(r);
          auto pr = probs.row(r);
          for (std::size_t c = 0; c < gr.size(); ++c) gr[c] += d * pr[c];
          gr[static_cast<std::size_t>(tgt[r])] -= d;
        }
      });
}

// ---- explicit instantiation ------------------------------------------------

#define LKT_INSTANTIATE(T)                                                                  \
  template class Tape<T>;                                                                   \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                     \
  template Var<T> matmul_bt(const Var<T>&, const Var<T>&);                                  \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                      \
  template Var<T> add(const Var<T>&, const Var<T>&);                                        \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                   \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                        \
  template Var<T> scale(const Var<T>&, T);                                                  \
  template Var<T> sum(const Var<T>&);                                                       \
  template Var<T> sigmoid(const Var<T>&);                                                   \
  template Var<T> tanh(const Var<T>&);                                                      \
  template Var<T> gelu(const Var<T>&);                                                      \
  template Var<T> softmax_rows(const Var<T>&);                                              \
  template Var<T> masked_softmax_rows(const Var<T>&, std::size_t);                          \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);               \
  template Var<T> embedding_lookup(const Var<T>&, std::span<const std::int32_t>);           \
  template Var<T> embedding_lookup_or_zero(const Var<T>&, std::span<const std::int32_t>);   \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                 \
  template Var<T> gather_elements(const Var<T>&, std::span<const std::size_t>,              \
                                  std::span<const std::size_t>);                            \
  template Var<T> slice_cols(const Var<T>&, std::size_t, std::size_t);                      \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                                  \
  template Var<T> concat_rows(const std::vector<Var<T>>&);                                  \
  template Var<T> dropout(const Var<T>&, T, std::mt19937_64&, bool);                        \
  template Var<T> bce_loss(const Var<T>&, std::span<const T>, double);                      \
  template Var<T> cross_entropy_rows(const Var<T>&, std::span<const std::int32_t>, double);

LKT_INSTANTIATE(float)
LKT_INSTANTIATE(double)

#undef LKT_INSTANTIATE

}  // namespace lkt
