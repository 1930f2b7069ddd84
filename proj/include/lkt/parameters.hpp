// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lkt/autodiff.hpp"
#include "lkt/tensor.hpp"

namespace lkt {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Ordered, named model parameters with gradient buffers.
template <typename T>
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    index_.emplace(name, params_.size());
    Tensor<T> grad(value.shape());
    params_.push_back({std::move(name), std::move(value), std::move(grad)});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(T{0});
  }

  /// Leaves for every parameter, in order.
  std::vector<Var<T>> bind(Tape<T>& tape, bool requires_grad) const {
    std::vector<Var<T>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(tape.leaf(p.value, requires_grad));
    return out;
  }

  /// Adds the gradients collected on bound leaves into the parameter buffers.
  void accumulate(const std::vector<Var<T>>& bound) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!bound[i].requires_grad() || !bound[i].node()->has_grad) continue;
      const auto& g = bound[i].node()->grad;
      auto& dst = params_[i].grad;
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g[j];
    }
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Text manifest followed by little-endian float blobs in manifest order.
struct CheckpointTensor {
  std::string name;
  std::string dtype;  // "f32" or "f64"
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string kind;
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<CheckpointTensor> tensors;

  const std::string& get(const std::string& key) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(const std::string& bytes);

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename T>
std::vector<CheckpointTensor> export_tensors(const ParameterSet<T>& params) {
  std::vector<CheckpointTensor> out;
  for (const auto& p : params) {
    out.push_back({p.name, dtype_name<T>(), p.value.shape(),
                   std::vector<double>(p.value.data().begin(), p.value.data().end())});
  }
  return out;
}

/// Copies checkpoint tensors into `params`, matching by name and shape.
template <typename T>
void import_tensors(ParameterSet<T>& params, const std::vector<CheckpointTensor>& tensors) {
  if (tensors.size() != params.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(tensors.size()) +
                             " tensors, model expects " + std::to_string(params.size()));
  }
  for (const auto& t : tensors) {
    auto& p = params[params.index_of(t.name)];
    if (p.value.shape() != t.shape) {
      throw DimensionError("checkpoint tensor " + t.name + " has shape " +
                           shape_to_string(t.shape) + ", model expects " +
                           shape_to_string(p.value.shape()));
    }
    for (std::size_t i = 0; i < t.values.size(); ++i) p.value[i] = static_cast<T>(t.values[i]);
  }
}

}  // namespace lkt
