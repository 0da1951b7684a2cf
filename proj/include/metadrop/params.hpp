#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metadrop/tensor.hpp"

namespace metadrop {

/// Named, ordered collection of tensors. Iteration order is insertion order,
/// which every consumer (gradients, optimizer, checkpoints) relies on.
class ParamSet {
 public:
  void insert(std::string name, Tensor t);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  void set(const std::string& name, Tensor t) { at(name) = std::move(t); }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  const std::pair<std::string, Tensor>& item(std::size_t i) const { return items_[i]; }

  std::vector<std::string> names() const;
  std::vector<Tensor> tensors() const;
  std::int64_t numel() const;

  /// Same names and shapes, values from `f(name, tensor)`.
  template <class F>
  ParamSet map(F f) const {
    ParamSet out;
    for (const auto& [name, t] : items_) out.insert(name, f(name, t));
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gradient of a scalar with respect to every tensor in `inputs`,
/// name-aligned. Unreachable entries come back as zeros.
ParamSet grad(const Tensor& output, const ParamSet& inputs, bool create_graph = false);

/// True when both sets hold identical names, shapes and bit-identical values.
bool bitwise_equal(const ParamSet& a, const ParamSet& b);

}  // namespace metadrop
