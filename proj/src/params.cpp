#include "metadrop/params.hpp"

#include <stdexcept>

#include "metadrop/ops.hpp"

namespace metadrop {

void ParamSet::insert(std::string name, Tensor t) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  index_.emplace(name, items_.size());
  items_.emplace_back(std::move(name), std::move(t));
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return items_[it->second].second;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return items_[it->second].second;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const auto& [name, t] : items_) out.push_back(name);
  return out;
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& [name, t] : items_) out.push_back(t);
  return out;
}

std::int64_t ParamSet::numel() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

ParamSet grad(const Tensor& output, const ParamSet& inputs, bool create_graph) {
  std::vector<Tensor> g = grad(output, inputs.tensors(), create_graph);
  ParamSet out;
  std::size_t i = 0;
  for (const auto& [name, t] : inputs) out.insert(name, g[i++]);
  return out;
}

bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& [na, ta] = a.item(i);
    const auto& [nb, tb] = b.item(i);
    if (na != nb || ta.shape() != tb.shape()) return false;
    const auto da = ta.data();
    const auto db = tb.data();
    for (std::size_t j = 0; j < da.size(); ++j) {
      if (da[j] != db[j]) return false;
    }
  }
  return true;
}

}  // namespace metadrop
