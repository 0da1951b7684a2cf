#include "metadrop/tensor.hpp"

#include <sstream>

namespace metadrop {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace {
thread_local Tape* t_active_tape = nullptr;
thread_local int t_no_grad_depth = 0;

std::shared_ptr<TensorNode> make_leaf(Shape shape, std::vector<double> data, bool with_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = with_grad;
  return n;
}
}  // namespace

Tape* active_tape() { return t_active_tape; }
bool recording_enabled() { return t_active_tape != nullptr && t_no_grad_depth == 0; }

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
  return Tensor(make_leaf(std::move(shape), std::move(data), false));
}

Tensor Tensor::param(Shape shape, std::vector<double> data) {
  return Tensor(make_leaf(std::move(shape), std::move(data), true));
}

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return constant(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double v) {
  auto n = shape_numel(shape);
  return constant(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v));
}

Tensor Tensor::scalar(double v) { return constant({}, {v}); }

std::vector<double>& Tensor::leaf_data() {
  if (node_->backward) throw TapeError("leaf_data() on a recorded op output");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->data[0];
}

void Tape::record(const std::shared_ptr<TensorNode>& n) {
  n->tape = this;
  n->tape_index = nodes_.size();
  nodes_.push_back(n);
}

void Tape::clear() {
  for (auto& n : nodes_) {
    // break parent links so long chains do not free recursively
    n->parents.clear();
    n->backward = nullptr;
    n->tape = nullptr;
  }
  nodes_.clear();
}

TapeScope::TapeScope() : owned_(std::make_unique<Tape>()), tape_(owned_.get()) {
  prev_ = t_active_tape;
  t_active_tape = tape_;
}

TapeScope::TapeScope(Tape* existing) : tape_(existing) {
  prev_ = t_active_tape;
  t_active_tape = tape_;
}

TapeScope::~TapeScope() {
  t_active_tape = prev_;
  if (owned_) owned_->clear();
}

NoGradGuard::NoGradGuard() { ++t_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --t_no_grad_depth; }

}  // namespace metadrop
