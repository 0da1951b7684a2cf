#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace metadrop {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised whenever an operation produces NaN or Inf; values never propagate.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Tensor;
class Tape;

/// One value in the computation graph. Nodes produced while a tape is
/// recording keep references to their parents plus a rule that maps the
/// upstream gradient to parent gradients; everything else is a plain
/// constant buffer.
struct TensorNode : std::enable_shared_from_this<TensorNode> {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;

  // set only for recorded ops
  const char* op_name = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  // (upstream grad, this node) -> one gradient per parent. Implementations
  // build the result out of tensor ops so that grad-of-grad works; they must
  // reach parents/outputs through `self`, never by capturing tensors.
  std::function<std::vector<Tensor>(const Tensor& grad, TensorNode& self)> backward;
  Tape* tape = nullptr;
  std::size_t tape_index = 0;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

/// Value-semantics handle to a graph node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor constant(Shape shape, std::vector<double> data);
  static Tensor param(Shape shape, std::vector<double> data);  // grad-enabled leaf
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);  // rank-0 constant

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  std::span<const double> data() const { return node_->data; }
  /// In-place access for leaves (optimizer updates). Never call on a tensor
  /// that is part of a live tape.
  std::vector<double>& leaf_data();

  double item() const;
  double at(std::int64_t i) const { return node_->data[static_cast<std::size_t>(i)]; }

  const std::shared_ptr<TensorNode>& node() const { return node_; }
  TensorNode* raw() const { return node_.get(); }

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Ordered record of the operations of one differentiable computation.
/// A tape is confined to the thread that opened it.
class Tape {
 public:
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<TensorNode>>& nodes() const { return nodes_; }
  void record(const std::shared_ptr<TensorNode>& n);
  void clear();

 private:
  std::vector<std::shared_ptr<TensorNode>> nodes_;
};

/// Makes a tape the active recording target for the current thread.
class TapeScope {
 public:
  TapeScope();                // owns a fresh tape
  explicit TapeScope(Tape* existing);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape& tape() { return *tape_; }

 private:
  std::unique_ptr<Tape> owned_;
  Tape* tape_ = nullptr;
  Tape* prev_ = nullptr;
};

/// Suspends recording; ops evaluate to constants inside the scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

Tape* active_tape();
bool recording_enabled();

}  // namespace metadrop
