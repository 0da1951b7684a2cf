#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "metadrop/ops.hpp"
#include "metadrop/params.hpp"
#include "metadrop/rng.hpp"

namespace metadrop {

enum class LayerKind { dense, conv };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::int64_t fan_in = 0;   // dense: input features, conv: input channels
  std::int64_t fan_out = 0;  // dense: output features, conv: output channels
  std::int64_t kernel = 3;   // conv only
  bool standardize = false;
};

/// Extension points threaded through a forward pass. Every hook is optional;
/// each receives the tensor it may replace and must return a tensor of the
/// same shape.
struct ForwardHooks {
  std::function<Tensor(const Tensor& x)> input;
  // pre-activation of layer l (after standardization), with the layer input
  std::function<Tensor(std::size_t layer, const Tensor& f, const Tensor& h_prev)> preact;
  // activation of layer l (after relu and pooling)
  std::function<Tensor(std::size_t layer, const Tensor& h)> post;
  // final features before the linear classifier
  std::function<Tensor(const Tensor& feats)> features;
};

/// Per-layer noise tensors for injection into a forward pass. Undefined
/// entries leave the layer untouched.
struct NoisePlan {
  enum class Site { multiplicative, additive };
  Site site = Site::multiplicative;
  std::vector<Tensor> z;
};

/// Immutable network description: a stack of hidden layers and a final
/// linear classifier. Conv stacks follow each layer with 2x2 max pooling.
class Network {
 public:
  /// dims = {input, hidden...}; e.g. {2, 64, 64, 64} with `classes` outputs.
  static Network dense_stack(const std::vector<std::int64_t>& dims, std::int64_t classes,
                             bool standardize = false);
  static Network conv_stack(std::int64_t in_channels, std::int64_t image_size,
                            std::int64_t channels, std::int64_t depth, std::int64_t classes,
                            bool standardize = true);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::int64_t num_classes() const { return classes_; }
  std::int64_t feature_dim() const { return feature_dim_; }
  std::int64_t image_size() const { return image_size_; }
  bool has_standardize() const;

  /// He-uniform weights, zero biases; bit-identical for equal seeds.
  ParamSet init_params(std::uint64_t seed) const;

  Tensor forward(const ParamSet& theta, const Tensor& x,
                 const ForwardHooks* hooks = nullptr) const;
  Tensor forward(const ParamSet& theta, const Tensor& x, const NoisePlan& plan) const;
  Tensor features(const ParamSet& theta, const Tensor& x,
                  const ForwardHooks* hooks = nullptr) const;
  Tensor classify(const ParamSet& theta, const Tensor& feats) const;

  /// Shape of layer `l`'s pre-activation for a batch of n instances.
  Shape preact_shape(std::size_t layer, std::int64_t batch) const;
  Shape input_shape(std::int64_t batch) const;

 private:
  std::vector<LayerSpec> layers_;
  std::int64_t classes_ = 0;
  std::int64_t feature_dim_ = 0;
  std::int64_t image_size_ = 0;  // conv stacks only
  std::vector<std::int64_t> spatial_;  // conv: input spatial size per layer
};

}  // namespace metadrop
