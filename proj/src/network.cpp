#include "metadrop/network.hpp"

#include <cmath>
#include <stdexcept>

namespace metadrop {

namespace {

std::string layer_name(std::size_t l, const char* leaf) {
  return "layer" + std::to_string(l) + "." + leaf;
}

Tensor he_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::param(std::move(shape), std::move(v));
}

}  // namespace

Network Network::dense_stack(const std::vector<std::int64_t>& dims, std::int64_t classes,
                             bool standardize) {
  if (dims.size() < 2) throw std::invalid_argument("dense_stack needs input and one hidden dim");
  Network net;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    if (dims[i] < 1 || dims[i + 1] < 1) throw std::invalid_argument("layer dims must be >= 1");
    net.layers_.push_back({LayerKind::dense, dims[i], dims[i + 1], 0, standardize});
  }
  net.classes_ = classes;
  net.feature_dim_ = dims.back();
  return net;
}

Network Network::conv_stack(std::int64_t in_channels, std::int64_t image_size,
                            std::int64_t channels, std::int64_t depth, std::int64_t classes,
                            bool standardize) {
  Network net;
  net.image_size_ = image_size;
  std::int64_t c = in_channels, s = image_size;
  for (std::int64_t l = 0; l < depth; ++l) {
    if (s < 2) throw std::invalid_argument("image too small for conv depth");
    net.layers_.push_back({LayerKind::conv, c, channels, 3, standardize});
    net.spatial_.push_back(s);
    c = channels;
    s /= 2;
  }
  net.classes_ = classes;
  net.feature_dim_ = channels * s * s;
  return net;
}

bool Network::has_standardize() const {
  for (const auto& l : layers_) {
    if (l.standardize) return true;
  }
  return false;
}

ParamSet Network::init_params(std::uint64_t seed) const {
  Rng rng(seed, 0xBACC0FF5ULL);
  ParamSet p;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& spec = layers_[l];
    if (spec.kind == LayerKind::dense) {
      p.insert(layer_name(l, "w"), he_uniform({spec.fan_in, spec.fan_out}, spec.fan_in, rng));
      p.insert(layer_name(l, "b"),
               Tensor::param({1, spec.fan_out}, std::vector<double>(spec.fan_out, 0.0)));
    } else {
      const std::int64_t k = spec.kernel;
      p.insert(layer_name(l, "w"),
               he_uniform({spec.fan_out, spec.fan_in, k, k}, spec.fan_in * k * k, rng));
      p.insert(layer_name(l, "b"), Tensor::param({spec.fan_out}, std::vector<double>(spec.fan_out, 0.0)));
    }
    if (spec.standardize) {
      Shape ss = spec.kind == LayerKind::dense ? Shape{1, spec.fan_out}
                                               : Shape{1, spec.fan_out, 1, 1};
      p.insert(layer_name(l, "scale"),
               Tensor::param(ss, std::vector<double>(spec.fan_out, 1.0)));
      p.insert(layer_name(l, "shift"),
               Tensor::param(ss, std::vector<double>(spec.fan_out, 0.0)));
    }
  }
  p.insert("head.w", he_uniform({feature_dim_, classes_}, feature_dim_, rng));
  p.insert("head.b", Tensor::param({1, classes_}, std::vector<double>(classes_, 0.0)));
  return p;
}

Shape Network::preact_shape(std::size_t layer, std::int64_t batch) const {
  const auto& spec = layers_.at(layer);
  if (spec.kind == LayerKind::dense) return {batch, spec.fan_out};
  return {batch, spec.fan_out, spatial_[layer], spatial_[layer]};
}

Shape Network::input_shape(std::int64_t batch) const {
  const auto& first = layers_.front();
  if (first.kind == LayerKind::dense) return {batch, first.fan_in};
  return {batch, first.fan_in, image_size_, image_size_};
}

Tensor Network::features(const ParamSet& theta, const Tensor& x,
                         const ForwardHooks* hooks) const {
  Tensor h = x;
  if (hooks && hooks->input) h = hooks->input(h);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& spec = layers_[l];
    Tensor f;
    if (spec.kind == LayerKind::dense) {
      f = add(matmul(h, theta.at(layer_name(l, "w"))), theta.at(layer_name(l, "b")));
    } else {
      f = conv2d(h, theta.at(layer_name(l, "w")), theta.at(layer_name(l, "b")));
    }
    if (spec.standardize) {
      f = add(mul(batch_standardize(f), theta.at(layer_name(l, "scale"))),
              theta.at(layer_name(l, "shift")));
    }
    if (hooks && hooks->preact) f = hooks->preact(l, f, h);
    Tensor a = relu(f);
    if (spec.kind == LayerKind::conv) a = maxpool2d(a);
    if (hooks && hooks->post) a = hooks->post(l, a);
    h = a;
  }
  if (layers_.back().kind == LayerKind::conv) {
    h = reshape(h, {h.shape()[0], feature_dim_});
  }
  if (hooks && hooks->features) h = hooks->features(h);
  return h;
}

Tensor Network::classify(const ParamSet& theta, const Tensor& feats) const {
  return add(matmul(feats, theta.at("head.w")), theta.at("head.b"));
}

Tensor Network::forward(const ParamSet& theta, const Tensor& x,
                        const ForwardHooks* hooks) const {
  return classify(theta, features(theta, x, hooks));
}

Tensor Network::forward(const ParamSet& theta, const Tensor& x, const NoisePlan& plan) const {
  ForwardHooks hooks;
  hooks.preact = [&plan](std::size_t l, const Tensor& f, const Tensor&) {
    if (l >= plan.z.size() || !plan.z[l].defined()) return f;
    if (plan.z[l].shape() != f.shape()) {
      throw ShapeError("noise plan entry " + std::to_string(l) + " has shape " +
                       shape_str(plan.z[l].shape()) + ", pre-activation is " +
                       shape_str(f.shape()));
    }
    return plan.site == NoisePlan::Site::multiplicative ? mul(f, plan.z[l])
                                                        : add(f, plan.z[l]);
  };
  return forward(theta, x, &hooks);
}

}  // namespace metadrop
