#include "metadrop/noise.hpp"

#include <cmath>
#include <stdexcept>

namespace metadrop {

namespace {

std::string noise_name(std::size_t l, const char* head, const char* leaf) {
  return std::string("noise.") + head + std::to_string(l) + "." + leaf;
}

}  // namespace

NoiseMode parse_noise_mode(const std::string& s) {
  if (s == "none") return NoiseMode::none;
  if (s == "mult_softplus") return NoiseMode::mult_softplus;
  if (s == "additive") return NoiseMode::additive;
  if (s == "fixed_gaussian") return NoiseMode::fixed_gaussian;
  if (s == "independent_gaussian") return NoiseMode::independent_gaussian;
  if (s == "weight_gaussian") return NoiseMode::weight_gaussian;
  if (s == "deterministic") return NoiseMode::deterministic;
  if (s == "learned_variance") return NoiseMode::learned_variance;
  throw std::invalid_argument("unknown noise mode: " + s);
}

std::string to_string(NoiseMode m) {
  switch (m) {
    case NoiseMode::none: return "none";
    case NoiseMode::mult_softplus: return "mult_softplus";
    case NoiseMode::additive: return "additive";
    case NoiseMode::fixed_gaussian: return "fixed_gaussian";
    case NoiseMode::independent_gaussian: return "independent_gaussian";
    case NoiseMode::weight_gaussian: return "weight_gaussian";
    case NoiseMode::deterministic: return "deterministic";
    case NoiseMode::learned_variance: return "learned_variance";
  }
  return "?";
}

NoiseGenerator::NoiseGenerator(const Network& net, NoiseConfig cfg) : net_(&net), cfg_(cfg) {
  if (cfg_.lambda <= 0.0) throw std::invalid_argument("noise lambda must be > 0");
}

ParamSet NoiseGenerator::init_params(std::uint64_t seed, const ParamSet* theta) const {
  (void)seed;  // every family starts from a fixed point, seed kept for the interface
  ParamSet phi;
  const auto& layers = net_->layers();
  auto zeros = [](Shape s) {
    auto n = static_cast<std::size_t>(shape_numel(s));
    return Tensor::param(std::move(s), std::vector<double>(n, 0.0));
  };
  auto affine = [&](std::size_t l, const char* head) {
    const auto& spec = layers[l];
    if (spec.kind == LayerKind::dense) {
      phi.insert(noise_name(l, head, "w"), zeros({spec.fan_in, spec.fan_out}));
      phi.insert(noise_name(l, head, "b"), zeros({1, spec.fan_out}));
    } else {
      const std::int64_t k = spec.kernel;
      phi.insert(noise_name(l, head, "w"), zeros({spec.fan_out, spec.fan_in, k, k}));
      phi.insert(noise_name(l, head, "b"), zeros({spec.fan_out}));
    }
  };

  switch (cfg_.mode) {
    case NoiseMode::none:
    case NoiseMode::fixed_gaussian:
      break;
    case NoiseMode::mult_softplus:
    case NoiseMode::deterministic:
      for (std::size_t l = 0; l < layers.size(); ++l) affine(l, "mu");
      break;
    case NoiseMode::additive:
      for (std::size_t l = 0; l < layers.size(); ++l) affine(l, "sigma");
      break;
    case NoiseMode::learned_variance:
      for (std::size_t l = 0; l < layers.size(); ++l) {
        affine(l, "mu");
        affine(l, "sigma");
      }
      break;
    case NoiseMode::independent_gaussian:
      for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& spec = layers[l];
        Shape s = spec.kind == LayerKind::dense ? Shape{1, spec.fan_out}
                                                : Shape{1, spec.fan_out, 1, 1};
        phi.insert(noise_name(l, "mu_c", "v"), zeros(std::move(s)));
      }
      break;
    case NoiseMode::weight_gaussian: {
      if (theta == nullptr) {
        throw std::invalid_argument("weight_gaussian needs theta shapes for rho");
      }
      // softplus(-3) ~ 0.049 keeps the initial weight jitter mild
      for (const auto& [name, t] : *theta) {
        phi.insert("noise.rho." + name,
                   Tensor::param(t.shape(),
                                 std::vector<double>(static_cast<std::size_t>(t.numel()), -3.0)));
      }
      break;
    }
  }
  return phi;
}

Tensor NoiseGenerator::mean_path(const ParamSet& phi, std::size_t layer,
                                 const Tensor& h_prev) const {
  const auto& spec = net_->layers().at(layer);
  const Tensor& w = phi.at(noise_name(layer, "mu", "w"));
  const Tensor& b = phi.at(noise_name(layer, "mu", "b"));
  if (spec.kind == LayerKind::dense) {
    return add(matmul(h_prev, w), b);
  }
  return conv2d(h_prev, w, b);
}

Tensor NoiseGenerator::sigma_path(const ParamSet& phi, std::size_t layer,
                                  const Tensor& h_prev) const {
  const auto& spec = net_->layers().at(layer);
  const Tensor& w = phi.at(noise_name(layer, "sigma", "w"));
  const Tensor& b = phi.at(noise_name(layer, "sigma", "b"));
  Tensor raw = spec.kind == LayerKind::dense ? add(matmul(h_prev, w), b)
                                             : conv2d(h_prev, w, b);
  return softplus(raw);
}

Tensor NoiseGenerator::sample_multiplicative_eps(const ParamSet& phi, std::size_t layer,
                                                 const Tensor& h_prev,
                                                 const Tensor& eps) const {
  return softplus(add(mean_path(phi, layer, h_prev), eps));
}

Tensor NoiseGenerator::sample_multiplicative(const ParamSet& phi, std::size_t layer,
                                             const Tensor& h_prev, Rng& rng) const {
  if (cfg_.mode != NoiseMode::mult_softplus) {
    throw std::logic_error("sample_multiplicative requires mult_softplus mode");
  }
  const std::int64_t batch = h_prev.shape()[0];
  return sample_multiplicative_eps(phi, layer, h_prev,
                                   randn(net_->preact_shape(layer, batch), rng));
}

Tensor NoiseGenerator::deterministic_z(const ParamSet& phi, std::size_t layer,
                                       const Tensor& h_prev) const {
  return softplus(mean_path(phi, layer, h_prev));
}

Tensor NoiseGenerator::sample_additive_eps(const ParamSet& phi, std::size_t layer,
                                           const Tensor& h_prev, const Tensor& eps) const {
  return scale(mul(sigma_path(phi, layer, h_prev), eps), cfg_.lambda);
}

Tensor NoiseGenerator::sample_additive(const ParamSet& phi, std::size_t layer,
                                       const Tensor& h_prev, Rng& rng) const {
  if (cfg_.mode != NoiseMode::additive) {
    throw std::logic_error("sample_additive requires additive mode");
  }
  const std::int64_t batch = h_prev.shape()[0];
  return sample_additive_eps(phi, layer, h_prev, randn(net_->preact_shape(layer, batch), rng));
}

Tensor NoiseGenerator::sample_ablation(const ParamSet& phi, std::size_t layer,
                                       const Tensor& h_prev, Rng& rng) const {
  const std::int64_t batch = h_prev.shape()[0];
  const Shape fs = net_->preact_shape(layer, batch);
  switch (cfg_.mode) {
    case NoiseMode::fixed_gaussian:
      return softplus(randn(fs, rng));
    case NoiseMode::independent_gaussian:
      return softplus(add(broadcast_to(phi.at(noise_name(layer, "mu_c", "v")), fs),
                          randn(fs, rng)));
    case NoiseMode::deterministic:
      return deterministic_z(phi, layer, h_prev);
    case NoiseMode::learned_variance:
      return softplus(add(mean_path(phi, layer, h_prev),
                          mul(sigma_path(phi, layer, h_prev), randn(fs, rng))));
    default:
      throw std::logic_error("sample_ablation called for mode " + to_string(cfg_.mode));
  }
}

ParamSet NoiseGenerator::sample_weight_params(const ParamSet& theta, const ParamSet& phi,
                                              Rng& rng) const {
  if (cfg_.mode != NoiseMode::weight_gaussian) {
    throw std::logic_error("sample_weight_params requires weight_gaussian mode");
  }
  return theta.map([&](const std::string& name, const Tensor& t) {
    const Tensor& rho = phi.at("noise.rho." + name);
    return add(t, mul(softplus(rho), randn(t.shape(), rng)));
  });
}

Tensor NoiseGenerator::sample_layer(const ParamSet& phi, std::size_t layer,
                                    const Tensor& h_prev, Rng* rng) const {
  switch (cfg_.mode) {
    case NoiseMode::mult_softplus:
      return rng ? sample_multiplicative(phi, layer, h_prev, *rng)
                 : deterministic_z(phi, layer, h_prev);
    case NoiseMode::additive: {
      if (!rng) return Tensor();  // zero-mean noise vanishes on the test path
      return sample_additive(phi, layer, h_prev, *rng);
    }
    case NoiseMode::fixed_gaussian:
      if (!rng) return Tensor::full(net_->preact_shape(layer, h_prev.shape()[0]),
                                    std::log(2.0));
      return sample_ablation(phi, layer, h_prev, *rng);
    case NoiseMode::independent_gaussian:
      if (!rng) {
        return softplus(broadcast_to(phi.at(noise_name(layer, "mu_c", "v")),
                                     net_->preact_shape(layer, h_prev.shape()[0])));
      }
      return sample_ablation(phi, layer, h_prev, *rng);
    case NoiseMode::deterministic:
    case NoiseMode::learned_variance:
      if (!rng) return deterministic_z(phi, layer, h_prev);
      return sample_ablation(phi, layer, h_prev, *rng);
    default:
      return Tensor();
  }
}

ForwardHooks NoiseGenerator::hooks(const ParamSet& phi, Rng* rng) const {
  if (cfg_.mode == NoiseMode::weight_gaussian) {
    throw std::logic_error("weight_gaussian noise has no activation hooks");
  }
  ForwardHooks h;
  if (cfg_.mode == NoiseMode::none) return h;
  h.preact = [this, &phi, rng](std::size_t l, const Tensor& f, const Tensor& h_prev) {
    Tensor z = sample_layer(phi, l, h_prev, rng);
    if (!z.defined()) return f;
    return cfg_.mode == NoiseMode::additive ? add(f, z) : mul(f, z);
  };
  return h;
}

Tensor NoiseGenerator::noised_forward(const ParamSet& theta, const ParamSet& phi,
                                      const Tensor& x, Rng* rng) const {
  if (cfg_.mode == NoiseMode::none) return net_->forward(theta, x);
  if (cfg_.mode == NoiseMode::weight_gaussian) {
    if (!rng) return net_->forward(theta, x);  // mean weights on the test path
    ParamSet sampled = sample_weight_params(theta, phi, *rng);
    return net_->forward(sampled, x);
  }
  ForwardHooks h = hooks(phi, rng);
  return net_->forward(theta, x, &h);
}

Tensor NoiseGenerator::noised_features(const ParamSet& theta, const ParamSet& phi,
                                       const Tensor& x, Rng* rng) const {
  if (cfg_.mode == NoiseMode::none) return net_->features(theta, x);
  if (cfg_.mode == NoiseMode::weight_gaussian) {
    if (!rng) return net_->features(theta, x);
    ParamSet sampled = sample_weight_params(theta, phi, *rng);
    return net_->features(sampled, x);
  }
  ForwardHooks h = hooks(phi, rng);
  return net_->features(theta, x, &h);
}

}  // namespace metadrop
