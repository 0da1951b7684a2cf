#pragma once

#include <optional>
#include <string>

#include "metadrop/network.hpp"

namespace metadrop {

enum class NoiseMode {
  none,
  mult_softplus,        // z = softplus(mu(h) + eps), applied multiplicatively
  additive,             // z = lambda * sigma(h) . eps, applied additively
  fixed_gaussian,       // z = softplus(eps), no parameters
  independent_gaussian, // z = softplus(mu_c + eps), per-channel learnable mu_c
  weight_gaussian,      // weights perturbed: w + softplus(rho) . eps
  deterministic,        // z = softplus(mu(h)) with no sampling anywhere
  learned_variance,     // z = softplus(mu(h) + sigma(h) . eps)
};

NoiseMode parse_noise_mode(const std::string& s);
std::string to_string(NoiseMode m);

struct NoiseConfig {
  NoiseMode mode = NoiseMode::none;
  double lambda = 0.1;  // additive noise scale
};

/// Input-dependent noise over a network's pre-activations. The generator's
/// parameters (phi) are a separate set from the network's (theta): they are
/// held fixed during task adaptation and only move in the outer update.
///
/// Each noised layer owns one affine map of the same kind as the main layer
/// (dense or conv) from the layer input to the pre-activation shape,
/// zero-initialized so the initial deterministic noise is softplus(0)
/// everywhere.
class NoiseGenerator {
 public:
  NoiseGenerator(const Network& net, NoiseConfig cfg);

  const NoiseConfig& config() const { return cfg_; }
  NoiseMode mode() const { return cfg_.mode; }

  /// Parameters phi for the configured mode (empty for none/fixed_gaussian).
  /// weight_gaussian needs the shapes of theta to build its rho tensors.
  ParamSet init_params(std::uint64_t seed, const ParamSet* theta = nullptr) const;

  // Per-layer paths. h_prev is the input of layer `layer`.
  Tensor mean_path(const ParamSet& phi, std::size_t layer, const Tensor& h_prev) const;
  Tensor sigma_path(const ParamSet& phi, std::size_t layer, const Tensor& h_prev) const;

  Tensor sample_multiplicative(const ParamSet& phi, std::size_t layer, const Tensor& h_prev,
                               Rng& rng) const;
  Tensor sample_multiplicative_eps(const ParamSet& phi, std::size_t layer,
                                   const Tensor& h_prev, const Tensor& eps) const;
  /// Zero-variance path: z = softplus(mu(h_prev)). Consumes no randomness.
  Tensor deterministic_z(const ParamSet& phi, std::size_t layer, const Tensor& h_prev) const;
  Tensor sample_additive(const ParamSet& phi, std::size_t layer, const Tensor& h_prev,
                         Rng& rng) const;
  Tensor sample_additive_eps(const ParamSet& phi, std::size_t layer, const Tensor& h_prev,
                             const Tensor& eps) const;
  /// Dispatch for the ablation modes (fixed/independent/weight gaussian,
  /// deterministic, learned variance).
  Tensor sample_ablation(const ParamSet& phi, std::size_t layer, const Tensor& h_prev,
                         Rng& rng) const;

  /// weight_gaussian only: theta with every tensor perturbed elementwise.
  ParamSet sample_weight_params(const ParamSet& theta, const ParamSet& phi, Rng& rng) const;

  /// Forward pass of `net` with this generator's noise in the training
  /// (sampling) path. `rng == nullptr` selects the deterministic path used
  /// for test examples.
  Tensor noised_forward(const ParamSet& theta, const ParamSet& phi, const Tensor& x,
                        Rng* rng) const;
  /// Final-layer features under the same noise treatment.
  Tensor noised_features(const ParamSet& theta, const ParamSet& phi, const Tensor& x,
                         Rng* rng) const;

  /// Pre-activation hook applying this generator's per-layer noise;
  /// rng == nullptr gives the deterministic path. Not valid for
  /// weight_gaussian (which perturbs parameters, not activations).
  ForwardHooks hooks(const ParamSet& phi, Rng* rng) const;

 private:
  Tensor sample_layer(const ParamSet& phi, std::size_t layer, const Tensor& h_prev,
                      Rng* rng) const;

  const Network* net_;
  NoiseConfig cfg_;
};

}  // namespace metadrop
