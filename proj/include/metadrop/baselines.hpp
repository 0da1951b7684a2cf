#pragma once

#include <optional>
#include <string>
#include <utility>

#include "metadrop/evaluate.hpp"
#include "metadrop/network.hpp"
#include "metadrop/tasks.hpp"

namespace metadrop {

enum class RegularizerFamily { none, mixup, info_dropout, vib, adv_train };

RegularizerFamily parse_regularizer(const std::string& s);
std::string to_string(RegularizerFamily f);

struct RegularizerConfig {
  RegularizerFamily family = RegularizerFamily::none;
  double gamma = 0.2;      // mixup Beta(gamma, gamma)
  double beta_ib = 1e-4;   // info-dropout / vib tradeoff weight
  double alpha_max = 0.7;  // info-dropout noise cap
  double eps_train = 0.0;  // adversarial-training radius
  int pgd_steps_train = 10;
  AttackNorm train_norm = AttackNorm::linf;
  double clamp_lo = 0.0;  // valid input range for the training attack
  double clamp_hi = 1.0;
  // test hook: pins the interpolation weight instead of drawing Beta
  std::optional<double> forced_lambda;

  /// A zeroed strength parameter turns the regularizer off entirely.
  bool active() const;
};

/// Extra parameters a family trains inside the inner loop (appended to
/// theta): per-layer alpha maps for info-dropout, the feature encoder for
/// vib. Mixup and adversarial training add none.
ParamSet init_regularizer_params(const Network& net, const RegularizerConfig& cfg,
                                 std::uint64_t seed);

struct MixupResult {
  Tensor x;        // interpolated batch (same shape as input)
  Tensor targets;  // interpolated one-hot rows [n, classes]
  double lambda = 1.0;
  bool degenerate = false;  // batch of one: passed through unchanged
};

/// Pairs rows with a random permutation and interpolates inputs and one-hot
/// labels with lambda ~ Beta(gamma, gamma). Rank-4 batches are mixed
/// rowwise through a flatten/restore round trip.
MixupResult mixup_apply(const Tensor& x, const std::vector<std::int64_t>& labels,
                        std::int64_t num_classes, double gamma, Rng& rng,
                        std::optional<double> forced_lambda = std::nullopt);

/// Interpolates an on-tape feature tensor with soft targets already built;
/// used for the hidden-layer (manifold) sites.
std::pair<Tensor, Tensor> mixup_interpolate(const Tensor& h, const Tensor& targets,
                                            const std::vector<std::int64_t>& perm,
                                            double lambda);

/// sigmoid squashing of a raw map into (floor, alpha_max).
Tensor info_dropout_alpha(const Tensor& raw, double alpha_max, double floor = 1e-6);

/// Log-normal multiplicative noise z = exp(alpha . eps) applied to the
/// pre-activation, plus the -sum(log alpha) information penalty
/// (unweighted; the caller scales by beta_ib).
std::pair<Tensor, Tensor> info_dropout_layer(const Tensor& f, const Tensor& alpha, Rng& rng);
std::pair<Tensor, Tensor> info_dropout_layer_eps(const Tensor& f, const Tensor& alpha,
                                                 const Tensor& eps);

/// Gaussian feature code z = mu + sigma . eps with its KL to the unit
/// normal, 0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma).
std::pair<Tensor, Tensor> vib_layer(const Tensor& mu, const Tensor& sigma, Rng& rng);
std::pair<Tensor, Tensor> vib_layer_eps(const Tensor& mu, const Tensor& sigma, const Tensor& eps);

/// PGD perturbation of a training batch against the current adapted
/// parameters, evaluated with the deterministic noise path. The result is a
/// constant: the attack is not differentiated through.
Tensor adversarial_perturb(const Network& net, const ParamSet& theta_snapshot,
                           const Tensor& x, const std::vector<std::int64_t>& labels,
                           const RegularizerConfig& cfg, Rng& rng);

}  // namespace metadrop
