#include "metadrop/baselines.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace metadrop {

RegularizerFamily parse_regularizer(const std::string& s) {
  if (s == "none") return RegularizerFamily::none;
  if (s == "mixup") return RegularizerFamily::mixup;
  if (s == "info_dropout") return RegularizerFamily::info_dropout;
  if (s == "vib") return RegularizerFamily::vib;
  if (s == "adv_train") return RegularizerFamily::adv_train;
  throw std::invalid_argument("unknown regularizer family: " + s);
}

std::string to_string(RegularizerFamily f) {
  switch (f) {
    case RegularizerFamily::none: return "none";
    case RegularizerFamily::mixup: return "mixup";
    case RegularizerFamily::info_dropout: return "info_dropout";
    case RegularizerFamily::vib: return "vib";
    case RegularizerFamily::adv_train: return "adv_train";
  }
  return "?";
}

bool RegularizerConfig::active() const {
  switch (family) {
    case RegularizerFamily::none: return false;
    case RegularizerFamily::mixup: return !(forced_lambda && *forced_lambda == 1.0);
    case RegularizerFamily::info_dropout:
    case RegularizerFamily::vib: return beta_ib != 0.0;
    case RegularizerFamily::adv_train: return eps_train != 0.0;
  }
  return false;
}

ParamSet init_regularizer_params(const Network& net, const RegularizerConfig& cfg,
                                 std::uint64_t seed) {
  (void)seed;
  ParamSet p;
  auto zeros = [](Shape s) {
    auto n = static_cast<std::size_t>(shape_numel(s));
    return Tensor::param(std::move(s), std::vector<double>(n, 0.0));
  };
  if (cfg.family == RegularizerFamily::info_dropout) {
    const auto& layers = net.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& spec = layers[l];
      const std::string base = "reg.alpha" + std::to_string(l) + ".";
      if (spec.kind == LayerKind::dense) {
        p.insert(base + "w", zeros({spec.fan_in, spec.fan_out}));
        p.insert(base + "b", zeros({1, spec.fan_out}));
      } else {
        p.insert(base + "w", zeros({spec.fan_out, spec.fan_in, spec.kernel, spec.kernel}));
        p.insert(base + "b", zeros({spec.fan_out}));
      }
    }
  } else if (cfg.family == RegularizerFamily::vib) {
    const std::int64_t d = net.feature_dim();
    // identity mean map keeps the encoded features equal to the raw ones at
    // the start; sigma begins near 0.1
    std::vector<double> eye(static_cast<std::size_t>(d * d), 0.0);
    for (std::int64_t i = 0; i < d; ++i) eye[static_cast<std::size_t>(i * d + i)] = 1.0;
    p.insert("reg.vib_mu.w", Tensor::param({d, d}, std::move(eye)));
    p.insert("reg.vib_mu.b", zeros({1, d}));
    p.insert("reg.vib_sigma.w", zeros({d, d}));
    const double raw0 = std::log(std::expm1(0.1));  // softplus inverse of 0.1
    p.insert("reg.vib_sigma.b",
             Tensor::param({1, d}, std::vector<double>(static_cast<std::size_t>(d), raw0)));
  }
  return p;
}

MixupResult mixup_apply(const Tensor& x, const std::vector<std::int64_t>& labels,
                        std::int64_t num_classes, double gamma, Rng& rng,
                        std::optional<double> forced_lambda) {
  if (gamma <= 0.0) throw std::invalid_argument("mixup gamma must be > 0");
  const std::int64_t n = x.shape().empty() ? 0 : x.shape()[0];
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw std::invalid_argument("mixup label count mismatch");
  }
  std::vector<double> onehot(static_cast<std::size_t>(n * num_classes), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    onehot[static_cast<std::size_t>(i * num_classes + labels[static_cast<std::size_t>(i)])] = 1.0;
  }
  Tensor targets = Tensor::constant({n, num_classes}, std::move(onehot));
  if (n < 2) {
    return {x, targets, 1.0, true};  // nothing to pair with
  }

  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  }
  const double lambda = forced_lambda ? *forced_lambda : rng.beta(gamma, gamma);

  const Shape orig = x.shape();
  Tensor rows = orig.size() == 2 ? x : reshape(x, {n, x.numel() / n});
  auto [mixed, soft] = mixup_interpolate(rows, targets, perm, lambda);
  if (orig.size() != 2) mixed = reshape(mixed, orig);
  return {mixed, soft, lambda, false};
}

std::pair<Tensor, Tensor> mixup_interpolate(const Tensor& h, const Tensor& targets,
                                            const std::vector<std::int64_t>& perm,
                                            double lambda) {
  Tensor mixed = add(scale(h, lambda), scale(gather_rows(h, perm), 1.0 - lambda));
  Tensor soft = add(scale(targets, lambda), scale(gather_rows(targets, perm), 1.0 - lambda));
  return {mixed, soft};
}

Tensor info_dropout_alpha(const Tensor& raw, double alpha_max, double floor) {
  if (alpha_max <= 0.0 || alpha_max > 1.0) throw std::invalid_argument("alpha_max in (0,1]");
  return add_scalar(scale(sigmoid(raw), alpha_max - floor), floor);
}

std::pair<Tensor, Tensor> info_dropout_layer_eps(const Tensor& f, const Tensor& alpha,
                                                 const Tensor& eps) {
  Tensor z = exp(mul(alpha, eps));
  Tensor kl = neg(sum(log(alpha)));
  return {mul(f, z), kl};
}

std::pair<Tensor, Tensor> info_dropout_layer(const Tensor& f, const Tensor& alpha, Rng& rng) {
  return info_dropout_layer_eps(f, alpha, randn(f.shape(), rng));
}

std::pair<Tensor, Tensor> vib_layer_eps(const Tensor& mu, const Tensor& sigma,
                                        const Tensor& eps) {
  Tensor z = add(mu, mul(sigma, eps));
  Tensor kl = scale(sum(sub(sub(add(square(mu), square(sigma)),
                                Tensor::ones(mu.shape())),
                            scale(log(sigma), 2.0))),
                    0.5);
  return {z, kl};
}

std::pair<Tensor, Tensor> vib_layer(const Tensor& mu, const Tensor& sigma, Rng& rng) {
  return vib_layer_eps(mu, sigma, randn(mu.shape(), rng));
}

Tensor adversarial_perturb(const Network& net, const ParamSet& theta_snapshot,
                           const Tensor& x, const std::vector<std::int64_t>& labels,
                           const RegularizerConfig& cfg, Rng& rng) {
  AttackConfig atk;
  atk.norm = cfg.train_norm;
  atk.epsilon = cfg.eps_train;
  atk.steps = cfg.pgd_steps_train;
  atk.clamp_lo = cfg.clamp_lo;
  atk.clamp_hi = cfg.clamp_hi;
  ModelEvalFn eval = [&](const std::vector<double>& xflat) {
    TapeScope tape;
    Tensor xin = Tensor::param(x.shape(), xflat);
    Tensor logits = net.forward(theta_snapshot, xin);
    Tensor loss = sum(softmax_cross_entropy(logits, labels));
    auto g = grad(loss, {xin});
    return std::make_pair(loss.item(),
                          std::vector<double>(g[0].data().begin(), g[0].data().end()));
  };
  return pgd_attack(eval, x, atk, rng);
}

}  // namespace metadrop
