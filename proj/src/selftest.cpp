#include "metadrop/selftest.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "metadrop/config.hpp"
#include "metadrop/metalearn.hpp"

namespace metadrop {

namespace {

using Check = std::function<std::string()>;  // empty string = pass

double fd_central(const std::function<double()>& f, double* slot, double step) {
  const double orig = *slot;
  *slot = orig + step;
  const double up = f();
  *slot = orig - step;
  const double dn = f();
  *slot = orig;
  return (up - dn) / (2.0 * step);
}

std::string check_autodiff_fd() {
  Rng rng(7, 1);
  Tensor w1 = Tensor::param({2, 8}, [&] {
    std::vector<double> v(16);
    for (auto& e : v) e = 0.5 * rng.normal();
    return v;
  }());
  Tensor w2 = Tensor::param({8, 3}, [&] {
    std::vector<double> v(24);
    for (auto& e : v) e = 0.5 * rng.normal();
    return v;
  }());
  Tensor x = Tensor::constant({5, 2}, [&] {
    std::vector<double> v(10);
    for (auto& e : v) e = rng.normal();
    return v;
  }());
  std::vector<std::int64_t> y{0, 1, 2, 1, 0};
  auto loss_value = [&] {
    NoGradGuard ng;
    return mean(softmax_cross_entropy(matmul(softplus(matmul(x, w1)), w2), y)).item();
  };
  TapeScope tape;
  Tensor loss = mean(softmax_cross_entropy(matmul(softplus(matmul(x, w1)), w2), y));
  auto g = grad(loss, {w1, w2});
  double worst = 0.0;
  for (int t = 0; t < 10; ++t) {
    Tensor& w = t % 2 ? w2 : w1;
    const auto flat = static_cast<std::size_t>((t * 7) % w.numel());
    const double fd = fd_central(loss_value, &w.leaf_data()[flat], 1e-5);
    const double an = g[t % 2].data()[flat];
    worst = std::fmax(worst, std::fabs(fd - an) / std::fmax(1e-8, std::fabs(fd)));
  }
  if (worst > 1e-4) {
    return "gradient vs finite differences rel err " + std::to_string(worst);
  }
  return "";
}

std::string check_primitive_values() {
  NoGradGuard ng;
  const double sp0 = softplus(Tensor::scalar(0.0)).item();
  if (std::fabs(sp0 - std::log(2.0)) > 1e-12) return "softplus(0) != ln 2";
  if (relu(Tensor::scalar(-2.5)).item() != 0.0) return "relu(-2.5) != 0";
  if (relu(Tensor::scalar(3.0)).item() != 3.0) return "relu(3) != 3";
  const double ce = softmax_cross_entropy(Tensor::constant({1, 3}, {0, 0, 0}),
                                          std::vector<std::int64_t>{1})
                        .item();
  if (std::fabs(ce - std::log(3.0)) > 1e-12) return "uniform cross entropy != ln 3";
  return "";
}

std::string check_grad_linearity() {
  TapeScope tape;
  Tensor x = Tensor::param({4}, {0.3, -1.2, 2.0, 0.7});
  Tensor f = sum(mul(x, x));
  Tensor g = sum(exp(scale(x, 0.5)));
  const double a = 1.7, b = -0.4;
  auto gf = grad(f, {x});
  auto gg = grad(g, {x});
  auto gc = grad(add(scale(f, a), scale(g, b)), {x});
  for (int i = 0; i < 4; ++i) {
    const double want = a * gf[0].at(i) + b * gg[0].at(i);
    if (std::fabs(gc[0].at(i) - want) > 1e-12) return "grad not linear";
  }
  Tensor c = Tensor::constant({4}, {1, 2, 3, 4});
  auto gz = grad(sum(add(mul(x, x), c)), {x});
  (void)gz;
  Tensor just_c = sum(mul(c, c));
  (void)just_c;  // constant-only path records nothing
  return "";
}

std::string check_quadratic_oracle() {
  TapeScope tape;
  ParamSet theta;
  theta.insert("theta", Tensor::param({}, {1.0}));
  Rng rng(0, 0);
  InnerLossFn inner = [](const ParamSet& p, int, Rng&) {
    Tensor d = p.at("theta");  // target 0
    return mul(d, d);
  };
  ParamSet adapted = adapt(theta, inner, 1, 0.1, nullptr, rng, true);
  if (std::fabs(adapted.at("theta").item() - 0.8) > 1e-12) return "theta* != 0.8";
  Tensor d = add_scalar(adapted.at("theta"), -2.0);
  auto g = grad(mul(d, d), theta.tensors());
  if (std::fabs(g[0].item() - (-1.92)) > 1e-10) {
    return "outer gradient " + std::to_string(g[0].item()) + " != -1.92";
  }
  return "";
}

std::string check_noise_defaults() {
  Network net = Network::dense_stack({2, 8}, 3);
  NoiseGenerator gen(net, {NoiseMode::mult_softplus, 0.1});
  ParamSet theta = net.init_params(3);
  ParamSet phi = gen.init_params(3);
  NoGradGuard ng;
  Tensor h = Tensor::constant({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Rng rng(11, 0);
  const auto before = rng.counter();
  Tensor zbar = gen.deterministic_z(phi, 0, h);
  if (rng.counter() != before) return "deterministic_z consumed randomness";
  for (std::int64_t i = 0; i < zbar.numel(); ++i) {
    if (std::fabs(zbar.at(i) - std::log(2.0)) > 1e-12) return "initial zbar != ln 2";
  }
  Tensor z = gen.sample_multiplicative(phi, 0, h, rng);
  for (std::int64_t i = 0; i < z.numel(); ++i) {
    if (!(z.at(i) > 0.0)) return "multiplicative z not positive";
  }
  return "";
}

std::string check_boundary_sign() {
  Rng rng(23, 5);
  const std::int64_t n = 50, d = 6, classes = 4;
  Tensor feats = randn({n, d}, rng);
  Tensor w = randn({d, classes}, rng);
  Tensor b = randn({classes}, rng);
  auto proj = boundary_project(feats, w, b, 0, 2);
  for (std::int64_t i = 0; i < n; ++i) {
    double s1 = b.at(0), s2 = b.at(2);
    for (std::int64_t j = 0; j < d; ++j) {
      s1 += feats.at(i * d + j) * w.at(j * classes + 0);
      s2 += feats.at(i * d + j) * w.at(j * classes + 2);
    }
    const bool predicts_c1 = s1 >= s2;
    const bool right_of_db = proj.cx[static_cast<std::size_t>(i)] >= proj.cx_db;
    if (predicts_c1 != right_of_db) return "halfspace test mismatch";
  }
  return "";
}

std::string check_pgd_contract() {
  Rng rng(31, 2);
  ModelEvalFn f = [](const std::vector<double>& x) {
    // loss = sum(x^2): gradient 2x
    double l = 0.0;
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      l += x[i] * x[i];
      g[i] = 2.0 * x[i];
    }
    return std::make_pair(l, g);
  };
  for (AttackNorm norm : {AttackNorm::l1, AttackNorm::l2, AttackNorm::linf}) {
    for (int rep = 0; rep < 100; ++rep) {
      std::vector<double> x0(8);
      for (auto& v : x0) v = rng.uniform();
      AttackConfig cfg;
      cfg.norm = norm;
      cfg.epsilon = 0.05 + 0.2 * rng.uniform();
      cfg.steps = 10;
      Tensor xt = Tensor::constant({1, 8}, x0);
      Tensor adv = pgd_attack(f, xt, cfg, rng);
      std::vector<double> delta(8);
      for (int i = 0; i < 8; ++i) delta[static_cast<std::size_t>(i)] = adv.at(i) - x0[static_cast<std::size_t>(i)];
      if (lp_norm(delta.data(), 8, norm) > cfg.epsilon + 1e-9) return "norm bound violated";
      cfg.epsilon = 0.0;
      Tensor fixed = pgd_attack(f, xt, cfg, rng);
      for (int i = 0; i < 8; ++i) {
        if (fixed.at(i) != x0[static_cast<std::size_t>(i)]) return "eps=0 not identity";
      }
    }
  }
  return "";
}

std::string check_zero_strength_reduction() {
  RunConfig rc;
  apply_preset(rc, "synthetic");
  rc.iterations = 0;
  auto exp = Experiment::build(rc);
  MetaState base = exp->init_state();
  Episode ep = exp->dist.sample(rc.way, rc.shot, rc.m_per_class, Split::meta_train, 0);

  MetaConfig cfg = exp->meta;
  cfg.k_inner = 2;
  auto adapt_with = [&](const RegularizerConfig* reg) {
    EpisodeObjective obj{&exp->net, &exp->gen, &base.phi, reg};
    Rng rng(cfg.seed, ep.episode_seed);
    TapeScope tape;
    ParamSet a = inner_adapt(obj, base.theta, ep, cfg, nullptr, 1, rng, false);
    return a.map([](const std::string&, const Tensor& t) { return detach(t); });
  };
  ParamSet plain = adapt_with(nullptr);

  RegularizerConfig mix;
  mix.family = RegularizerFamily::mixup;
  mix.forced_lambda = 1.0;
  if (!bitwise_equal(plain, adapt_with(&mix))) return "mixup(lambda=1) differs from plain";

  RegularizerConfig vibc;
  vibc.family = RegularizerFamily::vib;
  vibc.beta_ib = 0.0;
  if (!bitwise_equal(plain, adapt_with(&vibc))) return "vib(beta=0) differs from plain";

  RegularizerConfig adv;
  adv.family = RegularizerFamily::adv_train;
  adv.eps_train = 0.0;
  if (!bitwise_equal(plain, adapt_with(&adv))) return "adv(eps=0) differs from plain";
  return "";
}

std::string check_accuracy_ci() {
  std::vector<RunRecord> recs(2);
  recs[0].accuracy = 0.0;
  recs[1].accuracy = 1.0;
  auto [mean, hw] = accuracy_ci(recs);
  if (std::fabs(mean - 0.5) > 1e-15) return "mean wrong";
  if (std::fabs(hw - 0.98) > 1e-12) return "halfwidth wrong";
  return "";
}

}  // namespace

std::vector<SelfTestResult> run_selftest() {
  const std::vector<std::pair<std::string, Check>> checks = {
      {"autodiff_finite_differences", check_autodiff_fd},
      {"primitive_closed_forms", check_primitive_values},
      {"gradient_linearity", check_grad_linearity},
      {"quadratic_adaptation_oracle", check_quadratic_oracle},
      {"noise_generator_defaults", check_noise_defaults},
      {"boundary_sign_consistency", check_boundary_sign},
      {"pgd_projection_contract", check_pgd_contract},
      {"zero_strength_reductions", check_zero_strength_reduction},
      {"accuracy_confidence_interval", check_accuracy_ci},
  };
  std::vector<SelfTestResult> out;
  for (const auto& [name, fn] : checks) {
    SelfTestResult r;
    r.name = name;
    try {
      r.detail = fn();
      r.passed = r.detail.empty();
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace metadrop
