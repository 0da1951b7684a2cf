#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "metadrop/config.hpp"
#include "metadrop/metalearn.hpp"
#include "oracle_utils.hpp"

using namespace metadrop;

TEST_CASE("mixup with lambda forced to one returns the batch untouched") {
  Rng rng(1, 0);
  Tensor x = randn({6, 3}, rng);
  std::vector<std::int64_t> y{0, 1, 2, 0, 1, 2};
  auto res = mixup_apply(x, y, 3, 0.2, rng, 1.0);
  CHECK_FALSE(res.degenerate);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(res.x.at(i) == x.at(i));
  for (std::int64_t i = 0; i < 6; ++i) {
    for (std::int64_t c = 0; c < 3; ++c) {
      CHECK(res.targets.at(i * 3 + c) == (y[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("mixup midpoint interpolation") {
  Rng rng(2, 0);
  Tensor x = Tensor::constant({2, 2}, {0, 0, 2, 4});
  std::vector<std::int64_t> y{0, 1};
  // with two rows any non-identity pairing swaps them
  auto res = mixup_apply(x, y, 2, 0.2, rng, 0.5);
  const bool swapped = res.x.at(0) != 0.0;
  if (swapped) {
    CHECK(res.x.at(0) == doctest::Approx(1.0));
    CHECK(res.x.at(1) == doctest::Approx(2.0));
    CHECK(res.targets.at(0) == doctest::Approx(0.5));
    CHECK(res.targets.at(1) == doctest::Approx(0.5));
  } else {
    for (std::int64_t i = 0; i < 4; ++i) CHECK(res.x.at(i) == x.at(i));
  }
}

TEST_CASE("beta(gamma,gamma) draws average one half") {
  Rng rng(3, 0);
  const int n = 100000;
  std::vector<double> lam(n);
  for (int i = 0; i < n; ++i) lam[static_cast<std::size_t>(i)] = rng.beta(0.2, 0.2);
  const double m = oracle::mean(lam);
  const double se = oracle::sample_sd(lam) / std::sqrt(n);
  CHECK(std::fabs(m - 0.5) <= 3.0 * se);
}

TEST_CASE("mixup degenerates gracefully on a batch of one") {
  Rng rng(4, 0);
  Tensor x = Tensor::constant({1, 2}, {3, 4});
  auto res = mixup_apply(x, {0}, 2, 0.2, rng);
  CHECK(res.degenerate);
  CHECK(res.x.at(0) == 3.0);
  CHECK(res.x.at(1) == 4.0);
}

TEST_CASE("info dropout alpha floor and closed forms") {
  NoGradGuard ng;
  Tensor raw = Tensor::constant({1, 4}, {-1000.0, 0.0, 1000.0, 2.0});
  Tensor alpha = info_dropout_alpha(raw, 0.7);
  CHECK(alpha.at(0) == doctest::Approx(1e-6).epsilon(1e-3));
  CHECK(alpha.at(1) == doctest::Approx((0.7 + 1e-6) / 2).epsilon(1e-6));
  CHECK(alpha.at(2) == doctest::Approx(0.7).epsilon(1e-6));
  // kl stays finite at the floor
  auto [noised, kl] = info_dropout_layer_eps(Tensor::ones({1, 4}), alpha, Tensor::zeros({1, 4}));
  CHECK(std::isfinite(kl.item()));
  // eps = 0 -> z = 1 exactly, any alpha
  for (std::int64_t i = 0; i < 4; ++i) CHECK(noised.at(i) == 1.0);
}

TEST_CASE("info dropout log-normal median is one") {
  NoGradGuard ng;
  Rng rng(5, 0);
  Tensor alpha = Tensor::full({1000, 8}, 0.5);
  Tensor f = Tensor::ones({1000, 8});
  std::vector<double> draws;
  draws.reserve(1000000);
  for (int rep = 0; rep < 125; ++rep) {
    auto [noised, kl] = info_dropout_layer(f, alpha, rng);
    for (std::int64_t i = 0; i < noised.numel(); ++i) draws.push_back(noised.at(i));
  }
  CHECK(oracle::median_inplace(draws) == doctest::Approx(1.0).epsilon(1e-2));
}

TEST_CASE("vib kl closed forms") {
  NoGradGuard ng;
  auto kl_of = [](double mu, double sigma) {
    auto [z, kl] = vib_layer_eps(Tensor::constant({1, 1}, {mu}), Tensor::constant({1, 1}, {sigma}),
                                 Tensor::zeros({1, 1}));
    return kl.item();
  };
  CHECK(kl_of(0.0, 1.0) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(kl_of(1.0, 1.0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(kl_of(0.0, 2.0) == doctest::Approx(1.5 - std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("vib kl is nonnegative") {
  NoGradGuard ng;
  Rng rng(6, 0);
  for (int rep = 0; rep < 200; ++rep) {
    Tensor mu = randn({1, 5}, rng);
    Tensor sigma = softplus(randn({1, 5}, rng));
    auto [z, kl] = vib_layer(mu, sigma, rng);
    CHECK(kl.item() >= -1e-12);
  }
}

TEST_CASE("baseline extra parameters train inside the inner loop") {
  RunConfig rc;
  apply_preset(rc, "synthetic");
  rc.k_inner = 2;
  for (const char* family : {"info_dropout", "vib"}) {
    rc.reg_family = family;
    rc.reg_beta_ib = 1e-3;
    auto exp = Experiment::build(rc);
    MetaState st = exp->init_state();
    EpisodeObjective obj = exp->objective(st);
    Episode ep = exp->dist.sample(rc.way, rc.shot, rc.m_per_class, Split::meta_train, 0);
    Rng rng(7, ep.episode_seed);
    TapeScope tape;
    ParamSet adapted = inner_adapt(obj, st.theta, ep, exp->meta, nullptr, 1, rng, false);
    bool changed = false;
    for (const auto& [name, t] : adapted) {
      if (name.rfind("reg.", 0) != 0) continue;
      for (std::int64_t i = 0; i < t.numel(); ++i) {
        changed = changed || t.at(i) != st.theta.at(name).at(i);
      }
    }
    CHECK_MESSAGE(changed, family);
  }
}

TEST_CASE("adversarial perturbation honors the norm budget") {
  Network net = Network::dense_stack({2, 8}, 3);
  ParamSet theta = net.init_params(3);
  Rng rng(8, 0);
  Tensor x = Tensor::constant({4, 2}, {0.1, 0.9, 0.4, 0.2, 0.8, 0.5, 0.3, 0.6});
  std::vector<std::int64_t> y{0, 1, 2, 0};
  for (AttackNorm norm : {AttackNorm::l1, AttackNorm::l2, AttackNorm::linf}) {
    RegularizerConfig rc;
    rc.family = RegularizerFamily::adv_train;
    rc.eps_train = 0.05;
    rc.train_norm = norm;
    rc.pgd_steps_train = 5;
    Tensor adv = adversarial_perturb(net, theta, x, y, rc, rng);
    for (std::int64_t r = 0; r < 4; ++r) {
      double delta[2] = {adv.at(r * 2) - x.at(r * 2), adv.at(r * 2 + 1) - x.at(r * 2 + 1)};
      CHECK(lp_norm(delta, 2, norm) <= 0.05 + 1e-9);
    }
  }
}

TEST_CASE("every zero-strength regularizer reproduces plain adaptation bitwise") {
  RunConfig rc;
  apply_preset(rc, "synthetic");
  rc.k_inner = 3;
  auto exp = Experiment::build(rc);
  MetaState base = exp->init_state();
  Episode ep = exp->dist.sample(rc.way, rc.shot, rc.m_per_class, Split::meta_train, 1);
  MetaConfig cfg = exp->meta;

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
  CHECK(bitwise_equal(plain, adapt_with(&mix)));

  RegularizerConfig info;
  info.family = RegularizerFamily::info_dropout;
  info.beta_ib = 0.0;
  CHECK(bitwise_equal(plain, adapt_with(&info)));

  RegularizerConfig vibc;
  vibc.family = RegularizerFamily::vib;
  vibc.beta_ib = 0.0;
  CHECK(bitwise_equal(plain, adapt_with(&vibc)));

  RegularizerConfig adv;
  adv.family = RegularizerFamily::adv_train;
  adv.eps_train = 0.0;
  CHECK(bitwise_equal(plain, adapt_with(&adv)));
}

TEST_CASE("hand-checked single linf step on a linear model") {
  // loss = w . x with w = (3, -2): gradient is w, sign (+, -)
  ModelEvalFn f = [](const std::vector<double>& x) {
    const double w0 = 3.0, w1 = -2.0;
    return std::make_pair(w0 * x[0] + w1 * x[1], std::vector<double>{w0, w1});
  };
  AttackConfig cfg;
  cfg.norm = AttackNorm::linf;
  cfg.epsilon = 0.1;
  cfg.steps = 1;
  cfg.step_size = 0.1;
  cfg.random_start = false;
  Rng rng(9, 0);
  Tensor x = Tensor::constant({1, 2}, {0.5, 0.5});
  Tensor adv = pgd_attack(f, x, cfg, rng);
  CHECK(adv.at(0) == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(adv.at(1) == doctest::Approx(0.4).epsilon(1e-14));
}
