#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "metadrop/noise.hpp"
#include "oracle_utils.hpp"

using namespace metadrop;

namespace {

// E[softplus(N(0,1))], fixed from the quadrature oracle ahead of the build.
constexpr double kExpectedSoftplusNormal = 0.8060591833474394;

struct Fixture {
  Network net;
  ParamSet theta;
  Fixture() : net(Network::dense_stack({2, 8}, 3)), theta(net.init_params(5)) {}
};

}  // namespace

TEST_CASE("quadrature oracle reproduces the frozen expectation") {
  const double gh = oracle::gauss_hermite_expect(
      [](double x) { return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }, 64);
  const double simpson = oracle::simpson_normal_expect(
      [](double x) { return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); });
  CHECK(gh == doctest::Approx(kExpectedSoftplusNormal).epsilon(1e-12));
  CHECK(simpson == doctest::Approx(kExpectedSoftplusNormal).epsilon(1e-12));
}

TEST_CASE("multiplicative sample closed forms with forced noise") {
  Fixture f;
  NoiseGenerator gen(f.net, {NoiseMode::mult_softplus, 0.1});
  ParamSet phi = gen.init_params(1);
  NoGradGuard ng;
  Tensor h = Tensor::constant({1, 2}, {0.4, -1.0});
  Tensor z0 = gen.sample_multiplicative_eps(phi, 0, h, Tensor::zeros({1, 8}));
  for (std::int64_t i = 0; i < z0.numel(); ++i) {
    CHECK(z0.at(i) == doctest::Approx(std::log(2.0)).epsilon(1e-14));  // mu = 0 at init
  }
  // mu = 10 via the bias
  phi.at("noise.mu0.b").leaf_data().assign(8, 10.0);
  Tensor z10 = gen.sample_multiplicative_eps(phi, 0, h, Tensor::zeros({1, 8}));
  for (std::int64_t i = 0; i < z10.numel(); ++i) {
    CHECK(z10.at(i) == doctest::Approx(10.000045398899217).epsilon(1e-12));
  }
}

TEST_CASE("monte carlo mean of z matches the quadrature oracle within 3 SE") {
  Fixture f;
  NoiseGenerator gen(f.net, {NoiseMode::mult_softplus, 0.1});
  ParamSet phi = gen.init_params(1);
  NoGradGuard ng;
  Rng rng(100, 0);
  const int n = 1000000;
  const int batch = 1000;
  Tensor h = Tensor::zeros({batch, 2});
  double acc = 0.0, acc2 = 0.0;
  for (int rep = 0; rep < n / (batch * 8); ++rep) {
    Tensor z = gen.sample_multiplicative(phi, 0, h, rng);
    for (std::int64_t i = 0; i < z.numel(); ++i) {
      acc += z.at(i);
      acc2 += z.at(i) * z.at(i);
    }
  }
  const double total = std::floor(static_cast<double>(n) / (batch * 8)) * batch * 8;
  const double mean = acc / total;
  const double sd = std::sqrt(acc2 / total - mean * mean);
  const double se = sd / std::sqrt(total);
  CHECK(std::fabs(mean - kExpectedSoftplusNormal) <= 3.0 * se);

  // the deterministic path at mu=0 sits exactly ln 2 below-ish the mean:
  // the gap is the frozen oracle difference
  const double gap = kExpectedSoftplusNormal - std::log(2.0);
  CHECK(std::fabs((mean - std::log(2.0)) - gap) <= 3.0 * se);
}

TEST_CASE("deterministic_z is rng-free and repeatable") {
  Fixture f;
  NoiseGenerator gen(f.net, {NoiseMode::mult_softplus, 0.1});
  ParamSet phi = gen.init_params(1);
  NoGradGuard ng;
  Rng rng(6, 6);
  rng.normal();
  const auto counter_before = rng.counter();
  Tensor h = Tensor::constant({2, 2}, {1, 2, 3, 4});
  Tensor z1 = gen.deterministic_z(phi, 0, h);
  Tensor z2 = gen.deterministic_z(phi, 0, h);
  CHECK(rng.counter() == counter_before);
  for (std::int64_t i = 0; i < z1.numel(); ++i) CHECK(z1.at(i) == z2.at(i));
}

TEST_CASE("additive noise closed forms") {
  Fixture f;
  NoiseGenerator gen(f.net, {NoiseMode::additive, 0.1});
  ParamSet phi = gen.init_params(1);
  NoGradGuard ng;
  Tensor h = Tensor::constant({1, 2}, {0.3, 0.9});

  SUBCASE("forced eps of zero gives exactly zero noise") {
    Rng rng(0, 0);
    Tensor z = gen.sample_additive_eps(phi, 0, h, Tensor::zeros({1, 8}));
    for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(z.at(i) == 0.0);
  }

  SUBCASE("sigma forced to zero gives exactly zero noise") {
    phi.at("noise.sigma0.b").leaf_data().assign(8, -800.0);  // softplus underflows to 0
    phi.at("noise.sigma0.w").leaf_data().assign(16, 0.0);
    Rng rng(1, 2);
    Tensor z = gen.sample_additive(phi, 0, h, rng);
    for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(z.at(i) == 0.0);
  }

  SUBCASE("sample variance matches (lambda*sigma)^2 within 1%") {
    // sigma = softplus(raw) = 2  ->  raw = ln(e^2 - 1)
    const double raw = std::log(std::expm1(2.0));
    phi.at("noise.sigma0.b").leaf_data().assign(8, raw);
    Rng rng(2, 3);
    const int rows = 1000;
    Tensor hh = Tensor::zeros({rows, 2});
    double acc = 0.0, acc2 = 0.0;
    std::int64_t count = 0;
    for (int rep = 0; rep < 125; ++rep) {
      Tensor z = gen.sample_additive(phi, 0, hh, rng);
      for (std::int64_t i = 0; i < z.numel(); ++i) {
        acc += z.at(i);
        acc2 += z.at(i) * z.at(i);
        ++count;
      }
    }
    const double mean = acc / static_cast<double>(count);
    const double var = acc2 / static_cast<double>(count) - mean * mean;
    CHECK(var == doctest::Approx(0.04).epsilon(0.01));
  }
}

TEST_CASE("ablation families") {
  Fixture f;

  SUBCASE("deterministic mode ignores the rng entirely") {
    NoiseGenerator gen(f.net, {NoiseMode::deterministic, 0.1});
    ParamSet phi = gen.init_params(1);
    NoGradGuard ng;
    Tensor h = Tensor::constant({1, 2}, {1.0, -0.5});
    Rng r1(1, 1), r2(999, 7);
    Tensor a = gen.sample_ablation(phi, 0, h, r1);
    Tensor b = gen.sample_ablation(phi, 0, h, r2);
    CHECK(r1.counter() == 0);
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
  }

  SUBCASE("independent gaussian with mu_c = -20 suppresses the channel") {
    NoiseGenerator gen(f.net, {NoiseMode::independent_gaussian, 0.1});
    ParamSet phi = gen.init_params(1);
    phi.at("noise.mu_c0.v").leaf_data().assign(8, -20.0);
    NoGradGuard ng;
    Rng rng(3, 1);
    Tensor h = Tensor::zeros({200, 2});
    Tensor z = gen.sample_ablation(phi, 0, h, rng);
    // softplus(-20 + eps) < 1e-8 whenever eps < 1.58, i.e. ~94% of draws,
    // and the mean sits near exp(-19.5) ~ 3.4e-9
    std::int64_t tiny = 0;
    double total = 0.0;
    for (std::int64_t i = 0; i < z.numel(); ++i) {
      tiny += z.at(i) < 1e-8 ? 1 : 0;
      total += z.at(i);
    }
    CHECK(static_cast<double>(tiny) / static_cast<double>(z.numel()) > 0.9);
    CHECK(total / static_cast<double>(z.numel()) < 1e-8);
  }

  SUBCASE("fixed gaussian median is softplus(0) = ln 2") {
    NoiseGenerator gen(f.net, {NoiseMode::fixed_gaussian, 0.1});
    ParamSet phi = gen.init_params(1);
    NoGradGuard ng;
    Rng rng(4, 2);
    std::vector<double> draws;
    draws.reserve(1000000);
    Tensor h = Tensor::zeros({1000, 2});
    for (int rep = 0; rep < 125; ++rep) {
      Tensor z = gen.sample_ablation(phi, 0, h, rng);
      for (std::int64_t i = 0; i < z.numel(); ++i) draws.push_back(z.at(i));
    }
    CHECK(oracle::median_inplace(draws) == doctest::Approx(std::log(2.0)).epsilon(1.5e-3));
  }

  SUBCASE("weight gaussian perturbs every parameter elementwise") {
    NoiseGenerator gen(f.net, {NoiseMode::weight_gaussian, 0.1});
    ParamSet phi = gen.init_params(1, &f.theta);
    NoGradGuard ng;
    Rng rng(5, 5);
    ParamSet sampled = gen.sample_weight_params(f.theta, phi, rng);
    CHECK(sampled.size() == f.theta.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < sampled.size(); ++i) {
      const auto& [name, t] = sampled.item(i);
      for (std::int64_t j = 0; j < t.numel(); ++j) {
        any_diff = any_diff || t.at(j) != f.theta.at(name).at(j);
      }
    }
    CHECK(any_diff);
  }
}

TEST_CASE("reparameterized samples are differentiable in phi") {
  // common random numbers: the same eps for the analytic and FD paths
  Fixture f;
  NoiseGenerator gen(f.net, {NoiseMode::mult_softplus, 0.1});
  ParamSet phi = gen.init_params(1);
  Rng erng(8, 1);
  Tensor h = Tensor::constant({3, 2}, {0.2, -0.4, 1.0, 0.5, -0.7, 0.3});
  Tensor eps = randn({3, 8}, erng);
  auto value = [&] {
    NoGradGuard ng;
    return mean(gen.sample_multiplicative_eps(phi, 0, h, eps)).item();
  };
  TapeScope tape;
  Tensor loss = mean(gen.sample_multiplicative_eps(phi, 0, h, eps));
  ParamSet g = grad(loss, phi);
  for (auto& [name, t] : phi) {
    for (std::int64_t i = 0; i < t.numel(); i += 3) {
      const double fd =
          oracle::fd_central(value, &t.leaf_data()[static_cast<std::size_t>(i)], 1e-5);
      CHECK(std::fabs(g.at(name).at(i) - fd) <= 1e-4 * std::fmax(1.0, std::fabs(fd)));
    }
  }
}

TEST_CASE("multiplicative z stays positive in every mode that multiplies") {
  Fixture f;
  for (NoiseMode mode : {NoiseMode::mult_softplus, NoiseMode::fixed_gaussian,
                         NoiseMode::independent_gaussian, NoiseMode::deterministic,
                         NoiseMode::learned_variance}) {
    NoiseGenerator gen(f.net, {mode, 0.1});
    ParamSet phi = gen.init_params(1);
    NoGradGuard ng;
    Rng rng(9, static_cast<std::uint64_t>(mode));
    Tensor h = randn({50, 2}, rng);
    Tensor z = mode == NoiseMode::mult_softplus ? gen.sample_multiplicative(phi, 0, h, rng)
                                                : gen.sample_ablation(phi, 0, h, rng);
    for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(z.at(i) > 0.0);
  }
}

TEST_CASE("constant mu gives a uniform softplus(c) feature scaling on a linear probe") {
  Fixture f;
  NoiseGenerator gen(f.net, {NoiseMode::mult_softplus, 0.1});
  ParamSet phi = gen.init_params(1);
  const double c = 4.0;
  phi.at("noise.mu0.b").leaf_data().assign(8, c);
  NoGradGuard ng;
  Rng rng(12, 0);
  Tensor x = randn({5, 2}, rng);
  Tensor w1 = randn({2, 8}, rng);
  Tensor w2 = randn({8, 3}, rng);
  Tensor z = gen.deterministic_z(phi, 0, x);
  Tensor probe = matmul(mul(matmul(x, w1), z), w2);
  Tensor scaled = scale(matmul(matmul(x, w1), w2), std::log1p(std::exp(c)));
  for (std::int64_t i = 0; i < probe.numel(); ++i) {
    CHECK(probe.at(i) == doctest::Approx(scaled.at(i)).epsilon(1e-12));
  }
}
