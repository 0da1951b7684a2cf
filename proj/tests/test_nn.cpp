#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "metadrop/checkpoint.hpp"
#include "metadrop/network.hpp"

using namespace metadrop;

TEST_CASE("he-uniform init respects the fan-in bound") {
  Network net = Network::dense_stack({2, 3}, 4);
  ParamSet p = net.init_params(42);
  const double bound = std::sqrt(6.0 / 2.0);
  for (auto v : p.at("layer0.w").data()) CHECK(std::fabs(v) <= bound);
  for (auto v : p.at("layer0.b").data()) CHECK(v == 0.0);
}

TEST_CASE("init is deterministic in the seed") {
  Network net = Network::dense_stack({2, 16, 8}, 5);
  CHECK(bitwise_equal(net.init_params(7), net.init_params(7)));
  ParamSet a = net.init_params(7);
  ParamSet b = net.init_params(8);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& [name, t] = a.item(i);
    for (std::int64_t j = 0; j < t.numel(); ++j) any_diff = any_diff || t.at(j) != b.at(name).at(j);
  }
  CHECK(any_diff);
}

TEST_CASE("noiseless forward equals the all-ones noise plan bitwise") {
  Network net = Network::dense_stack({2, 8, 8}, 3);
  ParamSet p = net.init_params(1);
  NoGradGuard ng;
  Rng rng(3, 0);
  Tensor x = randn({4, 2}, rng);
  Tensor plain = net.forward(p, x);
  NoisePlan plan;
  plan.z = {Tensor::ones({4, 8}), Tensor::ones({4, 8})};
  Tensor noised = net.forward(p, x, plan);
  for (std::int64_t i = 0; i < plain.numel(); ++i) CHECK(plain.at(i) == noised.at(i));
}

TEST_CASE("all-zero noise at layer 1 of a bias-free net kills the signal") {
  Network net = Network::dense_stack({2, 8, 8}, 3);
  ParamSet p = net.init_params(1);
  // biases are zero-initialized, so the net is bias free by construction
  NoGradGuard ng;
  Rng rng(4, 0);
  Tensor x = randn({4, 2}, rng);
  NoisePlan plan;
  plan.z = {Tensor::zeros({4, 8}), Tensor()};
  Tensor noised = net.forward(p, x, plan);
  // layer-1 output collapses to zero, so the logits equal those of a zero input
  Tensor zeroed = net.forward(p, Tensor::zeros({4, 2}));
  for (std::int64_t i = 0; i < noised.numel(); ++i) {
    CHECK(noised.at(i) == doctest::Approx(zeroed.at(i)).epsilon(1e-15));
  }
}

TEST_CASE("hand-computed multiplicative plan on an identity layer") {
  Network net = Network::dense_stack({2, 2}, 2);
  ParamSet p = net.init_params(0);
  p.at("layer0.w").leaf_data() = {1, 0, 0, 1};
  p.at("layer0.b").leaf_data() = {0, 0};
  p.at("head.w").leaf_data() = {1, 0, 0, 1};
  p.at("head.b").leaf_data() = {0, 0};
  NoGradGuard ng;
  Tensor x = Tensor::constant({1, 2}, {1, 2});
  NoisePlan plan;
  plan.z = {Tensor::constant({1, 2}, {2, 1})};
  Tensor logits = net.forward(p, x, plan);
  CHECK(logits.at(0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(logits.at(1) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("noise plan shape mismatch is an error") {
  Network net = Network::dense_stack({2, 8}, 3);
  ParamSet p = net.init_params(1);
  NoGradGuard ng;
  NoisePlan plan;
  plan.z = {Tensor::ones({4, 7})};
  CHECK_THROWS_AS(net.forward(p, Tensor::zeros({4, 2}), plan), ShapeError);
}

TEST_CASE("forward is deterministic and finite") {
  Network net = Network::dense_stack({2, 16, 16}, 5, true);
  ParamSet p = net.init_params(9);
  NoGradGuard ng;
  Rng rng(10, 0);
  Tensor x = randn({6, 2}, rng);
  Tensor l1 = net.forward(p, x);
  Tensor l2 = net.forward(p, x);
  for (std::int64_t i = 0; i < l1.numel(); ++i) {
    CHECK(l1.at(i) == l2.at(i));
    CHECK(std::isfinite(l1.at(i)));
  }
}

TEST_CASE("conv stack shapes and forward") {
  Network net = Network::conv_stack(1, 28, 64, 4, 20, true);
  CHECK(net.feature_dim() == 64);  // 28 -> 14 -> 7 -> 3 -> 1
  CHECK(net.preact_shape(0, 5) == Shape{5, 64, 28, 28});
  CHECK(net.preact_shape(3, 5) == Shape{5, 64, 3, 3});
  ParamSet p = net.init_params(2);
  NoGradGuard ng;
  Rng rng(1, 1);
  Tensor x = randn({2, 1, 28, 28}, rng);
  Tensor logits = net.forward(p, x);
  CHECK(logits.shape() == Shape{2, 20});
}

TEST_CASE("checkpoint container round trips bit-exactly") {
  Network net = Network::dense_stack({2, 8, 8}, 3);
  ParamSet p = net.init_params(77);
  const std::string path = (std::filesystem::temp_directory_path() / "mdtn_test.mdt").string();
  write_tensors(path, p);
  ParamSet q = read_tensors(path, true);
  CHECK(bitwise_equal(p, q));
  std::remove(path.c_str());
}
