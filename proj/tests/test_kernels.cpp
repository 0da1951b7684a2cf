#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "metadrop/kernels.hpp"
#include "metadrop/ops.hpp"
#include "metadrop/rng.hpp"

using namespace metadrop;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("matmul variants match the reference triple loop") {
  Rng rng(1, 0);
  for (auto [m, k, n] : {std::tuple<int, int, int>{3, 4, 5}, {17, 64, 9}, {64, 64, 64}}) {
    auto a = random_vec(static_cast<std::size_t>(m * k), rng);
    auto b = random_vec(static_cast<std::size_t>(k * n), rng);
    std::vector<double> want(static_cast<std::size_t>(m * n), 0.0);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(i * k + p)] * b[static_cast<std::size_t>(p * n + j)];
        want[static_cast<std::size_t>(i * n + j)] = acc;
      }
    }
    std::vector<double> got(static_cast<std::size_t>(m * n));
    kernels::matmul_serial(a.data(), b.data(), got.data(), m, k, n);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));

    // nt: B stored transposed
    std::vector<double> bt(static_cast<std::size_t>(k * n));
    for (int p = 0; p < k; ++p) {
      for (int j = 0; j < n; ++j) bt[static_cast<std::size_t>(j * k + p)] = b[static_cast<std::size_t>(p * n + j)];
    }
    std::vector<double> got_nt(static_cast<std::size_t>(m * n));
    kernels::matmul_nt_serial(a.data(), bt.data(), got_nt.data(), m, k, n);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got_nt[i] == doctest::Approx(want[i]).epsilon(1e-12));

    // tn: A stored transposed
    std::vector<double> at(static_cast<std::size_t>(m * k));
    for (int i = 0; i < m; ++i) {
      for (int p = 0; p < k; ++p) at[static_cast<std::size_t>(p * m + i)] = a[static_cast<std::size_t>(i * k + p)];
    }
    std::vector<double> got_tn(static_cast<std::size_t>(m * n));
    kernels::matmul_tn_serial(at.data(), b.data(), got_tn.data(), m, k, n);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got_tn[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("openmp kernels are bit-identical to the serial reference") {
  Rng rng(2, 0);
  const std::int64_t m = 130, k = 96, n = 70;
  auto a = random_vec(static_cast<std::size_t>(m * k), rng);
  auto b = random_vec(static_cast<std::size_t>(k * n), rng);
  std::vector<double> s(static_cast<std::size_t>(m * n)), p(static_cast<std::size_t>(m * n));
  kernels::matmul_serial(a.data(), b.data(), s.data(), m, k, n);
  kernels::matmul_omp(a.data(), b.data(), p.data(), m, k, n);
  CHECK(s == p);

  auto bt = random_vec(static_cast<std::size_t>(n * k), rng);
  kernels::matmul_nt_serial(a.data(), bt.data(), s.data(), m, k, n);
  kernels::matmul_nt_omp(a.data(), bt.data(), p.data(), m, k, n);
  CHECK(s == p);

  auto at = random_vec(static_cast<std::size_t>(k * m), rng);
  kernels::matmul_tn_serial(at.data(), b.data(), s.data(), m, k, n);
  kernels::matmul_tn_omp(at.data(), b.data(), p.data(), m, k, n);
  CHECK(s == p);

  const std::int64_t bi = 3, c = 4, h = 13, w = 11, kh = 3, kw = 3;
  auto img = random_vec(static_cast<std::size_t>(bi * c * h * w), rng);
  std::vector<double> cs(static_cast<std::size_t>(bi * h * w * c * kh * kw)), cp(cs.size());
  kernels::im2col_serial(img.data(), cs.data(), bi, c, h, w, kh, kw);
  kernels::im2col_omp(img.data(), cp.data(), bi, c, h, w, kh, kw);
  CHECK(cs == cp);

  std::vector<double> is(static_cast<std::size_t>(bi * c * h * w)), ip(is.size());
  kernels::col2im_serial(cs.data(), is.data(), bi, c, h, w, kh, kw);
  kernels::col2im_omp(cs.data(), ip.data(), bi, c, h, w, kh, kw);
  CHECK(is == ip);
}

TEST_CASE("col2im is the transpose of im2col") {
  // <x, col2im(y)> == <im2col(x), y> for a linear map and its transpose
  Rng rng(3, 0);
  const std::int64_t b = 2, c = 3, h = 5, w = 4, kh = 3, kw = 3;
  auto x = random_vec(static_cast<std::size_t>(b * c * h * w), rng);
  auto y = random_vec(static_cast<std::size_t>(b * h * w * c * kh * kw), rng);
  std::vector<double> ax(y.size());
  kernels::im2col_serial(x.data(), ax.data(), b, c, h, w, kh, kw);
  std::vector<double> aty(x.size());
  kernels::col2im_serial(y.data(), aty.data(), b, c, h, w, kh, kw);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += ax[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * aty[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("backend switch leaves op results bit-identical") {
  Rng rng(4, 0);
  Tensor a = randn({80, 90}, rng);
  Tensor b = randn({90, 40}, rng);
  kernels::set_backend(kernels::Backend::serial);
  Tensor r1 = matmul(relu(a), b);
  Tensor s1 = softplus(scale(a, 0.25));
  kernels::set_backend(kernels::Backend::openmp);
  Tensor r2 = matmul(relu(a), b);
  Tensor s2 = softplus(scale(a, 0.25));
  kernels::set_backend(kernels::Backend::openmp);
  for (std::int64_t i = 0; i < r1.numel(); ++i) CHECK(r1.at(i) == r2.at(i));
  for (std::int64_t i = 0; i < s1.numel(); ++i) CHECK(s1.at(i) == s2.at(i));
}
