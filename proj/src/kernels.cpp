#include "metadrop/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cstring>

namespace metadrop::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::openmp};
// below this element count the fork/join overhead dominates
constexpr std::int64_t kParallelGrain = 65536;
}  // namespace

Backend backend() { return g_backend.load(std::memory_order_relaxed); }
void set_backend(Backend b) { g_backend.store(b, std::memory_order_relaxed); }

int max_threads() { return omp_get_max_threads(); }

void set_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

namespace detail {
bool use_omp(std::int64_t n) {
  return backend() == Backend::openmp && n >= kParallelGrain && omp_get_max_threads() > 1;
}
}  // namespace detail

void matmul_serial(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_omp(const double* a, const double* b, double* c,
                std::int64_t m, std::int64_t k, std::int64_t n) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul(const double* a, const double* b, double* c,
            std::int64_t m, std::int64_t k, std::int64_t n) {
  if (backend() == Backend::openmp && m * k * n >= 32768 && omp_get_max_threads() > 1) {
    matmul_omp(a, b, c, m, k, n);
  } else {
    matmul_serial(a, b, c, m, k, n);
  }
}

namespace {
inline void nt_row(const double* a, const double* b, double* c,
                   std::int64_t i, std::int64_t k, std::int64_t n) {
  const double* arow = a + i * k;
  double* crow = c + i * n;
  for (std::int64_t j = 0; j < n; ++j) {
    const double* brow = b + j * k;
    double acc = 0.0;
    for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
    crow[j] = acc;
  }
}
}  // namespace

void matmul_nt_serial(const double* a, const double* b, double* c,
                      std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) nt_row(a, b, c, i, k, n);
}

void matmul_nt_omp(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < m; ++i) nt_row(a, b, c, i, k, n);
}

void matmul_nt(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n) {
  if (backend() == Backend::openmp && m * k * n >= 32768 && omp_get_max_threads() > 1) {
    matmul_nt_omp(a, b, c, m, k, n);
  } else {
    matmul_nt_serial(a, b, c, m, k, n);
  }
}

void matmul_tn_serial(const double* a, const double* b, double* c,
                      std::int64_t m, std::int64_t k, std::int64_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::int64_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_tn_omp(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n) {
  // rows of C partition across threads; each thread scans A, B once
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    std::fill(crow, crow + n, 0.0);
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = a[p * m + i];
      const double* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n) {
  if (backend() == Backend::openmp && m * k * n >= 32768 && omp_get_max_threads() > 1) {
    matmul_tn_omp(a, b, c, m, k, n);
  } else {
    matmul_tn_serial(a, b, c, m, k, n);
  }
}

namespace {

inline void im2col_row(const double* in, double* out, std::int64_t row,
                       std::int64_t c, std::int64_t h, std::int64_t w,
                       std::int64_t kh, std::int64_t kw) {
  const std::int64_t j = row % w;
  const std::int64_t i = (row / w) % h;
  const std::int64_t bi = row / (w * h);
  double* orow = out + row * c * kh * kw;
  const std::int64_t oh = kh / 2, ow = kw / 2;
  std::int64_t col = 0;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* plane = in + (bi * c + ch) * h * w;
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      const std::int64_t ii = i + ki - oh;
      for (std::int64_t kj = 0; kj < kw; ++kj, ++col) {
        const std::int64_t jj = j + kj - ow;
        orow[col] = (ii >= 0 && ii < h && jj >= 0 && jj < w) ? plane[ii * w + jj] : 0.0;
      }
    }
  }
}

// Gather formulation: output pixel (bi,ch,i,j) accumulates every patch entry
// that covered it. Keeps the accumulation order fixed, so results do not
// depend on the thread count.
inline void col2im_pixel(const double* cols, double* out, std::int64_t idx,
                         std::int64_t c, std::int64_t h, std::int64_t w,
                         std::int64_t kh, std::int64_t kw) {
  const std::int64_t j = idx % w;
  const std::int64_t i = (idx / w) % h;
  const std::int64_t ch = (idx / (w * h)) % c;
  const std::int64_t bi = idx / (w * h * c);
  const std::int64_t oh = kh / 2, ow = kw / 2;
  double acc = 0.0;
  for (std::int64_t ki = 0; ki < kh; ++ki) {
    const std::int64_t pi = i - (ki - oh);  // patch center row that hit (i,j)
    if (pi < 0 || pi >= h) continue;
    for (std::int64_t kj = 0; kj < kw; ++kj) {
      const std::int64_t pj = j - (kj - ow);
      if (pj < 0 || pj >= w) continue;
      const std::int64_t row = (bi * h + pi) * w + pj;
      const std::int64_t col = (ch * kh + ki) * kw + kj;
      acc += cols[row * c * kh * kw + col];
    }
  }
  out[idx] = acc;
}

}  // namespace

void im2col_serial(const double* in, double* out, std::int64_t b, std::int64_t c,
                   std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw) {
  const std::int64_t rows = b * h * w;
  for (std::int64_t r = 0; r < rows; ++r) im2col_row(in, out, r, c, h, w, kh, kw);
}

void im2col_omp(const double* in, double* out, std::int64_t b, std::int64_t c,
                std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw) {
  const std::int64_t rows = b * h * w;
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) im2col_row(in, out, r, c, h, w, kh, kw);
}

void im2col(const double* in, double* out, std::int64_t b, std::int64_t c,
            std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw) {
  if (backend() == Backend::openmp && b * h * w >= 64 && omp_get_max_threads() > 1) {
    im2col_omp(in, out, b, c, h, w, kh, kw);
  } else {
    im2col_serial(in, out, b, c, h, w, kh, kw);
  }
}

void col2im_serial(const double* cols, double* out, std::int64_t b, std::int64_t c,
                   std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw) {
  const std::int64_t n = b * c * h * w;
  for (std::int64_t i = 0; i < n; ++i) col2im_pixel(cols, out, i, c, h, w, kh, kw);
}

void col2im_omp(const double* cols, double* out, std::int64_t b, std::int64_t c,
                std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw) {
  const std::int64_t n = b * c * h * w;
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) col2im_pixel(cols, out, i, c, h, w, kh, kw);
}

void col2im(const double* cols, double* out, std::int64_t b, std::int64_t c,
            std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw) {
  if (backend() == Backend::openmp && b * c * h * w >= 4096 && omp_get_max_threads() > 1) {
    col2im_omp(cols, out, b, c, h, w, kh, kw);
  } else {
    col2im_serial(cols, out, b, c, h, w, kh, kw);
  }
}

}  // namespace metadrop::kernels
