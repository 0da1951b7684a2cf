#pragma once

#include <cstdint>

namespace metadrop::kernels {

/// Which implementation the dense kernels dispatch to. The serial versions
/// are the reference; the OpenMP versions partition work by output element
/// so both produce bit-identical results for any thread count.
enum class Backend { serial, openmp };

Backend backend();
void set_backend(Backend b);

int max_threads();
/// Caps the OpenMP worker count (0 keeps the runtime default).
void set_threads(int n);

// C[m,n] = A[m,k] * B[k,n], row major.
void matmul_serial(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n);
void matmul_omp(const double* a, const double* b, double* c,
                std::int64_t m, std::int64_t k, std::int64_t n);
void matmul(const double* a, const double* b, double* c,
            std::int64_t m, std::int64_t k, std::int64_t n);

// C[m,n] = A[m,k] * B[n,k]^T
void matmul_nt_serial(const double* a, const double* b, double* c,
                      std::int64_t m, std::int64_t k, std::int64_t n);
void matmul_nt_omp(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n);
void matmul_nt(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n);

// C[m,n] = A[k,m]^T * B[k,n]
void matmul_tn_serial(const double* a, const double* b, double* c,
                      std::int64_t m, std::int64_t k, std::int64_t n);
void matmul_tn_omp(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n);
void matmul_tn(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n);

// Unit-stride 3x3-style patch extraction, stride 1, zero "same" padding.
// in:  [b, c, h, w] row major
// out: [b*h*w, c*kh*kw] row major, rows ordered (b, i, j)
void im2col_serial(const double* in, double* out, std::int64_t b, std::int64_t c,
                   std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw);
void im2col_omp(const double* in, double* out, std::int64_t b, std::int64_t c,
                std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw);
void im2col(const double* in, double* out, std::int64_t b, std::int64_t c,
            std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw);

// Transpose of im2col: accumulates patch columns back onto the image grid.
// Written as a gather over input pixels so it parallelizes without atomics.
void col2im_serial(const double* cols, double* out, std::int64_t b, std::int64_t c,
                   std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw);
void col2im_omp(const double* cols, double* out, std::int64_t b, std::int64_t c,
                std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw);
void col2im(const double* cols, double* out, std::int64_t b, std::int64_t c,
            std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw);

namespace detail {
bool use_omp(std::int64_t n);
}

/// Elementwise y[i] = f(x[i]).
template <class F>
void map(const double* x, double* y, std::int64_t n, F f) {
  if (detail::use_omp(n)) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) y[i] = f(x[i]);
  } else {
    for (std::int64_t i = 0; i < n; ++i) y[i] = f(x[i]);
  }
}

/// Elementwise z[i] = f(x[i], y[i]) on equally shaped arrays.
template <class F>
void zip(const double* x, const double* y, double* z, std::int64_t n, F f) {
  if (detail::use_omp(n)) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) z[i] = f(x[i], y[i]);
  } else {
    for (std::int64_t i = 0; i < n; ++i) z[i] = f(x[i], y[i]);
  }
}

/// Generic parallel loop over [0, n); the body must write disjoint outputs.
template <class F>
void parallel_for(std::int64_t n, F body) {
  if (detail::use_omp(n)) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) body(i);
  } else {
    for (std::int64_t i = 0; i < n; ++i) body(i);
  }
}

}  // namespace metadrop::kernels
