#pragma once

#include <cstdint>
#include <vector>

#include "metadrop/rng.hpp"
#include "metadrop/tensor.hpp"

namespace metadrop {

// Elementwise arithmetic with numpy-style right-aligned broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor reciprocal(const Tensor& a);
Tensor div(const Tensor& a, const Tensor& b);

// Pointwise maps.
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor square(const Tensor& a);

// Linear algebra on rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Shape manipulation. broadcast_to / sum_to are mutually transposed linear
// maps; sum_to reduces every axis on which the target length is 1 (or absent).
Tensor reshape(const Tensor& a, Shape shape);
Tensor broadcast_to(const Tensor& a, Shape shape);
Tensor sum_to(const Tensor& a, Shape shape);
Tensor detach(const Tensor& a);

// Full reductions (rank-0 results).
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Row selection on rank-2 tensors; scatter_add_rows is the transpose of
// gather_rows and accumulates duplicate indices.
Tensor gather_rows(const Tensor& a, const std::vector<std::int64_t>& idx);
Tensor scatter_add_rows(const Tensor& a, const std::vector<std::int64_t>& idx,
                        std::int64_t n_rows);

// Convolution plumbing, stride 1, zero "same" padding.
Tensor im2col(const Tensor& x, std::int64_t kh, std::int64_t kw);
Tensor col2im(const Tensor& cols, Shape image_shape, std::int64_t kh, std::int64_t kw);
Tensor rows_to_nchw(const Tensor& rows, std::int64_t b, std::int64_t c,
                    std::int64_t h, std::int64_t w);
Tensor nchw_to_rows(const Tensor& x);

/// conv2d(x[b,cin,h,w], w[cout,cin,kh,kw], bias[cout]) -> [b,cout,h,w]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias);

/// 2x2 max pooling, stride 2, "valid" padding (odd trailing rows dropped).
Tensor maxpool2d(const Tensor& x);

/// Normalizes over the batch per feature (rank 2) or per channel (rank 4)
/// using the statistics of the current batch only.
Tensor batch_standardize(const Tensor& x, double eps = 1e-5);

/// Per-row cross entropy of softmax(logits) against integer labels -> [b].
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels);
/// Soft-label variant; target rows must sum to 1.
Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& targets);

/// d(output)/d(input) for a scalar output recorded on the active tape.
/// Inputs that the output does not depend on get zero gradients. With
/// create_graph the returned tensors are themselves differentiable.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         bool create_graph = false);

// Tape-free conveniences.
std::vector<std::int64_t> argmax_rows(const Tensor& logits);
Tensor randn(Shape shape, Rng& rng);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }

}  // namespace metadrop
