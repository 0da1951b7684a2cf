#include "metadrop/ops.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <unordered_map>
#include <unordered_set>

#include "metadrop/kernels.hpp"

namespace metadrop {

namespace {

using BackwardFn = std::function<std::vector<Tensor>(const Tensor&, TensorNode&)>;

Tensor self_tensor(TensorNode& self) { return Tensor(self.shared_from_this()); }
Tensor parent(TensorNode& self, std::size_t i) { return Tensor(self.parents.at(i)); }

void check_finite(const char* op, const std::vector<double>& v) {
  bool bad = false;
  const std::int64_t n = static_cast<std::int64_t>(v.size());
  if (kernels::detail::use_omp(n)) {
#pragma omp parallel for schedule(static) reduction(|| : bad)
    for (std::int64_t i = 0; i < n; ++i) bad = bad || !std::isfinite(v[i]);
  } else {
    for (std::int64_t i = 0; i < n; ++i) bad = bad || !std::isfinite(v[i]);
  }
  if (bad) throw NonFiniteError(std::string("non-finite value produced by ") + op);
}

Tensor make_op(const char* name, Shape shape, std::vector<double> data,
               std::vector<Tensor> parents, BackwardFn bw) {
  check_finite(name, data);
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);

  bool track = recording_enabled();
  if (track) {
    track = false;
    for (const auto& p : parents) track = track || p.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->op_name = name;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(bw);
    active_tape()->record(node);
  }
  return Tensor(node);
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    const std::int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides of `in` aligned to (right-aligned, broadcast into) `out`;
// 0 on broadcast axes.
std::vector<std::int64_t> aligned_strides(const Shape& in, const Shape& out) {
  const std::size_t ri = in.size(), ro = out.size();
  if (ri > ro) throw ShapeError("rank of " + shape_str(in) + " exceeds " + shape_str(out));
  std::vector<std::int64_t> nat(ri);
  std::int64_t s = 1;
  for (std::size_t i = ri; i-- > 0;) {
    nat[i] = s;
    s *= in[i];
  }
  std::vector<std::int64_t> strides(ro, 0);
  for (std::size_t i = 0; i < ri; ++i) {
    const std::size_t o = ro - ri + i;
    if (in[i] == out[o]) {
      strides[o] = nat[i];
    } else if (in[i] == 1) {
      strides[o] = 0;
    } else {
      throw ShapeError(shape_str(in) + " is not broadcastable to " + shape_str(out));
    }
  }
  return strides;
}

// Walks `out_shape` in row-major order calling fn(out_index, ia, ib).
template <class F>
void odometer2(const Shape& out_shape, const std::vector<std::int64_t>& sa,
               const std::vector<std::int64_t>& sb, F fn) {
  const std::int64_t n = shape_numel(out_shape);
  const std::size_t r = out_shape.size();
  std::vector<std::int64_t> ctr(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t ax = r; ax-- > 0;) {
      ia += sa[ax];
      ib += sb[ax];
      if (++ctr[ax] < out_shape[ax]) break;
      ia -= sa[ax] * out_shape[ax];
      ib -= sb[ax] * out_shape[ax];
      ctr[ax] = 0;
    }
  }
}

template <class F>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, BackwardFn bw) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  std::vector<double> out(static_cast<std::size_t>(shape_numel(os)));
  const auto& av = a.node()->data;
  const auto& bv = b.node()->data;
  if (a.shape() == b.shape()) {
    kernels::zip(av.data(), bv.data(), out.data(), static_cast<std::int64_t>(out.size()), f);
  } else if (b.numel() == 1) {
    const double bb = bv[0];
    kernels::map(av.data(), out.data(), static_cast<std::int64_t>(out.size()),
                 [f, bb](double x) { return f(x, bb); });
  } else if (a.numel() == 1) {
    const double aa = av[0];
    kernels::map(bv.data(), out.data(), static_cast<std::int64_t>(out.size()),
                 [f, aa](double x) { return f(aa, x); });
  } else {
    const auto sa = aligned_strides(a.shape(), os);
    const auto sb = aligned_strides(b.shape(), os);
    odometer2(os, sa, sb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
      out[static_cast<std::size_t>(i)] = f(av[static_cast<std::size_t>(ia)],
                                           bv[static_cast<std::size_t>(ib)]);
    });
  }
  return make_op(name, std::move(os), std::move(out), {a, b}, std::move(bw));
}

template <class F>
Tensor unary_op(const char* name, const Tensor& a, F f, BackwardFn bw) {
  std::vector<double> out(a.node()->data.size());
  kernels::map(a.node()->data.data(), out.data(), a.numel(), f);
  return make_op(name, a.shape(), std::move(out), {a}, std::move(bw));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Shape sa = a.shape(), sb = b.shape();
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [sa, sb](const Tensor& g, TensorNode&) {
        return std::vector<Tensor>{sum_to(g, sa), sum_to(g, sb)};
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Shape sa = a.shape(), sb = b.shape();
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [sa, sb](const Tensor& g, TensorNode&) {
        return std::vector<Tensor>{sum_to(g, sa), neg(sum_to(g, sb))};
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Shape sa = a.shape(), sb = b.shape();
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [sa, sb](const Tensor& g, TensorNode& self) {
        return std::vector<Tensor>{sum_to(mul(g, parent(self, 1)), sa),
                                   sum_to(mul(g, parent(self, 0)), sb)};
      });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x) { return -x; },
      [](const Tensor& g, TensorNode&) { return std::vector<Tensor>{neg(g)}; });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      "scale", a, [c](double x) { return c * x; },
      [c](const Tensor& g, TensorNode&) { return std::vector<Tensor>{scale(g, c)}; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      "add_scalar", a, [c](double x) { return x + c; },
      [](const Tensor& g, TensorNode&) { return std::vector<Tensor>{g}; });
}

Tensor reciprocal(const Tensor& a) {
  return unary_op(
      "reciprocal", a, [](double x) { return 1.0 / x; },
      [](const Tensor& g, TensorNode& self) {
        Tensor r = self_tensor(self);
        return std::vector<Tensor>{neg(mul(g, mul(r, r)))};
      });
}

Tensor div(const Tensor& a, const Tensor& b) { return mul(a, reciprocal(b)); }

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](const Tensor& g, TensorNode& self) {
        return std::vector<Tensor>{mul(g, self_tensor(self))};
      });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](const Tensor& g, TensorNode& self) {
        return std::vector<Tensor>{mul(g, reciprocal(parent(self, 0)))};
      });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](const Tensor& g, TensorNode& self) {
        return std::vector<Tensor>{mul(g, scale(reciprocal(self_tensor(self)), 0.5))};
      });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](const Tensor& g, TensorNode& self) {
        const auto& x = self.parents[0]->data;
        std::vector<double> m(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) m[i] = x[i] > 0.0 ? 1.0 : 0.0;
        return std::vector<Tensor>{mul(g, Tensor::constant(self.shape, std::move(m)))};
      });
}

Tensor softplus(const Tensor& a) {
  return unary_op(
      "softplus", a,
      [](double x) { return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
      [](const Tensor& g, TensorNode& self) {
        return std::vector<Tensor>{mul(g, sigmoid(parent(self, 0)))};
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                     : std::exp(x) / (1.0 + std::exp(x)); },
      [](const Tensor& g, TensorNode& self) {
        Tensor s = self_tensor(self);
        return std::vector<Tensor>{mul(g, mul(s, add_scalar(neg(s), 1.0)))};
      });
}

Tensor square(const Tensor& a) { return mul(a, a); }

namespace {
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor matmul_tn(const Tensor& a, const Tensor& b);

// a . b^T, so gradients of plain matmul need no materialized transposes
Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1]) {
    throw ShapeError("matmul_nt shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  std::vector<double> out(static_cast<std::size_t>(m * n));
  kernels::matmul_nt(a.node()->data.data(), b.node()->data.data(), out.data(), m, k, n);
  return make_op("matmul_nt", {m, n}, std::move(out), {a, b},
                 [](const Tensor& g, TensorNode& self) {
                   return std::vector<Tensor>{matmul(g, parent(self, 1)),
                                              matmul_tn(g, parent(self, 0))};
                 });
}

// a^T . b
Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[0] != b.shape()[0]) {
    throw ShapeError("matmul_tn shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::int64_t m = a.shape()[1], k = a.shape()[0], n = b.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(m * n));
  kernels::matmul_tn(a.node()->data.data(), b.node()->data.data(), out.data(), m, k, n);
  return make_op("matmul_tn", {m, n}, std::move(out), {a, b},
                 [](const Tensor& g, TensorNode& self) {
                   return std::vector<Tensor>{matmul_nt(parent(self, 1), g),
                                              matmul(parent(self, 0), g)};
                 });
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(m * n));
  kernels::matmul(a.node()->data.data(), b.node()->data.data(), out.data(), m, k, n);
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [](const Tensor& g, TensorNode& self) {
                   return std::vector<Tensor>{matmul_nt(g, parent(self, 1)),
                                              matmul_tn(parent(self, 0), g)};
                 });
}

Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(a.shape()));
  const std::int64_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(r * c));
  const auto& in = a.node()->data;
  kernels::parallel_for(r * c, [&](std::int64_t i) {
    const std::int64_t row = i / r, col = i % r;  // output is [c, r]
    out[static_cast<std::size_t>(i)] = in[static_cast<std::size_t>(col * c + row)];
  });
  return make_op("transpose", {c, r}, std::move(out), {a},
                 [](const Tensor& g, TensorNode&) {
                   return std::vector<Tensor>{transpose(g)};
                 });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Shape orig = a.shape();
  return make_op("reshape", std::move(shape), a.node()->data, {a},
                 [orig](const Tensor& g, TensorNode&) {
                   return std::vector<Tensor>{reshape(g, orig)};
                 });
}

Tensor broadcast_to(const Tensor& a, Shape shape) {
  if (a.shape() == shape) return a;
  const auto sa = aligned_strides(a.shape(), shape);
  const auto& av = a.node()->data;
  std::vector<double> out(static_cast<std::size_t>(shape_numel(shape)));
  const std::vector<std::int64_t> zero(shape.size(), 0);
  odometer2(shape, sa, zero, [&](std::int64_t i, std::int64_t ia, std::int64_t) {
    out[static_cast<std::size_t>(i)] = av[static_cast<std::size_t>(ia)];
  });
  Shape orig = a.shape();
  return make_op("broadcast_to", std::move(shape), std::move(out), {a},
                 [orig](const Tensor& g, TensorNode&) {
                   return std::vector<Tensor>{sum_to(g, orig)};
                 });
}

Tensor sum_to(const Tensor& a, Shape shape) {
  if (a.shape() == shape) return a;
  const auto st = aligned_strides(shape, a.shape());  // target aligned into source
  const auto& av = a.node()->data;
  std::vector<double> out(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  const std::vector<std::int64_t> zero(a.shape().size(), 0);
  odometer2(a.shape(), st, zero, [&](std::int64_t i, std::int64_t it, std::int64_t) {
    out[static_cast<std::size_t>(it)] += av[static_cast<std::size_t>(i)];
  });
  Shape orig = a.shape();
  return make_op("sum_to", std::move(shape), std::move(out), {a},
                 [orig](const Tensor& g, TensorNode&) {
                   return std::vector<Tensor>{broadcast_to(g, orig)};
                 });
}

Tensor detach(const Tensor& a) {
  return Tensor::constant(a.shape(), a.node()->data);
}

Tensor sum(const Tensor& a) { return sum_to(a, Shape{}); }

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

namespace {
using IdxPtr = std::shared_ptr<const std::vector<std::int64_t>>;
}

Tensor gather_rows(const Tensor& a, const std::vector<std::int64_t>& idx) {
  if (a.shape().size() != 2) throw ShapeError("gather_rows expects rank 2");
  const std::int64_t rows = a.shape()[0], cols = a.shape()[1];
  for (auto r : idx) {
    if (r < 0 || r >= rows) throw ShapeError("gather_rows index out of range");
  }
  auto keep = std::make_shared<const std::vector<std::int64_t>>(idx);
  const std::int64_t n = static_cast<std::int64_t>(idx.size());
  std::vector<double> out(static_cast<std::size_t>(n * cols));
  const auto& av = a.node()->data;
  kernels::parallel_for(n, [&](std::int64_t i) {
    const double* src = av.data() + (*keep)[static_cast<std::size_t>(i)] * cols;
    std::copy(src, src + cols, out.data() + i * cols);
  });
  return make_op("gather_rows", {n, cols}, std::move(out), {a},
                 [keep, rows](const Tensor& g, TensorNode&) {
                   return std::vector<Tensor>{scatter_add_rows(g, *keep, rows)};
                 });
}

Tensor scatter_add_rows(const Tensor& a, const std::vector<std::int64_t>& idx,
                        std::int64_t n_rows) {
  if (a.shape().size() != 2) throw ShapeError("scatter_add_rows expects rank 2");
  if (static_cast<std::int64_t>(idx.size()) != a.shape()[0]) {
    throw ShapeError("scatter_add_rows index count mismatch");
  }
  const std::int64_t cols = a.shape()[1];
  auto keep = std::make_shared<const std::vector<std::int64_t>>(idx);
  std::vector<double> out(static_cast<std::size_t>(n_rows * cols), 0.0);
  const auto& av = a.node()->data;
  // duplicate targets accumulate in source order
  for (std::size_t i = 0; i < keep->size(); ++i) {
    const std::int64_t r = (*keep)[i];
    if (r < 0 || r >= n_rows) throw ShapeError("scatter_add_rows index out of range");
    double* dst = out.data() + r * cols;
    const double* src = av.data() + static_cast<std::int64_t>(i) * cols;
    for (std::int64_t j = 0; j < cols; ++j) dst[j] += src[j];
  }
  return make_op("scatter_add_rows", {n_rows, cols}, std::move(out), {a},
                 [keep](const Tensor& g, TensorNode&) {
                   return std::vector<Tensor>{gather_rows(g, *keep)};
                 });
}

Tensor im2col(const Tensor& x, std::int64_t kh, std::int64_t kw) {
  if (x.shape().size() != 4) throw ShapeError("im2col expects rank 4");
  const std::int64_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  std::vector<double> out(static_cast<std::size_t>(b * h * w * c * kh * kw));
  kernels::im2col(x.node()->data.data(), out.data(), b, c, h, w, kh, kw);
  Shape img = x.shape();
  return make_op("im2col", {b * h * w, c * kh * kw}, std::move(out), {x},
                 [img, kh, kw](const Tensor& g, TensorNode&) {
                   return std::vector<Tensor>{col2im(g, img, kh, kw)};
                 });
}

Tensor col2im(const Tensor& cols, Shape image_shape, std::int64_t kh, std::int64_t kw) {
  if (image_shape.size() != 4) throw ShapeError("col2im expects a rank-4 image shape");
  const std::int64_t b = image_shape[0], c = image_shape[1], h = image_shape[2],
                     w = image_shape[3];
  if (cols.shape() != Shape{b * h * w, c * kh * kw}) {
    throw ShapeError("col2im input shape " + shape_str(cols.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(b * c * h * w));
  kernels::col2im(cols.node()->data.data(), out.data(), b, c, h, w, kh, kw);
  return make_op("col2im", std::move(image_shape), std::move(out), {cols},
                 [kh, kw](const Tensor& g, TensorNode&) {
                   return std::vector<Tensor>{im2col(g, kh, kw)};
                 });
}

Tensor rows_to_nchw(const Tensor& rows, std::int64_t b, std::int64_t c,
                    std::int64_t h, std::int64_t w) {
  if (rows.shape() != Shape{b * h * w, c}) {
    throw ShapeError("rows_to_nchw input shape " + shape_str(rows.shape()));
  }
  const auto& in = rows.node()->data;
  std::vector<double> out(in.size());
  kernels::parallel_for(b * c * h * w, [&](std::int64_t i) {
    const std::int64_t j = i % w, row = (i / w) % h, ch = (i / (w * h)) % c,
                       bi = i / (w * h * c);
    out[static_cast<std::size_t>(i)] =
        in[static_cast<std::size_t>(((bi * h + row) * w + j) * c + ch)];
  });
  return make_op("rows_to_nchw", {b, c, h, w}, std::move(out), {rows},
                 [](const Tensor& g, TensorNode&) {
                   return std::vector<Tensor>{nchw_to_rows(g)};
                 });
}

Tensor nchw_to_rows(const Tensor& x) {
  if (x.shape().size() != 4) throw ShapeError("nchw_to_rows expects rank 4");
  const std::int64_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const auto& in = x.node()->data;
  std::vector<double> out(in.size());
  kernels::parallel_for(b * h * w, [&](std::int64_t r) {
    const std::int64_t j = r % w, row = (r / w) % h, bi = r / (w * h);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      out[static_cast<std::size_t>(r * c + ch)] =
          in[static_cast<std::size_t>(((bi * c + ch) * h + row) * w + j)];
    }
  });
  return make_op("nchw_to_rows", {b * h * w, c}, std::move(out), {x},
                 [b, c, h, w](const Tensor& g, TensorNode&) {
                   return std::vector<Tensor>{rows_to_nchw(g, b, c, h, w)};
                 });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.shape().size() != 4 || w.shape().size() != 4 || x.shape()[1] != w.shape()[1]) {
    throw ShapeError("conv2d shapes " + shape_str(x.shape()) + ", " + shape_str(w.shape()));
  }
  const std::int64_t b = x.shape()[0], h = x.shape()[2], ww = x.shape()[3];
  const std::int64_t cout = w.shape()[0], cin = w.shape()[1], kh = w.shape()[2],
                     kw = w.shape()[3];
  Tensor cols = im2col(x, kh, kw);
  Tensor wm = transpose(reshape(w, {cout, cin * kh * kw}));
  Tensor out = add(matmul(cols, wm), reshape(bias, {1, cout}));
  return rows_to_nchw(out, b, cout, h, ww);
}

namespace {

Tensor pool_gather(const Tensor& t, const IdxPtr& amax, Shape out_shape);

// transpose of maxpool's selection: routes each pooled gradient back to the
// input position that won the window
Tensor pool_scatter(const Tensor& g, const IdxPtr& amax, Shape in_shape) {
  const std::int64_t n_out = g.numel();
  std::vector<double> out(static_cast<std::size_t>(shape_numel(in_shape)), 0.0);
  const auto& gv = g.node()->data;
  // windows are disjoint so writes never collide
  kernels::parallel_for(n_out, [&](std::int64_t i) {
    out[static_cast<std::size_t>((*amax)[static_cast<std::size_t>(i)])] =
        gv[static_cast<std::size_t>(i)];
  });
  Shape gs = g.shape();
  return make_op("pool_scatter", std::move(in_shape), std::move(out), {g},
                 [amax, gs](const Tensor& g2, TensorNode&) {
                   return std::vector<Tensor>{pool_gather(g2, amax, gs)};
                 });
}

Tensor pool_gather(const Tensor& t, const IdxPtr& amax, Shape out_shape) {
  std::vector<double> out(amax->size());
  const auto& tv = t.node()->data;
  kernels::parallel_for(static_cast<std::int64_t>(amax->size()), [&](std::int64_t i) {
    out[static_cast<std::size_t>(i)] =
        tv[static_cast<std::size_t>((*amax)[static_cast<std::size_t>(i)])];
  });
  Shape ts = t.shape();
  return make_op("pool_gather", std::move(out_shape), std::move(out), {t},
                 [amax, ts](const Tensor& g, TensorNode&) {
                   return std::vector<Tensor>{pool_scatter(g, amax, ts)};
                 });
}

}  // namespace

Tensor maxpool2d(const Tensor& x) {
  if (x.shape().size() != 4) throw ShapeError("maxpool2d expects rank 4");
  const std::int64_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::int64_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("maxpool2d input too small " + shape_str(x.shape()));
  const auto& in = x.node()->data;
  std::vector<double> out(static_cast<std::size_t>(b * c * oh * ow));
  auto amax = std::make_shared<std::vector<std::int64_t>>(out.size());
  kernels::parallel_for(b * c * oh * ow, [&](std::int64_t i) {
    const std::int64_t j = i % ow, row = (i / ow) % oh, ch = (i / (ow * oh)) % c,
                       bi = i / (ow * oh * c);
    const std::int64_t base = ((bi * c + ch) * h + row * 2) * w + j * 2;
    double best = in[static_cast<std::size_t>(base)];
    std::int64_t besti = base;
    for (std::int64_t di = 0; di < 2; ++di) {
      for (std::int64_t dj = 0; dj < 2; ++dj) {
        const std::int64_t p = base + di * w + dj;
        if (in[static_cast<std::size_t>(p)] > best) {
          best = in[static_cast<std::size_t>(p)];
          besti = p;
        }
      }
    }
    out[static_cast<std::size_t>(i)] = best;
    (*amax)[static_cast<std::size_t>(i)] = besti;
  });
  IdxPtr frozen = amax;
  Shape in_shape = x.shape();
  return make_op("maxpool2d", {b, c, oh, ow}, std::move(out), {x},
                 [frozen, in_shape](const Tensor& g, TensorNode&) {
                   return std::vector<Tensor>{pool_scatter(g, frozen, in_shape)};
                 });
}

Tensor batch_standardize(const Tensor& x, double eps) {
  const auto& s = x.shape();
  Shape red;
  double count = 0;
  if (s.size() == 2) {
    red = {1, s[1]};
    count = static_cast<double>(s[0]);
  } else if (s.size() == 4) {
    red = {1, s[1], 1, 1};
    count = static_cast<double>(s[0] * s[2] * s[3]);
  } else {
    throw ShapeError("batch_standardize expects rank 2 or 4, got " + shape_str(s));
  }
  Tensor m = scale(sum_to(x, red), 1.0 / count);
  Tensor d = sub(x, m);
  Tensor v = scale(sum_to(square(d), red), 1.0 / count);
  return mul(d, reciprocal(sqrt(add_scalar(v, eps))));
}

namespace {

Tensor cross_entropy_rows(const Tensor& logits, const Tensor& targets) {
  const std::int64_t b = logits.shape()[0], c = logits.shape()[1];
  // row max as a constant keeps the identity exact and the exp bounded
  std::vector<double> mx(static_cast<std::size_t>(b));
  const auto& lv = logits.node()->data;
  for (std::int64_t i = 0; i < b; ++i) {
    mx[static_cast<std::size_t>(i)] =
        *std::max_element(lv.begin() + i * c, lv.begin() + (i + 1) * c);
  }
  Tensor m = Tensor::constant({b, 1}, std::move(mx));
  Tensor lse = add(log(sum_to(exp(sub(logits, m)), {b, 1})), m);
  Tensor picked = sum_to(mul(logits, targets), {b, 1});
  return reshape(sub(lse, picked), {b});
}

}  // namespace

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  if (logits.shape().size() != 2) throw ShapeError("softmax_cross_entropy expects rank 2");
  const std::int64_t b = logits.shape()[0], c = logits.shape()[1];
  if (static_cast<std::int64_t>(labels.size()) != b) {
    throw ShapeError("label count does not match batch size");
  }
  std::vector<double> onehot(static_cast<std::size_t>(b * c), 0.0);
  for (std::int64_t i = 0; i < b; ++i) {
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= c) {
      throw ShapeError("label out of range");
    }
    onehot[static_cast<std::size_t>(i * c + labels[static_cast<std::size_t>(i)])] = 1.0;
  }
  return cross_entropy_rows(logits, Tensor::constant({b, c}, std::move(onehot)));
}

Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape() || logits.shape().size() != 2) {
    throw ShapeError("soft cross entropy shape mismatch");
  }
  return cross_entropy_rows(logits, targets);
}

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         bool create_graph) {
  if (!output.defined()) throw TapeError("grad: undefined output");
  if (output.numel() != 1) {
    throw ShapeError("grad: output must be scalar, got " + shape_str(output.shape()));
  }
  TensorNode* root = output.raw();
  if (!root->backward || root->tape == nullptr) {
    throw TapeError("grad: output is not recorded on the active tape");
  }
  if (root->tape != active_tape()) {
    throw TapeError("grad: output was recorded on a tape that is not active");
  }

  // post-order DFS over the grad-requiring subgraph; the reversed order
  // processes every consumer before its producer, each node exactly once
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* n;
    std::size_t next;
  };
  std::vector<Frame> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      TensorNode* p = f.n->parents[f.next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(f.n);
      stack.pop_back();
    }
  }

  std::unordered_map<TensorNode*, Tensor> acc;
  acc.emplace(root, Tensor::ones(root->shape));
  std::optional<NoGradGuard> pause;
  if (!create_graph) pause.emplace();

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* n = *it;
    auto gi = acc.find(n);
    if (gi == acc.end() || !n->backward) continue;
    std::vector<Tensor> pg = n->backward(gi->second, *n);
    if (pg.size() != n->parents.size()) {
      throw TapeError(std::string("backward arity mismatch in ") + n->op_name);
    }
    for (std::size_t i = 0; i < pg.size(); ++i) {
      TensorNode* p = n->parents[i].get();
      if (!p->requires_grad) continue;
      if (pg[i].shape() != p->shape) {
        throw ShapeError(std::string("backward shape mismatch in ") + n->op_name + ": " +
                         shape_str(pg[i].shape()) + " vs " + shape_str(p->shape));
      }
      auto ai = acc.find(p);
      if (ai == acc.end()) {
        acc.emplace(p, pg[i]);
      } else {
        ai->second = add(ai->second, pg[i]);
      }
    }
  }

  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (const Tensor& in : inputs) {
    auto ai = acc.find(in.raw());
    result.push_back(ai != acc.end() ? ai->second : Tensor::zeros(in.shape()));
  }
  return result;
}

std::vector<std::int64_t> argmax_rows(const Tensor& logits) {
  if (logits.shape().size() != 2) throw ShapeError("argmax_rows expects rank 2");
  const std::int64_t b = logits.shape()[0], c = logits.shape()[1];
  std::vector<std::int64_t> out(static_cast<std::size_t>(b));
  const auto& v = logits.node()->data;
  for (std::int64_t i = 0; i < b; ++i) {
    out[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(
        std::max_element(v.begin() + i * c, v.begin() + (i + 1) * c) - (v.begin() + i * c));
  }
  return out;
}

Tensor randn(Shape shape, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.normal();
  return Tensor::constant(std::move(shape), std::move(v));
}

}  // namespace metadrop
