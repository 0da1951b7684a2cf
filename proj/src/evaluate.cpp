#include "metadrop/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace metadrop {

AttackNorm parse_attack_norm(const std::string& s) {
  if (s == "l1") return AttackNorm::l1;
  if (s == "l2") return AttackNorm::l2;
  if (s == "linf") return AttackNorm::linf;
  throw std::invalid_argument("unknown attack norm: " + s);
}

std::string to_string(AttackNorm n) {
  switch (n) {
    case AttackNorm::l1: return "l1";
    case AttackNorm::l2: return "l2";
    case AttackNorm::linf: return "linf";
  }
  return "?";
}

double lp_norm(const double* v, std::int64_t n, AttackNorm norm) {
  double acc = 0.0;
  switch (norm) {
    case AttackNorm::l1:
      for (std::int64_t i = 0; i < n; ++i) acc += std::fabs(v[i]);
      return acc;
    case AttackNorm::l2:
      for (std::int64_t i = 0; i < n; ++i) acc += v[i] * v[i];
      return std::sqrt(acc);
    case AttackNorm::linf:
      for (std::int64_t i = 0; i < n; ++i) acc = std::fmax(acc, std::fabs(v[i]));
      return acc;
  }
  return 0.0;
}

namespace {

// Euclidean projection of |delta| onto the l1 ball of radius eps,
// signs preserved (Duchi et al. simplex projection).
void project_l1(double* delta, std::int64_t n, double eps) {
  if (lp_norm(delta, n, AttackNorm::l1) <= eps) return;
  std::vector<double> mag(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) mag[static_cast<std::size_t>(i)] = std::fabs(delta[i]);
  std::vector<double> sorted = mag;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  double cum = 0.0, tau = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    cum += sorted[static_cast<std::size_t>(i)];
    const double t = (cum - eps) / static_cast<double>(i + 1);
    if (t < sorted[static_cast<std::size_t>(i)]) {
      tau = t;
    } else {
      break;
    }
  }
  for (std::int64_t i = 0; i < n; ++i) {
    const double m = std::fmax(mag[static_cast<std::size_t>(i)] - tau, 0.0);
    delta[i] = std::copysign(m, delta[i]);
  }
}

void project_ball(double* delta, std::int64_t n, AttackNorm norm, double eps) {
  switch (norm) {
    case AttackNorm::linf:
      for (std::int64_t i = 0; i < n; ++i) delta[i] = std::clamp(delta[i], -eps, eps);
      break;
    case AttackNorm::l2: {
      const double nn = lp_norm(delta, n, AttackNorm::l2);
      if (nn > eps) {
        const double s = eps / nn;
        for (std::int64_t i = 0; i < n; ++i) delta[i] *= s;
      }
      break;
    }
    case AttackNorm::l1:
      project_l1(delta, n, eps);
      break;
  }
}

// ascent direction of unit cfg-norm from the row gradient
void step_direction(const double* g, double* dir, std::int64_t n, AttackNorm norm) {
  switch (norm) {
    case AttackNorm::linf:
      for (std::int64_t i = 0; i < n; ++i) {
        dir[i] = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      }
      break;
    case AttackNorm::l2: {
      const double nn = lp_norm(g, n, AttackNorm::l2);
      if (nn == 0.0) {
        std::fill(dir, dir + n, 0.0);
      } else {
        for (std::int64_t i = 0; i < n; ++i) dir[i] = g[i] / nn;
      }
      break;
    }
    case AttackNorm::l1: {
      // steepest ascent under unit l1 budget: all mass on the largest
      // coordinate, ties to the lowest index
      std::fill(dir, dir + n, 0.0);
      std::int64_t best = -1;
      double bv = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const double a = std::fabs(g[i]);
        if (a > bv) {
          bv = a;
          best = i;
        }
      }
      if (best >= 0 && bv > 0.0) dir[best] = g[best] > 0.0 ? 1.0 : -1.0;
      break;
    }
  }
}

void random_start(double* delta, std::int64_t n, AttackNorm norm, double eps, Rng& rng) {
  switch (norm) {
    case AttackNorm::linf:
      for (std::int64_t i = 0; i < n; ++i) delta[i] = rng.uniform(-eps, eps);
      break;
    case AttackNorm::l2: {
      double nn = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        delta[i] = rng.normal();
        nn += delta[i] * delta[i];
      }
      nn = std::sqrt(nn);
      const double r = eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(n));
      if (nn > 0.0) {
        for (std::int64_t i = 0; i < n; ++i) delta[i] *= r / nn;
      }
      break;
    }
    case AttackNorm::l1: {
      // exponential spacings give a uniform point on the simplex
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        delta[i] = -std::log(rng.uniform());
        s += delta[i];
      }
      const double r = eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(n));
      for (std::int64_t i = 0; i < n; ++i) {
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        delta[i] = sign * r * delta[i] / s;
      }
      break;
    }
  }
}

}  // namespace

Tensor pgd_attack(const ModelEvalFn& f, const Tensor& x, const AttackConfig& cfg, Rng& rng) {
  if (cfg.epsilon < 0.0) throw std::invalid_argument("attack epsilon must be >= 0");
  if (cfg.steps < 1) throw std::invalid_argument("attack steps must be >= 1");
  const std::int64_t rows = x.shape().empty() ? 1 : x.shape()[0];
  const std::int64_t dim = x.numel() / rows;
  const double eta = cfg.step_size > 0.0
                         ? cfg.step_size
                         : 2.5 * cfg.epsilon / static_cast<double>(cfg.steps);

  std::vector<double> x0(x.data().begin(), x.data().end());
  std::vector<double> cur = x0;
  std::vector<double> delta(static_cast<std::size_t>(dim));

  if (cfg.random_start && cfg.epsilon > 0.0) {
    for (std::int64_t r = 0; r < rows; ++r) {
      random_start(delta.data(), dim, cfg.norm, cfg.epsilon, rng);
      for (std::int64_t i = 0; i < dim; ++i) {
        double v = x0[static_cast<std::size_t>(r * dim + i)] + delta[static_cast<std::size_t>(i)];
        cur[static_cast<std::size_t>(r * dim + i)] = std::clamp(v, cfg.clamp_lo, cfg.clamp_hi);
      }
    }
  }

  std::vector<double> dir(static_cast<std::size_t>(dim));
  for (int step = 0; step < cfg.steps; ++step) {
    auto [loss, g] = f(cur);
    (void)loss;
    for (std::int64_t r = 0; r < rows; ++r) {
      double* xr = cur.data() + r * dim;
      const double* x0r = x0.data() + r * dim;
      step_direction(g.data() + r * dim, dir.data(), dim, cfg.norm);
      for (std::int64_t i = 0; i < dim; ++i) delta[static_cast<std::size_t>(i)] = xr[i] + eta * dir[static_cast<std::size_t>(i)] - x0r[i];
      project_ball(delta.data(), dim, cfg.norm, cfg.epsilon);
      for (std::int64_t i = 0; i < dim; ++i) {
        xr[i] = std::clamp(x0r[i] + delta[static_cast<std::size_t>(i)], cfg.clamp_lo, cfg.clamp_hi);
      }
    }
  }
  return Tensor::constant(x.shape(), std::move(cur));
}

std::pair<double, double> accuracy_ci(const std::vector<RunRecord>& records) {
  std::vector<double> acc;
  acc.reserve(records.size());
  for (const auto& r : records) {
    if (r.valid) acc.push_back(r.accuracy);
  }
  if (acc.size() < 2) throw std::invalid_argument("accuracy_ci needs at least 2 valid records");
  const double n = static_cast<double>(acc.size());
  const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / n;
  double ss = 0.0;
  for (double a : acc) ss += (a - mean) * (a - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {mean, 1.96 * sd / std::sqrt(n)};
}

std::vector<double> principal_component_scores(const std::vector<double>& rows,
                                               std::int64_t n, std::int64_t dim) {
  // mean-center
  std::vector<double> centered = rows;
  for (std::int64_t j = 0; j < dim; ++j) {
    double m = 0.0;
    for (std::int64_t i = 0; i < n; ++i) m += rows[static_cast<std::size_t>(i * dim + j)];
    m /= static_cast<double>(n);
    for (std::int64_t i = 0; i < n; ++i) centered[static_cast<std::size_t>(i * dim + j)] -= m;
  }
  // power iteration on X^T X with a fixed start
  std::vector<double> v(static_cast<std::size_t>(dim), 1.0 / std::sqrt(static_cast<double>(dim)));
  std::vector<double> xv(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(dim));
  for (int iter = 0; iter < 200; ++iter) {
    for (std::int64_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::int64_t j = 0; j < dim; ++j) {
        s += centered[static_cast<std::size_t>(i * dim + j)] * v[static_cast<std::size_t>(j)];
      }
      xv[static_cast<std::size_t>(i)] = s;
    }
    for (std::int64_t j = 0; j < dim; ++j) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        s += centered[static_cast<std::size_t>(i * dim + j)] * xv[static_cast<std::size_t>(i)];
      }
      w[static_cast<std::size_t>(j)] = s;
    }
    double nn = 0.0;
    for (double e : w) nn += e * e;
    nn = std::sqrt(nn);
    if (nn < 1e-300) break;  // degenerate residual, scores stay zero
    for (std::int64_t j = 0; j < dim; ++j) v[static_cast<std::size_t>(j)] = w[static_cast<std::size_t>(j)] / nn;
  }
  // sign convention: largest-magnitude loading positive
  std::int64_t bi = 0;
  for (std::int64_t j = 1; j < dim; ++j) {
    if (std::fabs(v[static_cast<std::size_t>(j)]) > std::fabs(v[static_cast<std::size_t>(bi)])) bi = j;
  }
  if (v[static_cast<std::size_t>(bi)] < 0.0) {
    for (auto& e : v) e = -e;
  }
  std::vector<double> scores(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < dim; ++j) {
      s += centered[static_cast<std::size_t>(i * dim + j)] * v[static_cast<std::size_t>(j)];
    }
    scores[static_cast<std::size_t>(i)] = s;
  }
  return scores;
}

BoundaryProjection boundary_project(const Tensor& features, const Tensor& head_w,
                                    const Tensor& head_b, std::int64_t c1, std::int64_t c2,
                                    const YReducer* reducer) {
  if (features.shape().size() != 2 || head_w.shape().size() != 2) {
    throw ShapeError("boundary_project expects rank-2 features and weights");
  }
  const std::int64_t n = features.shape()[0], d = features.shape()[1];
  const std::int64_t classes = head_w.shape()[1];
  if (head_w.shape()[0] != d || c1 < 0 || c2 < 0 || c1 >= classes || c2 >= classes || c1 == c2) {
    throw std::invalid_argument("boundary_project: bad class pair or shapes");
  }
  std::vector<double> wdiff(static_cast<std::size_t>(d));
  const auto wv = head_w.data();
  for (std::int64_t j = 0; j < d; ++j) {
    wdiff[static_cast<std::size_t>(j)] = wv[static_cast<std::size_t>(j * classes + c1)] -
                                         wv[static_cast<std::size_t>(j * classes + c2)];
  }
  const double wn = lp_norm(wdiff.data(), d, AttackNorm::l2);
  if (wn < 1e-12) throw std::invalid_argument("boundary_project: degenerate class pair");

  BoundaryProjection out;
  out.c1 = c1;
  out.c2 = c2;
  out.cx.resize(static_cast<std::size_t>(n));
  const auto fv = features.data();
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      s += fv[static_cast<std::size_t>(i * d + j)] * wdiff[static_cast<std::size_t>(j)];
    }
    out.cx[static_cast<std::size_t>(i)] = s / wn;
  }
  out.cx_db = -(head_b.at(c1) - head_b.at(c2)) / wn;

  // residual after removing the normal component
  std::vector<double> residual(static_cast<std::size_t>(n * d));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < d; ++j) {
      residual[static_cast<std::size_t>(i * d + j)] =
          fv[static_cast<std::size_t>(i * d + j)] -
          out.cx[static_cast<std::size_t>(i)] * wdiff[static_cast<std::size_t>(j)] / wn;
    }
  }
  out.cy = reducer && *reducer ? (*reducer)(residual, n, d)
                               : principal_component_scores(residual, n, d);
  return out;
}

}  // namespace metadrop
