#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "metadrop/params.hpp"
#include "metadrop/rng.hpp"
#include "metadrop/tensor.hpp"

namespace metadrop {

enum class AttackNorm { l1, l2, linf };

AttackNorm parse_attack_norm(const std::string& s);
std::string to_string(AttackNorm n);

struct AttackConfig {
  AttackNorm norm = AttackNorm::linf;
  double epsilon = 0.0;
  int steps = 200;
  double step_size = 0.0;  // <= 0 picks 2.5 * epsilon / steps
  double clamp_lo = 0.0;   // valid input range
  double clamp_hi = 1.0;
  bool random_start = true;
};

/// Per-episode outcome.
struct RunRecord {
  std::uint64_t episode_seed = 0;
  double accuracy = 0.0;
  double loss = 0.0;
  bool valid = true;
  std::string note;
};

/// Summed loss over all rows and its gradient with respect to the
/// flattened input.
using ModelEvalFn =
    std::function<std::pair<double, std::vector<double>>(const std::vector<double>&)>;

/// Projected gradient ascent on the loss, each row of `x` confined to the
/// cfg.norm ball of radius epsilon around its start and to the valid range.
Tensor pgd_attack(const ModelEvalFn& f, const Tensor& x, const AttackConfig& cfg, Rng& rng);

/// Mean episode accuracy with a 95% normal-approximation halfwidth
/// (1.96 * sd / sqrt(n)). Invalid records are excluded.
std::pair<double, double> accuracy_ci(const std::vector<RunRecord>& records);

double lp_norm(const double* v, std::int64_t n, AttackNorm norm);

/// 2D projection of final-layer features against the c1-vs-c2 decision
/// hyperplane. x is the coordinate along the hyperplane normal, cx_db the
/// boundary's coordinate, and y comes from `reducer` on the residual
/// (default: first principal component).
struct BoundaryProjection {
  std::vector<double> cx;
  std::vector<double> cy;
  double cx_db = 0.0;
  std::int64_t c1 = 0, c2 = 0;
};

using YReducer = std::function<std::vector<double>(const std::vector<double>& residual,
                                                   std::int64_t rows, std::int64_t dim)>;

BoundaryProjection boundary_project(const Tensor& features, const Tensor& head_w,
                                    const Tensor& head_b, std::int64_t c1, std::int64_t c2,
                                    const YReducer* reducer = nullptr);

/// Leading principal component scores of mean-centered rows; deterministic
/// power iteration. Exposed as the default boundary y-reducer.
std::vector<double> principal_component_scores(const std::vector<double>& rows,
                                               std::int64_t n, std::int64_t dim);

}  // namespace metadrop
