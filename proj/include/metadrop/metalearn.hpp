#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "metadrop/baselines.hpp"
#include "metadrop/evaluate.hpp"
#include "metadrop/network.hpp"
#include "metadrop/noise.hpp"
#include "metadrop/tasks.hpp"

namespace metadrop {

/// Raised when the episode failure policy aborts a run.
struct NumericalAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MetaConfig {
  int k_inner = 5;
  double alpha = 0.1;    // inner step size (broadcast start value for meta-sgd)
  bool meta_sgd = false; // per-parameter learned step sizes
  double outer_lr = 1e-3;
  int meta_batch = 4;
  int s_train = 1;  // MC samples per instance per inner step, training
  int s_test = 30;  //   "    , evaluation
  double clip_lo = -3.0;
  double clip_hi = 3.0;
  std::int64_t iterations = 2000;
  std::uint64_t seed = 0;
  double alpha_floor = 1e-6;

  void validate() const;
};

/// Adam over a named parameter set, moments kept name-aligned.
class Adam {
 public:
  Adam() = default;
  Adam(const ParamSet& params, double lr);
  void step(ParamSet& params, const ParamSet& grads);
  double lr() const { return lr_; }
  std::int64_t t() const { return t_; }
  void set_t(std::int64_t t) { t_ = t; }
  ParamSet& m() { return m_; }
  ParamSet& v() { return v_; }
  const ParamSet& m() const { return m_; }
  const ParamSet& v() const { return v_; }

 private:
  double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
  ParamSet m_, v_;
};

/// Inner training objective for one adaptation step; the rng drives any
/// sampling the objective performs.
using InnerLossFn = std::function<Tensor(const ParamSet& theta, int step, Rng& rng)>;

/// K gradient-descent steps on `loss`. With alpha_vec the update is
/// elementwise (meta-sgd), otherwise `alpha` scales every parameter. With
/// create_graph the returned parameters stay differentiable with respect to
/// theta0 and anything else the loss touches.
ParamSet adapt(const ParamSet& theta0, const InnerLossFn& loss, int k, double alpha,
               const ParamSet* alpha_vec, Rng& rng, bool create_graph);

/// Bundles the model pieces of an experiment. `gen`/`phi` may describe a
/// no-noise setup; `reg` may be null. The same objective serves training
/// (stochastic inner path) and evaluation (deterministic test path).
struct EpisodeObjective {
  const Network* net = nullptr;
  const NoiseGenerator* gen = nullptr;
  const ParamSet* phi = nullptr;
  const RegularizerConfig* reg = nullptr;

  /// MC estimate over `mc` noise samples per instance of the training loss,
  /// fresh draws each call, plus any regularizer penalty.
  Tensor inner_loss(const ParamSet& theta, const Episode& ep, int mc, int step, Rng& rng) const;
  /// Logits of the test split with every stochastic path replaced by its
  /// deterministic counterpart.
  Tensor test_logits(const ParamSet& theta, const Episode& ep) const;
  Tensor test_loss(const ParamSet& theta, const Episode& ep) const;
  /// Final-layer features of arbitrary inputs on the deterministic path.
  Tensor deterministic_features(const ParamSet& theta, const Tensor& x) const;
};

ParamSet inner_adapt(const EpisodeObjective& obj, const ParamSet& theta, const Episode& ep,
                     const MetaConfig& cfg, const ParamSet* alpha_vec, int mc_samples,
                     Rng& rng, bool create_graph);

/// Inner adaptation with each training batch replaced by its PGD
/// perturbation against the current parameters before every step; the
/// perturbations are constants (the attack is not differentiated through).
ParamSet adversarial_inner(const Network& net, const ParamSet& theta, const Episode& ep,
                           double epsilon, AttackNorm norm, int attack_steps,
                           const MetaConfig& cfg, Rng& rng, bool create_graph = false);

/// Broadcast copy of the scalar inner step size for every parameter.
ParamSet init_meta_sgd_alpha(const ParamSet& theta, double alpha0);

/// Elementwise clamp applied to outer gradients before Adam.
void clip_elementwise(std::vector<double>& values, double lo, double hi);

struct MetaState {
  ParamSet theta;
  ParamSet phi;
  ParamSet alpha;  // empty unless meta_sgd
  Adam opt_theta, opt_phi, opt_alpha;
  std::uint64_t iteration = 0;
  int consecutive_failures = 0;
};

struct MetaStepStats {
  double mean_test_loss = 0.0;
  int valid_episodes = 0;
  int failed_episodes = 0;
};

/// One outer update: adapts every episode of the batch (concurrently, each
/// on its own tape and rng stream), backpropagates the deterministic test
/// loss through all inner steps, averages valid episode gradients in index
/// order, clips elementwise and applies Adam to theta, phi and alpha.
/// Non-finite episodes are dropped; three consecutive failures abort.
MetaStepStats meta_step(MetaState& state, const EpisodeObjective& obj,
                        const std::vector<Episode>& batch, const MetaConfig& cfg);

/// Per-episode adaptation + deterministic evaluation with cfg.s_test MC
/// samples in the inner steps.
std::vector<RunRecord> meta_test(const ParamSet& theta, const EpisodeObjective& obj,
                                 const std::vector<Episode>& episodes, const MetaConfig& cfg,
                                 const ParamSet* alpha_vec, int k_override = -1);

}  // namespace metadrop
