#include "metadrop/metalearn.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "metadrop/kernels.hpp"

namespace metadrop {

void MetaConfig::validate() const {
  if (k_inner < 0) throw std::invalid_argument("k_inner must be >= 0");
  if (alpha <= 0.0) throw std::invalid_argument("alpha must be > 0");
  if (s_train < 1 || s_test < 1) throw std::invalid_argument("MC sample counts must be >= 1");
  if (!(clip_lo < clip_hi)) throw std::invalid_argument("clip_lo must be < clip_hi");
  if (meta_batch < 1) throw std::invalid_argument("meta_batch must be >= 1");
}

Adam::Adam(const ParamSet& params, double lr) : lr_(lr) {
  m_ = params.map([](const std::string&, const Tensor& t) { return Tensor::zeros(t.shape()); });
  v_ = params.map([](const std::string&, const Tensor& t) { return Tensor::zeros(t.shape()); });
}

void Adam::step(ParamSet& params, const ParamSet& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.item(i).first;
    auto& p = params.at(name).leaf_data();
    const auto g = grads.at(name).data();
    auto& m = m_.at(name).leaf_data();
    auto& v = v_.at(name).leaf_data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
      v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
      p[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

ParamSet adapt(const ParamSet& theta0, const InnerLossFn& loss, int k, double alpha,
               const ParamSet* alpha_vec, Rng& rng, bool create_graph) {
  ParamSet theta = theta0;
  for (int step = 0; step < k; ++step) {
    Tensor l = loss(theta, step, rng);
    ParamSet g = grad(l, theta, create_graph);
    ParamSet next;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const auto& [name, t] = theta.item(i);
      Tensor delta = alpha_vec ? mul(alpha_vec->at(name), g.at(name)) : scale(g.at(name), alpha);
      next.insert(name, sub(t, delta));
    }
    theta = std::move(next);
  }
  return theta;
}

namespace {

// row-replication of a constant batch; copy s is rows [s*n, (s+1)*n)
Tensor tile_batch(const Tensor& x, int copies) {
  if (copies == 1) return x;
  const auto src = x.data();
  std::vector<double> out;
  out.reserve(src.size() * static_cast<std::size_t>(copies));
  for (int s = 0; s < copies; ++s) out.insert(out.end(), src.begin(), src.end());
  Shape shape = x.shape();
  shape[0] *= copies;
  return Tensor::constant(std::move(shape), std::move(out));
}

std::vector<std::int64_t> tile_labels(const std::vector<std::int64_t>& y, int copies) {
  std::vector<std::int64_t> out;
  out.reserve(y.size() * static_cast<std::size_t>(copies));
  for (int s = 0; s < copies; ++s) out.insert(out.end(), y.begin(), y.end());
  return out;
}

// per-copy interpolation draws for one forward pass
struct MixPlan {
  bool active = false;
  std::vector<std::size_t> site_of_copy;  // 0 = input, 1+l = after hidden layer l
  std::vector<std::int64_t> perm;         // full-length, identity outside the copy
  std::vector<double> lam_of_copy;
  Tensor targets;  // soft label rows
};

MixPlan draw_mix_plan(const RegularizerConfig& rc, std::int64_t n, int copies,
                      std::size_t n_layers, const std::vector<std::int64_t>& labels,
                      std::int64_t classes, Rng& rng) {
  MixPlan plan;
  plan.active = true;
  plan.perm.resize(static_cast<std::size_t>(n * copies));
  std::iota(plan.perm.begin(), plan.perm.end(), 0);
  std::vector<double> targets(static_cast<std::size_t>(n * copies * classes), 0.0);
  for (int s = 0; s < copies; ++s) {
    plan.site_of_copy.push_back(rng.uniform_index(n_layers + 1));
    const double lam = rc.forced_lambda ? *rc.forced_lambda : rng.beta(rc.gamma, rc.gamma);
    plan.lam_of_copy.push_back(lam);
    const std::int64_t base = static_cast<std::int64_t>(s) * n;
    // permutation within this copy's rows
    for (std::int64_t i = n; i > 1; --i) {
      std::swap(plan.perm[static_cast<std::size_t>(base + i - 1)],
                plan.perm[static_cast<std::size_t>(base + static_cast<std::int64_t>(
                                                              rng.uniform_index(static_cast<std::uint64_t>(i))))]);
    }
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t row = base + i;
      const std::int64_t pair = plan.perm[static_cast<std::size_t>(row)];
      const std::int64_t yi = labels[static_cast<std::size_t>(row)];
      const std::int64_t yj = labels[static_cast<std::size_t>(pair)];
      targets[static_cast<std::size_t>(row * classes + yi)] += lam;
      targets[static_cast<std::size_t>(row * classes + yj)] += 1.0 - lam;
    }
  }
  plan.targets = Tensor::constant({n * copies, classes}, std::move(targets));
  return plan;
}

// interpolates the rows of each copy whose chosen site matches `site`
Tensor apply_mix_site(const MixPlan& plan, std::size_t site, const Tensor& h, std::int64_t n) {
  bool any = false;
  for (auto s : plan.site_of_copy) any = any || s == site;
  if (!any) return h;
  const std::int64_t rows = h.shape()[0];
  std::vector<double> lam(static_cast<std::size_t>(rows), 1.0);
  std::vector<std::int64_t> perm(static_cast<std::size_t>(rows));
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t s = 0; s < plan.site_of_copy.size(); ++s) {
    if (plan.site_of_copy[s] != site) continue;
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t row = static_cast<std::int64_t>(s) * n + i;
      lam[static_cast<std::size_t>(row)] = plan.lam_of_copy[s];
      perm[static_cast<std::size_t>(row)] = plan.perm[static_cast<std::size_t>(row)];
    }
  }
  const Shape orig = h.shape();
  Tensor rows2d = orig.size() == 2 ? h : reshape(h, {rows, h.numel() / rows});
  Tensor lrow = Tensor::constant({rows, 1}, std::move(lam));
  Tensor mixed = add(mul(rows2d, lrow),
                     mul(gather_rows(rows2d, perm), sub(Tensor::ones({rows, 1}), lrow)));
  return orig.size() == 2 ? mixed : reshape(mixed, orig);
}

Tensor reg_alpha_map(const Network& net, const ParamSet& theta, std::size_t l,
                     const Tensor& h_prev, double alpha_max) {
  const auto& spec = net.layers()[l];
  const std::string base = "reg.alpha" + std::to_string(l) + ".";
  Tensor raw = spec.kind == LayerKind::dense
                   ? add(matmul(h_prev, theta.at(base + "w")), theta.at(base + "b"))
                   : conv2d(h_prev, theta.at(base + "w"), theta.at(base + "b"));
  return info_dropout_alpha(raw, alpha_max);
}

Tensor vib_mu(const ParamSet& theta, const Tensor& feats) {
  return add(matmul(feats, theta.at("reg.vib_mu.w")), theta.at("reg.vib_mu.b"));
}

Tensor vib_sigma(const ParamSet& theta, const Tensor& feats) {
  return softplus(add(matmul(feats, theta.at("reg.vib_sigma.w")), theta.at("reg.vib_sigma.b")));
}

}  // namespace

Tensor EpisodeObjective::inner_loss(const ParamSet& theta, const Episode& ep, int mc,
                                    int step, Rng& rng) const {
  (void)step;
  const NoiseMode mode = gen ? gen->mode() : NoiseMode::none;
  const RegularizerConfig rc = reg ? *reg : RegularizerConfig{};
  const bool reg_on = rc.active();
  const std::int64_t n = ep.n_train();
  const std::int64_t classes = net->num_classes();

  Tensor x = ep.train_inputs();
  std::vector<std::int64_t> labels = ep.train_y;

  if (rc.family == RegularizerFamily::adv_train && reg_on) {
    // constants by construction: detach the current parameters and attack
    ParamSet snap = theta.map([](const std::string&, const Tensor& t) { return detach(t); });
    NoGradGuard ng;
    x = adversarial_perturb(*net, snap, x, labels, rc, rng);
  }

  // a deterministic objective has a zero-variance estimator: one sample
  // already equals the exact expectation
  const bool stochastic =
      (gen && mode != NoiseMode::none && mode != NoiseMode::deterministic) ||
      (reg_on && rc.family != RegularizerFamily::adv_train);
  const int s = stochastic ? std::max(1, mc) : 1;
  // weight noise and batch statistics are shared across a forward pass, so
  // those setups average separate passes instead of tiling rows
  const bool must_loop = net->has_standardize() || mode == NoiseMode::weight_gaussian;
  const int copies = must_loop ? 1 : s;
  const int loops = must_loop ? s : 1;

  Tensor total;
  for (int loop = 0; loop < loops; ++loop) {
    Tensor xt = tile_batch(x, copies);
    std::vector<std::int64_t> yt = tile_labels(labels, copies);

    MixPlan mix;
    if (rc.family == RegularizerFamily::mixup && n >= 2) {
      mix = draw_mix_plan(rc, n, copies, net->layers().size(), yt, classes, rng);
    }

    Tensor penalty;
    auto add_penalty = [&penalty](const Tensor& t) {
      penalty = penalty.defined() ? add(penalty, t) : t;
    };

    ForwardHooks hooks;
    if (mix.active) {
      hooks.input = [&](const Tensor& xin) { return apply_mix_site(mix, 0, xin, n); };
      hooks.post = [&](std::size_t l, const Tensor& h) {
        return apply_mix_site(mix, l + 1, h, n);
      };
    }
    hooks.preact = [&](std::size_t l, const Tensor& f, const Tensor& h_prev) {
      Tensor cur = f;
      if (gen && mode != NoiseMode::none && mode != NoiseMode::weight_gaussian) {
        Tensor z;
        switch (mode) {
          case NoiseMode::mult_softplus:
            z = gen->sample_multiplicative(*phi, l, h_prev, rng);
            break;
          case NoiseMode::additive:
            z = gen->sample_additive(*phi, l, h_prev, rng);
            break;
          default:
            z = gen->sample_ablation(*phi, l, h_prev, rng);
            break;
        }
        cur = mode == NoiseMode::additive ? add(cur, z) : mul(cur, z);
      }
      if (rc.family == RegularizerFamily::info_dropout && reg_on) {
        Tensor alpha = reg_alpha_map(*net, theta, l, h_prev, rc.alpha_max);
        auto [noised, kl] = info_dropout_layer(cur, alpha, rng);
        add_penalty(kl);
        cur = noised;
      }
      return cur;
    };
    if (rc.family == RegularizerFamily::vib && reg_on) {
      hooks.features = [&](const Tensor& feats) {
        auto [z, kl] = vib_layer(vib_mu(theta, feats), vib_sigma(theta, feats), rng);
        add_penalty(kl);
        return z;
      };
    }

    Tensor logits;
    if (mode == NoiseMode::weight_gaussian) {
      ParamSet sampled = gen->sample_weight_params(theta, *phi, rng);
      logits = net->forward(sampled, xt, &hooks);
    } else {
      logits = net->forward(theta, xt, &hooks);
    }

    Tensor ce = mix.active ? softmax_cross_entropy(logits, mix.targets)
                           : softmax_cross_entropy(logits, yt);
    Tensor l = mean(ce);
    if (penalty.defined()) {
      l = add(l, scale(penalty, rc.beta_ib / static_cast<double>(xt.shape()[0])));
    }
    total = total.defined() ? add(total, l) : l;
  }
  return loops == 1 ? total : scale(total, 1.0 / static_cast<double>(loops));
}

Tensor EpisodeObjective::test_logits(const ParamSet& theta, const Episode& ep) const {
  Tensor x = ep.test_inputs();
  const RegularizerConfig rc = reg ? *reg : RegularizerConfig{};
  ForwardHooks hooks;
  if (rc.family == RegularizerFamily::vib && rc.active()) {
    // the classifier was trained on encoded features; evaluate at the mean code
    hooks.features = [&](const Tensor& feats) { return vib_mu(theta, feats); };
  }
  if (gen && gen->mode() != NoiseMode::none) {
    if (rc.family == RegularizerFamily::vib && rc.active()) {
      throw std::logic_error("vib regularizer combined with a noise generator is unsupported");
    }
    return gen->noised_forward(theta, phi ? *phi : ParamSet{}, x, nullptr);
  }
  return net->forward(theta, x, &hooks);
}

Tensor EpisodeObjective::test_loss(const ParamSet& theta, const Episode& ep) const {
  return mean(softmax_cross_entropy(test_logits(theta, ep), ep.test_y));
}

Tensor EpisodeObjective::deterministic_features(const ParamSet& theta, const Tensor& x) const {
  if (gen && gen->mode() != NoiseMode::none) {
    return gen->noised_features(theta, phi ? *phi : ParamSet{}, x, nullptr);
  }
  const RegularizerConfig rc = reg ? *reg : RegularizerConfig{};
  ForwardHooks hooks;
  if (rc.family == RegularizerFamily::vib && rc.active()) {
    hooks.features = [&](const Tensor& feats) { return vib_mu(theta, feats); };
  }
  return net->features(theta, x, &hooks);
}

ParamSet inner_adapt(const EpisodeObjective& obj, const ParamSet& theta, const Episode& ep,
                     const MetaConfig& cfg, const ParamSet* alpha_vec, int mc_samples,
                     Rng& rng, bool create_graph) {
  InnerLossFn loss = [&](const ParamSet& t, int step, Rng& r) {
    return obj.inner_loss(t, ep, mc_samples, step, r);
  };
  return adapt(theta, loss, cfg.k_inner, cfg.alpha, alpha_vec, rng, create_graph);
}

ParamSet adversarial_inner(const Network& net, const ParamSet& theta, const Episode& ep,
                           double epsilon, AttackNorm norm, int attack_steps,
                           const MetaConfig& cfg, Rng& rng, bool create_graph) {
  RegularizerConfig rc;
  rc.family = RegularizerFamily::adv_train;
  rc.eps_train = epsilon;
  rc.train_norm = norm;
  rc.pgd_steps_train = attack_steps;
  EpisodeObjective obj{&net, nullptr, nullptr, &rc};
  return inner_adapt(obj, theta, ep, cfg, nullptr, 1, rng, create_graph);
}

void clip_elementwise(std::vector<double>& values, double lo, double hi) {
  for (auto& v : values) v = std::clamp(v, lo, hi);
}

ParamSet init_meta_sgd_alpha(const ParamSet& theta, double alpha0) {
  return theta.map([alpha0](const std::string&, const Tensor& t) {
    return Tensor::param(t.shape(),
                         std::vector<double>(static_cast<std::size_t>(t.numel()), alpha0));
  });
}

namespace {

ParamSet unflatten_like(const ParamSet& ref, const std::vector<double>& flat) {
  ParamSet out;
  std::size_t off = 0;
  for (const auto& [name, t] : ref) {
    const auto n = static_cast<std::size_t>(t.numel());
    out.insert(name, Tensor::constant(t.shape(),
                                      std::vector<double>(flat.begin() + off,
                                                          flat.begin() + off + n)));
    off += n;
  }
  return out;
}

bool episode_parallel() {
  return kernels::backend() == kernels::Backend::openmp && omp_get_max_threads() > 1;
}

}  // namespace

MetaStepStats meta_step(MetaState& state, const EpisodeObjective& obj,
                        const std::vector<Episode>& batch, const MetaConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(batch.size());
  const std::size_t nt = static_cast<std::size_t>(state.theta.numel());
  const std::size_t np = static_cast<std::size_t>(state.phi.numel());
  const std::size_t na = static_cast<std::size_t>(state.alpha.numel());

  std::vector<std::vector<double>> slot_grads(static_cast<std::size_t>(n));
  std::vector<double> slot_loss(static_cast<std::size_t>(n), 0.0);
  std::vector<char> slot_ok(static_cast<std::size_t>(n), 0);

  std::vector<Tensor> inputs;
  for (const auto& [name, t] : state.theta) inputs.push_back(t);
  for (const auto& [name, t] : state.phi) inputs.push_back(t);
  for (const auto& [name, t] : state.alpha) inputs.push_back(t);

#pragma omp parallel for schedule(dynamic) if (episode_parallel())
  for (int e = 0; e < n; ++e) {
    const Episode& ep = batch[static_cast<std::size_t>(e)];
    try {
      Rng rng(cfg.seed, ep.episode_seed);
      TapeScope tape;
      ParamSet adapted = inner_adapt(obj, state.theta, ep, cfg,
                                     cfg.meta_sgd ? &state.alpha : nullptr, cfg.s_train, rng,
                                     /*create_graph=*/true);
      Tensor loss = obj.test_loss(adapted, ep);
      std::vector<Tensor> g = grad(loss, inputs);
      std::vector<double> flat;
      flat.reserve(nt + np + na);
      for (const auto& t : g) flat.insert(flat.end(), t.data().begin(), t.data().end());
      slot_grads[static_cast<std::size_t>(e)] = std::move(flat);
      slot_loss[static_cast<std::size_t>(e)] = loss.item();
      slot_ok[static_cast<std::size_t>(e)] = 1;
    } catch (const NonFiniteError&) {
      slot_ok[static_cast<std::size_t>(e)] = 0;
    }
  }

  MetaStepStats stats;
  std::vector<double> avg(nt + np + na, 0.0);
  for (int e = 0; e < n; ++e) {
    if (!slot_ok[static_cast<std::size_t>(e)]) {
      ++stats.failed_episodes;
      if (++state.consecutive_failures >= 3) {
        throw NumericalAbort("3 consecutive non-finite episodes");
      }
      continue;
    }
    state.consecutive_failures = 0;
    ++stats.valid_episodes;
    stats.mean_test_loss += slot_loss[static_cast<std::size_t>(e)];
    const auto& g = slot_grads[static_cast<std::size_t>(e)];
    for (std::size_t j = 0; j < avg.size(); ++j) avg[j] += g[j];
  }
  if (stats.valid_episodes == 0) {
    ++state.iteration;
    return stats;  // nothing to update this round
  }
  stats.mean_test_loss /= static_cast<double>(stats.valid_episodes);
  const double inv = 1.0 / static_cast<double>(stats.valid_episodes);
  for (auto& v : avg) v *= inv;
  clip_elementwise(avg, cfg.clip_lo, cfg.clip_hi);

  std::vector<double> gt(avg.begin(), avg.begin() + nt);
  state.opt_theta.step(state.theta, unflatten_like(state.theta, gt));
  if (np > 0) {
    std::vector<double> gp(avg.begin() + nt, avg.begin() + nt + np);
    state.opt_phi.step(state.phi, unflatten_like(state.phi, gp));
  }
  if (na > 0) {
    std::vector<double> ga(avg.begin() + nt + np, avg.end());
    state.opt_alpha.step(state.alpha, unflatten_like(state.alpha, ga));
    for (auto& [name, t] : state.alpha) {
      for (auto& v : t.leaf_data()) v = std::fmax(v, cfg.alpha_floor);
    }
  }
  ++state.iteration;
  return stats;
}

std::vector<RunRecord> meta_test(const ParamSet& theta, const EpisodeObjective& obj,
                                 const std::vector<Episode>& episodes, const MetaConfig& cfg,
                                 const ParamSet* alpha_vec, int k_override) {
  cfg.validate();
  MetaConfig local = cfg;
  if (k_override >= 0) local.k_inner = k_override;
  const int n = static_cast<int>(episodes.size());
  std::vector<RunRecord> records(static_cast<std::size_t>(n));

#pragma omp parallel for schedule(dynamic) if (episode_parallel())
  for (int e = 0; e < n; ++e) {
    const Episode& ep = episodes[static_cast<std::size_t>(e)];
    RunRecord& rec = records[static_cast<std::size_t>(e)];
    rec.episode_seed = ep.episode_seed;
    try {
      Rng rng(local.seed, ep.episode_seed);
      TapeScope tape;
      ParamSet adapted = inner_adapt(obj, theta, ep, local, alpha_vec, local.s_test, rng,
                                     /*create_graph=*/false);
      Tensor logits = obj.test_logits(adapted, ep);
      rec.loss = mean(softmax_cross_entropy(logits, ep.test_y)).item();
      const auto pred = argmax_rows(logits);
      std::int64_t hits = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] == ep.test_y[i]) ++hits;
      }
      rec.accuracy = static_cast<double>(hits) / static_cast<double>(pred.size());
      rec.valid = true;
    } catch (const NonFiniteError& err) {
      rec.valid = false;
      rec.note = err.what();
    }
  }
  return records;
}

}  // namespace metadrop
