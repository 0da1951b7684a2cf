#include <CLI11.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "metadrop/checkpoint.hpp"
#include "metadrop/config.hpp"
#include "metadrop/kernels.hpp"
#include "metadrop/selftest.hpp"

namespace fs = std::filesystem;
using namespace metadrop;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void add_config_options(CLI::App* cmd, RunConfig& cfg, std::string& preset) {
  cmd->set_config("--config", "", "flat key=value config file with [section] headers");

  cmd->add_option("--dataset.kind", cfg.dataset_kind)->capture_default_str();
  cmd->add_option("--dataset.root", cfg.dataset_root)->capture_default_str();
  cmd->add_option("--dataset.split_file", cfg.split_file)->capture_default_str();
  cmd->add_option("--dataset.way", cfg.way)->capture_default_str();
  cmd->add_option("--dataset.shot", cfg.shot)->capture_default_str();
  cmd->add_option("--dataset.m_per_class", cfg.m_per_class)->capture_default_str();
  cmd->add_option("--dataset.image_size", cfg.image_size)->capture_default_str();
  cmd->add_option("--dataset.rotations", cfg.rotations)->capture_default_str();
  cmd->add_option("--dataset.train_ratio", cfg.train_ratio)->capture_default_str();
  cmd->add_option("--dataset.val_ratio", cfg.val_ratio)->capture_default_str();

  cmd->add_option("--model.backbone", cfg.backbone)->capture_default_str();
  cmd->add_option("--model.hidden", cfg.hidden)->delimiter(',')->capture_default_str();
  cmd->add_option("--model.channels", cfg.channels)->capture_default_str();
  cmd->add_option("--model.standardize", cfg.standardize)->capture_default_str();

  cmd->add_option("--noise.mode", cfg.noise_mode)->capture_default_str();
  cmd->add_option("--noise.lambda", cfg.noise_lambda)->capture_default_str();

  cmd->add_option("--regularizer.family", cfg.reg_family)->capture_default_str();
  cmd->add_option("--regularizer.gamma", cfg.reg_gamma)->capture_default_str();
  cmd->add_option("--regularizer.beta_ib", cfg.reg_beta_ib)->capture_default_str();
  cmd->add_option("--regularizer.alpha_max", cfg.reg_alpha_max)->capture_default_str();
  cmd->add_option("--regularizer.eps_train", cfg.reg_eps_train)->capture_default_str();
  cmd->add_option("--regularizer.pgd_steps", cfg.reg_pgd_steps)->capture_default_str();
  cmd->add_option("--regularizer.norm", cfg.reg_norm)->capture_default_str();

  cmd->add_option("--meta.k_inner", cfg.k_inner)->capture_default_str();
  cmd->add_option("--meta.alpha", cfg.alpha)->capture_default_str();
  cmd->add_option("--meta.meta_sgd", cfg.meta_sgd)->capture_default_str();
  cmd->add_option("--meta.outer_lr", cfg.outer_lr)->capture_default_str();
  cmd->add_option("--meta.meta_batch", cfg.meta_batch)->capture_default_str();
  cmd->add_option("--meta.s_train", cfg.s_train)->capture_default_str();
  cmd->add_option("--meta.s_test", cfg.s_test)->capture_default_str();
  cmd->add_option("--meta.clip_lo", cfg.clip_lo)->capture_default_str();
  cmd->add_option("--meta.clip_hi", cfg.clip_hi)->capture_default_str();
  cmd->add_option("--meta.iterations", cfg.iterations)->capture_default_str();
  cmd->add_option("--meta.curve_every", cfg.curve_every)->capture_default_str();
  cmd->add_option("--meta.checkpoint_every", cfg.checkpoint_every)->capture_default_str();
  cmd->add_option("--meta.val_episodes", cfg.val_episodes)->capture_default_str();

  cmd->add_option("--attack.steps", cfg.attack_steps)->capture_default_str();
  cmd->add_option("--attack.step_size", cfg.attack_step_size)->capture_default_str();
  cmd->add_option("--attack.input_lo", cfg.input_lo)->capture_default_str();
  cmd->add_option("--attack.input_hi", cfg.input_hi)->capture_default_str();
  cmd->add_option("--attack.random_start", cfg.attack_random_start)->capture_default_str();

  cmd->add_option("--seed", cfg.seed, "run seed")->capture_default_str();
  cmd->add_option("--out", cfg.out_dir, "output directory")->capture_default_str();
  cmd->add_option("--threads", cfg.threads, "worker cap (0 = all cores)")->capture_default_str();
  // applied in a pre-pass before other options; registered for --help and
  // so the parser accepts it
  cmd->add_option("--preset", preset,
                  "defaults: synthetic, omniglot-20w1s, omniglot-20w5s, mini-5w1s, mini-5w5s");
}

std::ofstream open_artifact(const fs::path& path, const RunConfig& cfg,
                            const std::string& extra = "") {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# config_hash=" << cfg.hash() << " seed=" << cfg.seed;
  if (!extra.empty()) out << " " << extra;
  out << "\n";
  return out;
}

AttackConfig attack_config(const RunConfig& cfg, AttackNorm norm, double eps) {
  AttackConfig atk;
  atk.norm = norm;
  atk.epsilon = eps;
  atk.steps = cfg.attack_steps;
  atk.step_size = cfg.attack_step_size;
  atk.clamp_lo = cfg.input_lo;
  atk.clamp_hi = cfg.input_hi;
  atk.random_start = cfg.attack_random_start;
  return atk;
}

ParamSet detach_all(const ParamSet& p) {
  return p.map([](const std::string&, const Tensor& t) { return detach(t); });
}

int cmd_train(const RunConfig& cfg) {
  auto exp = Experiment::build(cfg);
  MetaState st = exp->init_state();
  EpisodeObjective obj = exp->objective(st);
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);

  auto save = [&](const std::string& name) {
    CheckpointMeta meta;
    meta.config_hash = cfg.hash();
    meta.seed = cfg.seed;
    meta.iteration = st.iteration;
    meta.consecutive_failures = st.consecutive_failures;
    meta.adam_t_theta = st.opt_theta.t();
    meta.adam_t_phi = st.opt_phi.t();
    meta.adam_t_alpha = st.opt_alpha.t();
    meta.noise_mode = cfg.noise_mode;
    save_checkpoint((out / name).string(), st, meta);
  };

  if (cfg.iterations == 0) {
    save("checkpoint_final.mdt");
    std::cout << "wrote initial checkpoint only (0 iterations)\n";
    return 0;
  }

  std::vector<Episode> val = exp->sample_batch(Split::meta_val, 0, cfg.val_episodes);
  std::ofstream curve = open_artifact(out / "curve.csv", cfg);
  curve << "iteration,meta_train_loss,val_accuracy,val_ci\n";

  double loss_acc = 0.0;
  std::int64_t loss_n = 0;
  for (std::int64_t it = 0; it < cfg.iterations; ++it) {
    std::vector<Episode> batch = exp->sample_batch(
        Split::meta_train, static_cast<std::uint64_t>(it) * cfg.meta_batch, cfg.meta_batch);
    MetaStepStats stats = meta_step(st, obj, batch, exp->meta);
    if (stats.valid_episodes > 0) {
      loss_acc += stats.mean_test_loss;
      ++loss_n;
    }
    if ((it + 1) % cfg.curve_every == 0 || it + 1 == cfg.iterations) {
      auto records = meta_test(st.theta, obj, val, exp->meta,
                               exp->meta.meta_sgd ? &st.alpha : nullptr);
      auto [acc, hw] = accuracy_ci(records);
      curve << (it + 1) << "," << fmt(loss_n ? loss_acc / static_cast<double>(loss_n) : 0.0)
            << "," << fmt(acc) << "," << fmt(hw) << "\n";
      loss_acc = 0.0;
      loss_n = 0;
    }
    if ((it + 1) % cfg.checkpoint_every == 0 && it + 1 != cfg.iterations) {
      save("checkpoint_" + std::to_string(it + 1) + ".mdt");
    }
  }
  save("checkpoint_final.mdt");
  std::cout << "training complete: " << cfg.iterations << " iterations, artifacts in "
            << out.string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt, std::int64_t episodes) {
  auto exp = Experiment::build(cfg);
  MetaState st = exp->init_state();
  CheckpointMeta meta = load_checkpoint(ckpt, st);
  if (!meta.config_hash.empty() && meta.config_hash != cfg.hash()) {
    std::cerr << "warning: checkpoint config hash " << meta.config_hash
              << " differs from current config " << cfg.hash() << "\n";
  }
  EpisodeObjective obj = exp->objective(st);
  std::vector<Episode> eps = exp->sample_batch(Split::meta_test, 0, episodes);
  auto records = meta_test(st.theta, obj, eps, exp->meta,
                           exp->meta.meta_sgd ? &st.alpha : nullptr);
  auto [acc, hw] = accuracy_ci(records);
  double loss = 0.0;
  std::int64_t valid = 0, invalid = 0;
  for (const auto& r : records) {
    if (r.valid) {
      loss += r.loss;
      ++valid;
    } else {
      ++invalid;
    }
  }
  nlohmann::json j{{"config_hash", cfg.hash()},
                   {"seed", cfg.seed},
                   {"checkpoint", ckpt},
                   {"n_episodes", episodes},
                   {"invalid_episodes", invalid},
                   {"mean_accuracy", acc},
                   {"ci_halfwidth", hw},
                   {"mean_loss", valid ? loss / static_cast<double>(valid) : 0.0}};
  fs::create_directories(cfg.out_dir);
  std::ofstream out(fs::path(cfg.out_dir) / "metrics.json", std::ios::trunc);
  out << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_attack(const RunConfig& cfg, const std::string& ckpt, AttackNorm norm,
               const std::vector<double>& eps_grid, std::int64_t episodes) {
  auto exp = Experiment::build(cfg);
  MetaState st = exp->init_state();
  load_checkpoint(ckpt, st);
  EpisodeObjective obj = exp->objective(st);

  std::ofstream csv = open_artifact(fs::path(cfg.out_dir) / ("attack_" + to_string(norm) + ".csv"),
                                    cfg);
  csv << "norm,epsilon,n_episodes,clean_accuracy,adv_accuracy,adv_ci\n";

  // adapt once per episode, attack at every radius
  std::vector<ParamSet> adapted;
  std::vector<Episode> eps = exp->sample_batch(Split::meta_test, 0, episodes);
  for (const auto& ep : eps) {
    Rng rng(exp->meta.seed, ep.episode_seed);
    TapeScope tape;
    ParamSet a = inner_adapt(obj, st.theta, ep, exp->meta,
                             exp->meta.meta_sgd ? &st.alpha : nullptr, exp->meta.s_test, rng,
                             false);
    adapted.push_back(detach_all(a));
  }

  for (double e : eps_grid) {
    std::vector<RunRecord> recs;
    double clean_sum = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
      const Episode& ep = eps[i];
      const ParamSet& theta_star = adapted[i];
      ModelEvalFn eval_fn = [&](const std::vector<double>& xflat) {
        TapeScope tape;
        Tensor xin = Tensor::param(ep.test_shape, xflat);
        Tensor logits = exp->gen.mode() == NoiseMode::none
                            ? exp->net.forward(theta_star, xin)
                            : exp->gen.noised_forward(theta_star, st.phi, xin, nullptr);
        Tensor loss = sum(softmax_cross_entropy(logits, ep.test_y));
        auto g = grad(loss, {xin});
        return std::make_pair(loss.item(),
                              std::vector<double>(g[0].data().begin(), g[0].data().end()));
      };
      Rng arng(exp->meta.seed ^ 0xA77AC4ULL, ep.episode_seed);
      Tensor xadv = pgd_attack(eval_fn, ep.test_inputs(), attack_config(cfg, norm, e), arng);
      NoGradGuard ng;
      Tensor logits = exp->gen.mode() == NoiseMode::none
                          ? exp->net.forward(theta_star, xadv)
                          : exp->gen.noised_forward(theta_star, st.phi, xadv, nullptr);
      auto pred = argmax_rows(logits);
      std::int64_t hits = 0;
      for (std::size_t k = 0; k < pred.size(); ++k) {
        if (pred[k] == ep.test_y[k]) ++hits;
      }
      RunRecord r;
      r.episode_seed = ep.episode_seed;
      r.accuracy = static_cast<double>(hits) / static_cast<double>(pred.size());
      recs.push_back(r);

      Tensor clean_logits = exp->gen.mode() == NoiseMode::none
                                ? exp->net.forward(theta_star, ep.test_inputs())
                                : exp->gen.noised_forward(theta_star, st.phi, ep.test_inputs(),
                                                          nullptr);
      auto cpred = argmax_rows(clean_logits);
      std::int64_t chits = 0;
      for (std::size_t k = 0; k < cpred.size(); ++k) {
        if (cpred[k] == ep.test_y[k]) ++chits;
      }
      clean_sum += static_cast<double>(chits) / static_cast<double>(cpred.size());
    }
    auto [acc, hw] = accuracy_ci(recs);
    csv << to_string(norm) << "," << fmt(e) << "," << eps.size() << ","
        << fmt(clean_sum / static_cast<double>(eps.size())) << "," << fmt(acc) << "," << fmt(hw)
        << "\n";
  }
  std::cout << "attack sweep written for norm " << to_string(norm) << "\n";
  return 0;
}

int cmd_boundary(const RunConfig& cfg, const std::string& ckpt, std::uint64_t episode_index,
                 std::int64_t c1, std::int64_t c2) {
  auto exp = Experiment::build(cfg);
  MetaState st = exp->init_state();
  load_checkpoint(ckpt, st);
  EpisodeObjective obj = exp->objective(st);
  Episode ep = exp->dist.sample(cfg.way, cfg.shot, cfg.m_per_class, Split::meta_test,
                                episode_index);
  Rng rng(exp->meta.seed, ep.episode_seed);
  TapeScope tape;
  ParamSet theta_star = inner_adapt(obj, st.theta, ep, exp->meta,
                                    exp->meta.meta_sgd ? &st.alpha : nullptr, exp->meta.s_test,
                                    rng, false);

  // test instances of the two classes only
  std::vector<std::int64_t> keep;
  for (std::size_t i = 0; i < ep.test_y.size(); ++i) {
    if (ep.test_y[i] == c1 || ep.test_y[i] == c2) keep.push_back(static_cast<std::int64_t>(i));
  }
  Tensor all_feats = obj.deterministic_features(theta_star, ep.test_inputs());
  Tensor feats = gather_rows(all_feats, keep);
  auto proj = boundary_project(detach(feats), detach(theta_star.at("head.w")),
                               detach(theta_star.at("head.b")), c1, c2);

  std::ofstream csv = open_artifact(fs::path(cfg.out_dir) / "boundary.csv", cfg,
                                    "c_x_db=" + fmt(proj.cx_db));
  csv << "episode,class_pair,c_x,c_y,true_label,predicted_label\n";
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const auto row = static_cast<std::size_t>(keep[i]);
    const std::int64_t pred = proj.cx[i] >= proj.cx_db ? c1 : c2;
    csv << episode_index << "," << c1 << "-" << c2 << "," << fmt(proj.cx[i]) << ","
        << fmt(proj.cy[i]) << "," << ep.test_y[row] << "," << pred << "\n";
  }
  std::cout << "boundary projection written (c_x_db=" << fmt(proj.cx_db) << ")\n";
  return 0;
}

int cmd_selftest() {
  auto results = run_selftest();
  bool all = true;
  for (const auto& r : results) {
    std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name;
    if (!r.passed) std::cout << ": " << r.detail;
    std::cout << "\n";
    all = all && r.passed;
  }
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  // presets establish defaults before config/flags override them
  std::string preset;
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::strcmp(argv[i], "--preset") == 0) preset = argv[i + 1];
  }
  RunConfig cfg;
  try {
    if (!preset.empty()) apply_preset(cfg, preset);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  CLI::App app{"meta-learned input-dependent noise for few-shot classification"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "meta-train and write checkpoints + curve CSV");
  add_config_options(train, cfg, preset);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint over meta-test episodes");
  add_config_options(eval, cfg, preset);
  std::string eval_ckpt;
  std::int64_t eval_episodes = 1000;
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--episodes", eval_episodes)->capture_default_str();

  auto* attack = app.add_subcommand("attack", "PGD robustness sweep over an epsilon grid");
  add_config_options(attack, cfg, preset);
  std::string attack_ckpt, attack_norm = "linf";
  std::vector<double> eps_grid;
  std::int64_t attack_episodes = 20;
  attack->add_option("--checkpoint", attack_ckpt)->required();
  attack->add_option("--norm", attack_norm)->check(CLI::IsMember({"l1", "l2", "linf"}));
  attack->add_option("--eps-grid", eps_grid)->delimiter(',')->required();
  attack->add_option("--episodes", attack_episodes)->capture_default_str();

  auto* boundary = app.add_subcommand("boundary", "decision-boundary projection CSV");
  add_config_options(boundary, cfg, preset);
  std::string boundary_ckpt;
  std::uint64_t episode_index = 0;
  std::vector<std::int64_t> class_pair{0, 1};
  boundary->add_option("--checkpoint", boundary_ckpt)->required();
  boundary->add_option("--episode-index", episode_index)->capture_default_str();
  boundary->add_option("--classes", class_pair)->delimiter(',')->expected(2);

  auto* selftest = app.add_subcommand("selftest", "run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    cfg.validate();
    kernels::set_threads(cfg.threads);
    if (train->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_eval(cfg, eval_ckpt, eval_episodes);
    if (attack->parsed()) {
      return cmd_attack(cfg, attack_ckpt, parse_attack_norm(attack_norm), eps_grid,
                        attack_episodes);
    }
    if (boundary->parsed()) {
      if (class_pair.size() != 2) {
        std::cerr << "error: --classes expects two labels, e.g. --classes 0,1\n";
        return 2;
      }
      return cmd_boundary(cfg, boundary_ckpt, episode_index, class_pair[0], class_pair[1]);
    }
    if (selftest->parsed()) return cmd_selftest();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const NonFiniteError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
