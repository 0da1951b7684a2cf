#pragma once

#include <memory>
#include <string>
#include <vector>

#include "metadrop/metalearn.hpp"

namespace metadrop {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One experiment, one flat config. Every field is reachable from the CLI
/// as --<section>.<key> and from an INI-style file with [section] headers.
struct RunConfig {
  // dataset
  std::string dataset_kind = "synthetic2d";  // synthetic2d | image_dir
  std::string dataset_root;
  std::string split_file;
  std::int64_t way = 5;
  std::int64_t shot = 1;
  std::int64_t m_per_class = 15;
  std::int64_t image_size = 28;
  bool rotations = true;
  double train_ratio = 0.7;
  double val_ratio = 0.1;

  // model
  std::string backbone = "dense";  // dense | conv4
  std::vector<std::int64_t> hidden = {64, 64, 64};
  std::int64_t channels = 64;
  bool standardize = false;  // conv4 turns this on by default via presets

  // noise
  std::string noise_mode = "none";
  double noise_lambda = 0.1;

  // regularizer
  std::string reg_family = "none";
  double reg_gamma = 0.2;
  double reg_beta_ib = 1e-4;
  double reg_alpha_max = 0.7;
  double reg_eps_train = 0.0;
  int reg_pgd_steps = 10;
  std::string reg_norm = "linf";

  // meta
  int k_inner = 5;
  double alpha = 0.1;
  bool meta_sgd = false;
  double outer_lr = 1e-3;
  int meta_batch = 4;
  int s_train = 1;
  int s_test = 30;
  double clip_lo = -3.0;
  double clip_hi = 3.0;
  std::int64_t iterations = 2000;
  std::int64_t curve_every = 50;
  std::int64_t checkpoint_every = 1000;
  std::int64_t val_episodes = 100;

  // attack defaults
  int attack_steps = 200;
  double attack_step_size = 0.0;  // 0 = 2.5 * eps / steps
  double input_lo = 0.0;          // valid input range for attacks
  double input_hi = 1.0;
  bool attack_random_start = true;

  // run
  std::string out_dir = "runs/out";
  std::uint64_t seed = 0;
  int threads = 0;

  void validate() const;           // throws ConfigError with the offending field
  std::string canonical() const;   // sorted key=value serialization
  std::string hash() const;        // 64-bit FNV-1a of canonical(), hex
};

/// Named §-style defaults: synthetic (desk scale), omniglot-20w1s,
/// omniglot-20w5s, mini-5w1s, mini-5w5s.
void apply_preset(RunConfig& cfg, const std::string& name);

/// Everything a command needs, built once from a validated config. The
/// object owns the network that the generator and objectives point into,
/// so it is pinned to the heap and non-copyable.
class Experiment {
 public:
  static std::unique_ptr<Experiment> build(const RunConfig& cfg);

  Experiment(const Experiment&) = delete;
  Experiment& operator=(const Experiment&) = delete;

  const RunConfig cfg;
  const TaskDistribution dist;
  const Network net;
  const NoiseGenerator gen;
  const RegularizerConfig reg;
  const MetaConfig meta;

  MetaState init_state() const;
  EpisodeObjective objective(const MetaState& state) const;
  std::vector<Episode> sample_batch(Split split, std::uint64_t first_index,
                                    std::int64_t count) const;

 private:
  Experiment(RunConfig c, TaskDistribution d, Network n, NoiseConfig nc, RegularizerConfig r,
             MetaConfig m);
};

}  // namespace metadrop
