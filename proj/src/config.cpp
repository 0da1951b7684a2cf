#include "metadrop/config.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>

namespace metadrop {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("config field '" + field + "': " + why);
  };
  if (dataset_kind != "synthetic2d" && dataset_kind != "image_dir") {
    fail("dataset.kind", "must be synthetic2d or image_dir");
  }
  if (dataset_kind == "image_dir") {
    if (dataset_root.empty()) fail("dataset.root", "required for image_dir");
    if (!std::filesystem::exists(dataset_root)) fail("dataset.root", "path does not exist");
    if (!split_file.empty() && !std::filesystem::exists(split_file)) {
      fail("dataset.split_file", "path does not exist");
    }
    if (image_size < 4) fail("dataset.image_size", "must be >= 4");
  }
  if (way < 2) fail("dataset.way", "must be >= 2");
  if (shot < 1) fail("dataset.shot", "must be >= 1");
  if (m_per_class < 1) fail("dataset.m_per_class", "must be >= 1");
  if (backbone != "dense" && backbone != "conv4") fail("model.backbone", "must be dense or conv4");
  if (backbone == "dense" && hidden.empty()) fail("model.hidden", "needs at least one layer");
  if (channels < 1) fail("model.channels", "must be >= 1");
  try {
    parse_noise_mode(noise_mode);
  } catch (const std::exception& e) {
    fail("noise.mode", e.what());
  }
  if (noise_lambda <= 0.0) fail("noise.lambda", "must be > 0");
  try {
    parse_regularizer(reg_family);
    parse_attack_norm(reg_norm);
  } catch (const std::exception& e) {
    fail("regularizer", e.what());
  }
  if (reg_gamma <= 0.0) fail("regularizer.gamma", "must be > 0");
  if (reg_beta_ib < 0.0) fail("regularizer.beta_ib", "must be >= 0");
  if (reg_alpha_max <= 0.0 || reg_alpha_max > 1.0) fail("regularizer.alpha_max", "must be in (0,1]");
  if (reg_pgd_steps < 1) fail("regularizer.pgd_steps", "must be >= 1");
  if (reg_eps_train < 0.0) fail("regularizer.eps_train", "must be >= 0");
  if (k_inner < 0) fail("meta.k_inner", "must be >= 0");
  if (alpha <= 0.0) fail("meta.alpha", "must be > 0");
  if (outer_lr <= 0.0) fail("meta.outer_lr", "must be > 0");
  if (meta_batch < 1) fail("meta.meta_batch", "must be >= 1");
  if (s_train < 1 || s_test < 1) fail("meta.s_train/s_test", "must be >= 1");
  if (!(clip_lo < clip_hi)) fail("meta.clip", "clip_lo must be < clip_hi");
  if (iterations < 0) fail("meta.iterations", "must be >= 0");
  if (curve_every < 1) fail("meta.curve_every", "must be >= 1");
  if (checkpoint_every < 1) fail("meta.checkpoint_every", "must be >= 1");
  if (val_episodes < 2) fail("meta.val_episodes", "must be >= 2");
  if (attack_steps < 1) fail("attack.steps", "must be >= 1");
  if (!(input_lo < input_hi)) fail("attack.input range", "input_lo must be < input_hi");
  if (threads < 0) fail("threads", "must be >= 0");
}

std::string RunConfig::canonical() const {
  std::map<std::string, std::string> kv;
  kv["dataset.kind"] = dataset_kind;
  kv["dataset.root"] = dataset_root;
  kv["dataset.split_file"] = split_file;
  kv["dataset.way"] = std::to_string(way);
  kv["dataset.shot"] = std::to_string(shot);
  kv["dataset.m_per_class"] = std::to_string(m_per_class);
  kv["dataset.image_size"] = std::to_string(image_size);
  kv["dataset.rotations"] = rotations ? "1" : "0";
  kv["dataset.train_ratio"] = fmt_double(train_ratio);
  kv["dataset.val_ratio"] = fmt_double(val_ratio);
  kv["model.backbone"] = backbone;
  {
    std::ostringstream os;
    for (std::size_t i = 0; i < hidden.size(); ++i) os << (i ? "," : "") << hidden[i];
    kv["model.hidden"] = os.str();
  }
  kv["model.channels"] = std::to_string(channels);
  kv["model.standardize"] = standardize ? "1" : "0";
  kv["noise.mode"] = noise_mode;
  kv["noise.lambda"] = fmt_double(noise_lambda);
  kv["regularizer.family"] = reg_family;
  kv["regularizer.gamma"] = fmt_double(reg_gamma);
  kv["regularizer.beta_ib"] = fmt_double(reg_beta_ib);
  kv["regularizer.alpha_max"] = fmt_double(reg_alpha_max);
  kv["regularizer.eps_train"] = fmt_double(reg_eps_train);
  kv["regularizer.pgd_steps"] = std::to_string(reg_pgd_steps);
  kv["regularizer.norm"] = reg_norm;
  kv["meta.k_inner"] = std::to_string(k_inner);
  kv["meta.alpha"] = fmt_double(alpha);
  kv["meta.meta_sgd"] = meta_sgd ? "1" : "0";
  kv["meta.outer_lr"] = fmt_double(outer_lr);
  kv["meta.meta_batch"] = std::to_string(meta_batch);
  kv["meta.s_train"] = std::to_string(s_train);
  kv["meta.s_test"] = std::to_string(s_test);
  kv["meta.clip_lo"] = fmt_double(clip_lo);
  kv["meta.clip_hi"] = fmt_double(clip_hi);
  kv["meta.iterations"] = std::to_string(iterations);
  kv["meta.curve_every"] = std::to_string(curve_every);
  kv["meta.checkpoint_every"] = std::to_string(checkpoint_every);
  kv["meta.val_episodes"] = std::to_string(val_episodes);
  kv["attack.steps"] = std::to_string(attack_steps);
  kv["attack.step_size"] = fmt_double(attack_step_size);
  kv["attack.input_lo"] = fmt_double(input_lo);
  kv["attack.input_hi"] = fmt_double(input_hi);
  kv["attack.random_start"] = attack_random_start ? "1" : "0";
  kv["seed"] = std::to_string(seed);

  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
  return os.str();
}

std::string RunConfig::hash() const {
  // FNV-1a, 64 bit
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, h);
  return buf;
}

void apply_preset(RunConfig& cfg, const std::string& name) {
  if (name.empty() || name == "synthetic") {
    cfg.dataset_kind = "synthetic2d";
    cfg.backbone = "dense";
    cfg.hidden = {64, 64, 64};
    cfg.standardize = false;
    cfg.way = 5;
    cfg.shot = 1;
    cfg.m_per_class = 15;
    cfg.meta_batch = 2;
    cfg.alpha = 0.4;
    cfg.outer_lr = 5e-4;
    cfg.k_inner = 5;
    cfg.iterations = 2000;
    cfg.input_lo = -4.0;
    cfg.input_hi = 4.0;
    return;
  }
  if (name == "omniglot-20w1s" || name == "omniglot-20w5s") {
    cfg.dataset_kind = "image_dir";
    cfg.backbone = "conv4";
    cfg.channels = 64;
    cfg.standardize = true;
    cfg.image_size = 28;
    cfg.rotations = true;
    cfg.way = 20;
    cfg.m_per_class = 15;
    cfg.k_inner = 5;
    cfg.outer_lr = 1e-3;
    cfg.iterations = 40000;
    cfg.input_lo = 0.0;
    cfg.input_hi = 1.0;
    if (name == "omniglot-20w1s") {
      cfg.shot = 1;
      cfg.meta_batch = 8;
      cfg.alpha = 0.1;
    } else {
      cfg.shot = 5;
      cfg.meta_batch = 6;
      cfg.alpha = 0.4;
    }
    return;
  }
  if (name == "mini-5w1s" || name == "mini-5w5s") {
    cfg.dataset_kind = "image_dir";
    cfg.backbone = "conv4";
    cfg.channels = 32;
    cfg.standardize = true;
    cfg.image_size = 84;
    cfg.rotations = false;
    cfg.way = 5;
    cfg.shot = name == "mini-5w1s" ? 1 : 5;
    cfg.m_per_class = 15;
    cfg.meta_batch = 4;
    cfg.alpha = 0.01;
    cfg.outer_lr = 1e-4;
    cfg.k_inner = 5;
    cfg.iterations = 60000;
    cfg.input_lo = 0.0;
    cfg.input_hi = 1.0;
    return;
  }
  throw ConfigError("unknown preset: " + name);
}

Experiment::Experiment(RunConfig c, TaskDistribution d, Network n, NoiseConfig nc,
                       RegularizerConfig r, MetaConfig m)
    : cfg(std::move(c)),
      dist(std::move(d)),
      net(std::move(n)),
      gen(net, nc),
      reg(r),
      meta(m) {}

std::unique_ptr<Experiment> Experiment::build(const RunConfig& cfg) {
  cfg.validate();

  TaskDistribution dist =
      cfg.dataset_kind == "synthetic2d"
          ? TaskDistribution::synthetic2d(Synthetic2dConfig{}, cfg.seed)
          : TaskDistribution::ingest_image_dir(cfg.dataset_root, cfg.image_size, cfg.rotations,
                                               cfg.seed, cfg.split_file, cfg.train_ratio,
                                               cfg.val_ratio,
                                               cfg.shot + cfg.m_per_class);

  Network net = [&] {
    if (cfg.backbone == "dense") {
      std::vector<std::int64_t> dims{dist.input_dim()};
      dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
      return Network::dense_stack(dims, cfg.way, cfg.standardize);
    }
    return Network::conv_stack(dist.channels() > 0 ? dist.channels() : 1, cfg.image_size,
                               cfg.channels, 4, cfg.way, cfg.standardize);
  }();

  NoiseConfig nc{parse_noise_mode(cfg.noise_mode), cfg.noise_lambda};

  RegularizerConfig rc;
  rc.family = parse_regularizer(cfg.reg_family);
  rc.gamma = cfg.reg_gamma;
  rc.beta_ib = cfg.reg_beta_ib;
  rc.alpha_max = cfg.reg_alpha_max;
  rc.eps_train = cfg.reg_eps_train;
  rc.pgd_steps_train = cfg.reg_pgd_steps;
  rc.train_norm = parse_attack_norm(cfg.reg_norm);
  rc.clamp_lo = cfg.input_lo;
  rc.clamp_hi = cfg.input_hi;

  MetaConfig mc;
  mc.k_inner = cfg.k_inner;
  mc.alpha = cfg.alpha;
  mc.meta_sgd = cfg.meta_sgd;
  mc.outer_lr = cfg.outer_lr;
  mc.meta_batch = cfg.meta_batch;
  mc.s_train = cfg.s_train;
  mc.s_test = cfg.s_test;
  mc.clip_lo = cfg.clip_lo;
  mc.clip_hi = cfg.clip_hi;
  mc.iterations = cfg.iterations;
  mc.seed = cfg.seed;
  mc.validate();

  return std::unique_ptr<Experiment>(
      new Experiment(cfg, std::move(dist), std::move(net), nc, rc, mc));
}

MetaState Experiment::init_state() const {
  MetaState st;
  st.theta = net.init_params(cfg.seed);
  ParamSet extra = init_regularizer_params(net, reg, cfg.seed);
  for (const auto& [name, t] : extra) st.theta.insert(name, t);
  st.phi = gen.init_params(cfg.seed, &st.theta);
  if (meta.meta_sgd) st.alpha = init_meta_sgd_alpha(st.theta, meta.alpha);
  st.opt_theta = Adam(st.theta, meta.outer_lr);
  st.opt_phi = Adam(st.phi, meta.outer_lr);
  st.opt_alpha = Adam(st.alpha, meta.outer_lr);
  return st;
}

EpisodeObjective Experiment::objective(const MetaState& state) const {
  return EpisodeObjective{&net, &gen, &state.phi, &reg};
}

std::vector<Episode> Experiment::sample_batch(Split split, std::uint64_t first_index,
                                              std::int64_t count) const {
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    out.push_back(dist.sample(cfg.way, cfg.shot, cfg.m_per_class, split,
                              first_index + static_cast<std::uint64_t>(i)));
  }
  return out;
}

}  // namespace metadrop
