#include "metadrop/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace metadrop {

namespace {

constexpr char kMagic[8] = {'M', 'D', 'T', 'N', '0', '0', '0', '1'};

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated tensor file");
  return v;
}

void restore_group(ParamSet& dst, const ParamSet& src, const std::string& prefix) {
  for (auto& [name, t] : dst) {
    const Tensor& loaded = src.at(prefix + name);
    if (loaded.shape() != t.shape()) {
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    }
    t.leaf_data().assign(loaded.data().begin(), loaded.data().end());
  }
}

}  // namespace

void write_tensors(const std::string& path, const ParamSet& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  put<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) put<std::int64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * static_cast<std::int64_t>(sizeof(double))));
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

ParamSet read_tensors(const std::string& path, bool as_params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error(path + " is not a tensor container");
  }
  const auto count = get<std::uint64_t>(in);
  ParamSet out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = get<std::uint32_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::int64_t>(in);
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated tensor file " + path);
    for (double v : data) {
      if (!std::isfinite(v)) throw NonFiniteError("non-finite value in " + path);
    }
    out.insert(name, as_params ? Tensor::param(std::move(shape), std::move(data))
                               : Tensor::constant(std::move(shape), std::move(data)));
  }
  return out;
}

void save_checkpoint(const std::string& path, const MetaState& state,
                     const CheckpointMeta& meta) {
  ParamSet all;
  auto add_group = [&all](const std::string& prefix, const ParamSet& group) {
    for (const auto& [name, t] : group) all.insert(prefix + name, t);
  };
  add_group("theta/", state.theta);
  add_group("phi/", state.phi);
  add_group("alpha/", state.alpha);
  add_group("adam_theta/m/", state.opt_theta.m());
  add_group("adam_theta/v/", state.opt_theta.v());
  add_group("adam_phi/m/", state.opt_phi.m());
  add_group("adam_phi/v/", state.opt_phi.v());
  add_group("adam_alpha/m/", state.opt_alpha.m());
  add_group("adam_alpha/v/", state.opt_alpha.v());
  write_tensors(path, all);

  nlohmann::json j{
      {"format", "MDTN0001"},
      {"config_hash", meta.config_hash},
      {"seed", meta.seed},
      {"iteration", meta.iteration},
      {"consecutive_failures", meta.consecutive_failures},
      {"adam_t", {{"theta", meta.adam_t_theta}, {"phi", meta.adam_t_phi}, {"alpha", meta.adam_t_alpha}}},
      {"noise_mode", meta.noise_mode},
  };
  std::ofstream out(path + ".json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path + ".json");
  out << j.dump(2) << "\n";
}

CheckpointMeta load_checkpoint(const std::string& path, MetaState& state) {
  ParamSet all = read_tensors(path);
  restore_group(state.theta, all, "theta/");
  restore_group(state.phi, all, "phi/");
  restore_group(state.alpha, all, "alpha/");
  restore_group(state.opt_theta.m(), all, "adam_theta/m/");
  restore_group(state.opt_theta.v(), all, "adam_theta/v/");
  restore_group(state.opt_phi.m(), all, "adam_phi/m/");
  restore_group(state.opt_phi.v(), all, "adam_phi/v/");
  restore_group(state.opt_alpha.m(), all, "adam_alpha/m/");
  restore_group(state.opt_alpha.v(), all, "adam_alpha/v/");

  std::ifstream in(path + ".json");
  if (!in) throw std::runtime_error("missing checkpoint manifest " + path + ".json");
  nlohmann::json j;
  in >> j;
  CheckpointMeta meta;
  meta.config_hash = j.value("config_hash", "");
  meta.seed = j.value("seed", std::uint64_t{0});
  meta.iteration = j.value("iteration", std::uint64_t{0});
  meta.consecutive_failures = j.value("consecutive_failures", 0);
  meta.adam_t_theta = j["adam_t"].value("theta", std::int64_t{0});
  meta.adam_t_phi = j["adam_t"].value("phi", std::int64_t{0});
  meta.adam_t_alpha = j["adam_t"].value("alpha", std::int64_t{0});
  meta.noise_mode = j.value("noise_mode", "none");
  state.iteration = meta.iteration;
  state.consecutive_failures = meta.consecutive_failures;
  state.opt_theta.set_t(meta.adam_t_theta);
  state.opt_phi.set_t(meta.adam_t_phi);
  state.opt_alpha.set_t(meta.adam_t_alpha);
  return meta;
}

}  // namespace metadrop
