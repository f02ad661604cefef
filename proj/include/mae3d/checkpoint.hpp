#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mae3d/nn.hpp"
#include "mae3d/optim.hpp"

namespace mae3d {

inline constexpr char kCheckpointMagic[] = "MAE3DCK1";  // 8 bytes

/// FNV-1a over the canonical config text; stored in checkpoints so a loader
/// can detect mismatched configurations.
inline std::uint64_t config_hash(const std::string& canonical_text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical_text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

struct CheckpointParam {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct OptimizerSnapshot {
  std::uint64_t step_count = 0;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8, weight_decay = 0.0;
  std::vector<std::vector<float>> first_moments;   // aligned with params
  std::vector<std::vector<float>> second_moments;
};

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::uint32_t epoch = 0;
  std::vector<CheckpointParam> params;
  std::optional<OptimizerSnapshot> optimizer;

  /// Component tag of a parameter, derived from its name prefix.
  static std::string component_tag(const std::string& name) {
    if (name.rfind("extractor.", 0) == 0) return "extractor";
    if (name.rfind("posembed.", 0) == 0) return "pos_embed";
    if (name.rfind("recon.", 0) == 0) return "reconstruction";
    return "transformer";
  }
};

namespace detail {

template <typename V>
void write_raw(std::ofstream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
void read_raw(std::ifstream& in, V& v, const std::string& what) {
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(V)))
    throw std::runtime_error("checkpoint: truncated " + what + " at offset " +
                             std::to_string(static_cast<long long>(in.tellg())));
}

}  // namespace detail

template <typename T>
Checkpoint snapshot(ParamStore<T>& store, std::uint64_t cfg_hash, std::uint32_t epoch,
                    Adam<T>* optimizer = nullptr) {
  Checkpoint ck;
  ck.config_hash = cfg_hash;
  ck.epoch = epoch;
  for (auto& p : store.all()) {
    CheckpointParam cp;
    cp.name = p.name();
    cp.shape = p.shape();
    cp.values.reserve(p.size());
    for (const T v : p.value()) cp.values.push_back(static_cast<float>(v));
    ck.params.push_back(std::move(cp));
  }
  if (optimizer) {
    OptimizerSnapshot os;
    os.step_count = optimizer->step_count();
    os.beta1 = optimizer->hyper().beta1;
    os.beta2 = optimizer->hyper().beta2;
    os.epsilon = optimizer->hyper().epsilon;
    os.weight_decay = optimizer->hyper().weight_decay;
    for (const auto& m : optimizer->first_moments())
      os.first_moments.emplace_back(m.begin(), m.end());
    for (const auto& v : optimizer->second_moments())
      os.second_moments.emplace_back(v.begin(), v.end());
    ck.optimizer = std::move(os);
  }
  return ck;
}

inline void checkpoint_save(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint_save: cannot open " + path);
  out.write(kCheckpointMagic, 8);
  detail::write_raw(out, ck.config_hash);
  detail::write_raw(out, ck.epoch);
  detail::write_raw(out, static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& p : ck.params) {
    detail::write_raw(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_raw(out, static_cast<std::uint64_t>(p.shape.size()));
    for (const std::size_t d : p.shape) detail::write_raw(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(p.values.data()),
              static_cast<std::streamsize>(p.values.size() * sizeof(float)));
  }
  const std::uint8_t has_opt = ck.optimizer ? 1 : 0;
  detail::write_raw(out, has_opt);
  if (ck.optimizer) {
    const auto& os = *ck.optimizer;
    detail::write_raw(out, os.step_count);
    detail::write_raw(out, os.beta1);
    detail::write_raw(out, os.beta2);
    detail::write_raw(out, os.epsilon);
    detail::write_raw(out, os.weight_decay);
    for (const auto& moments : {&os.first_moments, &os.second_moments})
      for (const auto& m : *moments)
        out.write(reinterpret_cast<const char*>(m.data()),
                  static_cast<std::streamsize>(m.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("checkpoint_save: write failed for " + path);
}

inline Checkpoint checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint_load: cannot open " + path);
  char magic[8];
  if (!in.read(magic, 8)) throw std::runtime_error("checkpoint_load: truncated magic");
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint_load: bad magic in " + path);
  Checkpoint ck;
  detail::read_raw(in, ck.config_hash, "config hash");
  detail::read_raw(in, ck.epoch, "epoch");
  std::uint32_t count = 0;
  detail::read_raw(in, count, "parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointParam p;
    std::uint32_t name_len = 0;
    detail::read_raw(in, name_len, "name length");
    p.name.resize(name_len);
    if (!in.read(p.name.data(), name_len))
      throw std::runtime_error("checkpoint_load: truncated name at offset " +
                               std::to_string(static_cast<long long>(in.tellg())));
    std::uint64_t rank = 0;
    detail::read_raw(in, rank, "shape rank");
    std::size_t numel = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      std::uint64_t dim = 0;
      detail::read_raw(in, dim, "dimension");
      p.shape.push_back(static_cast<std::size_t>(dim));
      numel *= static_cast<std::size_t>(dim);
    }
    p.values.resize(numel);
    if (!in.read(reinterpret_cast<char*>(p.values.data()),
                 static_cast<std::streamsize>(numel * sizeof(float))))
      throw std::runtime_error("checkpoint_load: truncated values of " + p.name + " at offset " +
                               std::to_string(static_cast<long long>(in.tellg())));
    ck.params.push_back(std::move(p));
  }
  std::uint8_t has_opt = 0;
  detail::read_raw(in, has_opt, "optimizer flag");
  if (has_opt) {
    OptimizerSnapshot os;
    detail::read_raw(in, os.step_count, "optimizer step count");
    detail::read_raw(in, os.beta1, "beta1");
    detail::read_raw(in, os.beta2, "beta2");
    detail::read_raw(in, os.epsilon, "epsilon");
    detail::read_raw(in, os.weight_decay, "weight decay");
    for (auto* moments : {&os.first_moments, &os.second_moments})
      for (const auto& p : ck.params) {
        std::vector<float> m(p.values.size());
        if (!in.read(reinterpret_cast<char*>(m.data()),
                     static_cast<std::streamsize>(m.size() * sizeof(float))))
          throw std::runtime_error("checkpoint_load: truncated moments at offset " +
                                   std::to_string(static_cast<long long>(in.tellg())));
        moments->push_back(std::move(m));
      }
    ck.optimizer = std::move(os);
  }
  return ck;
}

/// Copy checkpoint values into a store. With a subset prefix only matching
/// parameters are loaded (e.g. "extractor."); otherwise every checkpoint
/// parameter must exist in the store with an identical shape.
template <typename T>
std::size_t checkpoint_apply(const Checkpoint& ck, ParamStore<T>& store,
                             const std::vector<std::string>& subset_prefixes = {}) {
  std::size_t loaded = 0;
  for (const auto& p : ck.params) {
    if (!subset_prefixes.empty()) {
      bool match = false;
      for (const auto& prefix : subset_prefixes) match = match || p.name.rfind(prefix, 0) == 0;
      if (!match) continue;
    }
    if (!store.contains(p.name)) {
      if (!subset_prefixes.empty())
        throw std::runtime_error("checkpoint: parameter " + p.name + " missing in target model");
      throw std::runtime_error("checkpoint: unknown parameter " + p.name);
    }
    auto& target = store.at(p.name);
    if (target.shape() != p.shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + p.name + ": " +
                               shape_str(target.shape()) + " vs " + shape_str(p.shape));
    for (std::size_t i = 0; i < p.values.size(); ++i)
      target.value()[i] = static_cast<T>(p.values[i]);
    ++loaded;
  }
  return loaded;
}

}  // namespace mae3d
