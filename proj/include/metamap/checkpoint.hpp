#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "config.hpp"
#include "episodes.hpp"
#include "meta.hpp"
#include "params.hpp"

namespace metamap {

constexpr uint32_t kCheckpointMagic = 0x4B434D4DU;  // "MMCK"
constexpr uint32_t kCheckpointVersion = 1;

enum class TrainMode { kEpisodic, kNonEpisodic };

inline std::string to_string(TrainMode m) {
  return m == TrainMode::kEpisodic ? "episodic" : "nonepisodic";
}
inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "episodic") return TrainMode::kEpisodic;
  if (s == "nonepisodic") return TrainMode::kNonEpisodic;
  throw ValidationError("train mode must be 'episodic' or 'nonepisodic', got '" + s + "'");
}

// Versioned container for theta and the optimizer state. Arrays are stored in
// f64 regardless of run precision (f32 values widen exactly, so resume stays
// bitwise). Frozen backbones are never stored; the config hash pins the
// (seed, config) pair that regenerates them.
struct CheckpointData {
  uint64_t config_hash = 0;
  uint64_t model_hash = 0;
  int64_t step = 0;  // meta-updates (episodic) or optimizer steps (nonepisodic)
  TrainMode mode = TrainMode::kEpisodic;
  std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>> theta;
  int64_t opt_t = 0;
  std::map<std::string, std::vector<double>> opt_m, opt_v;
};

template <class Real>
CheckpointData make_checkpoint(const ParameterSetT<Real>& params, const AdamWT<Real>& opt,
                               int64_t step, TrainMode mode, const ExperimentConfig& cfg) {
  CheckpointData ck;
  ck.config_hash = cfg.config_hash();
  ck.model_hash = cfg.model_hash();
  ck.step = step;
  ck.mode = mode;
  for (const auto& [name, t] : params.trainable) {
    std::vector<double> data(t.values().begin(), t.values().end());
    ck.theta.emplace_back(name, std::make_pair(t.shape(), std::move(data)));
  }
  ck.opt_t = opt.steps_taken();
  ck.opt_m = opt.moment1();
  ck.opt_v = opt.moment2();
  return ck;
}

// Loads theta and optimizer state in place; names and shapes must match the
// freshly initialized parameter set exactly.
template <class Real>
void restore_checkpoint(const CheckpointData& ck, ParameterSetT<Real>& params,
                        AdamWT<Real>& opt) {
  if (ck.theta.size() != params.trainable.size())
    throw CompatibilityError("checkpoint: parameter count mismatch (" +
                             std::to_string(ck.theta.size()) + " vs " +
                             std::to_string(params.trainable.size()) + ")");
  for (size_t i = 0; i < ck.theta.size(); ++i) {
    const auto& [name, payload] = ck.theta[i];
    auto& [pname, tensor] = params.trainable[i];
    if (name != pname)
      throw CompatibilityError("checkpoint: parameter '" + name + "' where '" + pname +
                               "' was expected");
    if (payload.first != tensor.shape())
      throw CompatibilityError("checkpoint: shape mismatch for '" + name + "'");
    auto& vals = tensor.mutable_values();
    for (size_t k = 0; k < vals.size(); ++k) vals[k] = static_cast<Real>(payload.second[k]);
  }
  opt.restore(ck.opt_t, ck.opt_m, ck.opt_v);
}

inline void save_checkpoint(const CheckpointData& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  io::put_u32(os, kCheckpointMagic);
  io::put_u32(os, kCheckpointVersion);
  io::put_u64(os, ck.config_hash);
  io::put_u64(os, ck.model_hash);
  io::put_i64(os, ck.step);
  io::put_u32(os, static_cast<uint32_t>(ck.mode));
  io::put_u32(os, static_cast<uint32_t>(ck.theta.size()));
  for (const auto& [name, payload] : ck.theta) {
    io::put_str(os, name);
    io::put_i64v(os, payload.first);
    io::put_f64v(os, payload.second);
  }
  io::put_i64(os, ck.opt_t);
  io::put_u32(os, static_cast<uint32_t>(ck.opt_m.size()));
  for (const auto& [name, m] : ck.opt_m) {
    io::put_str(os, name);
    io::put_f64v(os, m);
    io::put_f64v(os, ck.opt_v.at(name));
  }
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  io::Reader r{is};
  if (r.u32() != kCheckpointMagic) r.fail("bad magic (not a checkpoint)");
  if (r.u32() != kCheckpointVersion) r.fail("unsupported checkpoint version");
  CheckpointData ck;
  ck.config_hash = r.u64();
  ck.model_hash = r.u64();
  ck.step = r.i64();
  ck.mode = static_cast<TrainMode>(r.u32());
  const uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    Shape shape = r.i64v();
    std::vector<double> data = r.f64v();
    ck.theta.emplace_back(std::move(name), std::make_pair(std::move(shape), std::move(data)));
  }
  ck.opt_t = r.i64();
  const uint32_t mcount = r.u32();
  for (uint32_t i = 0; i < mcount; ++i) {
    std::string name = r.str();
    ck.opt_m[name] = r.f64v();
    ck.opt_v[name] = r.f64v();
  }
  return ck;
}

}  // namespace metamap
