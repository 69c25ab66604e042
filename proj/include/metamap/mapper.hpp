#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "backbones.hpp"
#include "ops.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace metamap {

enum class MapperVariant { kSelfAttention, kMlp };

inline std::string to_string(MapperVariant v) {
  return v == MapperVariant::kSelfAttention ? "self_attention" : "mlp";
}
inline MapperVariant mapper_variant_from_string(const std::string& s) {
  if (s == "self_attention") return MapperVariant::kSelfAttention;
  if (s == "mlp") return MapperVariant::kMlp;
  throw ConfigError("mapper: unknown variant '" + s + "'");
}

// The trainable bridge between the frozen encoders: l learnable prefix seeds
// prepended to projected visual features, encoded by one set self-attention
// block (attention + residual + layer norm). `literal_eq1` drops the
// 1/sqrt(d_head) score scaling for fidelity experiments.
struct MapperConfig {
  int64_t prefix_len = 4;
  int64_t heads = 2;
  MapperVariant variant = MapperVariant::kSelfAttention;
  int64_t mlp_hidden = 64;
  bool literal_eq1 = false;

  void validate(int64_t d_e) const {
    if (prefix_len <= 0 || heads <= 0 || mlp_hidden <= 0)
      throw ConfigError("mapper config: all dimensions must be positive");
    if (d_e % heads != 0) throw ConfigError("mapper config: d_e must be divisible by heads");
  }
};

// Draws theta from the Xavier-uniform initialization scheme. Both variants
// carry the input projection and the prefix seeds; the remaining tensors
// depend on the variant. All tensors require grad.
template <class Real>
ParameterSetT<Real> init_mapper_params(const MapperConfig& cfg, int64_t d_v, int64_t d_e,
                                       uint64_t seed) {
  cfg.validate(d_e);
  auto rng = make_engine(derive_seed(seed, 303));
  ParameterSetT<Real> p;
  p.add_trainable("mapper.prefix_seeds",
                  detail::to_tensor<Real>({cfg.prefix_len, d_e},
                                          detail::draw_xavier(rng, cfg.prefix_len, d_e)));
  p.add_trainable("mapper.in_proj.weight",
                  detail::to_tensor<Real>({d_v, d_e}, detail::draw_xavier(rng, d_v, d_e)));
  p.add_trainable("mapper.in_proj.bias", TensorT<Real>::zeros({d_e}));
  if (cfg.variant == MapperVariant::kSelfAttention) {
    const int64_t dh = d_e / cfg.heads;
    for (int64_t h = 0; h < cfg.heads; ++h) {
      const std::string hs = std::to_string(h);
      p.add_trainable("mapper.attn.q" + hs,
                      detail::to_tensor<Real>({d_e, dh}, detail::draw_xavier(rng, d_e, dh)));
      p.add_trainable("mapper.attn.k" + hs,
                      detail::to_tensor<Real>({d_e, dh}, detail::draw_xavier(rng, d_e, dh)));
      p.add_trainable("mapper.attn.v" + hs,
                      detail::to_tensor<Real>({d_e, dh}, detail::draw_xavier(rng, d_e, dh)));
    }
    p.add_trainable("mapper.attn.out.weight",
                    detail::to_tensor<Real>({d_e, d_e}, detail::draw_xavier(rng, d_e, d_e)));
    p.add_trainable("mapper.attn.out.bias", TensorT<Real>::zeros({d_e}));
    p.add_trainable("mapper.attn.ln.gamma", TensorT<Real>::ones({d_e}));
    p.add_trainable("mapper.attn.ln.beta", TensorT<Real>::zeros({d_e}));
  } else {
    p.add_trainable("mapper.mlp.fc1.weight",
                    detail::to_tensor<Real>({d_e, cfg.mlp_hidden},
                                            detail::draw_xavier(rng, d_e, cfg.mlp_hidden)));
    p.add_trainable("mapper.mlp.fc1.bias", TensorT<Real>::zeros({cfg.mlp_hidden}));
    p.add_trainable("mapper.mlp.fc2.weight",
                    detail::to_tensor<Real>({cfg.mlp_hidden, d_e},
                                            detail::draw_xavier(rng, cfg.mlp_hidden, d_e)));
    p.add_trainable("mapper.mlp.fc2.bias", TensorT<Real>::zeros({d_e}));
  }
  return p;
}

// Redraw theta in place from the initialization distribution (the
// meta-knowledge erasure ablation). Same seed, same parameters.
template <class Real>
void reinitialize(ParameterSetT<Real>& params, const MapperConfig& cfg, int64_t d_v, int64_t d_e,
                  uint64_t seed) {
  auto fresh = init_mapper_params<Real>(cfg, d_v, d_e, seed);
  if (fresh.trainable.size() != params.trainable.size())
    throw ContractError("reinitialize: parameter set does not match mapper config");
  for (size_t i = 0; i < fresh.trainable.size(); ++i) {
    if (fresh.trainable[i].first != params.trainable[i].first)
      throw ContractError("reinitialize: parameter name mismatch at '" +
                          params.trainable[i].first + "'");
    params.trainable[i].second.mutable_values() = fresh.trainable[i].second.values();
  }
}

// Multi-head set attention sigma(Q K^T) V with Q = K = V = z; heads are
// concatenated along the feature axis. Every output row is a convex
// combination of the value rows of its head. An optional additive mask
// isolates packed blocks.
template <class Real>
TensorT<Real> set_attention(const MapperConfig& cfg, const ParameterSetT<Real>& params,
                            const TensorT<Real>& z, const TensorT<Real>& mask = {}) {
  const int64_t d_e = z.dim(1);
  const int64_t dh = d_e / cfg.heads;
  const Real s = cfg.literal_eq1
                     ? Real(1)
                     : Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));
  std::vector<TensorT<Real>> heads;
  for (int64_t h = 0; h < cfg.heads; ++h) {
    const std::string hs = std::to_string(h);
    auto q = matmul(z, params.at("mapper.attn.q" + hs));
    auto k = matmul(z, params.at("mapper.attn.k" + hs));
    auto v = matmul(z, params.at("mapper.attn.v" + hs));
    auto scores = scale(matmul(q, transpose(k)), s);
    if (mask.defined()) scores = add(scores, mask);
    heads.push_back(matmul(softmax(scores, 1), v));
  }
  return concat(heads, 1);
}

// Packed form of the visual-prefix map: feature rows for `count` images are
// stacked (count * n rows), the per-image blocks [seeds; projected features]
// are encoded in one masked set-attention pass, and the per-image prefixes
// come back stacked as count * l rows.
template <class Real>
TensorT<Real> map_to_prefix_packed(const MapperConfig& cfg, const ParameterSetT<Real>& params,
                                   const TensorT<Real>& features, int64_t count) {
  const auto& seeds = params.at("mapper.prefix_seeds");
  const int64_t l = seeds.dim(0);
  const auto& w_in = params.at("mapper.in_proj.weight");
  if (count < 1) throw ContractError("map_to_prefix: need at least one image");
  if (features.rank() != 2 || features.dim(1) != w_in.dim(0) || features.dim(0) % count != 0)
    throw DimensionError("map_to_prefix: features " + shape_str(features.shape()) +
                         " incompatible with projection " + shape_str(w_in.shape()) + " over " +
                         std::to_string(count) + " images");
  const int64_t n = features.dim(0) / count;

  TensorT<Real> z;
  if (n > 0) {
    auto proj = add(matmul(features, w_in), params.at("mapper.in_proj.bias"));
    std::vector<TensorT<Real>> parts;
    parts.reserve(static_cast<size_t>(2 * count));
    for (int64_t i = 0; i < count; ++i) {
      parts.push_back(seeds);
      parts.push_back(slice(proj, 0, i * n, n));
    }
    z = concat(parts, 0);
  } else {
    z = count == 1 ? seeds : concat(std::vector<TensorT<Real>>(static_cast<size_t>(count), seeds), 0);
  }
  const int64_t block = l + n;

  TensorT<Real> out;
  if (cfg.variant == MapperVariant::kSelfAttention) {
    TensorT<Real> mask;
    if (count > 1) mask = detail::block_mask<Real>(PackedSpans::uniform(count, block), false);
    auto mixed = add(matmul(set_attention(cfg, params, z, mask),
                            params.at("mapper.attn.out.weight")),
                     params.at("mapper.attn.out.bias"));
    out = layer_norm(add(z, mixed), params.at("mapper.attn.ln.gamma"),
                     params.at("mapper.attn.ln.beta"));
  } else {
    // position-independent MLP over the same sequence; blocks never interact
    auto h = gelu(add(matmul(z, params.at("mapper.mlp.fc1.weight")),
                      params.at("mapper.mlp.fc1.bias")));
    out = add(matmul(h, params.at("mapper.mlp.fc2.weight")), params.at("mapper.mlp.fc2.bias"));
  }
  if (count == 1) return slice(out, 0, 0, l);
  std::vector<TensorT<Real>> prefix_rows;
  prefix_rows.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) prefix_rows.push_back(slice(out, 0, i * block, l));
  return concat(prefix_rows, 0);
}

// Visual prefix p*_1..p*_l from n visual features (Q = K = V set attention
// over [seeds; projected features], first l output positions). n may be 0,
// in which case the block runs over the seeds alone.
template <class Real>
TensorT<Real> map_to_prefix(const MapperConfig& cfg, const ParameterSetT<Real>& params,
                            const TensorT<Real>& features) {
  return map_to_prefix_packed(cfg, params, features, 1);
}

}  // namespace metamap
