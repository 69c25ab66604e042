#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ops.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "vocab.hpp"

namespace metamap {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dimensions of the frozen stand-in backbones. Paper-scale reference values
// are d_v = 512 and d_e = 768; the defaults here are desk scale.
struct BackboneConfig {
  int64_t d_v = 32;
  int64_t d_e = 48;
  int64_t n_visual = 4;  // visual feature count per image
  int64_t layers = 2;
  int64_t heads = 2;
  int64_t ff_mult = 4;
  int64_t context = 64;  // decoder context limit over [prefix; tokens]

  void validate() const {
    if (d_v <= 0 || d_e <= 0 || n_visual <= 0 || layers < 0 || heads <= 0 || ff_mult <= 0 ||
        context <= 0)
      throw ConfigError("backbone config: all dimensions must be positive");
    if (d_e % heads != 0) throw ConfigError("backbone config: d_e must be divisible by heads");
  }
};

template <class Real>
struct ImageT {
  int64_t h = 0, w = 0, c = 0;
  std::vector<Real> pix;  // row-major [h][w][c]
};

namespace detail {

// Initialization draws happen in double regardless of Real, so f32 and f64
// models are rounded views of the same underlying parameters.
inline std::vector<double> draw_xavier(std::mt19937_64& rng, int64_t fan_in, int64_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(static_cast<size_t>(fan_in * fan_out));
  for (auto& x : v) x = uniform_real(rng, -limit, limit);
  return v;
}

inline std::vector<double> draw_normal(std::mt19937_64& rng, int64_t n, double stddev) {
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = normal_real(rng, 0.0, stddev);
  return v;
}

template <class Real>
TensorT<Real> to_tensor(Shape shape, const std::vector<double>& v) {
  std::vector<Real> data(v.size());
  for (size_t i = 0; i < v.size(); ++i) data[i] = static_cast<Real>(v[i]);
  return TensorT<Real>::from_data(std::move(shape), std::move(data));
}

}  // namespace detail

// Frozen linear-patch vision encoder: the image is split into n_visual
// column bands, each flattened and projected to d_v, plus a fixed per-patch
// position vector so downstream set attention can tell patches apart.
template <class Real>
struct VisionEncoderT {
  BackboneConfig cfg;
  int64_t image_h = 0, image_w = 0, image_c = 0;
  TensorT<Real> patch_weight;  // patch_dim x d_v
  TensorT<Real> patch_bias;    // d_v
  TensorT<Real> patch_pos;     // n_visual x d_v

  int64_t patch_dim() const { return image_h * (image_w / cfg.n_visual) * image_c; }

  std::vector<std::pair<std::string, TensorT<Real>>> named_parameters() const {
    return {{"vision.patch.weight", patch_weight},
            {"vision.patch.bias", patch_bias},
            {"vision.patch.pos", patch_pos}};
  }
};

template <class Real>
VisionEncoderT<Real> build_vision_encoder(const BackboneConfig& cfg, int64_t h, int64_t w,
                                          int64_t c, uint64_t seed) {
  cfg.validate();
  if (h <= 0 || w <= 0 || c <= 0) throw ConfigError("vision encoder: bad image dims");
  if (w % cfg.n_visual != 0)
    throw ConfigError("vision encoder: image width " + std::to_string(w) +
                      " not divisible into " + std::to_string(cfg.n_visual) + " patches");
  VisionEncoderT<Real> enc;
  enc.cfg = cfg;
  enc.image_h = h;
  enc.image_w = w;
  enc.image_c = c;
  auto rng = make_engine(derive_seed(seed, 101));
  const int64_t pd = enc.patch_dim();
  enc.patch_weight = detail::to_tensor<Real>({pd, cfg.d_v}, detail::draw_xavier(rng, pd, cfg.d_v));
  enc.patch_bias = TensorT<Real>::zeros({cfg.d_v});
  enc.patch_pos = detail::to_tensor<Real>({cfg.n_visual, cfg.d_v},
                                          detail::draw_normal(rng, cfg.n_visual * cfg.d_v, 0.3));
  return enc;
}

// Stacked n x d_v feature rows for a batch of images (count * n rows).
// Deterministic; no gradient reaches the frozen parameters.
template <class Real>
TensorT<Real> encode_images_packed(const VisionEncoderT<Real>& enc,
                                   const std::vector<ImageT<Real>>& images) {
  const int64_t n = enc.cfg.n_visual;
  const int64_t band = enc.image_w / n;
  const int64_t pd = enc.patch_dim();
  const auto count = static_cast<int64_t>(images.size());
  std::vector<Real> patches(static_cast<size_t>(count * n * pd));
  std::vector<int64_t> pos_ids(static_cast<size_t>(count * n));
  for (int64_t i = 0; i < count; ++i) {
    const auto& image = images[static_cast<size_t>(i)];
    if (image.h != enc.image_h || image.w != enc.image_w || image.c != enc.image_c)
      throw DimensionError("encode_image: image " + std::to_string(image.h) + "x" +
                           std::to_string(image.w) + "x" + std::to_string(image.c) +
                           " does not match encoder input " + std::to_string(enc.image_h) + "x" +
                           std::to_string(enc.image_w) + "x" + std::to_string(enc.image_c));
    for (int64_t p = 0; p < n; ++p) {
      pos_ids[static_cast<size_t>(i * n + p)] = p;
      int64_t k = 0;
      for (int64_t y = 0; y < enc.image_h; ++y)
        for (int64_t x = p * band; x < (p + 1) * band; ++x)
          for (int64_t ch = 0; ch < enc.image_c; ++ch)
            patches[(i * n + p) * pd + k++] =
                image.pix[(y * enc.image_w + x) * enc.image_c + ch];
    }
  }
  auto pm = TensorT<Real>::from_data({count * n, pd}, std::move(patches));
  return add(add(matmul(pm, enc.patch_weight), enc.patch_bias),
             gather_rows(enc.patch_pos, pos_ids));
}

template <class Real>
TensorT<Real> encode_image(const VisionEncoderT<Real>& enc, const ImageT<Real>& image) {
  return encode_images_packed(enc, std::vector<ImageT<Real>>{image});
}

template <class Real>
struct LmLayerT {
  TensorT<Real> ln1_gamma, ln1_beta;
  std::vector<TensorT<Real>> wq, wk, wv;  // per head, d_e x d_head
  TensorT<Real> wo, bo;                   // d_e x d_e, d_e
  TensorT<Real> ln2_gamma, ln2_beta;
  TensorT<Real> ff1_w, ff1_b, ff2_w, ff2_b;
};

// Frozen causal transformer decoder with untied output head and absolute
// positional embeddings over the concatenated [prefix; tokens] sequence.
template <class Real>
struct LanguageModelT {
  BackboneConfig cfg;
  int64_t vocab_size = 0;
  TensorT<Real> tok_embed;  // V x d_e (the embedder)
  TensorT<Real> pos_embed;  // context x d_e
  std::vector<LmLayerT<Real>> layers;
  TensorT<Real> final_ln_gamma, final_ln_beta;
  TensorT<Real> head_w, head_b;  // d_e x V, V

  std::vector<std::pair<std::string, TensorT<Real>>> named_parameters() const {
    std::vector<std::pair<std::string, TensorT<Real>>> out;
    out.emplace_back("lm.tok_embed", tok_embed);
    out.emplace_back("lm.pos_embed", pos_embed);
    for (size_t i = 0; i < layers.size(); ++i) {
      const auto& L = layers[i];
      const std::string p = "lm.layer" + std::to_string(i) + ".";
      out.emplace_back(p + "ln1.gamma", L.ln1_gamma);
      out.emplace_back(p + "ln1.beta", L.ln1_beta);
      for (size_t h = 0; h < L.wq.size(); ++h) {
        out.emplace_back(p + "attn.q" + std::to_string(h), L.wq[h]);
        out.emplace_back(p + "attn.k" + std::to_string(h), L.wk[h]);
        out.emplace_back(p + "attn.v" + std::to_string(h), L.wv[h]);
      }
      out.emplace_back(p + "attn.out.weight", L.wo);
      out.emplace_back(p + "attn.out.bias", L.bo);
      out.emplace_back(p + "ln2.gamma", L.ln2_gamma);
      out.emplace_back(p + "ln2.beta", L.ln2_beta);
      out.emplace_back(p + "ff1.weight", L.ff1_w);
      out.emplace_back(p + "ff1.bias", L.ff1_b);
      out.emplace_back(p + "ff2.weight", L.ff2_w);
      out.emplace_back(p + "ff2.bias", L.ff2_b);
    }
    out.emplace_back("lm.final_ln.gamma", final_ln_gamma);
    out.emplace_back("lm.final_ln.beta", final_ln_beta);
    out.emplace_back("lm.head.weight", head_w);
    out.emplace_back("lm.head.bias", head_b);
    return out;
  }
};

template <class Real>
LanguageModelT<Real> build_language_model(const BackboneConfig& cfg, int64_t vocab_size,
                                          uint64_t seed) {
  cfg.validate();
  if (vocab_size <= Vocabulary::kEos) throw ConfigError("language model: vocabulary too small");
  LanguageModelT<Real> lm;
  lm.cfg = cfg;
  lm.vocab_size = vocab_size;
  auto rng = make_engine(derive_seed(seed, 202));
  const int64_t d = cfg.d_e, dh = cfg.d_e / cfg.heads, ff = cfg.ff_mult * cfg.d_e;
  lm.tok_embed = detail::to_tensor<Real>({vocab_size, d},
                                         detail::draw_normal(rng, vocab_size * d, 0.3));
  lm.pos_embed = detail::to_tensor<Real>({cfg.context, d},
                                         detail::draw_normal(rng, cfg.context * d, 0.3));
  for (int64_t i = 0; i < cfg.layers; ++i) {
    LmLayerT<Real> L;
    L.ln1_gamma = TensorT<Real>::ones({d});
    L.ln1_beta = TensorT<Real>::zeros({d});
    for (int64_t h = 0; h < cfg.heads; ++h) {
      L.wq.push_back(detail::to_tensor<Real>({d, dh}, detail::draw_xavier(rng, d, dh)));
      L.wk.push_back(detail::to_tensor<Real>({d, dh}, detail::draw_xavier(rng, d, dh)));
      L.wv.push_back(detail::to_tensor<Real>({d, dh}, detail::draw_xavier(rng, d, dh)));
    }
    L.wo = detail::to_tensor<Real>({d, d}, detail::draw_xavier(rng, d, d));
    L.bo = TensorT<Real>::zeros({d});
    L.ln2_gamma = TensorT<Real>::ones({d});
    L.ln2_beta = TensorT<Real>::zeros({d});
    L.ff1_w = detail::to_tensor<Real>({d, ff}, detail::draw_xavier(rng, d, ff));
    L.ff1_b = TensorT<Real>::zeros({ff});
    L.ff2_w = detail::to_tensor<Real>({ff, d}, detail::draw_xavier(rng, ff, d));
    L.ff2_b = TensorT<Real>::zeros({d});
    lm.layers.push_back(std::move(L));
  }
  lm.final_ln_gamma = TensorT<Real>::ones({d});
  lm.final_ln_beta = TensorT<Real>::zeros({d});
  lm.head_w = detail::to_tensor<Real>({d, vocab_size}, detail::draw_xavier(rng, d, vocab_size));
  lm.head_b = TensorT<Real>::zeros({vocab_size});
  return lm;
}

// Row-gather from the frozen embedding matrix; empty input gives 0 x d_e.
template <class Real>
TensorT<Real> embed_tokens(const LanguageModelT<Real>& lm, const TokenSequence& tokens) {
  for (int64_t t : tokens)
    if (t < 0 || t >= lm.vocab_size)
      throw IndexError("embed_tokens: token id " + std::to_string(t) +
                       " outside vocabulary of size " + std::to_string(lm.vocab_size));
  return gather_rows(lm.tok_embed, tokens);
}

// Half-open row ranges of independent sequences packed along the row axis.
struct PackedSpans {
  std::vector<int64_t> start;
  std::vector<int64_t> len;

  int64_t total() const {
    int64_t t = 0;
    for (int64_t l : len) t += l;
    return t;
  }
  static PackedSpans uniform(int64_t count, int64_t span_len) {
    PackedSpans s;
    for (int64_t i = 0; i < count; ++i) {
      s.start.push_back(i * span_len);
      s.len.push_back(span_len);
    }
    return s;
  }
};

namespace detail {

// Block mask isolating the packed sequences; causal within each block when
// requested. Masked score entries sit at -1e30, which underflows to exact
// zero through softmax, so packed rows match the per-sequence forward
// bitwise.
template <class Real>
TensorT<Real> block_mask(const PackedSpans& spans, bool causal) {
  const int64_t s = spans.total();
  std::vector<Real> m(static_cast<size_t>(s * s), Real(-1e30));
  for (size_t b = 0; b < spans.start.size(); ++b) {
    const int64_t lo = spans.start[b], n = spans.len[b];
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < (causal ? i + 1 : n); ++j) m[(lo + i) * s + (lo + j)] = Real(0);
  }
  return TensorT<Real>::from_data({s, s}, std::move(m));
}

}  // namespace detail

// Decoder over one or more packed sequences: rows of `x` hold the already
// embedded inputs (visual prefix rows followed by token embeddings per
// sequence), `positions` gives each row's within-sequence index for the
// positional table, and `spans` isolates the sequences from each other.
template <class Real>
TensorT<Real> forward_logits_packed(const LanguageModelT<Real>& lm, const TensorT<Real>& x_in,
                                    const std::vector<int64_t>& positions,
                                    const PackedSpans& spans) {
  const int64_t d = lm.cfg.d_e;
  if (x_in.rank() != 2 || x_in.dim(1) != d)
    throw DimensionError("forward_logits: input shape " + shape_str(x_in.shape()) +
                         " incompatible with d_e " + std::to_string(d));
  if (x_in.dim(0) == 0) throw ContractError("forward_logits: empty sequence");
  if (static_cast<int64_t>(positions.size()) != x_in.dim(0) || spans.total() != x_in.dim(0))
    throw DimensionError("forward_logits: rows, positions and spans disagree");
  for (int64_t l : spans.len)
    if (l > lm.cfg.context)
      throw CapacityError("forward_logits: sequence length " + std::to_string(l) +
                          " exceeds decoder context " + std::to_string(lm.cfg.context));

  auto x = add(x_in, gather_rows(lm.pos_embed, positions));
  const auto mask = detail::block_mask<Real>(spans, /*causal=*/true);
  const int64_t dh = d / lm.cfg.heads;
  const Real inv_sqrt_dh = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));

  for (const auto& L : lm.layers) {
    auto h = layer_norm(x, L.ln1_gamma, L.ln1_beta);
    std::vector<TensorT<Real>> heads;
    for (size_t hd = 0; hd < L.wq.size(); ++hd) {
      auto q = matmul(h, L.wq[hd]);
      auto k = matmul(h, L.wk[hd]);
      auto v = matmul(h, L.wv[hd]);
      auto scores = add(scale(matmul(q, transpose(k)), inv_sqrt_dh), mask);
      heads.push_back(matmul(softmax(scores, 1), v));
    }
    auto att = add(matmul(concat(heads, 1), L.wo), L.bo);
    x = add(x, att);
    auto h2 = layer_norm(x, L.ln2_gamma, L.ln2_beta);
    auto ffn = add(matmul(gelu(add(matmul(h2, L.ff1_w), L.ff1_b)), L.ff2_w), L.ff2_b);
    x = add(x, ffn);
  }
  x = layer_norm(x, lm.final_ln_gamma, lm.final_ln_beta);
  return add(matmul(x, lm.head_w), lm.head_b);
}

// Next-token logits at every position of the causally masked concatenation
// [prefix; token embeddings]. Loss masking is the caller's job. The prefix
// may have zero rows, reducing to a plain language-model forward pass.
template <class Real>
TensorT<Real> forward_logits(const LanguageModelT<Real>& lm, const TensorT<Real>& prefix,
                             const TensorT<Real>& token_embeds) {
  const int64_t d = lm.cfg.d_e;
  if (prefix.defined() && prefix.size() > 0 && (prefix.rank() != 2 || prefix.dim(1) != d))
    throw DimensionError("forward_logits: prefix shape " + shape_str(prefix.shape()) +
                         " incompatible with d_e " + std::to_string(d));
  if (token_embeds.rank() != 2 || token_embeds.dim(1) != d)
    throw DimensionError("forward_logits: token embedding shape " +
                         shape_str(token_embeds.shape()) + " incompatible with d_e " +
                         std::to_string(d));
  const bool has_prefix = prefix.defined() && prefix.dim(0) > 0;
  const int64_t s = (has_prefix ? prefix.dim(0) : 0) + token_embeds.dim(0);
  auto x = has_prefix ? concat<Real>({prefix, token_embeds}, 0) : token_embeds;
  std::vector<int64_t> positions(static_cast<size_t>(s));
  std::iota(positions.begin(), positions.end(), 0);
  return forward_logits_packed(lm, x, positions, PackedSpans::uniform(1, s));
}

template <class Real>
uint64_t frozen_checksum(const VisionEncoderT<Real>& enc, const LanguageModelT<Real>& lm) {
  uint64_t h = checksum(enc.named_parameters());
  auto lmp = lm.named_parameters();
  for (const auto& [name, t] : lmp) {
    h = fnv1a_str(name, h);
    h = fnv1a(t.values().data(), t.values().size() * sizeof(Real), h);
  }
  return h;
}

}  // namespace metamap
