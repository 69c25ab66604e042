#include "metamap/mapper.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "testutil.hpp"

using metamap::MapperConfig;
using metamap::MapperVariant;
using metamap::Shape;
using metamap::Tensor;

namespace {
constexpr int64_t kDv = 6;
constexpr int64_t kDe = 8;
}  // namespace

TEST(Mapper, ZeroSeedsZeroFeaturesZeroBiasGiveZeroPrefix) {
  MapperConfig cfg;
  auto params = metamap::init_mapper_params<double>(cfg, kDv, kDe, 1);
  auto& seeds = const_cast<Tensor&>(params.at("mapper.prefix_seeds"));
  std::fill(seeds.mutable_values().begin(), seeds.mutable_values().end(), 0.0);
  auto features = Tensor::zeros({3, kDv});
  auto prefix = metamap::map_to_prefix(cfg, params, features);
  EXPECT_EQ(prefix.shape(), (Shape{cfg.prefix_len, kDe}));
  for (double v : prefix.values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Mapper, NoVisualFeaturesStillProducesPrefix) {
  MapperConfig cfg;
  auto params = metamap::init_mapper_params<double>(cfg, kDv, kDe, 1);
  auto prefix = metamap::map_to_prefix(cfg, params, Tensor::zeros({0, kDv}));
  EXPECT_EQ(prefix.shape(), (Shape{cfg.prefix_len, kDe}));
}

TEST(Mapper, FeatureDimensionMismatchIsDimensionError) {
  MapperConfig cfg;
  auto params = metamap::init_mapper_params<double>(cfg, kDv, kDe, 1);
  EXPECT_THROW(metamap::map_to_prefix(cfg, params, Tensor::zeros({3, kDv + 1})),
               metamap::DimensionError);
}

// Single head, two positions, hand-set 2x2 projections: the attention output
// is the softmax-weighted convex combination sigma(QK^T)V computed by hand.
TEST(Mapper, HandComputedTwoByTwoAttention) {
  MapperConfig cfg;
  cfg.prefix_len = 1;
  cfg.heads = 1;
  for (bool literal : {false, true}) {
    cfg.literal_eq1 = literal;
    auto params = metamap::init_mapper_params<double>(cfg, 2, 2, 1);
    const std::vector<double> wq{1.0, 0.5, -0.25, 0.75};
    const std::vector<double> wk{0.5, -1.0, 0.25, 1.5};
    const std::vector<double> wv{2.0, 0.0, -1.0, 1.0};
    const_cast<Tensor&>(params.at("mapper.attn.q0")).mutable_values() = wq;
    const_cast<Tensor&>(params.at("mapper.attn.k0")).mutable_values() = wk;
    const_cast<Tensor&>(params.at("mapper.attn.v0")).mutable_values() = wv;

    auto z = Tensor::from_data({2, 2}, {0.3, -0.6, 1.1, 0.4});
    auto out = metamap::set_attention(cfg, params, z);

    // straight-line oracle
    const double s = literal ? 1.0 : 1.0 / std::sqrt(2.0);
    double q[2][2], k[2][2], v[2][2];
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        q[i][j] = z.at2(i, 0) * wq[static_cast<size_t>(j)] +
                  z.at2(i, 1) * wq[static_cast<size_t>(2 + j)];
        k[i][j] = z.at2(i, 0) * wk[static_cast<size_t>(j)] +
                  z.at2(i, 1) * wk[static_cast<size_t>(2 + j)];
        v[i][j] = z.at2(i, 0) * wv[static_cast<size_t>(j)] +
                  z.at2(i, 1) * wv[static_cast<size_t>(2 + j)];
      }
    for (int i = 0; i < 2; ++i) {
      double score[2];
      for (int j = 0; j < 2; ++j) score[j] = s * (q[i][0] * k[j][0] + q[i][1] * k[j][1]);
      const double mx = std::max(score[0], score[1]);
      double w0 = std::exp(score[0] - mx), w1 = std::exp(score[1] - mx);
      const double total = w0 + w1;
      w0 /= total;
      w1 /= total;
      for (int j = 0; j < 2; ++j) {
        const double expected = w0 * v[0][j] + w1 * v[1][j];
        EXPECT_NEAR(out.at2(i, j), expected, 1e-12);
      }
    }
  }
}

// Each attention output row stays inside the per-coordinate envelope of the
// value rows (softmax weights are non-negative and sum to one).
TEST(Mapper, AttentionRowsAreConvexCombinations) {
  MapperConfig cfg;
  cfg.heads = 1;
  auto params = metamap::init_mapper_params<double>(cfg, kDv, kDe, 3);
  std::mt19937_64 rng(4);
  auto z = testutil::random_tensor(rng, {5, kDe}, false, -2.0, 2.0);
  auto v = metamap::matmul(z, params.at("mapper.attn.v0"));
  auto out = metamap::set_attention(cfg, params, z);
  for (int64_t j = 0; j < v.dim(1); ++j) {
    double lo = v.at2(0, j), hi = v.at2(0, j);
    for (int64_t r = 1; r < v.dim(0); ++r) {
      lo = std::min(lo, v.at2(r, j));
      hi = std::max(hi, v.at2(r, j));
    }
    for (int64_t r = 0; r < out.dim(0); ++r) {
      EXPECT_GE(out.at2(r, j), lo - 1e-12);
      EXPECT_LE(out.at2(r, j), hi + 1e-12);
    }
  }
}

// Set property: permuting the visual-feature positions leaves the prefix rows
// unchanged (attention weights travel with their values).
TEST(Mapper, PrefixInvariantToFeaturePermutation) {
  MapperConfig cfg;
  auto params = metamap::init_mapper_params<double>(cfg, kDv, kDe, 5);
  std::mt19937_64 rng(6);
  auto f = testutil::random_tensor(rng, {4, kDv});
  std::vector<double> permuted(f.values());
  // swap rows 0 and 3, 1 and 2
  for (int64_t j = 0; j < kDv; ++j) {
    std::swap(permuted[0 * kDv + j], permuted[3 * kDv + j]);
    std::swap(permuted[1 * kDv + j], permuted[2 * kDv + j]);
  }
  auto p1 = metamap::map_to_prefix(cfg, params, f);
  auto p2 = metamap::map_to_prefix(cfg, params, Tensor::from_data({4, kDv}, permuted));
  for (size_t i = 0; i < p1.values().size(); ++i)
    EXPECT_NEAR(p1.values()[i], p2.values()[i], 1e-9);
}

TEST(Mapper, PrefixDifferentiableWrtAllTheta) {
  for (auto variant : {MapperVariant::kSelfAttention, MapperVariant::kMlp}) {
    MapperConfig cfg;
    cfg.variant = variant;
    cfg.mlp_hidden = 10;
    auto params = metamap::init_mapper_params<double>(cfg, kDv, kDe, 7);
    std::mt19937_64 rng(8);
    auto f = testutil::random_tensor(rng, {3, kDv});
    // plain scalar sum of the prefix, plus a randomly weighted sum (the
    // weighted probe keeps every gradient coordinate away from the layer-norm
    // null direction, so the strict tolerance applies)
    auto w = testutil::random_tensor(rng, {cfg.prefix_len, kDe}, false, 0.5, 1.5);
    for (bool weighted : {false, true}) {
      auto loss_of = [&](const metamap::ParameterSetT<double>& p) {
        auto prefix = metamap::map_to_prefix(cfg, p, f);
        return metamap::sum_all(weighted ? metamap::mul(prefix, w) : prefix);
      };
      for (const auto& [name, t] : params.trainable) {
        auto analytic = metamap::grad(loss_of(params), {t});
        auto fd = testutil::central_diff(
            [&](const std::vector<double>& x) {
              auto p2 = params.clone();
              for (auto& [n2, t2] : p2.trainable)
                if (n2 == name) t2.mutable_values() = x;
              metamap::NoGradGuard ng;
              return loss_of(p2).item();
            },
            t.values());
        const double err = weighted ? testutil::max_rel_err(analytic[0].values(), fd)
                                    : testutil::max_err_combined(analytic[0].values(), fd);
        EXPECT_LE(err, 1e-6) << "variant " << metamap::to_string(variant) << ", parameter "
                             << name << (weighted ? " (weighted)" : " (plain sum)");
      }
    }
  }
}

TEST(Mapper, VariantsShareTheIoContract) {
  std::mt19937_64 rng(9);
  auto f = testutil::random_tensor(rng, {4, kDv});
  MapperConfig attn;
  MapperConfig mlp;
  mlp.variant = MapperVariant::kMlp;
  auto pa = metamap::init_mapper_params<double>(attn, kDv, kDe, 1);
  auto pm = metamap::init_mapper_params<double>(mlp, kDv, kDe, 1);
  EXPECT_EQ(metamap::map_to_prefix(attn, pa, f).shape(),
            metamap::map_to_prefix(mlp, pm, f).shape());
}

TEST(Mapper, ReinitializeIsSeedDeterministic) {
  MapperConfig cfg;
  auto params = metamap::init_mapper_params<double>(cfg, kDv, kDe, 1);
  auto snapshot = [&] {
    std::vector<double> all;
    for (const auto& [n, t] : params.trainable)
      all.insert(all.end(), t.values().begin(), t.values().end());
    return all;
  };
  metamap::reinitialize(params, cfg, kDv, kDe, 42);
  const auto a = snapshot();
  metamap::reinitialize(params, cfg, kDv, kDe, 42);
  EXPECT_EQ(snapshot(), a);
  metamap::reinitialize(params, cfg, kDv, kDe, 43);
  EXPECT_NE(snapshot(), a);
}
