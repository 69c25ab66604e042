#include <gtest/gtest.h>

#include <cmath>

#include "metamap/ops.hpp"
#include "testutil.hpp"

using metamap::Shape;
using metamap::Tensor;
using testutil::gradcheck_max_rel_err;
using testutil::random_tensor;

namespace {
constexpr double kGradTol = 1e-6;
}

TEST(Matmul, IdentityCase) {
  auto id2 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto r = metamap::matmul(id2, m);
  EXPECT_EQ(r.values(), m.values());
}

TEST(Matmul, Annihilation) {
  auto a = Tensor::from_data({2, 2}, {1, 0, 0, 0});
  auto b = Tensor::from_data({2, 1}, {0, 5});
  auto r = metamap::matmul(a, b);
  EXPECT_DOUBLE_EQ(r.values()[0], 0.0);
  EXPECT_DOUBLE_EQ(r.values()[1], 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 2});
  try {
    metamap::matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const metamap::DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[2x2]"), std::string::npos);
  }
}

TEST(Matmul, GradMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  auto a = random_tensor(rng, {3, 3}, true);
  auto b = random_tensor(rng, {3, 3}, true);
  auto build = [](const std::vector<Tensor>& in) { return metamap::matmul(in[0], in[1]); };
  EXPECT_LE(gradcheck_max_rel_err(rng, build, {a, b}, 0), kGradTol);
  EXPECT_LE(gradcheck_max_rel_err(rng, build, {a, b}, 1), kGradTol);
}

TEST(Softmax, SymmetricInput) {
  auto r = metamap::softmax(Tensor::from_data({2}, {0.0, 0.0}), 0);
  EXPECT_NEAR(r.values()[0], 0.5, 1e-15);
  EXPECT_NEAR(r.values()[1], 0.5, 1e-15);
}

TEST(Softmax, MaxSubtractionPreventsOverflow) {
  auto r = metamap::softmax(Tensor::from_data({2}, {1000.0, 0.0}), 0);
  EXPECT_NEAR(r.values()[0], 1.0, 1e-12);
  EXPECT_NEAR(r.values()[1], 0.0, 1e-12);
}

TEST(Softmax, RowsSumToOneAndNonNegative) {
  std::mt19937_64 rng(3);
  auto x = random_tensor(rng, {5, 7}, false, -30.0, 30.0);
  auto s = metamap::softmax(x, 1);
  for (int64_t i = 0; i < 5; ++i) {
    double total = 0;
    for (int64_t j = 0; j < 7; ++j) {
      EXPECT_GE(s.at2(i, j), 0.0);
      total += s.at2(i, j);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Softmax, JacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  auto x = Tensor::from_data({3}, {0.1, 0.2, 0.3}, true);
  auto build = [](const std::vector<Tensor>& in) { return metamap::softmax(in[0], 0); };
  EXPECT_LE(gradcheck_max_rel_err(rng, build, {x}, 0), kGradTol);
}

TEST(CrossEntropy, ForcedTargetDistributionGivesZeroLoss) {
  // logits that put probability ~1 on the target at every position
  auto logits = Tensor::from_data({2, 4}, {60, 0, 0, 0, 0, 0, 60, 0});
  auto loss = metamap::cross_entropy(logits, {0, 2}, {true, true});
  EXPECT_NEAR(loss.item(), 0.0, 1e-9);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  auto logits = Tensor::zeros({3, 8});
  auto loss = metamap::cross_entropy(logits, {1, 5, 7}, {true, true, true});
  EXPECT_NEAR(loss.item(), std::log(8.0), 1e-12);
}

TEST(CrossEntropy, MaskExcludesPositions) {
  auto logits = Tensor::from_data({2, 4}, {60, 0, 0, 0, 60, 0, 0, 0});
  // second position is wrong but masked out
  auto loss = metamap::cross_entropy(logits, {0, 2}, {true, false});
  EXPECT_NEAR(loss.item(), 0.0, 1e-9);
}

TEST(CrossEntropy, OutOfVocabularyTargetIsIndexError) {
  auto logits = Tensor::zeros({2, 4});
  EXPECT_THROW(metamap::cross_entropy(logits, {0, 4}, {true, true}), metamap::IndexError);
}

TEST(CrossEntropy, GradMatchesFiniteDifferences) {
  std::mt19937_64 rng(17);
  auto logits = random_tensor(rng, {2, 4}, true);
  auto analytic = metamap::grad(metamap::cross_entropy(logits, {3, 1}, {true, true}), {logits});
  auto fd = testutil::central_diff(
      [&](const std::vector<double>& x) {
        metamap::NoGradGuard ng;
        auto l = Tensor::from_data({2, 4}, x);
        return metamap::cross_entropy(l, {3, 1}, {true, true}).item();
      },
      logits.values());
  EXPECT_LE(testutil::max_rel_err(analytic[0].values(), fd), kGradTol);
}

// Remaining primitives carry the same finite-difference obligation.

TEST(Elementwise, GradMatchesFiniteDifferences) {
  std::mt19937_64 rng(19);
  auto a = random_tensor(rng, {3, 4}, true);
  auto b = random_tensor(rng, {3, 4}, true);
  for (int input = 0; input < 2; ++input) {
    EXPECT_LE(gradcheck_max_rel_err(
                  rng, [](const std::vector<Tensor>& in) { return metamap::add(in[0], in[1]); },
                  {a, b}, input),
              kGradTol);
    EXPECT_LE(gradcheck_max_rel_err(
                  rng, [](const std::vector<Tensor>& in) { return metamap::sub(in[0], in[1]); },
                  {a, b}, input),
              kGradTol);
    EXPECT_LE(gradcheck_max_rel_err(
                  rng, [](const std::vector<Tensor>& in) { return metamap::mul(in[0], in[1]); },
                  {a, b}, input),
              kGradTol);
  }
}

TEST(Elementwise, BroadcastGradReducesCorrectly) {
  std::mt19937_64 rng(23);
  auto m = random_tensor(rng, {3, 4}, true);
  auto row = random_tensor(rng, {4}, true);
  auto col = random_tensor(rng, {3, 1}, true);
  auto build = [](const std::vector<Tensor>& in) {
    return metamap::mul(metamap::add(in[0], in[1]), in[2]);
  };
  for (int input = 0; input < 3; ++input)
    EXPECT_LE(gradcheck_max_rel_err(rng, build, {m, row, col}, input), kGradTol);
}

TEST(ScaleAndScalarAdd, GradMatchesFiniteDifferences) {
  std::mt19937_64 rng(29);
  auto a = random_tensor(rng, {5}, true);
  EXPECT_LE(gradcheck_max_rel_err(
                rng, [](const std::vector<Tensor>& in) { return metamap::scale(in[0], 2.5); },
                {a}, 0),
            kGradTol);
  EXPECT_LE(gradcheck_max_rel_err(
                rng, [](const std::vector<Tensor>& in) { return metamap::add_scalar(in[0], -1.25); },
                {a}, 0),
            kGradTol);
}

TEST(Unary, GradMatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  auto a = random_tensor(rng, {2, 5}, true, 0.2, 2.0);  // positive domain for log/sqrt/recip
  auto b = random_tensor(rng, {2, 5}, true, -2.0, 2.0);
  auto check = [&](auto op, const Tensor& leaf) {
    return gradcheck_max_rel_err(
        rng, [op](const std::vector<Tensor>& in) { return op(in[0]); }, {leaf}, 0);
  };
  EXPECT_LE(check([](const Tensor& t) { return metamap::exp_op(t); }, b), kGradTol);
  EXPECT_LE(check([](const Tensor& t) { return metamap::log_op(t); }, a), kGradTol);
  EXPECT_LE(check([](const Tensor& t) { return metamap::sqrt_op(t); }, a), kGradTol);
  EXPECT_LE(check([](const Tensor& t) { return metamap::reciprocal(t); }, a), kGradTol);
  EXPECT_LE(check([](const Tensor& t) { return metamap::tanh_op(t); }, b), kGradTol);
  EXPECT_LE(check([](const Tensor& t) { return metamap::gelu(t); }, b), kGradTol);
}

TEST(Reductions, GradMatchesFiniteDifferences) {
  std::mt19937_64 rng(37);
  auto a = random_tensor(rng, {3, 4}, true);
  EXPECT_LE(gradcheck_max_rel_err(
                rng, [](const std::vector<Tensor>& in) { return metamap::sum_all(in[0]); }, {a}, 0),
            kGradTol);
  EXPECT_LE(gradcheck_max_rel_err(
                rng, [](const std::vector<Tensor>& in) { return metamap::mean_all(in[0]); }, {a}, 0),
            kGradTol);
  for (int64_t axis = 0; axis < 2; ++axis)
    for (bool kd : {false, true})
      EXPECT_LE(gradcheck_max_rel_err(
                    rng,
                    [axis, kd](const std::vector<Tensor>& in) {
                      return metamap::sum_axis(in[0], axis, kd);
                    },
                    {a}, 0),
                kGradTol);
}

TEST(ShapeOps, ConcatSliceReshapeGrad) {
  std::mt19937_64 rng(41);
  auto a = random_tensor(rng, {2, 3}, true);
  auto b = random_tensor(rng, {2, 3}, true);
  for (int64_t axis = 0; axis < 2; ++axis)
    for (int input = 0; input < 2; ++input)
      EXPECT_LE(gradcheck_max_rel_err(
                    rng,
                    [axis](const std::vector<Tensor>& in) {
                      return metamap::concat<double>({in[0], in[1]}, axis);
                    },
                    {a, b}, input),
                kGradTol);
  EXPECT_LE(gradcheck_max_rel_err(
                rng,
                [](const std::vector<Tensor>& in) { return metamap::slice(in[0], 1, 1, 2); },
                {a}, 0),
            kGradTol);
  EXPECT_LE(gradcheck_max_rel_err(
                rng,
                [](const std::vector<Tensor>& in) { return metamap::reshape(in[0], {3, 2}); },
                {a}, 0),
            kGradTol);
}

TEST(Embedding, GatherScatterGrad) {
  std::mt19937_64 rng(43);
  auto table = random_tensor(rng, {6, 4}, true);
  std::vector<int64_t> ids{2, 0, 2, 5};
  EXPECT_LE(gradcheck_max_rel_err(
                rng,
                [&ids](const std::vector<Tensor>& in) { return metamap::gather_rows(in[0], ids); },
                {table}, 0),
            kGradTol);
  auto src = random_tensor(rng, {4, 3}, true);
  EXPECT_LE(gradcheck_max_rel_err(
                rng,
                [&ids](const std::vector<Tensor>& in) {
                  return metamap::scatter_add_rows(in[0], ids, 6);
                },
                {src}, 0),
            kGradTol);
  EXPECT_THROW(metamap::gather_rows(table, {6}), metamap::IndexError);
}

TEST(LayerNorm, GradMatchesFiniteDifferences) {
  std::mt19937_64 rng(47);
  auto x = random_tensor(rng, {3, 5}, true);
  auto gamma = random_tensor(rng, {5}, true, 0.5, 1.5);
  auto beta = random_tensor(rng, {5}, true);
  auto build = [](const std::vector<Tensor>& in) {
    return metamap::layer_norm(in[0], in[1], in[2]);
  };
  for (int input = 0; input < 3; ++input)
    EXPECT_LE(gradcheck_max_rel_err(rng, build, {x, gamma, beta}, input), kGradTol);
}

TEST(LayerNorm, NormalizesRows) {
  std::mt19937_64 rng(53);
  auto x = random_tensor(rng, {4, 8}, false, -3.0, 3.0);
  auto out = metamap::layer_norm(x, Tensor::ones({8}), Tensor::zeros({8}));
  for (int64_t i = 0; i < 4; ++i) {
    double mean = 0, var = 0;
    for (int64_t j = 0; j < 8; ++j) mean += out.at2(i, j);
    mean /= 8;
    for (int64_t j = 0; j < 8; ++j) var += (out.at2(i, j) - mean) * (out.at2(i, j) - mean);
    var /= 8;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(LogSoftmax, SecondOrderThroughSoftmaxWorks) {
  // gradient of || d/dx CE ||^2 via create_graph matches finite differences
  std::mt19937_64 rng(59);
  auto x = random_tensor(rng, {2, 3}, true);
  auto build_g = [](const Tensor& t) {
    auto loss = metamap::cross_entropy(t, {1, 2}, {true, true});
    auto g1 = metamap::grad(loss, {t}, true);
    return metamap::sum_all(metamap::mul(g1[0], g1[0]));
  };
  auto analytic = metamap::grad(build_g(x), {x});
  auto fd = testutil::central_diff(
      [&](const std::vector<double>& v) {
        auto t = Tensor::from_data({2, 3}, v, true);
        return build_g(t).item();
      },
      x.values());
  EXPECT_LE(testutil::max_rel_err(analytic[0].values(), fd), 1e-4);
}
