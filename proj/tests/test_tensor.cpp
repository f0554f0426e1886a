#include <gtest/gtest.h>

#include "support/reference.hpp"
#include "upt/gradcheck.hpp"
#include "upt/tensor.hpp"

using namespace upt;

namespace {

ref::Matrix to_ref(const Tensor& t) {
  ref::Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
  return m;
}

double max_diff(const Tensor& t, const ref::Matrix& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) worst = std::max(worst, std::abs(t(i, j) - m[i][j]));
  return worst;
}

}  // namespace

TEST(Tensor, MatmulVariantsMatchNaiveProduct) {
  Rng rng(3);
  const Tensor a = gaussian({5, 7}, 1.0, rng), b = gaussian({7, 4}, 1.0, rng);
  const Tensor c = gaussian({4, 7}, 1.0, rng), e = gaussian({5, 4}, 1.0, rng);
  EXPECT_LT(max_diff(matmul(a, b), ref::matmul(to_ref(a), to_ref(b))), 1e-12);
  EXPECT_LT(max_diff(matmul_nt(a, c), ref::matmul(to_ref(a), ref::transpose(to_ref(c)))), 1e-12);
  EXPECT_LT(max_diff(matmul_tn(a, e), ref::matmul(ref::transpose(to_ref(a)), to_ref(e))), 1e-12);
}

TEST(Tensor, MatmulRejectsMismatchedShapes) {
  EXPECT_THROW(matmul(Tensor(2, 3), Tensor(2, 3)), ShapeError);
  EXPECT_THROW(matmul_nt(Tensor(2, 3), Tensor(2, 4)), ShapeError);
  EXPECT_THROW(matmul_tn(Tensor(2, 3), Tensor(3, 3)), ShapeError);
  EXPECT_THROW(Tensor(2, 2) += Tensor(2, 3), ShapeError);
}

TEST(Tensor, SoftmaxRowsAreDistributionsAndShiftInvariant) {
  Rng rng(4);
  Tensor x = gaussian({3, 6}, 5.0, rng);
  const Tensor y = softmax_rows(x);
  for (std::size_t i = 0; i < 3; ++i) {
    double total = 0.0;
    for (double v : y.row(i)) {
      EXPECT_GT(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-15);
  }
  for (double& v : x.data()) v += 1000.0;
  EXPECT_LT(max_abs_diff(softmax_rows(x), y), 1e-12);
}

TEST(Tensor, LayerNormNormalizesRows) {
  Rng rng(5);
  const Tensor x = gaussian({4, 8}, 3.0, rng);
  const Tensor y = layer_norm(x, Tensor(Shape{8}, 1.0), Tensor(Shape{8}, 0.0), kLayerNormEps);
  for (std::size_t i = 0; i < 4; ++i) {
    double mean = 0.0, sq = 0.0;
    for (double v : y.row(i)) mean += v / 8.0;
    for (double v : y.row(i)) sq += (v - mean) * (v - mean) / 8.0;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq, 1.0, 1e-5);
  }
}

TEST(Tensor, LayerNormBackwardMatchesFiniteDifferences) {
  Rng rng(6);
  ParamTensor x(gaussian({3, 6}, 1.0, rng)), gain(gaussian({6}, 1.0, rng)), bias(gaussian({6}, 1.0, rng));
  const Tensor w = gaussian({3, 6}, 1.0, rng);
  auto objective = [&](bool accumulate) {
    LayerNormCache cache;
    const Tensor y = layer_norm(x.value, gain.value, bias.value, kLayerNormEps, &cache);
    if (accumulate) {
      const LayerNormGrads g = layer_norm_backward(w, gain.value, cache);
      x.accumulate(g.dx);
      gain.accumulate(g.dgain);
      bias.accumulate(g.dbias);
    }
    return dot(y, w);
  };
  std::vector<NamedParam> params{{"x", &x}, {"gain", &gain}, {"bias", &bias}};
  const auto report = check_gradient(objective, params);
  EXPECT_TRUE(report.passed(1e-6)) << report.worst_rel_error();
}

TEST(Tensor, ActivationDerivativesMatchFiniteDifferences) {
  for (Activation kind : {Activation::relu, Activation::gelu}) {
    for (double x : {-2.5, -0.7, 0.3, 1.9}) {
      const double h = 1e-6;
      const double numeric = (activate(kind, x + h) - activate(kind, x - h)) / (2 * h);
      EXPECT_NEAR(activate_derivative(kind, x), numeric, 1e-8);
    }
  }
}

TEST(Tensor, L2NormalizeBackwardMatchesFiniteDifferences) {
  Rng rng(7);
  ParamTensor u(gaussian({1, 5}, 1.0, rng));
  const Tensor w = gaussian({1, 5}, 1.0, rng);
  auto objective = [&](bool accumulate) {
    const Tensor e = l2_normalize(u.value);
    if (accumulate) u.accumulate(l2_normalize_backward(u.value, e, w));
    return dot(e, w);
  };
  std::vector<NamedParam> params{{"u", &u}};
  EXPECT_TRUE(check_gradient(objective, params).passed(1e-7));
  EXPECT_THROW(l2_normalize(Tensor(1, 3)), ContractError);
}

TEST(Gradcheck, FrozenTensorsMustStayZeroAndDetectWrongGradients) {
  Rng rng(8);
  ParamTensor a(gaussian({2, 2}, 1.0, rng)), frozen(gaussian({2, 2}, 1.0, rng), false);
  auto objective = [&](bool accumulate) {
    if (accumulate) {
      Tensor g = a.value;
      g *= 2.0 * 1.001;  // deliberately off by 0.1%
      a.accumulate(g);
      frozen.accumulate(frozen.value);
    }
    return dot(a.value, a.value) + dot(frozen.value, frozen.value);
  };
  std::vector<NamedParam> params{{"a", &a}, {"frozen", &frozen}};
  const auto report = check_gradient(objective, params);
  EXPECT_FALSE(report.passed(1e-4));
  EXPECT_EQ(report.tensors[1].max_abs_grad, 0.0);
  EXPECT_TRUE(report.tensors[1].frozen);
}

TEST(Gradcheck, NondeterministicObjectiveIsRejected) {
  ParamTensor a(Tensor::scalar(1.0));
  int calls = 0;
  auto objective = [&](bool) { return double(++calls); };
  std::vector<NamedParam> params{{"a", &a}};
  EXPECT_THROW(check_gradient(objective, params), OracleError);
}
