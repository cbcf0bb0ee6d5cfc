#include "gradcheck.hpp"

#include <doctest.h>

#include <cmath>

using namespace rtgen;
using rtgen::testing::D;

TEST_CASE("every differentiable op matches central differences") {
  for (const auto& c : rtgen::testing::gradient_cases()) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      auto [f, inputs] = c.build(seed);
      const double err = rtgen::testing::gradient_error(f, inputs);
      INFO(c.name << " seed " << seed << " error " << err);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("matmul folds leading dimensions into rows") {
  Matrix<double> a(4, 2);
  a << 1, 2, 3, 4, 5, 6, 7, 8;
  Matrix<double> b(2, 1);
  b << 1, -1;
  D y = matmul(D::constant(a, {2, 2, 2}), D::constant(b));
  CHECK(y.shape() == Shape{2, 2, 1});
  for (Index r = 0; r < 4; ++r) CHECK(y.value()(r, 0) == doctest::Approx(-1.0));
}

TEST_CASE("softmax zeroes masked entries and fully masked rows") {
  Matrix<double> x(2, 3);
  x << 1, 2, 3, 4, 5, 6;
  Mask m(2, 3);
  m << true, false, true, false, false, false;
  D y = softmax(D::constant(x), &m);
  const double e = std::exp(2.0);
  CHECK(y.value()(0, 0) == doctest::Approx(1.0 / (1.0 + e)));
  CHECK(y.value()(0, 1) == 0.0);
  CHECK(y.value()(0, 2) == doctest::Approx(e / (1.0 + e)));
  CHECK(y.value().row(1).isZero());
  D ly = log_softmax(D::constant(x), &m);
  CHECK(std::isinf(ly.value()(0, 1)));
  CHECK(ly.value()(0, 2) == doctest::Approx(std::log(e / (1.0 + e))));
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  std::mt19937_64 rng(3);
  D x = rtgen::testing::random_param({4, 8}, rng, -3.0, 3.0);
  D ones = D::constant(Matrix<double>::Ones(1, 8), {8});
  D zeros = D::constant(Matrix<double>::Zero(1, 8), {8});
  D y = layer_norm(x, ones, zeros);
  for (Index r = 0; r < 4; ++r) {
    CHECK(y.value().row(r).mean() == doctest::Approx(0.0).epsilon(1e-12));
    const double var = y.value().row(r).squaredNorm() / 8.0;
    const double xvar = (x.value().row(r).array() - x.value().row(r).mean()).square().sum() / 8.0;
    CHECK(var == doctest::Approx(xvar / (xvar + 1e-5)));
  }
}

TEST_CASE("attention with one key returns that value") {
  Matrix<double> q = Matrix<double>::Random(3, 4);
  Matrix<double> kv = Matrix<double>::Random(1, 4);
  D y = scaled_dot_attention(D::constant(q), D::constant(kv), D::constant(kv), 1, 2);
  for (Index r = 0; r < 3; ++r) CHECK((y.value().row(r) - kv.row(0)).norm() < 1e-12);
}

TEST_CASE("attention batches do not see each other") {
  std::mt19937_64 rng(9);
  D q = rtgen::testing::random_param({4, 4}, rng);
  D k = rtgen::testing::random_param({6, 4}, rng);
  D v = rtgen::testing::random_param({6, 4}, rng);
  D joint = scaled_dot_attention(q, k, v, 2, 2);
  D first = scaled_dot_attention(slice_rows(q, 0, 2), slice_rows(k, 0, 3), slice_rows(v, 0, 3), 1, 2);
  D second = scaled_dot_attention(slice_rows(q, 2, 2), slice_rows(k, 3, 3), slice_rows(v, 3, 3), 1, 2);
  CHECK((joint.value().topRows(2) - first.value()).norm() < 1e-14);
  CHECK((joint.value().bottomRows(2) - second.value()).norm() < 1e-14);
}

TEST_CASE("bce with logits is stable for large logits") {
  Matrix<double> z(3, 1);
  z << 800.0, -800.0, 0.0;
  Matrix<double> t(3, 1);
  t << 0.0, 1.0, 1.0;
  D y = bce_with_logits(D::constant(z), t);
  CHECK(y.value()(0, 0) == doctest::Approx(800.0));
  CHECK(y.value()(1, 0) == doctest::Approx(800.0));
  CHECK(y.value()(2, 0) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("gradients accumulate across repeated use and reset between passes") {
  D x = D::parameter(Matrix<double>::Constant(1, 1, 3.0));
  D y = add(mul(x, x), x);
  backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(7.0));
  x.zero_grad();
  backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(7.0));
}

TEST_CASE("shape mismatches raise dimension errors") {
  D a = D::constant(Matrix<double>::Zero(2, 3));
  D b = D::constant(Matrix<double>::Zero(3, 2));
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
  CHECK_THROWS_AS(reshape(a, Shape{5}), DimensionError);
  CHECK_THROWS_AS(scaled_dot_attention(a, a, a, 1, 2), ConfigError);
}

TEST_CASE("constants do not record a graph") {
  D a = D::constant(Matrix<double>::Ones(2, 2));
  D y = mul(a, a);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node().parents.empty());
}

TEST_CASE("whole detector loss matches central differences") {
  const auto c = rtgen::testing::model_gradient_case();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto [f, inputs] = c.build(seed);
    const double err = rtgen::testing::gradient_error(f, inputs);
    INFO("seed " << seed << " error " << err);
    CHECK(err < 1e-4);
  }
}
