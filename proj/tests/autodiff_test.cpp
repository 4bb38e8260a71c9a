#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "boneik/autodiff.hpp"
#include "boneik/grad_check.hpp"
#include "boneik/model.hpp"
#include "primitive_cases.hpp"
#include "test_support.hpp"

using namespace boneik;
using namespace boneik::ad;
using boneik::testing::probe;
using boneik::testing::randn;
using boneik::testing::uniform;

namespace {

using T = Tensor<double>;
using M = Matrix<double>;

constexpr double kStep = 1e-5;
constexpr double kTol = 1e-5;

void expect_pass(const ScalarFn<double>& fn, std::vector<T> inputs, double tol = kTol) {
  const auto report = grad_check<double>(fn, std::move(inputs), kStep, tol);
  INFO(report.describe());
  CHECK(report.passed);
}

M rotations_flat(int rows, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  M m(rows, 9);
  for (int r = 0; r < rows; ++r) {
    const Mat3<double> q = random_rotation<double>(rng, 3.0);
    for (int k = 0; k < 9; ++k) m(r, k) = q.data()[k];
  }
  return m;
}

}  // namespace

TEST_CASE("forward values") {
  Tape<double> tape;
  const auto s = softmax_rows(tape, T::constant(M::Zero(1, 2)));
  CHECK(s.value()(0, 0) == doctest::Approx(0.5));
  CHECK(s.value()(0, 1) == doctest::Approx(0.5));

  const auto ln = layernorm(tape, T::constant(M::Constant(2, 5, 3.0)), T::constant(M::Ones(1, 5)),
                            T::constant(M::Zero(1, 5)));
  CHECK(ln.value().cwiseAbs().maxCoeff() == 0.0);

  M mask = M::Zero(1, 3);
  mask(0, 1) = -std::numeric_limits<double>::infinity();
  const auto masked = softmax_rows(tape, T::constant(randn(1, 3, 1)), mask);
  CHECK(masked.value()(0, 1) == 0.0);
  CHECK(masked.value().sum() == doctest::Approx(1.0));

  M one_entry = M::Constant(1, 3, -std::numeric_limits<double>::infinity());
  one_entry(0, 2) = 0.0;
  CHECK(softmax_rows(tape, T::constant(randn(1, 3, 2, 50.0)), one_entry).value()(0, 2) == 1.0);
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives ones") {
    Tape<double> tape;
    auto x = T::parameter(randn(3, 4, 1));
    tape.backward(sum(tape, x));
    CHECK(x.grad() == M::Ones(3, 4));
  }
  SUBCASE("squared norm gives 2x") {
    Tape<double> tape;
    auto x = T::parameter(randn(3, 4, 2));
    tape.backward(sum(tape, mul(tape, x, x)));
    CHECK((x.grad() - 2.0 * x.value()).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("leaf gradients accumulate across calls") {
    Tape<double> tape;
    auto x = T::parameter(randn(2, 2, 3));
    const auto loss = sum(tape, x);
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad() == M::Constant(2, 2, 2.0));
  }
  SUBCASE("non-scalar loss is rejected") {
    Tape<double> tape;
    auto x = T::parameter(randn(2, 2, 4));
    CHECK_THROWS_AS(tape.backward(scale(tape, x, 2.0)), ShapeError);
  }
  SUBCASE("shape errors name the primitive") {
    Tape<double> tape;
    CHECK_THROWS_WITH_AS(matmul(tape, T::constant(randn(2, 3, 5)), T::constant(randn(2, 3, 6))),
                         doctest::Contains("matmul"), ShapeError);
    CHECK_THROWS_WITH_AS(sub(tape, T::constant(randn(2, 3, 5)), T::constant(randn(3, 3, 6))),
                         doctest::Contains("sub"), ShapeError);
  }
}

TEST_CASE("primitive gradients match central differences") {
  for (const auto& c : boneik::testing::primitive_cases()) {
    const auto report = grad_check<double>(c.fn, c.inputs, kStep, kTol);
    INFO(c.name << ": " << report.describe());
    CHECK(report.passed);
  }
}

TEST_CASE("composite gradients") {
  SUBCASE("linear layer") {
    expect_pass(
        [](Tape<double>& t, const std::vector<T>& in) { return probe(t, add(t, matmul(t, in[0], in[1]), in[2])); },
        {T(randn(5, 4, 1)), T(randn(4, 3, 2)), T(randn(1, 3, 3))});
  }
  SUBCASE("6D head") {
    expect_pass([](Tape<double>& t, const std::vector<T>& in) { return probe(t, rot6d_to_matrix(t, in[0])); },
                {T(randn(5, 6, 1))});
  }
  SUBCASE("geodesic loss away from pi") {
    const auto gt = T::constant(rotations_flat(6, 2));
    expect_pass(
        [gt](Tape<double>& t, const std::vector<T>& in) { return geodesic_loss(t, rot6d_to_matrix(t, in[0]), gt); },
        {T(randn(6, 6, 1))}, 1e-4);
  }
  SUBCASE("geodesic loss at pi is flagged") {
    const M id = []() {
      M m = M::Zero(1, 9);
      m(0, 0) = m(0, 4) = m(0, 8) = 1.0;
      return m;
    }();
    M flip = M::Zero(1, 9);
    flip(0, 0) = 1.0;
    flip(0, 4) = flip(0, 8) = -1.0;
    const auto gt = T::constant(flip);
    const auto report = grad_check<double>(
        [gt](Tape<double>& t, const std::vector<T>& in) { return geodesic_loss(t, in[0], gt); }, {T(id)}, kStep, 1e-4);
    CHECK_FALSE(report.passed);
  }
  SUBCASE("FK consistency loss") {
    const auto tree = boneik::testing::fixture_rig("chain5");
    const auto frames = compute_rest_bone_frames(tree);
    std::mt19937_64 rng(3);
    std::vector<Positions<double>> pos;
    for (int b = 0; b < 2; ++b) {
      pos.push_back(make_pose<double>(tree, frames.cast<double>(), boneik::testing::random_locals(5, rng, 1.0)).positions);
    }
    M x(10, 3);
    for (int b = 0; b < 2; ++b) {
      for (int i = 0; i < 5; ++i) x.row(b * 5 + i) = pos[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)].transpose();
    }
    const auto xt = T::constant(x);
    expect_pass(
        [&](Tape<double>& t, const std::vector<T>& in) {
          return fk_consistency_loss(t, rot6d_to_matrix(t, in[0]), tree, frames, xt);
        },
        {T(randn(10, 6, 4))}, 1e-4);
  }
}
