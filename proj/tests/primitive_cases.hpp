#pragma once

// Gradient-check cases for every autodiff primitive, shared by the unit tests
// and the acceptance binary.

#include <limits>
#include <random>
#include <string>
#include <vector>

#include "boneik/autodiff.hpp"
#include "boneik/grad_check.hpp"

namespace boneik::testing {

struct PrimitiveCase {
  std::string name;
  ad::ScalarFn<double> fn;
  std::vector<ad::Tensor<double>> inputs;
};

inline ad::Matrix<double> randn(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, scale);
  ad::Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n01(rng);
  return m;
}

inline ad::Matrix<double> uniform(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  ad::Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// sum(y .* W) with fixed random weights, so every output entry is exercised.
inline ad::Tensor<double> probe(ad::Tape<double>& tape, const ad::Tensor<double>& y, std::uint64_t seed = 99) {
  return ad::sum(tape, ad::mul(tape, y, ad::Tensor<double>::constant(randn(y.rows(), y.cols(), seed))));
}

inline std::vector<PrimitiveCase> primitive_cases() {
  using namespace boneik::ad;
  using T = Tensor<double>;
  using In = const std::vector<T>&;
  using M = Matrix<double>;
  std::vector<PrimitiveCase> c;

  c.push_back({"matmul", [](Tape<double>& t, In in) { return probe(t, matmul(t, in[0], in[1])); },
               {T(randn(4, 3, 1)), T(randn(3, 5, 2))}});
  c.push_back({"add", [](Tape<double>& t, In in) { return probe(t, add(t, in[0], in[1])); },
               {T(randn(4, 3, 1)), T(randn(4, 3, 2))}});
  c.push_back({"add broadcast", [](Tape<double>& t, In in) { return probe(t, add(t, in[0], in[1])); },
               {T(randn(4, 3, 1)), T(randn(1, 3, 2))}});
  c.push_back({"sub", [](Tape<double>& t, In in) { return probe(t, sub(t, in[0], in[1])); },
               {T(randn(4, 3, 1)), T(randn(4, 3, 2))}});
  c.push_back({"mul", [](Tape<double>& t, In in) { return probe(t, mul(t, in[0], in[1])); },
               {T(randn(4, 3, 1)), T(randn(4, 3, 2))}});
  c.push_back({"mul_col", [](Tape<double>& t, In in) { return probe(t, mul_col(t, in[0], in[1])); },
               {T(randn(4, 3, 1)), T(randn(4, 1, 2))}});
  c.push_back({"div_col", [](Tape<double>& t, In in) { return probe(t, div_col(t, in[0], in[1])); },
               {T(randn(4, 3, 1)), T(uniform(4, 1, 2, 0.5, 2.0))}});
  c.push_back({"scale", [](Tape<double>& t, In in) { return probe(t, scale(t, in[0], -1.7)); }, {T(randn(3, 3, 1))}});
  c.push_back(
      {"add_scalar", [](Tape<double>& t, In in) { return probe(t, add_scalar(t, in[0], 0.3)); }, {T(randn(3, 3, 1))}});
  c.push_back({"concat_cols",
               [](Tape<double>& t, In in) { return probe(t, concat_cols(t, std::vector<T>{in[0], in[1]})); },
               {T(randn(3, 2, 1)), T(randn(3, 4, 2))}});
  c.push_back({"slice_cols", [](Tape<double>& t, In in) { return probe(t, slice_cols(t, in[0], 1, 3)); },
               {T(randn(3, 5, 1))}});
  c.push_back({"index_rows", [](Tape<double>& t, In in) { return probe(t, index_rows(t, in[0], {2, 0, 2, 1, 3})); },
               {T(randn(4, 3, 1))}});
  c.push_back({"segment_sum",
               [](Tape<double>& t, In in) { return probe(t, segment_sum(t, in[0], {1, 0, 1, 2, 1}, 3)); },
               {T(randn(5, 3, 1))}});
  c.push_back({"elu", [](Tape<double>& t, In in) { return probe(t, elu(t, in[0])); }, {T(randn(4, 5, 3))}});
  c.push_back({"leaky_relu", [](Tape<double>& t, In in) { return probe(t, leaky_relu(t, in[0], 0.2)); },
               {T(randn(4, 5, 4))}});
  M mask = M::Zero(3, 4);
  mask(0, 1) = mask(2, 3) = mask(2, 0) = -std::numeric_limits<double>::infinity();
  c.push_back({"softmax_rows", [mask](Tape<double>& t, In in) { return probe(t, softmax_rows(t, in[0], mask)); },
               {T(randn(3, 4, 1))}});
  c.push_back({"layernorm", [](Tape<double>& t, In in) { return probe(t, layernorm(t, in[0], in[1], in[2])); },
               {T(randn(3, 6, 1)), T(randn(1, 6, 2)), T(randn(1, 6, 3))}});
  c.push_back({"dropout",
               [](Tape<double>& t, In in) {
                 std::mt19937_64 rng(17);
                 return probe(t, dropout(t, in[0], 0.3, rng, true));
               },
               {T(randn(4, 5, 1))}});
  c.push_back({"sum", [](Tape<double>& t, In in) { return scale(t, sum(t, in[0]), 0.5); }, {T(randn(3, 4, 1))}});
  c.push_back({"mean", [](Tape<double>& t, In in) { return mean(t, mul(t, in[0], in[0])); }, {T(randn(3, 4, 1))}});
  c.push_back({"row_sum", [](Tape<double>& t, In in) { return probe(t, row_sum(t, in[0])); }, {T(randn(3, 4, 1))}});
  c.push_back({"l2_norm", [](Tape<double>& t, In in) { return probe(t, l2_norm(t, in[0])); }, {T(randn(3, 4, 1))}});
  c.push_back({"cross_product", [](Tape<double>& t, In in) { return probe(t, cross_product(t, in[0], in[1])); },
               {T(randn(4, 3, 1)), T(randn(4, 3, 2))}});
  c.push_back({"arccos_clamped", [](Tape<double>& t, In in) { return probe(t, arccos_clamped(t, in[0])); },
               {T(uniform(3, 4, 1, -0.9, 0.9))}});
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      c.push_back({"mat3_mul " + std::to_string(ta) + std::to_string(tb),
                   [ta, tb](Tape<double>& t, In in) { return probe(t, mat3_mul(t, in[0], in[1], ta, tb)); },
                   {T(randn(4, 9, 1)), T(randn(4, 9, 2))}});
    }
    c.push_back({"mat3_mul broadcast " + std::to_string(ta),
                 [ta](Tape<double>& t, In in) { return probe(t, mat3_mul(t, in[0], in[1], ta)); },
                 {T(randn(1, 9, 1)), T(randn(4, 9, 2))}});
    c.push_back({"mat3_vec " + std::to_string(ta),
                 [ta](Tape<double>& t, In in) { return probe(t, mat3_vec(t, in[0], in[1], ta)); },
                 {T(randn(4, 9, 1)), T(randn(4, 3, 2))}});
  }
  const Eigen::Index n = 3;
  const Eigen::Index heads = 2;
  c.push_back({"head_scores", [](Tape<double>& t, In in) { return probe(t, head_scores(t, in[0], in[1])); },
               {T(randn(2 * n, 4, 1)), T(randn(heads, 2, 2))}});
  c.push_back({"pair_logits", [n](Tape<double>& t, In in) { return probe(t, pair_logits(t, in[0], in[1], n)); },
               {T(randn(2 * n, heads, 1)), T(randn(2 * n, heads, 2))}});
  c.push_back({"attend",
               [n, heads](Tape<double>& t, In in) { return probe(t, attend(t, in[0], in[1], n, heads)); },
               {T(randn(2 * heads * n, n, 1)), T(randn(2 * n, 4, 2))}});
  return c;
}

}  // namespace boneik::testing
