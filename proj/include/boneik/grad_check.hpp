#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "boneik/autodiff.hpp"

namespace boneik::ad {

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  Eigen::Index worst_row = 0;
  Eigen::Index worst_col = 0;
  double analytic = 0.0;
  double numeric = 0.0;

  std::string describe() const {
    return "max relative error " + std::to_string(max_rel_error) + " at input " + std::to_string(worst_input) + " [" +
           std::to_string(worst_row) + ", " + std::to_string(worst_col) + "] analytic " + std::to_string(analytic) +
           " numeric " + std::to_string(numeric);
  }
};

/// Builds a scalar from `inputs` on the given tape.
template <typename Scalar>
using ScalarFn = std::function<Tensor<Scalar>(Tape<Scalar>&, const std::vector<Tensor<Scalar>>&)>;

/// Compares reverse-mode gradients with central differences element by
/// element. Relative error is |a - n| / max(1, |a|, |n|). Non-finite values
/// count as failures.
template <typename Scalar>
GradCheckReport grad_check(const ScalarFn<Scalar>& fn, std::vector<Tensor<Scalar>> inputs, double step, double tol) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Tape<Scalar> tape;
    const auto loss = fn(tape, inputs);
    tape.backward(loss);
  }
  GradCheckReport rep;
  auto evaluate = [&]() {
    Tape<Scalar> tape(false);
    return static_cast<double>(fn(tape, inputs).item());
  };
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const Matrix<Scalar> analytic = inputs[t].grad_or_zero();
    auto& value = inputs[t].mutable_value();
    for (Eigen::Index r = 0; r < value.rows(); ++r) {
      for (Eigen::Index c = 0; c < value.cols(); ++c) {
        const Scalar saved = value(r, c);
        value(r, c) = saved + Scalar(step);
        const double fp = evaluate();
        value(r, c) = saved - Scalar(step);
        const double fm = evaluate();
        value(r, c) = saved;
        const double numeric = (fp - fm) / (2.0 * step);
        const double a = static_cast<double>(analytic(r, c));
        double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
        if (err > rep.max_rel_error || (t == 0 && r == 0 && c == 0)) {
          rep.max_rel_error = err;
          rep.worst_input = t;
          rep.worst_row = r;
          rep.worst_col = c;
          rep.analytic = a;
          rep.numeric = numeric;
        }
      }
    }
  }
  rep.passed = rep.max_rel_error < tol;
  return rep;
}

}  // namespace boneik::ad
