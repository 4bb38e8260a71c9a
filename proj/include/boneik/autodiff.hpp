#pragma once

// Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//
// A Tensor is a shared handle to a value and an (optional) gradient buffer.
// Operations are free functions taking the Tape they record on. Backward
// closures accumulate vector-Jacobian products into their inputs.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "boneik/error.hpp"

namespace boneik::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool requires_grad = false;

  Matrix<Scalar>& grad_buffer() {
    if (grad.size() == 0) grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
    return grad;
  }
};

template <typename Scalar>
class Tensor {
 public:
  using Mat = Matrix<Scalar>;

  Tensor() = default;
  explicit Tensor(Mat value, bool requires_grad = false) : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor constant(Mat value) { return Tensor(std::move(value), false); }
  static Tensor parameter(Mat value) { return Tensor(std::move(value), true); }
  static Tensor zeros(Eigen::Index rows, Eigen::Index cols, bool requires_grad = false) {
    return Tensor(Mat::Zero(rows, cols), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  /// Gradient buffer; empty until something accumulates into it.
  const Mat& grad() const { return node_->grad; }
  Mat grad_or_zero() const { return node_->grad.size() ? node_->grad : Mat::Zero(rows(), cols()); }
  Mat& grad_buffer() const { return node_->grad_buffer(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  void zero_grad() { node_->grad.resize(0, 0); }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  Scalar item() const { return node_->value(0, 0); }
  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }
  /// Deep copy of the value as a fresh leaf.
  Tensor clone(bool requires_grad) const { return Tensor(node_->value, requires_grad); }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Ordered record of differentiable operations.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(const Mat&)>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }

  void record(const Tensor<Scalar>& out, BackwardFn fn) { entries_.push_back({out.node(), std::move(fn)}); }

  /// Reverse sweep from a scalar loss. Intermediate gradients are reset first;
  /// leaf gradients accumulate across calls.
  void backward(const Tensor<Scalar>& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      std::ostringstream os;
      os << "backward: loss must be a scalar, got shape [" << loss.rows() << ", " << loss.cols() << "]";
      throw ShapeError(os.str());
    }
    bool reachable = false;
    for (const auto& e : entries_) {
      e.out->grad.resize(0, 0);
      reachable = reachable || e.out == loss.node();
    }
    if (!reachable) throw ValidationError("backward: loss was not produced on this tape");
    loss.node()->grad = Mat::Ones(1, 1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->out->grad.size() != 0) it->backward(it->out->grad);
    }
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<Node<Scalar>> out;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  bool recording_;
};

namespace detail {

template <typename Scalar>
std::string shape_of(const Tensor<Scalar>& t) {
  std::ostringstream os;
  os << "[" << t.rows() << ", " << t.cols() << "]";
  return os.str();
}

template <typename Scalar>
[[noreturn]] void shape_mismatch(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " + shape_of(b));
}

template <typename Scalar, typename Fn>
Tensor<Scalar> finish(Tape<Scalar>& tape, Matrix<Scalar> value, std::initializer_list<const Tensor<Scalar>*> inputs,
                      Fn&& backward) {
  bool needs = false;
  if (tape.recording()) {
    for (const auto* in : inputs) needs = needs || in->requires_grad();
  }
  Tensor<Scalar> out(std::move(value), needs);
  if (needs) tape.record(out, std::forward<Fn>(backward));
  return out;
}

template <typename Scalar, typename Expr>
void accumulate(const Tensor<Scalar>& t, const Expr& g) {
  if (t.requires_grad()) t.grad_buffer() += g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.rows()) detail::shape_mismatch("matmul", a, b);
  Matrix<Scalar> v = a.value() * b.value();
  return detail::finish(tape, std::move(v), {&a, &b}, [a, b](const Matrix<Scalar>& g) {
    if (a.requires_grad()) a.grad_buffer().noalias() += g * b.value().transpose();
    if (b.requires_grad()) b.grad_buffer().noalias() += a.value().transpose() * g;
  });
}

/// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
template <typename Scalar>
Tensor<Scalar> add(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.cols() || (a.rows() != b.rows() && b.rows() != 1)) detail::shape_mismatch("add", a, b);
  const bool bcast = a.rows() != b.rows();
  Matrix<Scalar> v = a.value();
  if (bcast) {
    v.rowwise() += b.value().row(0);
  } else {
    v += b.value();
  }
  return detail::finish(tape, std::move(v), {&a, &b}, [a, b, bcast](const Matrix<Scalar>& g) {
    detail::accumulate(a, g);
    if (b.requires_grad()) {
      if (bcast) {
        b.grad_buffer() += g.colwise().sum();
      } else {
        b.grad_buffer() += g;
      }
    }
  });
}

template <typename Scalar>
Tensor<Scalar> sub(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) detail::shape_mismatch("sub", a, b);
  Matrix<Scalar> v = a.value() - b.value();
  return detail::finish(tape, std::move(v), {&a, &b}, [a, b](const Matrix<Scalar>& g) {
    detail::accumulate(a, g);
    if (b.requires_grad()) b.grad_buffer() -= g;
  });
}

/// Elementwise product.
template <typename Scalar>
Tensor<Scalar> mul(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) detail::shape_mismatch("mul", a, b);
  Matrix<Scalar> v = a.value().cwiseProduct(b.value());
  return detail::finish(tape, std::move(v), {&a, &b}, [a, b](const Matrix<Scalar>& g) {
    if (a.requires_grad()) a.grad_buffer() += g.cwiseProduct(b.value());
    if (b.requires_grad()) b.grad_buffer() += g.cwiseProduct(a.value());
  });
}

/// Scales each row of `a` by the matching entry of column vector `c`.
template <typename Scalar>
Tensor<Scalar> mul_col(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& c) {
  if (c.cols() != 1 || c.rows() != a.rows()) detail::shape_mismatch("mul_col", a, c);
  Matrix<Scalar> v = c.value().col(0).asDiagonal() * a.value();
  return detail::finish(tape, std::move(v), {&a, &c}, [a, c](const Matrix<Scalar>& g) {
    if (a.requires_grad()) a.grad_buffer() += c.value().col(0).asDiagonal() * g;
    if (c.requires_grad()) c.grad_buffer() += g.cwiseProduct(a.value()).rowwise().sum();
  });
}

/// Divides each row of `a` by the matching entry of column vector `c`.
template <typename Scalar>
Tensor<Scalar> div_col(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& c) {
  if (c.cols() != 1 || c.rows() != a.rows()) detail::shape_mismatch("div_col", a, c);
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv = c.value().col(0).cwiseInverse();
  Matrix<Scalar> v = inv.asDiagonal() * a.value();
  return detail::finish(tape, std::move(v), {&a, &c}, [a, c, inv](const Matrix<Scalar>& g) {
    if (a.requires_grad()) a.grad_buffer() += inv.asDiagonal() * g;
    if (c.requires_grad()) {
      c.grad_buffer().col(0) -=
          (g.cwiseProduct(a.value()).rowwise().sum().array() * inv.array().square()).matrix();
    }
  });
}

template <typename Scalar>
Tensor<Scalar> scale(Tape<Scalar>& tape, const Tensor<Scalar>& a, Scalar s) {
  Matrix<Scalar> v = a.value() * s;
  return detail::finish(tape, std::move(v), {&a}, [a, s](const Matrix<Scalar>& g) { detail::accumulate(a, g * s); });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(Tape<Scalar>& tape, const Tensor<Scalar>& a, Scalar s) {
  Matrix<Scalar> v = a.value().array() + s;
  return detail::finish(tape, std::move(v), {&a}, [a](const Matrix<Scalar>& g) { detail::accumulate(a, g); });
}

// ---------------------------------------------------------------------------
// Structural operations
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> concat_cols(Tape<Scalar>& tape, const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) detail::shape_mismatch("concat_cols", parts.front(), p);
    cols += p.cols();
  }
  Matrix<Scalar> v(parts.front().rows(), cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  bool needs = false;
  if (tape.recording()) {
    for (const auto& p : parts) needs = needs || p.requires_grad();
  }
  Tensor<Scalar> out(std::move(v), needs);
  if (needs) {
    tape.record(out, [parts](const Matrix<Scalar>& g) {
      Eigen::Index c = 0;
      for (const auto& p : parts) {
        detail::accumulate(p, g.middleCols(c, p.cols()));
        c += p.cols();
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> slice_cols(Tape<Scalar>& tape, const Tensor<Scalar>& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    throw ShapeError("slice_cols: range out of bounds for shape " + detail::shape_of(a));
  }
  Matrix<Scalar> v = a.value().middleCols(begin, count);
  return detail::finish(tape, std::move(v), {&a}, [a, begin, count](const Matrix<Scalar>& g) {
    if (a.requires_grad()) a.grad_buffer().middleCols(begin, count) += g;
  });
}

/// Gathers rows: out[r] = a[index[r]].
template <typename Scalar>
Tensor<Scalar> index_rows(Tape<Scalar>& tape, const Tensor<Scalar>& a, std::vector<Eigen::Index> index) {
  Matrix<Scalar> v(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || index[r] >= a.rows()) throw ShapeError("index_rows: index out of range");
    v.row(static_cast<Eigen::Index>(r)) = a.value().row(index[r]);
  }
  return detail::finish(tape, std::move(v), {&a}, [a, index = std::move(index)](const Matrix<Scalar>& g) {
    if (!a.requires_grad()) return;
    auto& ga = a.grad_buffer();
    for (std::size_t r = 0; r < index.size(); ++r) ga.row(index[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

/// Scatter-add rows: out[segment[r]] += a[r], with `segments` output rows.
template <typename Scalar>
Tensor<Scalar> segment_sum(Tape<Scalar>& tape, const Tensor<Scalar>& a, std::vector<Eigen::Index> segment,
                           Eigen::Index segments) {
  if (static_cast<Eigen::Index>(segment.size()) != a.rows()) throw ShapeError("segment_sum: one segment id per row");
  Matrix<Scalar> v = Matrix<Scalar>::Zero(segments, a.cols());
  for (std::size_t r = 0; r < segment.size(); ++r) {
    if (segment[r] < 0 || segment[r] >= segments) throw ShapeError("segment_sum: segment id out of range");
    v.row(segment[r]) += a.value().row(static_cast<Eigen::Index>(r));
  }
  return detail::finish(tape, std::move(v), {&a}, [a, segment = std::move(segment)](const Matrix<Scalar>& g) {
    if (!a.requires_grad()) return;
    auto& ga = a.grad_buffer();
    for (std::size_t r = 0; r < segment.size(); ++r) ga.row(static_cast<Eigen::Index>(r)) += g.row(segment[r]);
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> elu(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  Matrix<Scalar> v = a.value().unaryExpr([](Scalar x) { return x > Scalar(0) ? x : std::expm1(x); });
  return detail::finish(tape, Matrix<Scalar>(v), {&a}, [a, v](const Matrix<Scalar>& g) {
    if (!a.requires_grad()) return;
    a.grad_buffer() += g.binaryExpr(v, [](Scalar gi, Scalar y) { return y > Scalar(0) ? gi : gi * (y + Scalar(1)); });
  });
}

template <typename Scalar>
Tensor<Scalar> leaky_relu(Tape<Scalar>& tape, const Tensor<Scalar>& a, Scalar slope) {
  Matrix<Scalar> v = a.value().unaryExpr([slope](Scalar x) { return x > Scalar(0) ? x : slope * x; });
  return detail::finish(tape, std::move(v), {&a}, [a, slope](const Matrix<Scalar>& g) {
    if (!a.requires_grad()) return;
    a.grad_buffer() += g.binaryExpr(a.value(), [slope](Scalar gi, Scalar x) { return x > Scalar(0) ? gi : gi * slope; });
  });
}

/// Row softmax of `a + mask`. Masked entries carry -infinity and get weight 0;
/// every row needs at least one finite entry. A mask with fewer rows is tiled
/// down the input (row r uses mask row r mod mask.rows()).
template <typename Scalar>
Tensor<Scalar> softmax_rows(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Matrix<Scalar>& mask) {
  if (mask.cols() != a.cols() || mask.rows() == 0 || a.rows() % mask.rows() != 0) {
    throw ShapeError("softmax_rows: mask shape does not match input " + detail::shape_of(a));
  }
  Matrix<Scalar> v = a.value();
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    auto row = v.row(r);
    row += mask.row(r % mask.rows());
    const Scalar m = row.maxCoeff();
    row = (row.array() - m).unaryExpr([](Scalar t) { return std::exp(t); });
    row /= row.sum();
  }
  return detail::finish(tape, Matrix<Scalar>(v), {&a}, [a, v](const Matrix<Scalar>& g) {
    if (!a.requires_grad()) return;
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = g.cwiseProduct(v).rowwise().sum();
    a.grad_buffer() += v.cwiseProduct(g - dot.replicate(1, g.cols()));
  });
}

/// Softmax without a mask.
template <typename Scalar>
Tensor<Scalar> softmax_rows(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  return softmax_rows(tape, a, Matrix<Scalar>(Matrix<Scalar>::Zero(a.rows(), a.cols())));
}

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Per-row layer normalization with learned gain and bias (both 1 x cols).
template <typename Scalar>
Tensor<Scalar> layernorm(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                         const Tensor<Scalar>& bias, Scalar eps = Scalar(kLayerNormEpsilon)) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) detail::shape_mismatch("layernorm(gain)", x, gain);
  if (bias.rows() != 1 || bias.cols() != x.cols()) detail::shape_mismatch("layernorm(bias)", x, bias);
  const Eigen::Index f = x.cols();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean = x.value().rowwise().mean();
  Matrix<Scalar> xhat = x.value().colwise() - mean;
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std =
      ((xhat.array().square().rowwise().sum() / Scalar(f)) + eps).rsqrt().matrix();
  xhat = inv_std.asDiagonal() * xhat;
  Matrix<Scalar> v = xhat.array().rowwise() * gain.value().row(0).array();
  v.rowwise() += bias.value().row(0);
  return detail::finish(tape, std::move(v), {&x, &gain, &bias}, [x, gain, bias, xhat, inv_std, f](const Matrix<Scalar>& g) {
    if (gain.requires_grad()) gain.grad_buffer() += g.cwiseProduct(xhat).colwise().sum();
    if (bias.requires_grad()) bias.grad_buffer() += g.colwise().sum();
    if (!x.requires_grad()) return;
    const Matrix<Scalar> gx = g.array().rowwise() * gain.value().row(0).array();
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m1 = gx.rowwise().mean();
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m2 = gx.cwiseProduct(xhat).rowwise().sum() / Scalar(f);
    Matrix<Scalar> d = gx.colwise() - m1;
    d -= m2.asDiagonal() * xhat;
    x.grad_buffer() += inv_std.asDiagonal() * d;
  });
}

/// Inverted dropout. Identity when `training` is false or `p` is zero.
template <typename Scalar, typename Rng>
Tensor<Scalar> dropout(Tape<Scalar>& tape, const Tensor<Scalar>& a, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return a;
  if (p >= 1.0) throw ValidationError("dropout: probability must be below 1");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Scalar keep_scale = Scalar(1.0 / (1.0 - p));
  Matrix<Scalar> mask(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = u(rng) < p ? Scalar(0) : keep_scale;
  Matrix<Scalar> v = a.value().cwiseProduct(mask);
  return detail::finish(tape, std::move(v), {&a}, [a, mask](const Matrix<Scalar>& g) {
    if (a.requires_grad()) a.grad_buffer() += g.cwiseProduct(mask);
  });
}

// ---------------------------------------------------------------------------
// Reductions and vector calculus
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  Matrix<Scalar> v(1, 1);
  v(0, 0) = a.value().sum();
  return detail::finish(tape, std::move(v), {&a}, [a](const Matrix<Scalar>& g) {
    if (a.requires_grad()) a.grad_buffer().array() += g(0, 0);
  });
}

template <typename Scalar>
Tensor<Scalar> mean(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  const Scalar n = Scalar(a.value().size());
  Matrix<Scalar> v(1, 1);
  v(0, 0) = a.value().sum() / n;
  return detail::finish(tape, std::move(v), {&a}, [a, n](const Matrix<Scalar>& g) {
    if (a.requires_grad()) a.grad_buffer().array() += g(0, 0) / n;
  });
}

/// Per-row sum, r x 1.
template <typename Scalar>
Tensor<Scalar> row_sum(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  Matrix<Scalar> v = a.value().rowwise().sum();
  return detail::finish(tape, std::move(v), {&a}, [a](const Matrix<Scalar>& g) {
    if (a.requires_grad()) a.grad_buffer() += g.col(0).replicate(1, a.cols());
  });
}

/// Per-row Euclidean norm, r x 1.
template <typename Scalar>
Tensor<Scalar> l2_norm(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  Matrix<Scalar> v = a.value().rowwise().norm();
  return detail::finish(tape, Matrix<Scalar>(v), {&a}, [a, v](const Matrix<Scalar>& g) {
    if (!a.requires_grad()) return;
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> s = g.col(0).cwiseQuotient(v.col(0));
    a.grad_buffer() += s.asDiagonal() * a.value();
  });
}

/// Row-wise cross product of two r x 3 tensors.
template <typename Scalar>
Tensor<Scalar> cross_product(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != 3 || b.cols() != 3 || a.rows() != b.rows()) detail::shape_mismatch("cross_product", a, b);
  using V3 = Eigen::Matrix<Scalar, 1, 3>;
  Matrix<Scalar> v(a.rows(), 3);
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    v.row(r) = V3(a.value().row(r)).cross(V3(b.value().row(r)));
  }
  return detail::finish(tape, std::move(v), {&a, &b}, [a, b](const Matrix<Scalar>& g) {
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const V3 gr = g.row(r);
      if (a.requires_grad()) a.grad_buffer().row(r) += V3(b.value().row(r)).cross(gr);
      if (b.requires_grad()) b.grad_buffer().row(r) += gr.cross(V3(a.value().row(r)));
    }
  });
}

inline constexpr double kArccosClamp = 1e-7;

/// arccos with the input clamped to [-1 + 1e-7, 1 - 1e-7]; the derivative is
/// taken at the clamped value so it stays finite.
template <typename Scalar>
Tensor<Scalar> arccos_clamped(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  const Scalar lo = Scalar(-1.0 + kArccosClamp);
  const Scalar hi = Scalar(1.0 - kArccosClamp);
  Matrix<Scalar> c = a.value().cwiseMax(lo).cwiseMin(hi);
  Matrix<Scalar> v = c.array().acos();
  return detail::finish(tape, std::move(v), {&a}, [a, c](const Matrix<Scalar>& g) {
    if (!a.requires_grad()) return;
    a.grad_buffer().array() -= g.array() / (Scalar(1) - c.array().square()).sqrt();
  });
}

// ---------------------------------------------------------------------------
// Batched 3x3 algebra. A row of 9 values holds one matrix in column-major
// order; a single-row operand is broadcast over all rows of the other.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
using Mat3Map = Eigen::Map<Eigen::Matrix<Scalar, 3, 3>>;
template <typename Scalar>
using ConstMat3Map = Eigen::Map<const Eigen::Matrix<Scalar, 3, 3>>;

template <typename Scalar>
ConstMat3Map<Scalar> row_mat3(const Matrix<Scalar>& m, Eigen::Index r) {
  return ConstMat3Map<Scalar>(m.data() + (m.rows() == 1 ? 0 : r) * 9);
}

template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> op3(const Eigen::Matrix<Scalar, 3, 3>& m, bool t) {
  return t ? Eigen::Matrix<Scalar, 3, 3>(m.transpose()) : m;
}

}  // namespace detail

/// out[r] = op(a[r]) * op(b[r]) with op the optional transpose.
template <typename Scalar>
Tensor<Scalar> mat3_mul(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool trans_a = false,
                        bool trans_b = false) {
  if (a.cols() != 9 || b.cols() != 9 || (a.rows() != b.rows() && a.rows() != 1 && b.rows() != 1)) {
    detail::shape_mismatch("mat3_mul", a, b);
  }
  using M3 = Eigen::Matrix<Scalar, 3, 3>;
  const Eigen::Index rows = std::max(a.rows(), b.rows());
  Matrix<Scalar> v(rows, 9);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const M3 oa = detail::op3<Scalar>(detail::row_mat3(a.value(), r), trans_a);
    const M3 ob = detail::op3<Scalar>(detail::row_mat3(b.value(), r), trans_b);
    detail::Mat3Map<Scalar>(v.data() + r * 9) = oa * ob;
  }
  return detail::finish(tape, std::move(v), {&a, &b}, [a, b, trans_a, trans_b, rows](const Matrix<Scalar>& g) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      const M3 gr = detail::ConstMat3Map<Scalar>(g.data() + r * 9);
      const M3 oa = detail::op3<Scalar>(detail::row_mat3(a.value(), r), trans_a);
      const M3 ob = detail::op3<Scalar>(detail::row_mat3(b.value(), r), trans_b);
      if (a.requires_grad()) {
        const M3 d = gr * ob.transpose();
        const Eigen::Index ar = a.rows() == 1 ? 0 : r;
        detail::Mat3Map<Scalar>(a.grad_buffer().data() + ar * 9) += trans_a ? M3(d.transpose()) : d;
      }
      if (b.requires_grad()) {
        const M3 d = oa.transpose() * gr;
        const Eigen::Index br = b.rows() == 1 ? 0 : r;
        detail::Mat3Map<Scalar>(b.grad_buffer().data() + br * 9) += trans_b ? M3(d.transpose()) : d;
      }
    }
  });
}

/// out[r] = op(a[r]) * v[r] for r x 9 matrices and r x 3 vectors.
template <typename Scalar>
Tensor<Scalar> mat3_vec(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& x, bool trans_a = false) {
  if (a.cols() != 9 || x.cols() != 3 || (a.rows() != x.rows() && a.rows() != 1 && x.rows() != 1)) {
    detail::shape_mismatch("mat3_vec", a, x);
  }
  using M3 = Eigen::Matrix<Scalar, 3, 3>;
  using V3 = Eigen::Matrix<Scalar, 3, 1>;
  const Eigen::Index rows = std::max(a.rows(), x.rows());
  Matrix<Scalar> v(rows, 3);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const M3 oa = detail::op3<Scalar>(detail::row_mat3(a.value(), r), trans_a);
    const V3 xr = x.value().row(x.rows() == 1 ? 0 : r).transpose();
    v.row(r) = (oa * xr).transpose();
  }
  return detail::finish(tape, std::move(v), {&a, &x}, [a, x, trans_a, rows](const Matrix<Scalar>& g) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      const V3 gr = g.row(r).transpose();
      const M3 oa = detail::op3<Scalar>(detail::row_mat3(a.value(), r), trans_a);
      const V3 xr = x.value().row(x.rows() == 1 ? 0 : r).transpose();
      if (a.requires_grad()) {
        const M3 d = gr * xr.transpose();
        const Eigen::Index ar = a.rows() == 1 ? 0 : r;
        detail::Mat3Map<Scalar>(a.grad_buffer().data() + ar * 9) += trans_a ? M3(d.transpose()) : d;
      }
      if (x.requires_grad()) {
        x.grad_buffer().row(x.rows() == 1 ? 0 : r) += (oa.transpose() * gr).transpose();
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Graph attention building blocks. Node features are stacked frame by frame:
// row b * n + i holds joint i of frame b.
// ---------------------------------------------------------------------------

/// Per-head attention scores: out[r, k] = <wh[r, head k slice], att[k]>.
template <typename Scalar>
Tensor<Scalar> head_scores(Tape<Scalar>& tape, const Tensor<Scalar>& wh, const Tensor<Scalar>& att) {
  const Eigen::Index heads = att.rows();
  const Eigen::Index fh = att.cols();
  if (heads * fh != wh.cols()) detail::shape_mismatch("head_scores", wh, att);
  Matrix<Scalar> v(wh.rows(), heads);
  for (Eigen::Index k = 0; k < heads; ++k) {
    v.col(k) = wh.value().middleCols(k * fh, fh) * att.value().row(k).transpose();
  }
  return detail::finish(tape, std::move(v), {&wh, &att}, [wh, att, heads, fh](const Matrix<Scalar>& g) {
    for (Eigen::Index k = 0; k < heads; ++k) {
      if (wh.requires_grad()) wh.grad_buffer().middleCols(k * fh, fh).noalias() += g.col(k) * att.value().row(k);
      if (att.requires_grad()) {
        att.grad_buffer().row(k).noalias() += g.col(k).transpose() * wh.value().middleCols(k * fh, fh);
      }
    }
  });
}

/// Pairwise logits per frame and head:
/// out[(b * heads + k) * n + i, j] = tgt[b * n + i, k] + nbr[b * n + j, k].
template <typename Scalar>
Tensor<Scalar> pair_logits(Tape<Scalar>& tape, const Tensor<Scalar>& tgt, const Tensor<Scalar>& nbr, Eigen::Index n) {
  if (tgt.rows() != nbr.rows() || tgt.cols() != nbr.cols() || tgt.rows() % n != 0) {
    detail::shape_mismatch("pair_logits", tgt, nbr);
  }
  const Eigen::Index heads = tgt.cols();
  const Eigen::Index frames = tgt.rows() / n;
  Matrix<Scalar> v(frames * heads * n, n);
  for (Eigen::Index b = 0; b < frames; ++b) {
    for (Eigen::Index k = 0; k < heads; ++k) {
      auto blk = v.middleRows((b * heads + k) * n, n);
      blk = tgt.value().col(k).segment(b * n, n).replicate(1, n);
      blk.rowwise() += nbr.value().col(k).segment(b * n, n).transpose();
    }
  }
  return detail::finish(tape, std::move(v), {&tgt, &nbr}, [tgt, nbr, n, heads, frames](const Matrix<Scalar>& g) {
    for (Eigen::Index b = 0; b < frames; ++b) {
      for (Eigen::Index k = 0; k < heads; ++k) {
        const auto blk = g.middleRows((b * heads + k) * n, n);
        if (tgt.requires_grad()) tgt.grad_buffer().col(k).segment(b * n, n) += blk.rowwise().sum();
        if (nbr.requires_grad()) nbr.grad_buffer().col(k).segment(b * n, n) += blk.colwise().sum().transpose();
      }
    }
  });
}

/// Attention-weighted aggregation per frame and head:
/// out[b * n + i, head k slice] = sum_j alpha[(b * heads + k) * n + i, j] * v[b * n + j, head k slice].
template <typename Scalar>
Tensor<Scalar> attend(Tape<Scalar>& tape, const Tensor<Scalar>& alpha, const Tensor<Scalar>& v, Eigen::Index n,
                      Eigen::Index heads) {
  const Eigen::Index f = v.cols();
  if (alpha.cols() != n || v.rows() % n != 0 || f % heads != 0 || alpha.rows() != (v.rows() / n) * heads * n) {
    detail::shape_mismatch("attend", alpha, v);
  }
  const Eigen::Index fh = f / heads;
  const Eigen::Index frames = v.rows() / n;
  Matrix<Scalar> out(v.rows(), f);
  for (Eigen::Index b = 0; b < frames; ++b) {
    for (Eigen::Index k = 0; k < heads; ++k) {
      out.block(b * n, k * fh, n, fh).noalias() =
          alpha.value().middleRows((b * heads + k) * n, n) * v.value().block(b * n, k * fh, n, fh);
    }
  }
  return detail::finish(tape, std::move(out), {&alpha, &v}, [alpha, v, n, heads, fh, frames](const Matrix<Scalar>& g) {
    for (Eigen::Index b = 0; b < frames; ++b) {
      for (Eigen::Index k = 0; k < heads; ++k) {
        const auto gb = g.block(b * n, k * fh, n, fh);
        if (alpha.requires_grad()) {
          alpha.grad_buffer().middleRows((b * heads + k) * n, n).noalias() +=
              gb * v.value().block(b * n, k * fh, n, fh).transpose();
        }
        if (v.requires_grad()) {
          v.grad_buffer().block(b * n, k * fh, n, fh).noalias() +=
              alpha.value().middleRows((b * heads + k) * n, n).transpose() * gb;
        }
      }
    }
  });
}

}  // namespace boneik::ad
