#include "boneik/solvers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "boneik/autodiff.hpp"
#include "boneik/error.hpp"
#include "boneik/metrics.hpp"

namespace boneik {

int SolveConfig::iterations() const {
  if (max_iters > 0) return max_iters;
  return checkpoints.empty() ? 1 : *std::max_element(checkpoints.begin(), checkpoints.end());
}

void SolveConfig::validate() const {
  if (max_iters < 0) throw ValidationError("solve config: max_iters must be nonnegative");
  if (!(tolerance > 0.0)) throw ValidationError("solve config: tolerance must be positive");
  if (!(step > 0.0)) throw ValidationError("solve config: step must be positive");
  if (!(ccd_max_angle > 0.0)) throw ValidationError("solve config: ccd_max_angle must be positive");
  for (int c : checkpoints) {
    if (c < 1) throw ValidationError("solve config: checkpoints must be at least 1");
  }
}

namespace {

double mean_sq_error(const KinematicTree& tree, const Rotations<double>& locals, const Positions<double>& targets) {
  const auto p = fk<double>(tree, locals).positions;
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - targets[i]).squaredNorm();
  return s / static_cast<double>(p.size());
}

std::vector<int> sorted_checkpoints(const SolveConfig& config) {
  std::vector<int> c = config.checkpoints;
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  c.erase(std::remove_if(c.begin(), c.end(), [&](int k) { return k > config.iterations(); }), c.end());
  return c;
}

void check_inputs(const KinematicTree& tree, const std::vector<Positions<double>>& targets,
                  const std::vector<Rotations<double>>& init) {
  if (targets.size() != init.size()) throw ShapeError("solver: target and initial pose counts differ");
  for (std::size_t f = 0; f < targets.size(); ++f) {
    if (static_cast<int>(targets[f].size()) != tree.size() || static_cast<int>(init[f].size()) != tree.size()) {
      throw ShapeError("solver: frame " + std::to_string(f) + " does not match the rig");
    }
  }
}

class TraceRecorder {
 public:
  TraceRecorder(const KinematicTree& tree, const std::vector<Positions<double>>& targets, const SolveConfig& config)
      : tree_(tree), targets_(targets), checkpoints_(sorted_checkpoints(config)) {}

  void maybe_record(int iteration, const std::vector<Rotations<double>>& locals) {
    if (!std::binary_search(checkpoints_.begin(), checkpoints_.end(), iteration)) return;
    trace_.iterations.push_back(iteration);
    trace_.locals.push_back(locals);
    std::vector<double> r(locals.size());
    for (std::size_t f = 0; f < locals.size(); ++f) r[f] = pose_residual(tree_, locals[f], targets_[f]);
    trace_.residual.push_back(std::move(r));
  }

  SolveTrace take() { return std::move(trace_); }

 private:
  const KinematicTree& tree_;
  const std::vector<Positions<double>>& targets_;
  std::vector<int> checkpoints_;
  SolveTrace trace_;
};

/// Maps a rotation increment d to the flattened (column-major) I + [d]x.
ad::Matrix<double> skew_basis() {
  ad::Matrix<double> k = ad::Matrix<double>::Zero(3, 9);
  k(0, 5) = 1.0;
  k(0, 7) = -1.0;
  k(1, 2) = -1.0;
  k(1, 6) = 1.0;
  k(2, 1) = 1.0;
  k(2, 3) = -1.0;
  return k;
}

/// Gradient of sum_b mean_i |FK_b(L_b exp[d])_i - T_b,i|^2 with respect to d at
/// d = 0. Rows are joint-major: row i * B + b.
ad::Matrix<double> fk_gradient(const KinematicTree& tree, const std::vector<Rotations<double>>& locals,
                               const std::vector<Positions<double>>& targets) {
  const int n = tree.size();
  const auto batch = static_cast<Eigen::Index>(locals.size());
  ad::Matrix<double> lflat(n * batch, 9);
  for (int i = 0; i < n; ++i) {
    for (Eigen::Index b = 0; b < batch; ++b) {
      Eigen::Map<Mat3<double>>(lflat.data() + (i * batch + b) * 9) = locals[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)];
    }
  }
  ad::Matrix<double> eye = ad::Matrix<double>::Zero(1, 9);
  eye(0, 0) = eye(0, 4) = eye(0, 8) = 1.0;

  ad::Tape<double> tape;
  const auto delta = ad::Tensor<double>::parameter(ad::Matrix<double>::Zero(n * batch, 3));
  const auto inc = ad::add(tape, ad::matmul(tape, delta, ad::Tensor<double>::constant(skew_basis())),
                           ad::Tensor<double>::constant(eye));
  const auto posed = ad::mat3_mul(tape, ad::Tensor<double>::constant(lflat), inc);

  auto rows_of = [batch](int i) {
    std::vector<Eigen::Index> r(static_cast<std::size_t>(batch));
    for (Eigen::Index b = 0; b < batch; ++b) r[static_cast<std::size_t>(b)] = i * batch + b;
    return r;
  };
  std::vector<ad::Tensor<double>> world(static_cast<std::size_t>(n));
  std::vector<ad::Tensor<double>> joint(static_cast<std::size_t>(n));
  world[0] = ad::index_rows(tape, posed, rows_of(0));
  joint[0] = ad::Tensor<double>::zeros(batch, 3);
  ad::Tensor<double> total;
  for (int i = 1; i < n; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    const auto pu = static_cast<std::size_t>(tree.parent(i));
    if (!tree.is_leaf(i)) world[iu] = ad::mat3_mul(tape, world[pu], ad::index_rows(tape, posed, rows_of(i)));
    const auto offset = ad::Tensor<double>::constant(tree.rest_offsets[iu].transpose());
    joint[iu] = ad::add(tape, joint[pu], ad::mat3_vec(tape, world[pu], offset));
    ad::Matrix<double> target(batch, 3);
    for (Eigen::Index b = 0; b < batch; ++b) target.row(b) = targets[static_cast<std::size_t>(b)][iu].transpose();
    const auto diff = ad::sub(tape, joint[iu], ad::Tensor<double>::constant(std::move(target)));
    const auto sq = ad::sum(tape, ad::mul(tape, diff, diff));
    total = total.defined() ? ad::add(tape, total, sq) : sq;
  }
  if (!total.defined()) return ad::Matrix<double>::Zero(n * batch, 3);
  const auto loss = ad::scale(tape, total, 1.0 / static_cast<double>(n));
  tape.backward(loss);
  return delta.grad_or_zero();
}

}  // namespace

double pose_residual(const KinematicTree& tree, const Rotations<double>& locals, const Positions<double>& targets) {
  return std::sqrt(mean_sq_error(tree, locals, targets));
}

SolveTrace gradient_ik(const KinematicTree& tree, const std::vector<Positions<double>>& targets,
                       const SolveConfig& config, const std::vector<Rotations<double>>& init) {
  config.validate();
  check_inputs(tree, targets, init);
  constexpr int kMaxHalvings = 40;
  const int n = tree.size();
  const auto batch = init.size();
  std::vector<Rotations<double>> locals = init;
  std::vector<double> step(batch, config.step);
  std::vector<double> value(batch);
  for (std::size_t b = 0; b < batch; ++b) value[b] = mean_sq_error(tree, locals[b], targets[b]);
  // Last accepted tangent step and the gradient it was taken from, per frame.
  std::vector<Eigen::VectorXd> last_step(batch);
  std::vector<Eigen::VectorXd> last_grad(batch);
  const double tol_sq = config.tolerance * config.tolerance;
  TraceRecorder recorder(tree, targets, config);

  for (int it = 1; it <= config.iterations(); ++it) {
    std::vector<std::size_t> active;
    for (std::size_t b = 0; b < batch; ++b) {
      if (value[b] > tol_sq) active.push_back(b);
    }
    if (!active.empty()) {
      std::vector<Rotations<double>> sub_locals;
      std::vector<Positions<double>> sub_targets;
      for (auto b : active) {
        sub_locals.push_back(locals[b]);
        sub_targets.push_back(targets[b]);
      }
      const auto grad = fk_gradient(tree, sub_locals, sub_targets);
      const auto na = static_cast<Eigen::Index>(active.size());
      for (Eigen::Index a = 0; a < na; ++a) {
        const auto b = active[static_cast<std::size_t>(a)];
        Eigen::VectorXd g(3 * n);
        for (int i = 0; i < n; ++i) g.segment<3>(3 * i) = grad.row(i * na + a).transpose();
        if (g.squaredNorm() == 0.0) continue;
        if (last_step[b].size() != 0) {
          // Barzilai-Borwein trial step from the last accepted move.
          const double sy = last_step[b].dot(g - last_grad[b]);
          if (sy > 0.0) step[b] = last_step[b].squaredNorm() / sy;
        }
        for (int attempt = 0; attempt < kMaxHalvings; ++attempt) {
          Rotations<double> trial = locals[b];
          for (int i = 0; i < n; ++i) {
            const Vec3<double> d = -step[b] * g.segment<3>(3 * i);
            trial[static_cast<std::size_t>(i)] = trial[static_cast<std::size_t>(i)] * exp_so3<double>(d);
          }
          const double v = mean_sq_error(tree, trial, targets[b]);
          if (v < value[b]) {
            locals[b] = std::move(trial);
            value[b] = v;
            last_step[b] = -step[b] * g;
            last_grad[b] = g;
            step[b] *= 1.5;
            break;
          }
          step[b] *= 0.5;
        }
      }
    }
    recorder.maybe_record(it, locals);
  }
  return recorder.take();
}

namespace {

Mat3<double> shortest_arc(const Vec3<double>& from, const Vec3<double>& to) {
  const Vec3<double> u = from.normalized();
  const Vec3<double> v = to.normalized();
  const Vec3<double> axis = u.cross(v);
  const double s = axis.norm();
  const double c = u.dot(v);
  if (s < 1e-15) {
    if (c > 0.0) return Mat3<double>::Identity();
    // Antiparallel: half turn about any axis orthogonal to u.
    Vec3<double> ortho = u.cross(Vec3<double>::UnitX());
    if (ortho.norm() < 1e-6) ortho = u.cross(Vec3<double>::UnitY());
    return axis_angle_to_matrix<double>(ortho.normalized(), std::numbers::pi);
  }
  return axis_angle_to_matrix<double>(axis / s, std::atan2(s, c));
}

/// Rotation R maximizing sum_k b_k . (R a_k).
Mat3<double> procrustes(const std::vector<Vec3<double>>& a, const std::vector<Vec3<double>>& b) {
  Mat3<double> h = Mat3<double>::Zero();
  for (std::size_t k = 0; k < a.size(); ++k) h += a[k] * b[k].transpose();
  Eigen::JacobiSVD<Mat3<double>> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  if (!(s(0) > 0.0)) return Mat3<double>::Identity();
  if (s(1) <= 1e-9 * s(0)) {
    // Rank one: the rotation about the point direction is unconstrained, so
    // take the smallest rotation that aligns the dominant directions.
    return shortest_arc(svd.matrixU().col(0), svd.matrixV().col(0));
  }
  Mat3<double> d = Mat3<double>::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  return svd.matrixV() * d * svd.matrixU().transpose();
}

std::vector<std::vector<int>> descendant_lists(const KinematicTree& tree) {
  const int n = tree.size();
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  for (int i = n - 1; i > 0; --i) {
    for (int k = tree.parent(i); k >= 0; k = tree.parent(k)) out[static_cast<std::size_t>(k)].push_back(i);
  }
  return out;
}

}  // namespace

SolveTrace ccd_ik(const KinematicTree& tree, const std::vector<Positions<double>>& targets, const SolveConfig& config,
                  const std::vector<Rotations<double>>& init) {
  config.validate();
  check_inputs(tree, targets, init);
  const int n = tree.size();
  const auto desc = descendant_lists(tree);
  std::vector<Rotations<double>> locals = init;
  const double tol_sq = config.tolerance * config.tolerance;
  TraceRecorder recorder(tree, targets, config);

  for (int it = 1; it <= config.iterations(); ++it) {
    for (std::size_t f = 0; f < locals.size(); ++f) {
      auto& loc = locals[f];
      const auto& tgt = targets[f];
      if (mean_sq_error(tree, loc, tgt) <= tol_sq) continue;
      for (int i = n - 1; i >= 0; --i) {
        const auto& d = desc[static_cast<std::size_t>(i)];
        if (d.empty()) continue;
        const auto state = fk<double>(tree, loc);
        const Vec3<double> pivot = state.positions[static_cast<std::size_t>(i)];
        std::vector<Vec3<double>> a;
        std::vector<Vec3<double>> b;
        double before = 0.0;
        for (int k : d) {
          a.push_back(state.positions[static_cast<std::size_t>(k)] - pivot);
          b.push_back(tgt[static_cast<std::size_t>(k)] - pivot);
          before += (a.back() - b.back()).squaredNorm();
        }
        Mat3<double> r = procrustes(a, b);
        const auto aa = matrix_to_axis_angle<double>(r);
        if (aa.angle == 0.0) continue;
        if (aa.angle > config.ccd_max_angle) r = axis_angle_to_matrix<double>(aa.axis, config.ccd_max_angle);
        double after = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) after += (r * a[k] - b[k]).squaredNorm();
        if (!(after < before)) continue;
        // World update R W_i expressed in the parent frame.
        const auto iu = static_cast<std::size_t>(i);
        if (i == 0) {
          loc[iu] = r * loc[iu];
        } else {
          const Mat3<double>& wp = state.world[static_cast<std::size_t>(tree.parent(i))];
          loc[iu] = wp.transpose() * r * wp * loc[iu];
        }
      }
    }
    recorder.maybe_record(it, locals);
  }
  return recorder.take();
}

std::vector<SweepRow> budget_sweep(const std::string& solver, const PairedFrames& data, const KinematicTree& tree,
                                   const RestBoneFrames& frames, const SolveConfig& config,
                                   const Predictor* amortized) {
  if (data.size() == 0) throw ValidationError("budget_sweep: empty dataset");
  const std::vector<Rotations<double>> init(
      data.size(), Rotations<double>(static_cast<std::size_t>(tree.size()), Mat3<double>::Identity()));
  SolveTrace trace;
  if (solver == "grad") {
    trace = gradient_ik(tree, data.positions, config, init);
  } else if (solver == "ccd") {
    trace = ccd_ik(tree, data.positions, config, init);
  } else {
    throw ValidationError("unknown solver '" + solver + "' (expected grad or ccd)");
  }
  auto score = [&](const std::vector<Rotations<double>>& locals) {
    std::vector<double> ang;
    std::vector<double> pos;
    for (std::size_t f = 0; f < data.size(); ++f) {
      ang.push_back(mpjae_locals(locals[f], data.local[f]));
      pos.push_back(mpjpe(fk<double>(tree, locals[f]).positions, data.positions[f]));
    }
    return std::pair{stable_mean(std::move(ang)), stable_mean(std::move(pos))};
  };
  std::vector<SweepRow> rows;
  for (std::size_t c = 0; c < trace.iterations.size(); ++c) {
    const auto [a, p] = score(trace.locals[c]);
    rows.push_back({solver, trace.iterations[c], a, p});
  }
  if (amortized) {
    const auto rest = frames.cast<double>();
    const auto bone = (*amortized)(data.positions);
    std::vector<Rotations<double>> locals;
    for (const auto& fb : bone) locals.push_back(locals_from_bone<double>(fb, rest, tree));
    const auto [a, p] = score(locals);
    rows.push_back({"amortized", 1, a, p});
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "solver,iteration,mpjae_deg,mpjpe_mm\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%.9g,%.9g\n", r.solver.c_str(), r.iteration, r.mpjae_deg, r.mpjpe_mm);
    out += buf;
  }
  return out;
}

}  // namespace boneik
