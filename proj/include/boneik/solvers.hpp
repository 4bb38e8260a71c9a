#pragma once

#include <string>
#include <vector>

#include "boneik/dataio.hpp"
#include "boneik/kinematics.hpp"
#include "boneik/rig.hpp"
#include "boneik/train.hpp"

namespace boneik {

inline const std::vector<int> kDefaultCheckpoints{1, 10, 50, 100, 200, 300};

struct SolveConfig {
  /// Iterations to run; 0 means the largest checkpoint.
  int max_iters = 0;
  /// A frame stops once its RMS joint residual falls below this (rig units).
  double tolerance = 1e-7;
  /// Initial gradient step for gradient_ik.
  double step = 1.0;
  /// Per-joint rotation limit per CCD sweep (radians).
  double ccd_max_angle = 0.5;
  std::vector<int> checkpoints = kDefaultCheckpoints;

  int iterations() const;
  void validate() const;
};

/// State of every frame at each checkpoint.
struct SolveTrace {
  std::vector<int> iterations;
  std::vector<std::vector<Rotations<double>>> locals;  // [checkpoint][frame]
  std::vector<std::vector<double>> residual;           // [checkpoint][frame], RMS joint distance
};

/// RMS distance between FK(locals) and `targets`.
double pose_residual(const KinematicTree& tree, const Rotations<double>& locals, const Positions<double>& targets);

/// First-order descent on the mean squared joint error over per-joint
/// rotation increments L_i <- L_i exp([d_i]x). Gradients come from the
/// autodiff engine through FK. Each frame starts from a Barzilai-Borwein
/// step (1.5x the last accepted step when the curvature estimate is not
/// positive) and halves it until the objective decreases.
SolveTrace gradient_ik(const KinematicTree& tree, const std::vector<Positions<double>>& targets,
                       const SolveConfig& config, const std::vector<Rotations<double>>& init);

/// Cyclic coordinate descent: each sweep visits joints from the leaves to the
/// root and rotates each joint to best align its descendants with their
/// targets (orthogonal Procrustes), capped at `ccd_max_angle`.
SolveTrace ccd_ik(const KinematicTree& tree, const std::vector<Positions<double>>& targets, const SolveConfig& config,
                  const std::vector<Rotations<double>>& init);

struct SweepRow {
  std::string solver;
  int iteration = 0;
  double mpjae_deg = 0.0;
  double mpjpe_mm = 0.0;
};

/// Runs `solver` ("grad" or "ccd") from the identity pose and scores every
/// checkpoint against the ground truth. With an amortized predictor a
/// single-pass row is appended.
std::vector<SweepRow> budget_sweep(const std::string& solver, const PairedFrames& data, const KinematicTree& tree,
                                   const RestBoneFrames& frames, const SolveConfig& config,
                                   const Predictor* amortized = nullptr);

/// solver,iteration,mpjae_deg,mpjpe_mm
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace boneik
