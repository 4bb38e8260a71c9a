#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "boneik/kinematics.hpp"
#include "boneik/rig.hpp"
#include "boneik/so3.hpp"

namespace boneik {

struct SimilarityTransform {
  double scale = 1.0;
  Mat3<double> rotation = Mat3<double>::Identity();
  Vec3<double> translation = Vec3<double>::Zero();

  Vec3<double> apply(const Vec3<double>& p) const { return scale * (rotation * p) + translation; }
};

struct JointError {
  double mpjae_deg = 0.0;
  double swing_deg = 0.0;
  double twist_deg = 0.0;
};

/// Metrics of a single frame. Position metrics are absent for rotation-only
/// evaluations.
struct FrameMetrics {
  double mpjae_deg = 0.0;
  double swing_deg = 0.0;
  double twist_deg = 0.0;
  double mpjpe_mm = 0.0;
  double p_mpjpe_mm = 0.0;
  std::vector<JointError> per_joint;
};

struct EvalReport {
  double mpjae_deg = 0.0;
  double swing_deg = 0.0;
  double twist_deg = 0.0;
  double mpjpe_mm = 0.0;
  double p_mpjpe_mm = 0.0;
  std::vector<JointError> per_joint;
  long frame_count = 0;
};

/// Per-joint geodesic (radians) between parent-relative locals recovered from
/// bone-aligned rotations.
std::vector<double> local_angle_errors(const Rotations<double>& pred_bone, const Rotations<double>& gt_bone,
                                       const KinematicTree& tree, const Rotations<double>& rest);

/// Mean per-joint angular error of one frame, degrees.
double mpjae(const Rotations<double>& pred_bone, const Rotations<double>& gt_bone, const KinematicTree& tree,
             const Rotations<double>& rest);

/// Mean geodesic between two sets of local rotations, degrees.
double mpjae_locals(const Rotations<double>& pred_local, const Rotations<double>& gt_local);

/// 1000 x mean Euclidean distance (meters in, millimeters out).
double mpjpe(const Positions<double>& pred, const Positions<double>& gt);

/// Least-squares similarity transform mapping `pred` onto `gt`.
SimilarityTransform umeyama_align(const Positions<double>& pred, const Positions<double>& gt);

/// MPJPE after per-frame similarity alignment of `pred` to `gt`.
double p_mpjpe(const Positions<double>& pred, const Positions<double>& gt);

/// Root-mean-square joint distance (meters); alignment never increases it.
double rms_error(const Positions<double>& pred, const Positions<double>& gt);
double p_rms_error(const Positions<double>& pred, const Positions<double>& gt);

struct SwingTwist {
  std::vector<double> swing_deg;
  std::vector<double> twist_deg;
  double mean_swing_deg = 0.0;
  double mean_twist_deg = 0.0;
};

SwingTwist swing_twist_report(const Rotations<double>& pred_bone, const Rotations<double>& gt_bone);

/// Complete metric set for one frame.
FrameMetrics frame_metrics(const Rotations<double>& pred_bone, const Rotations<double>& gt_bone,
                           const Positions<double>& pred_pos, const Positions<double>& gt_pos,
                           const KinematicTree& tree, const Rotations<double>& rest);

/// Means over frames. The sum over frames is evaluated in sorted order so the
/// report does not depend on frame order.
EvalReport aggregate(const std::vector<FrameMetrics>& frames);

/// Order-independent mean (sorted summation).
double stable_mean(std::vector<double> values);

std::string report_to_json(const EvalReport& report, const KinematicTree& tree);
std::string per_joint_csv(const EvalReport& report, const KinematicTree& tree);

}  // namespace boneik
