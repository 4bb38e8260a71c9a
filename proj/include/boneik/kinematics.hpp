#pragma once

// Forward kinematics, the bone-aligned world representation and its exact
// inverse. Poses are flat per-frame sequences of 3x3 matrices.

#include <Eigen/Dense>

#include <algorithm>
#include <cassert>
#include <span>
#include <vector>

#include "boneik/rig.hpp"
#include "boneik/so3.hpp"

namespace boneik {

template <typename Scalar>
using Rotations = std::vector<Mat3<Scalar>>;
template <typename Scalar>
using Positions = std::vector<Vec3<Scalar>>;

/// Several views of one pose. Derived views are filled by `make_pose`.
template <typename Scalar>
struct FramePose {
  Rotations<Scalar> local;
  Rotations<Scalar> world;
  Rotations<Scalar> bone;
  Positions<Scalar> positions;  // root space, positions[0] == 0
  Vec3<Scalar> root_translation = Vec3<Scalar>::Zero();
};

template <typename Scalar>
struct FkResult {
  Rotations<Scalar> world;
  Positions<Scalar> positions;
};

/// World rotations by parent composition; root-space positions from parent
/// world rotations applied to rest offsets.
template <typename Scalar>
FkResult<Scalar> fk(const KinematicTree& tree, std::span<const Mat3<Scalar>> locals) {
  const int n = tree.size();
  assert(static_cast<int>(locals.size()) == n);
  FkResult<Scalar> out;
  out.world.resize(static_cast<std::size_t>(n));
  out.positions.resize(static_cast<std::size_t>(n));
  out.world[0] = locals[0];
  out.positions[0].setZero();
  for (int i = 1; i < n; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    const auto pu = static_cast<std::size_t>(tree.parent(i));
    out.world[iu] = out.world[pu] * locals[iu];
    out.positions[iu] =
        out.positions[pu] + out.world[pu] * tree.rest_offsets[iu].template cast<Scalar>();
  }
  return out;
}

template <typename Scalar>
FkResult<Scalar> fk(const KinematicTree& tree, const Rotations<Scalar>& locals) {
  return fk<Scalar>(tree, std::span<const Mat3<Scalar>>(locals));
}

/// Positions only, from world rotations.
template <typename Scalar>
Positions<Scalar> positions_from_world(const KinematicTree& tree, const Rotations<Scalar>& world) {
  Positions<Scalar> p(world.size(), Vec3<Scalar>::Zero());
  for (int i = 1; i < tree.size(); ++i) {
    const auto iu = static_cast<std::size_t>(i);
    const auto pu = static_cast<std::size_t>(tree.parent(i));
    p[iu] = p[pu] + world[pu] * tree.rest_offsets[iu].template cast<Scalar>();
  }
  return p;
}

/// R_bone(i) = R_w(i) * B_rest(i).
template <typename Scalar>
Rotations<Scalar> bone_from_world(const Rotations<Scalar>& world, const Rotations<Scalar>& rest) {
  Rotations<Scalar> out(world.size());
  for (std::size_t i = 0; i < world.size(); ++i) out[i] = world[i] * rest[i];
  return out;
}

/// R_w(i) = R_bone(i) * B_rest(i)^T.
template <typename Scalar>
Rotations<Scalar> recover_world(const Rotations<Scalar>& bone, const Rotations<Scalar>& rest) {
  Rotations<Scalar> out(bone.size());
  for (std::size_t i = 0; i < bone.size(); ++i) out[i] = bone[i] * rest[i].transpose();
  return out;
}

/// R_loc(0) = R_w(0); R_loc(i) = R_w(parent)^T R_w(i).
template <typename Scalar>
Rotations<Scalar> recover_local(const Rotations<Scalar>& world, const KinematicTree& tree) {
  Rotations<Scalar> out(world.size());
  out[0] = world[0];
  for (int i = 1; i < tree.size(); ++i) {
    const auto iu = static_cast<std::size_t>(i);
    out[iu] = world[static_cast<std::size_t>(tree.parent(i))].transpose() * world[iu];
  }
  return out;
}

/// Bone-aligned rotations straight to parent-relative locals.
template <typename Scalar>
Rotations<Scalar> locals_from_bone(const Rotations<Scalar>& bone, const Rotations<Scalar>& rest,
                                   const KinematicTree& tree) {
  return recover_local<Scalar>(recover_world<Scalar>(bone, rest), tree);
}

/// Fills every view of a pose from local rotations.
template <typename Scalar>
FramePose<Scalar> make_pose(const KinematicTree& tree, const Rotations<Scalar>& rest,
                            Rotations<Scalar> locals) {
  FramePose<Scalar> pose;
  auto f = fk<Scalar>(tree, locals);
  pose.local = std::move(locals);
  pose.world = std::move(f.world);
  pose.positions = std::move(f.positions);
  pose.bone = bone_from_world<Scalar>(pose.world, rest);
  return pose;
}

/// J(i) = J~(i) + t.
template <typename Scalar>
Positions<Scalar> apply_root_translation(const FramePose<Scalar>& pose, const Vec3<Scalar>& t) {
  Positions<Scalar> out(pose.positions);
  for (auto& p : out) p += t;
  return out;
}

struct RoundtripStats {
  double max_frobenius = 0.0;
  double mean_frobenius = 0.0;
};

/// Runs locals -> world -> bone -> world -> locals in `Scalar` and compares
/// against the double-precision inputs in Frobenius norm.
template <typename Scalar>
RoundtripStats roundtrip_report(const KinematicTree& tree, const RestBoneFrames& frames,
                                const std::vector<Rotations<double>>& dataset) {
  const auto rest = frames.cast<Scalar>();
  RoundtripStats st;
  double sum = 0.0;
  std::size_t count = 0;
  Rotations<Scalar> locals(static_cast<std::size_t>(tree.size()));
  for (const auto& frame : dataset) {
    for (std::size_t i = 0; i < frame.size(); ++i) locals[i] = frame[i].template cast<Scalar>();
    const auto world = fk<Scalar>(tree, locals).world;
    const auto bone = bone_from_world<Scalar>(world, rest);
    const auto rec = recover_local<Scalar>(recover_world<Scalar>(bone, rest), tree);
    for (std::size_t i = 0; i < frame.size(); ++i) {
      const double e = (rec[i].template cast<double>() - frame[i]).norm();
      st.max_frobenius = std::max(st.max_frobenius, e);
      sum += e;
      ++count;
    }
  }
  st.mean_frobenius = count ? sum / static_cast<double>(count) : 0.0;
  return st;
}

}  // namespace boneik
