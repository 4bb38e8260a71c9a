#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "boneik/so3.hpp"

namespace boneik {

/// Static skeleton: joint names, parent indices in parent-first order, rest
/// offsets from the parent (meters) and the global up direction.
///
/// Instances returned by `make_tree` / `load_rig` are always validated.
struct KinematicTree {
  std::string name;
  std::vector<std::string> names;
  std::vector<int> parents;                 // parents[0] == -1
  std::vector<Vec3<double>> rest_offsets;   // rest_offsets[0] == 0
  Vec3<double> up = Vec3<double>::UnitY();

  int size() const { return static_cast<int>(parents.size()); }
  int parent(int i) const { return parents[static_cast<std::size_t>(i)]; }
  std::vector<int> children(int i) const;
  bool is_leaf(int i) const;
  /// Index of a joint by name, or -1.
  int index_of(std::string_view joint) const;
  /// Rest-pose joint positions with the root at the origin.
  std::vector<Vec3<double>> rest_positions() const;
  /// Depth of each joint (root = 0).
  std::vector<int> depths() const;
};

/// Validates invariants and throws TopologyError naming the offending joint.
void validate(const KinematicTree& tree);

/// Builds and validates a tree.
KinematicTree make_tree(std::string name, std::vector<std::string> names, std::vector<int> parents,
                        std::vector<Vec3<double>> offsets, Vec3<double> up);

/// Parses rig JSON: {"name", "up", "joints": [{"name", "parent", "offset"}]}.
KinematicTree load_rig(std::string_view text);
KinematicTree load_rig_file(const std::string& path);
std::string write_rig(const KinematicTree& tree);

/// Per-joint bone-aligned rest frames, column 0 along the rest bone.
struct RestBoneFrames {
  std::vector<Mat3<double>> frames;
  std::vector<std::optional<int>> primary_child;
  std::vector<std::pair<int, int>> edges;  // (s(i), t(i))
  std::vector<bool> fallback_used;

  int size() const { return static_cast<int>(frames.size()); }

  template <typename Scalar>
  std::vector<Mat3<Scalar>> cast() const {
    std::vector<Mat3<Scalar>> out;
    out.reserve(frames.size());
    for (const auto& f : frames) out.push_back(f.template cast<Scalar>());
    return out;
  }
};

/// Relative threshold on the rejected reference norm that triggers the fallback.
inline constexpr double kCollinearityThreshold = 1e-6;

/// Child most aligned with `up`; ties by longer bone, then lower index.
std::optional<int> select_primary_child(const KinematicTree& tree, int joint);

RestBoneFrames compute_rest_bone_frames(const KinematicTree& tree);

/// End effectors and their immediate parents, sorted ascending.
std::vector<int> distal_set(const KinematicTree& tree);

/// 22-joint SMPL-convention body rig (y up, meters).
KinematicTree smpl22_rig();

}  // namespace boneik
