#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "boneik/kinematics.hpp"
#include "boneik/metrics.hpp"
#include "boneik/rig.hpp"
#include "boneik/so3.hpp"

namespace boneik {

/// One motion record: local rotations as (w, x, y, z) quaternions, exactly as
/// stored, with optional cached root-space positions.
struct MotionFrame {
  std::vector<Quat4<double>> q;
  std::optional<Positions<double>> p;
};

struct MotionDataset {
  std::string rig;
  int joint_count = 0;
  std::vector<MotionFrame> frames;

  std::size_t size() const { return frames.size(); }
  /// Normalized local rotation matrices of frame `f`.
  Rotations<double> locals(std::size_t f) const;
};

/// Quaternions must be unit length within this tolerance when read.
inline constexpr double kQuatNormTolerance = 1e-4;

std::string write_motion(const MotionDataset& data);
MotionDataset read_motion(std::string_view text);
void save_motion(const MotionDataset& data, const std::string& path);
MotionDataset load_motion(const std::string& path);

/// Root-space positions stream. Reads either a positions file
/// ({"format": "positions-xyz"}, frames {"p": ...}) or a motion file with
/// cached positions.
struct PositionsFile {
  std::string rig;
  int joint_count = 0;
  std::vector<Positions<double>> frames;
};

std::string write_positions(const PositionsFile& data);
PositionsFile read_positions(std::string_view text);
PositionsFile load_positions(const std::string& path);

/// Supervision pairs derived from a motion dataset.
struct PairedFrames {
  std::vector<Positions<double>> positions;  // root space
  std::vector<Rotations<double>> local;
  std::vector<Rotations<double>> bone;

  std::size_t size() const { return positions.size(); }
};

/// Runs FK on every frame; cached positions must agree within 1e-5.
PairedFrames make_pairs(const MotionDataset& data, const KinematicTree& tree, const RestBoneFrames& frames);

/// Per-joint angle caps in radians, each in (0, pi).
std::vector<double> uniform_caps(const KinematicTree& tree, double cap);
/// Caps file: a bare number, or {"default": x, "joints": {"name": x}}.
std::vector<double> parse_caps(std::string_view text, const KinematicTree& tree);

/// Random local rotations bounded by `caps`, optionally smoothed across frames
/// by v_t = s v_{t-1} + (1 - s) xi_t in rotation-vector space. Positions are
/// cached from FK.
MotionDataset generate_synthetic(const KinematicTree& tree, std::size_t frame_count, std::uint64_t seed,
                                 const std::vector<double>& caps, double smoothing = 0.0);

/// Adds N(0, (sigma/1000)^2) to every coordinate. The draws depend only on
/// (seed, frame index) and are scaled by sigma. With `recenter` the root row is
/// subtracted afterwards so it stays exactly zero.
std::vector<Positions<double>> inject_noise(const std::vector<Positions<double>>& positions, double sigma_mm,
                                            std::uint64_t seed, bool recenter = true);

struct SplitResult {
  MotionDataset train;
  MotionDataset val;
  MotionDataset test;
};

/// Contiguous blocks by default; `shuffle` permutes frames first.
SplitResult split(const MotionDataset& data, double train_fraction, double val_fraction, double test_fraction,
                  std::uint64_t seed = 0, bool shuffle = false);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace boneik
