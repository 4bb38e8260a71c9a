#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "boneik/train.hpp"

namespace boneik {

inline const std::vector<double> kDefaultSigmasMm{0.0, 2.5, 5.0, 10.0, 20.0, 40.0};

struct NoiseSweepRow {
  double sigma_mm = 0.0;
  EvalReport report;
};

/// Evaluates `predict` on `data` with inputs perturbed at each sigma. Metrics
/// compare against the clean data.
std::vector<NoiseSweepRow> noise_sweep(const Predictor& predict, const PairedFrames& data, const KinematicTree& tree,
                                       const RestBoneFrames& frames, const std::vector<double>& sigmas,
                                       std::uint64_t seed, bool recenter = true);

/// sigma_mm,mpjae,mpjpe,p_mpjpe,swing,twist
std::string noise_sweep_csv(const std::vector<NoiseSweepRow>& rows);

/// Joints x sigmas grid of per-joint swing or twist error (degrees).
enum class GridMetric { swing, twist };
std::string noise_grid_csv(const std::vector<NoiseSweepRow>& rows, const KinematicTree& tree, GridMetric metric);

}  // namespace boneik
