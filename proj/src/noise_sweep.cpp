#include "boneik/noise_sweep.hpp"

#include <cstdio>

#include "boneik/dataio.hpp"

namespace boneik {

std::vector<NoiseSweepRow> noise_sweep(const Predictor& predict, const PairedFrames& data, const KinematicTree& tree,
                                       const RestBoneFrames& frames, const std::vector<double>& sigmas,
                                       std::uint64_t seed, bool recenter) {
  std::vector<NoiseSweepRow> rows;
  rows.reserve(sigmas.size());
  for (double sigma : sigmas) {
    const auto noisy = inject_noise(data.positions, sigma, seed, recenter);
    rows.push_back({sigma, evaluate(predict, data, tree, frames, &noisy)});
  }
  return rows;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string noise_sweep_csv(const std::vector<NoiseSweepRow>& rows) {
  std::string out = "sigma_mm,mpjae,mpjpe,p_mpjpe,swing,twist\n";
  for (const auto& r : rows) {
    const auto& e = r.report;
    out += fmt(r.sigma_mm) + ',' + fmt(e.mpjae_deg) + ',' + fmt(e.mpjpe_mm) + ',' + fmt(e.p_mpjpe_mm) + ',' +
           fmt(e.swing_deg) + ',' + fmt(e.twist_deg) + '\n';
  }
  return out;
}

std::string noise_grid_csv(const std::vector<NoiseSweepRow>& rows, const KinematicTree& tree, GridMetric metric) {
  std::string out = "joint";
  for (const auto& r : rows) out += ",sigma_" + fmt(r.sigma_mm);
  out += '\n';
  for (int j = 0; j < tree.size(); ++j) {
    out += tree.names[static_cast<std::size_t>(j)];
    for (const auto& r : rows) {
      const auto& e = r.report.per_joint[static_cast<std::size_t>(j)];
      out += ',' + fmt(metric == GridMetric::swing ? e.swing_deg : e.twist_deg);
    }
    out += '\n';
  }
  return out;
}

}  // namespace boneik
