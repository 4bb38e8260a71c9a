#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "boneik/kinematics.hpp"
#include "boneik/rig.hpp"
#include "boneik/so3.hpp"

namespace boneik::testing {

inline std::string data_path(const std::string& rel) { return std::string(BONEIK_DATA_DIR) + "/" + rel; }

inline KinematicTree fixture_rig(const std::string& name) { return load_rig_file(data_path("rigs/" + name + ".json")); }

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("boneik_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Rotations<double> random_locals(int n, std::mt19937_64& rng, double max_angle = 3.14159) {
  Rotations<double> out;
  for (int i = 0; i < n; ++i) out.push_back(random_rotation<double>(rng, max_angle));
  return out;
}

/// 0 -> 1 -> 2 planar arm along x with unit links.
inline KinematicTree two_link_arm() {
  return make_tree("arm2", {"shoulder", "elbow", "hand"}, {-1, 0, 1},
                   {Vec3<double>::Zero(), Vec3<double>(1, 0, 0), Vec3<double>(1, 0, 0)}, Vec3<double>::UnitY());
}

/// Nelder-Mead minimizer over R^d.
template <typename F>
std::vector<double> nelder_mead(F f, std::vector<double> x0, double scale, int max_iters, double ftol = 1e-16) {
  const std::size_t d = x0.size();
  std::vector<std::vector<double>> s(d + 1, x0);
  for (std::size_t i = 0; i < d; ++i) s[i + 1][i] += scale;
  std::vector<double> fs(d + 1);
  for (std::size_t i = 0; i <= d; ++i) fs[i] = f(s[i]);
  auto combine = [&](const std::vector<double>& a, const std::vector<double>& b, double t) {
    std::vector<double> r(d);
    for (std::size_t k = 0; k < d; ++k) r[k] = a[k] + t * (b[k] - a[k]);
    return r;
  };
  for (int it = 0; it < max_iters; ++it) {
    std::vector<std::size_t> idx(d + 1);
    for (std::size_t i = 0; i <= d; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return fs[a] < fs[b]; });
    std::vector<std::vector<double>> s2;
    std::vector<double> f2;
    for (auto i : idx) {
      s2.push_back(s[i]);
      f2.push_back(fs[i]);
    }
    s = std::move(s2);
    fs = std::move(f2);
    if (std::abs(fs[d] - fs[0]) < ftol) break;
    std::vector<double> c(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t k = 0; k < d; ++k) c[k] += s[i][k] / static_cast<double>(d);
    }
    const auto xr = combine(c, s[d], -1.0);
    const double fr = f(xr);
    if (fr < fs[0]) {
      const auto xe = combine(c, s[d], -2.0);
      const double fe = f(xe);
      if (fe < fr) {
        s[d] = xe;
        fs[d] = fe;
      } else {
        s[d] = xr;
        fs[d] = fr;
      }
    } else if (fr < fs[d - 1]) {
      s[d] = xr;
      fs[d] = fr;
    } else {
      const bool outside = fr < fs[d];
      const auto xc = outside ? combine(c, xr, 0.5) : combine(c, s[d], 0.5);
      const double fc = f(xc);
      if (fc < (outside ? fr : fs[d])) {
        s[d] = xc;
        fs[d] = fc;
      } else {
        for (std::size_t i = 1; i <= d; ++i) {
          s[i] = combine(s[0], s[i], 0.5);
          fs[i] = f(s[i]);
        }
      }
    }
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i <= d; ++i) {
    if (fs[i] < fs[best]) best = i;
  }
  return s[best];
}

}  // namespace boneik::testing
