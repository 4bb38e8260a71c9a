#include <doctest.h>

#include <algorithm>
#include <limits>
#include <numbers>
#include <random>

#include <json.hpp>

#include "boneik/metrics.hpp"
#include "test_support.hpp"

using namespace boneik;
using boneik::testing::fixture_rig;
using boneik::testing::nelder_mead;
using boneik::testing::random_locals;

namespace {

Positions<double> random_cloud(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> n01(0.0, 0.3);
  Positions<double> p;
  for (int i = 0; i < n; ++i) p.emplace_back(n01(rng), n01(rng), n01(rng));
  return p;
}

double sq_error(const SimilarityTransform& t, const Positions<double>& a, const Positions<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (t.apply(a[i]) - b[i]).squaredNorm();
  return s;
}

SimilarityTransform from_params(const std::vector<double>& x) {
  SimilarityTransform t;
  t.scale = x[0];
  t.rotation = exp_so3<double>(Vec3<double>(x[1], x[2], x[3]));
  t.translation = Vec3<double>(x[4], x[5], x[6]);
  return t;
}

}  // namespace

TEST_CASE("geodesic metric axioms") {
  std::mt19937_64 rng(1);
  int violations = 0;
  for (int k = 0; k < 10000; ++k) {
    const auto a = random_rotation<double>(rng, std::numbers::pi);
    const auto b = random_rotation<double>(rng, std::numbers::pi);
    const auto c = random_rotation<double>(rng, std::numbers::pi);
    const double ab = geodesic<double>(a, b);
    if (std::abs(ab - geodesic<double>(b, a)) > 1e-9) ++violations;
    if (geodesic<double>(a, a) > 1e-9) ++violations;
    if (ab > geodesic<double>(a, c) + geodesic<double>(c, b) + 1e-9) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("MPJAE") {
  const auto t = make_tree("pair", {"r", "c"}, {-1, 0}, {Vec3<double>::Zero(), Vec3<double>(1, 0, 0)},
                           Vec3<double>::UnitY());
  const auto rest = compute_rest_bone_frames(t).cast<double>();
  const Rotations<double> id(2, Mat3<double>::Identity());
  const auto gt = make_pose<double>(t, rest, id);
  CHECK(mpjae(gt.bone, gt.bone, t, rest) == 0.0);
  Rotations<double> off = id;
  off[1] = axis_angle_to_matrix<double>(Vec3<double>(0, 0, 1), deg_to_rad(10));
  const auto pred = make_pose<double>(t, rest, off);
  CHECK(mpjae(pred.bone, gt.bone, t, rest) == doctest::Approx(5.0).epsilon(1e-9));
  CHECK(mpjae_locals(off, id) == doctest::Approx(5.0).epsilon(1e-9));
}

TEST_CASE("position errors") {
  std::mt19937_64 rng(2);
  const auto gt = random_cloud(rng, 22);
  CHECK(mpjpe(gt, gt) == 0.0);
  CHECK(p_mpjpe(gt, gt) < 1e-9);
  auto shifted = gt;
  for (auto& p : shifted) p += Vec3<double>(0.01, 0, 0);
  CHECK(mpjpe(shifted, gt) == doctest::Approx(10.0));
}

TEST_CASE("P-MPJPE is invariant to similarity transforms of the prediction") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> scale(0.3, 3.0);
  std::normal_distribution<double> n01;
  for (int k = 0; k < 200; ++k) {
    const auto gt = random_cloud(rng, 22);
    auto pred = gt;
    for (auto& p : pred) p += 0.02 * Vec3<double>(n01(rng), n01(rng), n01(rng));
    const double base = p_mpjpe(pred, gt);
    const double s = scale(rng);
    const auto q = random_rotation<double>(rng, std::numbers::pi);
    const Vec3<double> c(n01(rng), n01(rng), n01(rng));
    auto moved = pred;
    for (auto& p : moved) p = s * (q * p) + c;
    CHECK(std::abs(p_mpjpe(moved, gt) - base) < 1e-6);
    auto exact = gt;
    for (auto& p : exact) p = 2.0 * (q * p) + c;
    CHECK(mpjpe(exact, gt) > 0.0);
    CHECK(p_mpjpe(exact, gt) < 1e-6);
    CHECK(p_rms_error(pred, gt) <= rms_error(pred, gt) + 1e-15);
  }
}

TEST_CASE("Umeyama alignment matches a derivative-free oracle") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01;
  double worst_mm = 0.0;
  for (int k = 0; k < 100; ++k) {
    const auto gt = random_cloud(rng, 12);
    const auto q = random_rotation<double>(rng, std::numbers::pi);
    Positions<double> pred;
    for (const auto& p : gt) pred.push_back(0.7 * (q * p) + Vec3<double>(0.1, -0.2, 0.3) + 0.03 * Vec3<double>(n01(rng), n01(rng), n01(rng)));

    const auto closed = umeyama_align(pred, gt);
    // Oracle: Nelder-Mead on (scale, rotation vector, translation) from several
    // starting rotations, each refined by restarts with a shrinking simplex.
    const auto objective = [&](const std::vector<double>& x) { return sq_error(from_params(x), pred, gt); };
    std::uniform_real_distribution<double> ball(-2.5, 2.5);
    std::vector<double> x;
    double best = std::numeric_limits<double>::infinity();
    for (int start = 0; start < 8; ++start) {
      std::vector<double> s{1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
      if (start > 0) s = {1.0, ball(rng), ball(rng), ball(rng), 0.0, 0.0, 0.0};
      double fs = objective(s);
      for (int restart = 0; restart < 60; ++restart) {
        const auto y = nelder_mead(objective, s, restart < 5 ? 0.5 : 0.01, 4000, 1e-24);
        const double fy = objective(y);
        const bool stalled = fs - fy < 1e-20;
        if (fy < fs) {
          fs = fy;
          s = y;
        }
        if (stalled && restart >= 5) break;
      }
      if (fs < best) {
        best = fs;
        x = s;
      }
    }
    const auto oracle = from_params(x);
    CHECK(sq_error(closed, pred, gt) <= best + 1e-12);
    for (const auto& p : pred) worst_mm = std::max(worst_mm, 1000.0 * (closed.apply(p) - oracle.apply(p)).norm());
  }
  MESSAGE("worst aligned-point disagreement " << worst_mm << " mm");
  CHECK(worst_mm < 1e-3);
}

TEST_CASE("swing and twist report") {
  const auto t = fixture_rig("smpl22");
  const auto rest = compute_rest_bone_frames(t).cast<double>();
  std::mt19937_64 rng(5);
  const auto gt = make_pose<double>(t, rest, random_locals(t.size(), rng, 1.0)).bone;
  const auto zero = swing_twist_report(gt, gt);
  CHECK(zero.mean_swing_deg == doctest::Approx(0.0));
  CHECK(zero.mean_twist_deg == doctest::Approx(0.0));
  auto pred = gt;
  pred[5] = gt[5] * axis_angle_to_matrix<double>(Vec3<double>::UnitX(), deg_to_rad(7));
  const auto r = swing_twist_report(pred, gt);
  CHECK(r.swing_deg[5] == doctest::Approx(0.0));
  CHECK(r.twist_deg[5] == doctest::Approx(7.0));
  CHECK(r.twist_deg[4] == doctest::Approx(0.0));
}

TEST_CASE("aggregation") {
  FrameMetrics a;
  a.mpjae_deg = 4.0;
  a.mpjpe_mm = 1.0;
  a.per_joint = {{4.0, 1.0, 2.0}};
  FrameMetrics b;
  b.mpjae_deg = 6.0;
  b.mpjpe_mm = 3.0;
  b.per_joint = {{6.0, 3.0, 4.0}};
  const auto one = aggregate({a});
  CHECK(one.mpjae_deg == 4.0);
  CHECK(one.per_joint[0].twist_deg == 2.0);
  const auto two = aggregate({a, b});
  CHECK(two.mpjae_deg == 5.0);
  CHECK(two.mpjpe_mm == 2.0);
  CHECK(two.frame_count == 2);

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 30.0);
  std::vector<FrameMetrics> frames(257);
  for (auto& f : frames) {
    f.mpjae_deg = u(rng);
    f.mpjpe_mm = u(rng);
    f.per_joint = {{u(rng), u(rng), u(rng)}, {u(rng), u(rng), u(rng)}};
  }
  const auto before = aggregate(frames);
  std::shuffle(frames.begin(), frames.end(), rng);
  const auto after = aggregate(frames);
  CHECK(before.mpjae_deg == after.mpjae_deg);
  CHECK(before.mpjpe_mm == after.mpjpe_mm);
  CHECK(before.per_joint[1].swing_deg == after.per_joint[1].swing_deg);
}

TEST_CASE("report serialization") {
  const auto t = fixture_rig("chain5");
  EvalReport r;
  r.mpjae_deg = 1.5;
  r.frame_count = 3;
  r.per_joint.resize(5);
  const auto j = nlohmann::json::parse(report_to_json(r, t));
  CHECK(j.at("mpjae_deg").get<double>() == 1.5);
  const auto csv = per_joint_csv(r, t);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
}
