#include "boneik/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "boneik/error.hpp"

namespace boneik {

std::vector<double> local_angle_errors(const Rotations<double>& pred_bone, const Rotations<double>& gt_bone,
                                       const KinematicTree& tree, const Rotations<double>& rest) {
  const auto pl = locals_from_bone<double>(pred_bone, rest, tree);
  const auto gl = locals_from_bone<double>(gt_bone, rest, tree);
  std::vector<double> out(pl.size());
  for (std::size_t i = 0; i < pl.size(); ++i) out[i] = geodesic<double>(pl[i], gl[i]);
  return out;
}

double mpjae(const Rotations<double>& pred_bone, const Rotations<double>& gt_bone, const KinematicTree& tree,
             const Rotations<double>& rest) {
  const auto e = local_angle_errors(pred_bone, gt_bone, tree, rest);
  double sum = 0.0;
  for (double v : e) sum += v;
  return rad_to_deg(sum / static_cast<double>(e.size()));
}

double mpjae_locals(const Rotations<double>& pred_local, const Rotations<double>& gt_local) {
  double sum = 0.0;
  for (std::size_t i = 0; i < pred_local.size(); ++i) sum += geodesic<double>(pred_local[i], gt_local[i]);
  return rad_to_deg(sum / static_cast<double>(pred_local.size()));
}

double mpjpe(const Positions<double>& pred, const Positions<double>& gt) {
  if (pred.size() != gt.size() || pred.empty()) throw ShapeError("mpjpe: joint count mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += (pred[i] - gt[i]).norm();
  return 1000.0 * sum / static_cast<double>(pred.size());
}

double rms_error(const Positions<double>& pred, const Positions<double>& gt) {
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += (pred[i] - gt[i]).squaredNorm();
  return std::sqrt(sum / static_cast<double>(pred.size()));
}

SimilarityTransform umeyama_align(const Positions<double>& pred, const Positions<double>& gt) {
  if (pred.size() != gt.size()) throw ShapeError("umeyama_align: joint count mismatch");
  if (pred.size() < 3) throw DegenerateInputError("umeyama_align: need at least 3 joints");
  const double n = static_cast<double>(pred.size());
  Vec3<double> mu_p = Vec3<double>::Zero();
  Vec3<double> mu_g = Vec3<double>::Zero();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mu_p += pred[i];
    mu_g += gt[i];
  }
  mu_p /= n;
  mu_g /= n;
  double var_p = 0.0;
  double var_g = 0.0;
  Mat3<double> cov = Mat3<double>::Zero();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Vec3<double> dp = pred[i] - mu_p;
    const Vec3<double> dg = gt[i] - mu_g;
    var_p += dp.squaredNorm();
    var_g += dg.squaredNorm();
    cov += dg * dp.transpose();
  }
  var_p /= n;
  var_g /= n;
  cov /= n;
  if (!(var_g > 0.0)) throw DegenerateInputError("umeyama_align: ground-truth points are coincident");
  if (!(var_p > 0.0)) throw DegenerateInputError("umeyama_align: predicted points are coincident");

  Eigen::JacobiSVD<Mat3<double>> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3<double> s = Vec3<double>::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s(2) = -1.0;
  SimilarityTransform t;
  t.rotation = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  t.scale = svd.singularValues().dot(s) / var_p;
  t.translation = mu_g - t.scale * (t.rotation * mu_p);
  return t;
}

namespace {

Positions<double> aligned(const Positions<double>& pred, const Positions<double>& gt) {
  const auto t = umeyama_align(pred, gt);
  Positions<double> out(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) out[i] = t.apply(pred[i]);
  return out;
}

}  // namespace

double p_mpjpe(const Positions<double>& pred, const Positions<double>& gt) { return mpjpe(aligned(pred, gt), gt); }

double p_rms_error(const Positions<double>& pred, const Positions<double>& gt) {
  return rms_error(aligned(pred, gt), gt);
}

SwingTwist swing_twist_report(const Rotations<double>& pred_bone, const Rotations<double>& gt_bone) {
  SwingTwist r;
  r.swing_deg.resize(pred_bone.size());
  r.twist_deg.resize(pred_bone.size());
  double ss = 0.0;
  double st = 0.0;
  for (std::size_t i = 0; i < pred_bone.size(); ++i) {
    const auto [sw, tw] = axis_errors<double>(pred_bone[i], gt_bone[i]);
    r.swing_deg[i] = rad_to_deg(sw);
    r.twist_deg[i] = rad_to_deg(tw);
    ss += r.swing_deg[i];
    st += r.twist_deg[i];
  }
  r.mean_swing_deg = ss / static_cast<double>(pred_bone.size());
  r.mean_twist_deg = st / static_cast<double>(pred_bone.size());
  return r;
}

FrameMetrics frame_metrics(const Rotations<double>& pred_bone, const Rotations<double>& gt_bone,
                           const Positions<double>& pred_pos, const Positions<double>& gt_pos,
                           const KinematicTree& tree, const Rotations<double>& rest) {
  FrameMetrics m;
  const auto ang = local_angle_errors(pred_bone, gt_bone, tree, rest);
  const auto st = swing_twist_report(pred_bone, gt_bone);
  m.per_joint.resize(ang.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < ang.size(); ++i) {
    m.per_joint[i] = {rad_to_deg(ang[i]), st.swing_deg[i], st.twist_deg[i]};
    sum += ang[i];
  }
  m.mpjae_deg = rad_to_deg(sum / static_cast<double>(ang.size()));
  m.swing_deg = st.mean_swing_deg;
  m.twist_deg = st.mean_twist_deg;
  m.mpjpe_mm = mpjpe(pred_pos, gt_pos);
  m.p_mpjpe_mm = p_mpjpe(pred_pos, gt_pos);
  return m;
}

double stable_mean(std::vector<double> values) {
  if (values.empty()) throw ValidationError("stable_mean: empty input");
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

EvalReport aggregate(const std::vector<FrameMetrics>& frames) {
  if (frames.empty()) throw ValidationError("aggregate: no frames");
  EvalReport r;
  r.frame_count = static_cast<long>(frames.size());
  auto collect = [&](auto getter) {
    std::vector<double> v;
    v.reserve(frames.size());
    for (const auto& f : frames) v.push_back(getter(f));
    return stable_mean(std::move(v));
  };
  r.mpjae_deg = collect([](const FrameMetrics& f) { return f.mpjae_deg; });
  r.swing_deg = collect([](const FrameMetrics& f) { return f.swing_deg; });
  r.twist_deg = collect([](const FrameMetrics& f) { return f.twist_deg; });
  r.mpjpe_mm = collect([](const FrameMetrics& f) { return f.mpjpe_mm; });
  r.p_mpjpe_mm = collect([](const FrameMetrics& f) { return f.p_mpjpe_mm; });
  const std::size_t nj = frames.front().per_joint.size();
  r.per_joint.resize(nj);
  for (std::size_t j = 0; j < nj; ++j) {
    r.per_joint[j].mpjae_deg = collect([j](const FrameMetrics& f) { return f.per_joint[j].mpjae_deg; });
    r.per_joint[j].swing_deg = collect([j](const FrameMetrics& f) { return f.per_joint[j].swing_deg; });
    r.per_joint[j].twist_deg = collect([j](const FrameMetrics& f) { return f.per_joint[j].twist_deg; });
  }
  return r;
}

std::string report_to_json(const EvalReport& report, const KinematicTree& tree) {
  nlohmann::ordered_json j;
  j["frame_count"] = report.frame_count;
  j["mpjae_deg"] = report.mpjae_deg;
  j["swing_deg"] = report.swing_deg;
  j["twist_deg"] = report.twist_deg;
  j["mpjpe_mm"] = report.mpjpe_mm;
  j["p_mpjpe_mm"] = report.p_mpjpe_mm;
  auto& pj = j["per_joint"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < report.per_joint.size(); ++i) {
    nlohmann::ordered_json row;
    row["joint"] = tree.names[i];
    row["mpjae"] = report.per_joint[i].mpjae_deg;
    row["swing"] = report.per_joint[i].swing_deg;
    row["twist"] = report.per_joint[i].twist_deg;
    pj.push_back(std::move(row));
  }
  return j.dump(2) + "\n";
}

std::string per_joint_csv(const EvalReport& report, const KinematicTree& tree) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "joint,mpjae,swing,twist\n";
  for (std::size_t i = 0; i < report.per_joint.size(); ++i) {
    const auto& e = report.per_joint[i];
    os << tree.names[i] << ',' << e.mpjae_deg << ',' << e.swing_deg << ',' << e.twist_deg << '\n';
  }
  return os.str();
}

}  // namespace boneik
