// Acceptance checks 1-9. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "../primitive_cases.hpp"
#include "../test_support.hpp"
#include "boneik/grad_check.hpp"
#include "boneik/noise_sweep.hpp"
#include "boneik/solvers.hpp"
#include "boneik/train.hpp"

using namespace boneik;
using boneik::testing::data_path;
using boneik::testing::nelder_mead;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s %d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Round trip

void criterion1() {
  const auto tree = smpl22_rig();
  const auto frames = compute_rest_bone_frames(tree);
  std::mt19937_64 rng(1);
  std::vector<Rotations<double>> data;
  for (int f = 0; f < 10000; ++f) {
    Rotations<double> l;
    for (int i = 0; i < tree.size(); ++i) l.push_back(random_rotation<double>(rng, std::numbers::pi));
    data.push_back(std::move(l));
  }
  const auto t0 = Clock::now();
  const auto s = roundtrip_report<float>(tree, frames, data);
  const auto d = roundtrip_report<double>(tree, frames, data);
  const double secs = seconds_since(t0);
  const bool pass = s.max_frobenius <= 5e-5 && s.mean_frobenius <= 2e-5 && d.max_frobenius <= 1e-12 && secs < 10.0;
  report(1, "round trip", pass,
         fmt("float32 max %.3g mean %.3g, float64 max %.3g, %.2f s", s.max_frobenius, s.mean_frobenius,
             d.max_frobenius, secs));
}

// ---------------------------------------------------------------------------
// 2. 6D head validity

void criterion2() {
  constexpr Eigen::Index kCount = 100000;
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n01;
  ad::Matrix<float> six(kCount, 6);
  for (Eigen::Index i = 0; i < six.size(); ++i) six.data()[i] = n01(rng);
  ad::Tape<float> tape(false);
  const auto out = rot6d_to_matrix(tape, ad::Tensor<float>::constant(six)).value();
  double worst_orth = 0.0;
  double worst_det = 0.0;
  bool finite = true;
  for (Eigen::Index r = 0; r < kCount; ++r) {
    const Eigen::Map<const Eigen::Matrix3f> m(out.row(r).data());
    const Eigen::Matrix3f e = m.transpose() * m - Eigen::Matrix3f::Identity();
    // Induced infinity norm: largest absolute row sum.
    worst_orth = std::max(worst_orth, static_cast<double>(e.cwiseAbs().rowwise().sum().maxCoeff()));
    worst_det = std::max(worst_det, std::abs(static_cast<double>(m.determinant()) - 1.0));
    finite = finite && m.allFinite();
  }
  const bool pass = finite && worst_orth < 1e-5 && worst_det <= 1e-5;
  report(2, "SO(3) head validity", pass,
         fmt("%ld float32 samples, max ||R^T R - I||_inf %.3g, max |det - 1| %.3g", static_cast<long>(kCount),
             worst_orth, worst_det));
}

// ---------------------------------------------------------------------------
// 3. Gradient correctness

void criterion3() {
  const auto tree = testing::fixture_rig("chain5");
  auto cfg = preset_config("tiny");
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.dropout = 0.0;
  cfg.alpha = 0.1;
  Model<double> model(init_params<double>(cfg, tree, 3), tree);
  const auto rest = compute_rest_bone_frames(tree).cast<double>();
  std::mt19937_64 rng(5);
  std::vector<Positions<double>> pos;
  std::vector<Rotations<double>> bone;
  for (int b = 0; b < 2; ++b) {
    const auto pose = make_pose<double>(tree, rest, testing::random_locals(tree.size(), rng, 1.0));
    pos.push_back(pose.positions);
    bone.push_back(pose.bone);
  }
  const auto x = ad::Tensor<double>::constant(model.pack_positions(pos));
  const auto gt = ad::Tensor<double>::constant(pack_rotations<double>(bone));
  std::vector<ad::Tensor<double>> inputs;
  for (const auto& t : model.params().tensors) inputs.push_back(t.tensor);
  const auto full = ad::grad_check<double>(
      [&](ad::Tape<double>& tape, const std::vector<ad::Tensor<double>>&) {
        return model.loss(tape, model.forward(tape, x, false), gt, x).total;
      },
      inputs, 1e-5, 1e-3);

  double worst_primitive = 0.0;
  std::string worst_name;
  bool primitives_ok = true;
  const auto cases = testing::primitive_cases();
  for (const auto& c : cases) {
    const auto r = ad::grad_check<double>(c.fn, c.inputs, 1e-5, 1e-5);
    primitives_ok = primitives_ok && r.passed;
    if (r.max_rel_error >= worst_primitive) {
      worst_primitive = r.max_rel_error;
      worst_name = c.name;
    }
  }
  report(3, "gradient correctness", full.passed && primitives_ok,
         fmt("full loss max rel %.3g over %zu parameters; %zu primitives, worst %.3g (%s)", full.max_rel_error,
             model.params().parameter_count(), cases.size(), worst_primitive, worst_name.c_str()));
}

// ---------------------------------------------------------------------------
// 4. Metric axioms

void criterion4() {
  std::mt19937_64 rng(4);
  int geo_violations = 0;
  for (int k = 0; k < 10000; ++k) {
    const auto a = random_rotation<double>(rng, std::numbers::pi);
    const auto b = random_rotation<double>(rng, std::numbers::pi);
    const auto c = random_rotation<double>(rng, std::numbers::pi);
    const double ab = geodesic<double>(a, b);
    if (std::abs(ab - geodesic<double>(b, a)) > 1e-9) ++geo_violations;
    if (geodesic<double>(a, a) > 1e-9) ++geo_violations;
    if (ab > geodesic<double>(a, c) + geodesic<double>(c, b) + 1e-9) ++geo_violations;
  }

  std::normal_distribution<double> n01;
  auto cloud = [&](int n) {
    Positions<double> p;
    for (int i = 0; i < n; ++i) p.emplace_back(0.3 * n01(rng), 0.3 * n01(rng), 0.3 * n01(rng));
    return p;
  };
  std::uniform_real_distribution<double> scale(0.3, 3.0);
  double worst_invariance = 0.0;
  for (int k = 0; k < 200; ++k) {
    const auto gt = cloud(22);
    auto pred = gt;
    for (auto& p : pred) p += 0.02 * Vec3<double>(n01(rng), n01(rng), n01(rng));
    const double base = p_mpjpe(pred, gt);
    const double s = scale(rng);
    const auto q = random_rotation<double>(rng, std::numbers::pi);
    const Vec3<double> t(n01(rng), n01(rng), n01(rng));
    auto moved = pred;
    for (auto& p : moved) p = s * (q * p) + t;
    worst_invariance = std::max(worst_invariance, std::abs(p_mpjpe(moved, gt) - base));
  }

  // Derivative-free oracle: Nelder-Mead over (scale, rotation vector,
  // translation) from several starts, each polished by restarts.
  auto transform = [](const std::vector<double>& x) {
    SimilarityTransform t;
    t.scale = x[0];
    t.rotation = exp_so3<double>(Vec3<double>(x[1], x[2], x[3]));
    t.translation = Vec3<double>(x[4], x[5], x[6]);
    return t;
  };
  double worst_mm = 0.0;
  std::uniform_real_distribution<double> ball(-2.5, 2.5);
  for (int k = 0; k < 100; ++k) {
    const auto gt = cloud(12);
    const auto q = random_rotation<double>(rng, std::numbers::pi);
    Positions<double> pred;
    for (const auto& p : gt) {
      pred.push_back(0.7 * (q * p) + Vec3<double>(0.1, -0.2, 0.3) + 0.03 * Vec3<double>(n01(rng), n01(rng), n01(rng)));
    }
    const auto objective = [&](const std::vector<double>& x) {
      const auto t = transform(x);
      double e = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i) e += (t.apply(pred[i]) - gt[i]).squaredNorm();
      return e;
    };
    std::vector<double> best_x;
    double best = std::numeric_limits<double>::infinity();
    for (int start = 0; start < 8; ++start) {
      std::vector<double> x{1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
      if (start > 0) x = {1.0, ball(rng), ball(rng), ball(rng), 0.0, 0.0, 0.0};
      double fx = objective(x);
      for (int restart = 0; restart < 60; ++restart) {
        const auto y = nelder_mead(objective, x, restart < 5 ? 0.5 : 0.01, 4000, 1e-24);
        const double fy = objective(y);
        const bool stalled = fx - fy < 1e-20;
        if (fy < fx) {
          fx = fy;
          x = y;
        }
        if (stalled && restart >= 5) break;
      }
      if (fx < best) {
        best = fx;
        best_x = x;
      }
    }
    const auto closed = umeyama_align(pred, gt);
    const auto oracle = transform(best_x);
    for (const auto& p : pred) worst_mm = std::max(worst_mm, 1000.0 * (closed.apply(p) - oracle.apply(p)).norm());
  }
  const bool pass = geo_violations == 0 && worst_invariance < 1e-6 && worst_mm < 1e-3;
  report(4, "metric axioms", pass,
         fmt("geodesic violations %d/10000, P-MPJPE invariance drift %.3g mm, Umeyama vs Nelder-Mead %.3g mm",
             geo_violations, worst_invariance, worst_mm));
}

// ---------------------------------------------------------------------------
// 5-7. Synthetic benchmark

// Fixture: 7000 frames (5000/1000/1000 contiguous), caps 2.0 rad, smoothing
// 0.8. All three models share the tiny preset and one training budget.
constexpr std::uint64_t kDataSeed = 11;
constexpr std::uint64_t kInitSeed = 1;
constexpr std::uint64_t kNoiseSeed = 7;

struct Benchmark {
  KinematicTree tree;
  RestBoneFrames frames;
  PairedFrames train;
  PairedFrames val;
  PairedFrames test;
};

Benchmark make_benchmark() {
  Benchmark b;
  b.tree = smpl22_rig();
  b.frames = compute_rest_bone_frames(b.tree);
  const auto data = generate_synthetic(b.tree, 7000, kDataSeed, uniform_caps(b.tree, 2.0), 0.8);
  const auto parts = split(data, 5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0);
  b.train = make_pairs(parts.train, b.tree, b.frames);
  b.val = make_pairs(parts.val, b.tree, b.frames);
  b.test = make_pairs(parts.test, b.tree, b.frames);
  return b;
}

TrainConfig benchmark_train_config() {
  TrainConfig tc;
  tc.batch_size = 16;
  tc.lr = 3e-3;
  tc.weight_decay = 0.01;
  tc.max_epochs = 30;
  tc.patience = 4;
  tc.seed = 1;
  return tc;
}

struct Trained {
  std::string label;
  ModelParams<float> params;
  EvalReport test;
  int epochs = 0;
  int best_epoch = 0;
  double seconds = 0.0;
};

Trained train_variant(const Benchmark& b, const std::string& label, Architecture arch, GraphMode graph) {
  auto cfg = preset_config("tiny");
  cfg.arch = arch;
  cfg.graph = graph;
  cfg.dropout = 0.0;
  const auto t0 = Clock::now();
  Model<float> model(init_params<float>(cfg, b.tree, kInitSeed), b.tree);
  const auto result = train(model, b.train, b.val, benchmark_train_config());
  Trained t;
  t.label = label;
  t.params = result.best;
  t.epochs = static_cast<int>(result.history.size());
  t.best_epoch = result.best_epoch;
  t.seconds = seconds_since(t0);
  Model<float> best(result.best, b.tree);
  t.test = evaluate(model_predictor(best), b.test, b.tree, b.frames);
  std::printf("  %-8s test MPJAE %.3f deg, MPJPE %.2f mm, best epoch %d/%d, %.0f s\n", label.c_str(),
              t.test.mpjae_deg, t.test.mpjpe_mm, t.best_epoch, t.epochs, t.seconds);
  std::fflush(stdout);
  return t;
}

void criterion5to7(const Benchmark& b) {
  const auto t0 = Clock::now();
  const auto gat = train_variant(b, "gat-bi", Architecture::gat, GraphMode::bidirectional);
  const auto mlp = train_variant(b, "mlp", Architecture::mlp, GraphMode::bidirectional);
  const auto uni = train_variant(b, "gat-uni", Architecture::gat, GraphMode::unidirectional);
  const double secs = seconds_since(t0);
  const bool order = gat.test.mpjae_deg < mlp.test.mpjae_deg && gat.test.mpjae_deg < uni.test.mpjae_deg;
  report(5, "architecture ordering", order && secs < 900.0,
         fmt("MPJAE gat-bi %.3f, mlp %.3f, gat-uni %.3f deg; training %.0f s (limit 900 s)", gat.test.mpjae_deg,
             mlp.test.mpjae_deg, uni.test.mpjae_deg, secs));

  // 6. Iteration budget.
  SolveConfig sc;
  sc.checkpoints = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 20, 50, 100, 200, 300};
  const std::vector<Rotations<double>> init(
      b.test.size(), Rotations<double>(static_cast<std::size_t>(b.tree.size()), Mat3<double>::Identity()));
  const auto trace = gradient_ik(b.tree, b.test.positions, sc, init);
  bool monotone = true;
  for (std::size_t k = 1; k < trace.residual.size(); ++k) {
    for (std::size_t f = 0; f < b.test.size(); ++f) monotone = monotone && trace.residual[k][f] <= trace.residual[k - 1][f];
  }
  std::vector<double> mpjpe_at(trace.iterations.size());
  for (std::size_t k = 0; k < trace.iterations.size(); ++k) {
    std::vector<double> e;
    for (std::size_t f = 0; f < b.test.size(); ++f) {
      e.push_back(mpjpe(fk<double>(b.tree, trace.locals[k][f]).positions, b.test.positions[f]));
    }
    mpjpe_at[k] = stable_mean(std::move(e));
  }
  int reached = -1;
  for (std::size_t k = 0; k < trace.iterations.size(); ++k) {
    if (mpjpe_at[k] <= gat.test.mpjpe_mm) {
      reached = trace.iterations[k];
      break;
    }
  }
  const double at10 = mpjpe_at[9];
  report(6, "iteration budget", monotone && at10 > gat.test.mpjpe_mm,
         fmt("GAT MPJPE %.2f mm; gradient_ik MPJPE %.2f mm at 10 it, %.2f mm at 300 it; first checkpoint reaching "
             "GAT: %s; residual monotone: %s",
             gat.test.mpjpe_mm, at10, mpjpe_at.back(), reached < 0 ? "none" : std::to_string(reached).c_str(),
             monotone ? "yes" : "no"));

  // 7. Noise sweep.
  Model<float> model(gat.params, b.tree);
  const auto predict = model_predictor(model);
  const auto rows = noise_sweep(predict, b.test, b.tree, b.frames, {0.0, 10.0, 40.0}, kNoiseSeed);
  const auto clean = evaluate(predict, b.test, b.tree, b.frames);
  const auto& z = rows[0].report;
  bool exact = z.mpjae_deg == clean.mpjae_deg && z.mpjpe_mm == clean.mpjpe_mm && z.p_mpjpe_mm == clean.p_mpjpe_mm &&
               z.swing_deg == clean.swing_deg && z.twist_deg == clean.twist_deg &&
               z.frame_count == clean.frame_count && z.per_joint.size() == clean.per_joint.size();
  for (std::size_t j = 0; exact && j < z.per_joint.size(); ++j) {
    exact = z.per_joint[j].mpjae_deg == clean.per_joint[j].mpjae_deg &&
            z.per_joint[j].swing_deg == clean.per_joint[j].swing_deg &&
            z.per_joint[j].twist_deg == clean.per_joint[j].twist_deg;
  }
  const double m0 = rows[0].report.mpjae_deg;
  const double m10 = rows[1].report.mpjae_deg;
  const double m40 = rows[2].report.mpjae_deg;
  report(7, "noise trend", m40 > m10 && m10 > m0 && exact,
         fmt("MPJAE sigma 0/10/40 mm: %.3f / %.3f / %.3f deg; sigma 0 equals clean evaluation bit-exactly: %s", m0,
             m10, m40, exact ? "yes" : "no"));
}

// ---------------------------------------------------------------------------
// 8. Determinism through the CLI

const std::filesystem::path& work_dir() {
  static const auto d = testing::scratch_dir("acceptance");
  return d;
}

std::string at(const std::string& name) { return (work_dir() / name).string(); }

bool run_cli(const std::string& args) {
  const std::string cmd = std::string(BONEIK_CLI) + " " + args + " > /dev/null 2> " + at("stderr.txt");
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) && WEXITSTATUS(status) == 0;
}

void criterion8() {
  const std::string rig = data_path("rigs/smpl22.json");
  write_text_file(at("cfg.json"), R"({"model": {"preset": "tiny", "dropout": 0.1},
  "train": {"max_epochs": 2, "batch_size": 32, "seed": 5}, "init_seed": 6})");
  std::vector<std::string> outputs;
  bool ran = true;
  for (const std::string run : {"a", "b"}) {
    ran = ran && run_cli("gen --rig " + rig + " --frames 600 --seed 21 --cap 1.5 --smooth 0.5 --out " + at(run + ".train.jsonl"));
    ran = ran && run_cli("gen --rig " + rig + " --frames 100 --seed 22 --cap 1.5 --smooth 0.5 --out " + at(run + ".val.jsonl"));
    ran = ran && run_cli("train --quiet --rig " + rig + " --train " + at(run + ".train.jsonl") + " --val " +
                         at(run + ".val.jsonl") + " --config " + at("cfg.json") + " --out " + at(run + ".ckpt"));
    ran = ran && run_cli("noise-sweep --rig " + rig + " --ckpt " + at(run + ".ckpt") + " --data " +
                         at(run + ".val.jsonl") + " --sigmas 0,10,40 --seed 23 --out " + at(run + ".noise.csv"));
  }
  int identical = 0;
  int compared = 0;
  std::string differing;
  if (ran) {
    for (const std::string suffix :
         {".train.jsonl", ".val.jsonl", ".ckpt", ".history.csv", ".noise.csv", ".noise.swing.csv", ".noise.twist.csv"}) {
      ++compared;
      if (read_text_file(at("a" + suffix)) == read_text_file(at("b" + suffix))) {
        ++identical;
      } else {
        differing += " " + suffix;
      }
    }
  }
  report(8, "determinism", ran && identical == compared,
         ran ? fmt("%d/%d output files byte-identical across two runs of gen, train, noise-sweep%s", identical, compared,
                   differing.empty() ? "" : (", differing:" + differing).c_str())
             : std::string("a CLI run failed: ") + read_text_file(at("stderr.txt")));
}

// ---------------------------------------------------------------------------
// 9. Format round trips

void criterion9() {
  const auto rig_text = write_rig(load_rig_file(data_path("rigs/smpl22.json")));
  const bool rig_ok = write_rig(load_rig(rig_text)) == rig_text;

  const auto tree = smpl22_rig();
  const auto motion = write_motion(generate_synthetic(tree, 200, 31, uniform_caps(tree, 2.0), 0.3));
  const bool motion_ok = write_motion(read_motion(motion)) == motion;

  auto cfg = preset_config("small");
  const auto ckpt = serialize_checkpoint(init_params<float>(cfg, tree, 32));
  const auto path = at("roundtrip.ckpt");
  save_checkpoint(deserialize_checkpoint(ckpt), path);
  const bool ckpt_ok = read_text_file(path) == ckpt && serialize_checkpoint(load_checkpoint(path)) == ckpt;

  report(9, "format round trips", rig_ok && motion_ok && ckpt_ok,
         fmt("rig JSON %s, motion JSONL %s, checkpoint %s", rig_ok ? "identical" : "differs",
             motion_ok ? "identical" : "differs", ckpt_ok ? "identical" : "differs"));
}

}  // namespace

int main() {
  criterion1();
  criterion2();
  criterion3();
  criterion4();
  const auto bench = make_benchmark();
  criterion5to7(bench);
  criterion8();
  criterion9();
  return failures == 0 ? 0 : 1;
}
