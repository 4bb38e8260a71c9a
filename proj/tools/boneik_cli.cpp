// boneik: command-line front end for the IK pipeline.
//
// Exit codes: 0 success, 1 I/O failure, 2 validation or assertion failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "boneik/bench.hpp"
#include "boneik/dataio.hpp"
#include "boneik/error.hpp"
#include "boneik/kinematics.hpp"
#include "boneik/metrics.hpp"
#include "boneik/model.hpp"
#include "boneik/noise_sweep.hpp"
#include "boneik/rig.hpp"
#include "boneik/solvers.hpp"
#include "boneik/train.hpp"

namespace {

using namespace boneik;
using nlohmann::ordered_json;

/// Validation failure raised by a subcommand check (exit code 2).
class CheckFailed : public Error {
 public:
  using Error::Error;
};

std::string one_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << "error: " << kind << ": " << one_line(message) << "\n";
  return code;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct Loaded {
  KinematicTree tree;
  RestBoneFrames frames;
};

Loaded load(const std::string& rig_path) {
  Loaded l;
  l.tree = load_rig_file(rig_path);
  l.frames = compute_rest_bone_frames(l.tree);
  return l;
}

Model<float> load_model(const std::string& ckpt, const KinematicTree& tree) {
  auto params = load_checkpoint(ckpt);
  if (params.rig_name != tree.name) {
    throw ValidationError("checkpoint was trained on rig '" + params.rig_name + "', not '" + tree.name + "'");
  }
  return Model<float>(std::move(params), tree);
}

PairedFrames load_pairs(const std::string& path, const Loaded& rig) {
  const auto data = load_motion(path);
  if (data.rig != rig.tree.name) {
    throw ValidationError("dataset rig '" + data.rig + "' does not match rig '" + rig.tree.name + "'");
  }
  return make_pairs(data, rig.tree, rig.frames);
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("bad integer list entry '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("empty list");
  return out;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("bad number list entry '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("empty list");
  return out;
}

std::string sibling(const std::string& path, const std::string& suffix) {
  std::filesystem::path p(path);
  return p.replace_extension(suffix).string();
}

// ---------------------------------------------------------------------------

void cmd_rig_check(const std::string& path) {
  const auto rig = load(path);
  const auto& t = rig.tree;
  std::cout << "rig " << t.name << ": " << t.size() << " joints, up (" << fmt(t.up.x()) << ", " << fmt(t.up.y())
            << ", " << fmt(t.up.z()) << ")\n";
  std::cout << "joint,parent,primary_child,edge,fallback,orthonormality_error\n";
  std::vector<std::string> fallback;
  for (int i = 0; i < t.size(); ++i) {
    const auto iu = static_cast<std::size_t>(i);
    const auto& pc = rig.frames.primary_child[iu];
    const auto [s, e] = rig.frames.edges[iu];
    std::cout << t.names[iu] << ',' << (i == 0 ? "-" : t.names[static_cast<std::size_t>(t.parent(i))]) << ','
              << (pc ? t.names[static_cast<std::size_t>(*pc)] : "-") << ',' << t.names[static_cast<std::size_t>(s)]
              << "->" << t.names[static_cast<std::size_t>(e)] << ',' << (rig.frames.fallback_used[iu] ? "yes" : "no")
              << ',' << fmt(orthonormality_error<double>(rig.frames.frames[iu])) << '\n';
    if (rig.frames.fallback_used[iu]) fallback.push_back(t.names[iu]);
  }
  std::cout << "fallback joints:";
  if (fallback.empty()) std::cout << " none";
  for (const auto& f : fallback) std::cout << ' ' << f;
  std::cout << "\ndistal set:";
  for (int i : distal_set(t)) std::cout << ' ' << t.names[static_cast<std::size_t>(i)];
  std::cout << '\n';
}

struct GenArgs {
  std::string rig, caps_file, out;
  std::size_t frames = 1000;
  std::uint64_t seed = 0;
  double cap = 1.0;
  double smooth = 0.0;
};

void cmd_gen(const GenArgs& a) {
  const auto rig = load(a.rig);
  const auto caps = a.caps_file.empty() ? uniform_caps(rig.tree, a.cap) : parse_caps(read_text_file(a.caps_file), rig.tree);
  save_motion(generate_synthetic(rig.tree, a.frames, a.seed, caps, a.smooth), a.out);
}

struct TrainArgs {
  std::string rig, train, val, config, out;
  bool quiet = false;
};

void cmd_train(const TrainArgs& a) {
  const auto rig = load(a.rig);
  ModelConfig mc = preset_config("small");
  TrainConfig tc;
  std::uint64_t init_seed = 0;
  if (!a.config.empty()) {
    ordered_json j;
    try {
      j = ordered_json::parse(read_text_file(a.config));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("config: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
      if (key != "model" && key != "train" && key != "init_seed") {
        throw ValidationError("config: unknown field '" + key + "'");
      }
    }
    if (j.contains("model")) mc = model_config_from_json(j.at("model"));
    if (j.contains("train")) tc = train_config_from_json(j.at("train"));
    if (j.contains("init_seed")) init_seed = j.at("init_seed").get<std::uint64_t>();
  }
  mc.alpha = tc.alpha;
  const auto train_set = load_pairs(a.train, rig);
  const auto val_set = load_pairs(a.val, rig);
  Model<float> model(init_params<float>(mc, rig.tree, init_seed), rig.tree);
  const auto result = train(model, train_set, val_set, tc, [&](const HistoryRow& r) {
    if (!a.quiet) {
      std::cerr << "epoch " << r.epoch << " train_loss " << fmt(r.train_loss) << " val_mpjae " << fmt(r.val_mpjae)
                << "\n";
    }
  });
  save_checkpoint(result.best, a.out);
  write_text_file(sibling(a.out, ".history.csv"), history_csv(result.history));
}

struct EvalArgs {
  std::string rig, ckpt, data, report, per_joint;
};

void cmd_eval(const EvalArgs& a) {
  const auto rig = load(a.rig);
  const auto pairs = load_pairs(a.data, rig);
  EvalReport report;
  if (a.ckpt.empty()) {
    report = evaluate(rest_pose_predictor(rig.tree, rig.frames), pairs, rig.tree, rig.frames);
  } else {
    const auto model = load_model(a.ckpt, rig.tree);
    report = evaluate(model_predictor(model), pairs, rig.tree, rig.frames);
  }
  const auto json = report_to_json(report, rig.tree);
  if (a.report.empty()) {
    std::cout << json;
  } else {
    write_text_file(a.report, json);
  }
  if (!a.per_joint.empty()) write_text_file(a.per_joint, per_joint_csv(report, rig.tree));
}

struct RoundtripArgs {
  std::string rig;
  std::size_t frames = 10000;
  std::uint64_t seed = 0;
};

int cmd_roundtrip(const RoundtripArgs& a) {
  constexpr double kMaxAllowed = 5e-5;
  const auto rig = load(a.rig);
  std::mt19937_64 rng(a.seed);
  std::vector<Rotations<double>> poses(a.frames);
  for (auto& p : poses) {
    for (int i = 0; i < rig.tree.size(); ++i) p.push_back(random_rotation<double>(rng, std::numbers::pi));
  }
  const auto s = roundtrip_report<float>(rig.tree, rig.frames, poses);
  const auto d = roundtrip_report<double>(rig.tree, rig.frames, poses);
  std::cout << "frames " << a.frames << "\n";
  std::cout << "float32 max_frobenius " << fmt(s.max_frobenius) << " mean_frobenius " << fmt(s.mean_frobenius) << "\n";
  std::cout << "float64 max_frobenius " << fmt(d.max_frobenius) << " mean_frobenius " << fmt(d.mean_frobenius) << "\n";
  if (s.max_frobenius > kMaxAllowed) {
    return fail("check", "single-precision round-trip error " + fmt(s.max_frobenius) + " exceeds 5e-05", 2);
  }
  return 0;
}

struct SolveArgs {
  std::string rig, data, solver = "grad", checkpoints = "1,10,50,100,200,300", out, ckpt;
  double step = 1.0;
};

void cmd_solve(const SolveArgs& a) {
  const auto rig = load(a.rig);
  const auto pairs = load_pairs(a.data, rig);
  SolveConfig cfg;
  cfg.checkpoints = parse_int_list(a.checkpoints);
  cfg.step = a.step;
  std::vector<SweepRow> rows;
  if (a.ckpt.empty()) {
    rows = budget_sweep(a.solver, pairs, rig.tree, rig.frames, cfg);
  } else {
    const auto model = load_model(a.ckpt, rig.tree);
    const auto predictor = model_predictor(model);
    rows = budget_sweep(a.solver, pairs, rig.tree, rig.frames, cfg, &predictor);
  }
  write_text_file(a.out, sweep_csv(rows));
}

struct NoiseArgs {
  std::string rig, ckpt, data, sigmas = "0,2.5,5,10,20,40", out;
  std::uint64_t seed = 0;
  bool keep_root_noise = false;
};

void cmd_noise_sweep(const NoiseArgs& a) {
  const auto rig = load(a.rig);
  const auto pairs = load_pairs(a.data, rig);
  const auto model = load_model(a.ckpt, rig.tree);
  const auto rows = noise_sweep(model_predictor(model), pairs, rig.tree, rig.frames, parse_double_list(a.sigmas),
                                a.seed, !a.keep_root_noise);
  write_text_file(a.out, noise_sweep_csv(rows));
  write_text_file(sibling(a.out, ".swing.csv"), noise_grid_csv(rows, rig.tree, GridMetric::swing));
  write_text_file(sibling(a.out, ".twist.csv"), noise_grid_csv(rows, rig.tree, GridMetric::twist));
}

struct BenchArgs {
  std::string rig, ckpt, batches = "1,2,4,8,16,32,64", out;
  double min_duration = 1.0;
  std::uint64_t seed = 0;
};

void cmd_bench(const BenchArgs& a, int threads) {
  const auto rig = load(a.rig);
  const auto model = load_model(a.ckpt, rig.tree);
  const auto report = bench_inference(model, parse_int_list(a.batches), a.min_duration, a.seed, threads);
  write_text_file(a.out, bench_csv(report));
  std::cerr << "threads " << report.threads << " precision " << report.precision << "\n";
}

struct FlowArgs {
  std::string rig, ckpt, data, out;
};

void cmd_attn_flow(const FlowArgs& a) {
  const auto rig = load(a.rig);
  const auto pairs = load_pairs(a.data, rig);
  const auto model = load_model(a.ckpt, rig.tree);
  if (model.config().arch != Architecture::gat) throw ValidationError("attention flow needs a graph-attention model");
  const int n = rig.tree.size();
  const int heads = model.config().heads;
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(n, n);
  constexpr std::size_t kChunk = 256;
  for (std::size_t begin = 0; begin < pairs.size(); begin += kChunk) {
    const std::size_t end = std::min(pairs.size(), begin + kChunk);
    std::vector<Positions<double>> chunk(pairs.positions.begin() + static_cast<std::ptrdiff_t>(begin),
                                         pairs.positions.begin() + static_cast<std::ptrdiff_t>(end));
    ad::Tape<float> tape(false);
    const auto out = model.forward(tape, ad::Tensor<float>::constant(model.pack_positions(chunk)), false);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      std::vector<std::vector<Eigen::MatrixXd>> stack;
      for (const auto& layer : out.attention) {
        stack.push_back(frame_attention<float>(layer.value(), static_cast<Eigen::Index>(b), heads, n));
      }
      mean += attention_flow(stack);
    }
  }
  mean /= static_cast<double>(pairs.size());
  std::string csv = "target";
  for (const auto& name : rig.tree.names) csv += ',' + name;
  csv += '\n';
  for (int i = 0; i < n; ++i) {
    csv += rig.tree.names[static_cast<std::size_t>(i)];
    for (int j = 0; j < n; ++j) csv += ',' + fmt(mean(i, j));
    csv += '\n';
  }
  write_text_file(a.out, csv);
}

struct TransferArgs {
  std::string src, src_rig, dst_rig, map, out;
};

void cmd_transfer(const TransferArgs& a) {
  const auto src_tree = load_rig_file(a.src_rig);
  const auto dst_tree = load_rig_file(a.dst_rig);
  const auto params = load_checkpoint(a.src);
  std::vector<std::pair<std::string, std::string>> name_map;
  if (!a.map.empty()) {
    ordered_json j;
    try {
      j = ordered_json::parse(read_text_file(a.map));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("name map: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("name map must be an object of destination -> source names");
    for (const auto& [dst, src] : j.items()) {
      if (!src.is_string()) throw ValidationError("name map: value for '" + dst + "' must be a joint name");
      name_map.emplace_back(dst, src.get<std::string>());
    }
  } else {
    for (const auto& name : dst_tree.names) {
      if (src_tree.index_of(name) >= 0) name_map.emplace_back(name, name);
    }
  }
  save_checkpoint(transfer_embeddings(params, src_tree, dst_tree, name_map), a.out);
}

struct ConvertArgs {
  std::string rig, ckpt, positions, out;
};

void cmd_convert(const ConvertArgs& a) {
  const auto rig = load(a.rig);
  const auto model = load_model(a.ckpt, rig.tree);
  auto input = load_positions(a.positions);
  if (input.joint_count != rig.tree.size()) throw ValidationError("positions file does not match the rig");
  // Inputs are moved to root space; the translation does not affect rotations.
  for (auto& f : input.frames) {
    const Vec3<double> root = f[0];
    for (auto& p : f) p -= root;
  }
  const auto rest = rig.frames.cast<double>();
  const auto bone = model.predict(input.frames);
  MotionDataset out;
  out.rig = rig.tree.name;
  out.joint_count = rig.tree.size();
  for (const auto& fb : bone) {
    MotionFrame f;
    for (const auto& r : locals_from_bone<double>(fb, rest, rig.tree)) f.q.push_back(matrix_to_quat<double>(r));
    out.frames.push_back(std::move(f));
  }
  save_motion(out, a.out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Amortized inverse kinematics: rigs, synthetic data, training, evaluation and baselines"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads for frame-parallel work (bench)")->check(CLI::PositiveNumber);

  auto* rig_cmd = app.add_subcommand("rig", "Rig utilities");
  rig_cmd->require_subcommand(1);
  std::string rig_check_path;
  auto* rig_check = rig_cmd->add_subcommand("check", "Validate a rig and print its bone frames");
  rig_check->add_option("rig", rig_check_path, "Rig JSON file")->required();

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic motion dataset");
  gen_cmd->add_option("--rig", gen.rig, "Rig JSON file")->required();
  gen_cmd->add_option("--frames", gen.frames, "Frame count")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
  gen_cmd->add_option("--cap", gen.cap, "Uniform per-joint angle cap in radians (ignored with --caps)")
      ->capture_default_str();
  gen_cmd->add_option("--caps", gen.caps_file, "Caps JSON: a number or {\"default\": x, \"joints\": {...}}");
  gen_cmd->add_option("--smooth", gen.smooth, "Temporal smoothing factor in [0, 1)")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output motion JSONL")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model; writes the best checkpoint and <out>.history.csv");
  train_cmd->add_option("--rig", tr.rig, "Rig JSON file")->required();
  train_cmd->add_option("--train", tr.train, "Training motion JSONL")->required();
  train_cmd->add_option("--val", tr.val, "Validation motion JSONL")->required();
  train_cmd->add_option("--config", tr.config, "JSON with optional \"model\", \"train\" and \"init_seed\" entries");
  train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
  train_cmd->add_flag("--quiet", tr.quiet, "Suppress per-epoch progress");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint (or the rest-pose predictor) on a dataset");
  eval_cmd->add_option("--rig", ev.rig, "Rig JSON file")->required();
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint; omit to predict the rest pose");
  eval_cmd->add_option("--data", ev.data, "Motion JSONL")->required();
  eval_cmd->add_option("--report", ev.report, "Report JSON (stdout when omitted)");
  eval_cmd->add_option("--per-joint", ev.per_joint, "Per-joint CSV");

  RoundtripArgs rt;
  auto* rt_cmd = app.add_subcommand("roundtrip", "Measure the locals -> bone -> locals round-trip error");
  rt_cmd->add_option("--rig", rt.rig, "Rig JSON file")->required();
  rt_cmd->add_option("--frames", rt.frames, "Random poses")->capture_default_str();
  rt_cmd->add_option("--seed", rt.seed, "Random seed")->capture_default_str();

  SolveArgs sv;
  auto* solve_cmd = app.add_subcommand("solve", "Iteration-budget sweep of an iterative IK solver");
  solve_cmd->add_option("--rig", sv.rig, "Rig JSON file")->required();
  solve_cmd->add_option("--data", sv.data, "Motion JSONL")->required();
  solve_cmd->add_option("--solver", sv.solver, "grad or ccd")->check(CLI::IsMember({"grad", "ccd"}))->capture_default_str();
  solve_cmd->add_option("--checkpoints", sv.checkpoints, "Comma-separated iteration counts")->capture_default_str();
  solve_cmd->add_option("--step", sv.step, "Initial gradient step")->capture_default_str();
  solve_cmd->add_option("--ckpt", sv.ckpt, "Checkpoint for the single-pass reference row");
  solve_cmd->add_option("--out", sv.out, "Output CSV")->required();

  NoiseArgs ns;
  auto* noise_cmd = app.add_subcommand("noise-sweep", "Evaluate under Gaussian input noise; also writes .swing/.twist grids");
  noise_cmd->add_option("--rig", ns.rig, "Rig JSON file")->required();
  noise_cmd->add_option("--ckpt", ns.ckpt, "Checkpoint")->required();
  noise_cmd->add_option("--data", ns.data, "Motion JSONL")->required();
  noise_cmd->add_option("--sigmas", ns.sigmas, "Comma-separated sigmas in millimeters")->capture_default_str();
  noise_cmd->add_option("--seed", ns.seed, "Noise seed")->capture_default_str();
  noise_cmd->add_flag("--keep-root-noise", ns.keep_root_noise, "Do not re-center the root after adding noise");
  noise_cmd->add_option("--out", ns.out, "Aggregate CSV")->required();

  BenchArgs bn;
  auto* bench_cmd = app.add_subcommand("bench", "Inference throughput versus batch size");
  bench_cmd->add_option("--rig", bn.rig, "Rig JSON file")->required();
  bench_cmd->add_option("--ckpt", bn.ckpt, "Checkpoint")->required();
  bench_cmd->add_option("--batches", bn.batches, "Comma-separated batch sizes")->capture_default_str();
  bench_cmd->add_option("--min-duration", bn.min_duration, "Seconds per batch size")->capture_default_str();
  bench_cmd->add_option("--seed", bn.seed, "Seed for the random inputs")->capture_default_str();
  bench_cmd->add_option("--out", bn.out, "Output CSV")->required();

  FlowArgs fl;
  auto* flow_cmd = app.add_subcommand("attn-flow", "Mean attention flow matrix over a dataset");
  flow_cmd->add_option("--rig", fl.rig, "Rig JSON file")->required();
  flow_cmd->add_option("--ckpt", fl.ckpt, "Checkpoint")->required();
  flow_cmd->add_option("--data", fl.data, "Motion JSONL")->required();
  flow_cmd->add_option("--out", fl.out, "Output CSV")->required();

  TransferArgs tf;
  auto* transfer_cmd = app.add_subcommand("transfer", "Move a checkpoint to another rig by remapping joint embeddings");
  transfer_cmd->add_option("--src", tf.src, "Source checkpoint")->required();
  transfer_cmd->add_option("--src-rig", tf.src_rig, "Source rig JSON")->required();
  transfer_cmd->add_option("--dst-rig", tf.dst_rig, "Destination rig JSON")->required();
  transfer_cmd->add_option("--map", tf.map, "JSON object of destination -> source joint names (default: identical names)");
  transfer_cmd->add_option("--out", tf.out, "Output checkpoint")->required();

  ConvertArgs cv;
  auto* convert_cmd = app.add_subcommand("convert", "Positions in, local-rotation quaternions out");
  convert_cmd->add_option("--rig", cv.rig, "Rig JSON file")->required();
  convert_cmd->add_option("--ckpt", cv.ckpt, "Checkpoint")->required();
  convert_cmd->add_option("--positions", cv.positions, "Positions JSONL (or motion JSONL with positions)")->required();
  convert_cmd->add_option("--out", cv.out, "Output motion JSONL")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    if (rig_check->parsed()) cmd_rig_check(rig_check_path);
    if (gen_cmd->parsed()) cmd_gen(gen);
    if (train_cmd->parsed()) cmd_train(tr);
    if (eval_cmd->parsed()) cmd_eval(ev);
    if (rt_cmd->parsed()) return cmd_roundtrip(rt);
    if (solve_cmd->parsed()) cmd_solve(sv);
    if (noise_cmd->parsed()) cmd_noise_sweep(ns);
    if (bench_cmd->parsed()) cmd_bench(bn, threads);
    if (flow_cmd->parsed()) cmd_attn_flow(fl);
    if (transfer_cmd->parsed()) cmd_transfer(tf);
    if (convert_cmd->parsed()) cmd_convert(cv);
  } catch (const Error& e) {
    if (e.is_io()) return fail("io", e.what(), 1);
    return fail("validation", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 2);
  }
  return 0;
}
