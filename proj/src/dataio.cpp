#include "boneik/dataio.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "boneik/error.hpp"

namespace boneik {

using nlohmann::ordered_json;

namespace {

constexpr const char* kMotionFormat = "quat-wxyz";
constexpr const char* kPositionsFormat = "positions-xyz";

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) lines.push_back(line);
    start = end + 1;
  }
  return lines;
}

ordered_json parse_line(std::string_view line, std::size_t lineno) {
  try {
    return ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
  }
}

struct Header {
  std::string rig;
  int n = 0;
  std::string format;
};

Header parse_header(const ordered_json& h) {
  if (!h.is_object()) throw ParseError("line 1: header must be an object");
  for (const auto& [key, _] : h.items()) {
    if (key != "rig" && key != "n" && key != "format" && key != "units") {
      throw ParseError("line 1: unknown header field '" + key + "'");
    }
  }
  Header out;
  try {
    out.rig = h.at("rig").get<std::string>();
    out.n = h.at("n").get<int>();
    out.format = h.at("format").get<std::string>();
    if (h.at("units").get<std::string>() != "m") throw ParseError("line 1: units must be \"m\"");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("line 1: ") + e.what());
  }
  if (out.n < 1) throw ParseError("line 1: joint count must be positive");
  return out;
}

ordered_json make_header(const std::string& rig, int n, const char* format) {
  ordered_json h;
  h["rig"] = rig;
  h["n"] = n;
  h["format"] = format;
  h["units"] = "m";
  return h;
}

Positions<double> parse_points(const ordered_json& arr, int n, std::size_t lineno) {
  if (!arr.is_array() || static_cast<int>(arr.size()) != n) {
    throw ParseError("line " + std::to_string(lineno) + ": expected " + std::to_string(n) + " positions");
  }
  Positions<double> p;
  p.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_array() || v.size() != 3) throw ParseError("line " + std::to_string(lineno) + ": position needs 3 values");
    p.emplace_back(v[0].get<double>(), v[1].get<double>(), v[2].get<double>());
  }
  return p;
}

ordered_json points_json(const Positions<double>& p) {
  ordered_json arr = ordered_json::array();
  for (const auto& v : p) arr.push_back({v.x(), v.y(), v.z()});
  return arr;
}

}  // namespace

Rotations<double> MotionDataset::locals(std::size_t f) const {
  Rotations<double> out;
  out.reserve(frames[f].q.size());
  for (const auto& q : frames[f].q) out.push_back(quat_to_matrix<double>(q));
  return out;
}

std::string write_motion(const MotionDataset& data) {
  std::string out = make_header(data.rig, data.joint_count, kMotionFormat).dump() + "\n";
  for (const auto& f : data.frames) {
    ordered_json j;
    auto& q = j["q"] = ordered_json::array();
    for (const auto& v : f.q) q.push_back({v(0), v(1), v(2), v(3)});
    if (f.p) j["p"] = points_json(*f.p);
    out += j.dump();
    out += '\n';
  }
  return out;
}

MotionDataset read_motion(std::string_view text) {
  const auto lines = split_lines(text);
  if (lines.empty()) throw ParseError("motion file is empty");
  const auto header = parse_header(parse_line(lines[0], 1));
  if (header.format != kMotionFormat) throw ParseError("line 1: format must be \"quat-wxyz\"");
  MotionDataset data;
  data.rig = header.rig;
  data.joint_count = header.n;
  for (std::size_t l = 1; l < lines.size(); ++l) {
    const auto j = parse_line(lines[l], l + 1);
    const std::string where = "line " + std::to_string(l + 1);
    MotionFrame f;
    try {
      for (const auto& [key, _] : j.items()) {
        if (key != "q" && key != "p") throw ParseError(where + ": unknown field '" + key + "'");
      }
      const auto& q = j.at("q");
      if (!q.is_array() || static_cast<int>(q.size()) != data.joint_count) {
        throw ParseError(where + ": expected " + std::to_string(data.joint_count) + " quaternions");
      }
      for (const auto& v : q) {
        if (!v.is_array() || v.size() != 4) throw ParseError(where + ": quaternion needs 4 values");
        const Quat4<double> qq(v[0].get<double>(), v[1].get<double>(), v[2].get<double>(), v[3].get<double>());
        if (!(std::abs(qq.norm() - 1.0) <= kQuatNormTolerance)) {
          throw ValidationError(where + ": quaternion is not unit length");
        }
        f.q.push_back(qq);
      }
      if (j.contains("p")) f.p = parse_points(j.at("p"), data.joint_count, l + 1);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
    data.frames.push_back(std::move(f));
  }
  return data;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

void save_motion(const MotionDataset& data, const std::string& path) { write_text_file(path, write_motion(data)); }

MotionDataset load_motion(const std::string& path) { return read_motion(read_text_file(path)); }

std::string write_positions(const PositionsFile& data) {
  std::string out = make_header(data.rig, data.joint_count, kPositionsFormat).dump() + "\n";
  for (const auto& f : data.frames) {
    ordered_json j;
    j["p"] = points_json(f);
    out += j.dump();
    out += '\n';
  }
  return out;
}

PositionsFile read_positions(std::string_view text) {
  const auto lines = split_lines(text);
  if (lines.empty()) throw ParseError("positions file is empty");
  const auto header = parse_header(parse_line(lines[0], 1));
  PositionsFile out;
  out.rig = header.rig;
  out.joint_count = header.n;
  if (header.format == kMotionFormat) {
    const auto motion = read_motion(text);
    for (std::size_t f = 0; f < motion.size(); ++f) {
      if (!motion.frames[f].p) throw ValidationError("frame " + std::to_string(f) + " has no cached positions");
      out.frames.push_back(*motion.frames[f].p);
    }
    return out;
  }
  if (header.format != kPositionsFormat) throw ParseError("line 1: unknown format '" + header.format + "'");
  for (std::size_t l = 1; l < lines.size(); ++l) {
    const auto j = parse_line(lines[l], l + 1);
    try {
      out.frames.push_back(parse_points(j.at("p"), out.joint_count, l + 1));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(l + 1) + ": " + e.what());
    }
  }
  return out;
}

PositionsFile load_positions(const std::string& path) { return read_positions(read_text_file(path)); }

PairedFrames make_pairs(const MotionDataset& data, const KinematicTree& tree, const RestBoneFrames& frames) {
  if (data.joint_count != tree.size()) {
    throw ValidationError("dataset has " + std::to_string(data.joint_count) + " joints, rig '" + tree.name + "' has " +
                          std::to_string(tree.size()));
  }
  const auto rest = frames.cast<double>();
  PairedFrames out;
  out.positions.reserve(data.size());
  out.local.reserve(data.size());
  out.bone.reserve(data.size());
  for (std::size_t f = 0; f < data.size(); ++f) {
    auto pose = make_pose<double>(tree, rest, data.locals(f));
    if (const auto& cached = data.frames[f].p) {
      for (int i = 0; i < tree.size(); ++i) {
        const auto iu = static_cast<std::size_t>(i);
        if ((pose.positions[iu] - (*cached)[iu]).norm() > 1e-5) {
          throw ValidationError("frame " + std::to_string(f) + ": cached position of '" + tree.names[iu] +
                                "' disagrees with forward kinematics");
        }
      }
    }
    out.positions.push_back(std::move(pose.positions));
    out.local.push_back(std::move(pose.local));
    out.bone.push_back(std::move(pose.bone));
  }
  return out;
}

std::vector<double> uniform_caps(const KinematicTree& tree, double cap) {
  if (!(cap > 0.0 && cap < std::numbers::pi)) throw ValidationError("angle cap must lie in (0, pi)");
  return std::vector<double>(static_cast<std::size_t>(tree.size()), cap);
}

std::vector<double> parse_caps(std::string_view text, const KinematicTree& tree) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("caps file: ") + e.what());
  }
  if (j.is_number()) return uniform_caps(tree, j.get<double>());
  if (!j.is_object()) throw ParseError("caps file: expected a number or an object");
  std::vector<double> caps;
  try {
    for (const auto& [key, _] : j.items()) {
      if (key != "default" && key != "joints") throw ParseError("caps file: unknown field '" + key + "'");
    }
    caps = uniform_caps(tree, j.at("default").get<double>());
    if (j.contains("joints")) {
      for (const auto& [name, v] : j.at("joints").items()) {
        const int i = tree.index_of(name);
        if (i < 0) throw ValidationError("caps file: unknown joint '" + name + "'");
        const double c = v.get<double>();
        if (!(c > 0.0 && c < std::numbers::pi)) throw ValidationError("caps file: cap of '" + name + "' out of (0, pi)");
        caps[static_cast<std::size_t>(i)] = c;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("caps file: ") + e.what());
  }
  return caps;
}

namespace {

std::mt19937_64 frame_rng(std::uint64_t seed, std::uint64_t frame) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(frame), static_cast<std::uint32_t>(frame >> 32)};
  return std::mt19937_64(seq);
}

// Keeps noise draws independent of motion draws made with the same seed.
constexpr std::uint64_t kNoiseStream = 0x9E3779B97F4A7C15ull;

Vec3<double> rotation_vector(const Mat3<double>& r) {
  const auto aa = matrix_to_axis_angle<double>(r);
  return aa.axis * aa.angle;
}

}  // namespace

MotionDataset generate_synthetic(const KinematicTree& tree, std::size_t frame_count, std::uint64_t seed,
                                 const std::vector<double>& caps, double smoothing) {
  const auto n = static_cast<std::size_t>(tree.size());
  if (caps.size() != n) throw ValidationError("generate_synthetic: one cap per joint required");
  for (double c : caps) {
    if (!(c > 0.0 && c < std::numbers::pi)) throw ValidationError("generate_synthetic: caps must lie in (0, pi)");
  }
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ValidationError("generate_synthetic: smoothing must lie in [0, 1)");
  MotionDataset data;
  data.rig = tree.name;
  data.joint_count = tree.size();
  data.frames.reserve(frame_count);
  std::vector<Vec3<double>> prev(n, Vec3<double>::Zero());
  for (std::size_t f = 0; f < frame_count; ++f) {
    auto rng = frame_rng(seed, f);
    MotionFrame frame;
    Rotations<double> locals(n);
    for (std::size_t i = 0; i < n; ++i) {
      Vec3<double> v = rotation_vector(random_rotation<double>(rng, caps[i]));
      if (f > 0 && smoothing > 0.0) v = smoothing * prev[i] + (1.0 - smoothing) * v;
      prev[i] = v;
      frame.q.push_back(matrix_to_quat<double>(exp_so3<double>(v)));
      locals[i] = quat_to_matrix<double>(frame.q.back());
    }
    frame.p = fk<double>(tree, locals).positions;
    data.frames.push_back(std::move(frame));
  }
  return data;
}

std::vector<Positions<double>> inject_noise(const std::vector<Positions<double>>& positions, double sigma_mm,
                                            std::uint64_t seed, bool recenter) {
  if (!(sigma_mm >= 0.0)) throw ValidationError("inject_noise: sigma must be nonnegative");
  if (sigma_mm == 0.0) return positions;
  const double sigma = sigma_mm / 1000.0;
  std::vector<Positions<double>> out(positions);
  for (std::size_t f = 0; f < out.size(); ++f) {
    auto rng = frame_rng(seed ^ kNoiseStream, f);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (auto& p : out[f]) {
      for (int k = 0; k < 3; ++k) p(k) += sigma * noise(rng);
    }
    if (recenter && !out[f].empty()) {
      const Vec3<double> root = out[f][0];
      for (auto& p : out[f]) p -= root;
    }
  }
  return out;
}

SplitResult split(const MotionDataset& data, double train_fraction, double val_fraction, double test_fraction,
                  std::uint64_t seed, bool shuffle) {
  if (train_fraction < 0.0 || val_fraction < 0.0 || test_fraction < 0.0 ||
      std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw ValidationError("split: fractions must be nonnegative and sum to 1");
  }
  const std::size_t total = data.size();
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  const auto n_train = std::min(total, static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(total))));
  const auto n_val =
      std::min(total - n_train, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(total))));
  SplitResult out;
  for (auto* d : {&out.train, &out.val, &out.test}) {
    d->rig = data.rig;
    d->joint_count = data.joint_count;
  }
  for (std::size_t k = 0; k < total; ++k) {
    auto& dst = k < n_train ? out.train : (k < n_train + n_val ? out.val : out.test);
    dst.frames.push_back(data.frames[order[k]]);
  }
  return out;
}

}  // namespace boneik
