#include "boneik/rig.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "boneik/error.hpp"

namespace boneik {

using json = nlohmann::ordered_json;

std::vector<int> KinematicTree::children(int i) const {
  std::vector<int> out;
  for (int j = i + 1; j < size(); ++j) {
    if (parents[static_cast<std::size_t>(j)] == i) out.push_back(j);
  }
  return out;
}

bool KinematicTree::is_leaf(int i) const {
  for (int j = i + 1; j < size(); ++j) {
    if (parents[static_cast<std::size_t>(j)] == i) return false;
  }
  return true;
}

int KinematicTree::index_of(std::string_view joint) const {
  for (int i = 0; i < size(); ++i) {
    if (names[static_cast<std::size_t>(i)] == joint) return i;
  }
  return -1;
}

std::vector<Vec3<double>> KinematicTree::rest_positions() const {
  std::vector<Vec3<double>> pos(static_cast<std::size_t>(size()), Vec3<double>::Zero());
  for (int i = 1; i < size(); ++i) {
    pos[static_cast<std::size_t>(i)] =
        pos[static_cast<std::size_t>(parent(i))] + rest_offsets[static_cast<std::size_t>(i)];
  }
  return pos;
}

std::vector<int> KinematicTree::depths() const {
  std::vector<int> d(static_cast<std::size_t>(size()), 0);
  for (int i = 1; i < size(); ++i) {
    d[static_cast<std::size_t>(i)] = d[static_cast<std::size_t>(parent(i))] + 1;
  }
  return d;
}

void validate(const KinematicTree& tree) {
  const auto n = tree.parents.size();
  if (n == 0) throw TopologyError("rig has no joints");
  if (tree.names.size() != n || tree.rest_offsets.size() != n) {
    throw TopologyError("rig arrays have inconsistent lengths");
  }
  if (std::abs(tree.up.norm() - 1.0) > 1e-6) {
    throw TopologyError("up vector must have unit norm");
  }
  std::set<std::string> seen;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& nm = tree.names[i];
    if (nm.empty()) throw TopologyError("joint " + std::to_string(i) + " has an empty name");
    if (!seen.insert(nm).second) throw TopologyError("duplicate joint name '" + nm + "'");
    const int p = tree.parents[i];
    if (i == 0) {
      if (p != -1) throw TopologyError("joint '" + nm + "': first joint must be the root");
      if (!tree.rest_offsets[0].isZero(0.0)) {
        throw TopologyError("joint '" + nm + "': root offset must be zero");
      }
      continue;
    }
    if (p == -1) throw TopologyError("joint '" + nm + "': multiple roots");
    if (p < 0 || p >= static_cast<int>(i)) {
      throw TopologyError("joint '" + nm + "': parent-first order violated");
    }
    if (!(tree.rest_offsets[i].norm() > 0.0)) {
      throw TopologyError("joint '" + nm + "': zero-length bone");
    }
  }
}

KinematicTree make_tree(std::string name, std::vector<std::string> names, std::vector<int> parents,
                        std::vector<Vec3<double>> offsets, Vec3<double> up) {
  KinematicTree t{std::move(name), std::move(names), std::move(parents), std::move(offsets), up};
  validate(t);
  return t;
}

namespace {

Vec3<double> parse_vec3(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw ParseError(what + ": expected [x, y, z]");
  Vec3<double> v;
  for (int k = 0; k < 3; ++k) {
    if (!j[static_cast<std::size_t>(k)].is_number()) throw ParseError(what + ": non-numeric component");
    v(k) = j[static_cast<std::size_t>(k)].get<double>();
  }
  return v;
}

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return it.key() == a; })) {
      throw ParseError(where + ": unknown field '" + it.key() + "'");
    }
  }
}

}  // namespace

KinematicTree load_rig(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("rig: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ParseError("rig: top level must be an object");
  reject_unknown(doc, {"name", "up", "joints"}, "rig");
  if (!doc.contains("name") || !doc["name"].is_string()) throw ParseError("rig: missing string 'name'");
  if (!doc.contains("up")) throw ParseError("rig: missing 'up'");
  if (!doc.contains("joints") || !doc["joints"].is_array()) throw ParseError("rig: missing array 'joints'");

  KinematicTree tree;
  tree.name = doc["name"].get<std::string>();
  tree.up = parse_vec3(doc["up"], "rig.up");
  std::unordered_map<std::string, int> index;
  for (const auto& jj : doc["joints"]) {
    if (!jj.is_object()) throw ParseError("rig: joint entries must be objects");
    reject_unknown(jj, {"name", "parent", "offset"}, "rig joint");
    if (!jj.contains("name") || !jj["name"].is_string()) throw ParseError("rig joint: missing string 'name'");
    const std::string nm = jj["name"].get<std::string>();
    if (!jj.contains("parent")) throw ParseError("rig joint '" + nm + "': missing 'parent'");
    if (!jj.contains("offset")) throw ParseError("rig joint '" + nm + "': missing 'offset'");
    int parent = -1;
    if (!jj["parent"].is_null()) {
      if (!jj["parent"].is_string()) throw ParseError("rig joint '" + nm + "': parent must be a string or null");
      const auto pname = jj["parent"].get<std::string>();
      auto it = index.find(pname);
      if (it == index.end()) {
        throw TopologyError("joint '" + nm + "': parent-first order violated (parent '" + pname +
                            "' not defined earlier)");
      }
      parent = it->second;
    }
    if (index.count(nm)) throw TopologyError("duplicate joint name '" + nm + "'");
    index[nm] = static_cast<int>(tree.names.size());
    tree.names.push_back(nm);
    tree.parents.push_back(parent);
    tree.rest_offsets.push_back(parse_vec3(jj["offset"], "rig joint '" + nm + "' offset"));
  }
  validate(tree);
  return tree;
}

KinematicTree load_rig_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open rig file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return load_rig(ss.str());
}

std::string write_rig(const KinematicTree& tree) {
  json doc;
  doc["name"] = tree.name;
  doc["up"] = {tree.up.x(), tree.up.y(), tree.up.z()};
  json joints = json::array();
  for (int i = 0; i < tree.size(); ++i) {
    json jj;
    jj["name"] = tree.names[static_cast<std::size_t>(i)];
    jj["parent"] = i == 0 ? json(nullptr) : json(tree.names[static_cast<std::size_t>(tree.parent(i))]);
    const auto& d = tree.rest_offsets[static_cast<std::size_t>(i)];
    jj["offset"] = {d.x(), d.y(), d.z()};
    joints.push_back(std::move(jj));
  }
  doc["joints"] = std::move(joints);
  return doc.dump(2) + "\n";
}

std::optional<int> select_primary_child(const KinematicTree& tree, int joint) {
  std::optional<int> best;
  double best_align = 0.0;
  double best_len = 0.0;
  for (int c : tree.children(joint)) {
    const auto& d = tree.rest_offsets[static_cast<std::size_t>(c)];
    const double len = d.norm();
    const double align = d.dot(tree.up) / len;
    if (!best) {
      best = c;
      best_align = align;
      best_len = len;
      continue;
    }
    if (align > best_align + 1e-9) {
      best = c;
      best_align = align;
      best_len = len;
    } else if (std::abs(align - best_align) <= 1e-9 && len > best_len) {
      // Children are visited in ascending index, so equal lengths keep the lower index.
      best = c;
      best_align = align;
      best_len = len;
    }
  }
  return best;
}

namespace {

// Gram-Schmidt of `ref` against unit `x`; empty when the rejection is too small.
std::optional<Vec3<double>> reject_normalized(const Vec3<double>& ref, const Vec3<double>& x) {
  const Vec3<double> y = ref - ref.dot(x) * x;
  const double n = y.norm();
  if (!(n >= kCollinearityThreshold * ref.norm()) || n == 0.0) return std::nullopt;
  return y / n;
}

}  // namespace

RestBoneFrames compute_rest_bone_frames(const KinematicTree& tree) {
  const int n = tree.size();
  const auto rest = tree.rest_positions();
  RestBoneFrames out;
  out.frames.resize(static_cast<std::size_t>(n));
  out.primary_child.resize(static_cast<std::size_t>(n));
  out.edges.resize(static_cast<std::size_t>(n));
  out.fallback_used.assign(static_cast<std::size_t>(n), false);

  for (int i = 0; i < n; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    const auto child = select_primary_child(tree, i);
    out.primary_child[iu] = child;
    std::pair<int, int> edge;
    if (child) {
      edge = {i, *child};
    } else if (i > 0) {
      edge = {tree.parent(i), i};
    } else {
      throw DegenerateFrameError("joint '" + tree.names[iu] + "': single-joint rig has no bone");
    }
    out.edges[iu] = edge;
    const Vec3<double> x = (rest[static_cast<std::size_t>(edge.second)] -
                            rest[static_cast<std::size_t>(edge.first)])
                               .normalized();
    const Vec3<double> ref = i == 0 ? tree.up : Vec3<double>(out.frames[static_cast<std::size_t>(tree.parent(i))].col(1));
    auto y = reject_normalized(ref, x);
    if (!y) {
      y = reject_normalized(tree.up, x);
      out.fallback_used[iu] = true;
      if (!y) {
        throw DegenerateFrameError("joint '" + tree.names[iu] +
                                   "': reference and fallback directions are collinear with the bone");
      }
    }
    Mat3<double> b;
    b.col(0) = x;
    b.col(1) = *y;
    b.col(2) = x.cross(*y);
    out.frames[iu] = b;
  }
  return out;
}

std::vector<int> distal_set(const KinematicTree& tree) {
  std::set<int> d;
  for (int i = 0; i < tree.size(); ++i) {
    if (tree.is_leaf(i)) {
      d.insert(i);
      if (i > 0) d.insert(tree.parent(i));
    }
  }
  return {d.begin(), d.end()};
}

KinematicTree smpl22_rig() {
  std::vector<std::string> names = {
      "pelvis",      "left_hip",    "right_hip",  "spine1",        "left_knee",      "right_knee",
      "spine2",      "left_ankle",  "right_ankle", "spine3",       "left_foot",      "right_foot",
      "neck",        "left_collar", "right_collar", "head",        "left_shoulder",  "right_shoulder",
      "left_elbow",  "right_elbow", "left_wrist", "right_wrist"};
  std::vector<int> parents = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19};
  std::vector<Vec3<double>> off = {
      {0.0, 0.0, 0.0},        {0.070, -0.090, 0.000},  {-0.070, -0.090, 0.000}, {0.000, 0.110, -0.010},
      {0.040, -0.380, 0.000}, {-0.040, -0.380, 0.000}, {0.000, 0.135, 0.010},   {-0.010, -0.400, -0.040},
      {0.010, -0.400, -0.040}, {0.000, 0.055, 0.000},  {0.020, -0.055, 0.120},  {-0.020, -0.055, 0.120},
      {0.000, 0.215, -0.030}, {0.075, 0.120, -0.010},  {-0.075, 0.120, -0.010}, {0.000, 0.090, 0.050},
      {0.090, 0.030, -0.010}, {-0.090, 0.030, -0.010}, {0.260, -0.015, -0.020}, {-0.260, -0.015, -0.020},
      {0.250, 0.010, 0.000},  {-0.250, 0.010, 0.000}};
  return make_tree("smpl22", std::move(names), std::move(parents), std::move(off), Vec3<double>::UnitY());
}

}  // namespace boneik
