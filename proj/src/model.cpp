#include "boneik/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "boneik/error.hpp"

namespace boneik {

using nlohmann::ordered_json;

std::string to_string(GraphMode mode) {
  switch (mode) {
    case GraphMode::bidirectional:
      return "bidirectional";
    case GraphMode::unidirectional:
      return "unidirectional";
    case GraphMode::fully_connected:
      return "fully-connected";
  }
  return "bidirectional";
}

GraphMode graph_mode_from_string(const std::string& s) {
  if (s == "bidirectional") return GraphMode::bidirectional;
  if (s == "unidirectional") return GraphMode::unidirectional;
  if (s == "fully-connected" || s == "full") return GraphMode::fully_connected;
  throw ValidationError("unknown graph mode '" + s + "'");
}

std::string to_string(Architecture arch) { return arch == Architecture::gat ? "gat" : "mlp"; }

Architecture architecture_from_string(const std::string& s) {
  if (s == "gat") return Architecture::gat;
  if (s == "mlp") return Architecture::mlp;
  throw ValidationError("unknown architecture '" + s + "'");
}

// ---------------------------------------------------------------------------
// Topology

bool GraphTopology::has_edge(int src, int dst) const {
  const auto& nb = neighbors[static_cast<std::size_t>(dst)];
  return std::binary_search(nb.begin(), nb.end(), src);
}

Eigen::MatrixXd GraphTopology::attention_mask() const {
  Eigen::MatrixXd m = Eigen::MatrixXd::Constant(joint_count, joint_count, -std::numeric_limits<double>::infinity());
  for (int i = 0; i < joint_count; ++i) {
    for (int j : neighbors[static_cast<std::size_t>(i)]) m(i, j) = 0.0;
  }
  return m;
}

GraphTopology build_topology(const KinematicTree& tree, GraphMode mode) {
  GraphTopology g;
  const int n = tree.size();
  g.joint_count = n;
  g.mode = mode;
  g.neighbors.assign(static_cast<std::size_t>(n), {});
  auto link = [&](int src, int dst) {
    g.edges.emplace_back(src, dst);
    g.neighbors[static_cast<std::size_t>(dst)].push_back(src);
  };
  if (mode == GraphMode::fully_connected) {
    for (int dst = 0; dst < n; ++dst) {
      for (int src = 0; src < n; ++src) link(src, dst);
    }
  } else {
    for (int i = 0; i < n; ++i) link(i, i);
    for (int i = 1; i < n; ++i) {
      link(tree.parent(i), i);
      if (mode == GraphMode::bidirectional) link(i, tree.parent(i));
    }
  }
  for (auto& nb : g.neighbors) std::sort(nb.begin(), nb.end());
  return g;
}

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  if (hidden < 1) throw ValidationError("model config: hidden must be positive");
  if (depth < 1) throw ValidationError("model config: depth must be at least 1");
  if (heads < 1) throw ValidationError("model config: heads must be positive");
  if (arch == Architecture::gat && hidden % heads != 0) {
    throw ValidationError("model config: hidden must be divisible by heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("model config: dropout must lie in [0, 1)");
  if (!(alpha >= 0.0)) throw ValidationError("model config: alpha must be nonnegative");
}

ModelConfig preset_config(const std::string& preset) {
  ModelConfig c;
  c.preset = preset;
  if (preset == "tiny") {
    c.hidden = 32;
    c.depth = 2;
    c.heads = 4;
  } else if (preset == "small") {
    c.hidden = 64;
    c.depth = 3;
    c.heads = 4;
  } else if (preset == "base") {
    c.hidden = 128;
    c.depth = 4;
    c.heads = 8;
  } else if (preset == "large") {
    c.hidden = 256;
    c.depth = 4;
    c.heads = 8;
  } else {
    throw ValidationError("unknown size preset '" + preset + "'");
  }
  return c;
}

ordered_json to_json(const ModelConfig& c) {
  ordered_json j;
  j["arch"] = to_string(c.arch);
  j["preset"] = c.preset;
  j["hidden"] = c.hidden;
  j["depth"] = c.depth;
  j["heads"] = c.heads;
  j["dropout"] = c.dropout;
  j["alpha"] = c.alpha;
  j["positional_embedding"] = c.use_positional_embedding;
  j["global_shortcut"] = c.use_global_shortcut;
  j["local_refinement"] = c.use_local_refinement;
  j["graph"] = to_string(c.graph);
  return j;
}

ModelConfig model_config_from_json(const ordered_json& j) {
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  ModelConfig c = j.contains("preset") ? preset_config(j.at("preset").get<std::string>()) : ModelConfig{};
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "preset") continue;
      if (key == "arch") {
        c.arch = architecture_from_string(v.get<std::string>());
      } else if (key == "hidden") {
        c.hidden = v.get<int>();
      } else if (key == "depth") {
        c.depth = v.get<int>();
      } else if (key == "heads") {
        c.heads = v.get<int>();
      } else if (key == "dropout") {
        c.dropout = v.get<double>();
      } else if (key == "alpha") {
        c.alpha = v.get<double>();
      } else if (key == "positional_embedding") {
        c.use_positional_embedding = v.get<bool>();
      } else if (key == "global_shortcut") {
        c.use_global_shortcut = v.get<bool>();
      } else if (key == "local_refinement") {
        c.use_local_refinement = v.get<bool>();
      } else if (key == "graph") {
        c.graph = graph_mode_from_string(v.get<std::string>());
      } else {
        throw ValidationError("model config: unknown field '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

bool is_no_decay(const std::string& name) {
  const auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".bias") || name.find("norm.") != std::string::npos || name == "embeddings";
}

// ---------------------------------------------------------------------------
// Parameters

template <typename Scalar>
bool ModelParams<Scalar>::has(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& t) { return t.name == name; });
}

template <typename Scalar>
const ad::Tensor<Scalar>& ModelParams<Scalar>::at(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw ValidationError("model parameter '" + name + "' not found");
}

template <typename Scalar>
ad::Tensor<Scalar>& ModelParams<Scalar>::at(const std::string& name) {
  for (auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw ValidationError("model parameter '" + name + "' not found");
}

template <typename Scalar>
std::size_t ModelParams<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.tensor.value().size());
  return n;
}

template <typename Scalar>
void ModelParams<Scalar>::zero_grad() {
  for (auto& t : tensors) t.tensor.zero_grad();
}

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Eigen::MatrixXd kaiming(Eigen::Index fan_in, Eigen::Index fan_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Eigen::MatrixXd m(fan_in, fan_out);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = u(rng_);
    }
    return m;
  }

  Eigen::MatrixXd normal(Eigen::Index rows, Eigen::Index cols, double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = d(rng_);
    }
    return m;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& config, const KinematicTree& tree, std::uint64_t seed) {
  config.validate();
  ModelParams<Scalar> p;
  p.config = config;
  p.rig_name = tree.name;
  p.joint_count = tree.size();
  Initializer init(seed);
  const Eigen::Index f = config.hidden;
  const Eigen::Index n = tree.size();
  auto add = [&](const std::string& name, const Eigen::MatrixXd& v) {
    p.tensors.push_back({name, ad::Tensor<Scalar>::parameter(v.cast<Scalar>())});
  };
  auto zeros = [](Eigen::Index r, Eigen::Index c) { return Eigen::MatrixXd::Zero(r, c); };
  auto ones = [](Eigen::Index r, Eigen::Index c) { return Eigen::MatrixXd::Ones(r, c); };

  add("in_proj.weight", init.kaiming(3, f));
  if (config.arch == Architecture::mlp) add("in_proj.bias", zeros(1, f));
  if (config.use_positional_embedding) add("embeddings", init.normal(n, f, 0.02));

  if (config.arch == Architecture::gat) {
    const Eigen::Index fh = f / config.heads;
    for (int l = 0; l < config.depth; ++l) {
      const std::string pre = "gat." + std::to_string(l) + ".";
      add(pre + "weight", init.kaiming(f, f));
      add(pre + "att_tgt", init.kaiming(fh, config.heads).transpose());
      add(pre + "att_nbr", init.kaiming(fh, config.heads).transpose());
      add(pre + "norm.gain", ones(1, f));
      add(pre + "norm.bias", zeros(1, f));
    }
    if (config.use_local_refinement) add("local.weight", init.kaiming(f, f));
    if (config.use_global_shortcut) add("skip.weight", init.kaiming(3, f));
  } else {
    for (int l = 0; l < config.depth; ++l) {
      const std::string pre = "mlp." + std::to_string(l) + ".";
      add(pre + "norm.gain", ones(1, f));
      add(pre + "norm.bias", zeros(1, f));
      add(pre + "fc1.weight", init.kaiming(f, 2 * f));
      add(pre + "fc1.bias", zeros(1, 2 * f));
      add(pre + "fc2.weight", init.kaiming(2 * f, f));
      add(pre + "fc2.bias", zeros(1, f));
    }
  }
  add("head.weight", init.kaiming(f, 6));
  Eigen::MatrixXd head_bias(1, 6);
  head_bias << 1, 0, 0, 0, 1, 0;
  add("head.bias", head_bias);
  return p;
}

// ---------------------------------------------------------------------------
// Differentiable rotation blocks

template <typename Scalar>
ad::Tensor<Scalar> rot6d_to_matrix(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& six) {
  if (six.cols() != 6) throw ShapeError("rot6d_to_matrix: expected 6 columns, got " + std::to_string(six.cols()));
  const auto a1 = ad::slice_cols(tape, six, 0, 3);
  const auto a2 = ad::slice_cols(tape, six, 3, 3);
  const auto x = ad::div_col(tape, a1, ad::l2_norm(tape, a1));
  const auto proj = ad::row_sum(tape, ad::mul(tape, x, a2));
  const auto y_once = ad::sub(tape, a2, ad::mul_col(tape, x, proj));
  // Re-project once more; a single pass loses orthogonality in float when a2 is nearly parallel to a1.
  const auto y_raw = ad::sub(tape, y_once, ad::mul_col(tape, x, ad::row_sum(tape, ad::mul(tape, x, y_once))));
  const auto y = ad::div_col(tape, y_raw, ad::l2_norm(tape, y_raw));
  const auto z = ad::cross_product(tape, x, y);
  return ad::concat_cols<Scalar>(tape, {x, y, z});
}

template <typename Scalar>
ad::Tensor<Scalar> geodesic_loss(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& pred, const ad::Tensor<Scalar>& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != 9 || gt.cols() != 9) {
    throw ShapeError("geodesic_loss: shape mismatch " + ad::detail::shape_of(pred) + " vs " + ad::detail::shape_of(gt));
  }
  const auto trace = ad::row_sum(tape, ad::mul(tape, pred, gt));
  const auto cosine = ad::scale(tape, ad::add_scalar(tape, trace, Scalar(-1)), Scalar(0.5));
  return ad::mean(tape, ad::arccos_clamped(tape, cosine));
}

namespace {

struct FkConstants {
  Eigen::MatrixXd rest;       // N x 9
  Eigen::MatrixXd offsets;    // N x 3
  Eigen::MatrixXd ancestors;  // N x N
};

FkConstants fk_constants(const KinematicTree& tree, const RestBoneFrames& frames) {
  const int n = tree.size();
  FkConstants c;
  c.rest.resize(n, 9);
  c.offsets.resize(n, 3);
  c.ancestors = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    Eigen::Map<const Eigen::Matrix<double, 1, 9>> flat(frames.frames[static_cast<std::size_t>(i)].data());
    c.rest.row(i) = flat;
    c.offsets.row(i) = tree.rest_offsets[static_cast<std::size_t>(i)].transpose();
    for (int k = i; k > 0; k = tree.parent(k)) c.ancestors(i, k) = 1.0;
  }
  return c;
}

template <typename Scalar>
ad::Tensor<Scalar> tiled(const Eigen::MatrixXd& m, Eigen::Index times) {
  return ad::Tensor<Scalar>::constant(m.cast<Scalar>().replicate(times, 1));
}

template <typename Scalar>
ad::Tensor<Scalar> fk_loss_impl(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& pred_bone, const KinematicTree& tree,
                                const FkConstants& c, const ad::Tensor<Scalar>& positions) {
  const int n = tree.size();
  if (pred_bone.cols() != 9 || pred_bone.rows() % n != 0 || positions.rows() != pred_bone.rows() ||
      positions.cols() != 3) {
    throw ShapeError("fk_consistency_loss: shape mismatch " + ad::detail::shape_of(pred_bone) + " vs " +
                     ad::detail::shape_of(positions));
  }
  const Eigen::Index batch = pred_bone.rows() / n;
  // R_w = R_bone B_rest^T, then J(i) = sum over the path of R_w(parent(k)) d(k).
  const auto world = ad::mat3_mul(tape, pred_bone, tiled<Scalar>(c.rest, batch), false, true);
  std::vector<Eigen::Index> parent_rows(static_cast<std::size_t>(batch * n));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int i = 0; i < n; ++i) parent_rows[static_cast<std::size_t>(b * n + i)] = b * n + std::max(tree.parent(i), 0);
  }
  const auto parent_world = ad::index_rows(tape, world, std::move(parent_rows));
  const auto bones = ad::mat3_vec(tape, parent_world, tiled<Scalar>(c.offsets, batch));
  const auto joints = ad::attend(tape, tiled<Scalar>(c.ancestors, batch), bones, n, 1);
  const auto diff = ad::sub(tape, joints, positions);
  return ad::scale(tape, ad::sum(tape, ad::mul(tape, diff, diff)), Scalar(1.0 / static_cast<double>(batch * n)));
}

}  // namespace

template <typename Scalar>
ad::Tensor<Scalar> fk_consistency_loss(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& pred_bone,
                                       const KinematicTree& tree, const RestBoneFrames& frames,
                                       const ad::Tensor<Scalar>& positions) {
  return fk_loss_impl(tape, pred_bone, tree, fk_constants(tree, frames), positions);
}

template <typename Scalar>
ad::Matrix<Scalar> pack_rotations(const std::vector<Rotations<double>>& frames) {
  const Eigen::Index n = frames.empty() ? 0 : static_cast<Eigen::Index>(frames.front().size());
  ad::Matrix<Scalar> m(static_cast<Eigen::Index>(frames.size()) * n, 9);
  for (std::size_t b = 0; b < frames.size(); ++b) {
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Map<Eigen::Matrix<Scalar, 3, 3>>(m.data() + (static_cast<Eigen::Index>(b) * n + i) * 9) =
          frames[b][static_cast<std::size_t>(i)].template cast<Scalar>();
    }
  }
  return m;
}

Rotations<double> unpack_frame(const Eigen::Ref<const Eigen::MatrixXd>& flat, Eigen::Index frame, int n) {
  Rotations<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Mat3<double> r;
    for (int k = 0; k < 9; ++k) r(k % 3, k / 3) = flat(frame * n + i, k);
    out[static_cast<std::size_t>(i)] = r;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

template <typename Scalar>
Model<Scalar>::Model(ModelParams<Scalar> params, KinematicTree tree)
    : params_(std::move(params)), tree_(std::move(tree)) {
  params_.config.validate();
  if (params_.joint_count != tree_.size()) {
    throw ValidationError("model was built for " + std::to_string(params_.joint_count) + " joints, rig '" + tree_.name +
                          "' has " + std::to_string(tree_.size()));
  }
  if (params_.has("embeddings") && params_.at("embeddings").rows() != tree_.size()) {
    throw ShapeError("embeddings row count does not match the rig");
  }
  frames_ = compute_rest_bone_frames(tree_);
  topology_ = build_topology(tree_, params_.config.graph);
  distal_ = distal_set(tree_);
  const int n = tree_.size();
  mask_ = topology_.attention_mask().cast<Scalar>();

  refine_ = ad::Matrix<Scalar>::Zero(n, n);
  for (int i : distal_) {
    std::vector<int> k = tree_.children(i);
    if (tree_.parent(i) >= 0) k.push_back(tree_.parent(i));
    if (k.empty()) continue;
    for (int j : k) refine_(i, j) += Scalar(1.0 / static_cast<double>(k.size()));
    refine_(i, i) -= Scalar(1);
  }
  const auto c = fk_constants(tree_, frames_);
  ancestors_ = c.ancestors.cast<Scalar>();
  rest_flat_ = c.rest.cast<Scalar>();
  offsets_ = c.offsets.cast<Scalar>();
}

template <typename Scalar>
ad::Tensor<Scalar> Model<Scalar>::tile_embeddings(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& emb,
                                                  Eigen::Index batch) const {
  const int n = tree_.size();
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(batch * n));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(b * n + i)] = i;
  }
  return ad::index_rows(tape, emb, std::move(idx));
}

template <typename Scalar>
ForwardOutput<Scalar> Model<Scalar>::forward(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& positions, bool training,
                                             std::mt19937_64* rng) const {
  const int n = tree_.size();
  if (positions.cols() != 3 || positions.rows() % n != 0 || positions.rows() == 0) {
    throw ShapeError("forward: expected (B*" + std::to_string(n) + ") x 3 positions, got " +
                     ad::detail::shape_of(positions));
  }
  if (training && params_.config.dropout > 0.0 && rng == nullptr) {
    throw ValidationError("forward: training with dropout needs a random generator");
  }
  return params_.config.arch == Architecture::gat ? forward_gat(tape, positions, training, rng)
                                                  : forward_mlp(tape, positions, training, rng);
}

namespace {

template <typename Scalar>
ad::Tensor<Scalar> maybe_dropout(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& a, double p, std::mt19937_64* rng,
                                 bool training) {
  if (!training || p <= 0.0) return a;
  return ad::dropout(tape, a, p, *rng, true);
}

}  // namespace

template <typename Scalar>
ForwardOutput<Scalar> Model<Scalar>::forward_gat(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& x, bool training,
                                                 std::mt19937_64* rng) const {
  const auto& cfg = params_.config;
  const int n = tree_.size();
  const Eigen::Index batch = x.rows() / n;
  const double p = cfg.dropout;
  ForwardOutput<Scalar> out;

  auto h = ad::matmul(tape, x, params_.at("in_proj.weight"));
  if (cfg.use_positional_embedding) h = ad::add(tape, h, tile_embeddings(tape, params_.at("embeddings"), batch));

  const bool refine = cfg.use_local_refinement && !distal_.empty();
  const auto refine_op = refine ? ad::Tensor<Scalar>::constant(refine_.replicate(batch, 1)) : ad::Tensor<Scalar>();
  const Scalar slope = Scalar(0.2);

  for (int l = 0; l < cfg.depth; ++l) {
    const std::string pre = "gat." + std::to_string(l) + ".";
    const auto wh = ad::matmul(tape, h, params_.at(pre + "weight"));
    const auto s_tgt = ad::head_scores(tape, wh, params_.at(pre + "att_tgt"));
    const auto s_nbr = ad::head_scores(tape, wh, params_.at(pre + "att_nbr"));
    const auto logits = ad::leaky_relu(tape, ad::pair_logits(tape, s_tgt, s_nbr, n), slope);
    const auto alpha = ad::softmax_rows(tape, logits, mask_);
    out.attention.push_back(alpha);
    const auto msg = ad::attend(tape, maybe_dropout(tape, alpha, p, rng, training), wh, n, cfg.heads);
    auto next = maybe_dropout(tape, ad::elu(tape, msg), p, rng, training);
    next = ad::layernorm(tape, next, params_.at(pre + "norm.gain"), params_.at(pre + "norm.bias"));
    if (refine && l >= refinement_start(cfg.depth)) {
      // refine_ rows hold mean over K(i) minus e_i for distal joints, zero elsewhere.
      const auto delta = ad::matmul(tape, ad::attend(tape, refine_op, h, n, 1), params_.at("local.weight"));
      next = ad::add(tape, next, delta);
    }
    h = next;
  }
  if (cfg.use_global_shortcut) h = ad::add(tape, h, ad::matmul(tape, x, params_.at("skip.weight")));
  out.six = ad::add(tape, ad::matmul(tape, h, params_.at("head.weight")), params_.at("head.bias"));
  out.bone = rot6d_to_matrix(tape, out.six);
  return out;
}

template <typename Scalar>
ForwardOutput<Scalar> Model<Scalar>::forward_mlp(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& x, bool training,
                                                 std::mt19937_64* rng) const {
  const auto& cfg = params_.config;
  const Eigen::Index batch = x.rows() / tree_.size();
  ForwardOutput<Scalar> out;
  auto h = ad::add(tape, ad::matmul(tape, x, params_.at("in_proj.weight")), params_.at("in_proj.bias"));
  if (cfg.use_positional_embedding) h = ad::add(tape, h, tile_embeddings(tape, params_.at("embeddings"), batch));
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string pre = "mlp." + std::to_string(l) + ".";
    auto f = ad::layernorm(tape, h, params_.at(pre + "norm.gain"), params_.at(pre + "norm.bias"));
    f = ad::elu(tape, ad::add(tape, ad::matmul(tape, f, params_.at(pre + "fc1.weight")), params_.at(pre + "fc1.bias")));
    f = maybe_dropout(tape, f, cfg.dropout, rng, training);
    f = ad::add(tape, ad::matmul(tape, f, params_.at(pre + "fc2.weight")), params_.at(pre + "fc2.bias"));
    h = ad::add(tape, h, f);
  }
  out.six = ad::add(tape, ad::matmul(tape, h, params_.at("head.weight")), params_.at("head.bias"));
  out.bone = rot6d_to_matrix(tape, out.six);
  return out;
}

template <typename Scalar>
typename Model<Scalar>::Loss Model<Scalar>::loss(ad::Tape<Scalar>& tape, const ForwardOutput<Scalar>& out,
                                                 const ad::Tensor<Scalar>& gt_bone,
                                                 const ad::Tensor<Scalar>& positions) const {
  Loss l;
  l.rot = geodesic_loss(tape, out.bone, gt_bone);
  FkConstants c{rest_flat_.template cast<double>(), offsets_.template cast<double>(),
                ancestors_.template cast<double>()};
  l.fk = fk_loss_impl(tape, out.bone, tree_, c, positions);
  l.total = params_.config.alpha == 0.0 ? l.rot
                                        : ad::add(tape, l.rot, ad::scale(tape, l.fk, Scalar(params_.config.alpha)));
  return l;
}

template <typename Scalar>
ad::Matrix<Scalar> Model<Scalar>::pack_positions(const std::vector<Positions<double>>& frames) const {
  const int n = tree_.size();
  ad::Matrix<Scalar> m(static_cast<Eigen::Index>(frames.size()) * n, 3);
  for (std::size_t b = 0; b < frames.size(); ++b) {
    if (static_cast<int>(frames[b].size()) != n) throw ShapeError("pack_positions: frame joint count mismatch");
    for (int i = 0; i < n; ++i) {
      m.row(static_cast<Eigen::Index>(b) * n + i) = frames[b][static_cast<std::size_t>(i)].template cast<Scalar>();
    }
  }
  return m;
}

template <typename Scalar>
std::vector<Rotations<double>> Model<Scalar>::predict(const std::vector<Positions<double>>& frames) const {
  constexpr std::size_t kChunk = 256;
  const int n = tree_.size();
  std::vector<Rotations<double>> out;
  out.reserve(frames.size());
  for (std::size_t begin = 0; begin < frames.size(); begin += kChunk) {
    const std::size_t end = std::min(frames.size(), begin + kChunk);
    std::vector<Positions<double>> chunk(frames.begin() + static_cast<std::ptrdiff_t>(begin),
                                         frames.begin() + static_cast<std::ptrdiff_t>(end));
    ad::Tape<Scalar> tape(false);
    const auto x = ad::Tensor<Scalar>::constant(pack_positions(chunk));
    const auto res = forward(tape, x, false);
    const Eigen::MatrixXd flat = res.bone.value().template cast<double>();
    for (std::size_t b = 0; b < chunk.size(); ++b) out.push_back(unpack_frame(flat, static_cast<Eigen::Index>(b), n));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention analysis

template <typename Scalar>
std::vector<Eigen::MatrixXd> frame_attention(const ad::Matrix<Scalar>& layer, Eigen::Index frame, int heads, int n) {
  std::vector<Eigen::MatrixXd> out;
  for (int k = 0; k < heads; ++k) {
    out.push_back(layer.middleRows((frame * heads + k) * n, n).template cast<double>());
  }
  return out;
}

Eigen::MatrixXd attention_flow(const std::vector<std::vector<Eigen::MatrixXd>>& stack) {
  if (stack.empty() || stack.front().empty()) throw ValidationError("attention_flow: empty attention stack");
  const Eigen::Index n = stack.front().front().rows();
  Eigen::MatrixXd flow = Eigen::MatrixXd::Identity(n, n);
  for (const auto& layer : stack) {
    Eigen::MatrixXd avg = Eigen::MatrixXd::Zero(n, n);
    for (const auto& head : layer) {
      if (head.rows() != n || head.cols() != n) throw ShapeError("attention_flow: inconsistent matrix sizes");
      avg += head;
    }
    avg /= static_cast<double>(layer.size());
    flow = avg * flow;
  }
  return flow;
}

// ---------------------------------------------------------------------------
// Transfer

template <typename Scalar>
ModelParams<Scalar> transfer_embeddings(const ModelParams<Scalar>& source, const KinematicTree& source_tree,
                                        const KinematicTree& dest_tree,
                                        const std::vector<std::pair<std::string, std::string>>& name_map) {
  if (source.joint_count != source_tree.size()) {
    throw ValidationError("transfer_embeddings: source parameters do not match the source rig");
  }
  std::vector<std::pair<int, int>> rows;
  for (const auto& [dst, src] : name_map) {
    const int di = dest_tree.index_of(dst);
    const int si = source_tree.index_of(src);
    if (di < 0) throw ValidationError("transfer_embeddings: unknown destination joint '" + dst + "'");
    if (si < 0) throw ValidationError("transfer_embeddings: unknown source joint '" + src + "'");
    rows.emplace_back(di, si);
  }
  ModelParams<Scalar> out = source.template cast<Scalar>();
  out.rig_name = dest_tree.name;
  out.joint_count = dest_tree.size();
  if (out.has("embeddings")) {
    const auto& src = source.at("embeddings").value();
    ad::Matrix<Scalar> emb = ad::Matrix<Scalar>::Zero(dest_tree.size(), src.cols());
    for (const auto& [di, si] : rows) emb.row(di) = src.row(si);
    out.at("embeddings") = ad::Tensor<Scalar>::parameter(std::move(emb));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointFormat = "boneik-checkpoint";
constexpr int kCheckpointVersion = 1;

void append_le(std::string& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xFFu));
}

float read_le(const char* p) {
  std::uint32_t bits = 0;
  for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[k])) << (8 * k);
  return std::bit_cast<float>(bits);
}

}  // namespace

std::string serialize_checkpoint(const ModelParams<float>& params) {
  ordered_json header;
  header["format"] = kCheckpointFormat;
  header["version"] = kCheckpointVersion;
  header["config"] = to_json(params.config);
  header["rig"] = params.rig_name;
  header["n"] = params.joint_count;
  auto& manifest = header["tensors"] = ordered_json::array();
  std::size_t offset = 0;
  for (const auto& t : params.tensors) {
    manifest.push_back({{"name", t.name}, {"shape", {t.tensor.rows(), t.tensor.cols()}}, {"offset", offset}});
    offset += static_cast<std::size_t>(t.tensor.value().size()) * 4;
  }
  header["payload_bytes"] = offset;
  std::string out = header.dump() + "\n";
  out.reserve(out.size() + offset);
  for (const auto& t : params.tensors) {
    const auto& v = t.tensor.value();
    for (Eigen::Index k = 0; k < v.size(); ++k) append_le(out, v.data()[k]);
  }
  return out;
}

ModelParams<float> deserialize_checkpoint(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw ParseError("checkpoint: missing header line");
  ordered_json header;
  try {
    header = ordered_json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: bad header: ") + e.what());
  }
  ModelParams<float> p;
  try {
    if (header.at("format").get<std::string>() != kCheckpointFormat) throw ParseError("checkpoint: unknown format");
    if (header.at("version").get<int>() != kCheckpointVersion) throw ParseError("checkpoint: unsupported version");
    p.config = model_config_from_json(header.at("config"));
    p.rig_name = header.at("rig").get<std::string>();
    p.joint_count = header.at("n").get<int>();
    const auto payload = header.at("payload_bytes").get<std::size_t>();
    const char* data = bytes.data() + nl + 1;
    if (bytes.size() - nl - 1 != payload) throw ParseError("checkpoint: payload size does not match header");
    for (const auto& t : header.at("tensors")) {
      const auto rows = t.at("shape").at(0).get<Eigen::Index>();
      const auto cols = t.at("shape").at(1).get<Eigen::Index>();
      const auto offset = t.at("offset").get<std::size_t>();
      if (rows < 0 || cols < 0 || offset + static_cast<std::size_t>(rows * cols) * 4 > payload) {
        throw ParseError("checkpoint: tensor '" + t.at("name").get<std::string>() + "' exceeds payload");
      }
      ad::Matrix<float> m(rows, cols);
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = read_le(data + offset + static_cast<std::size_t>(k) * 4);
      p.tensors.push_back({t.at("name").get<std::string>(), ad::Tensor<float>::parameter(std::move(m))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: bad header: ") + e.what());
  }
  return p;
}

void save_checkpoint(const ModelParams<float>& params, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  const auto bytes = serialize_checkpoint(params);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing '" + path + "'");
}

ModelParams<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// Instantiations

#define BONEIK_INSTANTIATE(S)                                                                                         \
  template struct ModelParams<S>;                                                                                     \
  template ModelParams<S> init_params<S>(const ModelConfig&, const KinematicTree&, std::uint64_t);                   \
  template class Model<S>;                                                                                            \
  template ad::Tensor<S> rot6d_to_matrix<S>(ad::Tape<S>&, const ad::Tensor<S>&);                                      \
  template ad::Tensor<S> geodesic_loss<S>(ad::Tape<S>&, const ad::Tensor<S>&, const ad::Tensor<S>&);                 \
  template ad::Tensor<S> fk_consistency_loss<S>(ad::Tape<S>&, const ad::Tensor<S>&, const KinematicTree&,             \
                                                const RestBoneFrames&, const ad::Tensor<S>&);                         \
  template ad::Matrix<S> pack_rotations<S>(const std::vector<Rotations<double>>&);                                    \
  template std::vector<Eigen::MatrixXd> frame_attention<S>(const ad::Matrix<S>&, Eigen::Index, int, int);             \
  template ModelParams<S> transfer_embeddings<S>(const ModelParams<S>&, const KinematicTree&, const KinematicTree&,   \
                                                 const std::vector<std::pair<std::string, std::string>>&);

BONEIK_INSTANTIATE(float)
BONEIK_INSTANTIATE(double)

#undef BONEIK_INSTANTIATE

}  // namespace boneik
