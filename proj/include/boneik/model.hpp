#pragma once

// Graph-attention IK regressor and the per-joint MLP baseline.
//
// Batches stack frames joint by joint: row b * N + i of every per-joint tensor
// belongs to joint i of frame b. Rotations travel as 9 values per row in
// column-major order.

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "boneik/autodiff.hpp"
#include "boneik/kinematics.hpp"
#include "boneik/rig.hpp"

namespace boneik {

enum class GraphMode { bidirectional, unidirectional, fully_connected };
enum class Architecture { gat, mlp };

std::string to_string(GraphMode mode);
GraphMode graph_mode_from_string(const std::string& s);
std::string to_string(Architecture arch);
Architecture architecture_from_string(const std::string& s);

/// Directed message edges (src, dst): `dst` aggregates from `src`.
struct GraphTopology {
  int joint_count = 0;
  GraphMode mode = GraphMode::bidirectional;
  std::vector<std::pair<int, int>> edges;
  std::vector<std::vector<int>> neighbors;  // N+(i), sorted, includes i

  bool has_edge(int src, int dst) const;
  /// Additive softmax mask: 0 on edges, -inf elsewhere. Row = dst.
  Eigen::MatrixXd attention_mask() const;
};

GraphTopology build_topology(const KinematicTree& tree, GraphMode mode);

struct ModelConfig {
  Architecture arch = Architecture::gat;
  int hidden = 64;
  int depth = 3;
  int heads = 4;
  double dropout = 0.1;
  double alpha = 0.1;
  bool use_positional_embedding = true;
  bool use_global_shortcut = true;
  bool use_local_refinement = true;
  GraphMode graph = GraphMode::bidirectional;
  std::string preset = "small";

  void validate() const;
};

/// tiny F=32/D=2/4 heads, small F=64/D=3/4 heads, base F=128/D=4/8 heads,
/// large F=256/D=4/8 heads.
ModelConfig preset_config(const std::string& preset);

nlohmann::ordered_json to_json(const ModelConfig& config);
/// Starts from the named preset (if any) and overrides the listed fields.
ModelConfig model_config_from_json(const nlohmann::ordered_json& j);

/// First layer index that receives the local refinement term.
inline int refinement_start(int depth) { return (depth + 1) / 2; }

template <typename Scalar>
struct NamedTensor {
  std::string name;
  ad::Tensor<Scalar> tensor;
};

template <typename Scalar>
struct ModelParams {
  ModelConfig config;
  std::string rig_name;
  int joint_count = 0;
  std::vector<NamedTensor<Scalar>> tensors;

  bool has(const std::string& name) const;
  const ad::Tensor<Scalar>& at(const std::string& name) const;
  ad::Tensor<Scalar>& at(const std::string& name);
  std::size_t parameter_count() const;
  void zero_grad();
  /// Deep copy, optionally converting precision.
  template <typename To>
  ModelParams<To> cast() const {
    ModelParams<To> out;
    out.config = config;
    out.rig_name = rig_name;
    out.joint_count = joint_count;
    for (const auto& t : tensors) {
      out.tensors.push_back({t.name, ad::Tensor<To>(t.tensor.value().template cast<To>(), true)});
    }
    return out;
  }
};

/// Parameters exempt from weight decay: biases, normalization parameters and
/// joint embeddings.
bool is_no_decay(const std::string& name);

/// Fresh parameters for `config` on `tree`.
template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& config, const KinematicTree& tree, std::uint64_t seed);

template <typename Scalar>
struct ForwardOutput {
  ad::Tensor<Scalar> six;   // (B*N) x 6 head outputs
  ad::Tensor<Scalar> bone;  // (B*N) x 9 predicted bone-aligned rotations
  /// Per layer, (B*H*N) x N attention weights (row = target joint).
  std::vector<ad::Tensor<Scalar>> attention;
};

/// Parameters bound to a rig with all derived constants precomputed.
template <typename Scalar>
class Model {
 public:
  Model(ModelParams<Scalar> params, KinematicTree tree);

  const ModelConfig& config() const { return params_.config; }
  ModelParams<Scalar>& params() { return params_; }
  const ModelParams<Scalar>& params() const { return params_; }
  const KinematicTree& tree() const { return tree_; }
  const RestBoneFrames& frames() const { return frames_; }
  const GraphTopology& topology() const { return topology_; }
  const std::vector<int>& distal() const { return distal_; }
  int joint_count() const { return tree_.size(); }

  /// positions: (B*N) x 3 root-space joints. `rng` is only used when training.
  ForwardOutput<Scalar> forward(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& positions, bool training,
                                std::mt19937_64* rng = nullptr) const;

  /// L_rot + alpha * L_fk on a batch; also returns the parts.
  struct Loss {
    ad::Tensor<Scalar> total;
    ad::Tensor<Scalar> rot;
    ad::Tensor<Scalar> fk;
  };
  Loss loss(ad::Tape<Scalar>& tape, const ForwardOutput<Scalar>& out, const ad::Tensor<Scalar>& gt_bone,
            const ad::Tensor<Scalar>& positions) const;

  /// Inference without recording: bone-aligned rotations per frame.
  std::vector<Rotations<double>> predict(const std::vector<Positions<double>>& frames) const;

  /// Packs frames into a (B*N) x 3 tensor.
  ad::Matrix<Scalar> pack_positions(const std::vector<Positions<double>>& frames) const;

 private:
  ForwardOutput<Scalar> forward_gat(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& x, bool training,
                                    std::mt19937_64* rng) const;
  ForwardOutput<Scalar> forward_mlp(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& x, bool training,
                                    std::mt19937_64* rng) const;
  ad::Tensor<Scalar> tile_embeddings(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& emb, Eigen::Index batch) const;

  ModelParams<Scalar> params_;
  KinematicTree tree_;
  RestBoneFrames frames_;
  GraphTopology topology_;
  std::vector<int> distal_;
  ad::Matrix<Scalar> mask_;        // N x N
  ad::Matrix<Scalar> refine_;      // N x N neighborhood mean minus identity on D
  ad::Matrix<Scalar> ancestors_;   // N x N path indicator (i, k): k on path root..i
  ad::Matrix<Scalar> rest_flat_;   // N x 9
  ad::Matrix<Scalar> offsets_;     // N x 3
};

/// Gram-Schmidt 6D head on a (B*N) x 6 tensor; columns 0..2 are a1.
template <typename Scalar>
ad::Tensor<Scalar> rot6d_to_matrix(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& six);

/// Mean geodesic distance (radians) between row-stacked rotations.
template <typename Scalar>
ad::Tensor<Scalar> geodesic_loss(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& pred, const ad::Tensor<Scalar>& gt);

/// Mean squared distance between FK of the rotations recovered from
/// `pred_bone` and `positions`.
template <typename Scalar>
ad::Tensor<Scalar> fk_consistency_loss(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& pred_bone,
                                       const KinematicTree& tree, const RestBoneFrames& frames,
                                       const ad::Tensor<Scalar>& positions);

/// Row-stacks per-frame rotations into (B*N) x 9.
template <typename Scalar>
ad::Matrix<Scalar> pack_rotations(const std::vector<Rotations<double>>& frames);
Rotations<double> unpack_frame(const Eigen::Ref<const Eigen::MatrixXd>& flat, Eigen::Index frame, int n);

/// Per-head N x N attention matrices of one frame from a forward output layer.
template <typename Scalar>
std::vector<Eigen::MatrixXd> frame_attention(const ad::Matrix<Scalar>& layer, Eigen::Index frame, int heads, int n);

/// Head-averaged layer matrices multiplied from the last layer down to the first.
Eigen::MatrixXd attention_flow(const std::vector<std::vector<Eigen::MatrixXd>>& stack);

/// Moves a model to a new rig. `name_map` pairs destination joint names with
/// source joint names; unmatched destination embeddings are zero.
template <typename Scalar>
ModelParams<Scalar> transfer_embeddings(const ModelParams<Scalar>& source, const KinematicTree& source_tree,
                                        const KinematicTree& dest_tree,
                                        const std::vector<std::pair<std::string, std::string>>& name_map);

/// Binary checkpoint: one JSON header line then little-endian float32 data.
std::string serialize_checkpoint(const ModelParams<float>& params);
ModelParams<float> deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const ModelParams<float>& params, const std::string& path);
ModelParams<float> load_checkpoint(const std::string& path);

}  // namespace boneik
