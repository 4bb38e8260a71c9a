#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "boneik/dataio.hpp"
#include "boneik/metrics.hpp"
#include "boneik/model.hpp"

namespace boneik {

/// AdamW state. Moments are kept per parameter tensor, in parameter order.
template <typename Scalar>
struct OptimState {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<ad::Matrix<Scalar>> m;
  std::vector<ad::Matrix<Scalar>> v;
};

/// One decoupled-decay Adam update from the gradients stored on the
/// parameters. Missing gradients count as zero. Decay skips `is_no_decay`.
template <typename Scalar>
void adamw_step(OptimState<Scalar>& state, std::vector<NamedTensor<Scalar>>& params);

struct TrainConfig {
  int batch_size = 64;
  int max_epochs = 30;
  int patience = 3;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  double alpha = 0.1;

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::ordered_json& j);

/// Stops after `patience` consecutive epochs without strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Records an epoch's validation value; returns true when training should stop.
  bool update(int epoch, double value);
  int best_epoch() const { return best_epoch_; }
  double best_value() const { return best_; }

 private:
  int patience_;
  int wait_ = 0;
  int best_epoch_ = -1;
  double best_ = std::numeric_limits<double>::infinity();
};

struct HistoryRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_mpjae = 0.0;
};

struct TrainResult {
  ModelParams<float> best;
  std::vector<HistoryRow> history;
  int best_epoch = 0;
  bool stopped_early = false;
};

/// Minibatch training on L_rot + alpha L_fk with per-epoch validation MPJAE.
/// `on_epoch` (optional) observes each history row as it is produced.
TrainResult train(Model<float>& model, const PairedFrames& train_set, const PairedFrames& val_set,
                  const TrainConfig& config, const std::function<void(const HistoryRow&)>& on_epoch = {});

std::string history_csv(const std::vector<HistoryRow>& history);

/// Maps root-space positions of many frames to bone-aligned rotations.
using Predictor = std::function<std::vector<Rotations<double>>(const std::vector<Positions<double>>&)>;

Predictor model_predictor(const Model<float>& model);
/// Emits the rest pose (identity locals) for every frame.
Predictor rest_pose_predictor(const KinematicTree& tree, const RestBoneFrames& frames);

/// Full metric suite. Predictions are made from `inputs` (defaults to the
/// clean positions); position errors are measured against the clean positions.
EvalReport evaluate(const Predictor& predict, const PairedFrames& data, const KinematicTree& tree,
                    const RestBoneFrames& frames, const std::vector<Positions<double>>* inputs = nullptr);

/// Mean MPJAE in degrees (rotation metrics only).
double evaluate_mpjae(const Predictor& predict, const PairedFrames& data, const KinematicTree& tree,
                      const RestBoneFrames& frames);

}  // namespace boneik
