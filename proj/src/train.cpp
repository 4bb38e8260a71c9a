#include "boneik/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "boneik/error.hpp"

namespace boneik {

using nlohmann::ordered_json;

template <typename Scalar>
void adamw_step(OptimState<Scalar>& state, std::vector<NamedTensor<Scalar>>& params) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(ad::Matrix<Scalar>::Zero(p.tensor.rows(), p.tensor.cols()));
      state.v.push_back(ad::Matrix<Scalar>::Zero(p.tensor.rows(), p.tensor.cols()));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adamw_step: parameter count changed");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const auto b1 = Scalar(state.beta1);
  const auto b2 = Scalar(state.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = params[k].tensor.mutable_value();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.rows() != w.rows() || m.cols() != w.cols()) {
      throw ShapeError("adamw_step: moment shape mismatch for '" + params[k].name + "'");
    }
    const auto& g = params[k].tensor.grad();
    if (g.size() != 0) {
      if (g.rows() != w.rows() || g.cols() != w.cols()) {
        throw ShapeError("adamw_step: gradient shape mismatch for '" + params[k].name + "'");
      }
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    } else {
      m *= b1;
      v *= b2;
    }
    if (state.weight_decay != 0.0 && !is_no_decay(params[k].name)) {
      w *= Scalar(1.0 - state.lr * state.weight_decay);
    }
    const auto lr = Scalar(state.lr);
    const auto inv_c1 = Scalar(1.0 / c1);
    const auto inv_c2 = Scalar(1.0 / c2);
    const auto eps = Scalar(state.eps);
    w.array() -= lr * (m.array() * inv_c1) / ((v.array() * inv_c2).sqrt() + eps);
  }
}

template void adamw_step<float>(OptimState<float>&, std::vector<NamedTensor<float>>&);
template void adamw_step<double>(OptimState<double>&, std::vector<NamedTensor<double>>&);

void TrainConfig::validate() const {
  if (batch_size < 1) throw ValidationError("train config: batch_size must be at least 1");
  if (max_epochs < 1) throw ValidationError("train config: max_epochs must be at least 1");
  if (patience < 1) throw ValidationError("train config: patience must be at least 1");
  if (!(lr > 0.0)) throw ValidationError("train config: lr must be positive");
  if (!(weight_decay >= 0.0)) throw ValidationError("train config: weight_decay must be nonnegative");
  if (!(alpha >= 0.0)) throw ValidationError("train config: alpha must be nonnegative");
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["seed"] = c.seed;
  j["alpha"] = c.alpha;
  return j;
}

TrainConfig train_config_from_json(const ordered_json& j) {
  if (!j.is_object()) throw ValidationError("train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "batch_size") {
        c.batch_size = v.get<int>();
      } else if (key == "max_epochs") {
        c.max_epochs = v.get<int>();
      } else if (key == "patience") {
        c.patience = v.get<int>();
      } else if (key == "lr") {
        c.lr = v.get<double>();
      } else if (key == "weight_decay") {
        c.weight_decay = v.get<double>();
      } else if (key == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (key == "alpha") {
        c.alpha = v.get<double>();
      } else {
        throw ValidationError("train config: unknown field '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

bool EarlyStopping::update(int epoch, double value) {
  if (value < best_) {
    best_ = value;
    best_epoch_ = epoch;
    wait_ = 0;
    return false;
  }
  ++wait_;
  return wait_ >= patience_;
}

namespace {

template <typename T>
std::vector<T> gather(const std::vector<T>& src, const std::vector<std::size_t>& idx, std::size_t begin,
                      std::size_t end) {
  std::vector<T> out;
  out.reserve(end - begin);
  for (std::size_t k = begin; k < end; ++k) out.push_back(src[idx[k]]);
  return out;
}

}  // namespace

TrainResult train(Model<float>& model, const PairedFrames& train_set, const PairedFrames& val_set,
                  const TrainConfig& config, const std::function<void(const HistoryRow&)>& on_epoch) {
  config.validate();
  if (train_set.size() == 0 || val_set.size() == 0) throw ValidationError("train: datasets must be nonempty");
  model.params().config.alpha = config.alpha;

  OptimState<float> opt;
  opt.lr = config.lr;
  opt.weight_decay = config.weight_decay;
  std::mt19937_64 rng(config.seed);
  EarlyStopping stopper(config.patience);
  TrainResult result;
  const auto predictor = model_predictor(model);

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t begin = 0, b = 0; begin < order.size(); begin += batch, ++b) {
      const std::size_t end = std::min(order.size(), begin + batch);
      const auto pos = gather(train_set.positions, order, begin, end);
      const auto bone = gather(train_set.bone, order, begin, end);
      const auto x = ad::Tensor<float>::constant(model.pack_positions(pos));
      const auto gt = ad::Tensor<float>::constant(pack_rotations<float>(bone));

      ad::Tape<float> tape;
      const auto out = model.forward(tape, x, true, &rng);
      const auto loss = model.loss(tape, out, gt, x);
      const double value = loss.total.item();
      if (!std::isfinite(value)) {
        throw DivergenceError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b + 1));
      }
      model.params().zero_grad();
      tape.backward(loss.total);
      adamw_step(opt, model.params().tensors);
      loss_sum += value * static_cast<double>(end - begin);
      seen += end - begin;
    }
    HistoryRow row{epoch, loss_sum / static_cast<double>(seen), evaluate_mpjae(predictor, val_set, model.tree(),
                                                                              model.frames())};
    result.history.push_back(row);
    if (on_epoch) on_epoch(row);
    const bool improved = row.val_mpjae < stopper.best_value();
    const bool stop = stopper.update(epoch, row.val_mpjae);
    if (improved) {
      result.best = model.params().cast<float>();
      result.best_epoch = epoch;
    }
    if (stop) {
      result.stopped_early = epoch < config.max_epochs;
      break;
    }
  }
  model.params().zero_grad();
  if (result.best.tensors.empty()) result.best = model.params().cast<float>();
  return result;
}

std::string history_csv(const std::vector<HistoryRow>& history) {
  std::string out = "epoch,train_loss,val_mpjae\n";
  char buf[96];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", r.epoch, r.train_loss, r.val_mpjae);
    out += buf;
  }
  return out;
}

Predictor model_predictor(const Model<float>& model) {
  return [&model](const std::vector<Positions<double>>& frames) { return model.predict(frames); };
}

Predictor rest_pose_predictor(const KinematicTree& tree, const RestBoneFrames& frames) {
  const auto rest = frames.cast<double>();
  const auto pose = make_pose<double>(tree, rest, Rotations<double>(static_cast<std::size_t>(tree.size()),
                                                                    Mat3<double>::Identity()));
  return [bone = pose.bone](const std::vector<Positions<double>>& in) {
    return std::vector<Rotations<double>>(in.size(), bone);
  };
}

EvalReport evaluate(const Predictor& predict, const PairedFrames& data, const KinematicTree& tree,
                    const RestBoneFrames& frames, const std::vector<Positions<double>>* inputs) {
  if (data.size() == 0) throw ValidationError("evaluate: empty dataset");
  if (!data.positions.empty() && static_cast<int>(data.positions.front().size()) != tree.size()) {
    throw ValidationError("evaluate: dataset does not match rig '" + tree.name + "'");
  }
  const auto& in = inputs ? *inputs : data.positions;
  if (in.size() != data.size()) throw ShapeError("evaluate: input frame count mismatch");
  const auto rest = frames.cast<double>();
  const auto pred = predict(in);
  std::vector<FrameMetrics> per_frame;
  per_frame.reserve(data.size());
  for (std::size_t f = 0; f < data.size(); ++f) {
    const auto locals = locals_from_bone<double>(pred[f], rest, tree);
    const auto pos = fk<double>(tree, locals).positions;
    per_frame.push_back(frame_metrics(pred[f], data.bone[f], pos, data.positions[f], tree, rest));
  }
  return aggregate(per_frame);
}

double evaluate_mpjae(const Predictor& predict, const PairedFrames& data, const KinematicTree& tree,
                      const RestBoneFrames& frames) {
  const auto rest = frames.cast<double>();
  const auto pred = predict(data.positions);
  std::vector<double> values;
  values.reserve(data.size());
  for (std::size_t f = 0; f < data.size(); ++f) values.push_back(mpjae(pred[f], data.bone[f], tree, rest));
  return stable_mean(std::move(values));
}

}  // namespace boneik
