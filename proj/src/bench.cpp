#include "boneik/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <random>
#include <thread>

#include "boneik/dataio.hpp"
#include "boneik/error.hpp"

namespace boneik {

namespace {

/// One inference pass over a packed batch: forward plus bone -> local recovery.
class InferencePass {
 public:
  InferencePass(const Model<float>& model, ad::Matrix<float> positions)
      : model_(model),
        input_(ad::Tensor<float>::constant(std::move(positions))),
        rest_(model.frames().cast<float>()),
        batch_(input_.rows() / model.joint_count()),
        bone_(static_cast<std::size_t>(model.joint_count())),
        local_(static_cast<std::size_t>(model.joint_count())) {}

  void run() {
    ad::Tape<float> tape(false);
    const auto out = model_.forward(tape, input_, false);
    const int n = model_.joint_count();
    const auto& flat = out.bone.value();
    for (Eigen::Index b = 0; b < batch_; ++b) {
      for (int i = 0; i < n; ++i) {
        bone_[static_cast<std::size_t>(i)] = Eigen::Map<const Mat3<float>>(flat.data() + (b * n + i) * 9);
      }
      local_ = locals_from_bone<float>(bone_, rest_, model_.tree());
    }
  }

 private:
  const Model<float>& model_;
  ad::Tensor<float> input_;
  Rotations<float> rest_;
  Eigen::Index batch_;
  Rotations<float> bone_;
  Rotations<float> local_;
};

}  // namespace

BenchReport bench_inference(const Model<float>& model, const std::vector<int>& batch_sizes, double min_duration,
                            std::uint64_t seed, int threads) {
  if (threads < 1) throw ValidationError("bench: threads must be at least 1");
  BenchReport report;
  report.threads = threads;
  const auto& tree = model.tree();
  for (int bs : batch_sizes) {
    if (bs < 1) throw ValidationError("bench: batch sizes must be positive");
    const auto data = generate_synthetic(tree, static_cast<std::size_t>(bs), seed,
                                         uniform_caps(tree, 1.0));
    std::vector<Positions<double>> frames;
    for (const auto& f : data.frames) frames.push_back(*f.p);

    const int workers = std::min(threads, bs);
    std::vector<InferencePass> passes;
    passes.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
      const auto begin = frames.begin() + static_cast<std::ptrdiff_t>(static_cast<long>(bs) * w / workers);
      const auto end = frames.begin() + static_cast<std::ptrdiff_t>(static_cast<long>(bs) * (w + 1) / workers);
      passes.emplace_back(model, model.pack_positions(std::vector<Positions<double>>(begin, end)));
    }
    auto run_once = [&]() {
      if (workers == 1) {
        passes.front().run();
        return;
      }
      std::vector<std::thread> pool;
      for (auto& p : passes) pool.emplace_back([&p] { p.run(); });
      for (auto& t : pool) t.join();
    };

    run_once();  // warmup
    using clock = std::chrono::steady_clock;
    long iterations = 0;
    const auto start = clock::now();
    double elapsed = 0.0;
    do {
      run_once();
      ++iterations;
      elapsed = std::chrono::duration<double>(clock::now() - start).count();
    } while (elapsed < min_duration);
    report.rows.push_back({bs, static_cast<double>(bs) * static_cast<double>(iterations) / elapsed, elapsed,
                           iterations});
  }
  return report;
}

std::string bench_csv(const BenchReport& report) {
  std::string out = "batch_size,fps\n";
  char buf[64];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.6g\n", r.batch_size, r.fps);
    out += buf;
  }
  return out;
}

}  // namespace boneik
