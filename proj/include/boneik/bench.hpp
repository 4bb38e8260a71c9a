#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "boneik/model.hpp"

namespace boneik {

inline const std::vector<int> kDefaultBatchSizes{1, 2, 4, 8, 16, 32, 64};

struct BenchRow {
  int batch_size = 0;
  double fps = 0.0;
  double wall_time = 0.0;  // seconds
  long iterations = 0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  int threads = 1;
  std::string precision = "float32";
};

/// Times forward pass plus recovery of local rotations on pre-generated
/// random poses. Each batch size gets one untimed warmup pass, then runs for
/// at least `min_duration` seconds. With `threads` > 1 the frames of each
/// batch are split across worker threads.
BenchReport bench_inference(const Model<float>& model, const std::vector<int>& batch_sizes, double min_duration,
                            std::uint64_t seed = 0, int threads = 1);

/// batch_size,fps
std::string bench_csv(const BenchReport& report);

}  // namespace boneik
