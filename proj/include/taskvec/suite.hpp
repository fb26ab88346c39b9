#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "taskvec/tensor.hpp"

namespace taskvec {

struct TaskData {
  Tensor train_x;  // (n_train, d)
  std::vector<int> train_y;
  Tensor test_x;  // (n_test, d)
  std::vector<int> test_y;
};

struct TaskSuite {
  std::vector<TaskData> tasks;
  int dim = 0;
  int classes = 0;
  double heterogeneity = 0.0;
  int rank = 0;
  std::uint64_t seed = 0;
};

// Synthetic multi-task family: every class mean lives in one shared rank-r
// subspace of feature space. The r anchor rotations act inside that subspace
// and their angles scale linearly with the heterogeneity knob, so h=0 makes
// all tasks draw from a single distribution. Tasks cycle through the anchors.
struct SuiteSpec {
  std::uint64_t seed = 1;
  int n_tasks = 4;
  int dim = 32;
  int classes = 3;
  double heterogeneity = 0.8;
  int rank = 4;
  int train_per_task = 2000;
  int test_per_task = 500;
  double mean_scale = 3.0;  // radius of the class-mean constellation
  double noise = 0.5;       // isotropic feature noise
  double max_angle = 1.8;   // radians swept by the anchor fan at h=1
  void validate() const;
};

// Deterministic in spec.seed. Features are quantized to float32 precision at
// generation time so in-memory suites and reloaded suites are bit-identical.
TaskSuite generate_task_suite(const SuiteSpec& spec);

// JSON manifest plus raw little-endian float32 features / int32 labels.
void save_suite(const TaskSuite& suite, const std::string& dir);
TaskSuite load_suite(const std::string& dir);

}  // namespace taskvec
