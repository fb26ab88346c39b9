#pragma once

#include <string>
#include <vector>

#include "taskvec/tensor.hpp"

namespace taskvec {

// Ordered, named collection of tensors. Layout (names + shapes, in order) is
// the identity that all interacting ParamSets must share.
class ParamSet {
 public:
  ParamSet() = default;

  void add(std::string name, Tensor value);
  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t k) const { return names_[k]; }
  const Tensor& tensor(std::size_t k) const { return tensors_[k]; }
  Tensor& tensor(std::size_t k) { return tensors_[k]; }
  const Tensor& tensor(const std::string& name) const;
  Tensor& tensor(const std::string& name);
  bool has(const std::string& name) const;

  bool same_layout(const ParamSet& other) const;
  std::size_t total_numel() const;
  bool all_finite() const;

  // Zero-valued ParamSet with this layout.
  ParamSet zeros_like() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

// 1-D concatenation of all tensors in layout order.
Tensor flatten(const ParamSet& params);
// Inverse of flatten against a reference layout.
ParamSet unflatten(const Tensor& flat, const ParamSet& reference);

struct TaskVector {
  ParamSet blocks;
  int task_id = -1;
};

struct PartitionSpec {
  enum class Kind { kPerTensor, kSingleBlock, kCustom };
  Kind kind = Kind::kPerTensor;
  // For kCustom: tensor names grouped into blocks; must cover every tensor
  // exactly once.
  std::vector<std::vector<std::string>> groups;

  static PartitionSpec per_tensor() { return {}; }
  static PartitionSpec single_block() {
    return {Kind::kSingleBlock, {}};
  }
  static PartitionSpec custom(std::vector<std::vector<std::string>> groups) {
    return {Kind::kCustom, std::move(groups)};
  }
};

// Resolved partition: block j owns the tensors at indices members[j] of the
// layout it was built against.
struct BlockPartition {
  std::vector<std::string> block_names;
  std::vector<std::vector<std::size_t>> members;
  std::size_t block_count() const { return block_names.size(); }
};

BlockPartition block_partition(const ParamSet& theta, const PartitionSpec& scheme);

// 1-D concatenation ordered block-by-block, members in listed order.
Tensor flatten_by_partition(const ParamSet& params, const BlockPartition& part);

// Immutable pool of task vectors sharing one layout and one block partition.
class TaskVectorPool {
 public:
  TaskVectorPool(std::vector<TaskVector> vectors,
                 const PartitionSpec& scheme = PartitionSpec::per_tensor());

  std::size_t task_count() const { return vectors_.size(); }   // N
  std::size_t block_count() const { return partition_.block_count(); }  // M
  const TaskVector& vec(std::size_t i) const { return vectors_[i]; }
  const BlockPartition& partition() const { return partition_; }

 private:
  std::vector<TaskVector> vectors_;
  BlockPartition partition_;
};

// N x M scaling coefficients aligned with a pool.
struct CoefficientMatrix {
  Tensor values;  // shape (N, M)

  CoefficientMatrix(std::size_t n, std::size_t m)
      : values({static_cast<std::int64_t>(n), static_cast<std::int64_t>(m)}) {}
  explicit CoefficientMatrix(Tensor v);

  static CoefficientMatrix uniform(std::size_t n, std::size_t m, double value);

  double at(std::size_t i, std::size_t j) const {
    return values[i * static_cast<std::size_t>(values.dim(1)) + j];
  }
  double& at(std::size_t i, std::size_t j) {
    return values[i * static_cast<std::size_t>(values.dim(1)) + j];
  }
  std::size_t tasks() const { return static_cast<std::size_t>(values.dim(0)); }
  std::size_t blocks() const { return static_cast<std::size_t>(values.dim(1)); }
};

TaskVector derive_task_vector(const ParamSet& theta_t, const ParamSet& theta_0,
                              int task_id = -1);

// Theta_0 + sum_i sum_j lam(i,j) * tau_i^j, accumulated task-major then
// block-major so results are bit-reproducible.
ParamSet compose(const ParamSet& theta_0, const TaskVectorPool& pool,
                 const CoefficientMatrix& lam);

ParamSet task_addition(const ParamSet& theta_0, const TaskVectorPool& pool,
                       double lambda_scalar);

// Cumulative singular-value energy of the stacked (N x D) pool matrix:
// e_k = sum_{i<=k} s_i^2 / sum_i s_i^2, k = 1..min(N, D).
std::vector<double> svd_energy(const TaskVectorPool& pool);

}  // namespace taskvec
