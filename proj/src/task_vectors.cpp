#include "taskvec/task_vectors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace taskvec {
namespace {

// Cyclic Jacobi eigenvalues of a dense symmetric matrix, returned unsorted.
// Fine for the small Gram matrices this module sees.
std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
  auto at = [&](std::size_t r, std::size_t c) -> double& { return a[r * n + c]; };
  double scale = 0.0;
  for (std::size_t i = 0; i < n * n; ++i) scale = std::max(scale, std::fabs(a[i]));
  if (scale == 0.0) return std::vector<double>(n, 0.0);

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += at(p, q) * at(p, q);
    }
    if (off < 1e-28 * scale * scale) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p);
          const double akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k);
          const double aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = at(i, i);
  return eig;
}

}  // namespace

void ParamSet::add(std::string name, Tensor value) {
  if (has(name)) {
    throw std::invalid_argument("ParamSet: duplicate tensor name '" + name + "'");
  }
  if (!value.all_finite()) {
    throw NumericError("ParamSet: non-finite values in tensor '" + name + "'");
  }
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

const Tensor& ParamSet::tensor(const std::string& name) const {
  for (std::size_t k = 0; k < names_.size(); ++k) {
    if (names_[k] == name) return tensors_[k];
  }
  throw std::invalid_argument("ParamSet: no tensor named '" + name + "'");
}

Tensor& ParamSet::tensor(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParamSet*>(this)->tensor(name));
}

bool ParamSet::has(const std::string& name) const {
  for (const std::string& n : names_) {
    if (n == name) return true;
  }
  return false;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (names_.size() != other.names_.size()) return false;
  for (std::size_t k = 0; k < names_.size(); ++k) {
    if (names_[k] != other.names_[k]) return false;
    if (tensors_[k].shape() != other.tensors_[k].shape()) return false;
  }
  return true;
}

std::size_t ParamSet::total_numel() const {
  std::size_t total = 0;
  for (const Tensor& t : tensors_) total += t.numel();
  return total;
}

bool ParamSet::all_finite() const {
  for (const Tensor& t : tensors_) {
    if (!t.all_finite()) return false;
  }
  return true;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (std::size_t k = 0; k < names_.size(); ++k) {
    out.add(names_[k], Tensor(tensors_[k].shape()));
  }
  return out;
}

Tensor flatten(const ParamSet& params) {
  Tensor flat({static_cast<std::int64_t>(params.total_numel())});
  std::size_t pos = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& t = params.tensor(k);
    for (std::size_t i = 0; i < t.numel(); ++i) flat[pos++] = t[i];
  }
  return flat;
}

ParamSet unflatten(const Tensor& flat, const ParamSet& reference) {
  if (flat.numel() != reference.total_numel()) {
    throw ShapeError("unflatten: flat tensor has " + std::to_string(flat.numel()) +
                     " elements, layout needs " +
                     std::to_string(reference.total_numel()));
  }
  ParamSet out;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < reference.size(); ++k) {
    Tensor t(reference.tensor(k).shape());
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = flat[pos++];
    out.add(reference.name(k), std::move(t));
  }
  return out;
}

BlockPartition block_partition(const ParamSet& theta, const PartitionSpec& scheme) {
  BlockPartition part;
  switch (scheme.kind) {
    case PartitionSpec::Kind::kPerTensor:
      for (std::size_t k = 0; k < theta.size(); ++k) {
        part.block_names.push_back(theta.name(k));
        part.members.push_back({k});
      }
      break;
    case PartitionSpec::Kind::kSingleBlock: {
      std::vector<std::size_t> all(theta.size());
      for (std::size_t k = 0; k < theta.size(); ++k) all[k] = k;
      part.block_names.push_back("all");
      part.members.push_back(std::move(all));
      break;
    }
    case PartitionSpec::Kind::kCustom: {
      std::unordered_map<std::string, std::size_t> index;
      for (std::size_t k = 0; k < theta.size(); ++k) index[theta.name(k)] = k;
      std::vector<bool> covered(theta.size(), false);
      for (const auto& group : scheme.groups) {
        if (group.empty()) {
          throw std::invalid_argument("block_partition: empty block in scheme");
        }
        std::vector<std::size_t> members;
        std::string bname;
        for (const std::string& name : group) {
          auto it = index.find(name);
          if (it == index.end()) {
            throw std::invalid_argument("block_partition: unknown tensor '" +
                                        name + "'");
          }
          if (covered[it->second]) {
            throw std::invalid_argument("block_partition: tensor '" + name +
                                        "' appears in more than one block");
          }
          covered[it->second] = true;
          members.push_back(it->second);
          if (!bname.empty()) bname += "+";
          bname += name;
        }
        part.block_names.push_back(std::move(bname));
        part.members.push_back(std::move(members));
      }
      for (std::size_t k = 0; k < covered.size(); ++k) {
        if (!covered[k]) {
          throw std::invalid_argument("block_partition: tensor '" +
                                      theta.name(k) + "' not covered");
        }
      }
      break;
    }
  }
  return part;
}

Tensor flatten_by_partition(const ParamSet& params, const BlockPartition& part) {
  Tensor flat({static_cast<std::int64_t>(params.total_numel())});
  std::size_t pos = 0;
  for (const auto& block : part.members) {
    for (std::size_t k : block) {
      const Tensor& t = params.tensor(k);
      for (std::size_t i = 0; i < t.numel(); ++i) flat[pos++] = t[i];
    }
  }
  if (pos != flat.numel()) {
    throw ShapeError("flatten_by_partition: partition does not cover layout");
  }
  return flat;
}

TaskVectorPool::TaskVectorPool(std::vector<TaskVector> vectors,
                               const PartitionSpec& scheme)
    : vectors_(std::move(vectors)) {
  if (vectors_.empty()) {
    throw std::invalid_argument("TaskVectorPool: need at least one task vector");
  }
  for (std::size_t i = 1; i < vectors_.size(); ++i) {
    if (!vectors_[i].blocks.same_layout(vectors_[0].blocks)) {
      throw ShapeError("TaskVectorPool: task vector " + std::to_string(i) +
                       " has a different layout");
    }
  }
  partition_ = block_partition(vectors_[0].blocks, scheme);
}

CoefficientMatrix::CoefficientMatrix(Tensor v) : values(std::move(v)) {
  if (values.ndim() != 2) {
    throw ShapeError("CoefficientMatrix: expected 2-D values, got " +
                     shape_str(values.shape()));
  }
  if (!values.all_finite()) {
    throw NumericError("CoefficientMatrix: non-finite coefficients");
  }
}

CoefficientMatrix CoefficientMatrix::uniform(std::size_t n, std::size_t m,
                                             double value) {
  CoefficientMatrix lam(n, m);
  for (std::size_t i = 0; i < lam.values.numel(); ++i) lam.values[i] = value;
  return lam;
}

TaskVector derive_task_vector(const ParamSet& theta_t, const ParamSet& theta_0,
                              int task_id) {
  if (!theta_t.same_layout(theta_0)) {
    throw ShapeError("derive_task_vector: layout mismatch");
  }
  TaskVector tau;
  tau.task_id = task_id;
  for (std::size_t k = 0; k < theta_0.size(); ++k) {
    Tensor diff(theta_0.tensor(k).shape());
    const Tensor& a = theta_t.tensor(k);
    const Tensor& b = theta_0.tensor(k);
    for (std::size_t i = 0; i < diff.numel(); ++i) diff[i] = a[i] - b[i];
    tau.blocks.add(theta_0.name(k), std::move(diff));
  }
  return tau;
}

ParamSet compose(const ParamSet& theta_0, const TaskVectorPool& pool,
                 const CoefficientMatrix& lam) {
  if (!theta_0.same_layout(pool.vec(0).blocks)) {
    throw ShapeError("compose: base layout differs from pool layout");
  }
  if (lam.tasks() != pool.task_count() || lam.blocks() != pool.block_count()) {
    throw ShapeError("compose: coefficient matrix is " +
                     std::to_string(lam.tasks()) + "x" +
                     std::to_string(lam.blocks()) + ", pool needs " +
                     std::to_string(pool.task_count()) + "x" +
                     std::to_string(pool.block_count()));
  }
  ParamSet out;
  for (std::size_t k = 0; k < theta_0.size(); ++k) {
    out.add(theta_0.name(k), theta_0.tensor(k));
  }
  const BlockPartition& part = pool.partition();
  for (std::size_t i = 0; i < pool.task_count(); ++i) {
    const ParamSet& tau = pool.vec(i).blocks;
    for (std::size_t j = 0; j < part.block_count(); ++j) {
      const double c = lam.at(i, j);
      if (c == 0.0) continue;
      for (std::size_t k : part.members[j]) {
        Tensor& dst = out.tensor(k);
        const Tensor& src = tau.tensor(k);
        for (std::size_t e = 0; e < dst.numel(); ++e) dst[e] += c * src[e];
      }
    }
  }
  if (!out.all_finite()) {
    throw NumericError("compose: non-finite result");
  }
  return out;
}

ParamSet task_addition(const ParamSet& theta_0, const TaskVectorPool& pool,
                       double lambda_scalar) {
  if (!std::isfinite(lambda_scalar)) {
    throw std::invalid_argument("task_addition: scale must be finite");
  }
  return compose(theta_0, pool,
                 CoefficientMatrix::uniform(pool.task_count(),
                                            pool.block_count(), lambda_scalar));
}

std::vector<double> svd_energy(const TaskVectorPool& pool) {
  const std::size_t n = pool.task_count();
  const std::size_t d = pool.vec(0).blocks.total_numel();

  std::vector<Tensor> flats;
  flats.reserve(n);
  for (std::size_t i = 0; i < n; ++i) flats.push_back(flatten(pool.vec(i).blocks));

  std::vector<double> gram(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t e = 0; e < d; ++e) acc += flats[i][e] * flats[j][e];
      gram[i * n + j] = acc;
      gram[j * n + i] = acc;
    }
  }

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += gram[i * n + i];
  if (total <= 0.0) {
    throw std::invalid_argument("svd_energy: all-zero pool has no energy");
  }

  std::vector<double> eig = symmetric_eigenvalues(std::move(gram), n);
  for (double& e : eig) e = std::max(e, 0.0);
  std::sort(eig.begin(), eig.end(), std::greater<double>());

  const std::size_t rank_cap = std::min(n, d);
  std::vector<double> curve(rank_cap);
  double prefix = 0.0;
  for (std::size_t k = 0; k < rank_cap; ++k) {
    prefix += eig[k];
    curve[k] = prefix / total;
  }
  return curve;
}

}  // namespace taskvec
