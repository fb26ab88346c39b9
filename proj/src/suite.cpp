#include "taskvec/suite.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskvec/rng.hpp"

namespace taskvec {

namespace {

// Child-stream labels under the suite seed.
constexpr std::uint64_t kBasisStream = 101;
constexpr std::uint64_t kPlaneStream = 102;
constexpr std::uint64_t kTaskStream = 1000;  // + task index

// Columns of a (rows x cols) Gaussian draw, Gram-Schmidt orthonormalized.
// Requires cols <= rows.
std::vector<std::vector<double>> orthonormal_columns(int rows, int cols,
                                                     RngStream& rng) {
  std::vector<std::vector<double>> q(cols, std::vector<double>(rows));
  for (int c = 0; c < cols; ++c) {
    for (;;) {
      for (int i = 0; i < rows; ++i) q[c][i] = rng.normal();
      for (int p = 0; p < c; ++p) {
        double dot = 0.0;
        for (int i = 0; i < rows; ++i) dot += q[c][i] * q[p][i];
        for (int i = 0; i < rows; ++i) q[c][i] -= dot * q[p][i];
      }
      double norm = 0.0;
      for (int i = 0; i < rows; ++i) norm += q[c][i] * q[c][i];
      norm = std::sqrt(norm);
      if (norm > 1e-6) {
        for (int i = 0; i < rows; ++i) q[c][i] /= norm;
        break;
      }
    }
  }
  return q;
}

// Rotation by angle in the plane spanned by orthonormal p, q; identity on the
// orthogonal complement: R v = v + (cos-1)(<p,v>p + <q,v>q) + sin(<p,v>q - <q,v>p).
std::vector<double> rotate_in_plane(const std::vector<double>& v,
                                    const std::vector<double>& p,
                                    const std::vector<double>& q,
                                    double angle) {
  const int n = static_cast<int>(v.size());
  double vp = 0.0, vq = 0.0;
  for (int i = 0; i < n; ++i) {
    vp += p[i] * v[i];
    vq += q[i] * v[i];
  }
  const double c = std::cos(angle), s = std::sin(angle);
  std::vector<double> out(v);
  for (int i = 0; i < n; ++i) {
    out[i] += (c - 1.0) * (vp * p[i] + vq * q[i]) + s * (vp * q[i] - vq * p[i]);
  }
  return out;
}

void sample_split(Tensor& x, std::vector<int>& y, int count, int d, int classes,
                  const std::vector<std::vector<double>>& means, double noise,
                  RngStream& rng) {
  x = Tensor({count, d});
  y.resize(static_cast<std::size_t>(count));
  for (int n = 0; n < count; ++n) {
    const int label = static_cast<int>(rng.uniform_int(classes));
    y[static_cast<std::size_t>(n)] = label;
    const auto& mean = means[static_cast<std::size_t>(label)];
    for (int i = 0; i < d; ++i) {
      const double v = mean[static_cast<std::size_t>(i)] + noise * rng.normal();
      // Quantize to float32 so persisted and in-memory features agree bitwise.
      x[static_cast<std::size_t>(n * d + i)] =
          static_cast<double>(static_cast<float>(v));
    }
  }
}

void write_raw(const std::string& path, const void* data, std::size_t bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(static_cast<const char*>(data),
            static_cast<std::streamsize>(bytes));
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<char> read_raw(const std::string& path, std::size_t bytes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<char> buf(bytes);
  in.read(buf.data(), static_cast<std::streamsize>(bytes));
  if (in.gcount() != static_cast<std::streamsize>(bytes)) {
    throw std::runtime_error("truncated data in " + path);
  }
  return buf;
}

void save_split(const std::string& dir, const std::string& stem,
                const Tensor& x, const std::vector<int>& y) {
  const std::size_t n = y.size();
  std::vector<float> fx(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    fx[i] = static_cast<float>(x[i]);
  }
  std::vector<std::int32_t> iy(n);
  for (std::size_t i = 0; i < n; ++i) iy[i] = y[i];
  write_raw(dir + "/" + stem + "_x.f32", fx.data(), fx.size() * sizeof(float));
  write_raw(dir + "/" + stem + "_y.i32", iy.data(),
            iy.size() * sizeof(std::int32_t));
}

void load_split(const std::string& dir, const std::string& stem, int count,
                int d, int classes, Tensor& x, std::vector<int>& y) {
  const std::size_t nx = static_cast<std::size_t>(count) *
                         static_cast<std::size_t>(d);
  auto xb = read_raw(dir + "/" + stem + "_x.f32", nx * sizeof(float));
  auto yb = read_raw(dir + "/" + stem + "_y.i32",
                     static_cast<std::size_t>(count) * sizeof(std::int32_t));
  x = Tensor({count, d});
  const float* fx = reinterpret_cast<const float*>(xb.data());
  for (std::size_t i = 0; i < nx; ++i) x[i] = static_cast<double>(fx[i]);
  const std::int32_t* iy = reinterpret_cast<const std::int32_t*>(yb.data());
  y.resize(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    if (iy[i] < 0 || iy[i] >= classes) {
      throw std::runtime_error("label out of range in " + dir + "/" + stem);
    }
    y[static_cast<std::size_t>(i)] = iy[i];
  }
  if (!x.all_finite()) {
    throw std::runtime_error("non-finite feature in " + dir + "/" + stem);
  }
}

}  // namespace

void SuiteSpec::validate() const {
  if (n_tasks < 2) throw std::invalid_argument("n_tasks must be >= 2");
  if (dim < 2) throw std::invalid_argument("dim must be >= 2");
  if (classes < 2) throw std::invalid_argument("classes must be >= 2");
  if (rank < 1 || rank > dim) {
    throw std::invalid_argument("rank must be in [1, dim]");
  }
  if (heterogeneity < 0.0 || heterogeneity > 1.0) {
    throw std::invalid_argument("heterogeneity must be in [0, 1]");
  }
  if (train_per_task < 1 || test_per_task < 1) {
    throw std::invalid_argument("split sizes must be positive");
  }
  if (mean_scale <= 0.0 || noise <= 0.0) {
    throw std::invalid_argument("mean_scale and noise must be positive");
  }
}

TaskSuite generate_task_suite(const SuiteSpec& spec) {
  spec.validate();
  const int d = spec.dim, r = spec.rank, C = spec.classes;
  RngStream root(spec.seed);

  RngStream basis_rng = root.split(kBasisStream);
  const auto q_cols = orthonormal_columns(d, r, basis_rng);  // r columns in R^d

  // Base class directions in the rank-r coordinate frame: canonical axes when
  // they fit, otherwise an equiangular fan in the leading 2-plane. Centered so
  // the class-mean centroid sits at the origin (zero-mean features); centering
  // shifts every direction equally, so pairwise distances are untouched.
  std::vector<std::vector<double>> u(static_cast<std::size_t>(C),
                                     std::vector<double>(r, 0.0));
  if (C <= r) {
    for (int c = 0; c < C; ++c) u[static_cast<std::size_t>(c)][c] = 1.0;
  } else {
    for (int c = 0; c < C; ++c) {
      const double a = 2.0 * 3.14159265358979323846 * c / C;
      u[static_cast<std::size_t>(c)][0] = std::cos(a);
      if (r >= 2) u[static_cast<std::size_t>(c)][1] = std::sin(a);
    }
  }
  for (int k = 0; k < r; ++k) {
    double centroid = 0.0;
    for (int c = 0; c < C; ++c) centroid += u[static_cast<std::size_t>(c)][k];
    centroid /= C;
    for (int c = 0; c < C; ++c) u[static_cast<std::size_t>(c)][k] -= centroid;
  }

  // One rotation anchor per rank component; anchor a sweeps angle
  // h * max_angle * a/(r-1) inside its own random 2-plane of the subspace.
  RngStream plane_rng = root.split(kPlaneStream);
  std::vector<std::vector<std::vector<double>>> anchor_means(
      static_cast<std::size_t>(r));
  for (int a = 0; a < r; ++a) {
    std::vector<std::vector<double>> pq;
    if (r >= 2) pq = orthonormal_columns(r, 2, plane_rng);
    const double angle =
        (r >= 2) ? spec.heterogeneity * spec.max_angle * a / (r - 1) : 0.0;
    auto& means = anchor_means[static_cast<std::size_t>(a)];
    means.resize(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
      std::vector<double> uc = u[static_cast<std::size_t>(c)];
      if (r >= 2) uc = rotate_in_plane(uc, pq[0], pq[1], angle);
      // Lift to feature space: mean = scale * Q * uc.
      std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
      for (int k = 0; k < r; ++k) {
        for (int i = 0; i < d; ++i) {
          mean[static_cast<std::size_t>(i)] +=
              spec.mean_scale * q_cols[static_cast<std::size_t>(k)]
                                      [static_cast<std::size_t>(i)] *
              uc[static_cast<std::size_t>(k)];
        }
      }
      means[static_cast<std::size_t>(c)] = std::move(mean);
    }
  }

  TaskSuite suite;
  suite.dim = d;
  suite.classes = C;
  suite.heterogeneity = spec.heterogeneity;
  suite.rank = r;
  suite.seed = spec.seed;
  suite.tasks.resize(static_cast<std::size_t>(spec.n_tasks));
  for (int t = 0; t < spec.n_tasks; ++t) {
    const auto& means =
        anchor_means[static_cast<std::size_t>(t % r)];
    RngStream task_rng =
        root.split(kTaskStream + static_cast<std::uint64_t>(t));
    auto& task = suite.tasks[static_cast<std::size_t>(t)];
    sample_split(task.train_x, task.train_y, spec.train_per_task, d, C, means,
                 spec.noise, task_rng);
    sample_split(task.test_x, task.test_y, spec.test_per_task, d, C, means,
                 spec.noise, task_rng);
  }
  return suite;
}

void save_suite(const TaskSuite& suite, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "taskvec-suite";
  manifest["version"] = 1;
  manifest["dim"] = suite.dim;
  manifest["classes"] = suite.classes;
  manifest["heterogeneity"] = suite.heterogeneity;
  manifest["rank"] = suite.rank;
  manifest["seed"] = suite.seed;
  nlohmann::json tasks = nlohmann::json::array();
  for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
    const auto& task = suite.tasks[t];
    char stem[32];
    std::snprintf(stem, sizeof(stem), "task%zu", t);
    save_split(dir, std::string(stem) + "_train", task.train_x, task.train_y);
    save_split(dir, std::string(stem) + "_test", task.test_x, task.test_y);
    tasks.push_back({{"stem", stem},
                     {"train_count", task.train_y.size()},
                     {"test_count", task.test_y.size()}});
  }
  manifest["tasks"] = tasks;
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw std::runtime_error("cannot open for writing: " + dir);
  out << manifest.dump(2) << "\n";
}

TaskSuite load_suite(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw std::runtime_error("cannot open: " + dir + "/manifest.json");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("bad suite manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "taskvec-suite" ||
      manifest.value("version", 0) != 1) {
    throw std::runtime_error("unrecognized suite manifest in " + dir);
  }
  TaskSuite suite;
  suite.dim = manifest.at("dim").get<int>();
  suite.classes = manifest.at("classes").get<int>();
  suite.heterogeneity = manifest.at("heterogeneity").get<double>();
  suite.rank = manifest.at("rank").get<int>();
  suite.seed = manifest.at("seed").get<std::uint64_t>();
  if (suite.dim < 1 || suite.classes < 2) {
    throw std::runtime_error("bad suite dimensions in manifest");
  }
  for (const auto& entry : manifest.at("tasks")) {
    TaskData task;
    const std::string stem = entry.at("stem").get<std::string>();
    load_split(dir, stem + "_train", entry.at("train_count").get<int>(),
               suite.dim, suite.classes, task.train_x, task.train_y);
    load_split(dir, stem + "_test", entry.at("test_count").get<int>(),
               suite.dim, suite.classes, task.test_x, task.test_y);
    suite.tasks.push_back(std::move(task));
  }
  if (suite.tasks.empty()) throw std::runtime_error("suite has no tasks");
  return suite;
}

}  // namespace taskvec
