#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "taskvec/bench.hpp"
#include "taskvec/checkpoint.hpp"
#include "taskvec/config.hpp"
#include "taskvec/suite.hpp"

namespace fs = std::filesystem;
using namespace taskvec;

namespace {

constexpr const char* kVersion = "0.1.0";

// Exit codes are a stable contract: 0 success, 2 config/validation,
// 3 missing artifact, 4 numerical failure.
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitNumeric = 4;

struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------------- logging

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3 };

LogLevel log_threshold() {
  static const LogLevel level = [] {
    const char* env = std::getenv("TASKVEC_LOG");
    if (env == nullptr) return LogLevel::kInfo;
    const std::string v(env);
    if (v == "debug") return LogLevel::kDebug;
    if (v == "info") return LogLevel::kInfo;
    if (v == "warn") return LogLevel::kWarn;
    if (v == "error") return LogLevel::kError;
    return LogLevel::kInfo;
  }();
  return level;
}

std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}

void log_at(LogLevel level, const std::string& msg) {
  if (level < log_threshold()) return;
  static const char* names[] = {"debug", "info", "warn", "error"};
  std::lock_guard<std::mutex> lock(log_mutex());
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

void log_info(const std::string& msg) { log_at(LogLevel::kInfo, msg); }
void log_error(const std::string& msg) { log_at(LogLevel::kError, msg); }

// ------------------------------------------------------------ run manifests

std::string fnv1a_hex(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open for hashing: " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 14];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx",
                static_cast<unsigned long long>(h));
  return out;
}

std::string timestamp_utc() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Every output file of the command lands in the manifest with a content
// hash; written_at is the one wall-clock field exempt from idempotency.
void write_manifest(const fs::path& out, const std::string& command,
                    const std::string& config_path,
                    std::vector<fs::path> artifacts) {
  std::sort(artifacts.begin(), artifacts.end());
  nlohmann::json j;
  j["tool"] = "taskvec";
  j["version"] = kVersion;
  j["command"] = command;
  j["config"] = config_path;
  j["out_dir"] = out.string();
  j["written_at"] = timestamp_utc();
  j["artifacts"] = nlohmann::json::array();
  for (const fs::path& p : artifacts) {
    j["artifacts"].push_back({{"path", fs::relative(p, out).generic_string()},
                              {"fnv1a64", fnv1a_hex(p)}});
  }
  const fs::path path = out / (command + ".manifest.json");
  std::ofstream file(path);
  if (!file) throw std::runtime_error("cannot write " + path.string());
  file << j.dump(2) << "\n";
}

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------- shared plumbing

fs::path suite_dir(const fs::path& out) { return out / "suite"; }
fs::path ckpt_dir(const fs::path& out) { return out / "checkpoints"; }

TaskSuite need_suite(const fs::path& out) {
  const fs::path dir = suite_dir(out);
  if (!fs::exists(dir / "manifest.json")) {
    throw MissingArtifact("no suite at " + dir.string() +
                          " (run make-suite first)");
  }
  return load_suite(dir.string());
}

ParamSet need_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) {
    throw MissingArtifact("missing checkpoint " + path.string());
  }
  return load_checkpoint(path.string());
}

ParamSet subtract(const ParamSet& a, const ParamSet& b) {
  ParamSet out;
  for (std::size_t k = 0; k < a.size(); ++k) {
    Tensor t = a.tensor(k);
    const Tensor& base = b.tensor(a.name(k));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] -= base[i];
    out.add(a.name(k), std::move(t));
  }
  return out;
}

// The pool rebuilds from tau checkpoints alone: partitioning a stored delta
// against an all-zero base reproduces the original blocks bit for bit.
TaskVectorPool load_pool(const fs::path& out, std::size_t n_tasks) {
  std::vector<TaskVector> vectors;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    const fs::path path = ckpt_dir(out) / ("tau_" + std::to_string(t) +
                                           ".ckpt");
    const ParamSet tau = need_checkpoint(path);
    vectors.push_back(
        derive_task_vector(tau, tau.zeros_like(), static_cast<int>(t)));
  }
  return TaskVectorPool(std::move(vectors));
}

std::string cell_stem(Regime regime, std::uint64_t seed) {
  return std::string(regime_name(regime)) + "_seed" + std::to_string(seed);
}

// --------------------------------------------------------------- make-suite

int cmd_make_suite(const std::string& config_path, const fs::path& out) {
  const ExperimentPlan plan = load_plan(config_path);
  fs::create_directories(suite_dir(out));
  const TaskSuite suite = generate_task_suite(plan.suite);
  save_suite(suite, suite_dir(out).string());
  write_manifest(out, "make-suite", config_path, files_under(suite_dir(out)));
  log_info("suite with " + std::to_string(suite.tasks.size()) +
           " tasks written to " + suite_dir(out).string());
  return 0;
}

// ----------------------------------------------------------------- finetune

int cmd_finetune(const std::string& config_path, const fs::path& out) {
  const ExperimentPlan plan = load_plan(config_path);
  const TaskSuite suite = need_suite(out);
  fs::create_directories(ckpt_dir(out));

  RngStream init(1000 + plan.suite.seed);
  const ParamSet theta_0 =
      init_base_model(suite.dim, suite.classes, init);
  save_checkpoint((ckpt_dir(out) / "theta0.ckpt").string(), theta_0);

  std::vector<fs::path> artifacts = {ckpt_dir(out) / "theta0.ckpt"};
  for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
    const ParamSet theta_t = finetune_base(theta_0, suite.tasks[t],
                                           plan.finetune_steps,
                                           plan.finetune_lr);
    const fs::path task_path =
        ckpt_dir(out) / ("task_" + std::to_string(t) + ".ckpt");
    const fs::path tau_path =
        ckpt_dir(out) / ("tau_" + std::to_string(t) + ".ckpt");
    save_checkpoint(task_path.string(), theta_t);
    save_checkpoint(tau_path.string(), subtract(theta_t, theta_0));
    artifacts.push_back(task_path);
    artifacts.push_back(tau_path);
    log_info("fine-tuned task " + std::to_string(t + 1) + "/" +
             std::to_string(suite.tasks.size()));
  }
  write_manifest(out, "finetune", config_path, std::move(artifacts));
  return 0;
}

// -------------------------------------------------------------------- train

int cmd_train(const std::string& config_path, const fs::path& out,
              std::int64_t seed_override, int jobs) {
  ExperimentPlan plan = load_plan(config_path);
  if (seed_override >= 0) {
    plan.seeds = {static_cast<std::uint64_t>(seed_override)};
  }
  const TaskSuite suite = need_suite(out);
  const ParamSet theta_0 = need_checkpoint(ckpt_dir(out) / "theta0.ckpt");
  const TaskVectorPool pool = load_pool(out, suite.tasks.size());

  struct Cell {
    Regime regime;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (Regime regime : plan.regimes) {
    for (std::uint64_t seed : plan.seeds) cells.push_back({regime, seed});
  }

  fs::create_directories(out / "traces");
  std::vector<MetricsRecord> records(cells.size());
  std::vector<fs::path> artifacts;
  std::mutex artifacts_mutex;

  auto run_cell = [&](std::size_t i) {
    ExperimentConfig cfg = plan.base;
    cfg.regime = cells[i].regime;
    cfg.seed = cells[i].seed;
    const auto start = std::chrono::steady_clock::now();
    auto [state, rec] = train_regime(cfg, suite, pool, theta_0);

    const std::string stem = cell_stem(cfg.regime, cfg.seed);
    const fs::path trace_path = out / "traces" / (stem + ".csv");
    {
      std::ofstream trace(trace_path);
      if (!trace) {
        throw std::runtime_error("cannot write " + trace_path.string());
      }
      trace << "epoch,objective\n";
      char buf[64];
      for (std::size_t e = 0; e < rec.elbo_trace.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", e + 1,
                      rec.elbo_trace[e]);
        trace << buf;
      }
    }
    const fs::path state_path = ckpt_dir(out) / ("state_" + stem + ".ckpt");
    save_checkpoint(state_path.string(), state_to_params(state));
    records[i] = std::move(rec);

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    {
      std::lock_guard<std::mutex> lock(artifacts_mutex);
      artifacts.push_back(trace_path);
      artifacts.push_back(state_path);
    }
    char msg[160];
    std::snprintf(msg, sizeof(msg), "%s: accuracy %.4f, gated ratio %.3f"
                  " (%.1fs)", stem.c_str(), records[i].avg_accuracy,
                  records[i].gated_ratio, secs);
    log_info(msg);
  };

  const int workers =
      std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(cells.size());
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) {
      threads.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < cells.size();
             i = next.fetch_add(1)) {
          try {
            run_cell(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (std::thread& t : threads) t.join();
    for (const std::exception_ptr& err : errors) {
      if (err) std::rethrow_exception(err);
    }
  }

  const fs::path metrics_path = out / "metrics.csv";
  write_metrics_csv(records, metrics_path.string());
  artifacts.push_back(metrics_path);
  write_manifest(out, "train", config_path, std::move(artifacts));
  log_info("metrics for " + std::to_string(cells.size()) +
           " cells written to " + metrics_path.string());
  return 0;
}

// ------------------------------------------------------------------ analyze

int cmd_analyze(const fs::path& out) {
  if (!fs::exists(ckpt_dir(out))) {
    throw MissingArtifact("no checkpoints at " + ckpt_dir(out).string() +
                          " (run finetune first)");
  }
  std::size_t n_tasks = 0;
  while (fs::exists(ckpt_dir(out) /
                    ("tau_" + std::to_string(n_tasks) + ".ckpt"))) {
    ++n_tasks;
  }
  if (n_tasks == 0) {
    throw ConfigError("empty pool: no tau_*.ckpt under " +
                      ckpt_dir(out).string());
  }
  const TaskVectorPool pool = load_pool(out, n_tasks);
  const std::vector<double> energy = svd_energy(pool);

  fs::create_directories(out / "analysis");
  const fs::path csv_path = out / "analysis" / "energy.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
  csv << "component,cumulative_energy\n";
  char buf[64];
  for (std::size_t k = 0; k < energy.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", k + 1, energy[k]);
    csv << buf;
  }
  csv.close();
  write_manifest(out, "analyze", "", {csv_path});
  log_info("energy curve with " + std::to_string(energy.size()) +
           " components written to " + csv_path.string());
  return 0;
}

// ------------------------------------------------------------------- report

struct ReportRow {
  std::string regime, prior;
  bool gating = false;
  std::size_t seeds = 0;
  double avg_accuracy = 0.0;
  double gated_ratio = 0.0;
};

int cmd_report(const fs::path& out) {
  std::vector<fs::path> sources;
  if (fs::exists(out)) {
    for (const auto& entry : fs::directory_iterator(out)) {
      const std::string name = entry.path().filename().string();
      if (entry.is_regular_file() && name.rfind("metrics", 0) == 0 &&
          entry.path().extension() == ".csv") {
        sources.push_back(entry.path());
      }
    }
  }
  std::sort(sources.begin(), sources.end());
  if (sources.empty()) {
    throw MissingArtifact("no metrics CSV found in " + out.string());
  }

  std::vector<MetricsRecord> rows;
  for (const fs::path& src : sources) {
    try {
      std::vector<MetricsRecord> part = read_metrics_csv(src.string());
      rows.insert(rows.end(), part.begin(), part.end());
    } catch (const std::exception& e) {
      throw ConfigError(e.what());  // the reader's message names the file
    }
  }

  // Aggregate over seeds per (regime, prior, gating), keeping the canonical
  // regime order from the benchmark tables.
  const std::vector<std::string> regime_order = {
      "task_level_det", "sample_specific_det", "task_level_vi",
      "sample_specific_vi"};
  auto rank_of = [&](const std::string& regime) {
    for (std::size_t k = 0; k < regime_order.size(); ++k) {
      if (regime_order[k] == regime) return k;
    }
    return regime_order.size();
  };
  std::map<std::tuple<std::size_t, std::string, std::string, bool>, ReportRow>
      groups;
  for (const MetricsRecord& rec : rows) {
    ReportRow& row = groups[{rank_of(rec.regime), rec.regime, rec.prior,
                             rec.gating}];
    row.regime = rec.regime;
    row.prior = rec.prior;
    row.gating = rec.gating;
    row.seeds += 1;
    row.avg_accuracy += rec.avg_accuracy;
    row.gated_ratio += rec.gated_ratio;
  }

  std::ostringstream text;
  std::ostringstream csv;
  text << "regime               prior       gated  seeds  avg_accuracy"
          "  gated_ratio\n";
  csv << "regime,prior,gating,seeds,avg_accuracy,gated_ratio\n";
  char line[160];
  for (auto& [key, row] : groups) {
    row.avg_accuracy /= static_cast<double>(row.seeds);
    row.gated_ratio /= static_cast<double>(row.seeds);
    std::snprintf(line, sizeof(line),
                  "%-20s %-11s %-6s %5zu  %12.4f  %11.4f\n",
                  row.regime.c_str(), row.prior.c_str(),
                  row.gating ? "yes" : "no", row.seeds, row.avg_accuracy,
                  row.gated_ratio);
    text << line;
    std::snprintf(line, sizeof(line), "%s,%s,%d,%zu,%.17g,%.17g\n",
                  row.regime.c_str(), row.prior.c_str(),
                  row.gating ? 1 : 0, row.seeds, row.avg_accuracy,
                  row.gated_ratio);
    csv << line;
  }

  std::cout << text.str();
  const fs::path text_path = out / "report.txt";
  const fs::path csv_path = out / "report.csv";
  std::ofstream(text_path) << text.str();
  std::ofstream(csv_path) << csv.str();
  write_manifest(out, "report", "", {text_path, csv_path});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sample-specific task vector composition experiments"};
  app.set_version_flag("--version", std::string("taskvec ") + kVersion);
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::int64_t seed_override = -1;
  int jobs = 1;

  CLI::App* make_suite =
      app.add_subcommand("make-suite", "generate and persist a task suite");
  make_suite->add_option("--config", config_path, "experiment config file")
      ->required();
  make_suite->add_option("--out", out_dir, "output directory")->required();

  CLI::App* finetune = app.add_subcommand(
      "finetune", "fine-tune per-task models and derive the task vector pool");
  finetune->add_option("--config", config_path, "experiment config file")
      ->required();
  finetune->add_option("--out", out_dir, "output directory")->required();

  CLI::App* train = app.add_subcommand(
      "train", "run the configured (regime x seed) training cells");
  train->add_option("--config", config_path, "experiment config file")
      ->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--seed", seed_override, "run only this seed");
  train->add_option("--jobs", jobs, "parallel cells")
      ->check(CLI::PositiveNumber);

  CLI::App* analyze = app.add_subcommand(
      "analyze", "export the pool's cumulative singular-value energy curve");
  analyze->add_option("--out", out_dir, "output directory")->required();

  CLI::App* report = app.add_subcommand(
      "report", "aggregate metrics CSVs into a comparison table");
  report->add_option("--out", out_dir, "results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (app.got_subcommand(make_suite)) {
      return cmd_make_suite(config_path, out_dir);
    }
    if (app.got_subcommand(finetune)) {
      return cmd_finetune(config_path, out_dir);
    }
    if (app.got_subcommand(train)) {
      return cmd_train(config_path, out_dir, seed_override, jobs);
    }
    if (app.got_subcommand(analyze)) return cmd_analyze(out_dir);
    if (app.got_subcommand(report)) return cmd_report(out_dir);
  } catch (const ConfigError& e) {
    log_error(e.what());
    return kExitConfig;
  } catch (const MissingArtifact& e) {
    log_error(e.what());
    return kExitMissing;
  } catch (const NumericError& e) {
    log_error(e.what());
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    log_error(e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    log_error(e.what());
    return 1;
  }
  return 0;
}
