#include <doctest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "taskvec/bench.hpp"
#include "taskvec/checkpoint.hpp"

using namespace taskvec;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"(
[suite]
seed = 5
n_tasks = 2
dim = 8
classes = 3
heterogeneity = 0.6
rank = 2
train_per_task = 160
test_per_task = 80

[finetune]
steps = 60
lr = 0.01

[train]
seeds = [1, 2]
batch = 32
epochs = 2
lr = 2e-3
)";

struct TempDir {
  fs::path path;
  TempDir() {
    std::string tmpl =
        (fs::temp_directory_path() / "taskvec_cli_XXXXXX").string();
    REQUIRE(mkdtemp(tmpl.data()) != nullptr);
    path = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  REQUIRE(out.good());
  out << text;
}

int run_cli(const std::string& args, const fs::path& stderr_to = {}) {
  std::string cmd = std::string(TASKVEC_CLI_PATH) + " " + args + " >/dev/null";
  cmd += stderr_to.empty() ? " 2>&1" : " 2>" + stderr_to.string();
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  REQUIRE(WIFEXITED(rc));
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

nlohmann::json artifacts_of(const fs::path& manifest) {
  const nlohmann::json j = nlohmann::json::parse(slurp(manifest));
  REQUIRE(j.contains("artifacts"));
  return j["artifacts"];
}

}  // namespace

TEST_CASE("cli pipeline: make-suite, finetune, train, analyze, report") {
  TempDir tmp;
  const fs::path cfg = tmp.path / "exp.toml";
  const fs::path out = tmp.path / "out";
  write_file(cfg, kSmallConfig);
  const std::string base = "--config " + cfg.string() + " --out " +
                           out.string();

  REQUIRE(run_cli("make-suite " + base) == 0);
  CHECK(fs::exists(out / "suite" / "manifest.json"));
  const nlohmann::json first = artifacts_of(out / "make-suite.manifest.json");
  CHECK(first.size() > 0);
  for (const auto& item : first) {
    CHECK(fs::exists(out / item["path"].get<std::string>()));
  }
  // Re-running the generator reproduces every artifact hash.
  REQUIRE(run_cli("make-suite " + base) == 0);
  CHECK(artifacts_of(out / "make-suite.manifest.json") == first);

  REQUIRE(run_cli("finetune " + base) == 0);
  const ParamSet theta_0 =
      load_checkpoint((out / "checkpoints" / "theta0.ckpt").string());
  const ParamSet theta_1 =
      load_checkpoint((out / "checkpoints" / "task_1.ckpt").string());
  const ParamSet tau_1 =
      load_checkpoint((out / "checkpoints" / "tau_1.ckpt").string());
  REQUIRE(tau_1.same_layout(theta_0));
  for (std::size_t k = 0; k < tau_1.size(); ++k) {
    const Tensor& t = tau_1.tensor(k);
    const Tensor& ft = theta_1.tensor(k);
    const Tensor& b = theta_0.tensor(k);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      CHECK(t[i] == ft[i] - b[i]);
    }
  }

  REQUIRE(run_cli("train " + base) == 0);
  const std::vector<MetricsRecord> rows =
      read_metrics_csv((out / "metrics.csv").string());
  REQUIRE(rows.size() == 8);  // 4 regimes x 2 seeds
  std::set<std::string> regimes;
  for (const MetricsRecord& rec : rows) {
    regimes.insert(rec.regime);
    CHECK(rec.elbo_trace.empty());  // traces live in their sidecar files
    CHECK(rec.avg_accuracy >= 0.0);
    CHECK(rec.avg_accuracy <= 1.0);
  }
  CHECK(regimes.size() == 4);
  for (const MetricsRecord& rec : rows) {
    const fs::path trace = out / "traces" /
                           (rec.regime + "_seed" + std::to_string(rec.seed) +
                            ".csv");
    CHECK(fs::exists(trace));
    const fs::path state = out / "checkpoints" /
                           ("state_" + rec.regime + "_seed" +
                            std::to_string(rec.seed) + ".ckpt");
    CHECK(fs::exists(state));
  }

  // Identical inputs reproduce the metrics file byte for byte.
  const std::string metrics_bytes = slurp(out / "metrics.csv");
  REQUIRE(run_cli("train " + base) == 0);
  CHECK(slurp(out / "metrics.csv") == metrics_bytes);

  // Parallel cells land in the same deterministic order.
  const fs::path out2 = tmp.path / "out2";
  const std::string base2 = "--config " + cfg.string() + " --out " +
                            out2.string();
  REQUIRE(run_cli("make-suite " + base2) == 0);
  REQUIRE(run_cli("finetune " + base2) == 0);
  REQUIRE(run_cli("train " + base2 + " --jobs 3") == 0);
  CHECK(slurp(out2 / "metrics.csv") == metrics_bytes);

  // A seed override narrows the grid to one seed.
  REQUIRE(run_cli("train " + base2 + " --seed 2") == 0);
  CHECK(read_metrics_csv((out2 / "metrics.csv").string()).size() == 4);

  REQUIRE(run_cli("analyze --out " + out.string()) == 0);
  const std::string energy = slurp(out / "analysis" / "energy.csv");
  std::istringstream lines(energy);
  std::string line, last;
  std::getline(lines, line);
  CHECK(line == "component,cumulative_energy");
  while (std::getline(lines, line)) {
    if (!line.empty()) last = line;
  }
  const double final_energy = std::stod(last.substr(last.find(',') + 1));
  CHECK(final_energy == doctest::Approx(1.0).epsilon(1e-10));

  REQUIRE(run_cli("report --out " + out.string()) == 0);
  CHECK(fs::exists(out / "report.txt"));
  std::istringstream report(slurp(out / "report.csv"));
  std::getline(report, line);
  CHECK(line == "regime,prior,gating,seeds,avg_accuracy,gated_ratio");
  std::size_t data_rows = 0;
  while (std::getline(report, line)) {
    if (line.empty()) continue;
    ++data_rows;
    CHECK(line.find(",2,") != std::string::npos);  // both seeds aggregated
  }
  CHECK(data_rows == 4);
}

TEST_CASE("cli finetune with zero steps writes all-zero task vectors") {
  TempDir tmp;
  const fs::path cfg = tmp.path / "exp.toml";
  const fs::path out = tmp.path / "out";
  std::string text = kSmallConfig;
  const std::size_t at = text.find("steps = 60");
  REQUIRE(at != std::string::npos);
  text.replace(at, 10, "steps = 0 ");
  write_file(cfg, text);
  const std::string base = "--config " + cfg.string() + " --out " +
                           out.string();
  REQUIRE(run_cli("make-suite " + base) == 0);
  REQUIRE(run_cli("finetune " + base) == 0);
  for (int t = 0; t < 2; ++t) {
    const ParamSet tau = load_checkpoint(
        (out / "checkpoints" / ("tau_" + std::to_string(t) + ".ckpt"))
            .string());
    for (std::size_t k = 0; k < tau.size(); ++k) {
      const Tensor& tensor = tau.tensor(k);
      for (std::size_t i = 0; i < tensor.numel(); ++i) {
        CHECK(tensor[i] == 0.0);
      }
    }
  }
}

TEST_CASE("cli exit codes follow the documented contract") {
  TempDir tmp;
  const fs::path out = tmp.path / "out";
  fs::create_directories(out);

  const fs::path bad_suite = tmp.path / "bad_suite.toml";
  write_file(bad_suite, "[suite]\nn_tasks = 1\n");
  const fs::path err_log = tmp.path / "stderr.txt";
  CHECK(run_cli("make-suite --config " + bad_suite.string() + " --out " +
                    out.string(),
                err_log) == 2);
  CHECK(slurp(err_log).find("n_tasks must be >= 2") != std::string::npos);

  const fs::path bad_regime = tmp.path / "bad_regime.toml";
  write_file(bad_regime, "[train]\nregimes = [\"warp\"]\n");
  CHECK(run_cli("train --config " + bad_regime.string() + " --out " +
                out.string()) == 2);

  const fs::path good = tmp.path / "good.toml";
  write_file(good, kSmallConfig);
  const std::string base = "--config " + good.string() + " --out " +
                           out.string();
  CHECK(run_cli("finetune " + base) == 3);   // no suite yet
  CHECK(run_cli("train " + base) == 3);      // no checkpoints yet
  CHECK(run_cli("analyze --out " + out.string()) == 3);
  CHECK(run_cli("report --out " + out.string()) == 3);

  write_file(out / "metrics.csv", "regime,seed\nx\n");
  CHECK(run_cli("report --out " + out.string()) == 2);

  CHECK(run_cli("make-suite --config " + (tmp.path / "none.toml").string() +
                " --out " + out.string()) == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("train --config " + good.string()) == 2);  // --out required

  // Numerical failure during fine-tuning surfaces as exit 4.
  const fs::path diverge = tmp.path / "diverge.toml";
  std::string text = kSmallConfig;
  const std::size_t at = text.find("lr = 0.01");
  REQUIRE(at != std::string::npos);
  text.replace(at, 9, "lr = 1e308");
  write_file(diverge, text);
  const fs::path out3 = tmp.path / "out3";
  const std::string base3 = "--config " + diverge.string() + " --out " +
                            out3.string();
  REQUIRE(run_cli("make-suite " + base3) == 0);
  CHECK(run_cli("finetune " + base3) == 4);
}

TEST_CASE("cli respects the TASKVEC_LOG level") {
  TempDir tmp;
  const fs::path cfg = tmp.path / "exp.toml";
  const fs::path out = tmp.path / "out";
  write_file(cfg, kSmallConfig);
  const fs::path err_log = tmp.path / "stderr.txt";
  const std::string invocation = std::string(TASKVEC_CLI_PATH) +
                                 " make-suite --config " + cfg.string() +
                                 " --out " + out.string() + " >/dev/null 2>" +
                                 err_log.string();
  const int rc = std::system(("TASKVEC_LOG=error " + invocation).c_str());
  REQUIRE(WIFEXITED(rc));
  REQUIRE(WEXITSTATUS(rc) == 0);
  CHECK(slurp(err_log).empty());
  const int rc2 = std::system(("TASKVEC_LOG=debug " + invocation).c_str());
  REQUIRE(WIFEXITED(rc2));
  REQUIRE(WEXITSTATUS(rc2) == 0);
  CHECK(slurp(err_log).find("suite with 2 tasks") != std::string::npos);
}
