#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "taskvec/bench.hpp"
#include "taskvec/suite.hpp"

namespace taskvec {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// One experiment file drives the whole pipeline: suite generation,
// fine-tuning, and the (regime x seed) training grid. `base` carries the
// shared training hyperparameters; seed and regime are filled per cell.
struct ExperimentPlan {
  SuiteSpec suite;
  int finetune_steps = 200;
  double finetune_lr = 0.01;
  std::vector<Regime> regimes = {
      Regime::kTaskLevelDet, Regime::kSampleSpecificDet, Regime::kTaskLevelVi,
      Regime::kSampleSpecificVi};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  ExperimentConfig base;
  void validate() const;  // throws ConfigError naming the offending field
};

// TOML-style subset: [section] headers and key = value lines with integers,
// floats, booleans, double-quoted strings, and flat arrays of those; '#'
// starts a comment. Unknown sections, unknown keys, and duplicate keys are
// rejected so typos fail before any work happens.
ExperimentPlan parse_plan(const std::string& text);
ExperimentPlan load_plan(const std::string& path);

}  // namespace taskvec
