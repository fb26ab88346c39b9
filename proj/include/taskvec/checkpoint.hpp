#pragma once

#include <string>

#include "taskvec/task_vectors.hpp"

namespace taskvec {

// Checkpoint layout: one line of JSON (names, shapes, dtype, endianness,
// version), a newline, then each tensor's doubles raw little-endian in layout
// order. Shared by base models, task vectors, and inference-net weights.
void save_checkpoint(const std::string& path, const ParamSet& params);
ParamSet load_checkpoint(const std::string& path);

}  // namespace taskvec
