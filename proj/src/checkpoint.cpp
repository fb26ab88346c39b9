#include "taskvec/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

namespace taskvec {

namespace {
constexpr const char* kFormatTag = "taskvec-checkpoint";
constexpr int kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const ParamSet& params) {
  nlohmann::json header;
  header["format"] = kFormatTag;
  header["version"] = kVersion;
  header["dtype"] = "f64";
  header["endian"] = "little";
  nlohmann::json blocks = nlohmann::json::array();
  for (std::size_t k = 0; k < params.size(); ++k) {
    nlohmann::json b;
    b["name"] = params.name(k);
    b["shape"] = params.tensor(k).shape();
    blocks.push_back(std::move(b));
  }
  header["blocks"] = std::move(blocks);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
  }
  out << header.dump() << '\n';
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& t = params.tensor(k);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) {
    throw std::runtime_error("save_checkpoint: write failed for '" + path + "'");
  }
}

ParamSet load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error("load_checkpoint: missing header in '" + path + "'");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("load_checkpoint: bad header in '" + path +
                             "': " + e.what());
  }
  if (header.value("format", "") != kFormatTag) {
    throw std::runtime_error("load_checkpoint: '" + path +
                             "' is not a checkpoint file");
  }
  if (header.value("version", -1) != kVersion) {
    throw std::runtime_error("load_checkpoint: unsupported version in '" +
                             path + "'");
  }
  if (header.value("dtype", "") != "f64" || header.value("endian", "") != "little") {
    throw std::runtime_error("load_checkpoint: unsupported encoding in '" +
                             path + "'");
  }

  ParamSet params;
  for (const auto& b : header.at("blocks")) {
    const std::string name = b.at("name").get<std::string>();
    const Shape shape = b.at("shape").get<Shape>();
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.vec().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(t.numel() * sizeof(double))) {
      throw std::runtime_error("load_checkpoint: truncated data in '" + path +
                               "'");
    }
    params.add(name, std::move(t));
  }
  return params;
}

}  // namespace taskvec
