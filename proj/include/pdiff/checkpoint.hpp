#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "pdiff/tensor.hpp"

namespace pdiff {

// Binary container: magic, version, JSON header, named float64 arrays,
// then the training position (step, optimizer arrays, RNG states).
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json header;
  std::map<std::string, Tensor> arrays;
  std::map<std::string, Tensor> optimizer;
  std::map<std::string, std::string> rng_states;
  long step = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws ValidationError naming the first differing header field.
void require_compatible_header(const nlohmann::json& expected, const nlohmann::json& found);

}  // namespace pdiff
