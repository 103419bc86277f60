#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "pdiff/tensor.hpp"

namespace pdiff {

// Deterministic random stream with a serializable state. Draws never cache
// values outside the engine, so save/restore reproduces the continuation exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent stream derived from a root seed and a stream name
  // ("data", "timestep", "dropout", "init", "sampler", ...).
  static Rng substream(std::uint64_t root_seed, std::string_view name);

  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  int uniform_int(int lo, int hi);       // inclusive bounds
  double normal();
  Tensor normal_tensor(std::vector<int> shape);

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t mix_seed(std::uint64_t root, std::string_view name);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace pdiff
