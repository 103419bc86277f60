#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pdiff/model.hpp"
#include "pdiff/tensor.hpp"

namespace pdiff {

struct SamplerConfig {
  int num_steps = 50;
  double guidance_scale = 5.0;
  std::uint64_t seed = 0;
  std::string method = "euler";
  bool conditional_only = false;  // skip the unconditional pass entirely

  void validate() const;
  nlohmann::json to_json() const;
};

// (1 - s) u + s c: equal to u + s (c - u), exact at s = 0 and s = 1.
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s);

// Evenly spaced descending timesteps from T, ending at 1 when n > 1.
std::vector<int> sampling_timesteps(int timesteps, int num_steps);

Tensor initial_noise(const Model& model, std::uint64_t seed);

struct SampleResult {
  Tensor image;  // decoded, clipped to [0,1]
  std::uint64_t noise_hash = 0;
  std::vector<int> timesteps;
  std::vector<Tensor> trajectory;  // latent before every step
};

SampleResult sample(const Model& model, const std::string& prompt, const Tensor* reference_face,
                    const SamplerConfig& config);

struct RegionSpec {
  Tensor mask;  // [H,W] in [0,1]
  std::string prompt;
  std::optional<Tensor> reference_face;
};

struct MultiSubjectOptions {
  bool fill_background = true;
  std::string background_prompt = "a photo of a plain background";
};

// Per-pixel weighted average of per-region guided predictions.
Tensor combine_region_predictions(const std::vector<Tensor>& predictions, const std::vector<Tensor>& masks);

SampleResult multi_subject_sample(const Model& model, const std::vector<RegionSpec>& regions, const SamplerConfig& config,
                                  const MultiSubjectOptions& options = {});

// Request document: {"regions": [{"rect": [x0,y0,x1,y1]} | {"mask": path}, "prompt", "face"}]}.
std::vector<RegionSpec> load_region_request(const std::filesystem::path& path, int image_size);

std::uint64_t tensor_hash(const Tensor& t);

}  // namespace pdiff
