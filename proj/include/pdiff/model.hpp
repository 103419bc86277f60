#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "json.hpp"
#include "pdiff/autograd.hpp"
#include "pdiff/conditioning.hpp"
#include "pdiff/denoiser.hpp"
#include "pdiff/losses.hpp"
#include "pdiff/schedule.hpp"

namespace pdiff {

struct ModelConfig {
  int image_size = 32;
  std::array<int, 3> widths{16, 32, 64};
  int cond_width = 64;
  int attention_dim = 16;
  int heads = 1;
  int time_dim = 16;
  int head_hidden = 64;
  int max_tokens = 16;
  int timesteps = 100;
  double beta_start = 1e-3;
  double beta_end = 0.1;  // keeps sigma(T) near 14 so sampler error at high t stays small
  std::uint64_t seed = 7;  // parameter init

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  static ModelConfig gradient_check_profile();
};

// Frozen components (text encoder, face embedder, schedule) plus the
// trainable set: denoiser, augmentation head and the null embedding.
class Model {
 public:
  explicit Model(ModelConfig config = {});

  ParameterSet params;

  const ModelConfig& config() const { return config_; }
  const TextEncoder& encoder() const { return encoder_; }
  const FaceEmbedder& embedder() const { return embedder_; }
  const Denoiser& denoiser() const { return denoiser_; }
  const AugmentationHead& head() const { return head_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const LatentCodec& codec() const { return codec_; }
  std::size_t null_index() const { return null_; }

  // Text rows with the identity row fused with the face embedding when a
  // face crop is given.
  ConditioningSequence condition(Tape& tape, const TextEncoder::Encoded& encoded, const Tensor* face) const;
  Var null_condition(Tape& tape) const;

  // Header describing everything a checkpoint must agree on.
  nlohmann::json header() const;

 private:
  ModelConfig config_;
  TextEncoder encoder_;
  FaceEmbedder embedder_;
  NoiseSchedule schedule_;
  LatentCodec codec_;
  Denoiser denoiser_;
  AugmentationHead head_;
  std::size_t null_ = 0;
};

}  // namespace pdiff
