#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pdiff/checkpoint.hpp"
#include "pdiff/losses.hpp"
#include "pdiff/model.hpp"
#include "pdiff/rng.hpp"
#include "pdiff/toyfaces.hpp"

namespace pdiff {

struct TrainConfig {
  int steps = 2000;
  int batch_size = 2;
  double learning_rate = 0.02;
  std::string optimizer = "sgd";  // sgd | adam
  double momentum = 0.9;
  double clip_norm = 1.0;
  std::uint64_t seed = 7;
  // Desk profile: gate scaled with T = 100, localization weights raised so
  // the attention term is not swamped by the noise loss of a tiny model.
  LossWeights weights = [] {
    LossWeights w;
    w.gate = 25;
    w.lambda = 1.0;
    w.mu = 1.0;
    return w;
  }();
  int checkpoint_interval = 500;
  // Decay of the parameter average used for sampling; 0 samples the raw weights.
  double ema_decay = 0.999;

  void validate(int timesteps) const;
  nlohmann::json to_json() const;
};

// Per-sample draws of the training protocol.
struct SamplePlan {
  std::size_t index = 0;  // dataset row
  int t = 1;
  double u = 0.0;
  DropoutState branch = DropoutState::full;
  bool face_region = false;  // masked noise loss
};

struct TrainerStreams {
  Rng data, timestep, dropout;
  static TrainerStreams from_seed(std::uint64_t seed);
};

SamplePlan draw_plan(TrainerStreams& rng, std::size_t dataset_size, int timesteps, const LossWeights& weights);

struct StepRecord {
  long step = 0;
  std::vector<SamplePlan> plans;
  std::vector<LossReport> reports;
  double grad_norm = 0.0;

  nlohmann::json to_json() const;
  double mean_noise() const;
};

// Forward and backward for one sample. Gradients accumulate into grads
// (scaled by grad_scale) when given.
LossReport sample_loss(const Model& model, const TrainingSample& sample, const SamplePlan& plan, const Tensor& eps,
                       const LossWeights& weights, Gradients* grads, double grad_scale = 1.0);

class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(const ParameterSet& params, const TrainConfig& config);

  void step(ParameterSet& params, const Gradients& grads);
  std::map<std::string, Tensor> state(const ParameterSet& params) const;
  void restore(const ParameterSet& params, const std::map<std::string, Tensor>& state);

 private:
  std::string kind_;
  double lr_ = 0.0, momentum_ = 0.0;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

class Trainer {
 public:
  Trainer(Model& model, TrainConfig config, std::vector<TrainingSample> data);

  StepRecord step();
  long completed_steps() const { return step_; }

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ckpt);

  const TrainConfig& config() const { return config_; }

 private:
  Model& model_;
  TrainConfig config_;
  std::vector<TrainingSample> data_;
  TrainerStreams rng_;
  Optimizer opt_;
  std::vector<Tensor> average_;  // empty when ema_decay is 0
  long step_ = 0;
};

struct TrainPaths {
  std::filesystem::path manifest;
  std::filesystem::path out_dir;
  std::filesystem::path resume;  // empty for a fresh run
};

struct TrainSummary {
  long steps = 0;
  std::filesystem::path final_checkpoint;
  std::filesystem::path log;
};

// Full run: writes out_dir/train_log.jsonl (one line per step),
// out_dir/checkpoints/step_<k>.ckpt at the interval and out_dir/final.ckpt.
TrainSummary train(const ModelConfig& model_config, const TrainConfig& config, const TrainPaths& paths,
                   const std::function<void(const StepRecord&)>& on_step = {});

void load_parameters(ParameterSet& params, const std::map<std::string, Tensor>& arrays);

// Checkpoint optimizer-state arrays holding the averaged weights are named
// kAveragePrefix + parameter name.
inline constexpr const char* kAveragePrefix = "ema.";

// Loads the averaged weights when the checkpoint has them, unless raw is set.
Model load_model(const std::filesystem::path& checkpoint, bool raw = false);

// Exponential moving average with alpha = 2 / (window + 1), seeded by the first value.
std::vector<double> ema(const std::vector<double>& xs, int window);

}  // namespace pdiff
