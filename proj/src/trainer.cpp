#include "pdiff/trainer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "pdiff/image_io.hpp"

namespace pdiff {

using json = nlohmann::json;

void TrainConfig::validate(int timesteps) const {
  if (steps < 1) throw ValidationError("steps must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(learning_rate >= 0.0)) throw ValidationError("learning_rate must be >= 0");
  if (optimizer != "sgd" && optimizer != "adam") throw ValidationError("optimizer must be sgd or adam");
  if (momentum < 0.0 || momentum >= 1.0) throw ValidationError("momentum must lie in [0,1)");
  if (!(clip_norm > 0.0)) throw ValidationError("clip_norm must be > 0");
  if (checkpoint_interval < 1) throw ValidationError("checkpoint_interval must be >= 1");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ValidationError("ema_decay must lie in [0,1)");
  weights.validate(timesteps);
}

json TrainConfig::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"optimizer", optimizer},
          {"momentum", momentum},
          {"clip_norm", clip_norm},
          {"seed", seed},
          {"checkpoint_interval", checkpoint_interval},
          {"ema_decay", ema_decay},
          {"beta", weights.beta},
          {"gamma", weights.gamma},
          {"lambda", weights.lambda},
          {"mu", weights.mu},
          {"gate", weights.gate},
          {"face_region_fraction", weights.face_region_fraction},
          {"dropout_unconditional", weights.dropout.unconditional},
          {"dropout_text_only", weights.dropout.text_only},
          {"localization", weights.localization},
          {"identity", weights.identity}};
}

TrainerStreams TrainerStreams::from_seed(std::uint64_t seed) {
  return {Rng::substream(seed, "data"), Rng::substream(seed, "timestep"), Rng::substream(seed, "dropout")};
}

SamplePlan draw_plan(TrainerStreams& rng, std::size_t dataset_size, int timesteps, const LossWeights& weights) {
  if (dataset_size == 0) throw ValidationError("empty dataset");
  SamplePlan p;
  p.index = static_cast<std::size_t>(rng.data.uniform_int(0, static_cast<int>(dataset_size) - 1));
  p.t = rng.timestep.uniform_int(1, timesteps);
  p.u = rng.dropout.uniform();
  p.branch = dropout_branch(p.u, weights.dropout);
  p.face_region = rng.dropout.uniform() < weights.face_region_fraction;
  return p;
}

json StepRecord::to_json() const {
  json j;
  j["step"] = step;
  json t = json::array(), branch = json::array(), noise = json::array(), id = json::array(), loc = json::array(),
       total = json::array();
  for (std::size_t i = 0; i < plans.size(); ++i) {
    t.push_back(plans[i].t);
    branch.push_back(to_string(plans[i].branch));
    noise.push_back(reports[i].noise);
    id.push_back(reports[i].identity);
    loc.push_back(reports[i].localization);
    total.push_back(reports[i].total);
  }
  j["t"] = t;
  j["branch"] = branch;
  j["noise"] = noise;
  j["id"] = id;
  j["loc"] = loc;
  j["total"] = total;
  return j;
}

double StepRecord::mean_noise() const {
  double s = 0.0;
  for (const auto& r : reports) s += r.noise;
  return reports.empty() ? 0.0 : s / static_cast<double>(reports.size());
}

LossReport sample_loss(const Model& model, const TrainingSample& sample, const SamplePlan& plan, const Tensor& eps,
                       const LossWeights& weights, Gradients* grads, double grad_scale) {
  const NoiseSchedule& sched = model.schedule();
  Tape tape;
  const Tensor z0 = model.codec().encode(sample.image);
  const Var zt = tape.constant(forward_noise(z0, plan.t, eps, sched));

  const TextEncoder::Encoded enc = model.encoder().encode(sample.caption);
  ConditioningSequence cond = model.condition(tape, enc, &sample.reference_face);
  const Var null_row = tape.parameter(model.params, model.null_index());
  cond = apply_conditioning_dropout(cond, plan.u, null_row, weights.dropout);

  const bool full = cond.state == DropoutState::full;
  const bool want_loc = full && weights.localization && cond.identity_index.has_value();
  const Denoiser::Prediction pred = model.denoiser().predict_noise(tape, model.params, zt, plan.t, cond.embeddings, want_loc);

  const Var target = tape.constant(eps);
  const Var noise = noise_loss(pred.eps, target, plan.face_region ? &sample.face_mask : nullptr);

  const bool gated = plan.t > weights.gate;
  Var id = tape.constant(Tensor::scalar(0.0));
  if (full && weights.identity && !gated) {
    id = identity_loss(zt, pred.eps, plan.t, sched, model.codec(), sample.face_bbox, sample.reference_face,
                       model.embedder(), weights);
  }
  Var loc = tape.constant(Tensor::scalar(0.0));
  if (want_loc) {
    const FaceMask masks = FaceMask::build(sample.face_mask, pred.attention.resolutions);
    loc = localization_loss(pred.attention, masks, *cond.identity_index, cond.emotion_index, weights);
  }
  const Var total = total_loss(noise, id, loc);
  LossReport report = make_report(noise, id, loc, gated);
  if (!std::isfinite(report.total)) {
    std::ostringstream msg;
    msg << "non-finite loss (noise " << report.noise << ", id " << report.identity << ", loc " << report.localization
        << ") for dataset row " << plan.index << " at t=" << plan.t << " branch " << to_string(plan.branch)
        << " caption \"" << sample.caption << "\"";
    throw std::runtime_error(msg.str());
  }
  if (grads) {
    Gradients g(model.params);
    tape.backward(total, &g);
    grads->add(g, grad_scale);
  }
  return report;
}

Optimizer::Optimizer(const ParameterSet& params, const TrainConfig& config)
    : kind_(config.optimizer), lr_(config.learning_rate), momentum_(config.momentum) {
  for (const auto& e : params) {
    m_.emplace_back(e.value.shape(), 0.0);
    if (kind_ == "adam") v_.emplace_back(e.value.shape(), 0.0);
  }
}

void Optimizer::step(ParameterSet& params, const Gradients& grads) {
  ++t_;
  if (kind_ == "adam") {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].value;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = grads[i][k];
        m_[i][k] = b1 * m_[i][k] + (1.0 - b1) * g;
        v_[i][k] = b2 * v_[i][k] + (1.0 - b2) * g * g;
        p[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps);
      }
    }
    return;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].value;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m_[i][k] = momentum_ * m_[i][k] + grads[i][k];
      p[k] -= lr_ * m_[i][k];
    }
  }
}

std::map<std::string, Tensor> Optimizer::state(const ParameterSet& params) const {
  std::map<std::string, Tensor> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out["m." + params[i].name] = m_[i];
    if (!v_.empty()) out["v." + params[i].name] = v_[i];
  }
  out["t"] = Tensor::scalar(static_cast<double>(t_));
  return out;
}

void Optimizer::restore(const ParameterSet& params, const std::map<std::string, Tensor>& state) {
  auto fetch = [&](const std::string& key, Tensor& dst) {
    const auto it = state.find(key);
    if (it == state.end()) throw ValidationError("checkpoint lacks optimizer array '" + key + "'");
    if (!it->second.same_shape(dst)) throw ValidationError("optimizer array '" + key + "' has the wrong shape");
    dst = it->second;
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    fetch("m." + params[i].name, m_[i]);
    if (!v_.empty()) fetch("v." + params[i].name, v_[i]);
  }
  const auto it = state.find("t");
  if (it == state.end()) throw ValidationError("checkpoint lacks optimizer step");
  t_ = static_cast<long>(it->second.item());
}

Trainer::Trainer(Model& model, TrainConfig config, std::vector<TrainingSample> data)
    : model_(model),
      config_(std::move(config)),
      data_(std::move(data)),
      rng_(TrainerStreams::from_seed(config_.seed)),
      opt_(model.params, config_) {
  config_.validate(model.schedule().steps);
  if (data_.empty()) throw ValidationError("training set is empty");
  const int size = model.config().image_size;
  for (const auto& s : data_) {
    if (s.image.rank() != 3 || s.image.dim(1) != size || s.image.dim(2) != size) {
      throw ValidationError("training image size " + shape_string(s.image.shape()) + " does not match the model");
    }
  }
  if (config_.ema_decay > 0.0) {
    for (const auto& e : model_.params) average_.push_back(e.value);
  }
}

StepRecord Trainer::step() {
  StepRecord rec;
  rec.step = step_ + 1;
  Gradients grads(model_.params);
  const double inv = 1.0 / config_.batch_size;
  const int size = model_.config().image_size;
  for (int b = 0; b < config_.batch_size; ++b) {
    const SamplePlan plan = draw_plan(rng_, data_.size(), model_.schedule().steps, config_.weights);
    const Tensor eps = rng_.data.normal_tensor({3, size, size});
    rec.reports.push_back(sample_loss(model_, data_[plan.index], plan, eps, config_.weights, &grads, inv));
    rec.plans.push_back(plan);
  }
  rec.grad_norm = grads.global_norm();
  if (rec.grad_norm > config_.clip_norm) grads.scale(config_.clip_norm / rec.grad_norm);
  opt_.step(model_.params, grads);
  if (!average_.empty()) {
    // Short warm-up so early iterates do not dominate the average.
    const double d = std::min(config_.ema_decay, (1.0 + step_) / (10.0 + step_));
    for (std::size_t i = 0; i < average_.size(); ++i) {
      const Tensor& p = model_.params[i].value;
      for (std::size_t k = 0; k < p.size(); ++k) average_[i][k] = d * average_[i][k] + (1.0 - d) * p[k];
    }
  }
  ++step_;
  return rec;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.header = model_.header();
  c.header["train"] = config_.to_json();
  for (const auto& e : model_.params) c.arrays[e.name] = e.value;
  c.optimizer = opt_.state(model_.params);
  for (std::size_t i = 0; i < average_.size(); ++i) c.optimizer[kAveragePrefix + model_.params[i].name] = average_[i];
  c.step = step_;
  c.rng_states = {{"data", rng_.data.state()}, {"timestep", rng_.timestep.state()}, {"dropout", rng_.dropout.state()}};
  return c;
}

void Trainer::restore(const Checkpoint& ckpt) {
  json expected = model_.header();
  require_compatible_header(expected, ckpt.header);
  if (ckpt.header.contains("train") && ckpt.header["train"].value("optimizer", "sgd") != config_.optimizer) {
    throw ValidationError("checkpoint optimizer differs from the configured one");
  }
  load_parameters(model_.params, ckpt.arrays);
  opt_.restore(model_.params, ckpt.optimizer);
  for (std::size_t i = 0; i < average_.size(); ++i) {
    const std::string key = kAveragePrefix + model_.params[i].name;
    const auto it = ckpt.optimizer.find(key);
    if (it == ckpt.optimizer.end()) throw ValidationError("checkpoint lacks averaged weights '" + key + "'");
    if (!it->second.same_shape(average_[i])) throw ValidationError("averaged weights '" + key + "' have the wrong shape");
    average_[i] = it->second;
  }
  step_ = ckpt.step;
  auto state = [&](const char* name) -> const std::string& {
    const auto it = ckpt.rng_states.find(name);
    if (it == ckpt.rng_states.end()) throw ValidationError(std::string("checkpoint lacks RNG state '") + name + "'");
    return it->second;
  };
  rng_.data.set_state(state("data"));
  rng_.timestep.set_state(state("timestep"));
  rng_.dropout.set_state(state("dropout"));
}

void load_parameters(ParameterSet& params, const std::map<std::string, Tensor>& arrays) {
  if (arrays.size() != params.size()) throw ValidationError("checkpoint parameter count differs from the model");
  for (auto& e : params) {
    const auto it = arrays.find(e.name);
    if (it == arrays.end()) throw ValidationError("checkpoint lacks parameter '" + e.name + "'");
    if (!it->second.same_shape(e.value)) throw ValidationError("parameter '" + e.name + "' has the wrong shape");
    e.value = it->second;
  }
}

Model load_model(const std::filesystem::path& checkpoint, bool raw) {
  const Checkpoint c = load_checkpoint(checkpoint);
  Model model(ModelConfig::from_json(c.header));
  require_compatible_header(model.header(), c.header);
  load_parameters(model.params, c.arrays);
  if (raw) return model;
  std::map<std::string, Tensor> averaged;
  for (const auto& [name, value] : c.optimizer) {
    if (name.rfind(kAveragePrefix, 0) == 0) averaged[name.substr(std::char_traits<char>::length(kAveragePrefix))] = value;
  }
  if (!averaged.empty()) load_parameters(model.params, averaged);
  return model;
}

TrainSummary train(const ModelConfig& model_config, const TrainConfig& config, const TrainPaths& paths,
                   const std::function<void(const StepRecord&)>& on_step) {
  std::vector<TrainingSample> data = load_dataset(paths.manifest);
  Model model(model_config);
  Trainer trainer(model, config, std::move(data));
  if (!paths.resume.empty()) trainer.restore(load_checkpoint(paths.resume));
  if (trainer.completed_steps() > config.steps) throw ValidationError("checkpoint is already past the requested steps");

  ensure_directory(paths.out_dir / "checkpoints");
  TrainSummary summary;
  summary.log = paths.out_dir / "train_log.jsonl";
  std::ofstream log(summary.log, paths.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot write " + summary.log.string());

  while (trainer.completed_steps() < config.steps) {
    const StepRecord rec = trainer.step();
    log << rec.to_json().dump() << '\n';
    if (on_step) on_step(rec);
    if (rec.step % config.checkpoint_interval == 0) {
      save_checkpoint(paths.out_dir / "checkpoints" / ("step_" + std::to_string(rec.step) + ".ckpt"), trainer.checkpoint());
    }
  }
  log.flush();
  if (!log) throw IoError("write failed for " + summary.log.string());
  summary.final_checkpoint = paths.out_dir / "final.ckpt";
  save_checkpoint(summary.final_checkpoint, trainer.checkpoint());
  summary.steps = trainer.completed_steps();
  return summary;
}

std::vector<double> ema(const std::vector<double>& xs, int window) {
  std::vector<double> out;
  if (xs.empty()) return out;
  const double a = 2.0 / (window + 1.0);
  double v = xs[0];
  for (double x : xs) {
    v = a * x + (1.0 - a) * v;
    out.push_back(v);
  }
  return out;
}

}  // namespace pdiff
