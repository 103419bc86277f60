#include "pdiff/model.hpp"

#include "pdiff/rng.hpp"

namespace pdiff {

using json = nlohmann::json;

json ModelConfig::to_json() const {
  return {{"image_size", image_size}, {"widths", widths},       {"cond_width", cond_width},
          {"attention_dim", attention_dim}, {"heads", heads}, {"time_dim", time_dim},
          {"head_hidden", head_hidden}, {"max_tokens", max_tokens}, {"timesteps", timesteps},
          {"beta_start", beta_start}, {"beta_end", beta_end}, {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.widths = j.at("widths").get<std::array<int, 3>>();
  c.cond_width = j.at("cond_width").get<int>();
  c.attention_dim = j.at("attention_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.time_dim = j.at("time_dim").get<int>();
  c.head_hidden = j.at("head_hidden").get<int>();
  c.max_tokens = j.at("max_tokens").get<int>();
  c.timesteps = j.at("timesteps").get<int>();
  c.beta_start = j.at("beta_start").get<double>();
  c.beta_end = j.at("beta_end").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

ModelConfig ModelConfig::gradient_check_profile() {
  ModelConfig c;
  const DenoiserConfig d = DenoiserConfig::gradient_check_profile();
  c.image_size = d.image_size;
  c.widths = d.widths;
  c.cond_width = d.cond_width;
  c.attention_dim = d.attention_dim;
  c.time_dim = d.time_dim;
  c.head_hidden = 8;
  c.max_tokens = 12;
  return c;
}

namespace {

TextEncoderConfig encoder_config(const ModelConfig& c) {
  TextEncoderConfig e;
  e.width = c.cond_width;
  e.max_tokens = c.max_tokens;
  return e;
}

DenoiserConfig denoiser_config(const ModelConfig& c) {
  DenoiserConfig d;
  d.image_size = c.image_size;
  d.widths = c.widths;
  d.cond_width = c.cond_width;
  d.attention_dim = c.attention_dim;
  d.heads = c.heads;
  d.time_dim = c.time_dim;
  d.timesteps = c.timesteps;
  d.seed = c.seed;
  return d;
}

}  // namespace

Model::Model(ModelConfig config)
    : config_(config),
      encoder_(encoder_config(config)),
      embedder_(config.image_size),
      schedule_(build_schedule(config.timesteps, config.beta_start, config.beta_end)),
      denoiser_(params, denoiser_config(config)),
      head_(params, config.cond_width, FaceEmbedder::kWidth, config.head_hidden, mix_seed(config.seed, "init.head")) {
  Rng rng = Rng::substream(config.seed, "init.null");
  Tensor null({config.cond_width});
  for (double& v : null.values()) v = 0.5 * rng.normal();
  null_ = params.add("cond.null", std::move(null));
}

ConditioningSequence Model::condition(Tape& tape, const TextEncoder::Encoded& encoded, const Tensor* face) const {
  const Var text = tape.constant(encoded.embeddings);
  std::optional<Var> face_var;
  if (face) face_var = tape.constant(embedder_.embed(*face).vector);
  return augment(tape, params, encoded.tokens, text, face_var, head_);
}

Var Model::null_condition(Tape& tape) const {
  return repeat_rows(tape.parameter(params, null_), config_.max_tokens);
}

json Model::header() const {
  json h = config_.to_json();
  h["vocabulary_hash"] = encoder_.vocabulary().hash();
  h["attention_layers"] = Denoiser::kAttentionLayers;
  return h;
}

}  // namespace pdiff
