#include "pdiff/denoiser.hpp"

#include <cmath>
#include <string>

#include "pdiff/rng.hpp"

namespace pdiff {

DenoiserConfig DenoiserConfig::gradient_check_profile() {
  DenoiserConfig c;
  c.image_size = 8;
  c.widths = {4, 4, 4};
  c.cond_width = 16;
  c.attention_dim = 4;
  c.time_dim = 4;
  return c;
}

void DenoiserConfig::validate() const {
  if (image_size < 4 || image_size % 4) throw ValidationError("image_size must be a positive multiple of 4");
  if (channels < 1 || cond_width < 1 || time_dim < 2 || time_dim % 2) throw ValidationError("invalid denoiser widths");
  for (int w : widths) {
    if (w < 1) throw ValidationError("invalid denoiser widths");
  }
  if (heads < 1 || heads > 2 || attention_dim % heads) throw ValidationError("heads must be 1 or 2 and divide attention_dim");
  if (timesteps < 1) throw ValidationError("timesteps must be >= 1");
}

Tensor timestep_embedding(int t, int dim) {
  Tensor e({dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::pow(1000.0, -static_cast<double>(i) / std::max(1, half - 1));
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  return e;
}

CrossAttentionOutput cross_attention(Var features, Var cond, const CrossAttentionWeights& w, int heads, bool capture) {
  const Tensor& fv = features.value();
  if (fv.rank() != 3) throw ValidationError("cross_attention: features must be [C,H,W]");
  const int c = fv.dim(0), h = fv.dim(1), wd = fv.dim(2);
  if (w.wq.value().dim(0) != c || w.wo.value().dim(1) != c) throw ValidationError("cross_attention: feature width mismatch");
  if (cond.value().rank() != 2 || cond.value().dim(1) != w.wk.value().dim(0)) {
    throw ValidationError("cross_attention: conditioning width mismatch");
  }
  const Var tokens = to_tokens(features);
  const Var q = matmul(tokens, w.wq);
  const Var k = matmul(cond, w.wk);
  const Var v = matmul(cond, w.wv);
  const Var p = attention_probs(q, k, heads);
  const Var o = add_row_bias(matmul(attention_apply(p, v), w.wo), w.bo);
  CrossAttentionOutput out;
  out.features = add(features, from_tokens(o, h, wd));
  if (capture) out.map = attention_map(p, h, wd);
  return out;
}

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

}  // namespace

Denoiser::Denoiser(ParameterSet& params, DenoiserConfig config) : config_(config) {
  config_.validate();
  Rng rng = Rng::substream(config_.seed, "init.unet");
  const auto [w0, w1, w2] = config_.widths;
  const int ch = config_.channels;
  const int d = config_.attention_dim;
  const int dc = config_.cond_width;

  auto conv = [&](const std::string& name, int ci, int co, Block* blk) {
    const std::size_t w = params.add("unet." + name + ".w", random_tensor(rng, {co, ci, 3, 3}, std::sqrt(2.0 / (9.0 * ci))));
    const std::size_t b = params.add("unet." + name + ".b", Tensor({co}));
    if (blk) {
      blk->w = w;
      blk->b = b;
      blk->time = params.add("unet." + name + ".time",
                             random_tensor(rng, {config_.time_dim, co}, 1.0 / std::sqrt(config_.time_dim)));
      if (ci != co) blk->skip = params.add("unet." + name + ".skip", random_tensor(rng, {ci, co}, 1.0 / std::sqrt(ci)));
    }
    return std::pair{w, b};
  };
  auto attention = [&](const std::string& name, int c) {
    Attention a;
    a.wq = params.add("unet." + name + ".wq", random_tensor(rng, {c, d}, 1.0 / std::sqrt(c)));
    a.wk = params.add("unet." + name + ".wk", random_tensor(rng, {dc, d}, 1.0 / std::sqrt(dc)));
    a.wv = params.add("unet." + name + ".wv", random_tensor(rng, {dc, d}, 1.0 / std::sqrt(dc)));
    a.wo = params.add("unet." + name + ".wo", random_tensor(rng, {d, c}, 0.5 / std::sqrt(d)));
    a.bo = params.add("unet." + name + ".bo", Tensor({c}));
    return a;
  };

  std::tie(conv_in_w_, conv_in_b_) = conv("conv_in", ch, w0, nullptr);
  conv("down0", w0, w0, &blocks_[0]);
  attn_[0] = attention("attn0", w0);
  conv("down1", w0, w1, &blocks_[1]);
  attn_[1] = attention("attn1", w1);
  conv("down2", w1, w2, &blocks_[2]);
  attn_[2] = attention("attn2", w2);
  conv("up2", w2, w1, &blocks_[3]);
  attn_[3] = attention("attn3", w1);
  conv("up1", w1 + w1, w1, &blocks_[4]);
  attn_[4] = attention("attn4", w1);
  conv("up0", w1 + w0, w0, &blocks_[5]);
  attn_[5] = attention("attn5", w0);
  // Zero output projection: an untrained model predicts eps = 0.
  conv_out_w_ = params.add("unet.conv_out.w", Tensor({ch, w0, 3, 3}));
  conv_out_b_ = params.add("unet.conv_out.b", Tensor({ch}));
}

std::vector<int> Denoiser::attention_resolutions() const {
  const int s = config_.image_size;
  return {s, s / 2, s / 4, s / 4, s / 2, s};
}

Var Denoiser::block(Tape& tape, const ParameterSet& params, const Block& blk, Var x, Var temb) const {
  const Var bias = reshape(matmul(temb, tape.parameter(params, blk.time)), {params[blk.b].value.dim(0)});
  const Var y = silu(add_channel_bias(conv2d(x, tape.parameter(params, blk.w), tape.parameter(params, blk.b)), bias));
  // Residual path; a width change goes through a per-pixel projection.
  if (!blk.skip) return add(x, y);
  const Tensor& xv = x.value();
  return add(from_tokens(matmul(to_tokens(x), tape.parameter(params, *blk.skip)), xv.dim(1), xv.dim(2)), y);
}

Var Denoiser::attend(Tape& tape, const ParameterSet& params, const Attention& a, Var x, Var cond, bool capture,
                     AttentionRecord& record) const {
  const CrossAttentionWeights w{tape.parameter(params, a.wq), tape.parameter(params, a.wk), tape.parameter(params, a.wv),
                                tape.parameter(params, a.wo), tape.parameter(params, a.bo)};
  CrossAttentionOutput out = cross_attention(x, cond, w, config_.heads, capture);
  if (capture) {
    record.maps.push_back(out.map);
    record.resolutions.push_back(x.value().dim(1));
  }
  return out.features;
}

Denoiser::Prediction Denoiser::predict_noise(Tape& tape, const ParameterSet& params, Var zt, int t, Var cond,
                                             bool capture) const {
  const Tensor& zv = zt.value();
  const int s = config_.image_size;
  if (zv.rank() != 3 || zv.dim(0) != config_.channels || zv.dim(1) != s || zv.dim(2) != s) {
    throw ValidationError("predict_noise: latent shape " + shape_string(zv.shape()) + " does not match the model");
  }
  if (!zv.all_finite()) throw ValidationError("predict_noise: non-finite latent");
  if (t < 1 || t > config_.timesteps) throw ValidationError("predict_noise: timestep " + std::to_string(t) + " out of range");
  if (cond.value().rank() != 2 || cond.value().dim(1) != config_.cond_width) {
    throw ValidationError("predict_noise: conditioning must be [n, " + std::to_string(config_.cond_width) + "]");
  }

  Prediction pred;
  const Var temb = tape.constant(timestep_embedding(t, config_.time_dim).reshaped({1, config_.time_dim}));

  Var h = conv2d(zt, tape.parameter(params, conv_in_w_), tape.parameter(params, conv_in_b_));
  h = attend(tape, params, attn_[0], block(tape, params, blocks_[0], h, temb), cond, capture, pred.attention);
  const Var skip0 = h;
  h = attend(tape, params, attn_[1], block(tape, params, blocks_[1], avg_pool2(h), temb), cond, capture, pred.attention);
  const Var skip1 = h;
  h = attend(tape, params, attn_[2], block(tape, params, blocks_[2], avg_pool2(h), temb), cond, capture, pred.attention);
  h = attend(tape, params, attn_[3], block(tape, params, blocks_[3], h, temb), cond, capture, pred.attention);
  h = concat_channels(upsample2(h), skip1);
  h = attend(tape, params, attn_[4], block(tape, params, blocks_[4], h, temb), cond, capture, pred.attention);
  h = concat_channels(upsample2(h), skip0);
  h = attend(tape, params, attn_[5], block(tape, params, blocks_[5], h, temb), cond, capture, pred.attention);
  pred.eps = conv2d(h, tape.parameter(params, conv_out_w_), tape.parameter(params, conv_out_b_));
  return pred;
}

}  // namespace pdiff
