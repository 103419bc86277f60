#include "pdiff/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pdiff {

void LossWeights::validate(int timesteps) const {
  if (beta < 0.0 || beta > 1.0 || gamma < 0.0 || gamma > 1.0) throw ValidationError("beta and gamma must lie in [0,1]");
  if (lambda < 0.0 || mu < 0.0) throw ValidationError("lambda and mu must be non-negative");
  if (gate < 1 || gate > timesteps) {
    throw ValidationError("identity gate must lie in [1, " + std::to_string(timesteps) + "]");
  }
  if (face_region_fraction < 0.0 || face_region_fraction > 1.0) throw ValidationError("face_region_fraction must lie in [0,1]");
  if (dropout.unconditional < 0.0 || dropout.text_only < 0.0 || dropout.unconditional + dropout.text_only > 1.0) {
    throw ValidationError("dropout fractions must be non-negative and sum to at most 1");
  }
}

Var noise_loss(Var eps_pred, Var eps_true, const Tensor* region_mask) {
  require_same_shape(eps_pred.value(), eps_true.value(), "noise_loss");
  const Var sq = square(sub(eps_pred, eps_true));
  if (!region_mask) return mean(sq);
  const Tensor& ev = eps_pred.value();
  if (ev.rank() != 3 || region_mask->rank() != 2 || region_mask->dim(0) != ev.dim(1) || region_mask->dim(1) != ev.dim(2)) {
    throw ValidationError("noise_loss: region mask does not match the prediction");
  }
  const std::size_t hw = region_mask->size();
  Tensor sel(ev.shape());
  std::size_t count = 0;
  for (std::size_t i = 0; i < hw; ++i) {
    if ((*region_mask)[i] >= 0.5) {
      ++count;
      for (int c = 0; c < ev.dim(0); ++c) sel[c * hw + i] = 1.0;
    }
  }
  if (count == 0) throw ValidationError("noise_loss: empty region mask");
  return scale(sum(mul_const(sq, sel)), 1.0 / (static_cast<double>(count) * ev.dim(0)));
}

Var identity_loss(Var zt, Var eps_pred, int t, const NoiseSchedule& sched, const LatentCodec& codec, const BBox& bbox,
                  const Tensor& reference_face, const FaceEmbedder& embedder, const LossWeights& weights) {
  check_timestep(sched, t);
  if (t > weights.gate) return zt.tape->constant(Tensor::scalar(0.0));
  const Var x0 = codec.decode(one_step_reverse(zt, eps_pred, t, sched));
  const Var face = crop(x0, bbox.x0, bbox.y0, bbox.x1, bbox.y1);
  const Var generated = embedder.embed(face);
  const Var reference = zt.tape->constant(embedder.embed(reference_face).vector);
  return add_scalar(scale(cosine_similarity(reference, generated), -1.0), 1.0);
}

Tensor resample_mask(const Tensor& mask, int target) {
  if (mask.rank() != 2) throw ValidationError("resample_mask: mask must be [H,W]");
  const int h = mask.dim(0), w = mask.dim(1);
  if (target < 1 || target > h || target > w) throw ValidationError("resample_mask: upsampling is not supported");
  if (target == h && target == w) return mask;
  // Exact area overlap between source pixels and each target cell.
  Tensor out({target, target});
  const double sy = static_cast<double>(h) / target, sx = static_cast<double>(w) / target;
  for (int oy = 0; oy < target; ++oy) {
    const double y0 = oy * sy, y1 = (oy + 1) * sy;
    for (int ox = 0; ox < target; ++ox) {
      const double x0 = ox * sx, x1 = (ox + 1) * sx;
      double acc = 0.0;
      for (int y = static_cast<int>(std::floor(y0)); y < std::min(h, static_cast<int>(std::ceil(y1))); ++y) {
        const double wy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
        for (int x = static_cast<int>(std::floor(x0)); x < std::min(w, static_cast<int>(std::ceil(x1))); ++x) {
          const double wx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
          acc += wy * wx * mask[static_cast<std::size_t>(y) * w + x];
        }
      }
      out[static_cast<std::size_t>(oy) * target + ox] = std::clamp(acc / (sy * sx), 0.0, 1.0);
    }
  }
  return out;
}

FaceMask FaceMask::build(const Tensor& full, const std::vector<int>& resolutions) {
  FaceMask m{full, {}};
  for (int r : resolutions) m.layers.push_back(resample_mask(full, r));
  return m;
}

namespace {

Var token_map(Var map, int token) {
  const Tensor& v = map.value();
  if (token < 0 || token >= v.dim(0)) throw ValidationError("token index " + std::to_string(token) + " out of range");
  return select_row(reshape(map, {v.dim(0), v.dim(1) * v.dim(2)}), token);
}

// mean(A (1-M)) + mean(relu(floor - A) M)
Var truncated_row(Var a, const Tensor& m, double floor) {
  Tensor outside(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) outside[i] = 1.0 - m[i];
  const Var leak = mean(mul_const(a, outside));
  const Var shortfall = mean(mul_const(relu(add_scalar(scale(a, -1.0), floor)), m));
  return add(leak, shortfall);
}

}  // namespace

Var localization_loss(const AttentionRecord& attn, const FaceMask& masks, int identity_index,
                      std::optional<int> emotion_index, const LossWeights& weights) {
  if (attn.size() == 0) throw ValidationError("localization_loss: no attention layers");
  if (masks.layers.size() != attn.size()) throw ValidationError("localization_loss: one mask per layer required");
  const double n = static_cast<double>(attn.size());
  Var total;
  for (std::size_t l = 0; l < attn.size(); ++l) {
    const Tensor& a = attn.map(l);
    const Tensor& m = masks.layers[l];
    if (m.rank() != 2 || m.dim(0) != a.dim(1) || m.dim(1) != a.dim(2)) {
      throw ValidationError("localization_loss: mask resolution " + shape_string(m.shape()) + " does not match layer " +
                            std::to_string(l));
    }
    const Tensor flat = m.reshaped({static_cast<int>(m.size())});
    Var layer = scale(truncated_row(token_map(attn.maps[l], identity_index), flat, weights.beta), weights.lambda / n);
    if (emotion_index) {
      layer = add(layer, scale(truncated_row(token_map(attn.maps[l], *emotion_index), flat, weights.gamma), weights.mu / n));
    }
    total = total.valid() ? add(total, layer) : layer;
  }
  return total;
}

Var total_loss(Var noise, Var identity, Var localization) { return add(add(noise, identity), localization); }

LossReport make_report(Var noise, Var identity, Var localization, bool gated) {
  LossReport r;
  r.noise = noise.value().item();
  r.identity = identity.value().item();
  r.localization = localization.value().item();
  r.total = r.noise + r.identity + r.localization;
  r.gated = gated;
  return r;
}

double attention_mass_ratio(const AttentionRecord& attn, const FaceMask& masks, int token) {
  if (attn.size() == 0 || masks.layers.size() != attn.size()) throw ValidationError("attention_mass_ratio: layer mismatch");
  double acc = 0.0;
  for (std::size_t l = 0; l < attn.size(); ++l) {
    const Tensor& a = attn.map(l);
    const Tensor& m = masks.layers[l];
    const std::size_t hw = m.size();
    double in = 0.0, out = 0.0, win = 0.0, wout = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = a[static_cast<std::size_t>(token) * hw + i];
      in += v * m[i];
      win += m[i];
      out += v * (1.0 - m[i]);
      wout += 1.0 - m[i];
    }
    if (win <= 0.0 || wout <= 0.0 || out <= 0.0) throw ValidationError("attention_mass_ratio: degenerate mask");
    acc += (in / win) / (out / wout);
  }
  return acc / static_cast<double>(attn.size());
}

}  // namespace pdiff
