#pragma once

#include <optional>
#include <vector>

#include "pdiff/autograd.hpp"
#include "pdiff/conditioning.hpp"
#include "pdiff/denoiser.hpp"
#include "pdiff/schedule.hpp"
#include "pdiff/tensor.hpp"
#include "pdiff/toyfaces.hpp"

namespace pdiff {

struct LossWeights {
  double beta = 0.8;    // identity-token attention floor inside the mask
  double gamma = 0.1;   // emotion-token floor
  double lambda = 0.001;
  double mu = 0.01;
  int gate = 250;       // R_t: identity loss only for t <= gate
  double face_region_fraction = 0.5;
  DropoutFractions dropout;
  bool localization = true;  // ablation switches
  bool identity = true;

  void validate(int timesteps) const;
};

// Encoder/decoder pair between pixel space and the diffusion space.
// The default instance is the identity map.
struct LatentCodec {
  Tensor encode(const Tensor& x) const { return x; }
  Tensor decode(const Tensor& z) const { return z; }
  Var decode(Var z) const { return z; }
};

struct LossReport {
  double noise = 0.0;
  double identity = 0.0;
  double localization = 0.0;
  double total = 0.0;
  bool gated = false;  // t > R_t
};

// Mean squared error; with a region mask [H,W], averaged over channels and
// positions with mask >= 0.5 only.
Var noise_loss(Var eps_pred, Var eps_true, const Tensor* region_mask = nullptr);

// 1 - cos(phi(reference), phi(crop(D(z0_hat)))) for t <= gate, else an exact
// constant zero with no path to any parameter.
Var identity_loss(Var zt, Var eps_pred, int t, const NoiseSchedule& sched, const LatentCodec& codec, const BBox& bbox,
                  const Tensor& reference_face, const FaceEmbedder& embedder, const LossWeights& weights);

// Area-average downsampling of a [H,W] mask to [target,target].
Tensor resample_mask(const Tensor& mask, int target);

struct FaceMask {
  Tensor full;
  std::vector<Tensor> layers;

  static FaceMask build(const Tensor& full, const std::vector<int>& resolutions);
};

// Means run over every position of each layer map.
Var localization_loss(const AttentionRecord& attn, const FaceMask& masks, int identity_index,
                      std::optional<int> emotion_index, const LossWeights& weights);

Var total_loss(Var noise, Var identity, Var localization);
LossReport make_report(Var noise, Var identity, Var localization, bool gated);

// In-mask over out-of-mask mean attention for one token, averaged over layers.
double attention_mass_ratio(const AttentionRecord& attn, const FaceMask& masks, int token);

}  // namespace pdiff
