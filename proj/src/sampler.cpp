#include "pdiff/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "pdiff/image_io.hpp"
#include "pdiff/rng.hpp"

namespace pdiff {

using json = nlohmann::json;

void SamplerConfig::validate() const {
  if (num_steps < 1) throw ValidationError("num_steps must be >= 1");
  if (!(guidance_scale >= 0.0)) throw ValidationError("guidance_scale must be >= 0");
  if (method != "euler") throw ValidationError("unknown sampling method '" + method + "'");
}

json SamplerConfig::to_json() const {
  return {{"num_steps", num_steps}, {"guidance_scale", guidance_scale}, {"seed", seed}, {"method", method},
          {"conditional_only", conditional_only}};
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s) {
  require_same_shape(eps_uncond, eps_cond, "cfg_combine");
  Tensor out(eps_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - s) * eps_uncond[i] + s * eps_cond[i];
  return out;
}

std::vector<int> sampling_timesteps(int timesteps, int num_steps) {
  if (num_steps < 1 || timesteps < 1) throw ValidationError("invalid sampling step count");
  std::vector<int> ts;
  if (num_steps == 1) return {timesteps};
  for (int k = 0; k < num_steps; ++k) {
    ts.push_back(timesteps - static_cast<int>(std::lround(static_cast<double>(k) * (timesteps - 1) / (num_steps - 1))));
  }
  return ts;
}

Tensor initial_noise(const Model& model, std::uint64_t seed) {
  const int s = model.config().image_size;
  return Rng::substream(seed, "sampler").normal_tensor({3, s, s});
}

std::uint64_t tensor_hash(const Tensor& t) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double)));
}

namespace {

struct Guidance {
  Tensor cond;
  Tensor uncond;
};

Guidance prepare_guidance(const Model& model, const std::string& prompt, const Tensor* face) {
  Tape tape;
  const TextEncoder::Encoded enc = model.encoder().encode(prompt);
  Guidance g;
  g.cond = model.condition(tape, enc, face).embeddings.value();
  g.uncond = model.null_condition(tape).value();
  return g;
}

Tensor predict(const Model& model, const Tensor& z, int t, const Tensor& cond) {
  Tape tape;
  return model.denoiser().predict_noise(tape, model.params, tape.constant(z), t, tape.constant(cond), false).eps.value();
}

Tensor guided(const Model& model, const Tensor& z, int t, const Guidance& g, const SamplerConfig& config) {
  const Tensor c = predict(model, z, t, g.cond);
  if (config.conditional_only) return c;
  return cfg_combine(predict(model, z, t, g.uncond), c, config.guidance_scale);
}

// Deterministic Euler steps on x = z / sqrt(abar), whose noise level is
// sigma(t); the last step lands on the one-step reverse estimate.
SampleResult run_sampler(const Model& model, const SamplerConfig& config,
                         const std::function<Tensor(const Tensor&, int)>& eps_fn) {
  config.validate();
  const NoiseSchedule& sched = model.schedule();
  SampleResult r;
  r.timesteps = sampling_timesteps(sched.steps, config.num_steps);
  Tensor z = initial_noise(model, config.seed);
  r.noise_hash = tensor_hash(z);
  for (std::size_t k = 0; k < r.timesteps.size(); ++k) {
    const int t = r.timesteps[k];
    r.trajectory.push_back(z);
    const Tensor eps = eps_fn(z, t);
    if (k + 1 == r.timesteps.size()) {
      z = one_step_reverse(z, eps, t, sched);
      break;
    }
    const int tn = r.timesteps[k + 1];
    const double a = std::sqrt(sched.alpha_bar(t)), an = std::sqrt(sched.alpha_bar(tn));
    const double ds = sched.sigma(tn) - sched.sigma(t);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = (z[i] / a + ds * eps[i]) * an;
  }
  r.image = model.codec().decode(z);
  for (double& v : r.image.values()) v = std::clamp(v, 0.0, 1.0);
  return r;
}

}  // namespace

SampleResult sample(const Model& model, const std::string& prompt, const Tensor* reference_face,
                    const SamplerConfig& config) {
  const Guidance g = prepare_guidance(model, prompt, reference_face);
  return run_sampler(model, config, [&](const Tensor& z, int t) { return guided(model, z, t, g, config); });
}

Tensor combine_region_predictions(const std::vector<Tensor>& predictions, const std::vector<Tensor>& masks) {
  if (predictions.empty() || predictions.size() != masks.size()) throw ValidationError("one mask per prediction required");
  const Tensor& p0 = predictions[0];
  if (p0.rank() != 3) throw ValidationError("predictions must be [C,H,W]");
  const int c = p0.dim(0);
  const std::size_t hw = static_cast<std::size_t>(p0.dim(1)) * p0.dim(2);
  Tensor total({p0.dim(1), p0.dim(2)});
  for (std::size_t r = 0; r < masks.size(); ++r) {
    require_same_shape(predictions[r], p0, "combine_region_predictions");
    if (masks[r].size() != hw) throw ValidationError("region mask size does not match the canvas");
    for (std::size_t i = 0; i < hw; ++i) total[i] += masks[r][i];
  }
  for (std::size_t i = 0; i < hw; ++i) {
    if (!(total[i] > 0.0)) throw ValidationError("regions leave pixel " + std::to_string(i) + " with zero total weight");
  }
  Tensor out(p0.shape());
  for (std::size_t r = 0; r < masks.size(); ++r) {
    for (int k = 0; k < c; ++k) {
      for (std::size_t i = 0; i < hw; ++i) {
        const double term = (masks[r][i] / total[i]) * predictions[r][k * hw + i];
        if (r == 0) {
          out[k * hw + i] = term;
        } else {
          out[k * hw + i] += term;
        }
      }
    }
  }
  return out;
}

SampleResult multi_subject_sample(const Model& model, const std::vector<RegionSpec>& regions, const SamplerConfig& config,
                                  const MultiSubjectOptions& options) {
  if (regions.empty()) throw ValidationError("at least one region is required");
  const int s = model.config().image_size;
  std::vector<Tensor> masks;
  std::vector<Guidance> guidance;
  Tensor coverage({s, s});
  for (const auto& r : regions) {
    if (r.mask.rank() != 2 || r.mask.dim(0) != s || r.mask.dim(1) != s) {
      throw ValidationError("region mask must be " + std::to_string(s) + "x" + std::to_string(s));
    }
    for (std::size_t i = 0; i < r.mask.size(); ++i) {
      if (r.mask[i] < 0.0 || r.mask[i] > 1.0) throw ValidationError("region mask values must lie in [0,1]");
      coverage[i] += r.mask[i];
    }
    masks.push_back(r.mask);
    guidance.push_back(prepare_guidance(model, r.prompt, r.reference_face ? &*r.reference_face : nullptr));
  }
  if (options.fill_background) {
    Tensor bg({s, s});
    bool any = false;
    for (std::size_t i = 0; i < bg.size(); ++i) {
      bg[i] = std::clamp(1.0 - coverage[i], 0.0, 1.0);
      any = any || bg[i] > 0.0;
    }
    if (any) {
      masks.push_back(bg);
      guidance.push_back(prepare_guidance(model, options.background_prompt, nullptr));
    }
  }
  return run_sampler(model, config, [&](const Tensor& z, int t) {
    std::vector<Tensor> preds;
    for (const auto& g : guidance) preds.push_back(guided(model, z, t, g, config));
    return combine_region_predictions(preds, masks);
  });
}

std::vector<RegionSpec> load_region_request(const std::filesystem::path& path, int image_size) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read region request " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("malformed region request: " + std::string(e.what()));
  }
  if (!doc.contains("regions") || !doc["regions"].is_array() || doc["regions"].empty()) {
    throw ValidationError("region request needs a non-empty 'regions' array");
  }
  const auto base = path.parent_path();
  std::vector<RegionSpec> out;
  for (const auto& r : doc["regions"]) {
    RegionSpec spec;
    spec.prompt = r.at("prompt").get<std::string>();
    if (r.contains("rect")) {
      const auto rect = r["rect"].get<std::vector<int>>();
      if (rect.size() != 4) throw ValidationError("rect must be [x0,y0,x1,y1]");
      if (rect[0] < 0 || rect[1] < 0 || rect[2] > image_size || rect[3] > image_size || rect[0] >= rect[2] ||
          rect[1] >= rect[3]) {
        throw ValidationError("rect must be a non-empty box inside the " + std::to_string(image_size) + "px canvas");
      }
      spec.mask = Tensor({image_size, image_size});
      for (int y = rect[1]; y < rect[3]; ++y) {
        for (int x = rect[0]; x < rect[2]; ++x) {
          spec.mask[static_cast<std::size_t>(y) * image_size + x] = 1.0;
        }
      }
    } else if (r.contains("mask")) {
      spec.mask = read_png_gray(base / r["mask"].get<std::string>());
    } else {
      throw ValidationError("each region needs 'rect' or 'mask'");
    }
    if (r.contains("face")) spec.reference_face = read_png_rgb(base / r["face"].get<std::string>());
    out.push_back(std::move(spec));
  }
  return out;
}

}  // namespace pdiff
