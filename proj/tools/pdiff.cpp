// pdiff: dataset building, training, generation, evaluation and attention
// inspection for the toy face diffusion pipeline.

#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "pdiff/config.hpp"
#include "pdiff/evalkit.hpp"
#include "pdiff/image_io.hpp"
#include "pdiff/sampler.hpp"
#include "pdiff/toyfaces.hpp"
#include "pdiff/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace pdiff;

namespace {

// Every config key doubles as a --flag; values given on the command line
// override the config file.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd, const std::vector<std::string>& names) {
    cmd->add_option("--config", config_file, "key = value config file");
    const RunConfig defaults;
    for (const auto& k : config_keys()) {
      if (std::find(names.begin(), names.end(), k.name) == names.end()) continue;
      cmd->add_option_function<std::string>(
             "--" + k.name, [this, name = k.name](const std::string& v) { values[name] = v; }, k.help)
          ->default_str(k.get(defaults));
    }
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_file.empty()) apply_config_file(c, config_file);
    for (const auto& [k, v] : values) apply_setting(c, k, v);
    // Out-of-range values are usage mistakes too.
    try {
      c.train.validate(c.model.timesteps);
      c.sampler.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const ValidationError& e) {
      throw ConfigError(e.what());
    }
    return c;
  }
};

std::vector<std::string> all_keys() {
  std::vector<std::string> out;
  for (const auto& k : config_keys()) out.push_back(k.name);
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

int cmd_build_data(int n, std::uint64_t seed, const std::string& out, int image_size) {
  if (n <= 0) throw ConfigError("--n must be positive");
  ToyfaceConfig cfg;
  cfg.image_size = image_size;
  const Manifest m = build_dataset(n, seed, out, cfg);
  std::cout << "wrote " << m.records.size() << " samples to " << m.path.string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& c, const std::string& resume) {
  TrainPaths paths{c.manifest, c.out, resume};
  const int every = std::max(1, c.train.steps / 20);
  const TrainSummary s = train(c.model, c.train, paths, [&](const StepRecord& r) {
    if (r.step % every == 0) std::cerr << "step " << r.step << " noise " << r.mean_noise() << "\n";
  });
  write_text(fs::path(c.out) / "run.cfg", render_config(c));
  std::cout << "trained " << s.steps << " steps; checkpoint " << s.final_checkpoint.string() << "\n";
  return 0;
}

int cmd_generate(const RunConfig& c, const std::string& checkpoint, const std::string& prompt, const std::string& face,
                 const std::string& regions, const std::string& name) {
  if (prompt.empty() == regions.empty()) throw ConfigError("give exactly one of --prompt or --regions");
  const Model model = load_model(checkpoint);
  SamplerConfig sc = c.sampler;
  SampleResult r;
  json side;
  if (!regions.empty()) {
    const auto specs = load_region_request(regions, model.config().image_size);
    r = multi_subject_sample(model, specs, sc);
    side["regions"] = regions;
  } else {
    Tensor face_img;
    if (!face.empty()) face_img = read_png_rgb(face);
    r = sample(model, prompt, face.empty() ? nullptr : &face_img, sc);
    side["prompt"] = prompt;
    side["face"] = face;
  }
  ensure_directory(c.out);
  const fs::path image_path = fs::path(c.out) / (name + ".png");
  write_png_rgb(image_path, r.image);
  side["checkpoint"] = checkpoint;
  side["sampler"] = sc.to_json();
  side["seed"] = sc.seed;
  side["noise_hash"] = r.noise_hash;
  side["timesteps"] = r.timesteps;
  write_text(fs::path(c.out) / (name + ".json"), side.dump(2) + "\n");
  std::cout << image_path.string() << "\n";
  return 0;
}

int cmd_evaluate(const std::string& dir, const std::string& out, int image_size) {
  const FaceEmbedder faces(image_size);
  const AnalyticFaceEmbedder face_iface(faces);
  const ToyJointEmbedder joint(image_size);
  const EvalReport rep = evaluate_directory(dir, face_iface, joint, image_size);
  const fs::path o = out.empty() ? fs::path(dir) : fs::path(out);
  ensure_directory(o);
  write_text(o / "eval_report.json", rep.to_json().dump(2) + "\n");
  write_text(o / "eval_rows.csv", rep.to_csv());
  std::cout << "id_pres " << rep.id_pres << " clip_ti " << rep.clip_ti << " expression " << rep.expression_coeff << "\n";
  return 0;
}

int cmd_inspect(const RunConfig& c, const std::string& checkpoint, int index, int count, int t,
                const std::string& prompt_override, int upscale) {
  const Model model = load_model(checkpoint);
  const Manifest manifest = read_manifest(c.manifest);
  if (index < 0 || count < 1 || static_cast<std::size_t>(index + count) > manifest.records.size()) {
    throw ConfigError("--index/--count outside the manifest");
  }
  if (t < 1 || t > model.schedule().steps) throw ConfigError("--t outside [1, T]");
  const fs::path out(c.out);
  ensure_directory(out);
  json ratios = json::array();
  double id_sum = 0.0, emo_sum = 0.0;
  int emo_n = 0;
  Rng rng = Rng::substream(c.train.seed, "inspect");
  for (int k = 0; k < count; ++k) {
    const TrainingSample s = load_sample(manifest.records[static_cast<std::size_t>(index + k)], manifest.path.parent_path());
    const std::string prompt = prompt_override.empty() ? s.caption : prompt_override;
    const TextEncoder::Encoded enc = model.encoder().encode(prompt);
    if (!enc.tokens.identity_index) throw std::runtime_error("prompt \"" + prompt + "\" has no identity token");
    Tape tape;
    const ConditioningSequence cond = model.condition(tape, enc, &s.reference_face);
    const Tensor zt = forward_noise(model.codec().encode(s.image), t, rng.normal_tensor(s.image.shape()), model.schedule());
    const auto pred = model.denoiser().predict_noise(tape, model.params, tape.constant(zt), t, cond.embeddings, true);
    const FaceMask masks = FaceMask::build(s.face_mask, pred.attention.resolutions);
    json row{{"index", index + k}, {"prompt", prompt}};
    row["identity_ratio"] = attention_mass_ratio(pred.attention, masks, *enc.tokens.identity_index);
    id_sum += row["identity_ratio"].get<double>();
    if (enc.tokens.emotion_index) {
      row["emotion_ratio"] = attention_mass_ratio(pred.attention, masks, *enc.tokens.emotion_index);
      emo_sum += row["emotion_ratio"].get<double>();
      ++emo_n;
    }
    if (k == 0) {
      for (std::size_t l = 0; l < pred.attention.size(); ++l) {
        const Tensor& a = pred.attention.map(l);
        const int r = a.dim(1);
        auto token_map = [&](int tok) {
          Tensor m({r, r});
          std::copy_n(a.data() + static_cast<std::size_t>(tok) * r * r, r * r, m.data());
          return m;
        };
        const int up = std::max(1, upscale * model.config().image_size / r);
        write_png_rgb(out / ("identity_layer" + std::to_string(l) + ".png"),
                      heatmap_rgb(token_map(*enc.tokens.identity_index), up));
        if (enc.tokens.emotion_index) {
          write_png_rgb(out / ("emotion_layer" + std::to_string(l) + ".png"),
                        heatmap_rgb(token_map(*enc.tokens.emotion_index), up));
        }
      }
    }
    ratios.push_back(row);
  }
  json doc{{"checkpoint", checkpoint}, {"t", t}, {"samples", ratios}, {"identity_ratio_mean", id_sum / count}};
  if (emo_n > 0) doc["emotion_ratio_mean"] = emo_sum / emo_n;
  write_text(out / "attention_ratios.json", doc.dump(2) + "\n");
  std::cout << "identity in/out ratio " << id_sum / count << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy face diffusion with identity conditioning and attention localization"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  auto* build = app.add_subcommand("build-data", "Render a toy face corpus with a manifest");
  int n = 512, image_size = 32;
  std::uint64_t seed = 7;
  std::string out;
  build->add_option("--n", n, "number of samples");
  build->add_option("--seed", seed, "root seed");
  build->add_option("--out", out, "output directory")->required();
  build->add_option("--image_size", image_size, "square image side in pixels");

  auto* trn = app.add_subcommand("train", "Train the denoiser, fusion head and null embedding");
  ConfigFlags train_flags;
  std::string resume;
  train_flags.attach(trn, all_keys());
  trn->add_option("--resume", resume, "checkpoint to continue from");

  auto* gen = app.add_subcommand("generate", "Sample an image from a checkpoint");
  ConfigFlags gen_flags;
  std::string checkpoint, prompt, face, regions, name = "sample";
  gen_flags.attach(gen, {"seed", "out", "num_steps", "guidance_scale", "method"});
  gen->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  gen->add_option("--prompt", prompt, "text prompt");
  gen->add_option("--face", face, "reference face crop (PNG)");
  gen->add_option("--regions", regions, "multi-subject request (JSON)");
  gen->add_option("--name", name, "output file stem");

  auto* ev = app.add_subcommand("evaluate", "Score generated images against references and prompts");
  std::string eval_dir, eval_out;
  int eval_size = 32;
  ev->add_option("--dir", eval_dir, "directory with generated/, references/, prompts.jsonl")->required();
  ev->add_option("--out", eval_out, "report directory (defaults to --dir)");
  ev->add_option("--image_size", eval_size, "square image side in pixels");

  auto* insp = app.add_subcommand("inspect-attention", "Write per-layer token attention heatmaps and mass ratios");
  ConfigFlags insp_flags;
  std::string insp_ckpt, insp_prompt;
  int index = 0, count = 1, t = 50, upscale = 4;
  insp_flags.attach(insp, {"seed", "manifest", "out"});
  insp->add_option("--checkpoint", insp_ckpt, "trained checkpoint")->required();
  insp->add_option("--index", index, "first manifest row");
  insp->add_option("--count", count, "rows to average ratios over");
  insp->add_option("--t", t, "timestep of the noised input");
  insp->add_option("--prompt", insp_prompt, "prompt instead of the sample caption");
  insp->add_option("--upscale", upscale, "heatmap magnification");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*build) return cmd_build_data(n, seed, out, image_size);
    if (*trn) return cmd_train(train_flags.resolve(), resume);
    if (*gen) return cmd_generate(gen_flags.resolve(), checkpoint, prompt, face, regions, name);
    if (*ev) return cmd_evaluate(eval_dir, eval_out, eval_size);
    if (*insp) return cmd_inspect(insp_flags.resolve(), insp_ckpt, index, count, t, insp_prompt, upscale);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
