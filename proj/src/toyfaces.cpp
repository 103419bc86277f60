#include "pdiff/toyfaces.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "pdiff/image_io.hpp"
#include "pdiff/rng.hpp"

namespace pdiff {

using json = nlohmann::json;

std::vector<std::string> default_emotion_words() {
  return {"happy", "angry", "sad", "surprised", "fearful", "disgusted",
          "neutral", "calm", "excited", "bored", "confused"};
}

std::vector<std::string> default_identity_words() { return {"man", "woman"}; }

ExpressionParams expression_params(const std::string& emotion) {
  struct Row {
    const char* word;
    ExpressionParams p;
  };
  static const Row kTable[] = {
      {"happy", {1.0, 0.0, 0.15, 0.85, 0.0}},
      {"angry", {-0.5, -1.0, 0.1, 0.5, -0.8}},
      {"sad", {-1.0, 1.0, 0.0, 0.35, 0.0}},
      {"surprised", {0.0, 0.0, 1.0, 0.15, 1.0}},
      {"fearful", {-0.6, 0.9, 0.6, 0.7, 0.6}},
      {"disgusted", {-0.9, -0.6, 0.45, 1.0, -0.3}},
      {"neutral", {0.0, 0.0, 0.0, 0.5, 0.0}},
      {"calm", {0.45, 0.0, 0.0, 0.2, -0.6}},
      {"excited", {1.0, 0.6, 0.9, 1.0, 0.9}},
      {"bored", {-0.25, -0.3, 0.0, 0.1, -1.0}},
      {"confused", {0.3, 0.8, 0.3, 0.3, -0.9}},
  };
  for (const auto& r : kTable) {
    if (emotion == r.word) return r.p;
  }
  // Words outside the built-in table get stable pseudo-random controls.
  Rng rng(fnv1a64(emotion));
  return {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(), rng.uniform(), rng.uniform(-1, 1)};
}

void validate_spec(const FaceSpec& spec, const ToyfaceConfig& config) {
  for (double v : spec.identity) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("identity parameters must lie in [0,1]");
  }
  if (std::find(config.emotions.begin(), config.emotions.end(), spec.expression) == config.emotions.end()) {
    throw ValidationError("expression '" + spec.expression + "' is not in the emotion vocabulary");
  }
  if (std::find(config.identity_words.begin(), config.identity_words.end(), spec.gender) ==
      config.identity_words.end()) {
    throw ValidationError("gender token '" + spec.gender + "' is not an identity word");
  }
  if (spec.background_id < 0 || spec.background_id >= config.background_count) {
    throw ValidationError("background_id out of range");
  }
  if (config.image_size < 8 || config.image_size % 8 != 0) {
    throw ValidationError("image size must be a positive multiple of 8");
  }
}

BBox face_bbox(int image_size) {
  const double s = image_size / layout::kReferenceSize;
  const int half = static_cast<int>(std::lround(layout::kBoxHalf * s));
  const int c = image_size / 2;
  return {c - half, c - half, c + half, c + half};
}

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(std::floor(hh)) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double t = std::clamp(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

struct Geometry {
  double semi_x, semi_y;
  double eye_x, eye_r;
  double brow_y, brow_tilt;
  double mouth_half_width, mouth_half_thick, curvature;
};

Geometry make_geometry(const FaceSpec& spec) {
  const ExpressionParams e = expression_params(spec.expression);
  Geometry g{};
  g.semi_y = layout::kFaceSemiMinorMax;
  g.semi_x = layout::kFaceSemiMinorMax * (1.0 - layout::kEccentricityShrink * spec.identity[1]);
  g.eye_x = 2.5 + 2.0 * spec.identity[2];
  g.eye_r = 1.3;
  g.brow_y = -5.8 - 0.6 * e.brow_height;
  g.brow_tilt = e.brow_angle;
  g.mouth_half_width = 3.0 + 1.2 * e.width;
  g.mouth_half_thick = 0.45 + 1.1 * e.openness;
  g.curvature = e.curvature;
  return g;
}

// 0 = background, 1 = skin, 2 = dark feature mark.
int classify(const Geometry& g, double x, double y) {
  const double ex = x / g.semi_x, ey = y / g.semi_y;
  if (ex * ex + ey * ey > 1.0) return 0;
  for (double side : {-1.0, 1.0}) {
    const double dx = x - side * g.eye_x, dy = y - layout::kEyeY;
    if (dx * dx + dy * dy <= g.eye_r * g.eye_r) return 2;
    // brow from inner (x=1.5) to outer (x=5.5) end; positive tilt lifts the inner end
    if (segment_distance(x, y, side * 1.5, g.brow_y - g.brow_tilt, side * 5.5, g.brow_y + g.brow_tilt) <= 0.5) {
      return 2;
    }
  }
  if (std::abs(x) <= g.mouth_half_width) {
    const double u = x / g.mouth_half_width;
    const double centre = 5.8 + 0.8 * g.curvature - 1.6 * g.curvature * u * u;
    if (std::abs(y - centre) <= g.mouth_half_thick) return 2;
  }
  return 1;
}

}  // namespace

Render render_face(const FaceSpec& spec, std::uint64_t seed, const ToyfaceConfig& config) {
  validate_spec(spec, config);
  const int n = config.image_size;
  const double scale = n / layout::kReferenceSize;
  const Geometry g = make_geometry(spec);
  const auto skin = hsv_to_rgb(spec.identity[0], 0.55, 0.85);
  const std::array<double, 3> mark{0.08, 0.07, 0.1};
  const double bg_level = 0.14 + 0.1 * spec.background_id;

  Rng rng(mix_seed(seed, "render"));
  Render out{Tensor({3, n, n}), Tensor({n, n}), face_bbox(n)};
  constexpr int kSuper = 4;
  const double half = n / 2.0;
  for (int py = 0; py < n; ++py) {
    for (int px = 0; px < n; ++px) {
      // Gray noise keeps the background free of chroma.
      const double bg = bg_level + rng.uniform(-0.02, 0.02);
      std::array<double, 3> acc{0, 0, 0};
      int face_hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double x = (px + (sx + 0.5) / kSuper - half) / scale;
          const double y = (py + (sy + 0.5) / kSuper - half) / scale;
          const int cls = classify(g, x, y);
          if (cls == 0) {
            for (double& a : acc) a += bg;
          } else {
            ++face_hits;
            const auto& col = cls == 1 ? skin : mark;
            for (int c = 0; c < 3; ++c) acc[c] += col[c];
          }
        }
      }
      constexpr double inv = 1.0 / (kSuper * kSuper);
      for (int c = 0; c < 3; ++c) out.image.at(c, py, px) = acc[c] * inv;
      out.mask[static_cast<std::size_t>(py) * n + px] = face_hits * inv;
    }
  }
  out.image = quantize8(std::move(out.image));
  out.mask = quantize8(std::move(out.mask));
  return out;
}

Tensor crop_image(const Tensor& image, const BBox& box) {
  if (image.rank() != 3) throw ValidationError("crop_image expects [C,H,W]");
  const int c = image.dim(0);
  if (box.x0 < 0 || box.y0 < 0 || box.x1 > image.dim(2) || box.y1 > image.dim(1) || box.width() <= 0 ||
      box.height() <= 0) {
    throw ValidationError("crop box outside the image");
  }
  Tensor out({c, box.height(), box.width()});
  for (int k = 0; k < c; ++k) {
    for (int y = 0; y < box.height(); ++y) {
      for (int x = 0; x < box.width(); ++x) out.at(k, y, x) = image.at(k, y + box.y0, x + box.x0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// captions

namespace {
struct CaptionTemplate {
  const char* text;  // {e} = emotion word, {g} = identity word
  bool has_emotion;
};
constexpr CaptionTemplate kTemplates[] = {
    {"{a} {e} {g} in front of a plain background", true},
    {"a photo of {a} {e} {g}", true},
    {"a portrait of a {g} looking {e}", true},
    {"a {g} in front of a plain background", false},
    {"a photo of a {g}", false},
};

std::string substitute(std::string text, const std::string& key, const std::string& value) {
  const auto pos = text.find(key);
  if (pos != std::string::npos) text.replace(pos, key.size(), value);
  return text;
}
}  // namespace

int caption_template_count() { return static_cast<int>(std::size(kTemplates)); }

bool caption_template_has_emotion(int template_id) {
  if (template_id < 0 || template_id >= caption_template_count()) {
    throw ValidationError("caption template id out of range");
  }
  return kTemplates[template_id].has_emotion;
}

std::string make_caption(const FaceSpec& spec, int template_id) {
  if (template_id < 0 || template_id >= caption_template_count()) {
    throw ValidationError("caption template id out of range");
  }
  std::string s = substitute(kTemplates[template_id].text, "{g}", spec.gender);
  const bool vowel = !spec.expression.empty() && std::string("aeiou").find(spec.expression[0]) != std::string::npos;
  s = substitute(std::move(s), "{a}", vowel ? "an" : "a");
  return substitute(std::move(s), "{e}", spec.expression);
}

// ---------------------------------------------------------------------------
// dataset

namespace {

struct SamplePlan {
  FaceSpec spec;
  std::uint64_t seed;
  FaceSpec reference;
  std::uint64_t reference_seed;
  int template_id;
  int identity_id;
};

std::vector<SamplePlan> plan_samples(int n, std::uint64_t seed, const ToyfaceConfig& config) {
  if (n <= 0) throw ValidationError("dataset size must be positive");
  Rng rng = Rng::substream(seed, "data");
  const int identities = std::max(1, n / 4);
  std::vector<FaceSpec> people(static_cast<std::size_t>(identities));
  for (auto& p : people) {
    p.identity = {rng.uniform(), rng.uniform(), rng.uniform()};
    p.gender = config.identity_words[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(config.identity_words.size()) - 1))];
  }
  const int n_emotions = static_cast<int>(config.emotions.size());
  std::vector<SamplePlan> plans;
  plans.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    SamplePlan plan{};
    plan.identity_id = i % identities;
    plan.spec = people[static_cast<std::size_t>(plan.identity_id)];
    plan.spec.expression = config.emotions[static_cast<std::size_t>(rng.uniform_int(0, n_emotions - 1))];
    plan.spec.background_id = rng.uniform_int(0, config.background_count - 1);
    plan.template_id = rng.uniform() < 0.8 ? rng.uniform_int(0, 2) : rng.uniform_int(3, 4);
    plan.seed = mix_seed(seed, "sample" + std::to_string(i));
    plan.reference = plan.spec;
    plan.reference.expression = config.emotions[static_cast<std::size_t>(rng.uniform_int(0, n_emotions - 1))];
    plan.reference.background_id = rng.uniform_int(0, config.background_count - 1);
    plan.reference_seed = mix_seed(seed, "reference" + std::to_string(i));
    plans.push_back(plan);
  }
  return plans;
}

TrainingSample realize(const SamplePlan& plan, const ToyfaceConfig& config) {
  Render r = render_face(plan.spec, plan.seed, config);
  Render ref = render_face(plan.reference, plan.reference_seed, config);
  TrainingSample s;
  s.image = std::move(r.image);
  s.face_mask = std::move(r.mask);
  s.face_bbox = r.bbox;
  s.reference_face = crop_image(ref.image, ref.bbox);
  s.caption = make_caption(plan.spec, plan.template_id);
  s.gender = plan.spec.gender;
  s.emotion = plan.spec.expression;
  s.identity_id = plan.identity_id;
  return s;
}

std::string indexed_name(int i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i << ".png";
  return os.str();
}

}  // namespace

std::vector<TrainingSample> generate_samples(int n, std::uint64_t seed, const ToyfaceConfig& config) {
  std::vector<TrainingSample> out;
  for (const auto& plan : plan_samples(n, seed, config)) out.push_back(realize(plan, config));
  return out;
}

Manifest build_dataset(int n, std::uint64_t seed, const std::filesystem::path& dir, const ToyfaceConfig& config) {
  namespace fs = std::filesystem;
  const auto plans = plan_samples(n, seed, config);
  std::error_code ec;
  for (const char* sub : {"images", "masks", "refs"}) {
    fs::create_directories(dir / sub, ec);
    if (ec) throw IoError("cannot create " + (dir / sub).string() + ": " + ec.message());
  }
  Manifest manifest{dir / "manifest.jsonl", {}};
  std::ofstream out(manifest.path, std::ios::binary);
  if (!out) throw IoError("cannot write " + manifest.path.string());
  for (int i = 0; i < n; ++i) {
    const TrainingSample s = realize(plans[static_cast<std::size_t>(i)], config);
    ManifestRecord rec;
    rec.image = "images/" + indexed_name(i);
    rec.mask = "masks/" + indexed_name(i);
    rec.ref_face = "refs/" + indexed_name(i);
    rec.caption = s.caption;
    rec.bbox = s.face_bbox;
    rec.gender = s.gender;
    rec.emotion = s.emotion;
    rec.identity_id = s.identity_id;
    write_png_rgb(dir / rec.image, s.image);
    write_png_gray(dir / rec.mask, s.face_mask);
    write_png_rgb(dir / rec.ref_face, s.reference_face);
    json j = {{"image", rec.image},     {"mask", rec.mask},
              {"ref_face", rec.ref_face}, {"caption", rec.caption},
              {"bbox", {rec.bbox.x0, rec.bbox.y0, rec.bbox.x1, rec.bbox.y1}},
              {"gender", rec.gender},   {"emotion", rec.emotion},
              {"identity_id", rec.identity_id}};
    out << j.dump() << '\n';
    manifest.records.push_back(std::move(rec));
  }
  out.flush();
  if (!out) throw IoError("failed writing " + manifest.path.string());
  return manifest;
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  Manifest m{path, {}};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      ManifestRecord r;
      r.image = j.at("image").get<std::string>();
      r.mask = j.at("mask").get<std::string>();
      r.ref_face = j.at("ref_face").get<std::string>();
      r.caption = j.at("caption").get<std::string>();
      const auto& b = j.at("bbox");
      r.bbox = {b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
      r.gender = j.at("gender").get<std::string>();
      r.emotion = j.at("emotion").get<std::string>();
      r.identity_id = j.at("identity_id").get<int>();
      m.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

TrainingSample load_sample(const ManifestRecord& record, const std::filesystem::path& base_dir) {
  TrainingSample s;
  s.image = read_png_rgb(base_dir / record.image);
  s.face_mask = read_png_gray(base_dir / record.mask);
  s.reference_face = read_png_rgb(base_dir / record.ref_face);
  s.caption = record.caption;
  s.face_bbox = record.bbox;
  s.gender = record.gender;
  s.emotion = record.emotion;
  s.identity_id = record.identity_id;
  return s;
}

std::vector<TrainingSample> load_dataset(const std::filesystem::path& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  std::vector<TrainingSample> out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) out.push_back(load_sample(r, manifest_path.parent_path()));
  return out;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a64(ss.str());
}

}  // namespace pdiff
