#include "pdiff/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "pdiff/image_io.hpp"
#include "pdiff/rng.hpp"

namespace pdiff {

using json = nlohmann::json;

MatchResult greedy_match(const std::vector<std::vector<double>>& similarity) {
  MatchResult r;
  const std::size_t rows = similarity.size();
  if (rows == 0 || similarity[0].empty()) throw ValidationError("greedy_match: empty similarity matrix");
  const std::size_t cols = similarity[0].size();
  for (const auto& row : similarity) {
    if (row.size() != cols) throw ValidationError("greedy_match: ragged similarity matrix");
  }
  std::vector<bool> row_used(rows, false), col_used(cols, false);
  const std::size_t n = std::min(rows, cols);
  for (std::size_t k = 0; k < n; ++k) {
    int bi = -1, bj = -1;
    double best = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      if (row_used[i]) continue;
      for (std::size_t j = 0; j < cols; ++j) {
        if (col_used[j]) continue;
        if (bi < 0 || similarity[i][j] > best) {
          best = similarity[i][j];
          bi = static_cast<int>(i);
          bj = static_cast<int>(j);
        }
      }
    }
    row_used[static_cast<std::size_t>(bi)] = true;
    col_used[static_cast<std::size_t>(bj)] = true;
    r.pairs.emplace_back(bi, bj);
    r.scores.push_back(best);
  }
  double s = 0.0;
  for (double v : r.scores) s += v;
  r.mean = s / static_cast<double>(r.scores.size());
  return r;
}

double identity_preservation(const std::vector<Tensor>& generated, const std::vector<Tensor>& references,
                             const FaceEmbedderInterface& embedder) {
  if (generated.empty() || references.empty()) throw ValidationError("identity_preservation: empty face list");
  std::vector<Tensor> g, ref;
  for (const auto& c : generated) g.push_back(embedder.embed_face(c));
  for (const auto& c : references) ref.push_back(embedder.embed_face(c));
  std::vector<std::vector<double>> sim(g.size(), std::vector<double>(ref.size()));
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < ref.size(); ++j) sim[i][j] = cosine_similarity(g[i], ref[j]);
  }
  return greedy_match(sim).mean;
}

// ---------------------------------------------------------------------------
// toy joint embedder

namespace {

double luminance(const Tensor& img, int y, int x) { return (img.at(0, y, x) + img.at(1, y, x) + img.at(2, y, x)) / 3.0; }

struct Moments {
  double mass = 0.0, area = 0.0, my = 0.0, mx2 = 0.0, mabsx = 0.0, cov_y_x2 = 0.0, cov_y_absx = 0.0;
};

Moments zone_moments(const Tensor& crop, const double (&zone)[2], double half_width) {
  const int h = crop.dim(1), w = crop.dim(2);
  const double span = 2.0 * layout::kBoxHalf;
  struct P {
    double d, x, y;
  };
  std::vector<P> pts;
  Moments m;
  for (int y = 0; y < h; ++y) {
    const double cy = ((y + 0.5) / h - 0.5) * span;
    if (cy < zone[0] || cy > zone[1]) continue;
    for (int x = 0; x < w; ++x) {
      const double cx = ((x + 0.5) / w - 0.5) * span;
      if (std::abs(cx) > half_width) continue;
      const double d = 1.0 / (1.0 + std::exp(-40.0 * (0.3 - luminance(crop, y, x))));
      pts.push_back({d, cx, cy});
      m.area += 1.0;
      m.mass += d;
    }
  }
  if (m.area == 0.0) throw ValidationError("image too small for expression statistics");
  const double mass = std::max(m.mass, 1e-9);
  for (const auto& p : pts) {
    m.my += p.d * p.y / mass;
    m.mx2 += p.d * p.x * p.x / mass;
    m.mabsx += p.d * std::abs(p.x) / mass;
  }
  for (const auto& p : pts) {
    m.cov_y_x2 += p.d * (p.y - m.my) * (p.x * p.x - m.mx2) / mass;
    m.cov_y_absx += p.d * (p.y - m.my) * (std::abs(p.x) - m.mabsx) / mass;
  }
  return m;
}

Tensor joint_features(const Tensor& stats, const Tensor& mean, const Tensor& inv_std) {
  double z[5];
  for (int k = 0; k < 5; ++k) z[k] = (stats[k] - mean[k]) * inv_std[k];
  return Tensor({ToyJointEmbedder::kWidth}, {z[0], z[1], z[2], z[3], z[4], z[0] * z[2], z[0] * z[1], z[1] * z[4]});
}

}  // namespace

ToyJointEmbedder::ToyJointEmbedder(int image_size, std::vector<std::string> emotions)
    : image_size_(image_size), emotions_(std::move(emotions)) {
  if (emotions_.empty()) throw ValidationError("joint embedder needs at least one emotion word");
  ToyfaceConfig cfg;
  cfg.image_size = image_size;
  cfg.emotions = emotions_;
  constexpr int kPerEmotion = 16;
  Rng rng(0x10147);
  std::vector<std::vector<Tensor>> stats(emotions_.size());
  std::vector<Tensor> all;
  for (std::size_t e = 0; e < emotions_.size(); ++e) {
    for (int i = 0; i < kPerEmotion; ++i) {
      FaceSpec spec;
      spec.identity = {rng.uniform(), rng.uniform(), rng.uniform()};
      spec.expression = emotions_[e];
      spec.background_id = rng.uniform_int(0, cfg.background_count - 1);
      const Render r = render_face(spec, rng.uniform_int(0, 1 << 30), cfg);
      stats[e].push_back(expression_statistics(r.image));
      all.push_back(stats[e].back());
    }
  }
  mean_ = Tensor({5});
  inv_std_ = Tensor({5});
  for (int k = 0; k < 5; ++k) {
    double m = 0.0;
    for (const auto& s : all) m += s[k];
    m /= static_cast<double>(all.size());
    double v = 0.0;
    for (const auto& s : all) v += (s[k] - m) * (s[k] - m);
    v /= static_cast<double>(all.size());
    mean_[k] = m;
    inv_std_[k] = 1.0 / std::sqrt(v + 1e-12);
  }
  for (const auto& group : stats) {
    Tensor proto({kWidth});
    for (const auto& s : group) {
      const Tensor f = joint_features(s, mean_, inv_std_);
      for (int k = 0; k < kWidth; ++k) proto[k] += f[k] / kPerEmotion;
    }
    prototypes_.push_back(proto);
  }
}

Tensor ToyJointEmbedder::expression_statistics(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) throw ValidationError("expression statistics need a [3,H,W] image");
  const Tensor crop = crop_image(image, face_bbox(image.dim(1)));
  const Moments mouth = zone_moments(crop, layout::kMouthZone, 5.5);
  const Moments brow = zone_moments(crop, layout::kBrowZone, 5.5);
  return Tensor({5}, {-mouth.cov_y_x2, brow.cov_y_absx, mouth.mass / mouth.area, mouth.mx2, -brow.my});
}

bool ToyJointEmbedder::knows_emotion(const std::string& word) const {
  return std::find(emotions_.begin(), emotions_.end(), word) != emotions_.end();
}

Tensor ToyJointEmbedder::embed_text(const std::string& prompt) const {
  TokenSequence seq;
  seq.words = tokenize_words(prompt);
  const auto idx = locate_emotion_token(seq, emotions_);
  const std::string word = idx ? seq.words[static_cast<std::size_t>(*idx)] : "neutral";
  const auto it = std::find(emotions_.begin(), emotions_.end(), word);
  if (it == emotions_.end()) throw ValidationError("no prototype for emotion '" + word + "'");
  return prototypes_[static_cast<std::size_t>(it - emotions_.begin())];
}

Tensor ToyJointEmbedder::embed_image(const Tensor& image) const {
  return joint_features(expression_statistics(image), mean_, inv_std_);
}

double text_image_consistency(const std::string& prompt, const Tensor& image, const JointEmbedderInterface& embedder) {
  return cosine_similarity(embedder.embed_text(prompt), embedder.embed_image(image));
}

double expression_coefficient(const std::string& emotion_word, const Tensor& image,
                              const JointEmbedderInterface& embedder) {
  if (!embedder.knows_emotion(emotion_word)) throw ValidationError("unknown emotion word '" + emotion_word + "'");
  return text_image_consistency(emotion_word, image, embedder);
}

// ---------------------------------------------------------------------------
// directory evaluation

json EvalReport::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"image", r.image},
                         {"prompt", r.prompt},
                         {"emotion", r.emotion},
                         {"id_pres", r.id_pres},
                         {"clip_ti", r.clip_ti},
                         {"expression", r.expression}});
  }
  return {{"id_pres", id_pres}, {"clip_ti", clip_ti}, {"expression_coeff", expression_coeff}, {"rows", rows_json},
          {"config", config}};
}

std::string EvalReport::to_csv() const {
  auto quote = [](const std::string& s) {
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + "\"";
  };
  std::ostringstream out;
  out << std::setprecision(10);
  out << "image,prompt,emotion,id_pres,clip_ti,expression\n";
  for (const auto& r : rows) {
    out << quote(r.image) << ',' << quote(r.prompt) << ',' << r.emotion << ',' << r.id_pres << ',' << r.clip_ti << ','
        << r.expression << '\n';
  }
  return out.str();
}

EvalReport evaluate_directory(const std::filesystem::path& dir, const FaceEmbedderInterface& faces,
                              const JointEmbedderInterface& joint, int image_size) {
  const auto prompts_path = dir / "prompts.jsonl";
  std::ifstream in(prompts_path);
  if (!in) throw IoError("cannot read " + prompts_path.string());
  EvalReport report;
  std::string line;
  int expression_rows = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError("malformed prompts.jsonl line: " + std::string(e.what()));
    }
    EvalRow row;
    row.image = rec.at("image").get<std::string>();
    row.prompt = rec.at("prompt").get<std::string>();
    const Tensor image = read_png_rgb(dir / "generated" / row.image);
    if (image.dim(1) != image_size || image.dim(2) != image_size) {
      throw ValidationError(row.image + " is not " + std::to_string(image_size) + "x" + std::to_string(image_size));
    }

    std::vector<std::string> ref_names;
    if (rec.contains("references")) {
      ref_names = rec["references"].get<std::vector<std::string>>();
    } else {
      ref_names.push_back(rec.at("reference").get<std::string>());
    }
    std::vector<BBox> boxes;
    if (rec.contains("boxes")) {
      for (const auto& b : rec["boxes"]) {
        const auto v = b.get<std::vector<int>>();
        if (v.size() != 4) throw ValidationError("boxes entries must be [x0,y0,x1,y1]");
        boxes.push_back({v[0], v[1], v[2], v[3]});
      }
    } else {
      boxes.push_back(face_bbox(image_size));
    }
    std::vector<Tensor> gen_faces, ref_faces;
    for (const auto& b : boxes) gen_faces.push_back(crop_image(image, b));
    for (const auto& r : ref_names) ref_faces.push_back(read_png_rgb(dir / "references" / r));
    row.id_pres = identity_preservation(gen_faces, ref_faces, faces);
    row.clip_ti = text_image_consistency(row.prompt, image, joint);

    TokenSequence seq;
    seq.words = tokenize_words(row.prompt);
    std::vector<std::string> emotions = default_emotion_words();
    if (const auto idx = locate_emotion_token(seq, emotions)) {
      row.emotion = seq.words[static_cast<std::size_t>(*idx)];
      row.expression = expression_coefficient(row.emotion, image, joint);
      ++expression_rows;
      report.expression_coeff += row.expression;
    }
    report.id_pres += row.id_pres;
    report.clip_ti += row.clip_ti;
    report.rows.push_back(row);
  }
  if (report.rows.empty()) throw ValidationError("prompts.jsonl lists no images");
  report.id_pres /= static_cast<double>(report.rows.size());
  report.clip_ti /= static_cast<double>(report.rows.size());
  if (expression_rows > 0) report.expression_coeff /= expression_rows;
  report.config = {{"directory", dir.string()}, {"image_size", image_size}, {"face_embedder", "analytic"},
                   {"joint_embedder", "toy"}};
  return report;
}

}  // namespace pdiff
