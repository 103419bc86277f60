#include "pdiff/conditioning.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "pdiff/rng.hpp"

namespace pdiff {

// ---------------------------------------------------------------------------
// vocabulary

namespace {
const char* const kBuiltinWords[] = {
    "a", "an", "the", "of", "in", "on", "at", "with", "and", "front", "photo", "portrait", "picture",
    "looking", "plain", "background", "person", "people", "boy", "girl", "face", "smiling", "reading",
    "wearing", "hat", "glasses", "sitting", "standing", "street", "park", "beach", "city", "forest",
    "painting", "style", "red", "blue", "green", "dark", "light", "is", "very"};
}

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<unk>");
  for (const auto& w : default_identity_words()) add(w);
  for (const auto& w : default_emotion_words()) add(w);
  for (const char* w : kBuiltinWords) add(w);
}

void Vocabulary::add(const std::string& word) {
  if (ids_.count(word)) return;
  ids_[word] = static_cast<int>(words_.size());
  words_.push_back(word);
}

Vocabulary Vocabulary::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read vocabulary " + path.string());
  std::vector<std::pair<int, std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::string w;
    int id = -1;
    if (!(is >> w >> id)) throw ValidationError("malformed vocabulary line: " + line);
    rows.emplace_back(id, w);
  }
  std::sort(rows.begin(), rows.end());
  Vocabulary v;
  v.words_.clear();
  v.ids_.clear();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].first != static_cast<int>(i)) throw ValidationError("vocabulary ids must be dense from 0");
    v.add(rows[i].second);
  }
  if (v.size() < 2 || v.words_[kPad] != "<pad>" || v.words_[kUnknown] != "<unk>") {
    throw ValidationError("vocabulary must start with <pad> 0 and <unk> 1");
  }
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary " + path.string());
  for (std::size_t i = 0; i < words_.size(); ++i) out << words_[i] << ' ' << i << '\n';
}

int Vocabulary::id(const std::string& word) const {
  const auto it = ids_.find(word);
  return it == ids_.end() ? kUnknown : it->second;
}

std::uint64_t Vocabulary::hash() const {
  std::string joined;
  for (const auto& w : words_) {
    joined += w;
    joined += '\n';
  }
  return fnv1a64(joined);
}

std::vector<std::string> tokenize_words(const std::string& prompt) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : prompt) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '\'') {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

namespace {
std::optional<int> first_match(const TokenSequence& seq, const std::vector<std::string>& set) {
  for (std::size_t i = 0; i < seq.words.size(); ++i) {
    if (std::find(set.begin(), set.end(), seq.words[i]) != set.end()) return static_cast<int>(i);
  }
  return std::nullopt;
}
}  // namespace

std::optional<int> locate_identity_token(const TokenSequence& seq, const std::vector<std::string>& identity_words) {
  return first_match(seq, identity_words);
}

std::optional<int> locate_emotion_token(const TokenSequence& seq, const std::vector<std::string>& emotion_words) {
  return first_match(seq, emotion_words);
}

// ---------------------------------------------------------------------------
// text encoder

TextEncoder::TextEncoder(TextEncoderConfig config, Vocabulary vocab)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
  if (config_.width < 2 || config_.max_tokens < 1) throw ValidationError("invalid text encoder dimensions");
  Rng rng(config_.seed);
  table_ = Tensor({vocab_.size(), config_.width});
  for (double& v : table_.values()) v = 0.5 * rng.normal();
}

TextEncoder::Encoded TextEncoder::encode(const std::string& prompt) const {
  Encoded e;
  e.tokens.words = tokenize_words(prompt);
  const int n_words = static_cast<int>(e.tokens.words.size());
  if (n_words == 0) throw ValidationError("empty prompt");
  if (n_words > config_.max_tokens) {
    throw ValidationError("prompt has " + std::to_string(n_words) + " words; limit is " +
                          std::to_string(config_.max_tokens));
  }
  e.tokens.tokens.assign(static_cast<std::size_t>(config_.max_tokens), Vocabulary::kPad);
  for (int i = 0; i < n_words; ++i) e.tokens.tokens[static_cast<std::size_t>(i)] = vocab_.id(e.tokens.words[static_cast<std::size_t>(i)]);
  e.tokens.identity_index = locate_identity_token(e.tokens, config_.identity_words);
  e.tokens.emotion_index = locate_emotion_token(e.tokens, config_.emotion_words);

  const int d = config_.width;
  e.embeddings = Tensor({config_.max_tokens, d});
  for (int i = 0; i < config_.max_tokens; ++i) {
    const int id = e.tokens.tokens[static_cast<std::size_t>(i)];
    for (int j = 0; j < d; ++j) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / d);
      const double pos = (j % 2 == 0) ? std::sin(i * freq) : std::cos(i * freq);
      e.embeddings[static_cast<std::size_t>(i) * d + j] = table_[static_cast<std::size_t>(id) * d + j] + 0.1 * pos;
    }
  }
  return e;
}

// ---------------------------------------------------------------------------
// face embedder

namespace {

struct CropWindows {
  Tensor identity;  // rows free of expression marks
  Tensor eyes;      // eye band
  Tensor x2, y2;    // squared canonical coordinates / 100
  double identity_area = 0.0, eye_area = 0.0;
};

bool in_zone(double y, const double (&zone)[2]) { return y >= zone[0] && y <= zone[1]; }

CropWindows make_windows(int h, int w) {
  CropWindows cw{Tensor({h, w}), Tensor({h, w}), Tensor({h, w}), Tensor({h, w})};
  const double span = 2.0 * layout::kBoxHalf;
  for (int y = 0; y < h; ++y) {
    const double cy = ((y + 0.5) / h - 0.5) * span;
    const bool keep = !in_zone(cy, layout::kBrowZone) && !in_zone(cy, layout::kMouthZone);
    const bool eye_row = cy >= layout::kEyeY - 1.5 && cy <= layout::kEyeY + 1.5;
    for (int x = 0; x < w; ++x) {
      const double cx = ((x + 0.5) / w - 0.5) * span;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      cw.identity[i] = keep ? 1.0 : 0.0;
      cw.eyes[i] = (eye_row && std::abs(cx) <= 6.5) ? 1.0 : 0.0;
      cw.x2[i] = cx * cx / 100.0;
      cw.y2[i] = cy * cy / 100.0;
      cw.identity_area += cw.identity[i];
      cw.eye_area += cw.eyes[i];
    }
  }
  return cw;
}

}  // namespace

Var FaceEmbedder::raw_features(Var crop) const {
  const Tensor& v = crop.value();
  if (v.rank() != 3 || v.dim(0) != 3) throw ValidationError("face crop must be [3,h,w]");
  const int h = v.dim(1), w = v.dim(2);
  if (h < kMinCrop || w < kMinCrop || h > kMaxCrop || w > kMaxCrop) {
    throw ValidationError("face crop size " + shape_string(v.shape()) + " outside supported bounds");
  }
  if (std::all_of(v.values().begin(), v.values().end(), [](double x) { return x == 0.0; })) {
    throw ValidationError("degenerate face crop (all zero)");
  }
  const CropWindows cw = make_windows(h, w);

  // Skin weight from chroma energy: grey background and dark marks carry none.
  const Var chroma = sub(crop, broadcast_channels(channel_mean(crop), 3));
  const Var energy = sum_channels(square(chroma));
  const Var skin = sigmoid(scale(add_scalar(energy, -0.03), 200.0));

  const Var ws = mul_const(skin, cw.identity);
  // Small floors keep the ratios finite for crops with no skin or no eye marks.
  const Var mass = add_scalar(sum(ws), 1e-6);
  const Var occupancy = scale(mass, 1.0 / cw.identity_area);
  const Var colour = div_by(spatial_sum(mul(broadcast_channels(ws, 3), chroma)), mass);
  const Var spread_x = div(sum(mul_const(ws, cw.x2)), mass);
  const Var spread_y = div(sum(mul_const(ws, cw.y2)), mass);

  const Var holes = mul_const(add_scalar(scale(skin, -1.0), 1.0), cw.eyes);
  const Var hole_mass = add_scalar(sum(holes), 1e-6);
  const Var eye_mass = scale(hole_mass, 1.0 / cw.eye_area);
  const Var eye_spread = div(sum(mul_const(holes, cw.x2)), hole_mass);

  return concat(concat(stack_scalars({occupancy}), colour), stack_scalars({spread_x, spread_y, eye_mass, eye_spread}));
}

FaceEmbedder::FaceEmbedder(int calibration_image_size) {
  ToyfaceConfig cfg;
  cfg.image_size = calibration_image_size;
  Rng rng(0x5eedface);
  constexpr int kCalibration = 96;
  std::vector<Tensor> feats;
  for (int i = 0; i < kCalibration; ++i) {
    FaceSpec spec;
    spec.identity = {rng.uniform(), rng.uniform(), rng.uniform()};
    spec.expression = cfg.emotions[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cfg.emotions.size()) - 1))];
    spec.background_id = rng.uniform_int(0, cfg.background_count - 1);
    const Render r = render_face(spec, static_cast<std::uint64_t>(i), cfg);
    Tape tape;
    feats.push_back(raw_features(tape.constant(crop_image(r.image, r.bbox))).value());
  }
  mean_ = Tensor({kWidth});
  inv_std_ = Tensor({kWidth});
  for (int k = 0; k < kWidth; ++k) {
    double m = 0.0;
    for (const auto& f : feats) m += f[k];
    m /= kCalibration;
    double var = 0.0;
    for (const auto& f : feats) var += (f[k] - m) * (f[k] - m);
    var /= kCalibration;
    mean_[k] = -m;
    inv_std_[k] = 1.0 / std::sqrt(var + 1e-12);
  }
}

Var FaceEmbedder::embed(Var crop) const { return mul_const(add_const(raw_features(crop), mean_), inv_std_); }

FaceEmbedding FaceEmbedder::embed(const Tensor& crop) const {
  Tape tape;
  return {embed(tape.constant(crop)).value(), EmbeddingSource::analytic};
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "cosine_similarity");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (std::sqrt(aa) < 1e-12 || std::sqrt(bb) < 1e-12) throw ValidationError("cosine similarity of a zero vector");
  return ab / std::sqrt(aa * bb);
}

Var cosine_similarity(Var a, Var b) {
  const Var aa = dot(a, a);
  const Var bb = dot(b, b);
  if (std::sqrt(aa.value()[0]) < 1e-12 || std::sqrt(bb.value()[0]) < 1e-12) {
    throw ValidationError("cosine similarity of a zero vector");
  }
  return div(dot(a, b), sqrt(mul(aa, bb)));
}

// ---------------------------------------------------------------------------
// augmentation head

AugmentationHead::AugmentationHead(ParameterSet& params, int text_width, int face_width, int hidden,
                                   std::uint64_t seed)
    : text_width_(text_width), face_width_(face_width) {
  Rng rng(seed);
  const int in = text_width + face_width;
  auto init = [&](std::vector<int> shape, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = stddev * rng.normal();
    return t;
  };
  w1_ = params.add("head.w1", init({in, hidden}, 1.0 / std::sqrt(in)));
  b1_ = params.add("head.b1", Tensor({hidden}));
  w2_ = params.add("head.w2", init({hidden, text_width}, 1.0 / std::sqrt(hidden)));
  b2_ = params.add("head.b2", Tensor({text_width}));
}

Var AugmentationHead::forward(Tape& tape, const ParameterSet& params, Var text_row, Var face) const {
  if (text_row.value().size() != static_cast<std::size_t>(text_width_) ||
      face.value().size() != static_cast<std::size_t>(face_width_)) {
    throw ValidationError("augmentation head input widths do not match");
  }
  const int in = text_width_ + face_width_;
  const Var x = reshape(concat(text_row, face), {1, in});
  const Var hidden = silu(linear(x, tape.parameter(params, w1_), tape.parameter(params, b1_)));
  const Var out = linear(hidden, tape.parameter(params, w2_), tape.parameter(params, b2_));
  return reshape(out, {text_width_});
}

// ---------------------------------------------------------------------------
// conditioning assembly

const char* to_string(DropoutState s) {
  switch (s) {
    case DropoutState::full: return "full";
    case DropoutState::text_only: return "text_only";
    case DropoutState::unconditional: return "unconditional";
  }
  return "?";
}

ConditioningSequence augment(Tape& tape, const ParameterSet& params, const TokenSequence& tokens,
                             Var text_embeddings, std::optional<Var> face, const AugmentationHead& head) {
  ConditioningSequence c;
  c.text_embeddings = text_embeddings;
  c.embeddings = text_embeddings;
  c.identity_index = tokens.identity_index;
  c.emotion_index = tokens.emotion_index;
  if (!face) return c;
  if (!tokens.identity_index) throw ValidationError("face provided but the prompt has no identity token");
  const int row = *tokens.identity_index;
  const Var fused = head.forward(tape, params, select_row(text_embeddings, row), *face);
  c.embeddings = replace_row(text_embeddings, row, fused);
  return c;
}

DropoutState dropout_branch(double u, const DropoutFractions& fractions) {
  if (u < fractions.unconditional) return DropoutState::unconditional;
  if (u < fractions.unconditional + fractions.text_only) return DropoutState::text_only;
  return DropoutState::full;
}

ConditioningSequence apply_conditioning_dropout(const ConditioningSequence& cond, double u, Var null_embedding,
                                                const DropoutFractions& fractions) {
  ConditioningSequence out = cond;
  out.state = dropout_branch(u, fractions);
  switch (out.state) {
    case DropoutState::unconditional:
      out.embeddings = repeat_rows(null_embedding, cond.text_embeddings.value().dim(0));
      break;
    case DropoutState::text_only:
      out.embeddings = cond.text_embeddings;
      break;
    case DropoutState::full:
      break;
  }
  return out;
}

}  // namespace pdiff
