#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pdiff/conditioning.hpp"
#include "pdiff/tensor.hpp"
#include "pdiff/toyfaces.hpp"

namespace pdiff {

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (row, column)
  std::vector<double> scores;
  double mean = 0.0;
};

// Repeatedly takes the largest remaining entry and removes its row and
// column. Ties go to the lowest row, then the lowest column.
MatchResult greedy_match(const std::vector<std::vector<double>>& similarity);

// Anything mapping a face crop to a nonzero vector.
class FaceEmbedderInterface {
 public:
  virtual ~FaceEmbedderInterface() = default;
  virtual Tensor embed_face(const Tensor& crop) const = 0;
};

class AnalyticFaceEmbedder : public FaceEmbedderInterface {
 public:
  explicit AnalyticFaceEmbedder(const FaceEmbedder& inner) : inner_(inner) {}
  Tensor embed_face(const Tensor& crop) const override { return inner_.embed(crop).vector; }

 private:
  const FaceEmbedder& inner_;
};

double identity_preservation(const std::vector<Tensor>& generated, const std::vector<Tensor>& references,
                             const FaceEmbedderInterface& embedder);

class JointEmbedderInterface {
 public:
  virtual ~JointEmbedderInterface() = default;
  virtual Tensor embed_text(const std::string& prompt) const = 0;
  virtual Tensor embed_image(const Tensor& image) const = 0;
  virtual bool knows_emotion(const std::string& word) const = 0;
};

// Shared 8-dim space built from brow and mouth statistics of the face box.
// A prompt maps to the mean image embedding of its emotion word's renders
// (neutral when the prompt names no emotion).
class ToyJointEmbedder : public JointEmbedderInterface {
 public:
  static constexpr int kWidth = 8;

  explicit ToyJointEmbedder(int image_size = 32, std::vector<std::string> emotions = default_emotion_words());

  Tensor embed_text(const std::string& prompt) const override;
  Tensor embed_image(const Tensor& image) const override;
  bool knows_emotion(const std::string& word) const override;

  // Unstandardised [curvature, brow angle, openness, width, brow height].
  Tensor expression_statistics(const Tensor& image) const;

 private:
  int image_size_;
  std::vector<std::string> emotions_;
  Tensor mean_, inv_std_;
  std::vector<Tensor> prototypes_;
};

double text_image_consistency(const std::string& prompt, const Tensor& image, const JointEmbedderInterface& embedder);
double expression_coefficient(const std::string& emotion_word, const Tensor& image,
                              const JointEmbedderInterface& embedder);

struct EvalRow {
  std::string image;
  std::string prompt;
  std::string emotion;
  double id_pres = 0.0;
  double clip_ti = 0.0;
  double expression = 0.0;
};

struct EvalReport {
  double id_pres = 0.0;
  double clip_ti = 0.0;
  double expression_coeff = 0.0;
  std::vector<EvalRow> rows;
  nlohmann::json config;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// dir holds generated/, references/ and prompts.jsonl with records
// {"image": "<file in generated/>", "prompt": ..., "reference": "<file in references/>"}.
// A record may list several references ("references": [...]) for multi-subject images.
EvalReport evaluate_directory(const std::filesystem::path& dir, const FaceEmbedderInterface& faces,
                              const JointEmbedderInterface& joint, int image_size);

}  // namespace pdiff
