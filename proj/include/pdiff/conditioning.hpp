#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pdiff/autograd.hpp"
#include "pdiff/tensor.hpp"
#include "pdiff/toyfaces.hpp"

namespace pdiff {

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnknown = 1;

  Vocabulary();  // built-in word list
  static Vocabulary from_file(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int id(const std::string& word) const;  // kUnknown when absent
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }
  std::uint64_t hash() const;

 private:
  void add(const std::string& word);
  std::vector<std::string> words_;
  std::map<std::string, int> ids_;
};

std::vector<std::string> tokenize_words(const std::string& prompt);

struct TokenSequence {
  std::vector<int> tokens;          // padded to the encoder's max length
  std::vector<std::string> words;   // content words only
  std::optional<int> identity_index;
  std::optional<int> emotion_index;
};

std::optional<int> locate_identity_token(const TokenSequence& seq, const std::vector<std::string>& identity_words);
std::optional<int> locate_emotion_token(const TokenSequence& seq, const std::vector<std::string>& emotion_words);

struct TextEncoderConfig {
  int width = 64;  // D_c
  int max_tokens = 16;
  std::uint64_t seed = 20240101;
  std::vector<std::string> identity_words = default_identity_words();
  std::vector<std::string> emotion_words = default_emotion_words();
};

// Frozen context-free text encoder: embedding lookup plus a sinusoidal
// position term. Rows depend only on (word, position).
class TextEncoder {
 public:
  explicit TextEncoder(TextEncoderConfig config = {}, Vocabulary vocab = {});

  struct Encoded {
    TokenSequence tokens;
    Tensor embeddings;  // [max_tokens, width]
  };
  Encoded encode(const std::string& prompt) const;

  const TextEncoderConfig& config() const { return config_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  const Tensor& table() const { return table_; }

 private:
  TextEncoderConfig config_;
  Vocabulary vocab_;
  Tensor table_;
};

enum class EmbeddingSource { analytic, learned };

struct FaceEmbedding {
  Tensor vector;  // [D_f]
  EmbeddingSource source = EmbeddingSource::analytic;
};

// Analytic face descriptor over a face-box crop: chroma-weighted colour and
// shape moments plus eye-placement moments, standardised against a fixed
// calibration set. Rows of the crop that carry brows or mouth never enter,
// so toyface expressions leave the descriptor unchanged.
class FaceEmbedder {
 public:
  static constexpr int kWidth = 8;  // D_f
  static constexpr int kMinCrop = 4;
  static constexpr int kMaxCrop = 128;

  explicit FaceEmbedder(int calibration_image_size = 32);

  Var embed(Var crop) const;
  FaceEmbedding embed(const Tensor& crop) const;

  const Tensor& feature_mean() const { return mean_; }
  const Tensor& feature_scale() const { return inv_std_; }

 private:
  Var raw_features(Var crop) const;
  Tensor mean_;
  Tensor inv_std_;
};

double cosine_similarity(const Tensor& a, const Tensor& b);
Var cosine_similarity(Var a, Var b);

// Two-layer perceptron (D_c + D_f) -> hidden -> D_c with SiLU in between.
class AugmentationHead {
 public:
  AugmentationHead() = default;
  AugmentationHead(ParameterSet& params, int text_width, int face_width, int hidden, std::uint64_t seed);

  Var forward(Tape& tape, const ParameterSet& params, Var text_row, Var face) const;

  int text_width() const { return text_width_; }
  int face_width() const { return face_width_; }

 private:
  int text_width_ = 0, face_width_ = 0;
  std::size_t w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0;
};

enum class DropoutState { full, text_only, unconditional };
const char* to_string(DropoutState s);

struct ConditioningSequence {
  Var embeddings;       // [n, D_c] fed to the denoiser
  Var text_embeddings;  // raw encoder rows
  std::optional<int> identity_index;
  std::optional<int> emotion_index;
  DropoutState state = DropoutState::full;
};

// Replaces the identity-token row by head([row || face]); all other rows are
// passed through untouched. Throws when a face is given but no identity token exists.
ConditioningSequence augment(Tape& tape, const ParameterSet& params, const TokenSequence& tokens, Var text_embeddings,
                             std::optional<Var> face, const AugmentationHead& head);

struct DropoutFractions {
  double unconditional = 0.10;
  double text_only = 0.10;
};

DropoutState dropout_branch(double u, const DropoutFractions& fractions = {});
ConditioningSequence apply_conditioning_dropout(const ConditioningSequence& cond, double u, Var null_embedding,
                                                const DropoutFractions& fractions = {});

}  // namespace pdiff
