#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pdiff/conditioning.hpp"
#include "support.hpp"

using namespace pdiff;
namespace fs = std::filesystem;

namespace {

Tensor face_crop(std::array<double, 3> id, const std::string& expression, int background = 0, std::uint64_t seed = 1) {
  FaceSpec spec;
  spec.identity = id;
  spec.expression = expression;
  spec.background_id = background;
  const Render r = render_face(spec, seed);
  return crop_image(r.image, r.bbox);
}

double at2(const Tensor& t, int r, int c) { return t[static_cast<std::size_t>(r) * t.dim(1) + c]; }

}  // namespace

TEST_SUITE("conditioning") {
  TEST_CASE("tokenizer and identity lookup") {
    TextEncoder enc;
    const auto e = enc.encode("a man smiling");
    CHECK(e.tokens.words.size() == 3);
    CHECK(e.tokens.tokens.size() == 16);
    CHECK(e.tokens.identity_index == 1);
    CHECK(e.embeddings.dim(0) == 16);
    CHECK(e.embeddings.dim(1) == 64);
    CHECK(e.tokens.tokens[3] == Vocabulary::kPad);

    CHECK(enc.encode("a woman reading").tokens.identity_index == 1);
    CHECK_FALSE(enc.encode("a person reading").tokens.identity_index.has_value());
    CHECK(enc.encode("a man and a woman").tokens.identity_index == 1);
    CHECK(enc.encode("a photo of a sad woman").tokens.emotion_index == 4);
    CHECK(enc.encode("A Happy WOMAN!").tokens.identity_index == 2);
    CHECK(enc.encode("a zebra woman").tokens.tokens[1] == Vocabulary::kUnknown);
  }

  TEST_CASE("encoder rows depend only on word and position") {
    TextEncoder enc;
    const Tensor a = enc.encode("a happy woman in a park").embeddings;
    const Tensor b = enc.encode("a happy woman in a park").embeddings;
    CHECK(a.storage() == b.storage());
    const Tensor c = enc.encode("a happy woman in a city").embeddings;
    for (int row = 0; row < 16; ++row) {
      double d = 0.0;
      for (int j = 0; j < 64; ++j) d = std::max(d, std::abs(at2(a, row, j) - at2(c, row, j)));
      if (row == 5) CHECK(d > 0.0);
      else CHECK(d == 0.0);
    }
  }

  TEST_CASE("prompt length limits") {
    TextEncoder enc;
    CHECK_THROWS_AS(enc.encode(""), ValidationError);
    CHECK_THROWS_AS(enc.encode("  ,, "), ValidationError);
    std::string long_prompt;
    for (int i = 0; i < 17; ++i) long_prompt += "a ";
    CHECK_THROWS_AS(enc.encode(long_prompt), ValidationError);
  }

  TEST_CASE("vocabulary file round trip") {
    const fs::path p = fs::temp_directory_path() / "pdiff_vocab.txt";
    Vocabulary v;
    v.save(p);
    const Vocabulary w = Vocabulary::from_file(p);
    CHECK(w.size() == v.size());
    CHECK(w.hash() == v.hash());
    CHECK(w.id("woman") == v.id("woman"));
    {
      std::ofstream bad(p);
      bad << "<pad> 0\nfoo 2\n";
    }
    CHECK_THROWS_AS(Vocabulary::from_file(p), ValidationError);
    fs::remove(p);
    CHECK_THROWS_AS(Vocabulary::from_file(p), IoError);
  }

  TEST_CASE("embedding ignores expression and tracks identity") {
    const FaceEmbedder emb;
    const Tensor happy = emb.embed(face_crop({0.4, 0.5, 0.5}, "happy")).vector;
    const Tensor sad = emb.embed(face_crop({0.4, 0.5, 0.5}, "sad")).vector;
    CHECK(happy.size() == FaceEmbedder::kWidth);
    CHECK(cosine_similarity(happy, sad) >= 0.999);
    CHECK(cosine_similarity(happy, happy) == 1.0);
    const Tensor other = emb.embed(face_crop({0.9, 0.5, 0.5}, "happy")).vector;
    CHECK(cosine_similarity(happy, other) < 0.9);
  }

  TEST_CASE("identities are separated from expressions") {
    const FaceEmbedder emb;
    pdiff::Rng rng(404);
    const auto emotions = default_emotion_words();
    double within = 0.0, between = 0.0;
    int nw = 0, nb = 0;
    std::vector<Tensor> anchors;
    for (int i = 0; i < 100; ++i) {
      const std::array<double, 3> id{rng.uniform(), rng.uniform(), rng.uniform()};
      const Tensor anchor = emb.embed(face_crop(id, emotions[0], i % 4, i)).vector;
      for (std::size_t k = 1; k < emotions.size(); ++k) {
        within += cosine_similarity(anchor, emb.embed(face_crop(id, emotions[k], i % 4, i)).vector);
        ++nw;
      }
      for (const auto& prev : anchors) {
        between += cosine_similarity(anchor, prev);
        ++nb;
      }
      anchors.push_back(anchor);
    }
    within /= nw;
    between /= nb;
    CHECK(within >= 0.999);
    CHECK(between <= within - 0.05);
  }

  TEST_CASE("embedding gradient matches finite differences") {
    const FaceEmbedder emb;
    Tensor crop = face_crop({0.25, 0.6, 0.4}, "surprised");
    crop = crop_image(crop, BBox{0, 0, 12, 12});
    const Tensor probe = testing::random_tensor({FaceEmbedder::kWidth}, 6);
    auto f = [&](const Tensor& x) {
      Tape tape;
      return dot(emb.embed(tape.constant(x)), tape.constant(probe)).value().item();
    };
    Tape tape;
    const Var x = tape.input(crop);
    tape.backward(dot(emb.embed(x), tape.constant(probe)));
    const Tensor numeric = testing::numeric_input_gradient(crop, f, 1e-6);
    CHECK(testing::relative_error(tape.grad(x), numeric) < 1e-4);
  }

  TEST_CASE("degenerate crops are rejected") {
    const FaceEmbedder emb;
    CHECK_THROWS_AS(emb.embed(Tensor({3, 24, 24})), ValidationError);
    CHECK_THROWS_AS(emb.embed(Tensor({3, 2, 24}, 0.5)), ValidationError);
    CHECK_THROWS_AS(emb.embed(Tensor({3, 200, 200}, 0.5)), ValidationError);
    CHECK_THROWS_AS(emb.embed(Tensor({1, 24, 24}, 0.5)), ValidationError);
    CHECK_THROWS_AS(cosine_similarity(Tensor({4}), Tensor({4}, 1.0)), ValidationError);
  }

  TEST_CASE("augmentation replaces only the identity row") {
    ParameterSet params;
    const AugmentationHead head(params, 64, FaceEmbedder::kWidth, 32, 5);
    TextEncoder enc;
    const auto e = enc.encode("a happy man in a park");
    const Tensor face = testing::random_tensor({FaceEmbedder::kWidth}, 2);
    Tape tape;
    const auto c = augment(tape, params, e.tokens, tape.constant(e.embeddings), tape.constant(face), head);
    const Tensor& out = c.embeddings.value();
    for (int row = 0; row < 16; ++row) {
      double d = 0.0;
      for (int j = 0; j < 64; ++j) d = std::max(d, std::abs(at2(out, row, j) - at2(e.embeddings, row, j)));
      if (row == 2) CHECK(d > 0.0);
      else CHECK(d == 0.0);
    }
    Tape t2;
    const auto plain = augment(t2, params, e.tokens, t2.constant(e.embeddings), std::nullopt, head);
    CHECK(plain.embeddings.value().storage() == e.embeddings.storage());
  }

  TEST_CASE("zero-weight head emits its output bias") {
    ParameterSet params;
    const AugmentationHead head(params, 64, FaceEmbedder::kWidth, 32, 5);
    for (auto& p : params) p.value.fill(0.0);
    Tensor& b2 = params[params.index_of("head.b2")].value;
    for (int j = 0; j < 64; ++j) b2[static_cast<std::size_t>(j)] = 0.01 * j;
    TextEncoder enc;
    const auto e = enc.encode("a sad woman");
    Tape tape;
    const auto c = augment(tape, params, e.tokens, tape.constant(e.embeddings),
                           tape.constant(testing::random_tensor({FaceEmbedder::kWidth}, 3)), head);
    for (int j = 0; j < 64; ++j) CHECK(at2(c.embeddings.value(), 2, j) == b2[static_cast<std::size_t>(j)]);
  }

  TEST_CASE("augmentation needs an identity token when a face is given") {
    ParameterSet params;
    const AugmentationHead head(params, 64, FaceEmbedder::kWidth, 32, 5);
    TextEncoder enc;
    const auto e = enc.encode("a person reading");
    Tape tape;
    CHECK_THROWS_AS(augment(tape, params, e.tokens, tape.constant(e.embeddings),
                            tape.constant(Tensor({FaceEmbedder::kWidth}, 1.0)), head),
                    ValidationError);
  }

  TEST_CASE("head gradients match finite differences") {
    ParameterSet params;
    const AugmentationHead head(params, 64, FaceEmbedder::kWidth, 16, 9);
    TextEncoder enc;
    const auto e = enc.encode("a photo of an angry man");
    const Tensor face = testing::random_tensor({FaceEmbedder::kWidth}, 4);
    const Tensor probe = testing::random_tensor({16, 64}, 7);
    const auto errors = testing::parameter_gradient_errors(params, [&](Tape& tape) {
      const auto c = augment(tape, params, e.tokens, tape.constant(e.embeddings), tape.constant(face), head);
      return sum(mul_const(c.embeddings, probe));
    });
    for (const auto& g : errors) {
      INFO(g.name);
      CHECK(g.relative < 1e-6);
      CHECK(g.analytic_norm > 0.0);
    }
  }

  TEST_CASE("dropout branches at fixed draws") {
    ParameterSet params;
    const AugmentationHead head(params, 64, FaceEmbedder::kWidth, 32, 5);
    TextEncoder enc;
    const auto e = enc.encode("a happy woman");
    Tape tape;
    const auto c = augment(tape, params, e.tokens, tape.constant(e.embeddings),
                           tape.constant(testing::random_tensor({FaceEmbedder::kWidth}, 3)), head);
    const Tensor null_row = testing::random_tensor({64}, 8);
    const Var nv = tape.constant(null_row);

    const auto u = apply_conditioning_dropout(c, 0.05, nv);
    CHECK(u.state == DropoutState::unconditional);
    for (int row = 0; row < 16; ++row) {
      for (int j = 0; j < 64; ++j) CHECK(at2(u.embeddings.value(), row, j) == null_row[static_cast<std::size_t>(j)]);
    }
    const auto t = apply_conditioning_dropout(c, 0.15, nv);
    CHECK(t.state == DropoutState::text_only);
    CHECK(t.embeddings.value().storage() == e.embeddings.storage());
    const auto f = apply_conditioning_dropout(c, 0.5, nv);
    CHECK(f.state == DropoutState::full);
    CHECK(f.embeddings.value().storage() == c.embeddings.value().storage());
  }

  TEST_CASE("dropout frequencies over many draws") {
    pdiff::Rng rng(123);
    int uncond = 0, text = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const DropoutState s = dropout_branch(rng.uniform());
      uncond += s == DropoutState::unconditional;
      text += s == DropoutState::text_only;
    }
    CHECK(std::abs(uncond / double(n) - 0.10) <= 0.01);
    CHECK(std::abs(text / double(n) - 0.10) <= 0.01);
  }
}
