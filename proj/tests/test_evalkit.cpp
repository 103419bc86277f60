#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "json.hpp"
#include "pdiff/evalkit.hpp"
#include "pdiff/image_io.hpp"
#include "support.hpp"

using namespace pdiff;
namespace fs = std::filesystem;

namespace {

using Matrix = std::vector<std::vector<double>>;

// Best mean over all injective row-to-column assignments.
double exhaustive_best(const Matrix& m) {
  const std::size_t rows = m.size(), cols = m[0].size();
  const std::size_t k = std::min(rows, cols);
  std::vector<int> perm(std::max(rows, cols));
  std::iota(perm.begin(), perm.end(), 0);
  double best = -1e300;
  do {
    double s = 0.0;
    if (rows <= cols) {
      for (std::size_t r = 0; r < rows; ++r) s += m[r][static_cast<std::size_t>(perm[r])];
    } else {
      for (std::size_t c = 0; c < cols; ++c) s += m[static_cast<std::size_t>(perm[c])][c];
    }
    best = std::max(best, s / static_cast<double>(k));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Faces are already embeddings: the crop's values are returned as is.
class PassThroughFaces : public FaceEmbedderInterface {
 public:
  Tensor embed_face(const Tensor& crop) const override { return crop.reshaped({static_cast<int>(crop.size())}); }
};

class FixedJoint : public JointEmbedderInterface {
 public:
  Tensor text, image;
  Tensor embed_text(const std::string&) const override { return text; }
  Tensor embed_image(const Tensor&) const override { return image; }
  bool knows_emotion(const std::string& w) const override { return w == "happy"; }
};

Tensor render_emotion(const std::array<double, 3>& id, const std::string& emotion, int bg, std::uint64_t seed) {
  FaceSpec spec;
  spec.identity = id;
  spec.expression = emotion;
  spec.background_id = bg;
  return render_face(spec, seed).image;
}

}  // namespace

TEST_SUITE("evalkit") {
  TEST_CASE("greedy matching on the worked example") {
    const MatchResult r = greedy_match({{0.9, 0.1}, {0.2, 0.8}});
    CHECK(r.mean == doctest::Approx(0.85).epsilon(1e-15));
    REQUIRE(r.pairs.size() == 2);
    CHECK(r.pairs[0] == std::pair<int, int>{0, 0});
    CHECK(r.pairs[1] == std::pair<int, int>{1, 1});
    CHECK(exhaustive_best({{0.9, 0.1}, {0.2, 0.8}}) == doctest::Approx(0.85));
  }

  TEST_CASE("ties go to the lowest row then column") {
    const MatchResult r = greedy_match({{0.5, 0.5}, {0.5, 0.5}});
    CHECK(r.pairs[0] == std::pair<int, int>{0, 0});
    CHECK(r.pairs[1] == std::pair<int, int>{1, 1});
  }

  TEST_CASE("rectangular matrices leave extras unmatched") {
    const MatchResult r = greedy_match({{0.1, 0.7, 0.3}});
    REQUIRE(r.pairs.size() == 1);
    CHECK(r.pairs[0] == std::pair<int, int>{0, 1});
    CHECK(r.mean == doctest::Approx(0.7));
    CHECK_THROWS_AS(greedy_match({}), ValidationError);
    CHECK_THROWS_AS(greedy_match({{0.1, 0.2}, {0.3}}), ValidationError);
  }

  TEST_CASE("greedy equals the exhaustive optimum on diagonally dominant matrices") {
    pdiff::Rng rng(31);
    for (int trial = 0; trial < 1000; ++trial) {
      const int n = 1 + trial % 4;
      Matrix m(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n)));
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) m[i][j] = i == j ? rng.uniform(0.5, 1.0) : rng.uniform(-1.0, 0.5);
      }
      CHECK(greedy_match(m).mean == doctest::Approx(exhaustive_best(m)).epsilon(1e-12));
    }
  }

  TEST_CASE("greedy never beats the exhaustive optimum") {
    pdiff::Rng rng(32);
    for (int trial = 0; trial < 1000; ++trial) {
      const int rows = 1 + rng.uniform_int(0, 3), cols = 1 + rng.uniform_int(0, 3);
      Matrix m(static_cast<std::size_t>(rows), std::vector<double>(static_cast<std::size_t>(cols)));
      for (auto& row : m) {
        for (double& v : row) v = rng.uniform(-1.0, 1.0);
      }
      CHECK(greedy_match(m).mean <= exhaustive_best(m) + 1e-12);
    }
  }

  TEST_CASE("identity preservation") {
    const FaceEmbedder inner;
    const AnalyticFaceEmbedder emb(inner);
    std::vector<Tensor> faces;
    for (int i = 0; i < 3; ++i) {
      FaceSpec spec;
      spec.identity = {0.2 + 0.3 * i, 0.5, 0.5};
      const Render r = render_face(spec, static_cast<std::uint64_t>(i));
      faces.push_back(crop_image(r.image, r.bbox));
    }
    CHECK(identity_preservation(faces, faces, emb) == doctest::Approx(1.0).epsilon(1e-12));
    std::vector<Tensor> reversed(faces.rbegin(), faces.rend());
    CHECK(identity_preservation(faces, reversed, emb) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(identity_preservation({faces[0]}, {faces[1]}, emb) ==
          doctest::Approx(cosine_similarity(emb.embed_face(faces[0]), emb.embed_face(faces[1]))));
    CHECK_THROWS_AS(identity_preservation({}, faces, emb), ValidationError);

    const PassThroughFaces pass;
    const Tensor a({2}, std::vector<double>{1, 0}), b({2}, std::vector<double>{0, 1});
    CHECK(identity_preservation({a, b}, {b, a}, pass) == doctest::Approx(1.0));
    CHECK_THROWS_AS(identity_preservation({Tensor({2})}, {a}, pass), ValidationError);
  }

  TEST_CASE("consistency of fixed embeddings") {
    FixedJoint j;
    j.text = Tensor({3}, std::vector<double>{1, 2, 3});
    j.image = j.text;
    const Tensor img({3, 8, 8});
    CHECK(text_image_consistency("anything", img, j) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(expression_coefficient("happy", img, j) == doctest::Approx(1.0).epsilon(1e-15));
    j.image = Tensor({3}, std::vector<double>{3, 0, -1});
    CHECK(std::abs(text_image_consistency("anything", img, j)) < 1e-15);
    CHECK(std::abs(expression_coefficient("happy", img, j)) < 1e-15);
    CHECK_THROWS_AS(expression_coefficient("sleepy", img, j), ValidationError);
  }

  TEST_CASE("own caption scores above a wrong-emotion caption") {
    const ToyJointEmbedder joint;
    const auto emotions = default_emotion_words();
    pdiff::Rng rng(33);
    int wins = 0;
    for (int i = 0; i < 100; ++i) {
      FaceSpec spec;
      spec.identity = {rng.uniform(), rng.uniform(), rng.uniform()};
      const auto e = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(emotions.size()) - 1));
      const auto w = (e + 1 + static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(emotions.size()) - 2))) %
                     emotions.size();
      spec.expression = emotions[e];
      spec.gender = rng.uniform() < 0.5 ? "man" : "woman";
      spec.background_id = rng.uniform_int(0, 3);
      const Tensor img = render_face(spec, static_cast<std::uint64_t>(i)).image;
      FaceSpec wrong = spec;
      wrong.expression = emotions[w];
      wins += text_image_consistency(make_caption(spec, 0), img, joint) >
              text_image_consistency(make_caption(wrong, 0), img, joint);
    }
    CHECK(wins >= 90);
  }

  TEST_CASE("happy renders score higher on happy than on sad") {
    const ToyJointEmbedder joint;
    pdiff::Rng rng(34);
    int wins = 0;
    for (int i = 0; i < 100; ++i) {
      const Tensor img = render_emotion({rng.uniform(), rng.uniform(), rng.uniform()}, "happy", rng.uniform_int(0, 3),
                                        static_cast<std::uint64_t>(i));
      wins += expression_coefficient("happy", img, joint) > expression_coefficient("sad", img, joint);
    }
    CHECK(wins >= 90);
  }

  TEST_CASE("joint embedder basics") {
    const ToyJointEmbedder joint;
    CHECK(joint.knows_emotion("happy"));
    CHECK_FALSE(joint.knows_emotion("sleepy"));
    CHECK(joint.embed_text("a photo of a man").storage() == joint.embed_text("a neutral man").storage());
    const Tensor img = render_emotion({0.5, 0.5, 0.5}, "angry", 1, 3);
    CHECK(joint.embed_image(img).size() == ToyJointEmbedder::kWidth);
    for (const auto& e : default_emotion_words()) {
      const double v = expression_coefficient(e, img, joint);
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS(expression_coefficient("sleepy", img, joint), ValidationError);
  }

  TEST_CASE("directory evaluation") {
    const fs::path dir = fs::temp_directory_path() / "pdiff_eval";
    fs::remove_all(dir);
    fs::create_directories(dir / "generated");
    fs::create_directories(dir / "references");
    std::ofstream prompts(dir / "prompts.jsonl");
    for (int i = 0; i < 3; ++i) {
      FaceSpec spec;
      spec.identity = {0.1 + 0.3 * i, 0.4, 0.6};
      spec.expression = i == 2 ? "neutral" : "happy";
      const Render r = render_face(spec, static_cast<std::uint64_t>(i));
      const std::string name = "img" + std::to_string(i) + ".png";
      write_png_rgb(dir / "generated" / name, r.image);
      write_png_rgb(dir / "references" / name, crop_image(r.image, r.bbox));
      prompts << nlohmann::json{{"image", name}, {"prompt", i == 2 ? "a photo of a man" : "a happy man"}, {"reference", name}}
                     .dump()
              << '\n';
    }
    prompts.close();
    const FaceEmbedder inner;
    const AnalyticFaceEmbedder faces(inner);
    const ToyJointEmbedder joint;
    const EvalReport rep = evaluate_directory(dir, faces, joint, 32);
    REQUIRE(rep.rows.size() == 3);
    CHECK(rep.id_pres == doctest::Approx(1.0).epsilon(1e-12));
    double clip = 0.0;
    for (const auto& row : rep.rows) clip += row.clip_ti;
    CHECK(rep.clip_ti == doctest::Approx(clip / 3.0));
    CHECK(rep.rows[0].emotion == "happy");
    const auto j = rep.to_json();
    CHECK(j.contains("id_pres"));
    CHECK(rep.to_csv().find("img1.png") != std::string::npos);
    CHECK_THROWS_AS(evaluate_directory(dir, faces, joint, 64), ValidationError);
    CHECK_THROWS_AS(evaluate_directory(dir / "missing", faces, joint, 32), IoError);
    fs::remove_all(dir);
  }
}
