#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "doctest.h"
#include "pdiff/conditioning.hpp"
#include "pdiff/toyfaces.hpp"

using namespace pdiff;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pdiff_toyfaces_" + name);
  fs::remove_all(p);
  return p;
}

double mask_area(const Tensor& m) {
  double a = 0.0;
  for (double v : m.values()) a += v;
  return a;
}

}  // namespace

TEST_SUITE("toyfaces") {
  TEST_CASE("render is deterministic in spec and seed") {
    FaceSpec spec;
    spec.identity = {0.2, 0.4, 0.6};
    spec.expression = "happy";
    const Render a = render_face(spec, 17);
    const Render b = render_face(spec, 17);
    CHECK(a.image.storage() == b.image.storage());
    CHECK(a.mask.storage() == b.mask.storage());
    const Render c = render_face(spec, 18);
    CHECK(c.image.storage() != a.image.storage());
  }

  TEST_CASE("values lie on the 8-bit grid in [0,1]") {
    FaceSpec spec;
    const Render r = render_face(spec, 3);
    for (const Tensor* t : {&r.image, &r.mask}) {
      for (double v : t->values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(std::abs(v * 255.0 - std::round(v * 255.0)) < 1e-9);
      }
    }
  }

  TEST_CASE("round face mask area is pi r squared") {
    FaceSpec spec;
    spec.identity = {0.3, 0.0, 0.5};
    const Render r = render_face(spec, 5);
    const double radius = layout::kFaceSemiMinorMax;
    const double expected = std::numbers::pi * radius * radius;
    CHECK(std::abs(mask_area(r.mask) - expected) / expected < 0.05);
  }

  TEST_CASE("face occupies a moderate fraction of the canvas") {
    for (double ecc : {0.0, 0.5, 1.0}) {
      FaceSpec spec;
      spec.identity = {0.5, ecc, 0.5};
      const Render r = render_face(spec, 9);
      const double frac = mask_area(r.mask) / (32.0 * 32.0);
      CHECK(frac >= 0.30);
      CHECK(frac <= 0.70);
    }
  }

  TEST_CASE("mask support stays inside the face box") {
    FaceSpec spec;
    spec.identity = {0.9, 0.1, 1.0};
    const Render r = render_face(spec, 2);
    const BBox box = face_bbox(32);
    CHECK(box == BBox{4, 4, 28, 28});
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        if (r.mask[static_cast<std::size_t>(y) * 32 + x] >= 0.5) {
          CHECK(x >= box.x0);
          CHECK(x < box.x1);
          CHECK(y >= box.y0);
          CHECK(y < box.y1);
        }
      }
    }
  }

  TEST_CASE("expression changes pixels but not the identity embedding") {
    const FaceEmbedder embedder;
    FaceSpec spec;
    spec.identity = {0.7, 0.3, 0.2};
    for (const auto& e : default_emotion_words()) {
      FaceSpec other = spec;
      other.expression = e;
      const Render a = render_face(spec, 4);
      const Render b = render_face(other, 4);
      if (e != spec.expression) CHECK(a.image.storage() != b.image.storage());
      const Tensor ea = embedder.embed(crop_image(a.image, a.bbox)).vector;
      const Tensor eb = embedder.embed(crop_image(b.image, b.bbox)).vector;
      CHECK(max_abs_diff(ea, eb) < 1e-10);
    }
  }

  TEST_CASE("captions follow the templates") {
    FaceSpec spec;
    spec.expression = "happy";
    spec.gender = "woman";
    CHECK(make_caption(spec, 0) == "a happy woman in front of a plain background");
    spec.expression = "excited";
    CHECK(make_caption(spec, 1) == "a photo of an excited woman");
    CHECK(make_caption(spec, 3) == "a woman in front of a plain background");
    CHECK_THROWS_AS(make_caption(spec, caption_template_count()), ValidationError);
  }

  TEST_CASE("every emotion and gender gives a distinct caption per template") {
    const auto emotions = default_emotion_words();
    const auto genders = default_identity_words();
    for (int t = 0; t < caption_template_count(); ++t) {
      if (!caption_template_has_emotion(t)) continue;
      std::set<std::string> seen;
      for (const auto& e : emotions) {
        for (const auto& g : genders) {
          FaceSpec spec;
          spec.expression = e;
          spec.gender = g;
          seen.insert(make_caption(spec, t));
        }
      }
      CHECK(seen.size() == emotions.size() * genders.size());
    }
    CHECK(emotions.size() * genders.size() == 22);
  }

  TEST_CASE("captions parse back to their gender and emotion") {
    const auto samples = generate_samples(64, 8);
    TextEncoder enc;
    for (const auto& s : samples) {
      const auto e = enc.encode(s.caption);
      REQUIRE(e.tokens.identity_index.has_value());
      CHECK(e.tokens.words[static_cast<std::size_t>(*e.tokens.identity_index)] == s.gender);
      if (e.tokens.emotion_index) {
        CHECK(e.tokens.words[static_cast<std::size_t>(*e.tokens.emotion_index)] == s.emotion);
      }
    }
  }

  TEST_CASE("reference face shares identity with its sample") {
    const FaceEmbedder embedder;
    const auto samples = generate_samples(16, 12);
    for (const auto& s : samples) {
      const Tensor target = embedder.embed(crop_image(s.image, s.face_bbox)).vector;
      const Tensor ref = embedder.embed(s.reference_face).vector;
      CHECK(cosine_similarity(target, ref) > 0.95);
    }
  }

  TEST_CASE("dataset on disk matches the in-memory twin") {
    const fs::path dir = scratch("small");
    const Manifest m = build_dataset(8, 31, dir);
    CHECK(m.records.size() == 8);
    const auto mem = generate_samples(8, 31);
    const auto disk = load_dataset(dir / "manifest.jsonl");
    REQUIRE(disk.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(fs::exists(dir / m.records[i].image));
      CHECK(fs::exists(dir / m.records[i].mask));
      CHECK(fs::exists(dir / m.records[i].ref_face));
      CHECK(disk[i].caption == mem[i].caption);
      CHECK(disk[i].face_bbox == mem[i].face_bbox);
      CHECK(max_abs_diff(disk[i].image, mem[i].image) == 0.0);
      CHECK(max_abs_diff(disk[i].face_mask, mem[i].face_mask) == 0.0);
      CHECK(max_abs_diff(disk[i].reference_face, mem[i].reference_face) == 0.0);
    }
    fs::remove_all(dir);
  }

  TEST_CASE("manifest checksum is stable across builds") {
    const fs::path a = scratch("a"), b = scratch("b");
    build_dataset(512, 77, a);
    build_dataset(512, 77, b);
    CHECK(read_manifest(a / "manifest.jsonl").records.size() == 512);
    CHECK(file_checksum(a / "manifest.jsonl") == file_checksum(b / "manifest.jsonl"));
    CHECK(file_checksum(a / "images" / "000511.png") == file_checksum(b / "images" / "000511.png"));
    fs::remove_all(a);
    fs::remove_all(b);
  }

  TEST_CASE("invalid specs and paths are rejected") {
    FaceSpec spec;
    spec.identity = {1.5, 0.5, 0.5};
    CHECK_THROWS_AS(render_face(spec, 0), ValidationError);
    spec = {};
    spec.expression = "sleepy";
    CHECK_THROWS_AS(render_face(spec, 0), ValidationError);
    spec = {};
    spec.gender = "dog";
    CHECK_THROWS_AS(render_face(spec, 0), ValidationError);
    spec = {};
    spec.background_id = 9;
    CHECK_THROWS_AS(render_face(spec, 0), ValidationError);
    ToyfaceConfig cfg;
    cfg.image_size = 30;
    CHECK_THROWS_AS(render_face(FaceSpec{}, 0, cfg), ValidationError);
    CHECK_THROWS_AS(generate_samples(0, 1), ValidationError);
    CHECK_THROWS_AS(build_dataset(2, 1, "/proc/pdiff_not_writable/x"), IoError);
    CHECK_THROWS_AS(read_manifest("/nonexistent/manifest.jsonl"), IoError);
  }

  TEST_CASE("renders scale to other canvas sizes") {
    ToyfaceConfig cfg;
    cfg.image_size = 64;
    const Render r = render_face(FaceSpec{}, 1, cfg);
    CHECK(r.image.dim(1) == 64);
    CHECK(r.bbox == BBox{8, 8, 56, 56});
  }
}
