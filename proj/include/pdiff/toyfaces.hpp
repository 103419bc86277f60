#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pdiff/tensor.hpp"

namespace pdiff {

// Canonical face layout, in units of pixels of a 32x32 render with the face
// centred at the origin. Every other image size is a uniform rescale.
namespace layout {
inline constexpr double kReferenceSize = 32.0;
inline constexpr double kFaceSemiMinorMax = 11.5;  // vertical semi-axis
inline constexpr double kEccentricityShrink = 0.2;
inline constexpr double kBoxHalf = 12.0;           // face box is 24x24 canonical units
// Rows touched by expression features. Identity features never read them.
inline constexpr double kBrowZone[2] = {-9.0, -3.0};
inline constexpr double kMouthZone[2] = {3.0, 9.0};
inline constexpr double kEyeY = -1.0;
}  // namespace layout

struct BBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel rectangle
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool operator==(const BBox&) const = default;
};

std::vector<std::string> default_emotion_words();
std::vector<std::string> default_identity_words();

// Rendering controls attached to an emotion word.
struct ExpressionParams {
  double curvature = 0.0;    // mouth corners up (+) / down (-), in [-1,1]
  double brow_angle = 0.0;   // inner brow ends raised (+) / lowered (-), in [-1,1]
  double openness = 0.0;     // [0,1]
  double width = 0.5;        // [0,1]
  double brow_height = 0.0;  // [-1,1]
};
ExpressionParams expression_params(const std::string& emotion);

struct FaceSpec {
  std::array<double, 3> identity{0.5, 0.5, 0.5};  // hue, eccentricity, eye spacing
  std::string expression = "neutral";
  std::string gender = "woman";
  int background_id = 0;
};

struct ToyfaceConfig {
  int image_size = 32;
  std::vector<std::string> emotions = default_emotion_words();
  std::vector<std::string> identity_words = default_identity_words();
  int background_count = 4;
};

void validate_spec(const FaceSpec& spec, const ToyfaceConfig& config);

struct Render {
  Tensor image;  // [3,H,W] in [0,1], on the 8-bit grid
  Tensor mask;   // [H,W] face coverage in [0,1], on the 8-bit grid
  BBox bbox;
};

BBox face_bbox(int image_size);
Render render_face(const FaceSpec& spec, std::uint64_t seed, const ToyfaceConfig& config = {});
Tensor crop_image(const Tensor& image, const BBox& box);

int caption_template_count();
bool caption_template_has_emotion(int template_id);
std::string make_caption(const FaceSpec& spec, int template_id);

struct TrainingSample {
  Tensor image;           // x_0, [3,H,W]
  std::string caption;
  Tensor reference_face;  // [3,h,w] crop of another render of the same identity
  Tensor face_mask;       // [H,W]
  BBox face_bbox;
  std::string gender;
  std::string emotion;
  int identity_id = 0;
};

struct ManifestRecord {
  std::string image, mask, ref_face, caption;
  BBox bbox;
  std::string gender, emotion;
  int identity_id = 0;
};

struct Manifest {
  std::filesystem::path path;
  std::vector<ManifestRecord> records;
};

// Renders n samples into dir (images/, masks/, refs/) and writes dir/manifest.jsonl.
Manifest build_dataset(int n, std::uint64_t seed, const std::filesystem::path& dir,
                       const ToyfaceConfig& config = {});
// In-memory twin of build_dataset without touching the filesystem.
std::vector<TrainingSample> generate_samples(int n, std::uint64_t seed, const ToyfaceConfig& config = {});

Manifest read_manifest(const std::filesystem::path& path);
TrainingSample load_sample(const ManifestRecord& record, const std::filesystem::path& base_dir);
std::vector<TrainingSample> load_dataset(const std::filesystem::path& manifest_path);

std::uint64_t file_checksum(const std::filesystem::path& path);

}  // namespace pdiff
