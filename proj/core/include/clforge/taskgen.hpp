#pragma once

// Procedural shape-segmentation tasks. Each task segments one shape family
// under a templated prompt; images also carry distractor shapes from other
// families, which stay out of the mask.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clforge/tensor.hpp"

namespace clforge {

enum class ShapeFamily { kDisc, kEllipse, kRing, kBar, kBlob, kCross };
enum class PositionRule { kAnywhere, kLeftHalf, kRightHalf, kCenter };

std::string to_string(ShapeFamily family);
std::string to_string(PositionRule rule);
ShapeFamily parse_family(const std::string& name);
PositionRule parse_position(const std::string& name);

inline constexpr std::size_t kImageSize = 32;

struct TaskSpec {
  std::string name;
  ShapeFamily family = ShapeFamily::kDisc;
  int texture = 0;  // background style, 0..2
  double size_lo = 0.04;  // fraction of the image area
  double size_hi = 0.08;
  PositionRule position = PositionRule::kAnywhere;
  std::string prompt;
  std::vector<ShapeFamily> distractors;
  std::size_t n_train = 200;
  std::size_t n_val = 40;
  std::size_t n_test = 40;
  std::uint64_t seed = 0;
};

// Throws PreconditionError when the spec violates its invariants.
void validate(const TaskSpec& spec);

nlohmann::json to_json(const TaskSpec& spec);
// Missing optional fields take the TaskSpec defaults; the result is validated.
TaskSpec task_spec_from_json(const nlohmann::json& j);

// Analytic description of one placed shape. Pixel (row y, col x) has its
// centre at (x + 0.5, y + 0.5).
struct ShapeGeometry {
  ShapeFamily family = ShapeFamily::kDisc;
  double cx = 16.0;
  double cy = 16.0;
  double radius = 4.0;     // disc radius, ring outer radius, blob lobe radius
  double axis_a = 0.0;     // ellipse semi-axes / bar and cross half-length
  double axis_b = 0.0;     // ellipse minor semi-axis / bar and cross half-width
  double angle = 0.0;      // ellipse rotation
  bool vertical = false;   // bar orientation
  double lobe_dx[2] = {0.0, 0.0};  // blob satellite lobe offsets
  double lobe_dy[2] = {0.0, 0.0};
};

bool contains(const ShapeGeometry& shape, double x, double y);

struct Sample {
  Tensor image;  // [32, 32] in [0, 1]
  Tensor mask;   // [32, 32] in {0, 1}
  std::string task;
  // Placed shapes, kept for consistency checks. Not persisted: imported
  // datasets leave them empty.
  std::optional<ShapeGeometry> target;
  std::vector<ShapeGeometry> distractors;
};

struct TaskData {
  TaskSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
};

// Binary raster (row-major, 32x32) of the shape's predicate at pixel centres.
std::vector<double> rasterize(const ShapeGeometry& shape);

// Deterministic in spec.seed; sample i of the concatenated train/val/test
// index space draws from its own RNG stream.
TaskData generate(const TaskSpec& spec);

// Pretext data for backbone pretraining: one to three shapes of any family,
// all foreground, prompt "object".
std::vector<Sample> generate_pretext(std::size_t count, std::uint64_t seed);
inline constexpr const char* kPretextPrompt = "object";

// Committed five-task sequences: "homogeneous", "heterogeneous", "mixed".
// Task seeds derive from `seed`; counts are the TaskSpec defaults unless
// overridden.
std::vector<std::string> suite_names();
std::vector<TaskSpec> default_suite(const std::string& name, std::uint64_t seed);
std::map<std::string, std::vector<TaskSpec>> default_suites(std::uint64_t seed);

}  // namespace clforge
