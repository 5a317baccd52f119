#include "clforge/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "clforge/model.hpp"
#include "clforge/rng.hpp"

namespace clforge {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kSide = static_cast<double>(kImageSize);
constexpr int kMaxAttempts = 100;
constexpr double kRingWidth = 2.0;
constexpr double kBarHalfWidth = 1.5;
constexpr double kCrossThickness = 3.0;

struct Extent {
  double x;
  double y;
};

Extent extent_of(const ShapeGeometry& s) {
  switch (s.family) {
    case ShapeFamily::kDisc:
    case ShapeFamily::kRing:
      return {s.radius, s.radius};
    case ShapeFamily::kEllipse:
      return {s.axis_a, s.axis_a};
    case ShapeFamily::kBar:
      return s.vertical ? Extent{s.axis_b, s.axis_a} : Extent{s.axis_a, s.axis_b};
    case ShapeFamily::kCross:
      return {s.axis_a, s.axis_a};
    case ShapeFamily::kBlob: {
      double ex = s.radius, ey = s.radius;
      for (int k = 0; k < 2; ++k) {
        ex = std::max(ex, std::abs(s.lobe_dx[k]) + 0.7 * s.radius);
        ey = std::max(ey, std::abs(s.lobe_dy[k]) + 0.7 * s.radius);
      }
      return {ex, ey};
    }
  }
  return {0.0, 0.0};
}

// Geometry with the requested foreground area (pixels), centred at the origin.
ShapeGeometry sized_shape(ShapeFamily family, double area, Rng& rng) {
  ShapeGeometry s;
  s.family = family;
  switch (family) {
    case ShapeFamily::kDisc:
      s.radius = std::sqrt(area / kPi);
      break;
    case ShapeFamily::kEllipse: {
      const double r = std::sqrt(area / kPi);
      const double e = uniform(rng, 1.4, 1.8);
      s.axis_a = r * std::sqrt(e);
      s.axis_b = r / std::sqrt(e);
      s.angle = uniform(rng, 0.0, kPi);
      break;
    }
    case ShapeFamily::kRing:
      s.radius = (area / kPi + kRingWidth * kRingWidth) / (2.0 * kRingWidth);
      s.axis_b = kRingWidth;
      break;
    case ShapeFamily::kBar:
      s.axis_b = kBarHalfWidth;
      s.axis_a = area / (4.0 * kBarHalfWidth);
      s.vertical = uniform01(rng) < 0.5;
      break;
    case ShapeFamily::kCross:
      s.axis_b = kCrossThickness / 2.0;
      s.axis_a = (area + kCrossThickness * kCrossThickness) / (4.0 * kCrossThickness);
      break;
    case ShapeFamily::kBlob: {
      s.radius = 0.75 * std::sqrt(area / kPi);
      for (int k = 0; k < 2; ++k) {
        const double theta = uniform(rng, 0.0, 2.0 * kPi);
        s.lobe_dx[k] = 0.8 * s.radius * std::cos(theta);
        s.lobe_dy[k] = 0.8 * s.radius * std::sin(theta);
      }
      break;
    }
  }
  return s;
}

// Pixel value of a foreground pixel of `family` at (x, y).
double appearance(ShapeFamily family, std::size_t x, std::size_t y) {
  switch (family) {
    case ShapeFamily::kDisc: return 0.95;
    case ShapeFamily::kEllipse: return 0.8;
    case ShapeFamily::kRing: return 0.75;
    case ShapeFamily::kBar: return (x + y) % 2 == 0 ? 0.95 : 0.5;
    case ShapeFamily::kCross: return 0.65;
    case ShapeFamily::kBlob: return 0.55;
  }
  return 1.0;
}

double background(int texture, std::size_t x, std::size_t y, Rng& rng) {
  const double fx = static_cast<double>(x);
  const double fy = static_cast<double>(y);
  switch (texture) {
    case 1: return 0.05 + 0.25 * fx / (kSide - 1.0) + 0.05 * uniform01(rng);
    case 2: return 0.15 + 0.08 * std::sin(fx / 3.0) * std::cos(fy / 4.0) + 0.05 * uniform01(rng);
    default: return 0.1 + 0.1 * uniform01(rng);
  }
}

struct Placement {
  ShapeGeometry shape;
  std::vector<double> raster;
};

bool centroid_ok(const std::vector<double>& raster, PositionRule rule) {
  double sx = 0.0, sy = 0.0, n = 0.0;
  for (std::size_t i = 0; i < raster.size(); ++i) {
    if (raster[i] > 0.5) {
      sx += static_cast<double>(i % kImageSize) + 0.5;
      sy += static_cast<double>(i / kImageSize) + 0.5;
      n += 1.0;
    }
  }
  if (n < 4.0) return false;
  const double cx = sx / n, cy = sy / n;
  switch (rule) {
    case PositionRule::kLeftHalf: return cx < kSide / 2.0;
    case PositionRule::kRightHalf: return cx > kSide / 2.0;
    case PositionRule::kCenter: return std::abs(cx - 16.0) <= 4.0 && std::abs(cy - 16.0) <= 4.0;
    case PositionRule::kAnywhere: return true;
  }
  return true;
}

// Rejection-samples a placement honouring the position rule and avoiding the
// pixels in `blocked`. Returns nullopt after kMaxAttempts failures.
std::optional<Placement> place(ShapeFamily family, double lo, double hi, PositionRule rule,
                               const std::vector<char>& blocked, Rng& rng) {
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const double area = uniform(rng, lo, hi) * kSide * kSide;
    ShapeGeometry s = sized_shape(family, area, rng);
    const Extent e = extent_of(s);
    double x_lo = e.x, x_hi = kSide - e.x, y_lo = e.y, y_hi = kSide - e.y;
    switch (rule) {
      case PositionRule::kLeftHalf: x_hi = std::min(x_hi, kSide / 2.0); break;
      case PositionRule::kRightHalf: x_lo = std::max(x_lo, kSide / 2.0); break;
      case PositionRule::kCenter:
        x_lo = std::max(x_lo, 12.0); x_hi = std::min(x_hi, 20.0);
        y_lo = std::max(y_lo, 12.0); y_hi = std::min(y_hi, 20.0);
        break;
      case PositionRule::kAnywhere: break;
    }
    if (x_lo >= x_hi || y_lo >= y_hi) continue;
    s.cx = uniform(rng, x_lo, x_hi);
    s.cy = uniform(rng, y_lo, y_hi);
    auto raster = rasterize(s);
    if (!centroid_ok(raster, rule)) continue;
    bool clash = false;
    for (std::size_t i = 0; i < raster.size() && !clash; ++i) clash = raster[i] > 0.5 && blocked[i];
    if (clash) continue;
    return Placement{s, std::move(raster)};
  }
  return std::nullopt;
}

// Marks the raster and a one-pixel border around it.
void block(std::vector<char>& blocked, const std::vector<double>& raster) {
  const long n = static_cast<long>(kImageSize);
  for (long y = 0; y < n; ++y) {
    for (long x = 0; x < n; ++x) {
      if (raster[static_cast<std::size_t>(y * n + x)] < 0.5) continue;
      for (long dy = -1; dy <= 1; ++dy) {
        for (long dx = -1; dx <= 1; ++dx) {
          const long yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < n && xx >= 0 && xx < n) blocked[static_cast<std::size_t>(yy * n + xx)] = 1;
        }
      }
    }
  }
}

void paint(std::vector<double>& image, const Placement& p, Rng& rng) {
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (p.raster[i] > 0.5) {
      image[i] = appearance(p.shape.family, i % kImageSize, i / kImageSize) + 0.03 * normal(rng);
    }
  }
}

std::vector<double> textured_background(int texture, Rng& rng) {
  std::vector<double> image(kImageSize * kImageSize);
  for (std::size_t y = 0; y < kImageSize; ++y) {
    for (std::size_t x = 0; x < kImageSize; ++x) image[y * kImageSize + x] = background(texture, x, y, rng);
  }
  return image;
}

Sample finish(std::vector<double> image, std::vector<double> mask, const std::string& task) {
  for (auto& v : image) v = std::clamp(v, 0.0, 1.0);
  Sample s;
  s.image = Tensor({kImageSize, kImageSize}, std::move(image));
  s.mask = Tensor({kImageSize, kImageSize}, std::move(mask));
  s.task = task;
  return s;
}

Sample make_sample(const TaskSpec& spec, std::uint64_t index) {
  Rng rng = make_rng(spec.seed, Stream::kTaskGen, index);
  std::vector<char> blocked(kImageSize * kImageSize, 0);
  auto target = place(spec.family, spec.size_lo, spec.size_hi, spec.position, blocked, rng);
  if (!target) {
    throw PreconditionError("task " + spec.name + ": cannot place a " + to_string(spec.family) + " with size [" +
                            std::to_string(spec.size_lo) + ", " + std::to_string(spec.size_hi) + "] under rule " +
                            to_string(spec.position) + " after " + std::to_string(kMaxAttempts) + " attempts");
  }
  block(blocked, target->raster);

  std::vector<double> image = textured_background(spec.texture, rng);
  std::vector<ShapeGeometry> distractors;
  if (!spec.distractors.empty()) {
    const int count = uniform01(rng) < 0.5 ? 1 : 2;
    for (int k = 0; k < count; ++k) {
      const ShapeFamily f = spec.distractors[uniform_index(rng, spec.distractors.size())];
      auto d = place(f, 0.03, 0.08, PositionRule::kAnywhere, blocked, rng);
      if (!d) continue;
      block(blocked, d->raster);
      paint(image, *d, rng);
      distractors.push_back(d->shape);
    }
  }
  paint(image, *target, rng);
  Sample s = finish(std::move(image), std::move(target->raster), spec.name);
  s.target = target->shape;
  s.distractors = std::move(distractors);
  return s;
}

constexpr ShapeFamily kAllFamilies[] = {ShapeFamily::kDisc, ShapeFamily::kEllipse, ShapeFamily::kRing,
                                        ShapeFamily::kBar,  ShapeFamily::kBlob,    ShapeFamily::kCross};

}  // namespace

std::string to_string(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::kDisc: return "disc";
    case ShapeFamily::kEllipse: return "ellipse";
    case ShapeFamily::kRing: return "ring";
    case ShapeFamily::kBar: return "bar";
    case ShapeFamily::kBlob: return "blob";
    case ShapeFamily::kCross: return "cross";
  }
  return "?";
}

std::string to_string(PositionRule rule) {
  switch (rule) {
    case PositionRule::kAnywhere: return "anywhere";
    case PositionRule::kLeftHalf: return "left-half";
    case PositionRule::kRightHalf: return "right-half";
    case PositionRule::kCenter: return "center";
  }
  return "?";
}

ShapeFamily parse_family(const std::string& name) {
  for (auto f : kAllFamilies) {
    if (to_string(f) == name) return f;
  }
  throw PreconditionError("unknown shape family '" + name + "'");
}

PositionRule parse_position(const std::string& name) {
  for (auto r : {PositionRule::kAnywhere, PositionRule::kLeftHalf, PositionRule::kRightHalf, PositionRule::kCenter}) {
    if (to_string(r) == name) return r;
  }
  throw PreconditionError("unknown position rule '" + name + "'");
}

void validate(const TaskSpec& spec) {
  if (spec.name.empty()) throw PreconditionError("task spec needs a name");
  if (!(spec.size_lo > 0.0 && spec.size_lo < spec.size_hi && spec.size_hi < 0.5)) {
    throw PreconditionError("task " + spec.name + ": size range must satisfy 0 < lo < hi < 0.5");
  }
  if (spec.n_train < 1 || spec.n_val < 1 || spec.n_test < 1) {
    throw PreconditionError("task " + spec.name + ": split sizes must be at least 1");
  }
  if (spec.texture < 0 || spec.texture > 2) throw PreconditionError("task " + spec.name + ": texture id must be 0..2");
  std::istringstream words(spec.prompt);
  std::string w;
  bool any = false;
  while (words >> w) {
    any = true;
    if (!Vocabulary::standard().contains(w)) {
      throw PreconditionError("task " + spec.name + ": prompt word '" + w + "' is not in the vocabulary");
    }
  }
  if (!any) throw PreconditionError("task " + spec.name + ": empty prompt");
  for (auto f : spec.distractors) {
    if (f == spec.family) throw PreconditionError("task " + spec.name + ": distractor family equals the target family");
  }
}

bool contains(const ShapeGeometry& s, double x, double y) {
  const double dx = x - s.cx;
  const double dy = y - s.cy;
  switch (s.family) {
    case ShapeFamily::kDisc: return dx * dx + dy * dy < s.radius * s.radius;
    case ShapeFamily::kEllipse: {
      const double u = dx * std::cos(s.angle) + dy * std::sin(s.angle);
      const double v = -dx * std::sin(s.angle) + dy * std::cos(s.angle);
      return (u * u) / (s.axis_a * s.axis_a) + (v * v) / (s.axis_b * s.axis_b) < 1.0;
    }
    case ShapeFamily::kRing: {
      const double d2 = dx * dx + dy * dy;
      const double inner = s.radius - s.axis_b;
      return d2 < s.radius * s.radius && d2 >= inner * inner;
    }
    case ShapeFamily::kBar:
      return s.vertical ? (std::abs(dx) < s.axis_b && std::abs(dy) < s.axis_a)
                        : (std::abs(dy) < s.axis_b && std::abs(dx) < s.axis_a);
    case ShapeFamily::kCross:
      return (std::abs(dx) < s.axis_b && std::abs(dy) < s.axis_a) ||
             (std::abs(dy) < s.axis_b && std::abs(dx) < s.axis_a);
    case ShapeFamily::kBlob: {
      if (dx * dx + dy * dy < s.radius * s.radius) return true;
      const double r2 = 0.49 * s.radius * s.radius;
      for (int k = 0; k < 2; ++k) {
        const double ex = dx - s.lobe_dx[k], ey = dy - s.lobe_dy[k];
        if (ex * ex + ey * ey < r2) return true;
      }
      return false;
    }
  }
  return false;
}

std::vector<double> rasterize(const ShapeGeometry& shape) {
  std::vector<double> out(kImageSize * kImageSize, 0.0);
  for (std::size_t y = 0; y < kImageSize; ++y) {
    for (std::size_t x = 0; x < kImageSize; ++x) {
      if (contains(shape, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) out[y * kImageSize + x] = 1.0;
    }
  }
  return out;
}

TaskData generate(const TaskSpec& spec) {
  validate(spec);
  TaskData data;
  data.spec = spec;
  std::uint64_t index = 0;
  for (auto* split : {&data.train, &data.val, &data.test}) {
    const std::size_t n = split == &data.train ? spec.n_train : split == &data.val ? spec.n_val : spec.n_test;
    split->reserve(n);
    for (std::size_t i = 0; i < n; ++i) split->push_back(make_sample(spec, index++));
  }
  return data;
}

std::vector<Sample> generate_pretext(std::size_t count, std::uint64_t seed) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, Stream::kPretrain, i);
    const int texture = static_cast<int>(uniform_index(rng, 3));
    std::vector<double> image = textured_background(texture, rng);
    std::vector<double> mask(kImageSize * kImageSize, 0.0);
    std::vector<char> blocked(kImageSize * kImageSize, 0);
    const std::size_t shapes = 1 + uniform_index(rng, 3);
    for (std::size_t k = 0; k < shapes; ++k) {
      const ShapeFamily f = kAllFamilies[uniform_index(rng, std::size(kAllFamilies))];
      auto p = place(f, 0.03, 0.1, PositionRule::kAnywhere, blocked, rng);
      if (!p) continue;
      block(blocked, p->raster);
      paint(image, *p, rng);
      for (std::size_t j = 0; j < mask.size(); ++j) mask[j] = std::max(mask[j], p->raster[j]);
    }
    out.push_back(finish(std::move(image), std::move(mask), "pretext"));
  }
  return out;
}

// ---- json -----------------------------------------------------------------

nlohmann::json to_json(const TaskSpec& s) {
  nlohmann::json distractors = nlohmann::json::array();
  for (auto f : s.distractors) distractors.push_back(to_string(f));
  return {{"name", s.name},           {"family", to_string(s.family)},
          {"texture", s.texture},     {"size_lo", s.size_lo},
          {"size_hi", s.size_hi},     {"position", to_string(s.position)},
          {"prompt", s.prompt},       {"distractors", distractors},
          {"n_train", s.n_train},     {"n_val", s.n_val},
          {"n_test", s.n_test},       {"seed", s.seed}};
}

TaskSpec task_spec_from_json(const nlohmann::json& j) {
  TaskSpec s;
  try {
    s.name = j.at("name").get<std::string>();
    s.family = parse_family(j.at("family").get<std::string>());
    s.prompt = j.at("prompt").get<std::string>();
    s.texture = j.value("texture", s.texture);
    s.size_lo = j.value("size_lo", s.size_lo);
    s.size_hi = j.value("size_hi", s.size_hi);
    if (j.contains("position")) s.position = parse_position(j.at("position").get<std::string>());
    if (j.contains("distractors")) {
      for (const auto& d : j.at("distractors")) s.distractors.push_back(parse_family(d.get<std::string>()));
    }
    s.n_train = j.value("n_train", s.n_train);
    s.n_val = j.value("n_val", s.n_val);
    s.n_test = j.value("n_test", s.n_test);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("task spec: ") + e.what());
  }
  validate(s);
  return s;
}

// ---- suites ---------------------------------------------------------------

namespace {

TaskSpec task(std::string name, ShapeFamily family, PositionRule position, double lo, double hi, int texture,
              std::string prompt, std::vector<ShapeFamily> distractors) {
  TaskSpec s;
  s.name = std::move(name);
  s.family = family;
  s.position = position;
  s.size_lo = lo;
  s.size_hi = hi;
  s.texture = texture;
  s.prompt = std::move(prompt);
  s.distractors = std::move(distractors);
  return s;
}

using F = ShapeFamily;
using P = PositionRule;

}  // namespace

std::vector<std::string> suite_names() { return {"homogeneous", "heterogeneous", "mixed"}; }

std::vector<TaskSpec> default_suite(const std::string& name, std::uint64_t seed) {
  std::vector<TaskSpec> tasks;
  if (name == "homogeneous") {
    tasks = {
        task("disc-small-left", F::kDisc, P::kLeftHalf, 0.04, 0.08, 0, "one small bright round disc located left",
             {F::kBar, F::kCross}),
        task("disc-large-left", F::kDisc, P::kLeftHalf, 0.08, 0.14, 1, "one large bright round disc located left",
             {F::kBar, F::kCross}),
        task("disc-small-anywhere", F::kDisc, P::kAnywhere, 0.04, 0.08, 2, "one small bright round disc in the image",
             {F::kBar, F::kCross}),
        task("disc-large-anywhere", F::kDisc, P::kAnywhere, 0.08, 0.14, 0, "one large bright round disc",
             {F::kBar, F::kCross}),
        task("disc-small-right", F::kDisc, P::kRightHalf, 0.04, 0.08, 1, "one small bright round disc located right",
             {F::kBar, F::kCross}),
    };
  } else if (name == "heterogeneous") {
    tasks = {
        task("disc", F::kDisc, P::kLeftHalf, 0.04, 0.08, 0, "one small bright round disc left", {F::kBar, F::kRing}),
        task("bar", F::kBar, P::kRightHalf, 0.04, 0.08, 1, "a thin long bar", {F::kDisc, F::kCross}),
        task("ring", F::kRing, P::kCenter, 0.06, 0.12, 2, "hollow circular ring center", {F::kDisc, F::kBar}),
        task("blob", F::kBlob, P::kAnywhere, 0.05, 0.1, 0, "big irregular lumpy blob anywhere",
             {F::kEllipse, F::kCross}),
        task("cross", F::kCross, P::kCenter, 0.05, 0.1, 1, "crossed plus shaped cross middle", {F::kRing, F::kBlob}),
    };
  } else if (name == "mixed") {
    tasks = {
        task("disc-left", F::kDisc, P::kLeftHalf, 0.04, 0.08, 0, "one small bright round disc located left",
             {F::kBar, F::kRing}),
        task("bar", F::kBar, P::kRightHalf, 0.04, 0.08, 1, "a thin long bar", {F::kDisc, F::kRing}),
        task("disc-right", F::kDisc, P::kRightHalf, 0.04, 0.08, 2, "one small bright round disc located right",
             {F::kBar, F::kRing}),
        task("ring", F::kRing, P::kCenter, 0.06, 0.12, 0, "hollow circular ring center", {F::kDisc, F::kBar}),
        task("disc-large-left", F::kDisc, P::kLeftHalf, 0.08, 0.14, 1, "one large bright round disc located left",
             {F::kBar, F::kRing}),
    };
  } else {
    throw PreconditionError("unknown suite '" + name + "'");
  }
  for (std::size_t i = 0; i < tasks.size(); ++i) tasks[i].seed = derive_seed(seed, Stream::kTaskGen, 1000 + i);
  return tasks;
}

std::map<std::string, std::vector<TaskSpec>> default_suites(std::uint64_t seed) {
  std::map<std::string, std::vector<TaskSpec>> out;
  for (const auto& name : suite_names()) out.emplace(name, default_suite(name, seed));
  return out;
}

}  // namespace clforge
