#include "clforge/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "clforge/adapters.hpp"
#include "clforge/rng.hpp"

namespace clforge {

// ---- vocabulary -----------------------------------------------------------

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab({
      "<unk>",   "object",   "one",     "two",      "single",  "small",     "large",    "tiny",
      "medium",  "big",      "bright",  "dim",      "solid",   "hollow",    "striped",  "lumpy",
      "thin",    "thick",    "long",    "short",    "round",   "oval",      "circular", "irregular",
      "crossed", "plus",     "shaped",  "elongated", "textured", "smooth",   "disc",     "ellipse",
      "ring",    "bar",      "blob",    "cross",    "left",    "right",     "center",   "anywhere",
      "middle",  "upper",    "lower",   "located",  "in",      "the",       "image",    "of",
      "at",      "near",     "side",    "region",   "area",    "structure", "with",     "and",
      "a",       "shape",    "edge",    "border",   "white",   "grey",      "dark",     "faint",
  });
  return vocab;
}

std::size_t Vocabulary::id(std::string_view word) const {
  const auto it = std::find(words_.begin(), words_.end(), word);
  return it == words_.end() ? 0 : static_cast<std::size_t>(it - words_.begin());
}

bool Vocabulary::contains(std::string_view word) const {
  return std::find(words_.begin() + 1, words_.end(), word) != words_.end();
}

std::vector<std::size_t> Vocabulary::tokenize(std::string_view prompt) const {
  std::vector<std::size_t> ids;
  std::istringstream in{std::string(prompt)};
  std::string word;
  while (in >> word) ids.push_back(id(word));
  if (ids.empty()) throw PreconditionError("empty prompt");
  return ids;
}

// ---- layout helpers -------------------------------------------------------

Tensor to_patches(const Tensor& images, const ModelConfig& c) {
  const std::size_t side = c.image_size;
  if (images.rank() < 2 || images.shape()[images.rank() - 1] != side ||
      images.shape()[images.rank() - 2] != side) {
    throw ShapeError("to_patches: expected [..., " + std::to_string(side) + ", " + std::to_string(side) +
                     "], got " + shape_str(images.shape()));
  }
  const std::size_t n = images.numel() / c.pixels();
  const std::size_t p = c.patch_size;
  const std::size_t per_side = c.patches_per_side();
  std::vector<double> out(images.numel());
  const auto src = images.data();
  std::size_t k = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t base = s * c.pixels();
    for (std::size_t py = 0; py < per_side; ++py) {
      for (std::size_t px = 0; px < per_side; ++px) {
        for (std::size_t y = 0; y < p; ++y) {
          for (std::size_t x = 0; x < p; ++x) {
            out[k++] = src[base + (py * p + y) * side + px * p + x];
          }
        }
      }
    }
  }
  return Tensor({n * c.tokens(), c.patch_pixels()}, std::move(out));
}

Tensor from_patches(const Tensor& patches, const ModelConfig& c) {
  if (patches.rank() != 2 || patches.dim(1) != c.patch_pixels() || patches.dim(0) % c.tokens() != 0) {
    throw ShapeError("from_patches: bad patch tensor " + shape_str(patches.shape()));
  }
  const std::size_t n = patches.dim(0) / c.tokens();
  const std::size_t side = c.image_size;
  const std::size_t p = c.patch_size;
  const std::size_t per_side = c.patches_per_side();
  std::vector<double> out(patches.numel());
  const auto src = patches.data();
  std::size_t k = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t base = s * c.pixels();
    for (std::size_t py = 0; py < per_side; ++py) {
      for (std::size_t px = 0; px < per_side; ++px) {
        for (std::size_t y = 0; y < p; ++y) {
          for (std::size_t x = 0; x < p; ++x) {
            out[base + (py * p + y) * side + px * p + x] = src[k++];
          }
        }
      }
    }
  }
  if (n == 1) return Tensor({side, side}, std::move(out));
  return Tensor({n, side, side}, std::move(out));
}

// ---- model ----------------------------------------------------------------

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, -bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * normal(rng);
  return Tensor(std::move(shape), std::move(v));
}

constexpr const char* kSharedPrefixes[] = {"fusion.", "decoder."};

}  // namespace

BiModalSegmenter BiModalSegmenter::initialize(const ModelConfig& c, std::uint64_t seed) {
  if (c.image_size % c.patch_size != 0) throw PreconditionError("image size must be a multiple of patch size");
  Rng rng = make_rng(seed, Stream::kModelInit);
  BiModalSegmenter m;
  m.config_ = c;
  const std::size_t dv = c.vision_dim;
  const std::size_t dt = c.text_dim;
  const std::size_t pp = c.patch_pixels();
  auto fan_in = [](std::size_t k) { return 1.0 / std::sqrt(static_cast<double>(k)); };

  auto& p = m.params_;
  p["vision.patch_embed.weight"] = uniform_tensor({dv, pp}, fan_in(pp), rng);
  p["vision.patch_embed.bias"] = uniform_tensor({dv}, fan_in(pp), rng);
  p["vision.pos_embed"] = normal_tensor({c.tokens(), dv}, 0.1, rng);
  for (int blk = 0; blk < 2; ++blk) {
    const std::string pre = "vision.block" + std::to_string(blk) + ".";
    p[pre + "w1"] = uniform_tensor({2 * dv, dv}, fan_in(dv), rng);
    p[pre + "b1"] = uniform_tensor({2 * dv}, fan_in(dv), rng);
    p[pre + "w2"] = uniform_tensor({dv, 2 * dv}, fan_in(2 * dv), rng);
    p[pre + "b2"] = uniform_tensor({dv}, fan_in(2 * dv), rng);
  }
  p["text.embed"] = normal_tensor({Vocabulary::standard().size(), dt}, 1.0, rng);
  p["text.w1"] = uniform_tensor({2 * dt, dt}, fan_in(dt), rng);
  p["text.b1"] = uniform_tensor({2 * dt}, fan_in(dt), rng);
  p["text.w2"] = uniform_tensor({dt, 2 * dt}, fan_in(2 * dt), rng);
  p["text.b2"] = uniform_tensor({dt}, fan_in(2 * dt), rng);
  p["fusion.weight"] = uniform_tensor({2 * dv, dt}, fan_in(dt), rng);
  p["fusion.bias"] = Tensor::zeros({2 * dv});
  p["decoder.weight"] = uniform_tensor({pp, dv}, fan_in(dv), rng);
  p["decoder.bias"] = Tensor::zeros({pp});
  m.set_all_trainable();
  return m;
}

BiModalSegmenter::BiModalSegmenter(const BiModalSegmenter& other) : config_(other.config_) {
  for (const auto& [name, t] : other.params_) {
    Tensor copy = t.clone();
    copy.set_requires_grad(t.requires_grad());
    params_.emplace(name, std::move(copy));
  }
}

BiModalSegmenter& BiModalSegmenter::operator=(const BiModalSegmenter& other) {
  if (this != &other) *this = BiModalSegmenter(other);
  return *this;
}

bool BiModalSegmenter::is_shared(const ParamId& name) {
  return std::any_of(std::begin(kSharedPrefixes), std::end(kSharedPrefixes),
                     [&](const char* pre) { return name.rfind(pre, 0) == 0; });
}

NamedTensors BiModalSegmenter::base_parameters() const {
  NamedTensors out;
  for (const auto& [name, t] : params_) {
    if (!is_shared(name)) out.emplace(name, t);
  }
  return out;
}

NamedTensors BiModalSegmenter::shared_parameters() const {
  NamedTensors out;
  for (const auto& [name, t] : params_) {
    if (is_shared(name)) out.emplace(name, t);
  }
  return out;
}

std::vector<LoraTarget> BiModalSegmenter::lora_targets() const {
  std::vector<LoraTarget> out;
  for (const char* name : {"text.w1", "text.w2", "vision.block0.w1", "vision.block0.w2", "vision.block1.w1",
                           "vision.block1.w2"}) {
    const Tensor& w = params_.at(name);
    out.push_back({name, w.dim(0), w.dim(1)});
  }
  return out;
}

std::size_t BiModalSegmenter::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void BiModalSegmenter::freeze_base() {
  for (auto& [name, t] : params_) t.set_requires_grad(is_shared(name));
}

void BiModalSegmenter::set_all_trainable() {
  for (auto& [name, t] : params_) t.set_requires_grad(true);
}

bool BiModalSegmenter::base_frozen() const {
  return std::none_of(params_.begin(), params_.end(),
                      [](const auto& kv) { return !is_shared(kv.first) && kv.second.requires_grad(); });
}

Tensor BiModalSegmenter::weight(const ParamId& name, const LoraAdapter* adapter) const {
  const Tensor& w = params_.at(name);
  if (adapter != nullptr && adapter->find(name) != nullptr) return adapter->effective(name, w);
  return w;
}

Tensor BiModalSegmenter::linear(const Tensor& x, const ParamId& weight_name, const ParamId& bias_name,
                                const LoraAdapter* adapter) const {
  return add(matmul(x, transpose(weight(weight_name, adapter))), params_.at(bias_name));
}

Tensor BiModalSegmenter::text_features(std::span<const std::size_t> prompt, const LoraAdapter* adapter) const {
  if (prompt.empty()) throw PreconditionError("empty prompt");
  const std::size_t dt = config_.text_dim;
  Tensor tokens = gather_rows(params_.at("text.embed"), prompt);
  Tensor pooled = reshape(mean_rows(tokens), {1, dt});
  Tensor hidden = gelu(linear(pooled, "text.w1", "text.b1", adapter));
  return add(pooled, linear(hidden, "text.w2", "text.b2", adapter));
}

PromptEmbedding BiModalSegmenter::embed_text(std::string_view prompt) const {
  NoGradGuard no_grad;
  const auto ids = Vocabulary::standard().tokenize(prompt);
  const Tensor t = text_features(ids, nullptr);
  double norm = 0.0;
  for (double v : t.data()) norm += v * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw NumericError("text encoder produced a zero vector");
  PromptEmbedding e;
  e.vector.reserve(t.numel());
  for (double v : t.data()) e.vector.push_back(v / norm);
  return e;
}

Tensor BiModalSegmenter::forward_patches(const Tensor& patches, std::span<const std::size_t> prompt,
                                         const LoraAdapter* adapter) const {
  const std::size_t tokens = config_.tokens();
  const std::size_t dv = config_.vision_dim;
  if (patches.rank() != 2 || patches.dim(1) != config_.patch_pixels() || patches.dim(0) % tokens != 0) {
    throw ShapeError("forward: bad patch tensor " + shape_str(patches.shape()));
  }
  const std::size_t n = patches.dim(0) / tokens;

  Tensor film = linear(text_features(prompt, adapter), "fusion.weight", "fusion.bias", nullptr);
  Tensor gamma = reshape(slice_last(film, 0, dv), {dv});
  Tensor beta = reshape(slice_last(film, dv, dv), {dv});

  Tensor v = linear(patches, "vision.patch_embed.weight", "vision.patch_embed.bias", nullptr);
  v = reshape(add(reshape(v, {n, tokens, dv}), params_.at("vision.pos_embed")), {n * tokens, dv});
  for (int blk = 0; blk < 2; ++blk) {
    const std::string pre = "vision.block" + std::to_string(blk) + ".";
    Tensor hidden = gelu(linear(v, pre + "w1", pre + "b1", adapter));
    v = add(v, linear(hidden, pre + "w2", pre + "b2", adapter));
  }
  Tensor fused = add(mul(v, add_scalar(gamma, 1.0)), beta);
  return linear(gelu(fused), "decoder.weight", "decoder.bias", nullptr);
}

Tensor BiModalSegmenter::forward(const Tensor& image, std::span<const std::size_t> prompt,
                                 const LoraAdapter* adapter) const {
  if (image.rank() != 2 || image.dim(0) != config_.image_size || image.dim(1) != config_.image_size) {
    throw ShapeError("forward: expected a single " + std::to_string(config_.image_size) + "x" +
                     std::to_string(config_.image_size) + " image, got " + shape_str(image.shape()));
  }
  NoGradGuard no_grad;
  return from_patches(forward_patches(to_patches(image, config_), prompt, adapter), config_);
}

}  // namespace clforge
