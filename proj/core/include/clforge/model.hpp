#pragma once

// Toy bi-modal segmenter: 4x4 patches of a 32x32 image go through a patch
// embedding and two residual feed-forward blocks; a bag-of-words prompt goes
// through an embedding table and a residual MLP; the text feature produces a
// per-channel scale/shift (FiLM) on the vision tokens, and a per-patch head
// decodes 16 logits per token.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clforge/tensor.hpp"

namespace clforge {

class LoraAdapter;

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t vision_dim = 32;
  std::size_t text_dim = 32;

  std::size_t patch_pixels() const { return patch_size * patch_size; }
  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t tokens() const { return patches_per_side() * patches_per_side(); }
  std::size_t pixels() const { return image_size * image_size; }
};

// Closed prompt vocabulary. Unknown words map to the reserved <unk> id 0.
class Vocabulary {
 public:
  static const Vocabulary& standard();

  std::size_t size() const { return words_.size(); }
  std::size_t id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(std::size_t id) const { return words_.at(id); }
  // Whitespace tokenisation. Throws PreconditionError on an empty prompt.
  std::vector<std::size_t> tokenize(std::string_view prompt) const;

 private:
  explicit Vocabulary(std::vector<std::string> words);
  std::vector<std::string> words_;
};

// Unit-norm output of the frozen text encoder.
struct PromptEmbedding {
  std::vector<double> vector;
};

// A LoRA-adaptable matrix of the backbone, stored [d, k] = [out, in].
struct LoraTarget {
  ParamId name;
  std::size_t rows;  // d
  std::size_t cols;  // k
};

class BiModalSegmenter {
 public:
  static BiModalSegmenter initialize(const ModelConfig& config, std::uint64_t seed);

  BiModalSegmenter(const BiModalSegmenter& other);
  BiModalSegmenter& operator=(const BiModalSegmenter& other);
  BiModalSegmenter(BiModalSegmenter&&) noexcept = default;
  BiModalSegmenter& operator=(BiModalSegmenter&&) noexcept = default;

  const ModelConfig& config() const { return config_; }

  // patches: [n * tokens, patch_pixels] in patch order (see to_patches).
  // Returns [n * tokens, patch_pixels] logits in the same order.
  Tensor forward_patches(const Tensor& patches, std::span<const std::size_t> prompt,
                         const LoraAdapter* adapter) const;
  // image: [H, W]. Returns [H, W] logits.
  Tensor forward(const Tensor& image, std::span<const std::size_t> prompt,
                 const LoraAdapter* adapter = nullptr) const;

  // Text feature before normalisation, [1, text_dim].
  Tensor text_features(std::span<const std::size_t> prompt, const LoraAdapter* adapter) const;
  PromptEmbedding embed_text(std::string_view prompt) const;

  NamedTensors& parameters() { return params_; }
  const NamedTensors& parameters() const { return params_; }
  const Tensor& parameter(const ParamId& name) const { return params_.at(name); }
  NamedTensors base_parameters() const;
  NamedTensors shared_parameters() const;
  static bool is_shared(const ParamId& name);
  std::vector<LoraTarget> lora_targets() const;
  std::size_t parameter_count() const;

  // Base parameters stop receiving gradients; shared ones keep them.
  void freeze_base();
  void set_all_trainable();
  bool base_frozen() const;

 private:
  BiModalSegmenter() = default;
  Tensor weight(const ParamId& name, const LoraAdapter* adapter) const;
  Tensor linear(const Tensor& x, const ParamId& weight_name, const ParamId& bias_name,
                const LoraAdapter* adapter) const;

  ModelConfig config_;
  NamedTensors params_;
};

// Image <-> patch-order layout. Images are [n, H, W] or [H, W]; the patch
// layout is [n * tokens, patch_pixels] with tokens in row-major patch order.
Tensor to_patches(const Tensor& images, const ModelConfig& config);
Tensor from_patches(const Tensor& patches, const ModelConfig& config);

}  // namespace clforge
