#include "clforge/pretrain.hpp"

#include <map>
#include <mutex>

#include "clforge/losses.hpp"
#include "clforge/metrics.hpp"
#include "clforge/optimizer.hpp"
#include "clforge/rng.hpp"
#include "clforge/taskgen.hpp"

namespace clforge {

namespace {

double pretext_dice(const BiModalSegmenter& model, std::span<const std::size_t> prompt,
                    std::span<const Sample> samples) {
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& s : samples) {
    const Tensor logits = model.forward(s.image, prompt);
    total += dice(binarize(logits.data()), s.mask.data());
  }
  return total / static_cast<double>(samples.size());
}

}  // namespace

PretrainResult pretrain_base(const PretrainConfig& c) {
  if (c.batch_size == 0 || c.train_samples == 0 || c.val_samples == 0) {
    throw PreconditionError("pretrain_base: empty batch or dataset");
  }
  BiModalSegmenter model = BiModalSegmenter::initialize(c.model, c.seed);
  const auto all = generate_pretext(c.train_samples + c.val_samples, c.seed);
  const std::span<const Sample> train(all.data(), c.train_samples);
  const std::span<const Sample> val(all.data() + c.train_samples, c.val_samples);
  const auto prompt = Vocabulary::standard().tokenize(kPretextPrompt);

  model.set_all_trainable();
  AdamW opt(model.parameters(), {c.lr, 0.0});
  Rng rng = make_rng(c.seed, Stream::kPretrain, 1u << 30);
  std::vector<Tensor> images, masks;
  for (std::size_t step = 0; step < c.steps; ++step) {
    images.clear();
    masks.clear();
    for (std::size_t b = 0; b < c.batch_size; ++b) {
      const auto& s = train[uniform_index(rng, train.size())];
      images.push_back(to_patches(s.image, c.model));
      masks.push_back(to_patches(s.mask, c.model));
    }
    const Tensor logits = model.forward_patches(concat(images), prompt, nullptr);
    const Tensor target = concat(masks);
    const Tensor loss =
        add(seg_loss(logits, target, c.batch_size), dice_loss(logits, target, c.batch_size));
    backward(loss);
    opt.step();
  }
  model.freeze_base();

  PretrainResult r{std::move(model)};
  r.pretext_dice = pretext_dice(r.model, prompt, val);
  r.gate_passed = r.pretext_dice > kPretextDiceGate;
  return r;
}

const BiModalSegmenter& pretrained_base(std::size_t steps, std::uint64_t seed) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::uint64_t>, BiModalSegmenter> cache;
  std::lock_guard lock(mu);
  const auto key = std::make_pair(steps, seed);
  if (const auto it = cache.find(key); it != cache.end()) return it->second;
  PretrainConfig c;
  c.steps = steps;
  c.seed = seed;
  PretrainResult r = pretrain_base(c);
  if (!r.gate_passed) {
    throw PreconditionError("pretrained base failed the sanity gate: pretext Dice " + std::to_string(r.pretext_dice) +
                            " <= " + std::to_string(kPretextDiceGate));
  }
  return cache.emplace(key, std::move(r.model)).first->second;
}

}  // namespace clforge
