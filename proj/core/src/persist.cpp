#include "clforge/persist.hpp"

#include <cstring>

#include "clforge/metrics.hpp"

namespace clforge {

namespace {

using nlohmann::json;

std::string key(const std::string& a, std::size_t i, const std::string& b) {
  return a + "/" + std::to_string(i) + "/" + b;
}

Tensor vector_tensor(const std::vector<double>& v) { return Tensor({v.size()}, v); }

const Tensor& need(const Container& c, const std::string& name) {
  const auto it = c.tensors.find(name);
  if (it == c.tensors.end()) throw FormatError("checkpoint is missing tensor " + name);
  return it->second;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

json trainable_json(const TrainableCount& c) {
  return {{"adapter_elements", c.adapter_elements},
          {"shared_elements", c.shared_elements},
          {"trainable", c.trainable},
          {"total", c.total},
          {"fraction", c.fraction}};
}

}  // namespace

Container state_to_container(const ContinualState& s) {
  Container c;
  json& meta = c.meta;
  meta["kind"] = "continual-state";
  meta["mode"] = to_string(s.mode);
  meta["config"] = to_json(s.config);
  const auto& mc = s.model.config();
  meta["model"] = {{"image_size", mc.image_size},
                   {"patch_size", mc.patch_size},
                   {"vision_dim", mc.vision_dim},
                   {"text_dim", mc.text_dim}};
  for (const auto& [name, t] : s.model.parameters()) c.tensors.emplace("model/" + name, t.clone());

  json adapters = json::array();
  for (const auto& [id, a] : s.bank.adapters()) {
    adapters.push_back({{"id", id}, {"rank", a.rank()}, {"alpha", a.alpha()}, {"owners", a.owner_tasks}});
    for (const auto& [target, f] : a.factors()) {
      c.tensors.emplace("adapter/" + std::to_string(id) + "/" + target + ".A", f.a.clone());
      c.tensors.emplace("adapter/" + std::to_string(id) + "/" + target + ".B", f.b.clone());
    }
  }
  meta["adapters"] = adapters;
  json assignment = json::object();
  for (const auto& [task, id] : s.bank.task_assignment()) assignment[std::to_string(task)] = id;
  meta["assignment"] = assignment;
  for (const auto& [task, p] : s.bank.task_prompts()) {
    c.tensors.emplace("bank_prompt/" + std::to_string(task), vector_tensor(p.vector));
  }

  json tasks = json::array();
  for (std::size_t i = 0; i < s.tasks.size(); ++i) {
    const auto& r = s.tasks[i];
    tasks.push_back({{"spec", to_json(r.spec)}, {"adapter", r.adapter}});
    c.tensors.emplace(key("task", i, "prompt"), vector_tensor(r.prompt.vector));
  }
  meta["tasks"] = tasks;

  json memories = json::array();
  for (std::size_t i = 0; i < s.memories.size(); ++i) {
    const auto& m = s.memories[i];
    json sources = json::array();
    std::vector<double> diff;
    for (std::size_t k = 0; k < m.entries.size(); ++k) {
      const auto& e = m.entries[k];
      sources.push_back(e.source_index);
      diff.push_back(e.difficulty);
      c.tensors.emplace(key("memory", i, std::to_string(k) + "/image"), e.image.clone());
      c.tensors.emplace(key("memory", i, std::to_string(k) + "/mask"), e.mask.clone());
    }
    if (!diff.empty()) c.tensors.emplace(key("memory", i, "difficulty"), vector_tensor(diff));
    c.tensors.emplace(key("memory", i, "weights"), Tensor({2}, {m.fisher_avg, m.replay_weight}));
    memories.push_back({{"task", m.task}, {"sources", sources}});
  }
  meta["memories"] = memories;

  json fishers = json::array();
  for (std::size_t i = 0; i < s.fishers.size(); ++i) {
    const auto& f = s.fishers[i];
    json names = json::array();
    for (const auto& [name, t] : f.values) {
      names.push_back(name);
      c.tensors.emplace(key("fisher", i, name), t.clone());
    }
    fishers.push_back({{"task", f.source_task}, {"samples", f.sample_count}, {"params", names}});
  }
  meta["fishers"] = fishers;
  json anchors = json::array();
  for (std::size_t i = 0; i < s.anchors.size(); ++i) {
    json names = json::array();
    for (const auto& [name, t] : s.anchors[i].values) {
      names.push_back(name);
      c.tensors.emplace(key("anchor", i, name), t.clone());
    }
    anchors.push_back({{"task", s.anchors[i].task}, {"params", names}});
  }
  meta["anchors"] = anchors;

  meta["results_order"] = s.results.task_order();
  meta["results_stages"] = s.results.stages();
  for (std::size_t st = 0; st < s.results.stages(); ++st) {
    c.tensors.emplace("results/" + std::to_string(st), vector_tensor(s.results.row(st)));
  }

  json epochs = json::array();
  for (const auto& e : s.epoch_log) {
    json hist = json::object();
    for (const auto& [t, n] : e.replay_histogram) hist[std::to_string(t)] = n;
    epochs.push_back({{"task", e.task}, {"epoch", e.epoch}, {"seg", e.seg_loss}, {"dice", e.dice_loss},
                      {"ewc", e.ewc_penalty}, {"val", e.val_dice}, {"replay", hist}});
  }
  meta["epoch_log"] = epochs;
  json allocations = json::array();
  for (const auto& a : s.allocations) allocations.push_back(to_json(a));
  meta["allocations"] = allocations;
  json trainable = json::array();
  for (const auto& t : s.trainable) trainable.push_back(trainable_json(t));
  meta["trainable"] = trainable;
  meta["monitor"] = {{"checks", s.monitor.checks}, {"violations", s.monitor.violations}};
  return c;
}

ContinualState state_from_container(const Container& c) {
  const json& meta = c.meta;
  try {
    if (meta.at("kind") != "continual-state") throw FormatError("container does not hold a continual state");
    ModelConfig mc;
    mc.image_size = meta.at("model").at("image_size");
    mc.patch_size = meta.at("model").at("patch_size");
    mc.vision_dim = meta.at("model").at("vision_dim");
    mc.text_dim = meta.at("model").at("text_dim");
    BiModalSegmenter model = BiModalSegmenter::initialize(mc, 0);
    for (auto& [name, t] : model.parameters()) {
      const Tensor& stored = need(c, "model/" + name);
      if (stored.shape() != t.shape()) throw FormatError("checkpoint parameter " + name + " has the wrong shape");
      const auto src = stored.data();
      std::copy(src.begin(), src.end(), t.mutable_data().begin());
    }
    const TrainConfig config = train_config_from_json(meta.at("config"));
    ContinualState s = make_state(std::move(model), parse_mode(meta.at("mode").get<std::string>()), config);

    std::map<AdapterId, LoraAdapter> adapters;
    const auto targets = s.model.lora_targets();
    for (const auto& a : meta.at("adapters")) {
      const AdapterId id = a.at("id");
      std::map<ParamId, LoraFactors> factors;
      for (const auto& t : targets) {
        const std::string base = "adapter/" + std::to_string(id) + "/" + t.name;
        factors[t.name] = {need(c, base + ".A").clone(), need(c, base + ".B").clone()};
      }
      LoraAdapter adapter(a.at("rank").get<std::size_t>(), a.at("alpha").get<double>(), std::move(factors));
      adapter.owner_tasks = a.at("owners").get<std::vector<TaskId>>();
      adapter.set_trainable(false);
      adapters.emplace(id, std::move(adapter));
    }
    std::map<TaskId, AdapterId> assignment;
    std::map<TaskId, PromptEmbedding> prompts;
    for (const auto& [task, id] : meta.at("assignment").items()) {
      const TaskId t = std::stoi(task);
      assignment[t] = id.get<AdapterId>();
      prompts[t] = PromptEmbedding{values(need(c, "bank_prompt/" + task))};
    }
    s.bank.restore(std::move(adapters), std::move(assignment), std::move(prompts));

    const auto& tasks = meta.at("tasks");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      TaskRecord r;
      r.spec = task_spec_from_json(tasks[i].at("spec"));
      r.tokens = Vocabulary::standard().tokenize(r.spec.prompt);
      r.prompt = PromptEmbedding{values(need(c, key("task", i, "prompt")))};
      r.adapter = tasks[i].at("adapter");
      s.tasks.push_back(std::move(r));
    }

    const auto& memories = meta.at("memories");
    for (std::size_t i = 0; i < memories.size(); ++i) {
      TaskMemory m;
      m.task = memories[i].at("task");
      const auto sources = memories[i].at("sources").get<std::vector<std::size_t>>();
      if (!sources.empty()) {
        const auto diff = need(c, key("memory", i, "difficulty")).data();
        if (diff.size() != sources.size()) throw FormatError("memory " + std::to_string(i) + ": difficulty count");
        for (std::size_t k = 0; k < sources.size(); ++k) {
          m.entries.push_back({need(c, key("memory", i, std::to_string(k) + "/image")).clone(),
                               need(c, key("memory", i, std::to_string(k) + "/mask")).clone(), m.task, diff[k],
                               sources[k]});
        }
      }
      const auto w = need(c, key("memory", i, "weights")).data();
      m.fisher_avg = w[0];
      m.replay_weight = w[1];
      s.memories.push_back(std::move(m));
    }

    const auto& fishers = meta.at("fishers");
    for (std::size_t i = 0; i < fishers.size(); ++i) {
      FisherMap f;
      f.source_task = fishers[i].at("task");
      f.sample_count = fishers[i].at("samples");
      for (const auto& name : fishers[i].at("params")) {
        f.values.emplace(name.get<std::string>(), need(c, key("fisher", i, name.get<std::string>())).clone());
      }
      s.fishers.push_back(std::move(f));
    }
    const auto& anchors = meta.at("anchors");
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      Anchor a;
      a.task = anchors[i].at("task");
      for (const auto& name : anchors[i].at("params")) {
        a.values.emplace(name.get<std::string>(), need(c, key("anchor", i, name.get<std::string>())).clone());
      }
      s.anchors.push_back(std::move(a));
    }

    ResultsMatrix results(meta.at("results_order").get<std::vector<std::string>>());
    const std::size_t stages = meta.at("results_stages");
    for (std::size_t st = 0; st < stages; ++st) results.record_stage(values(need(c, "results/" + std::to_string(st))));
    s.results = std::move(results);

    for (const auto& e : meta.at("epoch_log")) {
      EpochLog log;
      log.task = e.at("task");
      log.epoch = e.at("epoch");
      log.seg_loss = e.at("seg");
      log.dice_loss = e.at("dice");
      log.ewc_penalty = e.at("ewc");
      log.val_dice = e.at("val");
      for (const auto& [t, n] : e.at("replay").items()) log.replay_histogram[std::stoi(t)] = n.get<std::size_t>();
      s.epoch_log.push_back(std::move(log));
    }
    for (const auto& a : meta.at("allocations")) {
      AllocationLog log;
      log.task = a.at("task");
      log.kind = a.at("kind");
      log.adapter = a.at("adapter");
      if (!a.at("k_star").is_null()) log.k_star = a.at("k_star").get<TaskId>();
      log.similarity = a.at("similarity");
      s.allocations.push_back(std::move(log));
    }
    for (const auto& t : meta.at("trainable")) {
      s.trainable.push_back({t.at("adapter_elements"), t.at("shared_elements"), t.at("trainable"), t.at("total"),
                             t.at("fraction")});
    }
    s.monitor.checks = meta.at("monitor").at("checks");
    s.monitor.violations = meta.at("monitor").at("violations").get<std::vector<std::string>>();

    for (const auto& r : s.tasks) s.data.push_back(generate(r.spec));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint metadata: ") + e.what());
  }
}

void save_state(const std::filesystem::path& path, const ContinualState& state) {
  save_container(path, state_to_container(state));
}

ContinualState load_state(const std::filesystem::path& path) { return state_from_container(load_container(path)); }

// ---- dataset export -------------------------------------------------------

namespace {

std::string pack(std::span<const Sample> samples, bool masks) {
  std::string out;
  for (const auto& s : samples) {
    const auto d = (masks ? s.mask : s.image).data();
    out.append(reinterpret_cast<const char*>(d.data()), d.size_bytes());
  }
  return out;
}

std::vector<Sample> unpack(const std::string& images, const std::string& masks, std::size_t count,
                           const std::string& task) {
  const std::size_t per = kImageSize * kImageSize;
  if (images.size() != count * per * sizeof(double) || masks.size() != images.size()) {
    throw FormatError("dataset file size does not match the manifest for " + task);
  }
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> img(per), msk(per);
    std::memcpy(img.data(), images.data() + i * per * sizeof(double), per * sizeof(double));
    std::memcpy(msk.data(), masks.data() + i * per * sizeof(double), per * sizeof(double));
    Sample s;
    s.image = Tensor({kImageSize, kImageSize}, std::move(img));
    s.mask = Tensor({kImageSize, kImageSize}, std::move(msk));
    s.task = task;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

nlohmann::json export_dataset(const std::filesystem::path& dir, const std::vector<TaskSpec>& specs) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["version"] = 1;
  manifest["format"] = "float64-le";
  manifest["image_shape"] = {kImageSize, kImageSize};
  manifest["tasks"] = json::array();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const TaskData d = generate(specs[i]);
    json entry{{"spec", to_json(specs[i])}};
    const std::pair<const char*, const std::vector<Sample>*> splits[] = {
        {"train", &d.train}, {"val", &d.val}, {"test", &d.test}};
    for (const auto& [split, samples] : splits) {
      const std::string stem = std::to_string(i) + "_" + specs[i].name + "_" + split;
      const std::string images = pack(*samples, false);
      const std::string masks = pack(*samples, true);
      write_file_atomic(dir / (stem + "_images.f64"), images);
      write_file_atomic(dir / (stem + "_masks.f64"), masks);
      entry["splits"][split] = {{"count", samples->size()},
                                {"images", stem + "_images.f64"},
                                {"masks", stem + "_masks.f64"},
                                {"images_checksum", fnv1a64(images)},
                                {"masks_checksum", fnv1a64(masks)}};
    }
    manifest["tasks"].push_back(entry);
  }
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

std::vector<TaskData> import_dataset(const std::filesystem::path& dir) {
  const json manifest = json::parse(read_file(dir / "manifest.json"));
  std::vector<TaskData> out;
  try {
    for (const auto& entry : manifest.at("tasks")) {
      TaskData d;
      d.spec = task_spec_from_json(entry.at("spec"));
      for (const char* split : {"train", "val", "test"}) {
        const auto& info = entry.at("splits").at(split);
        const std::string images = read_file(dir / info.at("images").get<std::string>());
        const std::string masks = read_file(dir / info.at("masks").get<std::string>());
        if (fnv1a64(images) != info.at("images_checksum").get<std::uint64_t>() ||
            fnv1a64(masks) != info.at("masks_checksum").get<std::uint64_t>()) {
          throw FormatError(std::string("checksum mismatch in ") + split + " split of " + d.spec.name);
        }
        auto samples = unpack(images, masks, info.at("count"), d.spec.name);
        if (std::string(split) == "train") d.train = std::move(samples);
        else if (std::string(split) == "val") d.val = std::move(samples);
        else d.test = std::move(samples);
      }
      out.push_back(std::move(d));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed dataset manifest: ") + e.what());
  }
  return out;
}

}  // namespace clforge
