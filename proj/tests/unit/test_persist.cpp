#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"

#include "clforge/container.hpp"
#include "clforge/metrics.hpp"
#include "clforge/persist.hpp"
#include "clforge/rng.hpp"

using namespace clforge;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("clforge_persist_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

Container sample_container() {
  Container c;
  c.tensors.emplace("a", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  c.tensors.emplace("b.w", Tensor({1}, {-0.25}));
  c.meta = {{"note", "x"}, {"n", 3}};
  return c;
}

std::size_t payload_offset(const std::string& bytes) {
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + kContainerMagic.size(), sizeof len);
  return kContainerMagic.size() + sizeof len + len;
}

const RunResult& small_run() {
  static const RunResult r = [] {
    auto specs = default_suite("mixed", 43);
    specs.resize(3);
    for (auto& s : specs) {
      s.n_train = 20;
      s.n_val = 6;
      s.n_test = 6;
    }
    TrainConfig c;
    c.batch_size = 10;
    c.max_epochs = 2;
    return run_sequence(BiModalSegmenter::initialize({}, 5), specs, c, Mode::kFull);
  }();
  return r;
}

}  // namespace

TEST_CASE("FNV-1a reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("container round-trips tensors and meta") {
  const auto c = sample_container();
  const auto back = decode_container(encode_container(c));
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors.at("a").same_values(c.tensors.at("a")));
  CHECK(back.tensors.at("a").shape() == Shape{2, 3});
  CHECK(back.meta == c.meta);
  CHECK(encode_container(back) == encode_container(c));
}

TEST_CASE("corrupt containers are rejected") {
  const std::string good = encode_container(sample_container());

  SUBCASE("bad magic") {
    auto b = good;
    b[0] = 'X';
    CHECK_THROWS_AS(decode_container(b), FormatError);
  }
  SUBCASE("unknown version") {
    auto c = good;
    const auto at = c.find("\"version\":1");
    REQUIRE(at != std::string::npos);
    c[at + std::strlen("\"version\":")] = '9';
    CHECK_THROWS_WITH_AS(decode_container(c), doctest::Contains("version"), FormatError);
  }
  SUBCASE("flipped payload byte") {
    auto b = good;
    b[payload_offset(b) + 3] ^= 0x10;
    CHECK_THROWS_WITH_AS(decode_container(b), doctest::Contains("checksum"), FormatError);
  }
  SUBCASE("every truncation") {
    for (std::size_t n = 0; n < good.size(); ++n) CHECK_THROWS_AS(decode_container(good.substr(0, n)), FormatError);
  }
  SUBCASE("trailing bytes") { CHECK_THROWS_AS(decode_container(good + "z"), FormatError); }
}

TEST_CASE("property: random containers round-trip bit-exactly") {
  Rng rng(71);
  for (int c = 0; c < 100; ++c) {
    Container k;
    const std::size_t n = uniform_index(rng, 4);
    for (std::size_t i = 0; i < n; ++i) {
      const Shape shape{1 + uniform_index(rng, 3), 1 + uniform_index(rng, 4)};
      std::vector<double> v(shape_numel(shape));
      for (auto& x : v) x = uniform(rng, -1e6, 1e6);
      k.tensors.emplace("t" + std::to_string(i), Tensor(shape, v));
    }
    const auto bytes = encode_container(k);
    const auto back = decode_container(bytes);
    CHECK(back.tensors.size() == n);
    for (const auto& [name, t] : k.tensors) CHECK(back.tensors.at(name).same_values(t));
    CHECK(encode_container(back) == bytes);
  }
}

TEST_CASE("checkpoint round-trip restores the run") {
  const auto& first = small_run().state;
  const auto dir = scratch_dir("state");
  save_state(dir / "state.ckpt", first);
  const auto restored = load_state(dir / "state.ckpt");

  CHECK(restored.results == first.results);
  CHECK(restored.mode == first.mode);
  CHECK(restored.tasks.size() == first.tasks.size());
  CHECK(restored.bank.adapters().size() == first.bank.adapters().size());
  CHECK(restored.memories.size() == first.memories.size());
  CHECK(restored.fishers.size() == first.fishers.size());
  CHECK(epoch_log_csv(restored.epoch_log) == epoch_log_csv(first.epoch_log));
  for (const auto& [name, t] : first.model.parameters()) CHECK(restored.model.parameter(name).same_values(t));
  CHECK(encode_container(state_to_container(restored)) == encode_container(state_to_container(first)));

  // Datasets are regenerated from the specs, so re-evaluation matches.
  const auto& last = first.results.row(first.results.stages() - 1);
  for (std::size_t i = 0; i < restored.tasks.size(); ++i) {
    const auto& rec = restored.tasks[i];
    CHECK(evaluate_dice(restored.model, &restored.bank.adapter(rec.adapter), rec.tokens, restored.data[i].test) ==
          last[i]);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("a truncated checkpoint file fails to load") {
  const auto dir = scratch_dir("trunc");
  save_state(dir / "s.ckpt", small_run().state);
  const auto bytes = read_file(dir / "s.ckpt");
  std::ofstream(dir / "s.ckpt", std::ios::binary | std::ios::trunc).write(bytes.data(), bytes.size() / 2);
  CHECK_THROWS_AS(load_state(dir / "s.ckpt"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset export and import agree with generation") {
  auto specs = default_suite("heterogeneous", 43);
  specs.resize(2);
  for (auto& s : specs) {
    s.n_train = 7;
    s.n_val = 3;
    s.n_test = 3;
  }
  const auto dir = scratch_dir("dataset");
  const auto manifest = export_dataset(dir, specs);
  CHECK(manifest["tasks"].size() == 2);
  const auto back = import_dataset(dir);
  REQUIRE(back.size() == 2);
  for (std::size_t t = 0; t < 2; ++t) {
    const auto want = generate(specs[t]);
    CHECK(to_json(back[t].spec) == to_json(specs[t]));
    REQUIRE(back[t].train.size() == want.train.size());
    for (std::size_t i = 0; i < want.train.size(); ++i) {
      CHECK(back[t].train[i].image.same_values(want.train[i].image));
      CHECK(back[t].train[i].mask.same_values(want.train[i].mask));
    }
  }

  // A flipped byte in any split file is caught.
  const auto file = dir / manifest["tasks"][1]["splits"]["val"]["masks"].get<std::string>();
  auto bytes = read_file(file);
  bytes[5] ^= 0x01;
  std::ofstream(file, std::ios::binary | std::ios::trunc).write(bytes.data(), bytes.size());
  CHECK_THROWS_AS(import_dataset(dir), FormatError);
  std::filesystem::remove_all(dir);
}
