#include "clforge/container.hpp"

#include <bit>
#include <cstring>

#include "clforge/metrics.hpp"

namespace clforge {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string encode_container(const Container& c) {
  std::string payload;
  nlohmann::json index;
  index["version"] = kContainerVersion;
  index["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : c.tensors) {
    const auto data = t.data();
    index["tensors"].push_back(
        {{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}, {"count", data.size()}});
    payload.append(reinterpret_cast<const char*>(data.data()), data.size_bytes());
  }
  index["meta"] = c.meta;
  index["checksum"] = fnv1a64(payload);
  const std::string header = index.dump();

  std::string out(kContainerMagic);
  const std::uint64_t len = header.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof len);
  out += header;
  out += payload;
  return out;
}

Container decode_container(std::string_view bytes) {
  const std::size_t prefix = kContainerMagic.size() + sizeof(std::uint64_t);
  if (bytes.size() < prefix) throw FormatError("container truncated before the header");
  if (bytes.substr(0, kContainerMagic.size()) != kContainerMagic) throw FormatError("not a checkpoint container (bad magic)");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + kContainerMagic.size(), sizeof len);
  if (len > bytes.size() - prefix) throw FormatError("container truncated inside the index");

  nlohmann::json index;
  try {
    index = nlohmann::json::parse(bytes.substr(prefix, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container index is not valid JSON: ") + e.what());
  }
  try {
    if (index.at("version").get<int>() != kContainerVersion) {
      throw FormatError("unsupported container version " + index.at("version").dump());
    }
    const std::string_view payload = bytes.substr(prefix + len);
    Container c;
    std::size_t expected = 0;
    for (const auto& entry : index.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto count = entry.at("count").get<std::size_t>();
      if (shape_numel(shape) != count) throw FormatError("tensor " + name + ": shape does not match count");
      if (offset != expected) throw FormatError("tensor " + name + ": unexpected offset");
      if (count > (payload.size() - offset) / sizeof(double)) throw FormatError("container truncated in " + name);
      std::vector<double> values(count);
      std::memcpy(values.data(), payload.data() + offset, count * sizeof(double));
      expected = offset + count * sizeof(double);
      if (!c.tensors.emplace(name, Tensor(shape, std::move(values))).second) {
        throw FormatError("duplicate tensor " + name);
      }
    }
    if (expected != payload.size()) throw FormatError("container has trailing or missing payload bytes");
    if (fnv1a64(payload) != index.at("checksum").get<std::uint64_t>()) throw FormatError("container checksum mismatch");
    c.meta = index.value("meta", nlohmann::json::object());
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed container index: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("container holds a malformed tensor: ") + e.what());
  } catch (const NumericError& e) {
    throw FormatError(std::string("container holds non-finite values: ") + e.what());
  }
}

void save_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, encode_container(c));
}

Container load_container(const std::filesystem::path& path) { return decode_container(read_file(path)); }

}  // namespace clforge
