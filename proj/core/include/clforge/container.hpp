#pragma once

// Checkpoint container: the magic "CLFORGE1", a little-endian uint64 length,
// a JSON index {version, tensors: [{name, shape, offset, count}], meta,
// checksum}, then the raw little-endian float64 payload. The checksum is
// FNV-1a 64 over the payload bytes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "clforge/tensor.hpp"

namespace clforge {

inline constexpr std::string_view kContainerMagic = "CLFORGE1";
inline constexpr int kContainerVersion = 1;

struct Container {
  NamedTensors tensors;
  nlohmann::json meta = nlohmann::json::object();
};

std::uint64_t fnv1a64(std::string_view bytes);

std::string encode_container(const Container& c);
// Throws FormatError on a bad magic, version, checksum, index, or truncation.
Container decode_container(std::string_view bytes);

void save_container(const std::filesystem::path& path, const Container& c);
Container load_container(const std::filesystem::path& path);

}  // namespace clforge
