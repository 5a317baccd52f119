#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "clforge/container.hpp"
#include "clforge/taskgen.hpp"
#include "clforge/trainer.hpp"

namespace clforge {

// Everything in a ContinualState except the generated datasets, which are
// regenerated from the stored task specs on load.
Container state_to_container(const ContinualState& state);
ContinualState state_from_container(const Container& c);

void save_state(const std::filesystem::path& path, const ContinualState& state);
ContinualState load_state(const std::filesystem::path& path);

// Writes manifest.json plus one raw little-endian float64 file per split for
// images ([n, 32, 32]) and masks. Returns the manifest.
nlohmann::json export_dataset(const std::filesystem::path& dir, const std::vector<TaskSpec>& specs);
// Reads an exported directory back, verifying the per-file checksums.
std::vector<TaskData> import_dataset(const std::filesystem::path& dir);

}  // namespace clforge
