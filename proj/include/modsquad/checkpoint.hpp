#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>

#include "modsquad/config.hpp"
#include "modsquad/mi.hpp"
#include "modsquad/moe.hpp"

namespace modsquad {

inline constexpr const char* kCheckpointVersion = "modsquad-ckpt-v1";

// A checkpoint directory holds manifest.json and params.bin: every parameter
// as little-endian float32, packed in manifest order.
struct Checkpoint {
  ModSquadModel model;
  std::optional<Tensor> log_var;
  // Set for standalone pruned models.
  std::optional<std::size_t> task_id;
  json extra;
};

void save_checkpoint(const std::filesystem::path& dir, const ModSquadModel& model,
                     const Tensor* log_var = nullptr, const json& extra = json::object(),
                     std::optional<std::size_t> task_id = std::nullopt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Bytes of the parameter blob.
std::size_t checkpoint_blob_size(const std::filesystem::path& dir);

}  // namespace modsquad
