#pragma once

#include "csrr/corpus.hpp"
#include "csrr/model.hpp"
#include "csrr/training.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace csrr::training {

// Binary layout (little-endian):
//   "CSRRCKPT" | u32 version | u64 header bytes | JSON header
//   | per parameter: value, adam m, adam v (row-major doubles)
//   | "CSRR-END"
// The JSON header carries the model config, vocabulary tokens and their
// fingerprint, global step, best validation loss and the parameter table.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
  model::Model model;
  TrainState state;
  corpus::Vocabulary vocab;
};

// Writes via a temporary file and rename, so an existing checkpoint at
// `path` is only replaced by a complete one.
void save_checkpoint(const std::filesystem::path& path, const model::Model& model, const TrainState& state,
                     const corpus::Vocabulary& vocab);

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// FNV-1a of the file bytes, hex encoded.
std::string file_fingerprint(const std::filesystem::path& path);

}  // namespace csrr::training
