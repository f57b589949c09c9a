#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "docmoe/trainer.hpp"

namespace docmoe {

class CheckpointError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};
/// Manifest written by an unknown format version (or of another kind).
class FormatVersionError : public CheckpointError {
    using CheckpointError::CheckpointError;
};
/// Manifest and blobs disagree: truncation, size or checksum mismatch, a
/// missing or repeated tensor.
class CorruptionError : public CheckpointError {
    using CheckpointError::CheckpointError;
};

inline constexpr int kCheckpointFormatVersion = 1;

/// One named tensor of a container. `kind` is "param" or "buffer".
struct ContainerEntry {
    std::string network;
    std::string layer;
    Tensor<float>* tensor = nullptr;
    std::string kind = "param";
};

/// Directory with manifest.json + params.bin (+ optim.bin when `optim` is given).
/// `extra` keys are merged into the manifest.
void write_container(const std::filesystem::path& dir, const std::string& kind, const std::vector<ContainerEntry>& entries,
                     const nlohmann::json& extra, const std::vector<float>* optim = nullptr);

struct ContainerContents {
    nlohmann::json manifest;
    std::vector<float> optim;  // empty when the container has no optim.bin
};

/// Reads the manifest only, checking format_version and kind.
nlohmann::json read_manifest(const std::filesystem::path& dir, const std::string& kind);

/// Fills every entry from params.bin. All entries must be listed exactly once
/// with matching shapes; nothing is written unless the whole blob checks out.
ContainerContents read_container(const std::filesystem::path& dir, const std::string& kind,
                                 const std::vector<ContainerEntry>& entries);

std::vector<ContainerEntry> container_entries(ModelBundle<float>& bundle);

struct LoadedCheckpoint {
    ModelBundle<float> bundle;
    long step = 0;
    nlohmann::json train_config;
    std::optional<TrainerSnapshot<float>> trainer;
    std::string data_rng;
};

/// `trainer` (optimiser moments, history buffers, rng states) is optional so a
/// bare bundle can be stored too.
void save_checkpoint(const std::filesystem::path& dir, ModelBundle<float>& bundle, long step,
                     const nlohmann::json& train_config, const TrainerSnapshot<float>* trainer = nullptr,
                     const std::string& data_rng = {});
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// Total bytes of the files of a container directory.
std::uintmax_t container_bytes(const std::filesystem::path& dir);

}  // namespace docmoe
