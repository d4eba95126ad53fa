#pragma once

#include "geoformer/model.hpp"
#include "geoformer/optim.hpp"
#include "geoformer/rng.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace geoformer {

// File layout (all integers little-endian):
//   "GEOF"  u32 version  u64 header_len  header_len bytes of JSON
//   u64 tensor_count, then per tensor:
//     u32 name_len  name (UTF-8)  u32 rank  u64 dims[rank]  f32 values[prod(dims)]
//   u32 CRC32 of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<float> values;

    friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

struct Checkpoint {
    ModelConfig model;
    std::int64_t step = 0;
    std::int64_t optimizer_steps = 0;
    std::string rng_state;
    /// Free-form metadata (train config, losses); round-trips verbatim.
    nlohmann::json extra = nlohmann::json::object();
    /// Parameters first, then "adam.m.<name>" and "adam.v.<name>" when the
    /// optimizer state was captured.
    std::vector<TensorRecord> tensors;

    static Checkpoint capture(const GptModel<float>& model, const AdamW<float>* optimizer, std::int64_t step,
                              const Rng* rng, nlohmann::json extra = nlohmann::json::object());

    /// Builds a model with the stored configuration and weights.
    GptModel<float> make_model() const;
    void restore_weights(GptModel<float>& model) const;
    /// Returns false when the checkpoint carries no optimizer moments.
    bool restore_optimizer(const GptModel<float>& model, AdamW<float>& optimizer) const;
    std::optional<Rng> restore_rng() const;

    const TensorRecord* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws CheckpointError on a bad magic, unknown version, truncation, or
/// CRC mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace geoformer
