#pragma once

#include <filesystem>
#include <optional>

#include "detox/model.hpp"

namespace detox {

inline constexpr int kCheckpointFormatVersion = 1;

// One JSON document holding the model config plus base weights, an adapter,
// or both. Loading validates every tensor shape against the config.
struct Checkpoint {
  ModelConfig config;
  std::optional<TransformerWeights> weights;
  std::optional<LoraAdapter> adapter;
};

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const TransformerWeights* weights, const LoraAdapter* adapter);
Checkpoint load_checkpoint(const std::filesystem::path& path);

TransformerWeights load_weights(const std::filesystem::path& path);
LoraAdapter load_adapter(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace detox
