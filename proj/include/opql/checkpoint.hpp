#pragma once

#include <filesystem>

#include "opql/encoder.hpp"

namespace opql {

// Versioned binary checkpoint: magic "OPQL", u32 format version, the encoder
// config block, then named tensors as little-endian f64 with explicit shapes.
// Byte-for-byte reproducible for identical params.

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

// Loud failure when two configs disagree (checkpoint vs expected run config).
void require_same_config(const EncoderConfig& expected, const EncoderConfig& actual);

}  // namespace opql
