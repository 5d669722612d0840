// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout (all integers little-endian):
//
//   "FBNP" | u32 version | u64 header_len | header JSON | f32 payloads
//
// The header is canonical JSON {config, meta, tensors:[{name, shape}]} and the
// payloads follow in table order with no padding.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "fbnprune/model.hpp"

namespace fbnprune::model {

inline constexpr char kCheckpointMagic[4] = {'F', 'B', 'N', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const ModelCheckpoint & ckpt);
ModelCheckpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const ModelCheckpoint & ckpt, const std::filesystem::path & path);
ModelCheckpoint load_checkpoint(const std::filesystem::path & path);

/// SHA-256 of the serialized checkpoint.
std::string checkpoint_digest(const ModelCheckpoint & ckpt);

}  // namespace fbnprune::model
