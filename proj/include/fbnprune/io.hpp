// SPDX-License-Identifier: Apache-2.0
//
// Small file helpers. Writes go through a temporary sibling and a rename so
// that a failed stage never leaves a half-written artifact under the final name.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace fbnprune::io {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path & path);
std::string read_text(const std::filesystem::path & path);

void write_bytes_atomic(const std::filesystem::path & path, std::string_view bytes);

nlohmann::json read_json(const std::filesystem::path & path);
/// Writes canonical JSON followed by a newline.
void write_json_atomic(const std::filesystem::path & path, const nlohmann::json & j);

}  // namespace fbnprune::io
