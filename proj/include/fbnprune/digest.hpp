// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace fbnprune {

/// Lowercase hex SHA-256 of a byte range.
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path & path);

/// Compact, key-sorted serialization; the form hashed and written to disk.
std::string canonical_json(const nlohmann::json & j);

}  // namespace fbnprune
