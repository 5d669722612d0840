// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/io.hpp"

#include <fstream>
#include <iterator>
#include <system_error>

#include "fbnprune/digest.hpp"
#include "fbnprune/error.hpp"

namespace fbnprune::io {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::Io, "cannot open " + path.string());
    }
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string read_text(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::Io, "cannot open " + path.string());
    }
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes_atomic(const std::filesystem::path & path, std::string_view bytes) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::filesystem::path tmp = path;
    tmp += ".partial";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            fail(ErrorKind::Io, "cannot write " + tmp.string());
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            out.close();
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            fail(ErrorKind::Io, "short write to " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        fail(ErrorKind::Io, "cannot rename into " + path.string());
    }
}

nlohmann::json read_json(const std::filesystem::path & path) {
    const std::string text = read_text(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error & e) {
        fail(ErrorKind::Format, path.string() + ": " + e.what());
    }
}

void write_json_atomic(const std::filesystem::path & path, const nlohmann::json & j) {
    write_bytes_atomic(path, canonical_json(j) + "\n");
}

}  // namespace fbnprune::io
