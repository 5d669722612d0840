// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/digest.hpp"

#include <array>
#include <fstream>

#include <openssl/evp.h>

#include "fbnprune/error.hpp"

namespace fbnprune {

namespace {

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
            fail(ErrorKind::Io, "sha256: cannot initialize digest context");
        }
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256 &) = delete;
    Sha256 & operator=(const Sha256 &) = delete;

    void update(const void * data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }

    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, out.data(), &len);
        static constexpr char digits[] = "0123456789abcdef";
        std::string s;
        s.reserve(2 * len);
        for (unsigned int i = 0; i < len; ++i) {
            s.push_back(digits[out[i] >> 4]);
            s.push_back(digits[out[i] & 0xf]);
        }
        return s;
    }

private:
    EVP_MD_CTX * ctx_;
};

}  // namespace

std::string sha256_hex(std::span<const unsigned char> bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::string sha256_hex(std::string_view bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::string sha256_file(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::Io, "cannot open " + path.string());
    }
    Sha256 h;
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return h.hex();
}

std::string canonical_json(const nlohmann::json & j) {
    // nlohmann::json objects are std::map-backed, so dump() is already key-sorted
    return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict);
}

}  // namespace fbnprune
