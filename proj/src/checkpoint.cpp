// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/checkpoint.hpp"

#include <fmt/format.h>

#include "fbnprune/binary.hpp"
#include "fbnprune/digest.hpp"
#include "fbnprune/error.hpp"
#include "fbnprune/io.hpp"

namespace fbnprune::model {

std::string serialize_checkpoint(const ModelCheckpoint & ckpt) {
    validate_shapes(ckpt);
    auto & weights = const_cast<ModelWeights &>(ckpt.weights);
    const std::vector<TensorRef> table = tensors(weights);

    nlohmann::json header;
    header["config"] = to_json(ckpt.config);
    header["meta"] = ckpt.meta;
    header["tensors"] = nlohmann::json::array();
    for (const TensorRef & t : table) {
        header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
    }
    const std::string header_text = canonical_json(header);

    std::string out;
    out.append(kCheckpointMagic, 4);
    binary::put<std::uint32_t>(out, kCheckpointVersion);
    binary::put<std::uint64_t>(out, header_text.size());
    out += header_text;
    for (const TensorRef & t : table) {
        binary::put_floats(out, t.data);
    }
    return out;
}

ModelCheckpoint deserialize_checkpoint(std::string_view bytes) {
    binary::Reader in(bytes, "checkpoint");
    if (in.take(4) != std::string_view(kCheckpointMagic, 4)) {
        fail(ErrorKind::Format, "checkpoint: bad magic / format version (not an FBNP file)");
    }
    const auto version = in.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        fail(ErrorKind::Format,
             fmt::format("checkpoint: unsupported format version {} (expected {})", version, kCheckpointVersion));
    }
    const auto header_len = in.get<std::uint64_t>();
    if (header_len > in.remaining()) {
        fail(ErrorKind::Format, "checkpoint: truncated header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(in.take(static_cast<std::size_t>(header_len)));
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::Format, std::string("checkpoint: malformed header: ") + e.what());
    }

    ModelCheckpoint ckpt;
    try {
        ckpt.config = model_config_from_json(header.at("config"));
        ckpt.meta = header.value("meta", nlohmann::json::object());
        ckpt.weights = zero_weights(ckpt.config);
        const auto & table = header.at("tensors");
        for (const auto & entry : table) {
            const std::string name = entry.at("name").get<std::string>();
            if (name.ends_with(".down_bias")) {
                const std::size_t l = std::stoul(name.substr(7, name.find('.', 7) - 7));
                if (l >= ckpt.weights.layers.size()) {
                    fail(ErrorKind::Format, "checkpoint: bias for unknown layer " + name);
                }
                ckpt.weights.layers[l].down_bias = VectorF::Zero(ckpt.config.d_model);
            }
        }
        std::vector<TensorRef> expected = tensors(ckpt.weights);
        if (expected.size() != table.size()) {
            fail(ErrorKind::Format, fmt::format("checkpoint: tensor table has {} entries, config implies {}",
                                                table.size(), expected.size()));
        }
        for (std::size_t i = 0; i < expected.size(); ++i) {
            const std::string name = table[i].at("name").get<std::string>();
            const auto shape = table[i].at("shape").get<std::vector<std::int64_t>>();
            if (name != expected[i].name || shape != expected[i].shape) {
                fail(ErrorKind::Format, fmt::format("checkpoint: tensor {} {} does not match config ({} {})", name,
                                                    nlohmann::json(shape).dump(), expected[i].name,
                                                    nlohmann::json(expected[i].shape).dump()));
            }
        }
        std::size_t payload = 0;
        for (const TensorRef & t : expected) payload += t.data.size_bytes();
        if (payload != in.remaining()) {
            fail(ErrorKind::Format, fmt::format("checkpoint: payload is {} bytes, header implies {}", in.remaining(),
                                                payload));
        }
        for (TensorRef & t : expected) {
            in.get_floats(t.data);
        }
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::Format, std::string("checkpoint: malformed header: ") + e.what());
    } catch (const Error & e) {
        if (e.kind() == ErrorKind::Config) {
            fail(ErrorKind::Format, std::string("checkpoint: ") + e.what());
        }
        throw;
    }
    return ckpt;
}

void save_checkpoint(const ModelCheckpoint & ckpt, const std::filesystem::path & path) {
    io::write_bytes_atomic(path, serialize_checkpoint(ckpt));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path & path) {
    const std::string bytes = io::read_text(path);
    return deserialize_checkpoint(bytes);
}

std::string checkpoint_digest(const ModelCheckpoint & ckpt) {
    return sha256_hex(serialize_checkpoint(ckpt));
}

}  // namespace fbnprune::model
