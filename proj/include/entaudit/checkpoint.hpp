#pragma once

// Model checkpoint file: one JSON header line (version, model config,
// class count, group directory with byte offsets) followed by raw
// little-endian float32 arrays, one per parameter group in name order.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "entaudit/model.hpp"

namespace entaudit {

struct ModelCheckpoint {
    ModelConfig config;
    int n_classes = 0;  // 0 when no classifier head is attached
    Parameters params;
};

namespace detail {

static_assert(sizeof(float) == 4, "float must be 32-bit");

inline bool host_is_little_endian() {
    const std::uint16_t probe = 1;
    unsigned char b;
    std::memcpy(&b, &probe, 1);
    return b == 1;
}

inline void write_f32_le(std::ostream& out, const std::vector<double>& values) {
    std::vector<unsigned char> buf(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        float f = static_cast<float>(values[i]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        buf[i * 4 + 0] = static_cast<unsigned char>(bits & 0xff);
        buf[i * 4 + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
        buf[i * 4 + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
        buf[i * 4 + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void read_f32_le(std::istream& in, std::vector<double>& values, std::size_t count) {
    std::vector<unsigned char> buf(count * 4);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size())
        throw std::runtime_error("checkpoint: truncated parameter data");
    values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = static_cast<std::uint32_t>(buf[i * 4 + 0]) |
                             (static_cast<std::uint32_t>(buf[i * 4 + 1]) << 8) |
                             (static_cast<std::uint32_t>(buf[i * 4 + 2]) << 16) |
                             (static_cast<std::uint32_t>(buf[i * 4 + 3]) << 24);
        float f;
        std::memcpy(&f, &bits, 4);
        values[i] = static_cast<double>(f);
    }
}

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
    return {{"n_layers", cfg.n_layers},
            {"n_heads", cfg.n_heads},
            {"d_model", cfg.d_model},
            {"d_ff", cfg.d_ff},
            {"max_seq", cfg.max_seq},
            {"vocab_size", cfg.vocab_size},
            {"dropout_attn", cfg.dropout_attn},
            {"dropout_classifier", cfg.dropout_classifier}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.max_seq = j.at("max_seq").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.dropout_attn = j.at("dropout_attn").get<double>();
    cfg.dropout_classifier = j.at("dropout_classifier").get<double>();
    cfg.validate();
    return cfg;
}

}  // namespace detail

inline void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
    nlohmann::json header;
    header["version"] = 1;
    header["config"] = detail::config_to_json(ckpt.config);
    header["n_classes"] = ckpt.n_classes;
    nlohmann::json groups = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, mat] : ckpt.params) {  // map order = name order
        groups.push_back({{"name", name},
                          {"rows", mat.rows},
                          {"cols", mat.cols},
                          {"offset", offset}});
        offset += mat.size() * 4;
    }
    header["groups"] = std::move(groups);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << header.dump() << "\n";
    for (const auto& [name, mat] : ckpt.params) detail::write_f32_le(out, mat.a);
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline ModelCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string header_line;
    if (!std::getline(in, header_line))
        throw std::runtime_error("load_checkpoint: missing header in " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_checkpoint: bad header in " + path + ": " + e.what());
    }
    if (header.at("version").get<int>() != 1)
        throw std::runtime_error("load_checkpoint: unsupported version in " + path);

    ModelCheckpoint ckpt;
    ckpt.config = detail::config_from_json(header.at("config"));
    ckpt.n_classes = header.at("n_classes").get<int>();

    const auto expected = parameter_group_names(ckpt.config, ckpt.n_classes);
    const auto& groups = header.at("groups");
    if (groups.size() != expected.size())
        throw std::runtime_error("load_checkpoint: group count mismatch in " + path);

    const std::streampos data_start = in.tellg();
    for (const auto& g : groups) {
        std::string name = g.at("name").get<std::string>();
        auto [er, ec] = group_shape(ckpt.config, ckpt.n_classes, name);
        std::size_t rows = g.at("rows").get<std::size_t>();
        std::size_t cols = g.at("cols").get<std::size_t>();
        if (rows != er || cols != ec)
            throw std::runtime_error("load_checkpoint: shape mismatch for group " + name);
        std::size_t offset = g.at("offset").get<std::size_t>();
        in.seekg(data_start + static_cast<std::streamoff>(offset));
        Mat m(rows, cols);
        detail::read_f32_le(in, m.a, rows * cols);
        if (!all_finite(m))
            throw std::runtime_error("load_checkpoint: non-finite values in group " + name);
        ckpt.params.emplace(std::move(name), std::move(m));
    }
    for (const auto& name : expected)
        if (!ckpt.params.count(name))
            throw std::runtime_error("load_checkpoint: missing group " + name);
    return ckpt;
}

}  // namespace entaudit
