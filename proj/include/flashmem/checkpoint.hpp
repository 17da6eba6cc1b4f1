#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flashmem/backbone.hpp"
#include "flashmem/consolidator.hpp"
#include "flashmem/common.hpp"

namespace flashmem {

// Checkpoint layout (little-endian):
//   magic "FMEM" | version u32 | config blob length u32 | UTF-8 JSON config |
//   repeated tensor records: name length u16, name bytes, dtype tag u8
//   (0=f32, 1=f64), ndim u8, ndim x u64 dims, raw row-major data.

namespace detail {

constexpr char kMagic[4] = {'F', 'M', 'E', 'M'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
constexpr std::uint8_t dtype_tag() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 0 : 1;
}

template <typename V>
void write_pod(std::ostream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is, const char* field) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw format_error(std::string("checkpoint: truncated while reading ") + field);
    return v;
}

inline nlohmann::json backbone_config_json(const BackboneConfig& c) {
    return {{"n_layers", c.n_layers},     {"d_model", c.d_model},
            {"n_heads", c.n_heads},       {"d_head", c.d_head},
            {"vocab_size", c.vocab_size}, {"max_positions", c.max_positions},
            {"rope_base", c.rope_base}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
    BackboneConfig c;
    c.n_layers = j.at("n_layers");
    c.d_model = j.at("d_model");
    c.n_heads = j.at("n_heads");
    c.d_head = j.at("d_head");
    c.vocab_size = j.at("vocab_size");
    c.max_positions = j.at("max_positions");
    c.rope_base = j.at("rope_base");
    return c;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, Backbone<T>& backbone, Consolidator<T>* consolidator = nullptr) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("checkpoint: cannot open '" + path + "' for writing");
    os.write(detail::kMagic, 4);
    detail::write_pod(os, detail::kVersion);
    nlohmann::json cfg;
    cfg["backbone"] = detail::backbone_config_json(backbone.cfg);
    if (consolidator) {
        cfg["consolidator"] = {{"n_layers", consolidator->cfg.n_layers},
                               {"n_memory_tokens", consolidator->cfg.n_memory_tokens},
                               {"d_model", consolidator->cfg.d_model}};
    }
    const std::string blob = cfg.dump();
    detail::write_pod(os, static_cast<std::uint32_t>(blob.size()));
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    std::vector<Parameter<T>*> params = backbone.parameters();
    if (consolidator) {
        auto cp = consolidator->parameters();
        params.insert(params.end(), cp.begin(), cp.end());
    }
    for (const Parameter<T>* p : params) {
        detail::write_pod(os, static_cast<std::uint16_t>(p->name.size()));
        os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        detail::write_pod(os, detail::dtype_tag<T>());
        detail::write_pod(os, static_cast<std::uint8_t>(p->value.shape.size()));
        for (std::size_t dim : p->value.shape) detail::write_pod(os, static_cast<std::uint64_t>(dim));
        os.write(reinterpret_cast<const char*>(p->value.data.data()),
                 static_cast<std::streamsize>(p->value.size() * sizeof(T)));
    }
    if (!os) throw format_error("checkpoint: write failed for '" + path + "'");
}

template <typename T>
struct LoadedCheckpoint {
    Backbone<T> backbone;
    std::optional<Consolidator<T>> consolidator;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("checkpoint: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, detail::kMagic, 4) != 0)
        throw format_error("checkpoint: bad magic bytes (expected FMEM)");
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != detail::kVersion)
        throw format_error("checkpoint: unsupported version " + std::to_string(version));
    const auto blob_len = detail::read_pod<std::uint32_t>(is, "config blob length");
    std::string blob(blob_len, '\0');
    is.read(blob.data(), blob_len);
    if (!is) throw format_error("checkpoint: truncated while reading config blob");
    nlohmann::json cfg;
    try {
        cfg = nlohmann::json::parse(blob);
    } catch (const nlohmann::json::exception& e) {
        throw format_error(std::string("checkpoint: invalid config blob: ") + e.what());
    }

    // Collect tensor records.
    std::map<std::string, Tensor<T>> tensors;
    while (true) {
        std::uint16_t name_len;
        is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (is.eof()) break;
        if (!is) throw format_error("checkpoint: truncated while reading name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw format_error("checkpoint: truncated while reading tensor name");
        const auto tag = detail::read_pod<std::uint8_t>(is, "dtype tag");
        if (tag != detail::dtype_tag<T>())
            throw format_error("checkpoint: dtype tag mismatch for tensor '" + name + "'");
        const auto ndim = detail::read_pod<std::uint8_t>(is, "ndim");
        Shape shape(ndim);
        for (std::uint8_t i = 0; i < ndim; ++i)
            shape[i] = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is, "dims"));
        std::vector<T> data(shape_numel(shape));
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
        if (!is) throw format_error("checkpoint: truncated while reading data of tensor '" + name + "'");
        tensors.emplace(name, Tensor<T>(std::move(shape), std::move(data)));
    }

    LoadedCheckpoint<T> out;
    out.backbone = Backbone<T>::init(detail::backbone_config_from_json(cfg.at("backbone")), 0);
    if (cfg.contains("consolidator")) {
        ConsolidatorConfig cc;
        cc.n_layers = cfg["consolidator"].at("n_layers");
        cc.n_memory_tokens = cfg["consolidator"].at("n_memory_tokens");
        cc.d_model = cfg["consolidator"].at("d_model");
        out.consolidator = Consolidator<T>::inherit_weights(out.backbone, cc, 0);
    }
    std::vector<Parameter<T>*> params = out.backbone.parameters();
    if (out.consolidator) {
        auto cp = out.consolidator->parameters();
        params.insert(params.end(), cp.begin(), cp.end());
    }
    for (Parameter<T>* p : params) {
        auto it = tensors.find(p->name);
        if (it == tensors.end()) throw format_error("checkpoint: missing tensor '" + p->name + "'");
        if (it->second.shape != p->value.shape)
            throw format_error("checkpoint: shape mismatch for tensor '" + p->name + "'");
        p->value = it->second;
        p->grad = Tensor<T>::zeros(p->value.shape);
    }
    return out;
}

}  // namespace flashmem
