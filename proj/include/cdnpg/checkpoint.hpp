#pragma once

// Binary model snapshots. Layout:
//   8 bytes   magic "CDNPGCK1"
//   8 bytes   manifest length (unsigned, little endian)
//   manifest  JSON: model configuration plus ordered tensor names/shapes
//   data      float32 little-endian blobs, concatenated in manifest order

#include "cdnpg/transformer.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace cdnpg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'C', 'D', 'N', 'P', 'G', 'C', 'K', '1'};

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"vocab_size", c.vocab_size},
                          {"hidden", c.hidden},
                          {"layers", c.layers},
                          {"heads", c.heads},
                          {"ffn_dim", c.ffn_dim},
                          {"max_len", c.max_len},
                          {"dropout", c.dropout},
                          {"mask_mode", to_string(c.mask_mode)},
                          {"epsilon", c.epsilon},
                          {"renormalize", c.renormalize},
                          {"ga_enabled", c.ga_enabled}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.mask_mode = mask_mode_from_string(j.at("mask_mode").get<std::string>());
    c.epsilon = j.at("epsilon").get<std::size_t>();
    c.renormalize = j.at("renormalize").get<bool>();
    c.ga_enabled = j.at("ga_enabled").get<bool>();
    return c;
}

namespace detail {

inline nlohmann::json read_checkpoint_manifest(std::ifstream& f, const std::string& path) {
    char magic[8];
    f.read(magic, sizeof magic);
    if (!f || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!f) throw std::runtime_error("checkpoint: unexpected end of file in '" + path + "'");
    if (len == 0 || len > (std::uint64_t{1} << 30))
        throw std::runtime_error("checkpoint: implausible manifest length in '" + path + "'");
    std::string text(len, '\0');
    f.read(text.data(), static_cast<std::streamsize>(len));
    if (!f) throw std::runtime_error("checkpoint: unexpected end of file in '" + path + "'");
    nlohmann::json manifest = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (manifest.is_discarded())
        throw std::runtime_error("checkpoint: manifest is not valid JSON in '" + path + "'");
    if (manifest.value("format", 1) != 1)
        throw std::runtime_error("checkpoint: unsupported format version in '" + path + "'");
    return manifest;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& m) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");

    const auto params = m.named_parameters();
    nlohmann::json manifest;
    manifest["format"] = 1;
    manifest["config"] = config_to_json(m.config());
    auto& tensors = manifest["tensors"];
    tensors = nlohmann::json::array();
    for (const auto& [name, t] : params)
        tensors.push_back(nlohmann::json{{"name", name}, {"shape", t.shape()}});

    const std::string text = manifest.dump();
    const std::uint64_t len = text.size();
    f.write(kCheckpointMagic, sizeof kCheckpointMagic);
    f.write(reinterpret_cast<const char*>(&len), sizeof len);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));

    std::vector<float> buf;
    for (const auto& [name, t] : params) {
        const auto& d = t.data();
        buf.resize(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) buf[i] = static_cast<float>(d[i]);
        f.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!f) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

inline ModelConfig load_checkpoint_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    return config_from_json(detail::read_checkpoint_manifest(f, path).at("config"));
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    const nlohmann::json manifest = detail::read_checkpoint_manifest(f, path);

    Model<T> m(config_from_json(manifest.at("config")), /*seed=*/0);
    auto params = m.named_parameters();
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != params.size())
        throw std::runtime_error("checkpoint: expected " + std::to_string(params.size()) +
                                 " tensors, found " + std::to_string(tensors.size()));

    std::vector<float> buf;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string name = tensors[i].at("name").get<std::string>();
        const Shape shape = tensors[i].at("shape").get<Shape>();
        if (name != params[i].first)
            throw std::runtime_error("checkpoint: tensor '" + name + "' where '" +
                                     params[i].first + "' was expected");
        if (shape != params[i].second.shape())
            throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " +
                                     shape_str(shape) + ", expected " +
                                     shape_str(params[i].second.shape()));
        buf.resize(shape_numel(shape));
        f.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!f)
            throw std::runtime_error("checkpoint: unexpected end of file in '" + path + "'");
        auto& dst = params[i].second.data();
        for (std::size_t j = 0; j < buf.size(); ++j) dst[j] = static_cast<T>(buf[j]);
    }
    if (f.peek() != std::ifstream::traits_type::eof())
        throw std::runtime_error("checkpoint: trailing bytes in '" + path + "'");
    return m;
}

}  // namespace cdnpg
