#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hydroseq/data.hpp"
#include "hydroseq/models.hpp"

namespace hydroseq {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian float64");

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 256;
    std::size_t n_iterations = 1000;
    std::size_t seq_len = 365;
    std::uint64_t seed = 0;
    double clip_norm = 1.0;
    std::size_t eval_every = 50;
    HeadMode head_mode = HeadMode::seq2seq;
    bool plain_mse = false;  // ablation switch; default is basin-weighted

    void validate() const {
        if (!(learning_rate > 0)) throw ParameterError("TrainConfig: learning_rate must be > 0");
        if (!(clip_norm > 0)) throw ParameterError("TrainConfig: clip_norm must be > 0");
        if (batch_size < 1 || seq_len < 1 || eval_every < 1)
            throw ParameterError("TrainConfig: sizes must be >= 1");
    }
};

struct Checkpoint {
    ModelSpec spec;
    ModelWeights weights;
    NormalizationStats stats;
    TrainConfig config;
    std::uint64_t seed = 0;
    std::size_t iteration = 0;
};

// ---- JSON helpers ----------------------------------------------------------

inline nlohmann::json to_json(const ModelSpec& s) {
    return {{"variant", to_string(s.variant)}, {"input_dim", s.input_dim},
            {"hidden_dim", s.hidden_dim},     {"d_model", s.d_model},
            {"n_heads", s.n_heads},           {"n_layers", s.n_layers},
            {"d_ff", s.d_ff},                 {"dropout_rate", s.dropout_rate},
            {"seq_len", s.seq_len}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.variant = variant_from_string(j.at("variant").get<std::string>());
    s.input_dim = j.at("input_dim").get<std::size_t>();
    s.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    s.d_model = j.at("d_model").get<std::size_t>();
    s.n_heads = j.at("n_heads").get<std::size_t>();
    s.n_layers = j.at("n_layers").get<std::size_t>();
    s.d_ff = j.at("d_ff").get<std::size_t>();
    s.dropout_rate = j.at("dropout_rate").get<double>();
    s.seq_len = j.at("seq_len").get<std::size_t>();
    return s;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"n_iterations", c.n_iterations},
            {"seq_len", c.seq_len},
            {"seed", c.seed},
            {"clip_norm", c.clip_norm},
            {"eval_every", c.eval_every},
            {"head_mode", c.head_mode == HeadMode::seq2seq ? "seq2seq" : "seq2one"},
            {"plain_mse", c.plain_mse}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.n_iterations = j.at("n_iterations").get<std::size_t>();
    c.seq_len = j.at("seq_len").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.eval_every = j.at("eval_every").get<std::size_t>();
    c.head_mode = j.at("head_mode").get<std::string>() == "seq2one" ? HeadMode::seq2one
                                                                    : HeadMode::seq2seq;
    c.plain_mse = j.value("plain_mse", false);
    return c;
}

inline nlohmann::json to_json(const NormalizationStats& s) {
    nlohmann::json j;
    j["product"] = s.product;
    for (const VarStats& v : s.forcing) j["forcing"].push_back({{"mean", v.mean}, {"std", v.std}});
    j["forcing"] = j.value("forcing", nlohmann::json::array());
    for (const VarStats& v : s.attributes)
        j["attributes"].push_back({{"mean", v.mean}, {"std", v.std}});
    j["attributes"] = j.value("attributes", nlohmann::json::array());
    j["discharge"] = nlohmann::json::object();
    for (const auto& [id, v] : s.discharge) j["discharge"][id] = {{"mean", v.mean}, {"std", v.std}};
    return j;
}

inline NormalizationStats norm_stats_from_json(const nlohmann::json& j) {
    NormalizationStats s;
    s.product = j.at("product").get<std::string>();
    for (const auto& e : j.at("forcing"))
        s.forcing.push_back({e.at("mean").get<double>(), e.at("std").get<double>()});
    for (const auto& e : j.at("attributes"))
        s.attributes.push_back({e.at("mean").get<double>(), e.at("std").get<double>()});
    for (const auto& [id, e] : j.at("discharge").items())
        s.discharge[id] = {e.at("mean").get<double>(), e.at("std").get<double>()};
    return s;
}

// ---- Binary checkpoint file -------------------------------------------------
//
// Layout: magic "HSQCKPT1", u64 header length, header (JSON: spec, config,
// stats, seed, iteration), u64 tensor count, then per tensor: u64 name length,
// name bytes, u64 rank, u64 dims..., raw little-endian float64 payload.

namespace detail {
inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw IoError("checkpoint: truncated file");
    return v;
}
}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'H', 'S', 'Q', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write '" + path + "'");
    os.write(kCheckpointMagic, 8);
    nlohmann::json header = {{"spec", to_json(ckpt.spec)},
                             {"config", to_json(ckpt.config)},
                             {"stats", to_json(ckpt.stats)},
                             {"seed", ckpt.seed},
                             {"iteration", ckpt.iteration}};
    const std::string hs = header.dump();
    detail::write_u64(os, hs.size());
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    detail::write_u64(os, ckpt.weights.size());
    for (const auto& [name, t] : ckpt.weights) {
        detail::write_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u64(os, t.shape().rank());
        for (std::size_t d : t.shape().dims) detail::write_u64(os, d);
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!os) throw IoError("write failure on '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw IoError("'" + path + "': not a checkpoint file or version mismatch");
    const std::uint64_t hlen = detail::read_u64(is);
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw IoError("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: corrupt header: ") + e.what());
    }
    Checkpoint ckpt;
    ckpt.spec = model_spec_from_json(header.at("spec"));
    ckpt.config = train_config_from_json(header.at("config"));
    ckpt.stats = norm_stats_from_json(header.at("stats"));
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.iteration = header.at("iteration").get<std::size_t>();
    const std::uint64_t n_tensors = detail::read_u64(is);
    for (std::uint64_t i = 0; i < n_tensors; ++i) {
        const std::uint64_t nlen = detail::read_u64(is);
        std::string name(nlen, '\0');
        is.read(name.data(), static_cast<std::streamsize>(nlen));
        const std::uint64_t rank = detail::read_u64(is);
        std::vector<std::size_t> dims(rank);
        for (std::uint64_t d = 0; d < rank; ++d) dims[d] = detail::read_u64(is);
        Shape shape(dims);
        std::vector<double> data(shape.numel());
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!is) throw IoError("checkpoint: truncated tensor '" + name + "'");
        ckpt.weights[name] = Tensor::from_data(shape, std::move(data), /*requires_grad=*/true);
    }
    is.peek();
    if (!is.eof()) throw IoError("checkpoint: trailing bytes in '" + path + "'");
    return ckpt;
}

}  // namespace hydroseq
