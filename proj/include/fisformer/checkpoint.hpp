#pragma once

// Binary checkpoint, all integers and floats little-endian:
//
//   "FISF"                      4-byte magic
//   u32 version                 currently 1
//   u32 n, n bytes              model config as `key = value` lines
//   u32 tensor count
//   per tensor:
//     u32 n, n bytes            name
//     u32 rank, rank x u32      dims
//     prod(dims) x f32          row-major payload
//   u32 crc32                   zlib CRC-32 of every preceding byte
//
// Payloads are 32-bit whatever precision the model was trained in.

#include "fisformer/config.hpp"
#include "fisformer/model.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fisformer {

inline constexpr char kCheckpointMagic[4] = {'F', 'I', 'S', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> values;

    bool operator==(const TensorRecord&) const = default;
};

struct Checkpoint {
    ModelConfig config;
    std::vector<TensorRecord> tensors;

    const TensorRecord* find(std::string_view name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return &t;
        }
        return nullptr;
    }
};

inline std::string serialize_model_config(const ModelConfig& c) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "d_model = " << c.d_model << '\n'
       << "layers = " << c.layers << '\n'
       << "rules = " << c.rules << '\n'
       << "interaction = " << to_string(c.interaction) << '\n'
       << "mf_kind = " << to_string(c.mf_kind) << '\n'
       << "ffn_hidden = " << c.ffn_hidden << '\n'
       << "lookback = " << c.lookback << '\n'
       << "horizon = " << c.horizon << '\n'
       << "n_vars = " << c.n_vars << '\n'
       << "share_mf_across_tokens = " << (c.share_mf_across_tokens ? "true" : "false") << '\n'
       << "epsilon = " << c.epsilon << '\n'
       << "dropout = " << c.dropout << '\n'
       << "layernorm_eps = " << c.layernorm_eps << '\n';
    return os.str();
}

inline ModelConfig parse_model_config(std::string_view text) {
    ModelConfig c;
    for (const auto& [k, v] : detail::parse_key_values(text, "checkpoint config")) {
        std::uint64_t u = 0;
        double d = 0.0;
        bool b = false;
        auto need = [&](bool ok) {
            if (!ok) throw ConfigError("checkpoint config: bad value '" + v + "' for '" + k + "'");
        };
        if (k == "d_model") need(detail::parse_size(v, u)), c.d_model = u;
        else if (k == "layers") need(detail::parse_size(v, u)), c.layers = u;
        else if (k == "rules") need(detail::parse_size(v, u)), c.rules = u;
        else if (k == "interaction") c.interaction = parse_interaction(v);
        else if (k == "mf_kind") c.mf_kind = parse_mf_kind(v);
        else if (k == "ffn_hidden") need(detail::parse_size(v, u)), c.ffn_hidden = u;
        else if (k == "lookback") need(detail::parse_size(v, u)), c.lookback = u;
        else if (k == "horizon") need(detail::parse_size(v, u)), c.horizon = u;
        else if (k == "n_vars") need(detail::parse_size(v, u)), c.n_vars = u;
        else if (k == "share_mf_across_tokens") need(detail::parse_bool(v, b)), c.share_mf_across_tokens = b;
        else if (k == "epsilon") need(detail::parse_double(v, d)), c.epsilon = d;
        else if (k == "dropout") need(detail::parse_double(v, d)), c.dropout = d;
        else if (k == "layernorm_eps") need(detail::parse_double(v, d)), c.layernorm_eps = d;
        else throw ConfigError("checkpoint config: unknown key '" + k + "'");
    }
    return c;
}

/// Names of the fields that differ between two model configs, comma-separated.
inline std::string config_differences(const ModelConfig& a, const ModelConfig& b) {
    const auto la = detail::parse_key_values(serialize_model_config(a), "a");
    const auto lb = detail::parse_key_values(serialize_model_config(b), "b");
    std::string out;
    for (std::size_t n = 0; n < la.size(); ++n) {
        if (la[n].second != lb[n].second) {
            if (!out.empty()) out += ", ";
            out += la[n].first + " (" + la[n].second + " vs " + lb[n].second + ")";
        }
    }
    return out;
}

template <typename T>
Checkpoint make_checkpoint(const ModelConfig& cfg, const ModelParams<T>& params,
                           std::vector<TensorRecord> extra = {}) {
    check_params_match(params, cfg);
    Checkpoint ck;
    ck.config = cfg;
    for (const auto& r : param_refs(params)) {
        TensorRecord t;
        t.name = r.name;
        for (auto d : r.dims) t.dims.push_back(static_cast<std::uint32_t>(d));
        t.values.reserve(r.data.size());
        for (T x : r.data) t.values.push_back(static_cast<float>(x));
        ck.tensors.push_back(std::move(t));
    }
    for (auto& t : extra) ck.tensors.push_back(std::move(t));
    return ck;
}

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

inline void put_bytes(std::vector<std::uint8_t>& out, std::string_view s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint32_t u32() {
        need(4, "integer");
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes_[pos_ + b]) << (8 * b);
        pos_ += 4;
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n, "string");
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw ConfigError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                              std::to_string(pos_));
        }
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    detail::put_u32(out, kCheckpointVersion);
    detail::put_bytes(out, serialize_model_config(ck.config));
    detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& t : ck.tensors) {
        std::size_t count = 1;
        for (auto d : t.dims) count *= d;
        if (count != t.values.size()) {
            throw ShapeError("tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                             " values but dims imply " + std::to_string(count));
        }
        detail::put_bytes(out, t.name);
        detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) detail::put_u32(out, d);
        for (float f : t.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
    const auto crc = static_cast<std::uint32_t>(::crc32(0L, out.data(), static_cast<uInt>(out.size())));
    detail::put_u32(out, crc);
    return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw ConfigError("not a checkpoint (bad magic bytes)");
    }
    const std::size_t body = bytes.size() - 4;
    detail::ByteReader tail(bytes.subspan(body));
    const std::uint32_t stored = tail.u32();
    const auto actual = static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(body)));
    if (stored != actual) throw ConfigError("checkpoint checksum mismatch (file is corrupted)");

    detail::ByteReader in(bytes.subspan(4, body - 4));
    const std::uint32_t version = in.u32();
    if (version != kCheckpointVersion) {
        throw ConfigError("unsupported checkpoint version " + std::to_string(version) + " (this build reads " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ck;
    ck.config = parse_model_config(in.str());
    const std::uint32_t count = in.u32();
    for (std::uint32_t n = 0; n < count; ++n) {
        TensorRecord t;
        t.name = in.str();
        const std::uint32_t rank = in.u32();
        std::size_t size = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            t.dims.push_back(in.u32());
            size *= t.dims.back();
        }
        if (size > (body - in.pos()) / 4) throw ConfigError("checkpoint truncated in tensor '" + t.name + "'");
        t.values.resize(size);
        for (auto& v : t.values) v = in.f32();
        ck.tensors.push_back(std::move(t));
    }
    if (in.pos() != body - 4) throw ConfigError("checkpoint has trailing bytes before the checksum");
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    const auto bytes = encode_checkpoint(ck);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write checkpoint '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

/// Rebuilds model parameters, refusing any config or shape disagreement with `expected`.
template <typename T>
ModelParams<T> params_from_checkpoint(const Checkpoint& ck, const ModelConfig& expected) {
    if (!(ck.config == expected)) {
        throw ConfigError("checkpoint was trained with a different model config: " +
                          config_differences(ck.config, expected));
    }
    ModelParams<T> params = init_model_params<T>(expected, 0);
    for (auto& r : param_refs(params)) {
        const TensorRecord* t = ck.find(r.name);
        if (!t) throw ConfigError("checkpoint lacks tensor '" + r.name + "'");
        std::vector<std::size_t> dims(t->dims.begin(), t->dims.end());
        if (dims != r.dims) throw ShapeError("checkpoint tensor '" + r.name + "' has the wrong shape");
        for (std::size_t n = 0; n < r.data.size(); ++n) r.data[n] = static_cast<T>(t->values[n]);
    }
    return params;
}

inline std::vector<TensorRecord> normalizer_records(const Normalizer& norm) {
    auto rec = [](std::string name, const Eigen::RowVectorXd& v) {
        TensorRecord t{std::move(name), {static_cast<std::uint32_t>(v.size())}, {}};
        for (Eigen::Index n = 0; n < v.size(); ++n) t.values.push_back(static_cast<float>(v[n]));
        return t;
    };
    return {rec("data.norm_mean", norm.mean), rec("data.norm_std", norm.stddev)};
}

inline Normalizer normalizer_from_checkpoint(const Checkpoint& ck) {
    const auto* m = ck.find("data.norm_mean");
    const auto* s = ck.find("data.norm_std");
    if (!m || !s || m->values.size() != s->values.size()) {
        throw ConfigError("checkpoint carries no normalizer statistics");
    }
    Normalizer norm;
    norm.mean.resize(static_cast<Eigen::Index>(m->values.size()));
    norm.stddev.resize(norm.mean.size());
    for (std::size_t n = 0; n < m->values.size(); ++n) {
        norm.mean[static_cast<Eigen::Index>(n)] = m->values[n];
        norm.stddev[static_cast<Eigen::Index>(n)] = s->values[n];
    }
    return norm;
}

}  // namespace fisformer
