#pragma once

// Flat `key = value` run configuration. One key per line, `#` starts a comment, and
// every key must be one of the known schema entries below.

#include "fisformer/data.hpp"
#include "fisformer/metrics.hpp"
#include "fisformer/model.hpp"
#include "fisformer/training.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fisformer {

enum class ValueType { Size, UInt, Real, Bool, String, SizeList, Choice };

struct ConfigKey {
    const char* name;
    ValueType type;
    const char* default_value;
    const char* choices;  // '|'-separated, for Choice
    const char* help;
};

inline const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> schema = {
        {"data_path", ValueType::String, "synthetic", nullptr, "CSV file, or 'synthetic' for the seeded sinusoid"},
        {"has_date_column", ValueType::Bool, "true", nullptr, "first CSV column is a timestamp"},
        {"dataset_label", ValueType::String, "", nullptr, "name used in reports (default: file stem)"},
        {"synth_vars", ValueType::Size, "4", nullptr, "synthetic variate count"},
        {"synth_length", ValueType::Size, "2000", nullptr, "synthetic series length"},
        {"synth_seed", ValueType::UInt, "7", nullptr, "synthetic series seed"},
        {"split_train", ValueType::Size, "0", nullptr, "train rows (all three 0: 70/10/20)"},
        {"split_val", ValueType::Size, "0", nullptr, "validation rows"},
        {"split_test", ValueType::Size, "0", nullptr, "test rows"},
        {"lookback", ValueType::Size, "96", nullptr, "input window length"},
        {"horizon", ValueType::Size, "24", nullptr, "forecast length"},
        {"stride", ValueType::Size, "1", nullptr, "window stride for every split"},
        {"d_model", ValueType::Size, "64", nullptr, "token embedding width D"},
        {"layers", ValueType::Size, "2", nullptr, "encoder blocks L"},
        {"rules", ValueType::Size, "3", nullptr, "membership functions (rules) per feature"},
        {"interaction", ValueType::Choice, "fis", "fis|attention", "token interaction sub-layer"},
        {"mf_kind", ValueType::Choice, "gaussian", "gaussian|triangular|trapezoidal", "membership function"},
        {"ffn_hidden", ValueType::Size, "0", nullptr, "feed-forward width (0: 4 * d_model)"},
        {"share_mf_across_tokens", ValueType::Bool, "false", nullptr, "one MF bank for all tokens"},
        {"epsilon", ValueType::Real, "1e-8", nullptr, "firing normalization constant"},
        {"dropout", ValueType::Real, "0", nullptr, "dropout on interaction and FFN outputs"},
        {"layernorm_eps", ValueType::Real, "1e-8", nullptr, "layer norm variance floor"},
        {"lr", ValueType::Real, "1e-3", nullptr, "Adam learning rate"},
        {"batch_size", ValueType::Size, "32", nullptr, "windows per step"},
        {"epochs", ValueType::Size, "10", nullptr, "passes over the training windows"},
        {"seed", ValueType::UInt, "7", nullptr, "initialization and shuffling seed"},
        {"adam_beta1", ValueType::Real, "0.9", nullptr, ""},
        {"adam_beta2", ValueType::Real, "0.999", nullptr, ""},
        {"adam_eps", ValueType::Real, "1e-8", nullptr, ""},
        {"grad_clip", ValueType::Real, "0", nullptr, "max global gradient norm (0: off)"},
        {"precision", ValueType::Choice, "f64", "f32|f64", "training arithmetic"},
        {"metric_scale", ValueType::Choice, "normalized", "normalized|denormalized", "scale of MSE/MAE"},
        {"history_wall_clock", ValueType::Bool, "true", nullptr, "write elapsed seconds into history.csv"},
        {"gradcheck_samples", ValueType::Size, "50", nullptr, "parameters sampled by gradcheck"},
        {"gradcheck_tolerance", ValueType::Real, "1e-4", nullptr, "max relative error"},
        {"gradcheck_batch", ValueType::Size, "2", nullptr, "random windows in the gradcheck batch"},
        {"bench_tokens", ValueType::SizeList, "64,256,1024", nullptr, "token counts to time"},
        {"bench_dim", ValueType::Size, "64", nullptr, "feature width for bench"},
        {"bench_rules", ValueType::Size, "3", nullptr, "rules for bench"},
        {"bench_repeats", ValueType::Size, "7", nullptr, "timed repeats per size"},
    };
    return schema;
}

namespace detail {

inline const ConfigKey* find_key(std::string_view name) {
    for (const auto& k : config_schema()) {
        if (name == k.name) return &k;
    }
    return nullptr;
}

inline bool parse_size(std::string_view s, std::uint64_t& out) {
    s = trim(s);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size() && !s.empty();
}

inline bool parse_bool(std::string_view s, bool& out) {
    s = trim(s);
    if (s == "true" || s == "1" || s == "yes") return out = true, true;
    if (s == "false" || s == "0" || s == "no") return out = false, true;
    return false;
}

inline bool parse_double(std::string_view s, double& out) {
    s = trim(s);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size() && !s.empty() && std::isfinite(out);
}

inline void check_value(const ConfigKey& key, std::string_view value, const std::string& where) {
    bool ok = true;
    std::uint64_t u = 0;
    double d = 0.0;
    bool b = false;
    switch (key.type) {
        case ValueType::Size:
        case ValueType::UInt: ok = parse_size(value, u); break;
        case ValueType::Real: ok = parse_double(value, d); break;
        case ValueType::Bool: ok = parse_bool(value, b); break;
        case ValueType::String: break;
        case ValueType::SizeList:
            for (auto part : split_commas(value)) ok = ok && parse_size(part, u);
            break;
        case ValueType::Choice: {
            ok = false;
            std::string_view choices = key.choices;
            std::size_t start = 0;
            while (start <= choices.size()) {
                auto bar = choices.find('|', start);
                auto opt = choices.substr(start, bar == std::string_view::npos ? std::string_view::npos : bar - start);
                if (opt == value) ok = true;
                if (bar == std::string_view::npos) break;
                start = bar + 1;
            }
            break;
        }
    }
    if (!ok) {
        std::string msg = where + ": invalid value '" + std::string(value) + "' for key '" + key.name + "'";
        if (key.type == ValueType::Choice) msg += " (expected one of " + std::string(key.choices) + ")";
        throw ConfigError(msg);
    }
}

/// Parses `key = value` lines; returns pairs in file order.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text,
                                                                         const std::string& source) {
    std::vector<std::pair<std::string, std::string>> out;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto nl = text.find('\n', start);
        std::string_view line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (!line.empty()) {
            auto eq = line.find('=');
            if (eq == std::string_view::npos) {
                throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
            }
            out.emplace_back(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
        }
        if (nl == std::string_view::npos) break;
        start = nl + 1;
    }
    return out;
}

}  // namespace detail

class RunConfig {
public:
    RunConfig() {
        for (const auto& k : config_schema()) values_[k.name] = k.default_value;
    }

    static RunConfig from_text(std::string_view text, const std::string& source = "<config>") {
        RunConfig cfg;
        std::size_t n = 0;
        for (auto& [k, v] : detail::parse_key_values(text, source)) cfg.set(k, v, source + " entry " + std::to_string(++n));
        return cfg;
    }

    static RunConfig from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return from_text(ss.str(), path.string());
    }

    void set(const std::string& key, const std::string& value, const std::string& where = "override") {
        const ConfigKey* k = detail::find_key(key);
        if (!k) throw ConfigError(where + ": unknown config key '" + key + "'");
        detail::check_value(*k, value, where);
        values_[key] = value;
    }

    /// `key=value` from the command line.
    void apply_override(std::string_view kv) {
        auto eq = kv.find('=');
        if (eq == std::string_view::npos) throw ConfigError("--set expects key=value, got '" + std::string(kv) + "'");
        set(std::string(detail::trim(kv.substr(0, eq))), std::string(detail::trim(kv.substr(eq + 1))),
            "--set " + std::string(kv));
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }
    std::size_t get_size(const std::string& key) const {
        std::uint64_t u = 0;
        detail::parse_size(get(key), u);
        return static_cast<std::size_t>(u);
    }
    std::uint64_t get_u64(const std::string& key) const {
        std::uint64_t u = 0;
        detail::parse_size(get(key), u);
        return u;
    }
    double get_double(const std::string& key) const {
        double d = 0.0;
        detail::parse_double(get(key), d);
        return d;
    }
    bool get_bool(const std::string& key) const {
        bool b = false;
        detail::parse_bool(get(key), b);
        return b;
    }
    std::vector<std::size_t> get_size_list(const std::string& key) const {
        std::vector<std::size_t> out;
        for (auto part : detail::split_commas(get(key))) {
            std::uint64_t u = 0;
            detail::parse_size(part, u);
            out.push_back(static_cast<std::size_t>(u));
        }
        return out;
    }

    ModelConfig model_config(std::size_t n_vars) const {
        ModelConfig m;
        m.d_model = get_size("d_model");
        m.layers = get_size("layers");
        m.rules = get_size("rules");
        m.interaction = parse_interaction(get("interaction"));
        m.mf_kind = parse_mf_kind(get("mf_kind"));
        m.ffn_hidden = get_size("ffn_hidden");
        m.lookback = get_size("lookback");
        m.horizon = get_size("horizon");
        m.n_vars = n_vars;
        m.share_mf_across_tokens = get_bool("share_mf_across_tokens");
        m.epsilon = get_double("epsilon");
        m.dropout = get_double("dropout");
        m.layernorm_eps = get_double("layernorm_eps");
        m.validate();
        return m;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.lr = get_double("lr");
        t.batch_size = get_size("batch_size");
        t.epochs = get_size("epochs");
        t.seed = get_u64("seed");
        t.beta1 = get_double("adam_beta1");
        t.beta2 = get_double("adam_beta2");
        t.adam_eps = get_double("adam_eps");
        t.grad_clip = get_double("grad_clip");
        t.validate();
        return t;
    }

    SplitSpec split() const { return {get_size("split_train"), get_size("split_val"), get_size("split_test")}; }
    MetricScale metric_scale() const { return parse_metric_scale(get("metric_scale")); }
    bool synthetic() const { return get("data_path") == "synthetic"; }

    std::string dataset_label() const {
        if (!get("dataset_label").empty()) return get("dataset_label");
        if (synthetic()) return "synthetic";
        return std::filesystem::path(get("data_path")).stem().string();
    }

    RawSeries load_series() const {
        if (synthetic()) return synth_sinusoid(get_size("synth_vars"), get_size("synth_length"), get_u64("synth_seed"));
        return load_csv(get("data_path"), get_bool("has_date_column"));
    }

    PreparedData prepare() const {
        return prepare_dataset(load_series(), split(), get_size("lookback"), get_size("horizon"), get_size("stride"));
    }

    std::string dump() const {
        std::ostringstream os;
        for (const auto& k : config_schema()) os << k.name << " = " << get(k.name) << '\n';
        return os.str();
    }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace fisformer
