#pragma once

// Forecast metrics, the self-attention vs FIS ablation, the membership-function sweep,
// and the token-count scaling benchmark.

#include "fisformer/data.hpp"
#include "fisformer/metrics.hpp"
#include "fisformer/training.hpp"

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <sstream>

namespace fisformer {

struct MetricReport {
    double mse = 0.0;
    double mae = 0.0;
    std::size_t horizon = 0;
    std::string dataset;
    std::string interaction;
    std::string mf_kind;
    MetricScale scale = MetricScale::Normalized;
};

inline std::string metric_csv_header() { return "dataset,interaction,mf_kind,scale,horizon,mse,mae\n"; }

inline std::string to_csv_row(const MetricReport& r) {
    std::ostringstream os;
    os << std::setprecision(10) << r.dataset << ',' << r.interaction << ',' << r.mf_kind << ','
       << to_string(r.scale) << ',' << r.horizon << ',' << r.mse << ',' << r.mae << '\n';
    return os.str();
}

template <typename T>
MetricReport evaluate_model(const ModelParams<T>& params, const ModelConfig& cfg, const WindowSet& windows,
                            const std::string& dataset, MetricScale scale = MetricScale::Normalized,
                            const Normalizer* normalizer = nullptr) {
    const ErrorPair e = model_errors(params, cfg, windows, scale, normalizer);
    MetricReport r;
    r.mse = e.mse;
    r.mae = e.mae;
    r.horizon = cfg.horizon;
    r.dataset = dataset;
    r.interaction = to_string(cfg.interaction);
    r.mf_kind = cfg.interaction == Interaction::Fis ? to_string(cfg.mf_kind) : "-";
    r.scale = scale;
    return r;
}

inline MetricReport evaluate_persistence(const WindowSet& windows, const std::string& dataset,
                                         MetricScale scale = MetricScale::Normalized,
                                         const Normalizer* normalizer = nullptr) {
    const ErrorPair e = persistence_errors(windows, scale, normalizer);
    return {e.mse, e.mae, windows.horizon(), dataset, "persistence", "-", scale};
}

/// Relative improvement of `fis` over `base` in percent; positive means FIS is better.
inline double promotion(double base, double fis) {
    if (base == 0.0) return 0.0;
    return (base - fis) / base * 100.0;
}

struct AblationResult {
    MetricReport attention;
    MetricReport fis;
    double promotion_mse = 0.0;
    double promotion_mae = 0.0;
    TrainHistory attention_history;
    TrainHistory fis_history;

    bool same_batches() const { return attention_history.batch_stream_crc == fis_history.batch_stream_crc; }
};

inline AblationResult make_ablation(MetricReport attention, MetricReport fis) {
    if (attention.scale != fis.scale) {
        throw ConfigError("ablation reports use different metric scales (" + to_string(attention.scale) + " vs " +
                          to_string(fis.scale) + ")");
    }
    AblationResult r;
    r.promotion_mse = promotion(attention.mse, fis.mse);
    r.promotion_mae = promotion(attention.mae, fis.mae);
    r.attention = std::move(attention);
    r.fis = std::move(fis);
    return r;
}

/// Trains both interaction modes from the same seed and data; only the interaction
/// sub-layer differs. Metrics are on the test split.
template <typename T>
AblationResult ablation_run(const PreparedData& data, const ModelConfig& shared, const TrainConfig& tc,
                            const std::string& dataset, MetricScale scale = MetricScale::Normalized,
                            const EpochCallback& on_epoch = {}) {
    ModelConfig att = shared;
    att.interaction = Interaction::SelfAttention;
    ModelConfig fis = shared;
    fis.interaction = Interaction::Fis;
    auto ra = train<T>(att, tc, data.train, data.val, std::nullopt, on_epoch);
    auto rf = train<T>(fis, tc, data.train, data.val, std::nullopt, on_epoch);
    AblationResult r = make_ablation(evaluate_model(ra.params, att, data.test, dataset, scale, &data.normalizer),
                                     evaluate_model(rf.params, fis, data.test, dataset, scale, &data.normalizer));
    r.attention_history = std::move(ra.history);
    r.fis_history = std::move(rf.history);
    return r;
}

inline std::string format_ablation_table(const AblationResult& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << std::left << std::setw(20) << "Datasets" << "| " << std::setw(15) << r.fis.dataset << '\n';
    os << std::left << std::setw(20) << "Metric" << "| " << std::right << std::setw(7) << "MSE" << std::setw(8)
       << "MAE" << '\n';
    os << std::left << std::setw(20) << "w/Self-Attention" << "| " << std::right << std::setw(7) << r.attention.mse
       << std::setw(8) << r.attention.mae << '\n';
    os << std::left << std::setw(20) << "w/FIS Interaction" << "| " << std::right << std::setw(7) << r.fis.mse
       << std::setw(8) << r.fis.mae << '\n';
    std::ostringstream pm, pa;
    pm << std::fixed << std::setprecision(1) << r.promotion_mse << '%';
    pa << std::fixed << std::setprecision(1) << r.promotion_mae << '%';
    os << std::left << std::setw(20) << "Promotion" << "| " << std::right << std::setw(7) << pm.str()
       << std::setw(8) << pa.str() << '\n';
    return os.str();
}

inline std::string ablation_csv(const AblationResult& r) {
    std::ostringstream os;
    os << "dataset,variant,mse,mae\n" << std::setprecision(10);
    os << r.fis.dataset << ",w/Self-Attention," << r.attention.mse << ',' << r.attention.mae << '\n';
    os << r.fis.dataset << ",w/FIS Interaction," << r.fis.mse << ',' << r.fis.mae << '\n';
    os << r.fis.dataset << ",Promotion(%)," << r.promotion_mse << ',' << r.promotion_mae << '\n';
    return os.str();
}

/// One FIS model per membership-function kind, identical otherwise. Test-split metrics.
template <typename T>
std::vector<MetricReport> mf_sweep(const PreparedData& data, const ModelConfig& base, const TrainConfig& tc,
                                   const std::string& dataset, MetricScale scale = MetricScale::Normalized,
                                   const EpochCallback& on_epoch = {}) {
    std::vector<MetricReport> out;
    for (MfKind kind : {MfKind::Gaussian, MfKind::Triangular, MfKind::Trapezoidal}) {
        ModelConfig cfg = base;
        cfg.interaction = Interaction::Fis;
        cfg.mf_kind = kind;
        auto r = train<T>(cfg, tc, data.train, data.val, std::nullopt, on_epoch);
        out.push_back(evaluate_model(r.params, cfg, data.test, dataset, scale, &data.normalizer));
    }
    return out;
}

inline std::string format_mf_table(const std::vector<MetricReport>& reports) {
    std::ostringstream os;
    os << std::left << std::setw(14) << "MFs Types /";
    for (const auto& r : reports) os << "| " << std::setw(15) << r.mf_kind;
    os << '\n' << std::left << std::setw(14) << "Metric";
    for (std::size_t n = 0; n < reports.size(); ++n) os << "| " << std::setw(7) << "MSE" << std::setw(8) << "MAE";
    os << '\n' << std::left << std::setw(14) << (reports.empty() ? std::string() : reports.front().dataset);
    os << std::fixed << std::setprecision(3);
    for (const auto& r : reports) os << "| " << std::setw(7) << r.mse << std::setw(8) << r.mae;
    os << '\n';
    return os.str();
}

// Scaling benchmark

struct ScalingRow {
    std::string kernel;  // "fis" or "attention"
    std::size_t tokens = 0;
    double median_seconds = 0.0;
    double mean_seconds = 0.0;
    double std_seconds = 0.0;
    std::size_t repeats = 0;
};

struct ScalingReport {
    std::size_t dim = 0;
    std::size_t rules = 0;
    std::vector<ScalingRow> rows;

    const ScalingRow* find(const std::string& kernel, std::size_t tokens) const {
        for (const auto& r : rows) {
            if (r.kernel == kernel && r.tokens == tokens) return &r;
        }
        return nullptr;
    }
    /// median(t_hi) / median(t_lo) for one kernel.
    double ratio(const std::string& kernel, std::size_t lo, std::size_t hi) const {
        const auto* a = find(kernel, lo);
        const auto* b = find(kernel, hi);
        if (!a || !b) throw ConfigError("scaling report lacks " + kernel + " timings for the requested sizes");
        return b->median_seconds / a->median_seconds;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << "kernel,tokens,dim,rules,repeats,median_s,mean_s,std_s\n" << std::setprecision(8);
        for (const auto& r : rows) {
            os << r.kernel << ',' << r.tokens << ',' << dim << ',' << rules << ',' << r.repeats << ','
               << r.median_seconds << ',' << r.mean_seconds << ',' << r.std_seconds << '\n';
        }
        return os.str();
    }

    std::string to_text() const {
        std::ostringstream os;
        os << std::left << std::setw(12) << "kernel" << std::right << std::setw(8) << "T" << std::setw(14)
           << "median ms" << std::setw(14) << "mean ms" << std::setw(12) << "std ms" << '\n';
        os << std::fixed << std::setprecision(4);
        for (const auto& r : rows) {
            os << std::left << std::setw(12) << r.kernel << std::right << std::setw(8) << r.tokens << std::setw(14)
               << r.median_seconds * 1e3 << std::setw(14) << r.mean_seconds * 1e3 << std::setw(12)
               << r.std_seconds * 1e3 << '\n';
        }
        return os.str();
    }
};

namespace detail {

template <typename Fn>
ScalingRow time_kernel(const std::string& name, std::size_t tokens, std::size_t repeats, Fn&& fn) {
    fn();  // warmup
    std::vector<double> times;
    for (std::size_t n = 0; n < repeats; ++n) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    ScalingRow row;
    row.kernel = name;
    row.tokens = tokens;
    row.repeats = repeats;
    std::vector<double> sorted = times;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size();
    row.median_seconds = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
    for (double t : times) row.mean_seconds += t;
    row.mean_seconds /= static_cast<double>(m);
    for (double t : times) row.std_seconds += (t - row.mean_seconds) * (t - row.mean_seconds);
    row.std_seconds = std::sqrt(row.std_seconds / static_cast<double>(m));
    return row;
}

inline volatile double bench_sink = 0.0;

}  // namespace detail

/// Forward timings of the FIS interaction and of self-attention at each token count,
/// on the calling thread, fixed random inputs, one untimed warmup, median of `repeats`.
inline ScalingReport bench_scaling(const std::vector<std::size_t>& token_counts, std::size_t dim, std::size_t rules,
                                   std::size_t repeats, std::uint64_t seed = 7) {
    if (repeats == 0) throw ConfigError("bench_scaling: repeats must be >= 1");
    if (dim == 0 || rules == 0) throw ConfigError("bench_scaling: dim and rules must be >= 1");
    ScalingReport report;
    report.dim = dim;
    report.rules = rules;
    for (std::size_t tokens : token_counts) {
        if (tokens == 0) throw ConfigError("bench_scaling: token counts must be >= 1");
        std::mt19937_64 rng(detail::mix_seed(seed, tokens));
        std::normal_distribution<double> n(0.0, 1.0);
        auto random = [&] {
            MatrixD m(static_cast<Eigen::Index>(tokens), static_cast<Eigen::Index>(dim));
            for (Eigen::Index e = 0; e < m.size(); ++e) m.data()[e] = n(rng);
            return m;
        };
        const MatrixD q = random(), k = random(), v = random();
        const auto params = init_fis_params<double>(MfKind::Gaussian, tokens, dim, rules, seed);
        report.rows.push_back(detail::time_kernel("fis", tokens, repeats, [&] {
            detail::bench_sink = detail::bench_sink + fis_forward(q, k, v, params).o(0, 0);
        }));
        report.rows.push_back(detail::time_kernel("attention", tokens, repeats, [&] {
            detail::bench_sink = detail::bench_sink + self_attention(q, k, v).out(0, 0);
        }));
    }
    return report;
}

}  // namespace fisformer
