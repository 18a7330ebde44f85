#pragma once

// Time-series ingestion: CSV loading, chronological splitting, train-fitted z-score
// normalization, (lookback, horizon) windowing, and seeded synthetic series.

#include "fisformer/tensor.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace fisformer {

/// A timestamped multivariate series: rows are time points, columns are variates.
struct RawSeries {
    MatrixD values;                       // T_total x N
    std::vector<std::string> variate_names;
    std::vector<std::string> timestamps;  // empty when the source had no date column
    std::string frequency;

    std::size_t length() const { return static_cast<std::size_t>(values.rows()); }
    std::size_t n_vars() const { return static_cast<std::size_t>(values.cols()); }

    /// Rows [begin, begin + count) as a new series with the same labels.
    RawSeries slice(std::size_t begin, std::size_t count) const {
        RawSeries out;
        out.values = values.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
        out.variate_names = variate_names;
        out.frequency = frequency;
        if (!timestamps.empty()) {
            out.timestamps.assign(timestamps.begin() + static_cast<std::ptrdiff_t>(begin),
                                  timestamps.begin() + static_cast<std::ptrdiff_t>(begin + count));
        }
        return out;
    }
};

struct SplitSpec {
    std::size_t train_len = 0;
    std::size_t val_len = 0;
    std::size_t test_len = 0;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r' || s.front() == '\n')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n')) {
        s.remove_suffix(1);
    }
    return s;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            cells.push_back(trim(line.substr(start)));
            break;
        }
        cells.push_back(trim(line.substr(start, pos - start)));
        start = pos + 1;
    }
    return cells;
}

inline bool parse_real(std::string_view cell, double& out) {
    if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
    if (cell.empty()) return false;
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), out);
    return ec == std::errc() && ptr == cell.data() + cell.size() && std::isfinite(out);
}

}  // namespace detail

/// Reads a comma-separated file with one header row. When `has_date_column` is set the
/// first column is kept as timestamp metadata and excluded from the variates.
/// Row numbers in error messages count data rows from 1 (the header is not a row).
inline RawSeries load_csv(const std::filesystem::path& path, bool has_date_column) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open data file '" + path.string() + "'");
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw ConfigError("data file '" + path.string() + "' is empty");
    }
    auto header = detail::split_commas(line);
    const std::size_t skip = has_date_column ? 1 : 0;
    if (header.size() <= skip) {
        throw ConfigError("data file '" + path.string() + "' has no value columns");
    }
    RawSeries series;
    for (std::size_t c = skip; c < header.size(); ++c) series.variate_names.emplace_back(header[c]);
    const std::size_t n = series.variate_names.size();

    std::vector<double> flat;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        ++row;
        auto cells = detail::split_commas(line);
        if (cells.size() != header.size()) {
            throw ConfigError("data file '" + path.string() + "': row " + std::to_string(row) + " has " +
                              std::to_string(cells.size()) + " cells, expected " + std::to_string(header.size()));
        }
        if (has_date_column) series.timestamps.emplace_back(cells[0]);
        for (std::size_t c = skip; c < cells.size(); ++c) {
            double v = 0.0;
            if (!detail::parse_real(cells[c], v)) {
                throw ConfigError("data file '" + path.string() + "': row " + std::to_string(row) + ", column " +
                                  std::to_string(c + 1) + " ('" + std::string(header[c]) +
                                  "'): not a finite number: '" + std::string(cells[c]) + "'");
            }
            flat.push_back(v);
        }
    }
    if (row == 0) {
        throw ConfigError("data file '" + path.string() + "' has no data rows");
    }
    series.values = Eigen::Map<MatrixD>(flat.data(), static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(n));
    return series;
}

/// Three contiguous, ordered, non-overlapping segments: train, validation, test.
inline std::tuple<RawSeries, RawSeries, RawSeries> chronological_split(const RawSeries& series,
                                                                       const SplitSpec& spec) {
    const std::size_t need = spec.train_len + spec.val_len + spec.test_len;
    if (need > series.length()) {
        throw ConfigError("split (" + std::to_string(spec.train_len) + ", " + std::to_string(spec.val_len) + ", " +
                          std::to_string(spec.test_len) + ") needs " + std::to_string(need) +
                          " rows but the series has " + std::to_string(series.length()));
    }
    return {series.slice(0, spec.train_len), series.slice(spec.train_len, spec.val_len),
            series.slice(spec.train_len + spec.val_len, spec.test_len)};
}

/// Per-variate z-score fitted on the training split only.
struct Normalizer {
    static constexpr double kStdFloor = 1e-8;

    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd stddev;

    MatrixD apply(const MatrixD& m) const {
        check(m);
        return (m.rowwise() - mean).array().rowwise() / stddev.array();
    }
    MatrixD invert(const MatrixD& m) const {
        check(m);
        return (m.array().rowwise() * stddev.array()).matrix().rowwise() + mean;
    }

private:
    void check(const MatrixD& m) const {
        if (m.cols() != mean.size()) {
            throw ShapeError("normalizer fitted on " + std::to_string(mean.size()) + " variates, got " +
                             std::to_string(m.cols()));
        }
    }
};

inline Normalizer fit_normalizer(const MatrixD& train) {
    if (train.rows() == 0 || train.cols() == 0) {
        throw ConfigError("cannot fit a normalizer on an empty training split");
    }
    Normalizer norm;
    norm.mean = train.colwise().mean();
    const MatrixD centered = train.rowwise() - norm.mean;
    norm.stddev = (centered.array().square().colwise().sum() / static_cast<double>(train.rows())).sqrt();
    for (Eigen::Index j = 0; j < norm.stddev.size(); ++j) {
        if (!(norm.stddev[j] > Normalizer::kStdFloor)) norm.stddev[j] = Normalizer::kStdFloor;
    }
    return norm;
}

inline Normalizer fit_normalizer(const RawSeries& train) { return fit_normalizer(train.values); }

/// Sliding (input, target) pairs over one split. Windows share the split's storage;
/// input(k) and target(k) copy out the rows on demand.
class WindowSet {
public:
    WindowSet() = default;
    WindowSet(std::shared_ptr<const MatrixD> series, std::size_t lookback, std::size_t horizon, std::size_t stride)
        : series_(std::move(series)), lookback_(lookback), horizon_(horizon), stride_(stride) {
        const std::size_t len = static_cast<std::size_t>(series_->rows());
        const std::size_t count = (len - lookback - horizon) / stride + 1;
        starts_.reserve(count);
        for (std::size_t k = 0; k < count; ++k) starts_.push_back(k * stride);
    }

    std::size_t size() const { return starts_.size(); }
    bool empty() const { return starts_.empty(); }
    std::size_t lookback() const { return lookback_; }
    std::size_t horizon() const { return horizon_; }
    std::size_t stride() const { return stride_; }
    std::size_t n_vars() const { return series_ ? static_cast<std::size_t>(series_->cols()) : 0; }
    std::size_t input_start(std::size_t k) const { return starts_.at(k); }
    std::size_t target_start(std::size_t k) const { return starts_.at(k) + lookback_; }

    MatrixD input(std::size_t k) const {
        return series_->middleRows(static_cast<Eigen::Index>(input_start(k)), static_cast<Eigen::Index>(lookback_));
    }
    MatrixD target(std::size_t k) const {
        return series_->middleRows(static_cast<Eigen::Index>(target_start(k)), static_cast<Eigen::Index>(horizon_));
    }
    const MatrixD& series() const { return *series_; }

private:
    std::shared_ptr<const MatrixD> series_;
    std::size_t lookback_ = 0;
    std::size_t horizon_ = 0;
    std::size_t stride_ = 1;
    std::vector<std::size_t> starts_;
};

inline WindowSet make_windows(const MatrixD& series, std::size_t lookback, std::size_t horizon,
                              std::size_t stride = 1) {
    if (lookback == 0 || horizon == 0 || stride == 0) {
        throw ConfigError("lookback, horizon and stride must all be >= 1");
    }
    if (static_cast<std::size_t>(series.rows()) < lookback + horizon) {
        throw ConfigError("series of length " + std::to_string(series.rows()) + " is too short for lookback " +
                          std::to_string(lookback) + " + horizon " + std::to_string(horizon));
    }
    return WindowSet(std::make_shared<const MatrixD>(series), lookback, horizon, stride);
}

inline WindowSet make_windows(const RawSeries& series, std::size_t lookback, std::size_t horizon,
                              std::size_t stride = 1) {
    return make_windows(series.values, lookback, horizon, stride);
}

/// Parameters of the synthetic generator: variate k is
/// sin(2*pi*t / periods[k]) + trends[k] * t + noise_std * N(0, 1).
struct SynthSpec {
    std::vector<double> periods;
    std::vector<double> trends;
    double noise_std = 0.1;
};

inline SynthSpec draw_synth_spec(std::size_t n_vars, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> period(12.0, 48.0);
    std::uniform_real_distribution<double> trend(-5e-4, 5e-4);
    SynthSpec spec;
    for (std::size_t k = 0; k < n_vars; ++k) {
        spec.periods.push_back(period(rng));
        spec.trends.push_back(trend(rng));
    }
    return spec;
}

inline RawSeries synth_series(const SynthSpec& spec, std::size_t length, std::uint64_t seed) {
    const std::size_t n = spec.periods.size();
    if (n == 0 || length == 0 || spec.trends.size() != n) {
        throw ConfigError("synthetic series needs n_vars >= 1, length >= 1 and one trend per period");
    }
    std::mt19937_64 rng(seed ^ 0x6a09e667f3bcc909ULL);
    std::normal_distribution<double> noise(0.0, 1.0);
    RawSeries series;
    series.values.resize(static_cast<Eigen::Index>(length), static_cast<Eigen::Index>(n));
    for (std::size_t t = 0; t < length; ++t) {
        for (std::size_t k = 0; k < n; ++k) {
            const double td = static_cast<double>(t);
            double v = std::sin(2.0 * std::numbers::pi * td / spec.periods[k]) + spec.trends[k] * td;
            if (spec.noise_std != 0.0) v += spec.noise_std * noise(rng);
            series.values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = v;
        }
    }
    for (std::size_t k = 0; k < n; ++k) series.variate_names.push_back("var" + std::to_string(k));
    series.frequency = "synthetic";
    return series;
}

inline RawSeries synth_sinusoid(std::size_t n_vars, std::size_t length, std::uint64_t seed) {
    return synth_series(draw_synth_spec(n_vars, seed), length, seed);
}

/// A split, normalized, windowed dataset ready for training and evaluation.
struct PreparedData {
    RawSeries raw;
    Normalizer normalizer;
    WindowSet train;
    WindowSet val;
    WindowSet test;
};

/// When every split length is zero the series is divided 70/10/20.
inline SplitSpec resolve_split(const SplitSpec& spec, std::size_t total) {
    if (spec.train_len + spec.val_len + spec.test_len != 0) return spec;
    SplitSpec out;
    out.train_len = total * 7 / 10;
    out.val_len = total / 10;
    out.test_len = total - out.train_len - out.val_len;
    return out;
}

inline PreparedData prepare_dataset(RawSeries series, const SplitSpec& requested, std::size_t lookback,
                                    std::size_t horizon, std::size_t stride = 1) {
    const SplitSpec spec = resolve_split(requested, series.length());
    const std::size_t min_len = lookback + horizon;
    if (spec.train_len < min_len || spec.val_len < min_len || spec.test_len < min_len) {
        throw ConfigError("every split must hold at least lookback + horizon = " + std::to_string(min_len) +
                          " rows; got (" + std::to_string(spec.train_len) + ", " + std::to_string(spec.val_len) +
                          ", " + std::to_string(spec.test_len) + ")");
    }
    auto [train, val, test] = chronological_split(series, spec);
    PreparedData out;
    out.normalizer = fit_normalizer(train);
    out.train = make_windows(out.normalizer.apply(train.values), lookback, horizon, stride);
    out.val = make_windows(out.normalizer.apply(val.values), lookback, horizon, stride);
    out.test = make_windows(out.normalizer.apply(test.values), lookback, horizon, stride);
    out.raw = std::move(series);
    return out;
}

}  // namespace fisformer
