#pragma once

#include "fisformer/data.hpp"
#include "fisformer/model.hpp"
#include "fisformer/parallel.hpp"

#include <cmath>

namespace fisformer {

template <typename A, typename B>
double mse(const Eigen::MatrixBase<A>& pred, const Eigen::MatrixBase<B>& truth) {
    require_same_shape(pred, truth, "mse");
    if (pred.size() == 0) return 0.0;
    return (pred.template cast<double>() - truth.template cast<double>()).array().square().mean();
}

template <typename A, typename B>
double mae(const Eigen::MatrixBase<A>& pred, const Eigen::MatrixBase<B>& truth) {
    require_same_shape(pred, truth, "mae");
    if (pred.size() == 0) return 0.0;
    return (pred.template cast<double>() - truth.template cast<double>()).array().abs().mean();
}

/// Scale at which forecast errors are measured.
enum class MetricScale { Normalized, Denormalized };

inline std::string to_string(MetricScale s) { return s == MetricScale::Normalized ? "normalized" : "denormalized"; }

inline MetricScale parse_metric_scale(std::string_view s) {
    if (s == "normalized") return MetricScale::Normalized;
    if (s == "denormalized") return MetricScale::Denormalized;
    throw ConfigError("unknown metric scale '" + std::string(s) + "' (expected normalized or denormalized)");
}

struct ErrorPair {
    double mse = 0.0;
    double mae = 0.0;
};

/// Mean errors over all windows, every window weighted equally.
/// `forecast(k)` returns the P x N prediction for window k in normalized units.
template <typename Forecast>
ErrorPair window_errors(const WindowSet& windows, Forecast&& forecast, MetricScale scale,
                        const Normalizer* normalizer) {
    if (scale == MetricScale::Denormalized && normalizer == nullptr) {
        throw ConfigError("denormalized metrics need the fitted normalizer");
    }
    std::vector<ErrorPair> per(windows.size());
    parallel_for(windows.size(), [&](std::size_t k) {
        MatrixD pred = forecast(k);
        MatrixD truth = windows.target(k);
        if (scale == MetricScale::Denormalized) {
            pred = normalizer->invert(pred);
            truth = normalizer->invert(truth);
        }
        per[k] = {mse(pred, truth), mae(pred, truth)};
    });
    ErrorPair total;
    for (const auto& e : per) {
        total.mse += e.mse;
        total.mae += e.mae;
    }
    if (!per.empty()) {
        total.mse /= static_cast<double>(per.size());
        total.mae /= static_cast<double>(per.size());
    }
    return total;
}

template <typename T>
ErrorPair model_errors(const ModelParams<T>& params, const ModelConfig& cfg, const WindowSet& windows,
                       MetricScale scale = MetricScale::Normalized, const Normalizer* normalizer = nullptr) {
    return window_errors(
        windows,
        [&](std::size_t k) -> MatrixD {
            const Matrix<T> x = windows.input(k).template cast<T>();
            return model_forward(x, params, cfg).template cast<double>();
        },
        scale, normalizer);
}

/// Repeats the last observed row for every forecast step.
inline MatrixD persistence_baseline(const MatrixD& input, std::size_t horizon) {
    if (input.rows() == 0) throw ShapeError("persistence baseline needs at least one observed row");
    return input.row(input.rows() - 1).replicate(static_cast<Eigen::Index>(horizon), 1);
}

inline ErrorPair persistence_errors(const WindowSet& windows, MetricScale scale = MetricScale::Normalized,
                                    const Normalizer* normalizer = nullptr) {
    return window_errors(
        windows, [&](std::size_t k) { return persistence_baseline(windows.input(k), windows.horizon()); }, scale,
        normalizer);
}

}  // namespace fisformer
