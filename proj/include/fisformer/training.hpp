#pragma once

// L2-loss training with Adam, plus a finite-difference gradient check for the whole model.

#include "fisformer/metrics.hpp"
#include "fisformer/model.hpp"
#include "fisformer/parallel.hpp"

#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <iomanip>
#include <map>
#include <vector>

namespace fisformer {

/// Mean of squared elementwise differences.
template <typename T>
T l2_loss(const Matrix<T>& pred, const Matrix<T>& target) {
    require_same_shape(pred, target, "l2_loss");
    return (pred - target).array().square().mean();
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::uint64_t step = 0;
};

/// One bias-corrected Adam update over a list of parameter tensors. State is sized
/// lazily on the first call.
template <typename T>
void adam_step(const std::vector<std::span<T>>& params, const std::vector<std::span<const T>>& grads,
               AdamState<T>& state, const AdamConfig& cfg) {
    if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient lists differ in length");
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.size(), T(0));
            state.v.emplace_back(p.size(), T(0));
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto p = params[t];
        auto g = grads[t];
        auto& m = state.m[t];
        auto& v = state.v[t];
        if (g.size() != p.size() || m.size() != p.size()) {
            throw ShapeError("adam_step: tensor " + std::to_string(t) + " size mismatch");
        }
        for (std::size_t n = 0; n < p.size(); ++n) {
            const double gn = static_cast<double>(g[n]);
            const double mn = cfg.beta1 * static_cast<double>(m[n]) + (1.0 - cfg.beta1) * gn;
            const double vn = cfg.beta2 * static_cast<double>(v[n]) + (1.0 - cfg.beta2) * gn * gn;
            m[n] = static_cast<T>(mn);
            v[n] = static_cast<T>(vn);
            const double update = cfg.lr * (mn / c1) / (std::sqrt(vn / c2) + cfg.eps);
            p[n] = static_cast<T>(static_cast<double>(p[n]) - update);
        }
    }
}

template <typename T>
void adam_step(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state, const AdamConfig& cfg) {
    std::vector<std::span<T>> ps;
    std::vector<std::span<const T>> gs;
    for (auto& r : param_refs(params)) ps.push_back(r.data);
    for (const auto& r : param_refs(grads)) gs.push_back(r.data);
    adam_step(ps, gs, state, cfg);
}

struct TrainConfig {
    double lr = 1e-3;
    std::size_t batch_size = 32;
    std::size_t epochs = 10;
    std::uint64_t seed = 7;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 0.0;  // max global L2 norm, 0 disables

    AdamConfig adam() const { return {lr, beta1, beta2, adam_eps}; }

    void validate() const {
        if (!(lr >= 0.0)) throw ConfigError("train config: lr must be >= 0");
        if (batch_size == 0) throw ConfigError("train config: batch_size must be >= 1");
        if (epochs == 0) throw ConfigError("train config: epochs must be >= 1");
        if (!(grad_clip >= 0.0)) throw ConfigError("train config: grad_clip must be >= 0");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_mse = 0.0;
    double val_mae = 0.0;
    double seconds = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    ErrorPair initial_val;
    std::size_t best_epoch = 0;
    std::uint64_t steps = 0;
    std::uint32_t batch_stream_crc = 0;  // CRC-32 over every batch's window indices and data

    /// `epoch,train_loss,val_mse,val_mae,seconds`; seconds are written as 0 when
    /// `with_seconds` is off so that reruns are byte-identical.
    std::string to_csv(bool with_seconds = true) const {
        std::ostringstream os;
        os << "epoch,train_loss,val_mse,val_mae,seconds\n";
        os << std::setprecision(17);
        for (const auto& e : epochs) {
            os << e.epoch << ',' << e.train_loss << ',' << e.val_mse << ',' << e.val_mae << ','
               << (with_seconds ? e.seconds : 0.0) << '\n';
        }
        return os.str();
    }
};

template <typename T>
struct TrainResult {
    ModelParams<T> params;  // best validation epoch
    TrainHistory history;
};

namespace detail {

inline std::uint32_t crc_update(std::uint32_t crc, const void* data, std::size_t bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(crc, static_cast<const Bytef*>(data), static_cast<uInt>(bytes)));
}

template <typename T>
double global_norm(const ModelParams<T>& g) {
    double s = 0.0;
    for (const auto& r : param_refs(g)) {
        for (T x : r.data) s += static_cast<double>(x) * static_cast<double>(x);
    }
    return std::sqrt(s);
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam on the L2 loss. Windows are reshuffled every epoch from a seeded
/// generator; per-window gradients are summed in window order so the result does not
/// depend on the thread count. Returns the parameters of the best validation epoch.
template <typename T>
TrainResult<T> train(const ModelConfig& model_cfg, const TrainConfig& cfg, const WindowSet& train_windows,
                     const WindowSet& val_windows, std::optional<ModelParams<T>> init = std::nullopt,
                     const EpochCallback& on_epoch = {}) {
    model_cfg.validate();
    cfg.validate();
    if (train_windows.empty()) throw ConfigError("training window set is empty");
    if (val_windows.empty()) throw ConfigError("validation window set is empty");

    ModelParams<T> params = init ? std::move(*init) : init_model_params<T>(model_cfg, cfg.seed);
    check_params_match(params, model_cfg);
    AdamState<T> adam;
    const AdamConfig adam_cfg = cfg.adam();

    TrainResult<T> result;
    auto& hist = result.history;
    hist.initial_val = model_errors(params, model_cfg, val_windows);
    hist.batch_stream_crc = static_cast<std::uint32_t>(::crc32(0L, Z_NULL, 0));

    std::mt19937_64 shuffle_rng(cfg.seed);
    std::vector<std::size_t> order(train_windows.size());
    const ModelParams<T> zero = zeros_like(params);
    std::vector<ModelParams<T>> slot_grads(std::min(cfg.batch_size, train_windows.size()), zero);
    std::vector<double> slot_loss(slot_grads.size());
    double best_val = std::numeric_limits<double>::infinity();
    const bool use_dropout = model_cfg.dropout > 0.0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t n_batches = 0;

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t bsz = std::min(cfg.batch_size, order.size() - start);
            const std::uint64_t step = hist.steps;
            parallel_for(bsz, [&](std::size_t s) {
                const std::size_t w = order[start + s];
                const Matrix<T> x = train_windows.input(w).template cast<T>();
                const Matrix<T> y = train_windows.target(w).template cast<T>();
                ModelTrace<T> trace;
                std::optional<std::mt19937_64> drop_rng;
                if (use_dropout) drop_rng.emplace(detail::mix_seed(cfg.seed, step + 1, w + 1));
                const Matrix<T> pred = model_forward(x, params, model_cfg, &trace, drop_rng ? &*drop_rng : nullptr);
                slot_loss[s] = static_cast<double>(l2_loss(pred, y));
                const Matrix<T> d_pred = (pred - y) * static_cast<T>(2.0 / (static_cast<double>(pred.size()) *
                                                                           static_cast<double>(bsz)));
                auto& g = slot_grads[s];
                for (auto& r : param_refs(g)) std::fill(r.data.begin(), r.data.end(), T(0));
                model_backward(params, model_cfg, trace, d_pred, g);
            });

            ModelParams<T> grads = zero;
            auto total = param_refs(grads);
            double batch_loss = 0.0;
            for (std::size_t s = 0; s < bsz; ++s) {
                batch_loss += slot_loss[s];
                auto part = param_refs(std::as_const(slot_grads[s]));
                for (std::size_t t = 0; t < total.size(); ++t) {
                    for (std::size_t n = 0; n < total[t].data.size(); ++n) total[t].data[n] += part[t].data[n];
                }
                const std::size_t w = order[start + s];
                const std::uint64_t idx = w;
                hist.batch_stream_crc = detail::crc_update(hist.batch_stream_crc, &idx, sizeof idx);
                const MatrixD xin = train_windows.input(w);
                const MatrixD yin = train_windows.target(w);
                hist.batch_stream_crc = detail::crc_update(hist.batch_stream_crc, xin.data(),
                                                           static_cast<std::size_t>(xin.size()) * sizeof(double));
                hist.batch_stream_crc = detail::crc_update(hist.batch_stream_crc, yin.data(),
                                                           static_cast<std::size_t>(yin.size()) * sizeof(double));
            }
            batch_loss /= static_cast<double>(bsz);
            const double gnorm = detail::global_norm(grads);
            if (!std::isfinite(batch_loss) || !std::isfinite(gnorm)) {
                throw NumericalError("non-finite training loss or gradient at epoch " + std::to_string(epoch) +
                                     ", step " + std::to_string(hist.steps + 1) + " (loss " +
                                     std::to_string(batch_loss) + ")");
            }
            if (cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip) {
                const T scale = static_cast<T>(cfg.grad_clip / gnorm);
                for (auto& r : total) {
                    for (auto& x : r.data) x *= scale;
                }
            }
            adam_step(params, grads, adam, adam_cfg);
            ++hist.steps;
            loss_sum += batch_loss;
            ++n_batches;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(n_batches);
        const ErrorPair val = model_errors(params, model_cfg, val_windows);
        rec.val_mse = val.mse;
        rec.val_mae = val.mae;
        if (!std::isfinite(rec.val_mse)) {
            throw NumericalError("non-finite validation MSE after epoch " + std::to_string(epoch));
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        hist.epochs.push_back(rec);
        if (rec.val_mse < best_val) {
            best_val = rec.val_mse;
            hist.best_epoch = epoch;
            result.params = params;
        }
        if (on_epoch) on_epoch(rec);
    }
    return result;
}

// Gradient check

struct GradCheckOptions {
    std::uint64_t seed = 7;
    std::size_t samples = 50;
    double tolerance = 1e-4;
    std::size_t batch = 2;
    double step = 1e-6;
    // Relative error is |a - n| / max(|a|, |n|, denom_floor).
    double denom_floor = 1e-6;
    // Use the model's own forecasts as targets, so the loss sits at a stationary point.
    bool match_targets = false;
};

struct GroupCheck {
    ParamGroup group{};
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::string worst_param;
    bool passed = true;
};

struct GradReport {
    std::vector<GroupCheck> groups;
    double tolerance = 0.0;
    std::size_t skipped_near_kink = 0;

    bool passed() const {
        return !groups.empty() &&
               std::all_of(groups.begin(), groups.end(), [](const GroupCheck& g) { return g.passed; });
    }
    double max_rel_error() const {
        double m = 0.0;
        for (const auto& g : groups) m = std::max(m, g.max_rel_error);
        return m;
    }
    const GroupCheck* find(ParamGroup g) const {
        for (const auto& c : groups) {
            if (c.group == g) return &c;
        }
        return nullptr;
    }

    std::string to_text() const {
        std::ostringstream os;
        os << std::left << std::setw(12) << "group" << std::right << std::setw(9) << "checked" << std::setw(15)
           << "max_rel_err" << std::setw(15) << "max_abs_err" << "  status  worst\n";
        for (const auto& g : groups) {
            os << std::left << std::setw(12) << to_string(g.group) << std::right << std::setw(9) << g.checked
               << std::setw(15) << std::scientific << std::setprecision(3) << g.max_rel_error << std::setw(15)
               << g.max_abs_error << std::defaultfloat << "  " << (g.passed ? "ok    " : "FAIL  ") << "  "
               << g.worst_param << '\n';
        }
        os << "tolerance " << tolerance << ", skipped near kinks " << skipped_near_kink << ", overall "
           << (passed() ? "PASS" : "FAIL") << '\n';
        return os.str();
    }
};

namespace detail {

inline double batch_l2(const ModelParams<double>& p, const ModelConfig& cfg, const std::vector<MatrixD>& xs,
                       const std::vector<MatrixD>& ys, std::vector<int>* signature) {
    double loss = 0.0;
    if (signature) signature->clear();
    for (std::size_t b = 0; b < xs.size(); ++b) {
        ModelTrace<double> trace;
        const MatrixD pred = model_forward(xs[b], p, cfg, signature ? &trace : nullptr);
        loss += l2_loss(pred, ys[b]);
        if (signature) {
            auto s = kink_signature(p, trace);
            signature->insert(signature->end(), s.begin(), s.end());
        }
    }
    return loss / static_cast<double>(xs.size());
}

}  // namespace detail

/// Compares analytic gradients of the batch L2 loss with central differences at a
/// seeded initialization, always in 64-bit. Samples the same number of entries from
/// every parameter group. For piecewise-linear memberships, samples whose perturbation
/// moves any membership evaluation across a kink are skipped and redrawn.
inline GradReport grad_check(const ModelConfig& model_cfg, const GradCheckOptions& opt) {
    model_cfg.validate();
    ModelConfig cfg = model_cfg;
    cfg.dropout = 0.0;
    ModelParams<double> params = init_model_params<double>(cfg, opt.seed);
    std::mt19937_64 rng(detail::mix_seed(opt.seed, 99));
    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<MatrixD> xs, ys;
    for (std::size_t b = 0; b < std::max<std::size_t>(1, opt.batch); ++b) {
        MatrixD x(static_cast<Eigen::Index>(cfg.lookback), static_cast<Eigen::Index>(cfg.n_vars));
        for (Eigen::Index n = 0; n < x.size(); ++n) x.data()[n] = normal(rng);
        MatrixD y(static_cast<Eigen::Index>(cfg.horizon), static_cast<Eigen::Index>(cfg.n_vars));
        for (Eigen::Index n = 0; n < y.size(); ++n) y.data()[n] = normal(rng);
        if (opt.match_targets) y = model_forward(x, params, cfg);
        xs.push_back(std::move(x));
        ys.push_back(std::move(y));
    }

    ModelParams<double> grads = zeros_like(params);
    for (std::size_t b = 0; b < xs.size(); ++b) {
        ModelTrace<double> trace;
        const MatrixD pred = model_forward(xs[b], params, cfg, &trace);
        const MatrixD d_pred = (pred - ys[b]) * (2.0 / (static_cast<double>(pred.size()) * xs.size()));
        model_backward(params, cfg, trace, d_pred, grads);
    }

    std::vector<int> base_sig;
    detail::batch_l2(params, cfg, xs, ys, &base_sig);

    auto refs = param_refs(params);
    const auto grefs = param_refs(std::as_const(grads));
    std::map<ParamGroup, std::vector<std::pair<std::size_t, std::size_t>>> by_group;
    for (std::size_t t = 0; t < refs.size(); ++t) {
        for (std::size_t e = 0; e < refs[t].data.size(); ++e) by_group[refs[t].group].push_back({t, e});
    }

    GradReport report;
    report.tolerance = opt.tolerance;
    const std::size_t per_group =
        std::max<std::size_t>(1, (opt.samples + by_group.size() - 1) / std::max<std::size_t>(1, by_group.size()));
    std::vector<int> sig;
    for (auto& [group, entries] : by_group) {
        std::shuffle(entries.begin(), entries.end(), rng);
        GroupCheck gc;
        gc.group = group;
        for (std::size_t n = 0; n < entries.size() && gc.checked < per_group; ++n) {
            const auto [t, e] = entries[n];
            double& slot = refs[t].data[e];
            const double orig = slot;
            slot = orig + opt.step;
            const double lp = detail::batch_l2(params, cfg, xs, ys, &sig);
            const bool same_p = sig == base_sig;
            slot = orig - opt.step;
            const double lm = detail::batch_l2(params, cfg, xs, ys, &sig);
            const bool same_m = sig == base_sig;
            slot = orig;
            if (!same_p || !same_m) {
                ++report.skipped_near_kink;
                continue;
            }
            const double numeric = (lp - lm) / (2.0 * opt.step);
            const double analytic = grefs[t].data[e];
            const double abs_err = std::abs(analytic - numeric);
            const double rel =
                abs_err / std::max({std::abs(analytic), std::abs(numeric), opt.denom_floor});
            ++gc.checked;
            gc.max_abs_error = std::max(gc.max_abs_error, abs_err);
            if (rel >= gc.max_rel_error) {
                gc.max_rel_error = rel;
                gc.worst_param = refs[t].name + "[" + std::to_string(e) + "]";
            }
        }
        gc.passed = gc.checked > 0 && gc.max_rel_error < opt.tolerance;
        report.groups.push_back(gc);
    }
    return report;
}

}  // namespace fisformer
