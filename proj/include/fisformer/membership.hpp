#pragma once

// Learnable membership functions. Widths and gaps are stored as unconstrained raw values
// and mapped through softplus plus a floor, so every bank is valid by construction:
//
//   Gaussian     raw = (center, s)              sigma = softplus(s) + floor
//   Triangular   raw = (peak b, gl, gr)         a = b - (softplus(gl) + floor), c = b + (softplus(gr) + floor)
//   Trapezoidal  raw = (b, gl, gp, gr)          a = b - (softplus(gl) + floor), c = b + softplus(gp),
//                                               d = c + (softplus(gr) + floor)
//
// Piecewise-linear kinds use gradient 0 at kink points (x == a, b, c or d).

#include "fisformer/tensor.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <string_view>

namespace fisformer {

enum class MfKind { Gaussian, Triangular, Trapezoidal };

inline constexpr std::size_t raw_param_count(MfKind kind) {
    switch (kind) {
        case MfKind::Gaussian: return 2;
        case MfKind::Triangular: return 3;
        case MfKind::Trapezoidal: return 4;
    }
    return 0;
}

inline std::string to_string(MfKind kind) {
    switch (kind) {
        case MfKind::Gaussian: return "gaussian";
        case MfKind::Triangular: return "triangular";
        case MfKind::Trapezoidal: return "trapezoidal";
    }
    return "?";
}

inline MfKind parse_mf_kind(std::string_view s) {
    if (s == "gaussian") return MfKind::Gaussian;
    if (s == "triangular") return MfKind::Triangular;
    if (s == "trapezoidal") return MfKind::Trapezoidal;
    throw ConfigError("unknown membership function kind '" + std::string(s) +
                      "' (expected gaussian, triangular or trapezoidal)");
}

/// Lower bound added to every softplus-mapped width or gap.
inline constexpr double kMfWidthFloor = 1e-3;

template <typename T>
T softplus(T x) {
    using std::exp;
    using std::log1p;
    return log1p(exp(-std::abs(x))) + std::max(x, T(0));
}

template <typename T>
T sigmoid(T x) {
    using std::exp;
    if (x >= T(0)) return T(1) / (T(1) + exp(-x));
    const T e = exp(x);
    return e / (T(1) + e);
}

/// Inverse of softplus for y > 0.
template <typename T>
T softplus_inverse(T y) {
    using std::expm1;
    using std::log;
    return y + log(-expm1(-y));
}

template <typename T>
using MfRaw = std::array<T, 4>;

template <typename T>
struct MfGrad {
    T value{};
    T d_x{};
    MfRaw<T> d_raw{};
};

namespace detail {

template <typename T>
T width(T raw) {
    return softplus(raw) + T(kMfWidthFloor);
}

}  // namespace detail

template <typename T>
T mf_eval(MfKind kind, T x, const MfRaw<T>& raw) {
    using std::exp;
    switch (kind) {
        case MfKind::Gaussian: {
            const T sigma = detail::width(raw[1]);
            const T z = x - raw[0];
            return exp(-(z * z) / (T(2) * sigma * sigma));
        }
        case MfKind::Triangular: {
            const T b = raw[0];
            const T a = b - detail::width(raw[1]);
            const T c = b + detail::width(raw[2]);
            return std::max(T(0), std::min((x - a) / (b - a), (c - x) / (c - b)));
        }
        case MfKind::Trapezoidal: {
            const T b = raw[0];
            const T a = b - detail::width(raw[1]);
            const T c = b + softplus(raw[2]);
            const T d = c + detail::width(raw[3]);
            return std::max(T(0), std::min({(x - a) / (b - a), T(1), (d - x) / (d - c)}));
        }
    }
    return T(0);
}

template <typename T>
MfGrad<T> mf_eval_with_grads(MfKind kind, T x, const MfRaw<T>& raw) {
    MfGrad<T> g;
    g.value = mf_eval(kind, x, raw);
    switch (kind) {
        case MfKind::Gaussian: {
            const T sigma = detail::width(raw[1]);
            const T z = x - raw[0];
            const T s2 = sigma * sigma;
            g.d_x = -g.value * z / s2;
            g.d_raw[0] = -g.d_x;
            g.d_raw[1] = g.value * z * z / (s2 * sigma) * sigmoid(raw[1]);
            break;
        }
        case MfKind::Triangular: {
            const T b = raw[0];
            const T gl = detail::width(raw[1]);
            const T gr = detail::width(raw[2]);
            const T a = b - gl;
            const T c = b + gr;
            if (x > a && x < b) {
                g.d_x = T(1) / gl;
                g.d_raw[0] = -T(1) / gl;
                g.d_raw[1] = -(x - b) / (gl * gl) * sigmoid(raw[1]);
            } else if (x > b && x < c) {
                g.d_x = -T(1) / gr;
                g.d_raw[0] = T(1) / gr;
                g.d_raw[2] = (x - b) / (gr * gr) * sigmoid(raw[2]);
            }
            break;
        }
        case MfKind::Trapezoidal: {
            const T b = raw[0];
            const T gl = detail::width(raw[1]);
            const T gp = softplus(raw[2]);
            const T gr = detail::width(raw[3]);
            const T a = b - gl;
            const T c = b + gp;
            const T d = c + gr;
            if (x > a && x < b) {
                g.d_x = T(1) / gl;
                g.d_raw[0] = -T(1) / gl;
                g.d_raw[1] = -(x - b) / (gl * gl) * sigmoid(raw[1]);
            } else if (x > c && x < d) {
                g.d_x = -T(1) / gr;
                g.d_raw[0] = T(1) / gr;
                g.d_raw[2] = T(1) / gr * sigmoid(raw[2]);
                g.d_raw[3] = (x - c) / (gr * gr) * sigmoid(raw[3]);
            }
            break;
        }
    }
    return g;
}

/// Index of the linear piece x falls on (0 for Gaussian). Two evaluations with equal
/// pieces are connected by a smooth path, which finite-difference checks rely on.
template <typename T>
int mf_piece(MfKind kind, T x, const MfRaw<T>& raw) {
    switch (kind) {
        case MfKind::Gaussian: return 0;
        case MfKind::Triangular: {
            const T b = raw[0];
            const T a = b - detail::width(raw[1]);
            const T c = b + detail::width(raw[2]);
            if (x <= a) return 0;
            if (x < b) return 1;
            if (x == b) return 2;
            if (x < c) return 3;
            return 4;
        }
        case MfKind::Trapezoidal: {
            const T b = raw[0];
            const T a = b - detail::width(raw[1]);
            const T c = b + softplus(raw[2]);
            const T d = c + detail::width(raw[3]);
            if (x <= a) return 0;
            if (x < b) return 1;
            if (x <= c) return 2;
            if (x < d) return 3;
            return 4;
        }
    }
    return 0;
}

/// Distance from x to the nearest kink; infinity for Gaussian.
template <typename T>
T mf_kink_distance(MfKind kind, T x, const MfRaw<T>& raw) {
    switch (kind) {
        case MfKind::Gaussian: return std::numeric_limits<T>::infinity();
        case MfKind::Triangular: {
            const T b = raw[0];
            const T a = b - detail::width(raw[1]);
            const T c = b + detail::width(raw[2]);
            return std::min({std::abs(x - a), std::abs(x - b), std::abs(x - c)});
        }
        case MfKind::Trapezoidal: {
            const T b = raw[0];
            const T a = b - detail::width(raw[1]);
            const T c = b + softplus(raw[2]);
            const T d = c + detail::width(raw[3]);
            return std::min({std::abs(x - a), std::abs(x - b), std::abs(x - c), std::abs(x - d)});
        }
    }
    return T(0);
}

/// Raw MF parameters per (token, feature, rule). raw[0] holds centers/peaks, raw[1..]
/// the width or gap pre-parameters. With `shared` set the token axis has length 1 and
/// the same functions apply to every token.
template <typename T>
struct MfParamBank {
    MfKind kind = MfKind::Gaussian;
    bool shared = false;
    std::vector<Tensor3<T>> raw;

    MfParamBank() = default;
    MfParamBank(MfKind k, std::size_t tokens, std::size_t features, std::size_t rules, bool shared_tokens)
        : kind(k), shared(shared_tokens) {
        raw.assign(raw_param_count(k), Tensor3<T>(shared_tokens ? 1 : tokens, features, rules));
    }

    std::size_t tokens() const { return raw.empty() ? 0 : raw[0].tokens; }
    std::size_t features() const { return raw.empty() ? 0 : raw[0].features; }
    std::size_t rules() const { return raw.empty() ? 0 : raw[0].rules; }

    bool accepts(std::size_t n_tokens, std::size_t n_features) const {
        return n_features == features() && (shared || n_tokens == tokens());
    }

    MfRaw<T> params(std::size_t i, std::size_t j, std::size_t r) const {
        const std::size_t ti = shared ? 0 : i;
        MfRaw<T> out{};
        for (std::size_t p = 0; p < raw.size(); ++p) out[p] = raw[p](ti, j, r);
        return out;
    }

    /// Adds `g` into the raw parameters of element (i, j, r).
    void accumulate(std::size_t i, std::size_t j, std::size_t r, const MfRaw<T>& g) {
        const std::size_t ti = shared ? 0 : i;
        for (std::size_t p = 0; p < raw.size(); ++p) raw[p](ti, j, r) += g[p];
    }

    MfParamBank zeros_like() const {
        MfParamBank z = *this;
        for (auto& t : z.raw) t.fill(T(0));
        return z;
    }

    template <typename U>
    MfParamBank<U> cast() const {
        MfParamBank<U> out;
        out.kind = kind;
        out.shared = shared;
        for (const auto& t : raw) {
            Tensor3<U> u(t.tokens, t.features, t.rules);
            for (std::size_t n = 0; n < t.data.size(); ++n) u.data[n] = static_cast<U>(t.data[n]);
            out.raw.push_back(std::move(u));
        }
        return out;
    }
};

/// Evenly spread centers over [-1, 1] with 0.01-scale seeded jitter. Gaussian widths start
/// at sigma = 1; piecewise-linear kinds start with supports that overlap their neighbours.
template <typename T>
MfParamBank<T> init_mf_bank(MfKind kind, std::size_t tokens, std::size_t features, std::size_t rules,
                            std::uint64_t seed, bool shared = false) {
    if (tokens == 0 || features == 0 || rules == 0) {
        throw ConfigError("membership bank needs tokens, features and rules >= 1 (got " + std::to_string(tokens) +
                          ", " + std::to_string(features) + ", " + std::to_string(rules) + ")");
    }
    MfParamBank<T> bank(kind, tokens, features, rules, shared);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> jitter(0.0, 0.01);
    const double spacing = rules > 1 ? 2.0 / static_cast<double>(rules - 1) : 2.0;
    const double floor = kMfWidthFloor;
    for (std::size_t i = 0; i < bank.tokens(); ++i) {
        for (std::size_t j = 0; j < features; ++j) {
            for (std::size_t r = 0; r < rules; ++r) {
                const double base = rules > 1 ? -1.0 + spacing * static_cast<double>(r) : 0.0;
                const double center = base + jitter(rng);
                switch (kind) {
                    case MfKind::Gaussian:
                        bank.raw[0](i, j, r) = static_cast<T>(center);
                        bank.raw[1](i, j, r) = static_cast<T>(softplus_inverse(1.0 - floor));
                        break;
                    case MfKind::Triangular:
                        bank.raw[0](i, j, r) = static_cast<T>(center);
                        bank.raw[1](i, j, r) = static_cast<T>(softplus_inverse(2.0 * spacing - floor));
                        bank.raw[2](i, j, r) = static_cast<T>(softplus_inverse(2.0 * spacing - floor));
                        break;
                    case MfKind::Trapezoidal: {
                        const double plateau = 0.5 * spacing;
                        bank.raw[0](i, j, r) = static_cast<T>(center - 0.5 * plateau);
                        bank.raw[1](i, j, r) = static_cast<T>(softplus_inverse(1.5 * spacing - floor));
                        bank.raw[2](i, j, r) = static_cast<T>(softplus_inverse(plateau));
                        bank.raw[3](i, j, r) = static_cast<T>(softplus_inverse(1.5 * spacing - floor));
                        break;
                    }
                }
            }
        }
    }
    return bank;
}

}  // namespace fisformer
