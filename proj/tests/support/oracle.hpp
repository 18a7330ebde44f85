#pragma once

// Reference implementations written as plain scalar loops over std::vector, sharing no
// arithmetic with the library. Only the parameter containers are read from library types.

#include "fisformer/fis.hpp"

#include <cmath>
#include <vector>

namespace oracle {

using Grid = std::vector<std::vector<double>>;

inline Grid to_grid(const fisformer::MatrixD& m) {
    Grid g(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) g[i][j] = m(i, j);
    return g;
}

inline double softplus(double x) { return x > 30.0 ? x + std::log(1.0 + std::exp(-x)) : std::log(1.0 + std::exp(x)); }

inline double gap(double raw) { return softplus(raw) + 1e-3; }

// Piecewise definitions, evaluated branch by branch.
inline double membership(fisformer::MfKind kind, double x, const double* raw) {
    switch (kind) {
        case fisformer::MfKind::Gaussian: {
            const double s = gap(raw[1]);
            return std::exp(-0.5 * (x - raw[0]) * (x - raw[0]) / (s * s));
        }
        case fisformer::MfKind::Triangular: {
            const double b = raw[0], a = b - gap(raw[1]), c = b + gap(raw[2]);
            if (x <= a || x >= c) return 0.0;
            if (x <= b) return (x - a) / (b - a);
            return (c - x) / (c - b);
        }
        case fisformer::MfKind::Trapezoidal: {
            const double b = raw[0], a = b - gap(raw[1]), c = b + softplus(raw[2]), d = c + gap(raw[3]);
            if (x <= a || x >= d) return 0.0;
            if (x < b) return (x - a) / (b - a);
            if (x <= c) return 1.0;
            return (d - x) / (d - c);
        }
    }
    return 0.0;
}

struct FisResult {
    Grid f;  // fuzzy interaction map
    Grid a;  // column softmax of f
    Grid o;  // a * v elementwise
    std::vector<std::vector<std::vector<double>>> pi_tilde;
};

inline FisResult fis(const Grid& q, const Grid& k, const Grid& v, const fisformer::FisParams<double>& p) {
    const std::size_t n = q.size(), d = q[0].size(), rules = static_cast<std::size_t>(p.consequents.rows());
    const auto& qb = p.q_bank;
    const auto& kb = p.k_bank;
    FisResult res;
    res.f.assign(n, std::vector<double>(d, 0.0));
    res.pi_tilde.assign(n, std::vector<std::vector<double>>(d, std::vector<double>(rules, 0.0)));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            std::vector<double> fire(rules);
            double total = 0.0;
            for (std::size_t r = 0; r < rules; ++r) {
                double rq[4] = {0, 0, 0, 0}, rk[4] = {0, 0, 0, 0};
                const std::size_t ti = qb.shared ? 0 : i;
                for (std::size_t m = 0; m < qb.raw.size(); ++m) {
                    rq[m] = qb.raw[m](ti, j, r);
                    rk[m] = kb.raw[m](ti, j, r);
                }
                fire[r] = membership(qb.kind, q[i][j], rq) * membership(kb.kind, k[i][j], rk);
                total += fire[r];
            }
            double acc = 0.0;
            for (std::size_t r = 0; r < rules; ++r) {
                const double w = fire[r] / (total + p.epsilon);
                res.pi_tilde[i][j][r] = w;
                const auto rr = static_cast<Eigen::Index>(r);
                acc += w * (p.consequents(rr, 0) * q[i][j] + p.consequents(rr, 1) * k[i][j] + p.consequents(rr, 2));
            }
            res.f[i][j] = acc;
        }
    }
    res.a.assign(n, std::vector<double>(d, 0.0));
    res.o.assign(n, std::vector<double>(d, 0.0));
    for (std::size_t j = 0; j < d; ++j) {
        double mx = res.f[0][j];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, res.f[i][j]);
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) z += std::exp(res.f[i][j] - mx);
        for (std::size_t i = 0; i < n; ++i) {
            res.a[i][j] = std::exp(res.f[i][j] - mx) / z;
            res.o[i][j] = res.a[i][j] * v[i][j];
        }
    }
    return res;
}

inline Grid self_attention(const Grid& q, const Grid& k, const Grid& v) {
    const std::size_t n = q.size(), d = q[0].size(), dv = v[0].size();
    Grid out(n, std::vector<double>(dv, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        double mx = -INFINITY;
        for (std::size_t t = 0; t < n; ++t) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += q[i][c] * k[t][c];
            s[t] = dot / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, s[t]);
        }
        double z = 0.0;
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t c = 0; c < dv; ++c) out[i][c] += s[t] / z * v[t][c];
    }
    return out;
}

inline double max_abs_diff(const Grid& a, const fisformer::MatrixD& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j)
            worst = std::max(worst, std::abs(a[i][j] - b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
    return worst;
}

}  // namespace oracle
