#pragma once

// FIS-based token interaction: a first-order Sugeno fuzzy system evaluated independently
// at every (token, feature) element of Q and K, followed by a per-feature softmax over
// tokens that gates V elementwise.
//
//   mu_q(i,j,r), mu_k(i,j,r)   membership degrees of q_ij, k_ij under rule r
//   pi(i,j,r)    = mu_q * mu_k                      product t-norm
//   pt(i,j,r)    = pi / (sum_s pi(i,j,s) + eps)     normalized firing
//   c(i,j,r)     = wq_r q_ij + wk_r k_ij + b_r      affine consequent
//   f(i,j)       = sum_r pt(i,j,r) c(i,j,r)          fuzzy interaction map
//   A(:,j)       = softmax(f(:,j))                  over tokens
//   O(i,j)       = A(i,j) V(i,j)
//
// Cost is O(T d R); there is no T x T interaction.

#include "fisformer/membership.hpp"
#include "fisformer/tensor.hpp"

#include <optional>
#include <random>

namespace fisformer {

/// Parameters of one interaction layer. `consequents` is R x 3 with columns (w_q, w_k, b).
template <typename T>
struct FisParams {
    MfParamBank<T> q_bank;
    MfParamBank<T> k_bank;
    Matrix<T> consequents;
    T epsilon = T(1e-8);

    std::size_t rules() const { return static_cast<std::size_t>(consequents.rows()); }

    void validate() const {
        if (q_bank.kind != k_bank.kind || q_bank.shared != k_bank.shared || q_bank.tokens() != k_bank.tokens() ||
            q_bank.features() != k_bank.features() || q_bank.rules() != k_bank.rules()) {
            throw ShapeError("query and key membership banks disagree in kind or shape");
        }
        if (q_bank.rules() != rules() || consequents.cols() != 3) {
            throw ShapeError("consequents must be " + std::to_string(q_bank.rules()) + "x3, got " +
                             shape_str(consequents));
        }
        if (!(epsilon > T(0))) throw ConfigError("firing-normalization epsilon must be > 0");
    }

    FisParams zeros_like() const {
        FisParams z;
        z.q_bank = q_bank.zeros_like();
        z.k_bank = k_bank.zeros_like();
        z.consequents = Matrix<T>::Zero(consequents.rows(), consequents.cols());
        z.epsilon = epsilon;
        return z;
    }

    template <typename U>
    FisParams<U> cast() const {
        FisParams<U> out;
        out.q_bank = q_bank.template cast<U>();
        out.k_bank = k_bank.template cast<U>();
        out.consequents = consequents.template cast<U>();
        out.epsilon = static_cast<U>(epsilon);
        return out;
    }
};

template <typename T>
FisParams<T> init_fis_params(MfKind kind, std::size_t tokens, std::size_t features, std::size_t rules,
                             std::uint64_t seed, bool shared = false, double epsilon = 1e-8) {
    FisParams<T> p;
    p.q_bank = init_mf_bank<T>(kind, tokens, features, rules, seed, shared);
    p.k_bank = init_mf_bank<T>(kind, tokens, features, rules, seed + 1, shared);
    std::mt19937_64 rng(seed + 2);
    std::normal_distribution<double> n(0.0, 0.5);
    p.consequents.resize(static_cast<Eigen::Index>(rules), 3);
    for (Eigen::Index r = 0; r < p.consequents.rows(); ++r) {
        for (Eigen::Index c = 0; c < 3; ++c) p.consequents(r, c) = static_cast<T>(n(rng));
    }
    p.epsilon = static_cast<T>(epsilon);
    return p;
}

/// Intermediate values of one forward pass; everything backward needs.
template <typename T>
struct FisTrace {
    Matrix<T> q, k, v;
    Tensor3<T> mu_q, mu_k;
    Tensor3<T> pi;
    Tensor3<T> pi_tilde;
    Tensor3<T> c;
    Matrix<T> f_qk;
    Matrix<T> a;
    Matrix<T> o;
};

template <typename T>
struct FisOutput {
    Matrix<T> o;
    std::optional<FisTrace<T>> trace;
};

template <typename T>
struct FisGrads {
    Matrix<T> q, k, v;
    FisParams<T> params;
};

template <typename T>
Tensor3<T> fuzzify(const Matrix<T>& m, const MfParamBank<T>& bank) {
    const auto rows = static_cast<std::size_t>(m.rows());
    const auto cols = static_cast<std::size_t>(m.cols());
    if (!bank.accepts(rows, cols)) {
        throw ShapeError("fuzzify: input " + shape_str(m) + " does not match membership bank " +
                         std::to_string(bank.tokens()) + "x" + std::to_string(bank.features()));
    }
    const std::size_t rules = bank.rules();
    Tensor3<T> mu(rows, cols, rules);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            const T x = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            for (std::size_t r = 0; r < rules; ++r) mu(i, j, r) = mf_eval(bank.kind, x, bank.params(i, j, r));
        }
    }
    return mu;
}

template <typename T>
Tensor3<T> fire_rules(const Tensor3<T>& mu_q, const Tensor3<T>& mu_k) {
    require_same_shape(mu_q, mu_k, "fire_rules");
    Tensor3<T> pi(mu_q.tokens, mu_q.features, mu_q.rules);
    for (std::size_t n = 0; n < pi.data.size(); ++n) pi.data[n] = mu_q.data[n] * mu_k.data[n];
    return pi;
}

template <typename T>
Tensor3<T> normalize_firings(const Tensor3<T>& pi, T epsilon) {
    if (!(epsilon > T(0))) throw ConfigError("normalize_firings: epsilon must be > 0");
    Tensor3<T> out(pi.tokens, pi.features, pi.rules);
    for (std::size_t i = 0; i < pi.tokens; ++i) {
        for (std::size_t j = 0; j < pi.features; ++j) {
            auto src = pi.slice(i, j);
            auto dst = out.slice(i, j);
            T sum = T(0);
            for (T p : src) sum += p;
            const T denom = sum + epsilon;
            for (std::size_t r = 0; r < src.size(); ++r) dst[r] = src[r] / denom;
        }
    }
    return out;
}

template <typename T>
Tensor3<T> rule_consequents(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& consequents) {
    require_same_shape(q, k, "rule_consequents");
    if (consequents.cols() != 3) throw ShapeError("consequents must have 3 columns (w_q, w_k, b)");
    const auto rows = static_cast<std::size_t>(q.rows());
    const auto cols = static_cast<std::size_t>(q.cols());
    const auto rules = static_cast<std::size_t>(consequents.rows());
    Tensor3<T> c(rows, cols, rules);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            const T qv = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            const T kv = k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            for (std::size_t r = 0; r < rules; ++r) {
                const auto rr = static_cast<Eigen::Index>(r);
                c(i, j, r) = consequents(rr, 0) * qv + consequents(rr, 1) * kv + consequents(rr, 2);
            }
        }
    }
    return c;
}

template <typename T>
Matrix<T> defuzzify(const Tensor3<T>& pi_tilde, const Tensor3<T>& c) {
    require_same_shape(pi_tilde, c, "defuzzify");
    Matrix<T> f(static_cast<Eigen::Index>(c.tokens), static_cast<Eigen::Index>(c.features));
    for (std::size_t i = 0; i < c.tokens; ++i) {
        for (std::size_t j = 0; j < c.features; ++j) {
            auto w = pi_tilde.slice(i, j);
            auto cv = c.slice(i, j);
            T acc = T(0);
            for (std::size_t r = 0; r < w.size(); ++r) acc += w[r] * cv[r];
            f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = acc;
        }
    }
    return f;
}

/// Softmax of every column over the token (row) axis, max-subtracted.
template <typename T>
Matrix<T> column_softmax(const Matrix<T>& f) {
    Matrix<T> a(f.rows(), f.cols());
    for (Eigen::Index j = 0; j < f.cols(); ++j) {
        const T mx = f.col(j).maxCoeff();
        T sum = T(0);
        for (Eigen::Index i = 0; i < f.rows(); ++i) {
            a(i, j) = std::exp(f(i, j) - mx);
            sum += a(i, j);
        }
        a.col(j) /= sum;
    }
    return a;
}

template <typename T>
struct FisGate {
    Matrix<T> a;
    Matrix<T> o;
};

template <typename T>
FisGate<T> fis_gate(const Matrix<T>& f_qk, const Matrix<T>& v) {
    require_same_shape(f_qk, v, "fis_gate");
    FisGate<T> g;
    g.a = column_softmax(f_qk);
    g.o = g.a.cwiseProduct(v);
    return g;
}

template <typename T>
FisOutput<T> fis_forward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const FisParams<T>& params,
                         bool keep_trace = false) {
    require_same_shape(q, k, "fis_forward(q, k)");
    require_same_shape(q, v, "fis_forward(q, v)");
    params.validate();
    FisTrace<T> t;
    t.mu_q = fuzzify(q, params.q_bank);
    t.mu_k = fuzzify(k, params.k_bank);
    t.pi = fire_rules(t.mu_q, t.mu_k);
    t.pi_tilde = normalize_firings(t.pi, params.epsilon);
    t.c = rule_consequents(q, k, params.consequents);
    t.f_qk = defuzzify(t.pi_tilde, t.c);
    auto gate = fis_gate(t.f_qk, v);
    FisOutput<T> out;
    out.o = gate.o;
    if (keep_trace) {
        t.q = q;
        t.k = k;
        t.v = v;
        t.a = std::move(gate.a);
        t.o = std::move(gate.o);
        out.trace = std::move(t);
    }
    return out;
}

/// Reverse-mode gradients of a scalar loss given dL/dO.
template <typename T>
FisGrads<T> fis_backward(const FisParams<T>& params, const FisTrace<T>& t, const Matrix<T>& d_o) {
    if (t.a.size() == 0 || t.pi.data.empty()) {
        throw Error("fis_backward: trace is empty (run fis_forward with keep_trace)");
    }
    require_same_shape(d_o, t.o, "fis_backward");
    const auto rows = static_cast<std::size_t>(t.q.rows());
    const auto cols = static_cast<std::size_t>(t.q.cols());
    const std::size_t rules = params.rules();

    FisGrads<T> g;
    g.params = params.zeros_like();
    g.v = t.a.cwiseProduct(d_o);
    const Matrix<T> d_a = t.v.cwiseProduct(d_o);

    // softmax over each column
    Matrix<T> d_f(t.a.rows(), t.a.cols());
    for (Eigen::Index j = 0; j < t.a.cols(); ++j) {
        const T dot = t.a.col(j).dot(d_a.col(j));
        for (Eigen::Index i = 0; i < t.a.rows(); ++i) d_f(i, j) = t.a(i, j) * (d_a(i, j) - dot);
    }

    g.q = Matrix<T>::Zero(t.q.rows(), t.q.cols());
    g.k = Matrix<T>::Zero(t.k.rows(), t.k.cols());
    std::vector<T> d_pt(rules), d_pi(rules);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            const auto ii = static_cast<Eigen::Index>(i);
            const auto jj = static_cast<Eigen::Index>(j);
            const T df = d_f(ii, jj);
            const T qv = t.q(ii, jj);
            const T kv = t.k(ii, jj);
            T dq = T(0), dk = T(0);

            // defuzzify and consequents
            T pi_sum = T(0);
            T weighted = T(0);
            for (std::size_t r = 0; r < rules; ++r) {
                const auto rr = static_cast<Eigen::Index>(r);
                d_pt[r] = df * t.c(i, j, r);
                const T dc = df * t.pi_tilde(i, j, r);
                dq += dc * params.consequents(rr, 0);
                dk += dc * params.consequents(rr, 1);
                g.params.consequents(rr, 0) += dc * qv;
                g.params.consequents(rr, 1) += dc * kv;
                g.params.consequents(rr, 2) += dc;
                pi_sum += t.pi(i, j, r);
                weighted += d_pt[r] * t.pi_tilde(i, j, r);
            }

            // firing normalization: pt_r = pi_r / (S + eps)
            const T denom = pi_sum + params.epsilon;
            for (std::size_t r = 0; r < rules; ++r) d_pi[r] = (d_pt[r] - weighted) / denom;

            // product t-norm and memberships
            for (std::size_t r = 0; r < rules; ++r) {
                const T d_mu_q = d_pi[r] * t.mu_k(i, j, r);
                const T d_mu_k = d_pi[r] * t.mu_q(i, j, r);
                const auto gq = mf_eval_with_grads(params.q_bank.kind, qv, params.q_bank.params(i, j, r));
                const auto gk = mf_eval_with_grads(params.k_bank.kind, kv, params.k_bank.params(i, j, r));
                dq += d_mu_q * gq.d_x;
                dk += d_mu_k * gk.d_x;
                MfRaw<T> rq{}, rk{};
                for (std::size_t p = 0; p < 4; ++p) {
                    rq[p] = d_mu_q * gq.d_raw[p];
                    rk[p] = d_mu_k * gk.d_raw[p];
                }
                g.params.q_bank.accumulate(i, j, r, rq);
                g.params.k_bank.accumulate(i, j, r, rk);
            }
            g.q(ii, jj) = dq;
            g.k(ii, jj) = dk;
        }
    }
    return g;
}

}  // namespace fisformer
