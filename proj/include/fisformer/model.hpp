#pragma once

// Variate-tokenized encoder: each variate's lookback vector becomes one token,
//
//   H0      = X^T W_e + b_e                                  (N x D)
//   H_{l+1} = Block_l(H_l)                                   post-norm residual blocks
//   Y       = (H_L W_p + b_p)^T                              (P x N)
//
//   Block(h): Q, K, V = h W_{q,k,v} + b_{q,k,v}
//             h1  = LN1(h + Interaction(Q, K, V))            FIS or self-attention
//             out = LN2(h1 + GELU(h1 W_1 + b_1) W_2 + b_2)

#include "fisformer/attention.hpp"
#include "fisformer/fis.hpp"
#include "fisformer/layers.hpp"

#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace fisformer {

enum class Interaction { Fis, SelfAttention };

inline std::string to_string(Interaction i) { return i == Interaction::Fis ? "fis" : "attention"; }

inline Interaction parse_interaction(std::string_view s) {
    if (s == "fis") return Interaction::Fis;
    if (s == "attention" || s == "self_attention") return Interaction::SelfAttention;
    throw ConfigError("unknown interaction '" + std::string(s) + "' (expected fis or attention)");
}

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t layers = 2;
    std::size_t rules = 3;
    Interaction interaction = Interaction::Fis;
    MfKind mf_kind = MfKind::Gaussian;
    std::size_t ffn_hidden = 0;  // 0 means 4 * d_model
    std::size_t lookback = 96;
    std::size_t horizon = 24;
    std::size_t n_vars = 1;
    bool share_mf_across_tokens = false;
    double epsilon = 1e-8;
    double dropout = 0.0;
    double layernorm_eps = 1e-8;

    std::size_t ffn_width() const { return ffn_hidden == 0 ? 4 * d_model : ffn_hidden; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
        if (d_model == 0) fail("d_model must be >= 1");
        if (rules == 0) fail("rules must be >= 1");
        if (lookback == 0) fail("lookback must be >= 1");
        if (horizon == 0) fail("horizon must be >= 1");
        if (n_vars == 0) fail("n_vars must be >= 1");
        if (!(epsilon > 0.0)) fail("epsilon must be > 0");
        if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
        if (!(layernorm_eps > 0.0)) fail("layernorm_eps must be > 0");
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Which logical part of the network a parameter tensor belongs to.
enum class ParamGroup { Embedding, QProj, KProj, VProj, MfCenter, MfWidth, Consequent, LayerNorm, Ffn, Projection };

inline std::string to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::Embedding: return "embedding";
        case ParamGroup::QProj: return "q_proj";
        case ParamGroup::KProj: return "k_proj";
        case ParamGroup::VProj: return "v_proj";
        case ParamGroup::MfCenter: return "mf_center";
        case ParamGroup::MfWidth: return "mf_width";
        case ParamGroup::Consequent: return "consequent";
        case ParamGroup::LayerNorm: return "layer_norm";
        case ParamGroup::Ffn: return "ffn";
        case ParamGroup::Projection: return "projection";
    }
    return "?";
}

template <typename T>
struct BlockParams {
    Matrix<T> wq, wk, wv;
    RowVector<T> bq, bk, bv;
    std::optional<FisParams<T>> fis;
    RowVector<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    Matrix<T> ffn_w1, ffn_w2;
    RowVector<T> ffn_b1, ffn_b2;
};

template <typename T>
struct ModelParams {
    Matrix<T> embed_w;  // lookback x D
    RowVector<T> embed_b;
    std::vector<BlockParams<T>> blocks;
    Matrix<T> proj_w;  // D x horizon
    RowVector<T> proj_b;
};

/// A named, flat view of one parameter tensor.
template <typename E>
struct ParamRef {
    std::string name;
    ParamGroup group;
    std::span<E> data;
    std::vector<std::size_t> dims;
};

namespace detail {

template <typename Self>
auto collect_params(Self& p) {
    using Scalar = std::remove_cvref_t<decltype(p.embed_b[0])>;
    using E = std::conditional_t<std::is_const_v<Self>, const Scalar, Scalar>;
    std::vector<ParamRef<E>> refs;
    auto add = [&](std::string name, ParamGroup g, auto& m) {
        std::vector<std::size_t> dims;
        using M = std::remove_cvref_t<decltype(m)>;
        if constexpr (M::RowsAtCompileTime == 1) {
            dims = {static_cast<std::size_t>(m.size())};
        } else {
            dims = {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
        }
        refs.push_back({std::move(name), g, std::span<E>(m.data(), static_cast<std::size_t>(m.size())), dims});
    };
    auto add_t3 = [&](std::string name, ParamGroup g, auto& t) {
        refs.push_back({std::move(name), g, std::span<E>(t.data.data(), t.data.size()), {t.tokens, t.features, t.rules}});
    };
    add("embed.weight", ParamGroup::Embedding, p.embed_w);
    add("embed.bias", ParamGroup::Embedding, p.embed_b);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        auto& b = p.blocks[l];
        const std::string pre = "block" + std::to_string(l) + ".";
        add(pre + "q.weight", ParamGroup::QProj, b.wq);
        add(pre + "q.bias", ParamGroup::QProj, b.bq);
        add(pre + "k.weight", ParamGroup::KProj, b.wk);
        add(pre + "k.bias", ParamGroup::KProj, b.bk);
        add(pre + "v.weight", ParamGroup::VProj, b.wv);
        add(pre + "v.bias", ParamGroup::VProj, b.bv);
        if (b.fis) {
            auto& f = *b.fis;
            for (auto [bank, tag] : {std::pair{&f.q_bank, "q_mf"}, std::pair{&f.k_bank, "k_mf"}}) {
                for (std::size_t r = 0; r < bank->raw.size(); ++r) {
                    const bool center = r == 0;
                    add_t3(pre + "fis." + tag + (center ? ".center" : ".width" + std::to_string(r)),
                           center ? ParamGroup::MfCenter : ParamGroup::MfWidth, bank->raw[r]);
                }
            }
            add(pre + "fis.consequents", ParamGroup::Consequent, f.consequents);
        }
        add(pre + "ln1.gain", ParamGroup::LayerNorm, b.ln1_gain);
        add(pre + "ln1.bias", ParamGroup::LayerNorm, b.ln1_bias);
        add(pre + "ffn.w1", ParamGroup::Ffn, b.ffn_w1);
        add(pre + "ffn.b1", ParamGroup::Ffn, b.ffn_b1);
        add(pre + "ffn.w2", ParamGroup::Ffn, b.ffn_w2);
        add(pre + "ffn.b2", ParamGroup::Ffn, b.ffn_b2);
        add(pre + "ln2.gain", ParamGroup::LayerNorm, b.ln2_gain);
        add(pre + "ln2.bias", ParamGroup::LayerNorm, b.ln2_bias);
    }
    add("proj.weight", ParamGroup::Projection, p.proj_w);
    add("proj.bias", ParamGroup::Projection, p.proj_b);
    return refs;
}

}  // namespace detail

template <typename T>
std::vector<ParamRef<T>> param_refs(ModelParams<T>& p) {
    return detail::collect_params(p);
}

template <typename T>
std::vector<ParamRef<const T>> param_refs(const ModelParams<T>& p) {
    return detail::collect_params(p);
}

template <typename T>
std::size_t param_count(const ModelParams<T>& p) {
    std::size_t n = 0;
    for (const auto& r : param_refs(p)) n += r.data.size();
    return n;
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
    ModelParams<T> z = p;
    for (auto& r : param_refs(z)) std::fill(r.data.begin(), r.data.end(), T(0));
    return z;
}

template <typename U, typename T>
ModelParams<U> cast_params(const ModelParams<T>& p) {
    ModelParams<U> out;
    out.embed_w = p.embed_w.template cast<U>();
    out.embed_b = p.embed_b.template cast<U>();
    for (const auto& b : p.blocks) {
        BlockParams<U> c;
        c.wq = b.wq.template cast<U>();
        c.wk = b.wk.template cast<U>();
        c.wv = b.wv.template cast<U>();
        c.bq = b.bq.template cast<U>();
        c.bk = b.bk.template cast<U>();
        c.bv = b.bv.template cast<U>();
        if (b.fis) c.fis = b.fis->template cast<U>();
        c.ln1_gain = b.ln1_gain.template cast<U>();
        c.ln1_bias = b.ln1_bias.template cast<U>();
        c.ln2_gain = b.ln2_gain.template cast<U>();
        c.ln2_bias = b.ln2_bias.template cast<U>();
        c.ffn_w1 = b.ffn_w1.template cast<U>();
        c.ffn_w2 = b.ffn_w2.template cast<U>();
        c.ffn_b1 = b.ffn_b1.template cast<U>();
        c.ffn_b2 = b.ffn_b2.template cast<U>();
        out.blocks.push_back(std::move(c));
    }
    out.proj_w = p.proj_w.template cast<U>();
    out.proj_b = p.proj_b.template cast<U>();
    return out;
}

/// Every parameter rounded through 32-bit float, the precision checkpoints store.
template <typename T>
ModelParams<T> round_to_f32(const ModelParams<T>& p) {
    ModelParams<T> out = p;
    for (auto& r : param_refs(out)) {
        for (auto& x : r.data) x = static_cast<T>(static_cast<float>(x));
    }
    return out;
}

namespace detail {

// Each tensor draws from its own stream, so toggling the interaction mode leaves the
// initialization of every shared tensor unchanged.
template <typename T>
void init_linear(Matrix<T>& w, RowVector<T>& b, std::size_t in, std::size_t out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    w.resize(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
    b.resize(static_cast<Eigen::Index>(out));
    for (Eigen::Index n = 0; n < w.size(); ++n) w.data()[n] = static_cast<T>(u(rng));
    for (Eigen::Index n = 0; n < b.size(); ++n) b[n] = static_cast<T>(u(rng));
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t x = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xC2B2AE3D27D4EB4FULL);
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdULL;
    x ^= x >> 33;
    return x;
}

}  // namespace detail

template <typename T>
ModelParams<T> init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    using detail::mix_seed;
    ModelParams<T> p;
    const std::size_t d = cfg.d_model;
    detail::init_linear(p.embed_w, p.embed_b, cfg.lookback, d, mix_seed(seed, 1));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        BlockParams<T> b;
        detail::init_linear(b.wq, b.bq, d, d, mix_seed(seed, 10 + l, 1));
        detail::init_linear(b.wk, b.bk, d, d, mix_seed(seed, 10 + l, 2));
        detail::init_linear(b.wv, b.bv, d, d, mix_seed(seed, 10 + l, 3));
        if (cfg.interaction == Interaction::Fis) {
            b.fis = init_fis_params<T>(cfg.mf_kind, cfg.n_vars, d, cfg.rules, mix_seed(seed, 10 + l, 4),
                                       cfg.share_mf_across_tokens, cfg.epsilon);
        }
        b.ln1_gain = RowVector<T>::Ones(static_cast<Eigen::Index>(d));
        b.ln1_bias = RowVector<T>::Zero(static_cast<Eigen::Index>(d));
        b.ln2_gain = RowVector<T>::Ones(static_cast<Eigen::Index>(d));
        b.ln2_bias = RowVector<T>::Zero(static_cast<Eigen::Index>(d));
        detail::init_linear(b.ffn_w1, b.ffn_b1, d, cfg.ffn_width(), mix_seed(seed, 10 + l, 5));
        detail::init_linear(b.ffn_w2, b.ffn_b2, cfg.ffn_width(), d, mix_seed(seed, 10 + l, 6));
        p.blocks.push_back(std::move(b));
    }
    detail::init_linear(p.proj_w, p.proj_b, d, cfg.horizon, mix_seed(seed, 2));
    return p;
}

/// Throws unless every tensor has the shape `cfg` implies.
template <typename T>
void check_params_match(const ModelParams<T>& p, const ModelConfig& cfg) {
    const ModelParams<T> expected = init_model_params<T>(cfg, 0);
    const auto a = param_refs(p);
    const auto b = param_refs(expected);
    if (a.size() != b.size()) {
        throw ShapeError("parameter set has " + std::to_string(a.size()) + " tensors, config implies " +
                         std::to_string(b.size()));
    }
    for (std::size_t n = 0; n < a.size(); ++n) {
        if (a[n].name != b[n].name || a[n].dims != b[n].dims) {
            throw ShapeError("parameter '" + a[n].name + "' does not match config (expected '" + b[n].name + "')");
        }
    }
}

// Forward pass

template <typename T>
struct BlockTrace {
    Matrix<T> h_in, q, k, v;
    std::optional<FisTrace<T>> fis;
    Matrix<T> attn_weights;
    Matrix<T> drop1, drop2;  // inverted-dropout masks, empty when off
    LayerNormCache<T> ln1, ln2;
    Matrix<T> h1, ffn_pre, ffn_act;
};

template <typename T>
struct ModelTrace {
    Matrix<T> tokens;  // N x lookback
    std::vector<BlockTrace<T>> blocks;
    Matrix<T> h_last;
};

namespace detail {

template <typename T>
Matrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, std::mt19937_64& rng) {
    std::bernoulli_distribution keep(1.0 - p);
    Matrix<T> m(rows, cols);
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    for (Eigen::Index n = 0; n < m.size(); ++n) m.data()[n] = keep(rng) ? scale : T(0);
    return m;
}

}  // namespace detail

/// Token mixing sub-layer of a block.
template <typename T>
Matrix<T> interaction_forward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const BlockParams<T>& bp,
                              const ModelConfig& cfg, BlockTrace<T>* trace) {
    if (cfg.interaction == Interaction::Fis) {
        if (!bp.fis) throw ShapeError("FIS interaction selected but block has no FIS parameters");
        auto r = fis_forward(q, k, v, *bp.fis, trace != nullptr);
        if (trace) trace->fis = std::move(r.trace);
        return std::move(r.o);
    }
    auto r = self_attention(q, k, v);
    if (trace) trace->attn_weights = std::move(r.weights);
    return std::move(r.out);
}

template <typename T>
Matrix<T> encoder_block(const Matrix<T>& h, const BlockParams<T>& bp, const ModelConfig& cfg,
                        BlockTrace<T>* trace = nullptr, std::mt19937_64* dropout_rng = nullptr) {
    const T ln_eps = static_cast<T>(cfg.layernorm_eps);
    Matrix<T> q = linear(h, bp.wq, bp.bq);
    Matrix<T> k = linear(h, bp.wk, bp.bk);
    Matrix<T> v = linear(h, bp.wv, bp.bv);
    Matrix<T> inter = interaction_forward(q, k, v, bp, cfg, trace);
    const bool drop = dropout_rng != nullptr && cfg.dropout > 0.0;
    Matrix<T> mask1, mask2;
    if (drop) {
        mask1 = detail::dropout_mask<T>(inter.rows(), inter.cols(), cfg.dropout, *dropout_rng);
        inter = inter.cwiseProduct(mask1);
    }
    LayerNormCache<T> c1, c2;
    Matrix<T> h1 = layer_norm<T>(h + inter, bp.ln1_gain, bp.ln1_bias, ln_eps, trace ? &c1 : nullptr);
    Matrix<T> pre = linear(h1, bp.ffn_w1, bp.ffn_b1);
    Matrix<T> act = pre.unaryExpr([](T x) { return gelu(x); });
    Matrix<T> ff = linear(act, bp.ffn_w2, bp.ffn_b2);
    if (drop) {
        mask2 = detail::dropout_mask<T>(ff.rows(), ff.cols(), cfg.dropout, *dropout_rng);
        ff = ff.cwiseProduct(mask2);
    }
    Matrix<T> out = layer_norm<T>(h1 + ff, bp.ln2_gain, bp.ln2_bias, ln_eps, trace ? &c2 : nullptr);
    if (trace) {
        trace->h_in = h;
        trace->q = std::move(q);
        trace->k = std::move(k);
        trace->v = std::move(v);
        trace->drop1 = std::move(mask1);
        trace->drop2 = std::move(mask2);
        trace->ln1 = std::move(c1);
        trace->ln2 = std::move(c2);
        trace->h1 = std::move(h1);
        trace->ffn_pre = std::move(pre);
        trace->ffn_act = std::move(act);
    }
    return out;
}

/// Lookback x N input to N x D tokens; one affine map shared by every variate.
template <typename T>
Matrix<T> embed_variates(const Matrix<T>& x, const ModelParams<T>& p) {
    if (x.rows() != p.embed_w.rows()) {
        throw ShapeError("embed: input has " + std::to_string(x.rows()) + " time steps, model expects " +
                         std::to_string(p.embed_w.rows()));
    }
    return linear<T>(x.transpose(), p.embed_w, p.embed_b);
}

/// N x D tokens to a P x N forecast.
template <typename T>
Matrix<T> project(const Matrix<T>& h_last, const ModelParams<T>& p) {
    return linear(h_last, p.proj_w, p.proj_b).transpose();
}

template <typename T>
Matrix<T> model_forward(const Matrix<T>& x, const ModelParams<T>& p, const ModelConfig& cfg,
                        ModelTrace<T>* trace = nullptr, std::mt19937_64* dropout_rng = nullptr) {
    if (x.cols() != static_cast<Eigen::Index>(cfg.n_vars) || x.rows() != static_cast<Eigen::Index>(cfg.lookback)) {
        throw ShapeError("model input is " + shape_str(x) + ", config expects " + shape_str(cfg.lookback, cfg.n_vars));
    }
    if (p.blocks.size() != cfg.layers) throw ShapeError("parameter block count does not match config layers");
    Matrix<T> h = embed_variates(x, p);
    if (trace) {
        trace->tokens = x.transpose();
        trace->blocks.assign(p.blocks.size(), {});
    }
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        h = encoder_block(h, p.blocks[l], cfg, trace ? &trace->blocks[l] : nullptr, dropout_rng);
    }
    if (trace) trace->h_last = h;
    return project(h, p);
}

// Backward pass

template <typename T>
Matrix<T> encoder_block_backward(const BlockParams<T>& bp, const ModelConfig& cfg, const BlockTrace<T>& t,
                                 const Matrix<T>& d_out, BlockParams<T>& g) {
    // out = LN2(h1 + ff)
    Matrix<T> d_res2 = layer_norm_backward(t.ln2, bp.ln2_gain, d_out, g.ln2_gain, g.ln2_bias);
    Matrix<T> d_ff = d_res2;
    if (t.drop2.size() != 0) d_ff = d_ff.cwiseProduct(t.drop2);
    Matrix<T> d_act = linear_backward(t.ffn_act, bp.ffn_w2, d_ff, g.ffn_w2, g.ffn_b2);
    Matrix<T> d_pre = d_act.cwiseProduct(t.ffn_pre.unaryExpr([](T x) { return gelu_grad(x); }));
    Matrix<T> d_h1 = d_res2 + linear_backward(t.h1, bp.ffn_w1, d_pre, g.ffn_w1, g.ffn_b1);

    // h1 = LN1(h + inter)
    Matrix<T> d_res1 = layer_norm_backward(t.ln1, bp.ln1_gain, d_h1, g.ln1_gain, g.ln1_bias);
    Matrix<T> d_inter = d_res1;
    if (t.drop1.size() != 0) d_inter = d_inter.cwiseProduct(t.drop1);

    Matrix<T> d_q, d_k, d_v;
    if (cfg.interaction == Interaction::Fis) {
        auto fg = fis_backward(*bp.fis, *t.fis, d_inter);
        for (std::size_t n = 0; n < fg.params.q_bank.raw.size(); ++n) {
            auto& dst_q = g.fis->q_bank.raw[n].data;
            auto& dst_k = g.fis->k_bank.raw[n].data;
            for (std::size_t e = 0; e < dst_q.size(); ++e) {
                dst_q[e] += fg.params.q_bank.raw[n].data[e];
                dst_k[e] += fg.params.k_bank.raw[n].data[e];
            }
        }
        g.fis->consequents += fg.params.consequents;
        d_q = std::move(fg.q);
        d_k = std::move(fg.k);
        d_v = std::move(fg.v);
    } else {
        auto ag = self_attention_backward(t.q, t.k, t.v, t.attn_weights, d_inter);
        d_q = std::move(ag.q);
        d_k = std::move(ag.k);
        d_v = std::move(ag.v);
    }
    Matrix<T> d_h = d_res1;
    d_h += linear_backward(t.h_in, bp.wq, d_q, g.wq, g.bq);
    d_h += linear_backward(t.h_in, bp.wk, d_k, g.wk, g.bk);
    d_h += linear_backward(t.h_in, bp.wv, d_v, g.wv, g.bv);
    return d_h;
}

/// Accumulates dLoss/dparams into `grads` (which must be shaped like `p`).
template <typename T>
void model_backward(const ModelParams<T>& p, const ModelConfig& cfg, const ModelTrace<T>& t,
                    const Matrix<T>& d_forecast, ModelParams<T>& grads) {
    if (d_forecast.rows() != p.proj_w.cols() || d_forecast.cols() != t.h_last.rows()) {
        throw ShapeError("model_backward: upstream gradient " + shape_str(d_forecast) + " does not match forecast " +
                         shape_str(p.proj_w.cols(), t.h_last.rows()));
    }
    Matrix<T> d_h = linear_backward<T>(t.h_last, p.proj_w, d_forecast.transpose(), grads.proj_w, grads.proj_b);
    for (std::size_t l = p.blocks.size(); l-- > 0;) {
        d_h = encoder_block_backward(p.blocks[l], cfg, t.blocks[l], d_h, grads.blocks[l]);
    }
    linear_backward<T>(t.tokens, p.embed_w, d_h, grads.embed_w, grads.embed_b);
}

/// Piece index of every piecewise-linear membership evaluation in a traced forward pass.
template <typename T>
std::vector<int> kink_signature(const ModelParams<T>& p, const ModelTrace<T>& t) {
    std::vector<int> sig;
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        const auto& bp = p.blocks[l];
        const auto& bt = t.blocks[l];
        if (!bp.fis || !bt.fis || bp.fis->q_bank.kind == MfKind::Gaussian) continue;
        for (Eigen::Index i = 0; i < bt.q.rows(); ++i) {
            for (Eigen::Index j = 0; j < bt.q.cols(); ++j) {
                for (std::size_t r = 0; r < bp.fis->rules(); ++r) {
                    const auto ui = static_cast<std::size_t>(i), uj = static_cast<std::size_t>(j);
                    sig.push_back(mf_piece(bp.fis->q_bank.kind, bt.q(i, j), bp.fis->q_bank.params(ui, uj, r)));
                    sig.push_back(mf_piece(bp.fis->k_bank.kind, bt.k(i, j), bp.fis->k_bank.params(ui, uj, r)));
                }
            }
        }
    }
    return sig;
}

}  // namespace fisformer
