#include "fisformer/attention.hpp"
#include "fisformer/model.hpp"
#include "fisformer/training.hpp"
#include "support/oracle.hpp"

#include <gtest/gtest.h>

#include <random>
#include <set>

using namespace fisformer;

namespace {

MatrixD random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    MatrixD m(r, c);
    for (Eigen::Index n = 0; n < m.size(); ++n) m.data()[n] = g(rng);
    return m;
}

ModelConfig small_config(Interaction mode = Interaction::Fis, MfKind kind = MfKind::Gaussian) {
    ModelConfig c;
    c.n_vars = 3;
    c.lookback = 16;
    c.horizon = 4;
    c.d_model = 8;
    c.layers = 2;
    c.rules = 3;
    c.interaction = mode;
    c.mf_kind = kind;
    return c;
}

void zero_value_projection(ModelParams<double>& p) {
    for (auto& b : p.blocks) {
        b.wv.setZero();
        b.bv.setZero();
    }
}

}  // namespace

TEST(Embed, ShapeAndZeroInput) {
    ModelConfig c;
    c.n_vars = 7;
    c.lookback = 96;
    c.d_model = 64;
    auto p = init_model_params<double>(c, 1);
    std::mt19937_64 rng(1);
    EXPECT_EQ(embed_variates(random_matrix(96, 7, rng), p).rows(), 7);
    EXPECT_EQ(embed_variates(random_matrix(96, 7, rng), p).cols(), 64);
    p.embed_b.setZero();
    EXPECT_TRUE(embed_variates(MatrixD(MatrixD::Zero(96, 7)), p).isZero(0.0));
    EXPECT_THROW(embed_variates(MatrixD(MatrixD::Zero(95, 7)), p), ShapeError);
}

TEST(Embed, TokensAreIndependent) {
    ModelConfig c = small_config();
    const auto p = init_model_params<double>(c, 2);
    std::mt19937_64 rng(2);
    const MatrixD x = random_matrix(16, 3, rng);
    MatrixD y = x;
    y.col(2) = random_matrix(16, 1, rng);
    const MatrixD hx = embed_variates(x, p), hy = embed_variates(y, p);
    EXPECT_EQ(hx.row(0), hy.row(0));
    EXPECT_EQ(hx.row(1), hy.row(1));
    EXPECT_NE(hx.row(2), hy.row(2));
}

TEST(SelfAttention, SingleTokenReturnsValue) {
    std::mt19937_64 rng(3);
    const MatrixD v = random_matrix(1, 5, rng);
    const auto r = self_attention<double>(random_matrix(1, 5, rng), random_matrix(1, 5, rng), v);
    EXPECT_EQ(r.weights(0, 0), 1.0);
    EXPECT_EQ(r.out, v);
}

TEST(SelfAttention, OrthogonalKeysGiveNearIdentity) {
    std::mt19937_64 rng(4);
    const MatrixD q = MatrixD::Identity(4, 8) * 40.0;
    const MatrixD v = random_matrix(4, 8, rng);
    const auto r = self_attention<double>(q, q, v);
    EXPECT_LT((r.weights - MatrixD::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(oracle::max_abs_diff(oracle::self_attention(oracle::to_grid(q), oracle::to_grid(q), oracle::to_grid(v)),
                                   r.out),
              1e-12);
    EXPECT_LT((r.out - v).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SelfAttention, MatchesOracle) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const MatrixD q = random_matrix(4, 8, rng), k = random_matrix(4, 8, rng), v = random_matrix(4, 8, rng);
        const auto r = self_attention(q, k, v);
        EXPECT_LT(oracle::max_abs_diff(
                      oracle::self_attention(oracle::to_grid(q), oracle::to_grid(k), oracle::to_grid(v)), r.out),
                  1e-12);
    }
}

TEST(SelfAttention, BackwardMatchesFiniteDifferences) {
    std::mt19937_64 rng(6);
    const MatrixD q = random_matrix(4, 3, rng), k = random_matrix(4, 3, rng), v = random_matrix(4, 3, rng);
    const MatrixD w = random_matrix(4, 3, rng);
    const auto fwd = self_attention(q, k, v);
    const auto g = self_attention_backward(q, k, v, fwd.weights, w);
    const double h = 1e-6;
    auto loss = [&](const MatrixD& qq, const MatrixD& kk, const MatrixD& vv) {
        return self_attention(qq, kk, vv).out.cwiseProduct(w).sum();
    };
    for (int which = 0; which < 3; ++which) {
        const MatrixD& analytic = which == 0 ? g.q : which == 1 ? g.k : g.v;
        for (Eigen::Index n = 0; n < q.size(); ++n) {
            MatrixD in[3][2] = {{q, q}, {k, k}, {v, v}};
            in[which][0].data()[n] += h;
            in[which][1].data()[n] -= h;
            const double numeric = (loss(in[0][0], in[1][0], in[2][0]) - loss(in[0][1], in[1][1], in[2][1])) / (2 * h);
            EXPECT_NEAR(analytic.data()[n], numeric, 1e-8 * std::max(1.0, std::abs(numeric)));
        }
    }
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
    std::mt19937_64 rng(7);
    const MatrixD x = random_matrix(6, 16, rng, 3.0);
    const MatrixD y = layer_norm<double>(x, RowVector<double>::Ones(16), RowVector<double>::Zero(16), 1e-8, nullptr);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        EXPECT_NEAR(y.row(i).mean(), 0.0, 1e-6);
        EXPECT_NEAR(y.row(i).array().square().mean(), 1.0, 1e-6);
    }
}

TEST(EncoderBlock, ZeroInteractionAndFfnIsDoubleLayerNorm) {
    for (Interaction mode : {Interaction::Fis, Interaction::SelfAttention}) {
        const ModelConfig c = small_config(mode);
        auto p = init_model_params<double>(c, 8);
        zero_value_projection(p);
        auto& b = p.blocks[0];
        b.ffn_w2.setZero();
        b.ffn_b2.setZero();
        std::mt19937_64 rng(8);
        const MatrixD h = random_matrix(3, 8, rng);
        const MatrixD out = encoder_block(h, b, c);
        const MatrixD expected = layer_norm<double>(layer_norm<double>(h, b.ln1_gain, b.ln1_bias, 1e-8, nullptr),
                                                    b.ln2_gain, b.ln2_bias, 1e-8, nullptr);
        EXPECT_EQ(out, expected) << to_string(mode);
    }
}

TEST(EncoderBlock, PreservesShape) {
    const ModelConfig c = small_config();
    const auto p = init_model_params<double>(c, 9);
    std::mt19937_64 rng(9);
    const MatrixD out = encoder_block(random_matrix(3, 8, rng), p.blocks[1], c);
    EXPECT_EQ(out.rows(), 3);
    EXPECT_EQ(out.cols(), 8);
}

// Block on a 3x8 input; loss = sum(out .* W); every block parameter and input entry.
TEST(EncoderBlock, GradientMatchesFiniteDifferences) {
    for (Interaction mode : {Interaction::Fis, Interaction::SelfAttention}) {
        ModelConfig c = small_config(mode);
        c.layers = 1;
        auto p = init_model_params<double>(c, 10);
        std::mt19937_64 rng(10);
        MatrixD h = random_matrix(3, 8, rng);
        const MatrixD w = random_matrix(3, 8, rng);
        BlockTrace<double> trace;
        encoder_block(h, p.blocks[0], c, &trace);
        auto grads = zeros_like(p);
        const MatrixD d_h = encoder_block_backward(p.blocks[0], c, trace, w, grads.blocks[0]);
        auto loss = [&] { return encoder_block(h, p.blocks[0], c).cwiseProduct(w).sum(); };
        const double step = 1e-5;
        double worst = 0.0;
        auto check = [&](double& slot, double analytic) {
            const double orig = slot;
            slot = orig + step;
            const double lp = loss();
            slot = orig - step;
            const double lm = loss();
            slot = orig;
            const double numeric = (lp - lm) / (2 * step);
            worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6}));
        };
        auto refs = param_refs(p);
        const auto grefs = param_refs(std::as_const(grads));
        for (std::size_t t = 0; t < refs.size(); ++t) {
            if (refs[t].name.rfind("block0.", 0) != 0) continue;
            for (std::size_t e = 0; e < refs[t].data.size(); ++e) check(refs[t].data[e], grefs[t].data[e]);
        }
        for (Eigen::Index n = 0; n < h.size(); ++n) check(h.data()[n], d_h.data()[n]);
        EXPECT_LT(worst, 1e-4) << to_string(mode);
    }
}

TEST(Project, BiasOnlyAndShape) {
    ModelConfig c;
    c.n_vars = 7;
    c.d_model = 64;
    c.horizon = 96;
    c.layers = 0;
    c.lookback = 8;
    const auto p = init_model_params<double>(c, 11);
    const MatrixD y = project(MatrixD(MatrixD::Zero(7, 64)), p);
    ASSERT_EQ(y.rows(), 96);
    ASSERT_EQ(y.cols(), 7);
    for (Eigen::Index j = 0; j < 7; ++j) EXPECT_EQ(y.col(j).transpose(), p.proj_b);
}

TEST(Project, ColumnsAreIndependent) {
    const ModelConfig c = small_config();
    const auto p = init_model_params<double>(c, 12);
    std::mt19937_64 rng(12);
    const MatrixD h = random_matrix(3, 8, rng);
    MatrixD h2 = h;
    h2.row(2) = random_matrix(1, 8, rng);
    const MatrixD a = project(h, p), b = project(h2, p);
    EXPECT_EQ(a.col(0), b.col(0));
    EXPECT_EQ(a.col(1), b.col(1));
    EXPECT_NE(a.col(2), b.col(2));
}

TEST(ModelForward, ZeroLayersIsProjectOfEmbed) {
    ModelConfig c = small_config();
    c.layers = 0;
    const auto p = init_model_params<double>(c, 13);
    std::mt19937_64 rng(13);
    const MatrixD x = random_matrix(16, 3, rng);
    EXPECT_EQ(model_forward(x, p, c), project(embed_variates(x, p), p));
}

TEST(ModelForward, ShapeContractAndDeterminism) {
    for (MfKind kind : {MfKind::Gaussian, MfKind::Triangular, MfKind::Trapezoidal}) {
        const ModelConfig c = small_config(Interaction::Fis, kind);
        const auto p = init_model_params<double>(c, 14);
        std::mt19937_64 rng(14);
        const MatrixD x = random_matrix(16, 3, rng);
        const MatrixD y = model_forward(x, p, c);
        EXPECT_EQ(y.rows(), 4);
        EXPECT_EQ(y.cols(), 3);
        EXPECT_TRUE(y.allFinite());
        EXPECT_EQ(y, model_forward(x, p, c));
        EXPECT_THROW(model_forward(MatrixD(x.topRows(15)), p, c), ShapeError);
    }
}

// With the value projections zeroed, both interaction modes contribute nothing, so the
// remaining (identically initialised) parameters must give the same forecast bit for bit.
TEST(ModelForward, InteractionSwapOnlyChangesInteraction) {
    const ModelConfig fc = small_config(Interaction::Fis), ac = small_config(Interaction::SelfAttention);
    auto pf = init_model_params<double>(fc, 15);
    auto pa = init_model_params<double>(ac, 15);
    EXPECT_EQ(pf.embed_w, pa.embed_w);
    EXPECT_EQ(pf.blocks[1].ffn_w1, pa.blocks[1].ffn_w1);
    EXPECT_EQ(pf.proj_w, pa.proj_w);
    zero_value_projection(pf);
    zero_value_projection(pa);
    std::mt19937_64 rng(15);
    const MatrixD x = random_matrix(16, 3, rng);
    EXPECT_EQ(model_forward(x, pf, fc), model_forward(x, pa, ac));
}

TEST(ModelParams, NamesAndCounts) {
    const ModelConfig c = small_config(Interaction::Fis, MfKind::Trapezoidal);
    const auto p = init_model_params<double>(c, 16);
    const auto refs = param_refs(p);
    std::set<ParamGroup> groups;
    for (const auto& r : refs) groups.insert(r.group);
    EXPECT_EQ(groups.size(), 10u);
    EXPECT_EQ(refs.front().name, "embed.weight");
    EXPECT_EQ(refs.back().name, "proj.bias");
    std::size_t mf = 0;
    for (const auto& r : refs)
        if (r.name.find("_mf.") != std::string::npos) mf += r.data.size();
    EXPECT_EQ(mf, 2u * 2u * 4u * 3u * 8u * 3u);  // layers x (q,k) x raw params x tokens x features x rules
    EXPECT_NO_THROW(check_params_match(p, c));
    ModelConfig other = c;
    other.d_model = 16;
    EXPECT_THROW(check_params_match(p, other), ShapeError);
}

TEST(GradCheck, FullModelAllKindsAndModes) {
    for (MfKind kind : {MfKind::Gaussian, MfKind::Triangular, MfKind::Trapezoidal}) {
        GradCheckOptions opt;
        opt.samples = 50;
        const GradReport r = grad_check(small_config(Interaction::Fis, kind), opt);
        EXPECT_TRUE(r.passed()) << r.to_text();
        EXPECT_EQ(r.groups.size(), 10u);
        EXPECT_LT(r.max_rel_error(), 1e-4);
    }
    GradCheckOptions opt;
    const GradReport r = grad_check(small_config(Interaction::SelfAttention), opt);
    EXPECT_TRUE(r.passed()) << r.to_text();
    EXPECT_EQ(r.find(ParamGroup::MfCenter), nullptr);
}

TEST(GradCheck, ZeroUpstreamPasses) {
    GradCheckOptions opt;
    opt.match_targets = true;
    const GradReport r = grad_check(small_config(), opt);
    EXPECT_TRUE(r.passed()) << r.to_text();
    for (const auto& g : r.groups) EXPECT_LT(g.max_abs_error, 1e-9);
}

TEST(GradCheck, ReportListsEveryGroup) {
    const GradReport r = grad_check(small_config(), GradCheckOptions{});
    for (ParamGroup g : {ParamGroup::Embedding, ParamGroup::QProj, ParamGroup::KProj, ParamGroup::VProj,
                         ParamGroup::MfCenter, ParamGroup::MfWidth, ParamGroup::Consequent, ParamGroup::LayerNorm,
                         ParamGroup::Ffn, ParamGroup::Projection}) {
        ASSERT_NE(r.find(g), nullptr) << to_string(g);
        EXPECT_GE(r.find(g)->checked, 1u);
    }
    EXPECT_NE(r.to_text().find("mf_width"), std::string::npos);
}
