// End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "fisformer/checkpoint.hpp"
#include "fisformer/evaluation.hpp"
#include "support/oracle.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>

using namespace fisformer;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

MatrixD random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    MatrixD m(r, c);
    for (Eigen::Index n = 0; n < m.size(); ++n) m.data()[n] = g(rng);
    return m;
}

FisParams<double> random_fis(MfKind kind, std::size_t t, std::size_t d, std::size_t rules, bool shared,
                             std::mt19937_64& rng) {
    auto p = init_fis_params<double>(kind, t, d, rules, rng(), shared);
    std::normal_distribution<double> g(0.0, 0.2);
    for (auto* bank : {&p.q_bank, &p.k_bank})
        for (auto& tensor : bank->raw)
            for (auto& x : tensor.data) x += g(rng);
    return p;
}

constexpr MfKind kAllKinds[] = {MfKind::Gaussian, MfKind::Triangular, MfKind::Trapezoidal};

Outcome oracle_equivalence() {
    std::mt19937_64 rng(1001);
    auto draw = [&](int hi) { return static_cast<std::size_t>(std::uniform_int_distribution<int>(1, hi)(rng)); };
    double fis_err = 0.0, att_err = 0.0;
    for (int n = 0; n < 100; ++n) {
        const std::size_t t = draw(8), d = draw(8), rules = draw(4);
        const auto p = random_fis(kAllKinds[n % 3], t, d, rules, n % 2 == 1, rng);
        const auto rows = static_cast<Eigen::Index>(t), cols = static_cast<Eigen::Index>(d);
        const MatrixD q = random_matrix(rows, cols, rng), k = random_matrix(rows, cols, rng),
                      v = random_matrix(rows, cols, rng);
        const auto out = fis_forward(q, k, v, p);
        fis_err = std::max(fis_err, oracle::max_abs_diff(
                                        oracle::fis(oracle::to_grid(q), oracle::to_grid(k), oracle::to_grid(v), p).o, out.o));
    }
    for (int n = 0; n < 100; ++n) {
        const auto t = static_cast<Eigen::Index>(draw(8)), d = static_cast<Eigen::Index>(draw(8));
        const MatrixD q = random_matrix(t, d, rng), k = random_matrix(t, d, rng), v = random_matrix(t, d, rng);
        att_err = std::max(att_err, oracle::max_abs_diff(oracle::self_attention(oracle::to_grid(q), oracle::to_grid(k),
                                                                                oracle::to_grid(v)),
                                                         self_attention(q, k, v).out));
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "max |fis - oracle| %.2e, max |attention - oracle| %.2e (100 instances each)",
                  fis_err, att_err);
    return {fis_err < 1e-12 && att_err < 1e-12, buf};
}

Outcome gradient_certification() {
    ModelConfig c;
    c.n_vars = 3;
    c.lookback = 16;
    c.horizon = 4;
    c.d_model = 8;
    c.layers = 2;
    c.rules = 3;
    bool ok = true;
    std::string detail;
    for (MfKind kind : kAllKinds) {
        c.mf_kind = kind;
        GradCheckOptions opt;
        opt.samples = 50;
        opt.tolerance = 1e-4;
        const GradReport r = grad_check(c, opt);
        const bool kind_ok = r.passed() && r.groups.size() == 10 && r.max_rel_error() < 1e-4;
        if (!kind_ok) std::cout << r.to_text();
        ok = ok && kind_ok;
        char buf[96];
        std::snprintf(buf, sizeof buf, "%s%s max rel %.2e", detail.empty() ? "" : ", ", to_string(kind).c_str(),
                      r.max_rel_error());
        detail += buf;
    }
    return {ok, detail + " over 10 groups"};
}

Outcome invariant_suite() {
    std::mt19937_64 rng(3003);
    std::vector<std::string> failures;

    std::uniform_real_distribution<double> ux(-6, 6), uc(-2, 2), uw(-3, 2);
    for (MfKind kind : kAllKinds) {
        for (int n = 0; n < 20000; ++n) {
            MfRaw<double> raw{uc(rng), uw(rng), uw(rng), uw(rng)};
            const double v = mf_eval(kind, ux(rng), raw);
            if (!(v >= 0.0 && v <= 1.0)) {
                failures.push_back("membership out of [0,1]");
                break;
            }
        }
    }

    double slice_err = 0.0, column_err = 0.0;
    for (int n = 0; n < 200; ++n) {
        const auto t = static_cast<std::size_t>(1 + n % 8), d = static_cast<std::size_t>(1 + (n / 8) % 8);
        const auto p = random_fis(kAllKinds[n % 3], t, d, 1 + n % 4, false, rng);
        const auto rows = static_cast<Eigen::Index>(t), cols = static_cast<Eigen::Index>(d);
        const auto out = fis_forward(random_matrix(rows, cols, rng), random_matrix(rows, cols, rng),
                                     random_matrix(rows, cols, rng), p, true);
        const auto& tr = *out.trace;
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                const auto s = tr.pi.slice(i, j), st = tr.pi_tilde.slice(i, j);
                const double sum = std::accumulate(s.begin(), s.end(), 0.0);
                const double sum_t = std::accumulate(st.begin(), st.end(), 0.0);
                slice_err = std::max(slice_err, std::abs(sum_t - sum / (sum + p.epsilon)));
            }
        for (Eigen::Index j = 0; j < tr.a.cols(); ++j) column_err = std::max(column_err, std::abs(tr.a.col(j).sum() - 1.0));
    }
    if (!(slice_err < 1e-12)) failures.push_back("normalized firing slice sum");
    if (!(column_err < 1e-6)) failures.push_back("softmax column sum");

    for (MfKind kind : kAllKinds) {
        ModelConfig c;
        c.n_vars = 3;
        c.lookback = 16;
        c.horizon = 4;
        c.d_model = 8;
        c.mf_kind = kind;
        const auto params = init_model_params<float>(c, 11);
        const Checkpoint back = decode_checkpoint(encode_checkpoint(make_checkpoint(c, params)));
        const auto restored = params_from_checkpoint<float>(back, c);
        const auto a = param_refs(params), b = param_refs(restored);
        for (std::size_t n = 0; n < a.size(); ++n) {
            if (std::memcmp(a[n].data.data(), b[n].data.data(), a[n].data.size() * sizeof(float)) != 0) {
                failures.push_back("checkpoint round trip (" + a[n].name + ")");
                break;
            }
        }
    }

    int leak_configs = 0;
    bool leak_ok = true;
    for (int trial = 0; trial < 200 && leak_ok; ++trial) {
        auto draw = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
        const std::size_t lookback = draw(1, 24), horizon = draw(1, 12), stride = draw(1, 4), need = lookback + horizon;
        const SplitSpec spec{draw(need, need + 80), draw(need, need + 40), draw(need, need + 40)};
        RawSeries s;
        s.values.resize(static_cast<Eigen::Index>(spec.train_len + spec.val_len + spec.test_len + draw(0, 10)), 1);
        for (Eigen::Index r = 0; r < s.values.rows(); ++r) s.values(r, 0) = static_cast<double>(r);
        const auto [tr, va, te] = chronological_split(s, spec);
        const std::size_t begins[3] = {0, spec.train_len, spec.train_len + spec.val_len};
        const std::size_t lens[3] = {spec.train_len, spec.val_len, spec.test_len};
        const RawSeries* parts[3] = {&tr, &va, &te};
        for (int p = 0; p < 3 && leak_ok; ++p) {
            const WindowSet w = make_windows(*parts[p], lookback, horizon, stride);
            leak_ok = w.size() == (lens[p] - need) / stride + 1;
            for (std::size_t k = 0; k < w.size() && leak_ok; ++k) {
                const MatrixD in = w.input(k), tg = w.target(k);
                leak_ok = in(0, 0) >= static_cast<double>(begins[p]) &&
                          tg(tg.rows() - 1, 0) < static_cast<double>(begins[p] + lens[p]) &&
                          tg(0, 0) == in(in.rows() - 1, 0) + 1.0;
            }
        }
        ++leak_configs;
    }
    if (!leak_ok) failures.push_back("split/window leakage");

    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "slice-sum err %.2e, column-sum err %.2e, checkpoint bit-exact x3, %d leakage configs", slice_err,
                  column_err, leak_configs);
    std::string detail = buf;
    for (const auto& f : failures) detail += "; FAILED: " + f;
    return {failures.empty(), detail};
}

Outcome scaling_claim() {
    const ScalingReport r = bench_scaling({256, 1024}, 64, 3, 7);
    const double fis = r.ratio("fis", 256, 1024), att = r.ratio("attention", 256, 1024);
    char buf[160];
    std::snprintf(buf, sizeof buf, "T 256->1024: fis x%.2f (<= 6), attention x%.2f (>= 8)", fis, att);
    return {fis <= 6.0 && att >= 8.0, buf};
}

ModelConfig desk_model() {
    ModelConfig c;
    c.n_vars = 4;
    c.lookback = 96;
    c.horizon = 24;
    c.d_model = 64;
    c.layers = 2;
    c.rules = 3;
    return c;
}

TrainConfig desk_train() {
    TrainConfig t;
    t.lr = 1e-3;
    t.batch_size = 32;
    t.epochs = 10;
    t.seed = 7;
    return t;
}

const PreparedData& desk_data() {
    static const PreparedData d = prepare_dataset(synth_sinusoid(4, 2000, 7), {}, 96, 24);
    return d;
}

// Persistence error on the test split, computed directly from the series rows.
double persistence_mse_by_hand(const WindowSet& w) {
    const MatrixD& s = w.series();
    double total = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
        const auto last = static_cast<Eigen::Index>(w.input_start(k) + w.lookback() - 1);
        double acc = 0.0;
        for (std::size_t h = 0; h < w.horizon(); ++h)
            for (Eigen::Index j = 0; j < s.cols(); ++j) {
                const double e = s(last + 1 + static_cast<Eigen::Index>(h), j) - s(last, j);
                acc += e * e;
            }
        total += acc / static_cast<double>(w.horizon() * static_cast<std::size_t>(s.cols()));
    }
    return total / static_cast<double>(w.size());
}

Outcome learning_sanity() {
    const auto& d = desk_data();
    const double persistence = persistence_mse_by_hand(d.test);
    const double library = persistence_errors(d.test).mse;
    const double bar = 0.7 * persistence;
    std::cout << "  persistence baseline test MSE " << persistence << " (library " << library << "), bar " << bar
              << "\n";
    const auto r = train<double>(desk_model(), desk_train(), d.train, d.val);
    const double test = model_errors(r.params, desk_model(), d.test).mse;
    const double gain = (persistence - test) / persistence * 100.0;
    char buf[200];
    std::snprintf(buf, sizeof buf, "test MSE %.4f vs persistence %.4f: %.1f%% better (need >= 30%%)", test,
                  persistence, gain);
    return {std::abs(library - persistence) < 1e-12 && test <= bar && std::isfinite(test), buf};
}

Outcome ablation_harness() {
    const auto r = ablation_run<double>(desk_data(), desk_model(), desk_train(), "synthetic");
    std::cout << format_ablation_table(r);
    const bool finite = std::isfinite(r.attention.mse) && std::isfinite(r.fis.mse) && std::isfinite(r.attention.mae) &&
                        std::isfinite(r.fis.mae) && std::isfinite(r.promotion_mse) && std::isfinite(r.promotion_mae);
    char buf[200];
    std::snprintf(buf, sizeof buf, "batch crc %08x / %08x, promotion %.1f%% MSE %.1f%% MAE",
                  r.attention_history.batch_stream_crc, r.fis_history.batch_stream_crc, r.promotion_mse,
                  r.promotion_mae);
    return {r.same_batches() && finite, buf};
}

Outcome mf_variant_sweep() {
    const auto reports = mf_sweep<double>(desk_data(), desk_model(), desk_train(), "synthetic");
    std::cout << format_mf_table(reports);
    bool ok = reports.size() == 3;
    std::string detail;
    for (const auto& r : reports) {
        ok = ok && std::isfinite(r.mse) && std::isfinite(r.mae);
        char buf[64];
        std::snprintf(buf, sizeof buf, "%s%s %.4f", detail.empty() ? "" : ", ", r.mf_kind.c_str(), r.mse);
        detail += buf;
    }
    return {ok, detail};
}

}  // namespace

int main() {
    struct Criterion {
        const char* name;
        double budget_seconds;
        std::function<Outcome()> run;
    };
    const Criterion criteria[] = {
        {"1 oracle equivalence", 10, oracle_equivalence},
        {"2 gradient certification", 120, gradient_certification},
        {"3 invariant suite", 60, invariant_suite},
        {"4 scaling claim", 60, scaling_claim},
        {"5 learning sanity", 300, learning_sanity},
        {"6 ablation harness", 600, ablation_harness},
        {"7 mf-variant sweep", 900, mf_variant_sweep},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs <= c.budget_seconds;
        const bool pass = o.pass && in_time;
        failed += pass ? 0 : 1;
        std::printf("%s  %-26s %s [%.1fs / %.0fs budget]%s\n", pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs,
                    c.budget_seconds, in_time ? "" : " over budget");
        std::fflush(stdout);
    }
    std::printf("%d of 7 criteria passed\n", 7 - failed);
    return failed == 0 ? 0 : 1;
}
