#pragma once

// Command implementations behind the `fisformer` executable. Exit codes: 0 success,
// 1 user or config error, 2 numerical failure (NaN, tolerance breach).

#include "fisformer/checkpoint.hpp"
#include "fisformer/config.hpp"
#include "fisformer/evaluation.hpp"
#include "fisformer/training.hpp"

#if __has_include(<CLI11.hpp>)
#include <CLI11.hpp>
#else
#include <CLI/CLI.hpp>
#endif
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

namespace fisformer::cli {

enum ExitCode : int { kOk = 0, kUserError = 1, kNumericalError = 2 };

struct Options {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed;
    std::string precision;
    std::string checkpoint;
    std::string input;
    std::size_t window = 0;
    std::string split = "test";
};

inline RunConfig load_run_config(const Options& o) {
    RunConfig cfg = o.config_path.empty() ? RunConfig() : RunConfig::from_file(o.config_path);
    for (const auto& s : o.sets) cfg.apply_override(s);
    if (o.seed) cfg.set("seed", std::to_string(*o.seed), "--seed");
    if (!o.precision.empty()) cfg.set("precision", o.precision, "--precision");
    return cfg;
}

namespace detail {

inline std::filesystem::path out_dir(const Options& o) {
    std::filesystem::path dir = o.out_dir;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw ConfigError("cannot create output directory '" + dir.string() + "': " + ec.message());
    return dir;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    out << text;
}

inline std::size_t resolve_n_vars(const RunConfig& cfg) {
    if (cfg.synthetic()) return cfg.get_size("synth_vars");
    return cfg.load_series().n_vars();
}

template <typename Fn>
int with_precision(const RunConfig& cfg, Fn&& fn) {
    if (cfg.get("precision") == "f32") return fn.template operator()<float>();
    return fn.template operator()<double>();
}

inline void print_report(std::ostream& out, const char* label, const MetricReport& r) {
    out << std::left << std::setw(12) << label << " mse=" << std::setprecision(17) << r.mse << " mae=" << r.mae
        << "  (" << to_string(r.scale) << ", horizon " << r.horizon << ", " << r.dataset << ")\n"
        << std::defaultfloat << std::setprecision(6);
}

inline void print_epoch(std::ostream& out, const EpochRecord& e) {
    out << "epoch " << std::setw(3) << e.epoch << "  train_loss " << std::setprecision(6) << e.train_loss
        << "  val_mse " << e.val_mse << "  val_mae " << e.val_mae << "  (" << std::fixed << std::setprecision(2)
        << e.seconds << "s)\n"
        << std::defaultfloat;
}

template <typename T>
nlohmann::json to_json(const Matrix<T>& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(static_cast<double>(m(i, j)));
        rows.push_back(std::move(row));
    }
    return rows;
}

template <typename T>
nlohmann::json to_json(const Tensor3<T>& t) {
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t i = 0; i < t.tokens; ++i) {
        nlohmann::json tok = nlohmann::json::array();
        for (std::size_t j = 0; j < t.features; ++j) {
            nlohmann::json rules = nlohmann::json::array();
            for (T v : t.slice(i, j)) rules.push_back(static_cast<double>(v));
            tok.push_back(std::move(rules));
        }
        out.push_back(std::move(tok));
    }
    return out;
}

}  // namespace detail

inline int cmd_train(const Options& o, std::ostream& out) {
    const RunConfig cfg = load_run_config(o);
    return detail::with_precision(cfg, [&]<typename T>() {
        const PreparedData data = cfg.prepare();
        const ModelConfig mc = cfg.model_config(data.raw.n_vars());
        const TrainConfig tc = cfg.train_config();
        const auto dir = detail::out_dir(o);
        out << "training " << to_string(mc.interaction) << " model on " << cfg.dataset_label() << ": "
            << data.train.size() << " train / " << data.val.size() << " val / " << data.test.size()
            << " test windows, " << (std::is_same_v<T, float> ? "f32" : "f64") << "\n";
        auto result = train<T>(mc, tc, data.train, data.val, std::nullopt,
                               [&](const EpochRecord& e) { detail::print_epoch(out, e); });
        // Report metrics for exactly what the checkpoint stores.
        const ModelParams<T> stored = round_to_f32(result.params);
        save_checkpoint(dir / "model.fisf", make_checkpoint(mc, stored, normalizer_records(data.normalizer)));
        detail::write_text(dir / "history.csv", result.history.to_csv(cfg.get_bool("history_wall_clock")));
        const auto scale = cfg.metric_scale();
        detail::print_report(out, "final val",
                             evaluate_model(stored, mc, data.val, cfg.dataset_label(), scale, &data.normalizer));
        detail::print_report(out, "test",
                             evaluate_model(stored, mc, data.test, cfg.dataset_label(), scale, &data.normalizer));
        detail::print_report(out, "persistence",
                             evaluate_persistence(data.test, cfg.dataset_label(), scale, &data.normalizer));
        out << "best epoch " << result.history.best_epoch << "; wrote " << (dir / "model.fisf").string() << " and "
            << (dir / "history.csv").string() << "\n";
        return kOk;
    });
}

inline int cmd_evaluate(const Options& o, std::ostream& out) {
    if (o.checkpoint.empty()) throw ConfigError("evaluate needs --checkpoint");
    const RunConfig cfg = load_run_config(o);
    return detail::with_precision(cfg, [&]<typename T>() {
        const PreparedData data = cfg.prepare();
        const ModelConfig mc = cfg.model_config(data.raw.n_vars());
        const ModelParams<T> params = params_from_checkpoint<T>(load_checkpoint(o.checkpoint), mc);
        const auto scale = cfg.metric_scale();
        detail::print_report(out, "val", evaluate_model(params, mc, data.val, cfg.dataset_label(), scale, &data.normalizer));
        detail::print_report(out, "test",
                             evaluate_model(params, mc, data.test, cfg.dataset_label(), scale, &data.normalizer));
        return kOk;
    });
}

inline int cmd_predict(const Options& o, std::ostream& out) {
    if (o.checkpoint.empty()) throw ConfigError("predict needs --checkpoint");
    if (o.input.empty()) throw ConfigError("predict needs --input <csv>");
    const RunConfig cfg = load_run_config(o);
    return detail::with_precision(cfg, [&]<typename T>() {
        const RawSeries input = load_csv(o.input, cfg.get_bool("has_date_column"));
        const ModelConfig mc = cfg.model_config(input.n_vars());
        const Checkpoint ck = load_checkpoint(o.checkpoint);
        const ModelParams<T> params = params_from_checkpoint<T>(ck, mc);
        const Normalizer norm = normalizer_from_checkpoint(ck);
        if (input.length() < mc.lookback) {
            throw ConfigError("input has " + std::to_string(input.length()) + " rows, the model needs lookback " +
                              std::to_string(mc.lookback));
        }
        const MatrixD x = norm.apply(input.values.bottomRows(static_cast<Eigen::Index>(mc.lookback)));
        const MatrixD forecast = norm.invert(model_forward<T>(x.cast<T>(), params, mc).template cast<double>());
        std::ostringstream csv;
        csv << std::setprecision(10);
        for (std::size_t c = 0; c < input.variate_names.size(); ++c) csv << (c ? "," : "") << input.variate_names[c];
        csv << '\n';
        for (Eigen::Index i = 0; i < forecast.rows(); ++i) {
            for (Eigen::Index j = 0; j < forecast.cols(); ++j) csv << (j ? "," : "") << forecast(i, j);
            csv << '\n';
        }
        const auto path = detail::out_dir(o) / "forecast.csv";
        detail::write_text(path, csv.str());
        out << "wrote " << forecast.rows() << "x" << forecast.cols() << " forecast to " << path.string() << "\n";
        return kOk;
    });
}

inline int cmd_gradcheck(const Options& o, std::ostream& out) {
    const RunConfig cfg = load_run_config(o);
    const ModelConfig mc = cfg.model_config(detail::resolve_n_vars(cfg));
    GradCheckOptions opt;
    opt.seed = cfg.get_u64("seed");
    opt.samples = cfg.get_size("gradcheck_samples");
    opt.tolerance = cfg.get_double("gradcheck_tolerance");
    opt.batch = cfg.get_size("gradcheck_batch");
    const GradReport report = grad_check(mc, opt);
    out << "gradcheck (64-bit, " << to_string(mc.interaction) << ", " << to_string(mc.mf_kind) << ", N=" << mc.n_vars
        << " T_in=" << mc.lookback << " P=" << mc.horizon << " D=" << mc.d_model << " L=" << mc.layers
        << " R=" << mc.rules << ")\n"
        << report.to_text();
    return report.passed() ? kOk : kNumericalError;
}

inline int cmd_bench(const Options& o, std::ostream& out) {
    const RunConfig cfg = load_run_config(o);
    const auto tokens = cfg.get_size_list("bench_tokens");
    const ScalingReport report = bench_scaling(tokens, cfg.get_size("bench_dim"), cfg.get_size("bench_rules"),
                                               cfg.get_size("bench_repeats"), cfg.get_u64("seed"));
    const auto path = detail::out_dir(o) / "scaling.csv";
    detail::write_text(path, report.to_csv());
    out << report.to_text();
    for (std::size_t n = 1; n < tokens.size(); ++n) {
        out << "T " << tokens[n - 1] << " -> " << tokens[n] << ": fis x" << std::setprecision(3)
            << report.ratio("fis", tokens[n - 1], tokens[n]) << ", attention x"
            << report.ratio("attention", tokens[n - 1], tokens[n]) << "\n";
    }
    out << "wrote " << path.string() << "\n";
    return kOk;
}

inline int cmd_ablate(const Options& o, std::ostream& out) {
    const RunConfig cfg = load_run_config(o);
    return detail::with_precision(cfg, [&]<typename T>() {
        const PreparedData data = cfg.prepare();
        const ModelConfig mc = cfg.model_config(data.raw.n_vars());
        const auto r = ablation_run<T>(data, mc, cfg.train_config(), cfg.dataset_label(), cfg.metric_scale(),
                                       [&](const EpochRecord& e) { detail::print_epoch(out, e); });
        const auto dir = detail::out_dir(o);
        detail::write_text(dir / "ablation.csv", ablation_csv(r));
        detail::write_text(dir / "ablation.txt", format_ablation_table(r));
        out << format_ablation_table(r);
        out << "batch stream crc32: attention " << std::hex << r.attention_history.batch_stream_crc << ", fis "
            << r.fis_history.batch_stream_crc << std::dec << (r.same_batches() ? " (identical)\n" : " (DIFFER)\n");
        return r.same_batches() ? kOk : kNumericalError;
    });
}

inline int cmd_mfsweep(const Options& o, std::ostream& out) {
    const RunConfig cfg = load_run_config(o);
    return detail::with_precision(cfg, [&]<typename T>() {
        const PreparedData data = cfg.prepare();
        const ModelConfig mc = cfg.model_config(data.raw.n_vars());
        const auto reports = mf_sweep<T>(data, mc, cfg.train_config(), cfg.dataset_label(), cfg.metric_scale(),
                                         [&](const EpochRecord& e) { detail::print_epoch(out, e); });
        std::string csv = metric_csv_header();
        for (const auto& r : reports) csv += to_csv_row(r);
        const auto dir = detail::out_dir(o);
        detail::write_text(dir / "mf_sweep.csv", csv);
        detail::write_text(dir / "mf_sweep.txt", format_mf_table(reports));
        out << format_mf_table(reports);
        return kOk;
    });
}

inline int cmd_trace(const Options& o, std::ostream& out) {
    if (o.checkpoint.empty()) throw ConfigError("trace needs --checkpoint");
    const RunConfig cfg = load_run_config(o);
    const PreparedData data = cfg.prepare();
    const ModelConfig mc = cfg.model_config(data.raw.n_vars());
    if (mc.interaction != Interaction::Fis) throw ConfigError("trace needs a model with interaction = fis");
    const ModelParams<double> params = params_from_checkpoint<double>(load_checkpoint(o.checkpoint), mc);
    const WindowSet* windows = o.split == "train" ? &data.train : o.split == "val" ? &data.val
                             : o.split == "test"  ? &data.test
                                                  : nullptr;
    if (!windows) throw ConfigError("--split must be train, val or test");
    if (o.window >= windows->size()) {
        throw ConfigError("window " + std::to_string(o.window) + " out of range: " + o.split + " split has " +
                          std::to_string(windows->size()) + " windows");
    }
    ModelTrace<double> trace;
    model_forward<double>(windows->input(o.window), params, mc, &trace);

    nlohmann::json doc;
    doc["split"] = o.split;
    doc["window"] = o.window;
    doc["variates"] = data.raw.variate_names;
    doc["rules"] = mc.rules;
    doc["mf_kind"] = to_string(mc.mf_kind);
    double worst_slice_excess = 0.0;  // max over slices of sum(pi_tilde) - sum(pi)/(sum(pi)+eps)
    double worst_column = 0.0;        // max |sum_i A(i,j) - 1|
    double max_slice_sum = 0.0;
    for (std::size_t l = 0; l < trace.blocks.size(); ++l) {
        const auto& ft = *trace.blocks[l].fis;
        for (std::size_t i = 0; i < ft.pi.tokens; ++i) {
            for (std::size_t j = 0; j < ft.pi.features; ++j) {
                double s = 0.0, st = 0.0;
                for (double p : ft.pi.slice(i, j)) s += p;
                for (double p : ft.pi_tilde.slice(i, j)) st += p;
                max_slice_sum = std::max(max_slice_sum, st);
                worst_slice_excess = std::max(worst_slice_excess, std::abs(st - s / (s + mc.epsilon)));
            }
        }
        for (Eigen::Index j = 0; j < ft.a.cols(); ++j) {
            worst_column = std::max(worst_column, std::abs(ft.a.col(j).sum() - 1.0));
        }
        doc["blocks"].push_back({{"block", l},
                                 {"mu_q", detail::to_json(ft.mu_q)},
                                 {"mu_k", detail::to_json(ft.mu_k)},
                                 {"pi", detail::to_json(ft.pi)},
                                 {"pi_tilde", detail::to_json(ft.pi_tilde)},
                                 {"f_qk", detail::to_json(ft.f_qk)},
                                 {"a", detail::to_json(ft.a)}});
    }
    doc["checks"] = {{"max_pi_tilde_slice_sum", max_slice_sum},
                     {"max_pi_tilde_sum_error", worst_slice_excess},
                     {"max_softmax_column_error", worst_column}};
    const auto path = detail::out_dir(o) / "trace.json";
    detail::write_text(path, doc.dump(1));
    out << "traced " << o.split << " window " << o.window << " through " << trace.blocks.size()
        << " FIS blocks\n  max pi_tilde slice sum " << max_slice_sum << "\n  max |sum pi_tilde - S/(S+eps)| "
        << worst_slice_excess << "\n  max |softmax column sum - 1| " << worst_column << "\nwrote " << path.string()
        << "\n";
    return kOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"FIS-interaction transformer forecaster"};
    app.require_subcommand(1);
    Options o;
    std::string seed_text;

    struct Command {
        const char* name;
        const char* help;
        int (*fn)(const Options&, std::ostream&);
    };
    const Command commands[] = {
        {"train", "train a model and write a checkpoint and history CSV", cmd_train},
        {"evaluate", "validation and test metrics of a checkpoint", cmd_evaluate},
        {"predict", "forecast the horizon after the last rows of a CSV", cmd_predict},
        {"gradcheck", "compare analytic and finite-difference gradients", cmd_gradcheck},
        {"bench", "time FIS interaction vs self-attention over token counts", cmd_bench},
        {"ablate", "train with self-attention and with FIS interaction", cmd_ablate},
        {"mfsweep", "train one FIS model per membership function kind", cmd_mfsweep},
        {"trace", "dump rule firings and interaction weights for one window", cmd_trace},
    };
    std::vector<std::pair<CLI::App*, const Command*>> subs;
    for (const auto& c : commands) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
        sub->add_option("--set", o.sets, "override one config key (key=value), repeatable");
        sub->add_option("--out", o.out_dir, "output directory");
        sub->add_option("--seed", seed_text, "override the seed");
        sub->add_option("--precision", o.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
        const std::string name = c.name;
        if (name == "evaluate" || name == "predict" || name == "trace") {
            sub->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
        }
        if (name == "predict") sub->add_option("--input", o.input, "CSV whose last rows are the lookback")->required();
        if (name == "trace") {
            sub->add_option("--window", o.window, "window index within the split");
            sub->add_option("--split", o.split, "train, val or test");
        }
        subs.emplace_back(sub, &c);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUserError;
    }
    try {
        if (!seed_text.empty()) {
            std::uint64_t s = 0;
            if (!fisformer::detail::parse_size(seed_text, s)) throw ConfigError("--seed expects a non-negative integer");
            o.seed = s;
        }
        for (const auto& [sub, cmd] : subs) {
            if (sub->parsed()) return cmd->fn(o, out);
        }
        return kUserError;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumericalError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kUserError;
    }
}

}  // namespace fisformer::cli
