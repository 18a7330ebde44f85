#include "fisformer/checkpoint.hpp"
#include "fisformer/config.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

using namespace fisformer;

namespace {

ModelConfig model_cfg(MfKind kind = MfKind::Trapezoidal) {
    ModelConfig c;
    c.n_vars = 3;
    c.lookback = 12;
    c.horizon = 5;
    c.d_model = 6;
    c.rules = 2;
    c.mf_kind = kind;
    return c;
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / (name + std::to_string(std::random_device{}()));
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
    for (MfKind kind : {MfKind::Gaussian, MfKind::Triangular, MfKind::Trapezoidal}) {
        const ModelConfig c = model_cfg(kind);
        const auto p = init_model_params<float>(c, 5);
        const Checkpoint ck = make_checkpoint(c, p);
        const auto bytes = encode_checkpoint(ck);
        const Checkpoint back = decode_checkpoint(bytes);
        EXPECT_EQ(back.config, c);
        EXPECT_EQ(back.tensors, ck.tensors);
        const auto q = params_from_checkpoint<float>(back, c);
        const auto a = param_refs(p), b = param_refs(q);
        for (std::size_t t = 0; t < a.size(); ++t) {
            ASSERT_EQ(a[t].data.size(), b[t].data.size());
            EXPECT_EQ(std::memcmp(a[t].data.data(), b[t].data.data(), a[t].data.size() * sizeof(float)), 0)
                << a[t].name;
        }
        EXPECT_EQ(encode_checkpoint(back), bytes);
    }
}

TEST(Checkpoint, DoubleParamsRoundTripThroughFloat) {
    const ModelConfig c = model_cfg();
    const auto p = init_model_params<double>(c, 6);
    const auto path = temp_file("ck");
    save_checkpoint(path, make_checkpoint(c, p));
    const auto q = params_from_checkpoint<double>(load_checkpoint(path), c);
    std::filesystem::remove(path);
    const auto expected = round_to_f32(p);
    const auto a = param_refs(expected), b = param_refs(q);
    for (std::size_t t = 0; t < a.size(); ++t)
        EXPECT_TRUE(std::equal(a[t].data.begin(), a[t].data.end(), b[t].data.begin())) << a[t].name;
}

TEST(Checkpoint, LayoutHeader) {
    const auto bytes = encode_checkpoint(make_checkpoint(model_cfg(), init_model_params<float>(model_cfg(), 1)));
    ASSERT_GT(bytes.size(), 12u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FISF");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
}

TEST(Checkpoint, CorruptionIsRefused) {
    auto bytes = encode_checkpoint(make_checkpoint(model_cfg(), init_model_params<float>(model_cfg(), 2)));
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    EXPECT_THROW(decode_checkpoint(flipped), ConfigError);
    auto bad_crc = bytes;
    bad_crc.back() ^= 0xFF;
    try {
        decode_checkpoint(bad_crc);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
    }
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad_magic), ConfigError);
    EXPECT_THROW(decode_checkpoint(std::span<const std::uint8_t>(bytes.data(), 8)), ConfigError);
}

TEST(Checkpoint, WrongVersionIsRefused) {
    auto bytes = encode_checkpoint(make_checkpoint(model_cfg(), init_model_params<float>(model_cfg(), 3)));
    bytes[4] = 2;
    const std::size_t body = bytes.size() - 4;
    const auto crc = static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(body)));
    for (int b = 0; b < 4; ++b) bytes[body + b] = static_cast<std::uint8_t>(crc >> (8 * b));
    try {
        decode_checkpoint(bytes);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, MismatchedConfigIsRejected) {
    const ModelConfig c = model_cfg();
    const Checkpoint ck = make_checkpoint(c, init_model_params<float>(c, 4));
    ModelConfig other = c;
    other.rules = 3;
    other.layers = 1;
    try {
        params_from_checkpoint<float>(ck, other);
        FAIL();
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("rules (2 vs 3)"), std::string::npos) << msg;
        EXPECT_NE(msg.find("layers"), std::string::npos) << msg;
    }
    EXPECT_THROW(make_checkpoint(other, init_model_params<float>(c, 4)), ShapeError);
    EXPECT_THROW(load_checkpoint("/no/such/model.fisf"), ConfigError);
}

TEST(Checkpoint, CarriesNormalizer) {
    Normalizer n;
    n.mean = Eigen::RowVectorXd::LinSpaced(3, -1.5, 2.25);
    n.stddev = Eigen::RowVectorXd::Constant(3, 0.5);
    const ModelConfig c = model_cfg();
    const Checkpoint back =
        decode_checkpoint(encode_checkpoint(make_checkpoint(c, init_model_params<float>(c, 5), normalizer_records(n))));
    const Normalizer m = normalizer_from_checkpoint(back);
    EXPECT_EQ(m.mean, n.mean);
    EXPECT_EQ(m.stddev, n.stddev);
    EXPECT_THROW(normalizer_from_checkpoint(make_checkpoint(c, init_model_params<float>(c, 5))), ConfigError);
}

TEST(ModelConfigText, RoundTrip) {
    ModelConfig c = model_cfg(MfKind::Triangular);
    c.interaction = Interaction::SelfAttention;
    c.share_mf_across_tokens = true;
    c.epsilon = 3.25e-9;
    c.dropout = 0.1;
    EXPECT_EQ(parse_model_config(serialize_model_config(c)), c);
    EXPECT_EQ(config_differences(c, c), "");
    EXPECT_THROW(parse_model_config("heads = 4\n"), ConfigError);
}

TEST(RunConfig, DefaultsMatchDeskProtocol) {
    const RunConfig cfg;
    const ModelConfig m = cfg.model_config(4);
    EXPECT_EQ(m.d_model, 64u);
    EXPECT_EQ(m.layers, 2u);
    EXPECT_EQ(m.rules, 3u);
    EXPECT_EQ(m.lookback, 96u);
    EXPECT_EQ(m.horizon, 24u);
    EXPECT_EQ(m.interaction, Interaction::Fis);
    EXPECT_EQ(m.mf_kind, MfKind::Gaussian);
    const TrainConfig t = cfg.train_config();
    EXPECT_EQ(t.lr, 1e-3);
    EXPECT_EQ(t.batch_size, 32u);
    EXPECT_EQ(t.epochs, 10u);
    EXPECT_EQ(t.seed, 7u);
    EXPECT_TRUE(cfg.synthetic());
    EXPECT_EQ(cfg.metric_scale(), MetricScale::Normalized);
}

TEST(RunConfig, ParsesTextWithCommentsAndOverrides) {
    RunConfig cfg = RunConfig::from_text("# desk run\nd_model = 16  # narrower\n\nmf_kind=triangular\nlr = 0.01\n");
    EXPECT_EQ(cfg.get_size("d_model"), 16u);
    EXPECT_EQ(cfg.get("mf_kind"), "triangular");
    EXPECT_EQ(cfg.get_double("lr"), 0.01);
    cfg.apply_override("layers=3");
    EXPECT_EQ(cfg.model_config(2).layers, 3u);
    cfg.apply_override("bench_tokens = 8,16");
    EXPECT_EQ(cfg.get_size_list("bench_tokens"), (std::vector<std::size_t>{8, 16}));
    EXPECT_EQ(RunConfig::from_text(cfg.dump()).dump(), cfg.dump());
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
    try {
        RunConfig::from_text("d_model = 8\nheads = 4\n", "run.cfg");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("heads"), std::string::npos);
    }
    RunConfig cfg;
    EXPECT_THROW(cfg.apply_override("d_model=abc"), ConfigError);
    EXPECT_THROW(cfg.apply_override("mf_kind=bell"), ConfigError);
    EXPECT_THROW(cfg.apply_override("share_mf_across_tokens=maybe"), ConfigError);
    EXPECT_THROW(cfg.apply_override("lr"), ConfigError);
    EXPECT_THROW(RunConfig::from_text("just words\n"), ConfigError);
    EXPECT_THROW(RunConfig::from_file("/no/such/run.cfg"), ConfigError);
}

TEST(RunConfig, LoadsCsvData) {
    const auto path = temp_file("series") += ".csv";
    {
        std::ofstream out(path);
        out << "date,a,b\n";
        for (int t = 0; t < 300; ++t) out << "d" << t << "," << std::sin(t * 0.3) << "," << std::cos(t * 0.2) << "\n";
    }
    RunConfig cfg;
    cfg.set("data_path", path.string());
    cfg.set("lookback", "12");
    cfg.set("horizon", "4");
    const PreparedData d = cfg.prepare();
    std::filesystem::remove(path);
    EXPECT_EQ(d.raw.n_vars(), 2u);
    EXPECT_EQ(d.train.size(), 210u - 16u + 1u);
    EXPECT_EQ(cfg.dataset_label(), path.stem().string());
}
