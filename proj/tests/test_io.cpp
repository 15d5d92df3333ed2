#include "compvae/config.hpp"
#include "compvae/io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace compvae;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "compvae_test_io";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST(Archive, RoundTripAllDtypes) {
    io::Archive a;
    a.meta = {{"schema", 7}, {"note", "x"}, {"value", 0.1 + 0.2}};
    Matrix<double> md(2, 3);
    md << 1, 2, 3, 4, 5, 6.125;
    Matrix<float> mf(1, 2);
    mf << 1.5f, -2.25f;
    a.put("d", io::Tensor::from_matrix(md));
    a.put("f", io::Tensor::from_matrix(mf));
    a.put("i", io::Tensor::from(std::vector<std::int32_t>{-3, 0, 9}));
    a.put("u", io::Tensor::from(std::vector<std::uint8_t>{0, 255}));
    const auto path = temp_path("roundtrip.cvae");
    io::write_archive(path, a);
    const auto b = io::read_archive(path);
    EXPECT_EQ(b.meta, a.meta);
    EXPECT_EQ(b.meta.at("value").get<double>(), 0.1 + 0.2);
    EXPECT_EQ(b.get("d").to_matrix<double>(), md);
    EXPECT_EQ(b.get("f").to_matrix<float>(), mf);
    EXPECT_EQ(b.get("i").values<std::int32_t>(), (std::vector<std::int32_t>{-3, 0, 9}));
    EXPECT_EQ(b.get("u").values<std::uint8_t>(), (std::vector<std::uint8_t>{0, 255}));
    EXPECT_EQ(b.get("d").shape, (std::vector<std::uint64_t>{2, 3}));
    EXPECT_THROW(b.get("missing"), io::ArchiveError);
}

TEST(Archive, DetectsCorruption) {
    io::Archive a;
    a.put("t", io::Tensor::from(std::vector<double>(64, 1.0)));
    const auto path = temp_path("corrupt.cvae");
    io::write_archive(path, a);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(200);
        const char junk = 0x55;
        f.write(&junk, 1);
    }
    EXPECT_THROW(io::read_archive(path), io::ArchiveError);

    io::write_archive(path, a);
    fs::resize_file(path, fs::file_size(path) - 20);
    EXPECT_THROW(io::read_archive(path), io::ArchiveError);

    std::ofstream(path, std::ios::binary) << "not an archive at all";
    EXPECT_THROW(io::read_archive(path), io::ArchiveError);
    EXPECT_THROW(io::read_archive(temp_path("does_not_exist.cvae")), io::ArchiveError);
}

TEST(Config, DefaultsFollowPaper) {
    const auto c = config_from_json(nlohmann::json::object());
    EXPECT_EQ(c.problem, synthgen::Problem::sine1d);
    EXPECT_EQ(c.train.batch_size, 256);
    EXPECT_DOUBLE_EQ(c.train.adam_alpha, 1e-4);
    EXPECT_DOUBLE_EQ(c.train.adam_beta1, 0.5);
    EXPECT_DOUBLE_EQ(c.train.adam_beta2, 0.9);
    EXPECT_EQ(c.train.anneal_every, 20000);
    EXPECT_EQ(c.train.curriculum_max_K, 16);
    const auto c2 = config_from_json({{"problem", "gradient2d"}});
    EXPECT_EQ(c2.train.curriculum_max_K, 8);
    EXPECT_TRUE(std::holds_alternative<synthgen::GradientBatchSpec>(c2.data));
}

TEST(Config, DataGeometryFlowsIntoModel) {
    const auto c = config_from_json(
        {{"model", {{"preset", "tiny"}}}, {"data", {{"freq_range", {1, 5}}, {"timesteps", 100}, {"resolution", 50}}}});
    EXPECT_EQ(c.model.timesteps, 100);
    EXPECT_EQ(c.model.freq_lo, 1);
    EXPECT_EQ(c.model.freq_hi, 5);
    EXPECT_EQ(c.model.dim_w, 4);
}

TEST(Config, JsonRoundTrip) {
    const auto c = config_from_json({{"problem", "gradient2d"},
                                     {"model", {{"preset", "tiny"}, {"graph_layers", 2}}},
                                     {"train", {{"seed", 99}, {"batch_size", 8}, {"precision", "float64"}}},
                                     {"data", {{"anchor_count_range", {1, 3}}, {"intensity_range", {6, 7}}}}});
    const auto j = to_json(c);
    const auto back = config_from_json(j);
    EXPECT_EQ(to_json(back), j);
    EXPECT_EQ(back.train.seed, 99u);
    EXPECT_EQ(back.model.graph_layers, 2);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(config_from_json({{"modle", nlohmann::json::object()}}), ConfigError);
    EXPECT_THROW(config_from_json({{"train", {{"batchsize", 3}}}}), ConfigError);
    EXPECT_THROW(config_from_json({{"train", {{"batch_size", "many"}}}}), ConfigError);
    EXPECT_THROW(config_from_json({{"train", {{"curriculum_start_K", 5}, {"curriculum_max_K", 4}}}}), ConfigError);
    EXPECT_THROW(config_from_json({{"problem", "audio"}}), ConfigError);
    EXPECT_THROW(config_from_json({{"data", {{"freq_range", {3, 1}}}}}), ConfigError);
    EXPECT_THROW(config_from_json({{"model", {{"preset", "huge"}}}}), ConfigError);
}

TEST(Config, MissingFileNamesPath) {
    try {
        load_config("/nonexistent/dir/run.json");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/run.json"), std::string::npos);
    }
}
