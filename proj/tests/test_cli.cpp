#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "exitrf/common.hpp"
#include "exitrf/eval.hpp"
#include "exitrf/pipeline.hpp"

using namespace exitrf;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int status;
    std::string out;
    std::string err;
};

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("exitrf_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    CliResult run(std::vector<std::string> args, bool small = true) {
        std::vector<std::string> argv{"exitrf"};
        argv.insert(argv.end(), args.begin(), args.end());
        argv.push_back("--artifacts=" + dir_.string());
        if (small) {
            for (const char* o : {"--data.frames_per_class=10", "--train.epochs=1", "--forest.n_trees=10"}) argv.emplace_back(o);
        }
        std::ostringstream out, err;
        const int status = cli::run_command(argv, out, err);
        return {status, out.str(), err.str()};
    }

    std::vector<std::uint8_t> bytes(const char* name) const { return read_file(dir_ / name); }

    fs::path dir_;
};

}  // namespace

TEST_F(CliTest, UnknownFlagAndCommandFail) {
    EXPECT_NE(run({"synth", "--no-such-flag"}).status, 0);
    EXPECT_NE(run({"frobnicate"}).status, 0);
    EXPECT_NE(run({}).status, 0);
    const auto r = run({"synth", "--data.bogus=3"});
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.err.find("data.bogus"), std::string::npos) << r.err;
    EXPECT_NE(run({"synth", "--train.epochs=abc"}).status, 0);
    EXPECT_NE(run({"synth", "--profile=huge"}).status, 0);
}

TEST_F(CliTest, MalformedConfigFails) {
    fs::create_directories(dir_);
    const auto cfg = dir_ / "bad.ini";
    std::ofstream(cfg) << "[data\nclasses = 3\n";
    const auto r = run({"synth", "--config", cfg.string()});
    EXPECT_NE(r.status, 0);
    EXPECT_FALSE(r.err.empty());
    std::ofstream(cfg) << "[data]\nclasses = -3\n";
    EXPECT_NE(run({"synth", "--config", cfg.string()}).status, 0);
    EXPECT_NE(run({"synth", "--config", (dir_ / "missing.ini").string()}).status, 0);
    EXPECT_FALSE(fs::exists(dir_ / "dataset.exrf"));
}

TEST_F(CliTest, MissingArtifactsAreReported) {
    auto r = run({"train-backbone"});
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.err.find("synth"), std::string::npos) << r.err;
    r = run({"info"});
    EXPECT_NE(r.status, 0);
}

TEST_F(CliTest, ConfigFileThenFlags) {
    fs::create_directories(dir_);
    const auto cfg = dir_ / "run.ini";
    std::ofstream(cfg) << "[data]\nclasses = 4\nframes_per_class = 12\n";
    ASSERT_EQ(run({"synth", "--config", cfg.string()}, false).status, 0);
    auto ds = rfdata::dataset_read(dir_ / "dataset.exrf");
    EXPECT_EQ(ds.num_classes, 4);
    EXPECT_EQ(ds.size(), 48u);
    ASSERT_EQ(run({"synth", "--config", cfg.string(), "--data.frames_per_class=10"}, false).status, 0);
    ds = rfdata::dataset_read(dir_ / "dataset.exrf");
    EXPECT_EQ(ds.size(), 40u);
}

TEST_F(CliTest, LockBlocksConcurrentRuns) {
    fs::create_directories(dir_);
    std::ofstream(dir_ / ".exitrf.lock") << "1\n";
    const auto r = run({"synth"});
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.err.find("locked"), std::string::npos) << r.err;
    fs::remove(dir_ / ".exitrf.lock");
    EXPECT_EQ(run({"synth"}).status, 0);
    EXPECT_FALSE(fs::exists(dir_ / ".exitrf.lock"));
}

TEST_F(CliTest, PipelineEndToEnd) {
    ASSERT_EQ(run({"synth"}).status, 0);
    const auto ds1 = bytes("dataset.exrf");
    ASSERT_EQ(run({"synth"}).status, 0);
    EXPECT_EQ(bytes("dataset.exrf"), ds1);

    ASSERT_EQ(run({"train-backbone"}).status, 0);
    const auto m1 = bytes("backbone.excv");
    ASSERT_EQ(run({"train-backbone"}).status, 0);
    EXPECT_EQ(bytes("backbone.excv"), m1);
    EXPECT_TRUE(fs::exists(dir_ / "train_metrics.csv"));

    ASSERT_EQ(run({"train-branches"}).status, 0);
    auto r = run({"evaluate"});
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.err.find("missing range table"), std::string::npos) << r.err;

    ASSERT_EQ(run({"calibrate"}).status, 0);
    const auto t1 = bytes("ranges.exrt");
    ASSERT_EQ(run({"calibrate"}).status, 0);
    EXPECT_EQ(bytes("ranges.exrt"), t1);

    r = run({"evaluate"});
    ASSERT_EQ(r.status, 0) << r.err;
    const auto j = bytes("report.json");
    const auto reports = eval::reports_from_json(std::string(j.begin(), j.end()));
    ASSERT_EQ(reports.size(), 1u);
    EXPECT_EQ(reports[0].samples, 10u);
    EXPECT_TRUE(fs::exists(dir_ / "report.csv"));

    r = run({"evaluate", "--threshold", "0.6", "--branches", "1000"});
    EXPECT_EQ(r.status, 0) << r.err;
    EXPECT_NE(run({"evaluate", "--branches", "12"}).status, 0);
    EXPECT_NE(run({"evaluate", "--threshold", "2"}).status, 0);

    r = run({"infer", "--index", "3", "--snr", "5"});
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_NE(r.out.find("label "), std::string::npos);
    EXPECT_NE(r.out.find("exit "), std::string::npos);
    EXPECT_NE(r.out.find("flops "), std::string::npos);
    EXPECT_NE(run({"infer", "--index", "100000"}).status, 0);

    r = run({"info", (dir_ / "bundle.exhb").string()});
    ASSERT_EQ(r.status, 0) << r.err;
    auto b = earlyexit::load_bundle(dir_ / "bundle.exhb");
    EXPECT_NE(r.out.find("N = 10"), std::string::npos) << r.out;
    for (int t = 0; t < cvnn::kNumTaps; ++t) {
        EXPECT_NE(r.out.find("prefix " + std::to_string(b.model.prefix_flops(t)) + " FLOPs"), std::string::npos);
    }
    EXPECT_NE(r.out.find("branch 1: 10 trees"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("stem.conv"), std::string::npos);

    ASSERT_EQ(run({"sweep-tolerance"}).status, 0);
    const auto sj = bytes("sweep_tolerance.json");
    EXPECT_EQ(eval::reports_from_json(std::string(sj.begin(), sj.end())).size(), eval::kToleranceGrid.size());
    ASSERT_EQ(run({"sweep-snr", "--eval.snr_grid=20,-5"}).status, 0);
    const auto nj = bytes("sweep_snr.json");
    EXPECT_EQ(eval::reports_from_json(std::string(nj.begin(), nj.end())).size(), 2u);

    // A corrupted artifact is a typed error, not a crash.
    auto bad = bytes("bundle.exhb");
    bad[bad.size() / 2] ^= 0xff;
    write_file_atomic(dir_ / "bundle.exhb", bad);
    r = run({"evaluate"});
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.err.find("checksum"), std::string::npos) << r.err;
}

TEST_F(CliTest, MonteCarloWritesMedian) {
    const auto r = run({"monte-carlo", "--eval.runs=2"});
    ASSERT_EQ(r.status, 0) << r.err;
    const auto j = bytes("monte_carlo.json");
    const auto rs = eval::reports_from_json(std::string(j.begin(), j.end()));
    ASSERT_EQ(rs.size(), 3u);
    EXPECT_EQ(rs.back().name, "median");
}

TEST(RunConfig, ProfilesValidateAndRoundTrip) {
    for (const char* p : {"desk", "paper"}) {
        const auto c = pipeline::RunConfig::named(p);
        EXPECT_NO_THROW(c.validate());
        pipeline::RunConfig back;
        back.apply_ini(c.to_ini());
        EXPECT_EQ(back.to_ini(), c.to_ini());
    }
    const auto paper = pipeline::RunConfig::named("paper");
    EXPECT_EQ(paper.data.classes, 100);
    EXPECT_EQ(paper.calibration.segments, 15);
    EXPECT_EQ(paper.forest.n_trees, 400);
    EXPECT_EQ(paper.forest.max_depth, 20);
    EXPECT_EQ(paper.train.epochs, 300);
    EXPECT_EQ(paper.train.batch_size, 1024);
    EXPECT_EQ(paper.train.learning_rate, 1e-3);
    EXPECT_EQ(paper.model.width_scale, 1);
    EXPECT_THROW(pipeline::RunConfig::named("x"), std::invalid_argument);
}

TEST(RunConfig, SeedsDeriveFromRunSeed) {
    const auto a = pipeline::RunConfig::named("desk").with_seed(5);
    const auto b = pipeline::RunConfig::named("desk").with_seed(6);
    EXPECT_EQ(a.data.seed, 5u);
    EXPECT_NE(a.train.seed, b.train.seed);
    EXPECT_NE(a.forest.seed, a.train.seed);
}
