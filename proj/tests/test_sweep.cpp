#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "conealign/sweep.hpp"
#include "conealign/synth.hpp"
#include "helpers.hpp"

using namespace conealign;

namespace {

AlignmentData small_data() {
    SynthConfig c;
    c.n_samples = 300;
    c.d = 16;
    c.k_latent = 4;
    c.c_true = 8;
    c.factor_sparsity = 0.25;
    c.seed = 5;
    const auto ds = generate(c);
    return {ds.activations, ds.true_dict, ds.true_codes};
}

SweepSpec small_spec(SweepAxis axis, std::vector<std::string> values) {
    SweepSpec s;
    s.axis = axis;
    s.values = std::move(values);
    s.base_sae.epochs = 2;
    s.base_sae.batch_size = 32;
    s.base_sae.target_l0 = 0.125;
    s.seeds = {0, 1};
    return s;
}

AlignmentReport report_with(double coverage) {
    AlignmentReport r;
    r.coverage = coverage;
    return r;
}

} // namespace

TEST(Spearman, MatchesOracle) {
    std::mt19937_64 g(1);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + g() % 10;
        std::vector<double> x(n), y(n);
        // Small integer ranges force ties.
        for (auto& v : x) v = static_cast<double>(g() % 4);
        for (auto& v : y) v = static_cast<double>(g() % 5);
        const auto s = spearman(x, y);
        const bool constant = std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; }) ||
                              std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
        if (constant) {
            EXPECT_FALSE(s.has_value());
        } else {
            ASSERT_TRUE(s.has_value());
            EXPECT_NEAR(*s, oracle::spearman(x, y), 1e-12);
        }
    }
}

TEST(Spearman, ClosedFormCases) {
    const std::vector<double> x{1, 2, 3, 4};
    EXPECT_DOUBLE_EQ(*spearman(x, std::vector<double>{10, 20, 30, 40}), 1.0);
    EXPECT_DOUBLE_EQ(*spearman(x, std::vector<double>{4, 3, 2, 1}), -1.0);
    EXPECT_FALSE(spearman(std::vector<double>{1}, std::vector<double>{2}).has_value());
    EXPECT_FALSE(spearman(x, std::vector<double>{1, NAN, 2, 3}).has_value());
    EXPECT_EQ(average_ranks(std::vector<double>{5, 1, 5, 3}), (std::vector<double>{3.5, 1, 3.5, 2}));
}

TEST(SweepSpec, Validation) {
    auto s = small_spec(SweepAxis::sparsity, {"0.1", "0.10"});
    EXPECT_THROW(s.validate(), ConfigError);
    s.values = {"0.1", "abc"};
    EXPECT_THROW(s.validate(), ConfigError);
    s.values = {"1.5"};
    EXPECT_THROW(s.validate(), ConfigError);
    s.values = {};
    EXPECT_THROW(s.validate(), ConfigError);
    s = small_spec(SweepAxis::variant, {"topk", "dense"});
    EXPECT_THROW(s.validate(), ConfigError);
    s.values = {"topk", "vanilla"};
    EXPECT_NO_THROW(s.validate());
    s.seeds.clear();
    EXPECT_THROW(s.validate(), ConfigError);
    EXPECT_THROW(parse_sweep_axis("depth"), ConfigError);
}

TEST(SweepSpec, CellConfigFollowsAxis) {
    const auto s = small_spec(SweepAxis::expansion, {"1", "4"});
    EXPECT_EQ(s.cell_config(1, 16, 9).dict_size, 64u);
    EXPECT_EQ(s.cell_config(1, 16, 9).seed, 9u);
    auto sp = small_spec(SweepAxis::sparsity, {"0.25"});
    EXPECT_EQ(sp.cell_config(0, 16, 0).target_l0, 0.25);
    EXPECT_EQ(sp.cell_config(0, 16, 0).dict_size, 32u);
}

TEST(Sweep, GridShapeAndEcho) {
    const auto res = run_sweep(small_data(), small_spec(SweepAxis::expansion, {"1", "2"}));
    ASSERT_EQ(res.cells.size(), 4u);
    EXPECT_TRUE(res.flags.empty());
    for (std::size_t v = 0; v < 2; ++v)
        for (std::size_t s = 0; s < 2; ++s) {
            const auto& c = res.cell(v, s);
            ASSERT_TRUE(c.report.has_value()) << c.error;
            EXPECT_EQ(c.report->c_sae, 16u * (v + 1));
            EXPECT_EQ(c.report->config["sweep"]["seed"], s);
            EXPECT_EQ(c.report->config["sae"]["state"], "trained");
        }
    EXPECT_EQ(res.trend_stats.size(), trend_metrics().size());
}

TEST(Sweep, TrendIsMeanOfPerSeedSpearman) {
    const auto res = run_sweep(small_data(), small_spec(SweepAxis::sparsity, {"0.0625", "0.125", "0.25"}));
    for (const auto& metric : {"coverage", "rho_act"}) {
        double sum = 0;
        std::size_t used = 0;
        for (std::size_t s = 0; s < 2; ++s) {
            std::vector<double> x, y;
            for (std::size_t v = 0; v < 3; ++v) {
                x.push_back(std::stod(res.values[v]));
                y.push_back(report_value(*res.cell(v, s).report, metric));
            }
            if (auto r = spearman(x, y)) sum += *r, ++used;
        }
        const auto t = res.trend(metric);
        ASSERT_EQ(t.has_value(), used > 0);
        if (t) EXPECT_NEAR(*t, sum / static_cast<double>(used), 1e-15);
    }
}

TEST(Sweep, WorkerCountDoesNotChangeResults) {
    auto spec = small_spec(SweepAxis::variant, {"topk", "batchtopk"});
    const auto a = run_sweep(small_data(), spec);
    spec.workers = 3;
    const auto b = run_sweep(small_data(), spec);
    for (std::size_t i = 0; i < a.cells.size(); ++i)
        EXPECT_EQ(report_json_string(*a.cells[i].report), report_json_string(*b.cells[i].report));
    EXPECT_NE(std::find(a.flags.begin(), a.flags.end(), "trend_undefined_non_numeric_axis"), a.flags.end());
}

TEST(Sweep, FailedCellsAreRecorded) {
    auto spec = small_spec(SweepAxis::expansion, {"1", "2"});
    spec.base_sae.learning_rate = 1e200;
    const auto res = run_sweep(small_data(), spec);
    for (const auto& c : res.cells) {
        EXPECT_FALSE(c.report.has_value());
        EXPECT_FALSE(c.error.empty());
    }
    EXPECT_EQ(res.flags.front(), "cell_failed:1:seed0");
    EXPECT_FALSE(res.trend("coverage").has_value());
}

TEST(Sweep, RadarNormalizationUsesCellBounds) {
    SweepResult res;
    res.axis = SweepAxis::expansion;
    res.values = {"1", "2"};
    res.seeds = {0, 1};
    const double cov[4] = {0.2, 0.4, 0.6, 1.0};
    for (double c : cov) res.cells.push_back({"", 0, report_with(c), ""});
    const auto j = radar_json(res);
    // Means 0.3 and 0.8 against bounds [0.2, 1.0].
    EXPECT_NEAR(j["metrics"]["coverage"][0].get<double>(), 0.125, 1e-12);
    EXPECT_NEAR(j["metrics"]["coverage"][1].get<double>(), 0.75, 1e-12);
    EXPECT_EQ(j["bounds"]["coverage"]["max"], 1.0);
    // Constant metrics map to 0.
    EXPECT_EQ(j["metrics"]["rho_act"][0], 0.0);
}

TEST(Sweep, WriteSweepLayout) {
    const auto dir = testutil::scratch_dir();
    auto spec = small_spec(SweepAxis::sparsity, {"0.125"});
    spec.seeds = {4};
    const auto res = run_sweep(small_data(), spec);
    write_sweep(res, dir);
    EXPECT_TRUE(std::filesystem::exists(dir / "cells" / "sparsity_0.125_seed4.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "radar.json"));
    std::ifstream in(dir / "summary.csv");
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    EXPECT_EQ(header, "axis,value,seed,status," + report_csv_header());
    EXPECT_EQ(row.substr(0, 20), "sparsity,0.125,4,ok,");
    EXPECT_NE(std::find(res.flags.begin(), res.flags.end(), "trend_undefined_single_value"), res.flags.end());
}

TEST(Sanity, SharesConfigAndUsesInitialization) {
    const auto data = small_data();
    SaeConfig cfg;
    cfg.dict_size = 32;
    cfg.epochs = 2;
    cfg.batch_size = 32;
    cfg.target_l0 = 0.125;
    const auto s = run_sanity(data, cfg, AlignConfig{});
    EXPECT_EQ(s.trained.config["metrics"], s.random.config["metrics"]);
    EXPECT_EQ(s.random.config["sae"]["state"], "untrained");
    const auto init = initialize(data.activations, cfg);
    EXPECT_DOUBLE_EQ(s.random.rho_geom, rho_geom(init.decoder, data.ref_dict));
}

TEST(Sanity, RejectsInconsistentData) {
    auto data = small_data();
    data.ref_codes = Matrix(10, 8);
    EXPECT_THROW(run_sanity(data, SaeConfig{}, AlignConfig{}), DimensionError);
}
