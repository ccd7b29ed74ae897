#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "conealign/cone.hpp"
#include "conealign/sae.hpp"
#include "conealign/synth.hpp"
#include "helpers.hpp"

using namespace conealign;

namespace {

SaeModel identity_model(std::size_t d) {
    SaeModel m;
    m.encoder_weights = Matrix(d, d);
    for (std::size_t i = 0; i < d; ++i) m.encoder_weights(i, i) = 1.0;
    m.decoder = m.encoder_weights;
    m.encoder_bias.assign(d, 0.0);
    m.decoder_bias.assign(d, 0.0);
    return m;
}

SaeModel random_model(std::size_t c, std::size_t d, std::uint64_t seed) {
    SaeModel m;
    m.encoder_weights = testutil::random_matrix(c, d, seed);
    m.decoder = testutil::random_matrix(c, d, seed + 1);
    m.encoder_bias = testutil::column(testutil::random_matrix(c, 1, seed + 2), 0);
    m.decoder_bias = testutil::column(testutil::random_matrix(d, 1, seed + 3), 0);
    for (auto& b : m.encoder_bias) b *= 0.1;
    return m;
}

SaeConfig cfg_for(SaeVariant v, std::size_t dict, double l0) {
    SaeConfig c;
    c.variant = v;
    c.dict_size = dict;
    c.target_l0 = l0;
    c.l1_weight = 0.05;
    return c;
}

/// Compares one parameter block of the analytic gradient with central
/// differences of the loss.
void check_block(SaeModel m, const Matrix& x, const SaeConfig& cfg, std::vector<double>& (*block)(SaeModel&),
                 const std::vector<double>& analytic, const char* name) {
    std::vector<double>& p = block(m);
    oracle::Vec x0(p.begin(), p.end());
    const auto numeric = oracle::central_diff(
        [&](const oracle::Vec& v) {
            std::copy(v.begin(), v.end(), p.begin());
            return loss_and_grad(m, x, cfg).loss;
        },
        x0);
    std::copy(x0.begin(), x0.end(), p.begin());
    EXPECT_LE(oracle::rel_err(analytic, numeric), 1e-4) << name << " variant " << to_string(cfg.variant);
}

std::vector<double>& enc_w(SaeModel& m) { return m.encoder_weights.data; }
std::vector<double>& enc_b(SaeModel& m) { return m.encoder_bias; }
std::vector<double>& dec_w(SaeModel& m) { return m.decoder.data; }
std::vector<double>& dec_b(SaeModel& m) { return m.decoder_bias; }

SynthConfig recon_data() {
    SynthConfig c;
    c.n_samples = 2000;
    c.d = 64;
    c.c_true = 8;
    c.k_latent = 8;
    c.noise_sigma = 0.0;
    c.factor_sparsity = 0.25;
    c.seed = 7;
    return c;
}

} // namespace

TEST(SaeEncode, IdentityTopOne) {
    const auto m = identity_model(3);
    const std::vector<double> a{3, -1, 2};
    EXPECT_EQ(encode(m, a, SaeVariant::topk, 1), (std::vector<double>{3, 0, 0}));
}

TEST(SaeEncode, VanillaZeroInput) {
    const auto m = identity_model(4);
    const std::vector<double> a(4, 0.0);
    for (double z : encode(m, a, SaeVariant::vanilla, 0)) EXPECT_EQ(z, 0.0);
}

TEST(SaeEncode, FullKMatchesVanilla) {
    const auto m = random_model(6, 4, 3);
    const auto a = testutil::column(testutil::random_matrix(4, 1, 4), 0);
    EXPECT_EQ(encode(m, a, SaeVariant::topk, 6), encode(m, a, SaeVariant::vanilla, 0));
}

TEST(SaeEncode, TiesGoToLowerIndex) {
    auto m = identity_model(4);
    const std::vector<double> a{1, 2, 2, 2};
    EXPECT_EQ(encode(m, a, SaeVariant::topk, 2), (std::vector<double>{0, 2, 2, 0}));
}

TEST(SaeEncode, TopKIsNonnegativeAndSparse) {
    const auto m = random_model(20, 6, 11);
    const auto x = testutil::random_matrix(50, 6, 12);
    for (std::size_t k : {1u, 3u, 7u}) {
        for (std::size_t i = 0; i < x.rows; ++i) {
            const auto z = encode(m, x.row(i), SaeVariant::topk, k);
            EXPECT_LE(std::count_if(z.begin(), z.end(), [](double v) { return v != 0.0; }), static_cast<long>(k));
            for (double v : z) EXPECT_GE(v, 0.0);
        }
    }
}

TEST(SaeEncode, DimensionMismatch) {
    const auto m = identity_model(3);
    const std::vector<double> a{1, 2};
    EXPECT_THROW(encode(m, a, SaeVariant::topk, 1), DimensionError);
}

TEST(SaeBatchTopK, WorkedExample) {
    const auto m = identity_model(2);
    const auto batch = Matrix::from_rows({{5, 1}, {3, 2}});
    EXPECT_EQ(encode_batch_topk(m, batch, 1), Matrix::from_rows({{5, 0}, {3, 0}}));
}

TEST(SaeBatchTopK, AllNonPositiveGivesZero) {
    const auto m = identity_model(3);
    const auto batch = Matrix::from_rows({{-1, 0, -2}, {-3, -1, 0}});
    for (double v : encode_batch_topk(m, batch, 2).data) EXPECT_EQ(v, 0.0);
}

TEST(SaeBatchTopK, SingleRowMatchesTopK) {
    const auto m = random_model(10, 5, 21);
    const auto x = testutil::random_matrix(1, 5, 22);
    const auto z = encode_batch_topk(m, x, 3);
    const auto ref = encode(m, x.row(0), SaeVariant::topk, 3);
    for (std::size_t j = 0; j < ref.size(); ++j) {
        EXPECT_EQ(z(0, j) > 0.0, ref[j] > 0.0) << j;
        EXPECT_NEAR(z(0, j), ref[j], 1e-12) << j;
    }
}

TEST(SaeBatchTopK, KeepsGlobalLargest) {
    const auto m = random_model(12, 5, 31);
    const auto x = testutil::random_matrix(7, 5, 32);
    const std::size_t k = 2;
    const auto z = encode_batch_topk(m, x, k);
    // Oracle: flatten the post-ReLU pre-activations and take the top b*K.
    oracle::Vec flat;
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto full = encode(m, x.row(i), SaeVariant::vanilla, 0);
        flat.insert(flat.end(), full.begin(), full.end());
    }
    const auto positives = std::count_if(flat.begin(), flat.end(), [](double v) { return v > 0; });
    const auto keep = oracle::topk(flat, std::min<std::size_t>(x.rows * k, static_cast<std::size_t>(positives)));
    oracle::Vec expect(flat.size(), 0.0);
    for (auto i : keep) expect[i] = flat[i];
    for (std::size_t i = 0; i < flat.size(); ++i) EXPECT_NEAR(z.data[i], expect[i], 1e-12) << i;
}

TEST(SaeDecode, UnitCodeGivesAtomPlusBias) {
    const auto m = random_model(5, 3, 41);
    std::vector<double> z(5, 0.0);
    z[2] = 1.0;
    const auto out = decode(m, z);
    for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(out[t], m.decoder(2, t) + m.decoder_bias[t], 1e-15);
    const auto zero = decode(m, std::vector<double>(5, 0.0));
    EXPECT_EQ(zero, m.decoder_bias);
}

TEST(SaeDecode, OutputMinusBiasIsInCone) {
    const auto m = random_model(9, 6, 51);
    const auto x = testutil::random_matrix(20, 6, 52);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto z = encode(m, x.row(i), SaeVariant::topk, 3);
        auto a = decode(m, z);
        for (std::size_t t = 0; t < a.size(); ++t) a[t] -= m.decoder_bias[t];
        EXPECT_LE(nnls_membership(a, m.decoder, 1e-9).residual_norm, 1e-9 * std::max(1.0, norm2(a)));
    }
}

TEST(SaeGradients, AllVariantsMatchFiniteDifferences) {
    const auto x = testutil::random_matrix(8, 4, 61);
    for (auto v : {SaeVariant::vanilla, SaeVariant::topk, SaeVariant::batchtopk}) {
        const auto cfg = cfg_for(v, 6, 2.0 / 6.0);
        const auto m = random_model(6, 4, 62);
        const auto lg = loss_and_grad(m, x, cfg);
        check_block(m, x, cfg, enc_w, lg.grad.encoder_weights.data, "encoder_weights");
        check_block(m, x, cfg, enc_b, lg.grad.encoder_bias, "encoder_bias");
        check_block(m, x, cfg, dec_w, lg.grad.decoder.data, "decoder");
        check_block(m, x, cfg, dec_b, lg.grad.decoder_bias, "decoder_bias");
    }
}

TEST(SaeRandomInit, Deterministic) {
    SaeConfig c = cfg_for(SaeVariant::topk, 16, 0.1);
    c.seed = 5;
    EXPECT_EQ(random_init(8, c), random_init(8, c));
    auto c2 = c;
    c2.seed = 6;
    const auto a = random_init(8, c), b = random_init(8, c2);
    double dist = 0.0;
    for (std::size_t i = 0; i < a.decoder.data.size(); ++i) dist += std::pow(a.decoder.data[i] - b.decoder.data[i], 2);
    EXPECT_GT(dist, 0.0);
    for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(norm2(a.decoder.row(j)), 1.0, 1e-12);
}

TEST(SaeConfig, KFromTargetL0) {
    auto c = cfg_for(SaeVariant::topk, 128, 0.005);
    EXPECT_EQ(c.k(), 1u);
    c.target_l0 = 0.1;
    EXPECT_EQ(c.k(), 13u);
    c.target_l0 = 0.0012;
    EXPECT_EQ(c.k(), 1u);
    c.target_l0 = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c.target_l0 = 0.1;
    c.dict_size = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(SaeTrain, ZeroEpochsReturnsInitialization) {
    const auto x = testutil::random_matrix(64, 5, 71);
    auto c = cfg_for(SaeVariant::topk, 10, 0.2);
    c.epochs = 0;
    const auto r = train(x, c);
    EXPECT_EQ(r.model, initialize(x, c));
    EXPECT_TRUE(r.epoch_mse.empty());
}

TEST(SaeTrain, NeedsAtLeastOneBatch) {
    const auto x = testutil::random_matrix(10, 5, 72);
    auto c = cfg_for(SaeVariant::topk, 10, 0.2);
    c.batch_size = 11;
    EXPECT_THROW(train(x, c), ConfigError);
}

TEST(SaeTrain, DivergenceReportsLastFiniteEpoch) {
    const auto x = testutil::random_matrix(64, 5, 73);
    auto c = cfg_for(SaeVariant::vanilla, 10, 0.2);
    c.learning_rate = 1e6;
    c.epochs = 50;
    try {
        train(x, c);
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_LT(e.last_finite_epoch(), 50);
    }
}

TEST(SaeTrain, DecoderRowsStayUnitAndRunIsDeterministic) {
    const auto x = testutil::random_matrix(128, 6, 74);
    auto c = cfg_for(SaeVariant::batchtopk, 12, 0.25);
    c.epochs = 3;
    const auto a = train(x, c);
    for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(norm2(a.model.decoder.row(j)), 1.0, 1e-12);
    EXPECT_EQ(a.model, train(x, c).model);
    EXPECT_EQ(a.epoch_mse.size(), 3u);
}

TEST(SaeTrain, LossFallsOnNoiselessData) {
    const auto ds = generate(recon_data());
    for (auto v : {SaeVariant::vanilla, SaeVariant::topk, SaeVariant::batchtopk}) {
        auto c = cfg_for(v, 16, 0.25);
        c.l1_weight = 1e-3;
        c.learning_rate = 0.02;
        c.epochs = 10;
        const auto r = train(ds.activations, c);
        ASSERT_EQ(r.epoch_mse.size(), 10u);
        EXPECT_LT(r.epoch_mse.back(), r.epoch_mse.front()) << to_string(v);
        for (double m : r.epoch_mse) EXPECT_TRUE(std::isfinite(m));
    }
}

TEST(SaeTrain, ReconstructsNoiselessSyntheticData) {
    // K = 4 of 16: the smallest K with P(active factors > K) < 5% when each
    // of 8 factors fires with probability 0.25.
    const auto ds = generate(recon_data());
    auto c = cfg_for(SaeVariant::topk, 16, 0.25);
    c.epochs = 60;
    const auto trained = train(ds.activations, c);
    const double err = relative_error(trained.model, ds.activations, c);
    const double untrained = relative_error(initialize(ds.activations, c), ds.activations, c);
    EXPECT_LE(err, 0.05);
    EXPECT_GE(untrained, 5.0 * err);
}

TEST(SaeCodes, ObservedSparsityMatchesK) {
    const auto m = random_model(20, 5, 81);
    auto c = cfg_for(SaeVariant::topk, 20, 0.15);
    // Large positive encoder bias makes every pre-activation positive.
    auto mm = m;
    for (auto& b : mm.encoder_bias) b = 100.0;
    const auto z = encode_all(mm, testutil::random_matrix(30, 5, 82), c);
    EXPECT_DOUBLE_EQ(observed_sparsity(z), 1.0 - static_cast<double>(c.k()) / 20.0);
}

TEST(SaeCodes, DeadAtoms) {
    auto z = Matrix::from_rows({{0, 1, 0}, {0, 2, 0}, {0, 0, 3}});
    EXPECT_EQ(dead_atoms(z), 1u);
}

TEST(SaeCheckpoint, RoundTrip) {
    const auto dir = testutil::scratch_dir();
    const auto x = testutil::random_matrix(64, 5, 91);
    auto c = cfg_for(SaeVariant::topk, 10, 0.2);
    c.epochs = 2;
    const auto r = train(x, c);
    save_sae(r.model, c, r.epoch_mse, dir / "ckpt");
    const auto [m, cfg] = load_sae(dir / "ckpt");
    EXPECT_EQ(m, r.model);
    EXPECT_EQ(cfg.to_json(), c.to_json());
}

TEST(SaeCheckpoint, WrongKindIsRejected) {
    const auto dir = testutil::scratch_dir();
    std::ofstream(dir / "config.json") << R"({"kind": "cbm"})";
    EXPECT_THROW(load_sae(dir), FormatError);
}
