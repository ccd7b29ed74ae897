#include <cmath>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "conealign/cbm.hpp"
#include "conealign/cone.hpp"
#include "conealign/synth.hpp"
#include "helpers.hpp"

using namespace conealign;

namespace {

CbmModel random_cbm(std::size_t d, std::size_t c, std::size_t k, std::uint64_t seed) {
    CbmModel m;
    m.concept_weights = testutil::random_matrix(c, d, seed);
    m.concept_bias = testutil::column(testutil::random_matrix(c, 1, seed + 1), 0);
    m.class_weights = testutil::random_matrix(k, c, seed + 2);
    m.class_bias = testutil::column(testutil::random_matrix(k, 1, seed + 3), 0);
    return m;
}

using Block = std::vector<double>& (*)(CbmModel&);
std::vector<double>& cw(CbmModel& m) { return m.concept_weights.data; }
std::vector<double>& cb(CbmModel& m) { return m.concept_bias; }
std::vector<double>& yw(CbmModel& m) { return m.class_weights.data; }
std::vector<double>& yb(CbmModel& m) { return m.class_bias; }

void check_gradients(const CbmLossWeights& w, const char* what) {
    const std::size_t d = 6, c = 4, k = 3, n = 6;
    const auto x = testutil::random_matrix(n, d, 11);
    Matrix concepts(n, c);
    std::mt19937_64 g(12);
    for (auto& v : concepts.data) v = static_cast<double>(g() % 2);
    const std::vector<std::int64_t> labels{0, 2, 1, 1, 0, 2};
    const auto base = random_cbm(d, c, k, 13);
    const auto analytic = cbm_loss_and_grad(base, x, concepts, labels, w).grad;
    const std::pair<Block, const std::vector<double>*> blocks[] = {
        {cw, &analytic.concept_weights.data},
        {cb, &analytic.concept_bias},
        {yw, &analytic.class_weights.data},
        {yb, &analytic.class_bias},
    };
    for (const auto& [block, grad] : blocks) {
        CbmModel m = base;
        auto& p = block(m);
        const oracle::Vec x0(p.begin(), p.end());
        const auto numeric = oracle::central_diff(
            [&](const oracle::Vec& v) {
                std::copy(v.begin(), v.end(), p.begin());
                return cbm_loss_and_grad(m, x, concepts, labels, w).loss;
            },
            x0);
        const bool all_zero = std::all_of(numeric.begin(), numeric.end(), [](double v) { return std::abs(v) < 1e-9; });
        if (all_zero) {
            for (double a : *grad) EXPECT_NEAR(a, 0.0, 1e-9) << what;
        } else {
            EXPECT_LE(oracle::rel_err(*grad, numeric), 1e-4) << what;
        }
    }
}

SynthConfig dense_cfg() {
    // Denser codes than the default dataset so that concept prediction is
    // not dominated by the all-negative label.
    SynthConfig c;
    c.n_samples = 2000;
    c.d = 64;
    c.c_true = 16;
    c.k_latent = 8;
    c.factor_sparsity = 0.25;
    c.noise_sigma = 0.01;
    c.seed = 42;
    return c;
}

} // namespace

TEST(CbmPredictConcepts, ZeroWeightsGiveHalf) {
    CbmModel m = random_cbm(3, 4, 2, 1);
    std::fill(m.concept_weights.data.begin(), m.concept_weights.data.end(), 0.0);
    std::fill(m.concept_bias.begin(), m.concept_bias.end(), 0.0);
    for (double v : predict_concepts(m, std::vector<double>{1, 2, 3})) EXPECT_EQ(v, 0.5);
}

TEST(CbmPredictConcepts, SaturatesButStaysInUnitInterval) {
    CbmModel m = random_cbm(2, 2, 2, 2);
    m.concept_weights = Matrix::from_rows({{30, 0}, {-800, 0}});
    m.concept_bias = {0, 0};
    const auto c = predict_concepts(m, std::vector<double>{1, 0});
    EXPECT_GE(c[0], 1.0 - 1e-9);
    EXPECT_GE(c[1], 0.0);
    EXPECT_LT(c[0], 1.0 + 1e-15);
}

TEST(CbmPredictConcepts, DimensionMismatch) {
    const auto m = random_cbm(3, 2, 2, 3);
    EXPECT_THROW(predict_concepts(m, std::vector<double>{1, 2}), DimensionError);
}

TEST(CbmPredictClasses, UniformWhenWeightsZero) {
    CbmModel m = random_cbm(3, 4, 5, 4);
    std::fill(m.class_weights.data.begin(), m.class_weights.data.end(), 0.0);
    std::fill(m.class_bias.begin(), m.class_bias.end(), 0.0);
    for (double p : predict_classes(m, std::vector<double>{0.1, 0.2, 0.9, 1})) EXPECT_NEAR(p, 0.2, 1e-15);
}

TEST(CbmPredictClasses, DominantLogit) {
    CbmModel m = random_cbm(3, 2, 3, 5);
    m.class_weights = Matrix::from_rows({{0, 0}, {20, 0}, {0, 0}});
    m.class_bias = {0, 0, 0};
    EXPECT_GE(predict_classes(m, std::vector<double>{1, 0})[1], 0.99);
}

TEST(CbmPredictClasses, SumsToOne) {
    const auto m = random_cbm(5, 6, 4, 6);
    const auto c = testutil::random_sparse_codes(50, 6, 0.5, 7);
    for (std::size_t i = 0; i < c.rows; ++i) {
        const auto p = predict_classes(m, c.row(i));
        EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
        for (double v : p) EXPECT_GE(v, 0.0);
    }
}

TEST(CbmBottleneck, LiesInConceptCone) {
    const auto m = random_cbm(8, 5, 3, 8);
    const auto x = testutil::random_matrix(100, 8, 9);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto b = bottleneck(m, x.row(i));
        EXPECT_LE(nnls_membership(b, m.concept_weights, 1e-9).residual_norm, 1e-9 * std::max(1.0, norm2(b)));
    }
}

TEST(CbmGradients, CrossEntropy) { check_gradients({1.0, 0.0, false}, "ce"); }
TEST(CbmGradients, BinaryCrossEntropy) { check_gradients({0.0, 1.0, false}, "bce"); }
TEST(CbmGradients, Combined) { check_gradients({1.0, 0.7, false}, "joint"); }
TEST(CbmGradients, ClassifierOnLabels) { check_gradients({1.0, 0.0, true}, "independent stage two"); }

TEST(CbmTrain, JointNeedsPositiveLambda) {
    CbmConfig c;
    c.lambda = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c.mode = CbmMode::sequential;
    EXPECT_NO_THROW(c.validate());
}

TEST(CbmTrain, SequentialFreezesConceptLayer) {
    const auto ds = generate(dense_cfg());
    CbmConfig c;
    c.mode = CbmMode::sequential;
    c.epochs = 5;
    const auto r = train_cbm(ds.activations, ds.concept_labels, ds.class_labels, c);
    ASSERT_TRUE(r.stage_one.has_value());
    EXPECT_EQ(r.model.concept_weights, r.stage_one->concept_weights);
    EXPECT_EQ(r.model.concept_bias, r.stage_one->concept_bias);
    EXPECT_NE(r.model.class_weights, r.stage_one->class_weights);
}

TEST(CbmTrain, ConceptAccuracyOnHeldOutSplit) {
    const auto ds = generate(dense_cfg());
    const auto [tr, te] = split(ds, 0.8, 0);
    double negatives = 0.0;
    for (double v : te.concept_labels.data) negatives += v == 0.0;
    const double baseline = negatives / static_cast<double>(te.concept_labels.data.size());
    for (auto mode : {CbmMode::joint, CbmMode::sequential, CbmMode::independent}) {
        CbmConfig c;
        c.mode = mode;
        const auto r = train_cbm(tr.activations, tr.concept_labels, tr.class_labels, c);
        const double acc = concept_accuracy(r.model, te.activations, te.concept_labels);
        EXPECT_GE(acc, 0.95) << to_string(mode);
        EXPECT_GT(acc, baseline + 0.1) << to_string(mode);
        EXPECT_GT(class_accuracy(r.model, te.activations, te.class_labels), 0.25) << to_string(mode);
    }
}

TEST(CbmTrain, Deterministic) {
    const auto ds = generate(dense_cfg());
    CbmConfig c;
    c.epochs = 3;
    EXPECT_EQ(train_cbm(ds.activations, ds.concept_labels, ds.class_labels, c).model,
              train_cbm(ds.activations, ds.concept_labels, ds.class_labels, c).model);
}

TEST(CbmTrain, NonFiniteActivationsRejected) {
    auto x = testutil::random_matrix(40, 4, 3);
    x(3, 1) = std::numeric_limits<double>::infinity();
    const auto labels = LabelVector::from_values(std::vector<std::int64_t>(40, 1));
    EXPECT_THROW(train_cbm(x, Matrix(40, 2), labels, CbmConfig{}), DataError);
}

TEST(CbmTrain, DivergenceIsTrainingError) {
    auto x = testutil::random_matrix(40, 4, 3);
    for (auto& v : x.data) v *= 1e10;
    const auto labels = LabelVector::from_values(std::vector<std::int64_t>(40, 1));
    CbmConfig c;
    c.epochs = 2;
    c.learning_rate = 1e308;
    EXPECT_THROW(train_cbm(x, Matrix(40, 2), labels, c), TrainingError);
}

TEST(CbmTrain, ShapeMismatch) {
    const auto x = testutil::random_matrix(10, 4, 3);
    const auto labels = LabelVector::from_values(std::vector<std::int64_t>(9, 0));
    EXPECT_THROW(train_cbm(x, Matrix(10, 2), labels, CbmConfig{}), DimensionError);
}

TEST(CbmCheckpoint, RoundTrip) {
    const auto dir = testutil::scratch_dir();
    const auto m = random_cbm(5, 3, 2, 77);
    save_cbm(m, CbmConfig{}, {0.5, 0.25}, dir / "cbm");
    EXPECT_EQ(load_cbm(dir / "cbm"), m);
}
