#pragma once

// Concept bottleneck: c^ = sigmoid(a W_c^T + b_c), y^ = softmax(c^ W_y^T + b_y).
//
// Training regimes over the objective CE(y^, y) + lambda * BCE(c^, c):
//   joint        both layers, combined loss, one loop
//   sequential   stage 1: (W_c, b_c) on BCE; freeze; stage 2: (W_y, b_y) on CE over c^
//   independent  stage 1 as above; (W_y, b_y) trained on the ground-truth concept
//                labels and composed with stage 1 at inference
// Losses are means over the batch; BCE sums over concepts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "conealign/error.hpp"
#include "conealign/matrix.hpp"
#include "conealign/random.hpp"
#include "conealign/tensor_io.hpp"

namespace conealign {

enum class CbmMode { joint, sequential, independent };

inline std::string to_string(CbmMode m) {
    switch (m) {
    case CbmMode::joint: return "joint";
    case CbmMode::sequential: return "sequential";
    case CbmMode::independent: return "independent";
    }
    return "?";
}

inline CbmMode parse_cbm_mode(const std::string& s) {
    if (s == "joint") return CbmMode::joint;
    if (s == "sequential") return CbmMode::sequential;
    if (s == "independent") return CbmMode::independent;
    throw ConfigError("unsupported CBM mode '" + s + "' (supported: joint, sequential, independent)");
}

struct CbmConfig {
    CbmMode mode = CbmMode::joint;
    double lambda = 1.0;
    std::size_t epochs = 60;
    std::size_t batch_size = 32;
    double learning_rate = 0.2;
    std::uint64_t seed = 0;

    void validate() const {
        if (mode == CbmMode::joint && !(lambda > 0.0)) throw ConfigError("joint CBM training requires lambda > 0");
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["mode"] = to_string(mode);
        j["lambda"] = lambda;
        j["epochs"] = epochs;
        j["batch_size"] = batch_size;
        j["learning_rate"] = learning_rate;
        j["seed"] = seed;
        return j;
    }
};

struct CbmModel {
    Matrix concept_weights;           // c x d
    std::vector<double> concept_bias; // c
    Matrix class_weights;             // num_classes x c
    std::vector<double> class_bias;   // num_classes

    std::size_t concepts() const noexcept { return concept_weights.rows; }
    std::size_t dim() const noexcept { return concept_weights.cols; }
    std::size_t classes() const noexcept { return class_weights.rows; }

    bool operator==(const CbmModel&) const = default;
};

inline constexpr double kBceClamp = 1e-7;

namespace detail {

// Sigmoid kept strictly inside (0, 1).
inline double sigmoid(double x) {
    const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    return std::clamp(s, std::numeric_limits<double>::denorm_min(), std::nextafter(1.0, 0.0));
}

inline void softmax_inplace(std::span<double> v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (auto& x : v) sum += (x = std::exp(x - mx));
    for (auto& x : v) x /= sum;
}

} // namespace detail

inline std::vector<double> predict_concepts(const CbmModel& m, std::span<const double> a) {
    if (a.size() != m.dim()) {
        throw DimensionError("input dimension " + std::to_string(a.size()) + " != CBM dimension " +
                             std::to_string(m.dim()));
    }
    std::vector<double> out(m.concepts());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid(dot(m.concept_weights.row(i), a) + m.concept_bias[i]);
    return out;
}

inline Matrix predict_concepts_all(const CbmModel& m, const Matrix& x) {
    if (x.cols != m.dim()) throw DimensionError("input dimension != CBM dimension");
    RowMajor logits = x.eigen() * m.concept_weights.eigen().transpose();
    Matrix out(x.rows, m.concepts());
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < m.concepts(); ++j)
            out(i, j) = detail::sigmoid(logits(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) +
                                        m.concept_bias[j]);
    return out;
}

inline std::vector<double> predict_classes(const CbmModel& m, std::span<const double> c_hat) {
    if (c_hat.size() != m.concepts()) {
        throw DimensionError("concept vector length " + std::to_string(c_hat.size()) + " != " +
                             std::to_string(m.concepts()));
    }
    std::vector<double> out(m.classes());
    for (std::size_t y = 0; y < out.size(); ++y) out[y] = dot(m.class_weights.row(y), c_hat) + m.class_bias[y];
    detail::softmax_inplace(out);
    return out;
}

/// Bottleneck vector c^T W_c, the projection of `a` onto cone(W_c).
inline std::vector<double> bottleneck(const CbmModel& m, std::span<const double> a) {
    const auto c = predict_concepts(m, a);
    std::vector<double> out(m.dim(), 0.0);
    for (std::size_t i = 0; i < c.size(); ++i) {
        auto r = m.concept_weights.row(i);
        for (std::size_t t = 0; t < out.size(); ++t) out[t] += c[i] * r[t];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

struct CbmLossWeights {
    double ce = 1.0;
    double bce = 1.0;
    // Feed the classifier the given concept labels instead of c^.
    bool classifier_on_labels = false;
};

struct CbmGrad {
    Matrix concept_weights;
    std::vector<double> concept_bias;
    Matrix class_weights;
    std::vector<double> class_bias;
};

struct CbmLoss {
    double loss = 0.0;
    double ce = 0.0;  // batch mean
    double bce = 0.0; // batch mean of per-sample sums
    CbmGrad grad;
};

inline CbmLoss cbm_loss_and_grad(const CbmModel& m, const Matrix& x, const Matrix& concepts,
                                 std::span<const std::int64_t> labels, const CbmLossWeights& w) {
    const std::size_t n = x.rows, c = m.concepts(), k = m.classes(), d = m.dim();
    if (x.cols != d || concepts.rows != n || concepts.cols != c || labels.size() != n) {
        throw DimensionError("CBM batch shapes are inconsistent");
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    CbmLoss out;
    out.grad.concept_weights = Matrix(c, d);
    out.grad.concept_bias.assign(c, 0.0);
    out.grad.class_weights = Matrix(k, c);
    out.grad.class_bias.assign(k, 0.0);

    std::vector<double> chat(c), g_logit(c), probs(k), g_chat(c);
    for (std::size_t i = 0; i < n; ++i) {
        auto a = x.row(i);
        auto target = concepts.row(i);
        for (std::size_t j = 0; j < c; ++j) chat[j] = detail::sigmoid(dot(m.concept_weights.row(j), a) + m.concept_bias[j]);
        std::fill(g_logit.begin(), g_logit.end(), 0.0);

        if (w.bce != 0.0) {
            for (std::size_t j = 0; j < c; ++j) {
                const double p = std::clamp(chat[j], kBceClamp, 1.0 - kBceClamp);
                out.bce -= inv_n * (target[j] * std::log(p) + (1.0 - target[j]) * std::log(1.0 - p));
                g_logit[j] += w.bce * inv_n * (chat[j] - target[j]);
            }
        }
        if (w.ce != 0.0) {
            const auto y = static_cast<std::size_t>(labels[i]);
            if (y >= k) throw DataError("class label " + std::to_string(y) + " out of range");
            std::span<const double> cls_in = w.classifier_on_labels ? target : std::span<const double>(chat);
            for (std::size_t t = 0; t < k; ++t) probs[t] = dot(m.class_weights.row(t), cls_in) + m.class_bias[t];
            detail::softmax_inplace(probs);
            out.ce -= inv_n * std::log(std::max(probs[y], std::numeric_limits<double>::min()));
            std::fill(g_chat.begin(), g_chat.end(), 0.0);
            for (std::size_t t = 0; t < k; ++t) {
                const double gy = w.ce * inv_n * (probs[t] - (t == y ? 1.0 : 0.0));
                out.grad.class_bias[t] += gy;
                auto gw = out.grad.class_weights.row(t);
                auto wy = m.class_weights.row(t);
                for (std::size_t j = 0; j < c; ++j) {
                    gw[j] += gy * cls_in[j];
                    g_chat[j] += gy * wy[j];
                }
            }
            if (!w.classifier_on_labels) {
                for (std::size_t j = 0; j < c; ++j) g_logit[j] += g_chat[j] * chat[j] * (1.0 - chat[j]);
            }
        }
        for (std::size_t j = 0; j < c; ++j) {
            if (g_logit[j] == 0.0) continue;
            out.grad.concept_bias[j] += g_logit[j];
            auto gw = out.grad.concept_weights.row(j);
            for (std::size_t t = 0; t < d; ++t) gw[t] += g_logit[j] * a[t];
        }
    }
    out.loss = w.ce * out.ce + w.bce * out.bce;
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

inline CbmModel cbm_init(std::size_t d, std::size_t concepts, std::size_t classes, std::uint64_t seed) {
    Rng rng(seed);
    CbmModel m;
    m.concept_weights = Matrix(concepts, d);
    for (auto& x : m.concept_weights.data) x = 0.01 * rng.normal();
    m.concept_bias.assign(concepts, 0.0);
    m.class_weights = Matrix(classes, concepts);
    for (auto& x : m.class_weights.data) x = 0.01 * rng.normal();
    m.class_bias.assign(classes, 0.0);
    return m;
}

struct CbmTrainResult {
    CbmModel model;
    std::vector<double> epoch_loss;
    // Sequential / independent: the model as it stood after stage 1.
    std::optional<CbmModel> stage_one;
};

inline CbmTrainResult train_cbm(const Matrix& activations, const Matrix& concept_labels, const LabelVector& class_labels,
                                const CbmConfig& cfg) {
    cfg.validate();
    const std::size_t n = activations.rows;
    if (concept_labels.rows != n || class_labels.size() != n) {
        throw DimensionError("activations (" + std::to_string(n) + " rows), concept labels (" +
                             std::to_string(concept_labels.rows) + ") and class labels (" +
                             std::to_string(class_labels.size()) + ") disagree on sample count");
    }
    if (n == 0) throw DataError("no training rows");
    if (!all_finite(activations)) throw DataError("activations contain non-finite values");
    for (double v : concept_labels.data) {
        if (v < 0.0 || v > 1.0) throw DataError("concept labels must lie in [0, 1]");
    }
    const std::size_t classes = std::max<std::size_t>(class_labels.num_classes, 2);

    CbmTrainResult res;
    res.model = cbm_init(activations.cols, concept_labels.cols, classes, cfg.seed);
    Rng order_rng(cfg.seed ^ 0xC2B2AE3D27D4EB4FULL);

    auto run_stage = [&](const CbmLossWeights& w, bool update_concepts, bool update_classes) {
        CbmModel& m = res.model;
        for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            const auto perm = order_rng.permutation(n);
            double total = 0.0;
            for (std::size_t start = 0; start < n; start += cfg.batch_size) {
                const std::size_t end = std::min(n, start + cfg.batch_size);
                const std::span<const std::size_t> idx(perm.data() + start, end - start);
                const Matrix xb = select_rows(activations, idx);
                const Matrix cb = select_rows(concept_labels, idx);
                std::vector<std::int64_t> yb(idx.size());
                for (std::size_t t = 0; t < idx.size(); ++t) yb[t] = class_labels.values[idx[t]];
                const auto lg = cbm_loss_and_grad(m, xb, cb, yb, w);
                if (!std::isfinite(lg.loss)) {
                    throw TrainingError("CBM loss became non-finite in epoch " + std::to_string(epoch),
                                        static_cast<int>(res.epoch_loss.size()) - 1);
                }
                total += lg.loss * static_cast<double>(idx.size());
                const double lr = cfg.learning_rate;
                if (update_concepts) {
                    m.concept_weights.eigen() -= lr * lg.grad.concept_weights.eigen();
                    for (std::size_t j = 0; j < m.concepts(); ++j) m.concept_bias[j] -= lr * lg.grad.concept_bias[j];
                }
                if (update_classes) {
                    m.class_weights.eigen() -= lr * lg.grad.class_weights.eigen();
                    for (std::size_t t = 0; t < m.classes(); ++t) m.class_bias[t] -= lr * lg.grad.class_bias[t];
                }
                // The sigmoid clamp keeps the loss finite even when weights overflow.
                if (!all_finite(m.concept_weights) || !all_finite(m.class_weights) ||
                    !std::ranges::all_of(m.concept_bias, [](double v) { return std::isfinite(v); }) ||
                    !std::ranges::all_of(m.class_bias, [](double v) { return std::isfinite(v); })) {
                    throw TrainingError("CBM parameters became non-finite in epoch " + std::to_string(epoch),
                                        static_cast<int>(res.epoch_loss.size()) - 1);
                }
            }
            res.epoch_loss.push_back(total / static_cast<double>(n));
        }
    };

    switch (cfg.mode) {
    case CbmMode::joint:
        run_stage({1.0, cfg.lambda, false}, true, true);
        break;
    case CbmMode::sequential:
        run_stage({0.0, 1.0, false}, true, false);
        res.stage_one = res.model;
        run_stage({1.0, 0.0, false}, false, true);
        break;
    case CbmMode::independent:
        run_stage({0.0, 1.0, false}, true, false);
        res.stage_one = res.model;
        run_stage({1.0, 0.0, true}, false, true);
        break;
    }
    return res;
}

/// Fraction of concept entries where (c^ > 0.5) matches the binary label.
inline double concept_accuracy(const CbmModel& m, const Matrix& x, const Matrix& concept_labels) {
    const Matrix pred = predict_concepts_all(m, x);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) hit += (pred.data[i] > 0.5) == (concept_labels.data[i] > 0.5);
    return pred.data.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.data.size());
}

inline double class_accuracy(const CbmModel& m, const Matrix& x, const LabelVector& labels) {
    const Matrix chat = predict_concepts_all(m, x);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto p = predict_classes(m, chat.row(i));
        const auto y = static_cast<std::int64_t>(std::max_element(p.begin(), p.end()) - p.begin());
        hit += y == labels.values[i];
    }
    return x.rows ? static_cast<double>(hit) / static_cast<double>(x.rows) : 0.0;
}

// Checkpoint layout mirrors the SAE one.
inline void save_cbm(const CbmModel& m, const CbmConfig& cfg, const std::vector<double>& epoch_loss,
                     const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
    save_matrix(m.concept_weights, dir / "concept_weights.npy");
    save_vector(m.concept_bias, dir / "concept_bias.npy");
    save_matrix(m.class_weights, dir / "class_weights.npy");
    save_vector(m.class_bias, dir / "class_bias.npy");
    nlohmann::ordered_json j;
    j["kind"] = "cbm";
    j["config"] = cfg.to_json();
    j["input_dim"] = m.dim();
    j["epoch_loss"] = epoch_loss;
    detail::write_file(dir / "config.json", j.dump(2) + "\n");
}

inline CbmModel load_cbm(const std::filesystem::path& dir) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(detail::read_file(dir / "config.json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError((dir / "config.json").string() + ": " + e.what());
    }
    if (j.value("kind", "") != "cbm") throw FormatError(dir.string() + " is not a CBM checkpoint");
    CbmModel m;
    m.concept_weights = load_matrix(dir / "concept_weights.npy");
    m.concept_bias = load_vector(dir / "concept_bias.npy");
    m.class_weights = load_matrix(dir / "class_weights.npy");
    m.class_bias = load_vector(dir / "class_bias.npy");
    if (m.concept_bias.size() != m.concepts() || m.class_weights.cols != m.concepts() ||
        m.class_bias.size() != m.classes()) {
        throw DimensionError(dir.string() + ": checkpoint arrays have inconsistent shapes");
    }
    return m;
}

} // namespace conealign
