#pragma once

// Desk-scale sparse autoencoders (Vanilla / TopK / BatchTopK).
//
//   pre  = W_E (a - b_D) + b_E
//   z    = select(ReLU(pre))          vanilla: identity, topk: K largest per
//                                     sample, batchtopk: B*K largest per batch
//   a^   = z^T D + b_D
//
// Loss per batch of B rows: (1/B) sum ||a - a^||^2, plus (l1/B) sum ||z||_1
// for the vanilla variant. Gradients are derived by hand; see loss_and_grad.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "conealign/error.hpp"
#include "conealign/matrix.hpp"
#include "conealign/random.hpp"
#include "conealign/tensor_io.hpp"

namespace conealign {

enum class SaeVariant { vanilla, topk, batchtopk };

inline std::string to_string(SaeVariant v) {
    switch (v) {
    case SaeVariant::vanilla: return "vanilla";
    case SaeVariant::topk: return "topk";
    case SaeVariant::batchtopk: return "batchtopk";
    }
    return "?";
}

inline SaeVariant parse_sae_variant(const std::string& s) {
    if (s == "vanilla") return SaeVariant::vanilla;
    if (s == "topk") return SaeVariant::topk;
    if (s == "batchtopk") return SaeVariant::batchtopk;
    throw ConfigError("unsupported SAE variant '" + s + "' (supported: vanilla, topk, batchtopk)");
}

struct SaeConfig {
    SaeVariant variant = SaeVariant::topk;
    std::size_t dict_size = 128;
    double target_l0 = 0.005; // topk / batchtopk
    double l1_weight = 0.005; // vanilla
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double learning_rate = 0.1;
    std::uint64_t seed = 0;

    /// Active units per sample for the TopK variants.
    std::size_t k() const {
        const auto r = static_cast<long long>(std::llround(target_l0 * static_cast<double>(dict_size)));
        return static_cast<std::size_t>(std::max<long long>(1, r));
    }

    void validate() const {
        if (dict_size == 0) throw ConfigError("dict_size must be >= 1");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
        if (variant == SaeVariant::vanilla) {
            if (!(l1_weight >= 0.0)) throw ConfigError("l1_weight must be >= 0");
        } else if (!(target_l0 > 0.0 && target_l0 <= 1.0)) {
            throw ConfigError("target_l0 must lie in (0, 1]");
        }
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["variant"] = to_string(variant);
        j["dict_size"] = dict_size;
        if (variant == SaeVariant::vanilla) {
            j["l1_weight"] = l1_weight;
        } else {
            j["target_l0"] = target_l0;
            j["k"] = k();
        }
        j["epochs"] = epochs;
        j["batch_size"] = batch_size;
        j["learning_rate"] = learning_rate;
        j["seed"] = seed;
        return j;
    }
};

/// dict_size = expansion * d, never below one atom.
inline std::size_t dict_size_for(std::size_t d, double expansion) {
    if (!(expansion > 0.0)) throw ConfigError("expansion factor must be > 0");
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(expansion * static_cast<double>(d))));
}

struct SaeModel {
    Matrix encoder_weights;           // dict_size x d
    std::vector<double> encoder_bias; // dict_size
    Matrix decoder;                   // dict_size x d, unit rows
    std::vector<double> decoder_bias; // d

    std::size_t dict_size() const noexcept { return decoder.rows; }
    std::size_t dim() const noexcept { return decoder.cols; }

    bool operator==(const SaeModel&) const = default;
};

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

namespace detail {

inline void check_input_dim(const SaeModel& m, std::size_t d) {
    if (d != m.dim()) {
        throw DimensionError("input dimension " + std::to_string(d) + " != model dimension " + std::to_string(m.dim()));
    }
}

// Pre-activations for every row of `x`: (x - b_D) W_E^T + b_E.
inline RowMajor pre_activations(const SaeModel& m, const Matrix& x) {
    check_input_dim(m, x.cols);
    const Eigen::Map<const Eigen::RowVectorXd> bd(m.decoder_bias.data(), static_cast<Eigen::Index>(m.dim()));
    const Eigen::Map<const Eigen::RowVectorXd> be(m.encoder_bias.data(), static_cast<Eigen::Index>(m.dict_size()));
    RowMajor centered = x.eigen().rowwise() - bd;
    RowMajor pre = centered * m.encoder_weights.eigen().transpose();
    pre.rowwise() += be;
    return pre;
}

// Keeps the k largest positive entries of `v` (ties: lower index), zeroing the rest.
inline void keep_topk(std::span<double> v, std::size_t k) {
    for (auto& x : v) x = std::max(0.0, x);
    if (k >= v.size()) return;
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    for (std::size_t r = k; r < idx.size(); ++r) v[idx[r]] = 0.0;
}

// Keeps the `keep` largest positive entries over the whole matrix
// (ties: lower flat index).
inline void keep_batch_topk(std::span<double> flat, std::size_t keep) {
    for (auto& x : flat) x = std::max(0.0, x);
    if (keep >= flat.size()) return;
    std::vector<std::size_t> idx(flat.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return flat[a] > flat[b]; });
    for (std::size_t r = keep; r < idx.size(); ++r) flat[idx[r]] = 0.0;
}

} // namespace detail

/// Encodes one sample. `k` is ignored by the vanilla variant; a batchtopk
/// model encoded one sample at a time behaves as per-sample topk.
inline std::vector<double> encode(const SaeModel& m, std::span<const double> a, SaeVariant variant, std::size_t k) {
    detail::check_input_dim(m, a.size());
    std::vector<double> z(m.dict_size());
    for (std::size_t j = 0; j < m.dict_size(); ++j) {
        double s = m.encoder_bias[j];
        auto w = m.encoder_weights.row(j);
        for (std::size_t t = 0; t < a.size(); ++t) s += w[t] * (a[t] - m.decoder_bias[t]);
        z[j] = s;
    }
    if (variant == SaeVariant::vanilla) {
        for (auto& x : z) x = std::max(0.0, x);
    } else {
        detail::keep_topk(z, k);
    }
    return z;
}

/// Keeps the b*K largest post-ReLU activations across the batch.
inline Matrix encode_batch_topk(const SaeModel& m, const Matrix& batch, std::size_t k) {
    if (batch.rows == 0) throw DimensionError("batch must hold at least one row");
    auto pre = detail::pre_activations(m, batch);
    Matrix z = Matrix::from_eigen(pre);
    detail::keep_batch_topk(z.data, batch.rows * k);
    return z;
}

/// Codes for every row; batchtopk treats the whole matrix as one batch.
inline Matrix encode_all(const SaeModel& m, const Matrix& x, const SaeConfig& cfg) {
    if (cfg.variant == SaeVariant::batchtopk) return encode_batch_topk(m, x, cfg.k());
    Matrix z = Matrix::from_eigen(detail::pre_activations(m, x));
    for (std::size_t i = 0; i < z.rows; ++i) {
        if (cfg.variant == SaeVariant::vanilla) {
            for (auto& v : z.row(i)) v = std::max(0.0, v);
        } else {
            detail::keep_topk(z.row(i), cfg.k());
        }
    }
    return z;
}

inline std::vector<double> decode(const SaeModel& m, std::span<const double> z) {
    if (z.size() != m.dict_size()) {
        throw DimensionError("code length " + std::to_string(z.size()) + " != dict_size " +
                             std::to_string(m.dict_size()));
    }
    std::vector<double> out(m.decoder_bias);
    for (std::size_t j = 0; j < z.size(); ++j) {
        if (z[j] == 0.0) continue;
        auto r = m.decoder.row(j);
        for (std::size_t t = 0; t < out.size(); ++t) out[t] += z[j] * r[t];
    }
    return out;
}

inline Matrix decode_all(const SaeModel& m, const Matrix& z) {
    if (z.cols != m.dict_size()) throw DimensionError("code width != dict_size");
    const Eigen::Map<const Eigen::RowVectorXd> bd(m.decoder_bias.data(), static_cast<Eigen::Index>(m.dim()));
    RowMajor out = z.eigen() * m.decoder.eigen();
    out.rowwise() += bd;
    return Matrix::from_eigen(out);
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

inline void normalize_decoder_rows(SaeModel& m) {
    for (std::size_t j = 0; j < m.dict_size(); ++j) {
        auto r = m.decoder.row(j);
        const double s = norm2(r);
        if (s == 0.0) continue;
        for (auto& x : r) x /= s;
        for (auto& x : m.encoder_weights.row(j)) x *= s;
        m.encoder_bias[j] *= s;
    }
}

/// Gaussian decoder with unit rows; the encoder starts as its transpose.
/// Biases start at zero. Deterministic in cfg.seed.
inline SaeModel random_init(std::size_t d, const SaeConfig& cfg) {
    cfg.validate();
    if (d == 0) throw ConfigError("input dimension must be >= 1");
    Rng rng(cfg.seed);
    SaeModel m;
    m.decoder = Matrix(cfg.dict_size, d);
    for (auto& x : m.decoder.data) x = rng.normal();
    for (std::size_t j = 0; j < cfg.dict_size; ++j) {
        auto r = m.decoder.row(j);
        double s = norm2(r);
        while (s == 0.0) {
            for (auto& x : r) x = rng.normal();
            s = norm2(r);
        }
        for (auto& x : r) x /= s;
    }
    m.encoder_weights = m.decoder;
    m.encoder_bias.assign(cfg.dict_size, 0.0);
    m.decoder_bias.assign(d, 0.0);
    return m;
}

inline std::vector<double> column_means(const Matrix& x) {
    std::vector<double> mean(x.cols, 0.0);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) mean[j] += x(i, j);
    for (auto& v : mean) v /= static_cast<double>(std::max<std::size_t>(x.rows, 1));
    return mean;
}

/// random_init with the decoder bias set to the data mean; this is the
/// exact state training starts from.
inline SaeModel initialize(const Matrix& activations, const SaeConfig& cfg) {
    SaeModel m = random_init(activations.cols, cfg);
    m.decoder_bias = column_means(activations);
    return m;
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

struct SaeGrad {
    Matrix encoder_weights;
    std::vector<double> encoder_bias;
    Matrix decoder;
    std::vector<double> decoder_bias;
};

struct SaeLoss {
    double loss = 0.0;
    double sq_error = 0.0; // sum over batch of ||a - a^||^2
    SaeGrad grad;
};

/// Batch loss and its analytic gradient. For the TopK variants the
/// gradient is taken on the selected active set.
inline SaeLoss loss_and_grad(const SaeModel& m, const Matrix& x, const SaeConfig& cfg) {
    detail::check_input_dim(m, x.cols);
    const auto B = static_cast<double>(x.rows);
    const Eigen::Map<const Eigen::RowVectorXd> bd(m.decoder_bias.data(), static_cast<Eigen::Index>(m.dim()));
    const RowMajor centered = x.eigen().rowwise() - bd;
    RowMajor pre = centered * m.encoder_weights.eigen().transpose();
    pre.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(m.encoder_bias.data(),
                                                          static_cast<Eigen::Index>(m.dict_size()));
    Matrix z = Matrix::from_eigen(pre);
    if (cfg.variant == SaeVariant::batchtopk) {
        detail::keep_batch_topk(z.data, x.rows * cfg.k());
    } else {
        for (std::size_t i = 0; i < z.rows; ++i) {
            if (cfg.variant == SaeVariant::vanilla) {
                for (auto& v : z.row(i)) v = std::max(0.0, v);
            } else {
                detail::keep_topk(z.row(i), cfg.k());
            }
        }
    }
    const auto Z = z.eigen();
    RowMajor resid = Z * m.decoder.eigen();
    resid.rowwise() += bd;
    resid -= x.eigen();

    SaeLoss out;
    out.sq_error = resid.squaredNorm();
    out.loss = out.sq_error / B;
    const bool l1 = cfg.variant == SaeVariant::vanilla && cfg.l1_weight > 0.0;
    if (l1) out.loss += cfg.l1_weight * Z.sum() / B;

    const RowMajor d_xhat = (2.0 / B) * resid;
    RowMajor d_z = d_xhat * m.decoder.eigen().transpose();
    if (l1) d_z.array() += cfg.l1_weight / B;
    // Units that are zero after selection pass no gradient.
    RowMajor d_pre = (Z.array() > 0.0).cast<double>() * d_z.array();

    out.grad.decoder = Matrix::from_eigen(RowMajor(Z.transpose() * d_xhat));
    out.grad.encoder_weights = Matrix::from_eigen(RowMajor(d_pre.transpose() * centered));
    const Eigen::RowVectorXd g_be = d_pre.colwise().sum();
    const Eigen::RowVectorXd g_bd = d_xhat.colwise().sum() - g_be * m.encoder_weights.eigen();
    out.grad.encoder_bias.assign(g_be.data(), g_be.data() + g_be.size());
    out.grad.decoder_bias.assign(g_bd.data(), g_bd.data() + g_bd.size());
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct SaeTrainResult {
    SaeModel model;
    std::vector<double> epoch_mse; // mean squared error per entry, averaged over each epoch's batches
};

inline double reconstruction_mse(const SaeModel& m, const Matrix& x, const SaeConfig& cfg) {
    const Matrix xh = decode_all(m, encode_all(m, x, cfg));
    return (xh.eigen() - x.eigen()).squaredNorm() / static_cast<double>(std::max<std::size_t>(x.data.size(), 1));
}

/// ||X - X^||_F / ||X||_F.
inline double relative_error(const SaeModel& m, const Matrix& x, const SaeConfig& cfg) {
    const Matrix xh = decode_all(m, encode_all(m, x, cfg));
    const double den = x.eigen().norm();
    return den > 0.0 ? (xh.eigen() - x.eigen()).norm() / den : 0.0;
}

/// Plain minibatch SGD with a fixed learning rate. Decoder rows are
/// renormalized after each step, with the scale moved into the encoder.
inline SaeTrainResult train(const Matrix& activations, const SaeConfig& cfg) {
    cfg.validate();
    if (activations.rows < cfg.batch_size) {
        throw ConfigError("need at least batch_size (" + std::to_string(cfg.batch_size) + ") rows, got " +
                          std::to_string(activations.rows));
    }
    SaeTrainResult res;
    res.model = initialize(activations, cfg);
    SaeModel& m = res.model;
    Rng order_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
    const std::size_t n = activations.rows;
    const double lr = cfg.learning_rate;
    int last_finite = -1;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto perm = order_rng.permutation(n);
        double sq = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(n, start + cfg.batch_size);
            const Matrix batch = select_rows(activations, std::span(perm).subspan(start, end - start));
            const auto lg = loss_and_grad(m, batch, cfg);
            if (!std::isfinite(lg.loss)) {
                throw TrainingError("SAE loss became non-finite in epoch " + std::to_string(epoch) +
                                        "; lower the learning rate",
                                    last_finite);
            }
            sq += lg.sq_error;
            m.encoder_weights.eigen() -= lr * lg.grad.encoder_weights.eigen();
            m.decoder.eigen() -= lr * lg.grad.decoder.eigen();
            for (std::size_t j = 0; j < m.dict_size(); ++j) m.encoder_bias[j] -= lr * lg.grad.encoder_bias[j];
            for (std::size_t t = 0; t < m.dim(); ++t) m.decoder_bias[t] -= lr * lg.grad.decoder_bias[t];
            normalize_decoder_rows(m);
        }
        const double mse = sq / static_cast<double>(n * activations.cols);
        if (!std::isfinite(mse)) {
            throw TrainingError("SAE reconstruction error diverged in epoch " + std::to_string(epoch), last_finite);
        }
        res.epoch_mse.push_back(mse);
        last_finite = static_cast<int>(epoch);
    }
    return res;
}

/// Fraction of exactly-zero code entries.
inline double observed_sparsity(const Matrix& codes) {
    if (codes.data.empty()) return 0.0;
    const auto zeros = std::count(codes.data.begin(), codes.data.end(), 0.0);
    return static_cast<double>(zeros) / static_cast<double>(codes.data.size());
}

/// Atoms whose code column is identically zero.
inline std::size_t dead_atoms(const Matrix& codes) {
    std::size_t dead = 0;
    for (std::size_t j = 0; j < codes.cols; ++j) {
        bool any = false;
        for (std::size_t i = 0; i < codes.rows && !any; ++i) any = codes(i, j) != 0.0;
        dead += !any;
    }
    return dead;
}

// ---------------------------------------------------------------------------
// Checkpoints: encoder_weights.npy, encoder_bias.npy, decoder.npy,
// decoder_bias.npy and config.json in one directory.
// ---------------------------------------------------------------------------

inline void save_sae(const SaeModel& m, const SaeConfig& cfg, const std::vector<double>& epoch_mse,
                     const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
    save_matrix(m.encoder_weights, dir / "encoder_weights.npy");
    save_vector(m.encoder_bias, dir / "encoder_bias.npy");
    save_matrix(m.decoder, dir / "decoder.npy");
    save_vector(m.decoder_bias, dir / "decoder_bias.npy");
    nlohmann::ordered_json j;
    j["kind"] = "sae";
    j["config"] = cfg.to_json();
    j["input_dim"] = m.dim();
    j["epoch_mse"] = epoch_mse;
    detail::write_file(dir / "config.json", j.dump(2) + "\n");
}

inline SaeConfig sae_config_from_json(const nlohmann::json& j) {
    SaeConfig cfg;
    cfg.variant = parse_sae_variant(j.at("variant").get<std::string>());
    cfg.dict_size = j.at("dict_size").get<std::size_t>();
    if (j.contains("target_l0")) cfg.target_l0 = j["target_l0"].get<double>();
    if (j.contains("l1_weight")) cfg.l1_weight = j["l1_weight"].get<double>();
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

inline std::pair<SaeModel, SaeConfig> load_sae(const std::filesystem::path& dir) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(detail::read_file(dir / "config.json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError((dir / "config.json").string() + ": " + e.what());
    }
    if (j.value("kind", "") != "sae") throw FormatError(dir.string() + " is not an SAE checkpoint");
    SaeModel m;
    m.encoder_weights = load_matrix(dir / "encoder_weights.npy");
    m.encoder_bias = load_vector(dir / "encoder_bias.npy");
    m.decoder = load_matrix(dir / "decoder.npy");
    m.decoder_bias = load_vector(dir / "decoder_bias.npy");
    if (m.encoder_weights.rows != m.decoder.rows || m.encoder_weights.cols != m.decoder.cols ||
        m.encoder_bias.size() != m.decoder.rows || m.decoder_bias.size() != m.decoder.cols) {
        throw DimensionError(dir.string() + ": checkpoint arrays have inconsistent shapes");
    }
    SaeConfig cfg;
    try {
        cfg = sae_config_from_json(j.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError((dir / "config.json").string() + ": " + e.what());
    }
    return {std::move(m), cfg};
}

} // namespace conealign
