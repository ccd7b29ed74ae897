#pragma once

// Synthetic ground truth with a known cone-containment answer.
//
// K latent factors are drawn from a product measure: each factor is active
// independently with probability `factor_sparsity`. Ground-truth atom j
// belongs to factor j mod K and, when its factor is active, carries a
// half-normal magnitude |N(0,1)|. Activations are codes * dict plus optional
// isotropic Gaussian noise, so with zero noise every activation row lies in
// cone(true_dict) exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "conealign/error.hpp"
#include "conealign/matrix.hpp"
#include "conealign/random.hpp"
#include "conealign/tensor_io.hpp"

namespace conealign {

struct SynthConfig {
    std::size_t n_samples = 2000;
    std::size_t d = 64;
    std::size_t k_latent = 64;
    std::size_t c_true = 64;
    double noise_sigma = 0.01;
    double factor_sparsity = 0.03;
    std::size_t n_classes = 4;
    std::uint64_t seed = 42;

    // Atoms are rejected until every pair has |cos| <= this bound.
    double max_atom_cosine = 0.95;

    void validate() const {
        if (n_samples == 0) throw ConfigError("n_samples must be positive");
        if (k_latent == 0) throw ConfigError("k_latent must be positive");
        if (c_true < k_latent) throw ConfigError("c_true must be >= k_latent");
        if (d < c_true) throw ConfigError("d must be >= c_true");
        if (!(factor_sparsity > 0.0 && factor_sparsity <= 1.0)) throw ConfigError("factor_sparsity must lie in (0, 1]");
        if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("noise_sigma must be >= 0");
        if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
    }
};

struct SynthDataset {
    Matrix activations;    // n x d
    Matrix true_dict;      // c_true x d, unit rows
    Matrix true_codes;     // n x c_true, nonnegative
    Matrix concept_labels; // n x c_true, {0,1}
    LabelVector class_labels;
    Matrix class_readout;  // c_true x n_classes
    double concept_threshold = 0.0;

    std::size_t size() const noexcept { return activations.rows; }
};

namespace detail {

inline Matrix sample_separated_atoms(Rng& rng, std::size_t count, std::size_t d, double max_cos) {
    constexpr int kMaxAttempts = 100000;
    Matrix atoms(count, d);
    std::vector<double> cand(d);
    for (std::size_t j = 0; j < count; ++j) {
        int attempts = 0;
        while (true) {
            if (++attempts > kMaxAttempts) {
                throw ConfigError("could not sample " + std::to_string(count) + " atoms in dimension " +
                                  std::to_string(d) + " with pairwise |cos| <= " + std::to_string(max_cos));
            }
            for (auto& x : cand) x = rng.normal();
            const double nrm = norm2(cand);
            if (nrm == 0.0) continue;
            for (auto& x : cand) x /= nrm;
            bool ok = true;
            for (std::size_t k = 0; k < j && ok; ++k) ok = std::abs(dot(cand, atoms.row(k))) <= max_cos;
            if (ok) break;
        }
        std::copy(cand.begin(), cand.end(), atoms.row(j).begin());
    }
    return atoms;
}

} // namespace detail

inline SynthDataset generate(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    SynthDataset ds;
    const auto n = cfg.n_samples, d = cfg.d, c = cfg.c_true, k = cfg.k_latent;

    ds.true_dict = detail::sample_separated_atoms(rng, c, d, cfg.max_atom_cosine);

    ds.class_readout = Matrix(c, cfg.n_classes);
    for (auto& x : ds.class_readout.data) x = rng.normal();

    ds.true_codes = Matrix(n, c);
    std::vector<char> active(k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t f = 0; f < k; ++f) active[f] = rng.bernoulli(cfg.factor_sparsity);
        for (std::size_t j = 0; j < c; ++j) {
            if (!active[j % k]) continue;
            double mag = 0.0;
            while (mag == 0.0) mag = std::abs(rng.normal());
            ds.true_codes(i, j) = mag;
        }
    }

    ds.activations = Matrix::from_eigen(ds.true_codes.eigen() * ds.true_dict.eigen());
    if (cfg.noise_sigma > 0.0) {
        for (auto& x : ds.activations.data) x += cfg.noise_sigma * rng.normal();
    }

    double pos_sum = 0.0;
    std::size_t pos_count = 0;
    for (double v : ds.true_codes.data) {
        if (v > 0.0) pos_sum += v, ++pos_count;
    }
    ds.concept_threshold = pos_count ? 0.5 * pos_sum / static_cast<double>(pos_count) : 0.0;
    ds.concept_labels = Matrix(n, c);
    for (std::size_t i = 0; i < ds.true_codes.data.size(); ++i) {
        ds.concept_labels.data[i] = ds.true_codes.data[i] > ds.concept_threshold ? 1.0 : 0.0;
    }

    std::vector<std::int64_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_v = -INFINITY;
        for (std::size_t y = 0; y < cfg.n_classes; ++y) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += ds.true_codes(i, j) * ds.class_readout(j, y);
            if (s > best_v) best_v = s, best = y;
        }
        labels[i] = static_cast<std::int64_t>(best);
    }
    ds.class_labels.values = std::move(labels);
    ds.class_labels.num_classes = cfg.n_classes;
    return ds;
}

/// Disjoint random partition of [0, n). The train side gets
/// ceil(train_fraction * n) rows; both index lists come back sorted.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double train_fraction,
                                                                                  std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
    const auto n_train = static_cast<std::size_t>(std::ceil(train_fraction * static_cast<double>(n) - 1e-9));
    if (n_train == 0 || n_train >= n) {
        throw ConfigError("split of " + std::to_string(n) + " rows at fraction " + std::to_string(train_fraction) +
                          " leaves an empty side");
    }
    Rng rng(seed);
    auto perm = rng.permutation(n);
    std::vector<std::size_t> train(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> test(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {std::move(train), std::move(test)};
}

inline SynthDataset subset(const SynthDataset& ds, std::span<const std::size_t> idx) {
    SynthDataset out;
    out.activations = select_rows(ds.activations, idx);
    out.true_codes = select_rows(ds.true_codes, idx);
    out.concept_labels = select_rows(ds.concept_labels, idx);
    out.true_dict = ds.true_dict;
    out.class_readout = ds.class_readout;
    out.concept_threshold = ds.concept_threshold;
    out.class_labels.num_classes = ds.class_labels.num_classes;
    out.class_labels.values.reserve(idx.size());
    for (auto i : idx) out.class_labels.values.push_back(ds.class_labels.values[i]);
    return out;
}

inline std::pair<SynthDataset, SynthDataset> split(const SynthDataset& ds, double train_fraction, std::uint64_t seed) {
    auto [train, test] = split_indices(ds.size(), train_fraction, seed);
    return {subset(ds, train), subset(ds, test)};
}

/// Writes the dataset as npy files plus manifest.json into `dir`. The
/// ground truth is registered as the reference (cbm_dict / cbm_codes).
inline std::filesystem::path write_dataset(const SynthDataset& ds, const SynthConfig& cfg,
                                           const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
    save_matrix(ds.activations, dir / "activations.npy");
    save_matrix(ds.true_dict, dir / "true_dict.npy");
    save_matrix(ds.true_codes, dir / "true_codes.npy");
    save_matrix(ds.concept_labels, dir / "concept_labels.npy");
    save_labels(ds.class_labels, dir / "class_labels.npy");
    save_matrix(ds.class_readout, dir / "class_readout.npy");

    Manifest m;
    m.files["activations"] = "activations.npy";
    m.files["cbm_dict"] = "true_dict.npy";
    m.files["cbm_codes"] = "true_codes.npy";
    m.files["concept_labels"] = "concept_labels.npy";
    m.files["class_labels"] = "class_labels.npy";
    m.metadata["dataset"] = "synthetic";
    m.metadata["layer"] = "linear";
    m.metadata["seed"] = std::to_string(cfg.seed);
    m.metadata["n_samples"] = std::to_string(cfg.n_samples);
    m.metadata["d"] = std::to_string(cfg.d);
    m.metadata["k_latent"] = std::to_string(cfg.k_latent);
    m.metadata["c_true"] = std::to_string(cfg.c_true);
    m.metadata["noise_sigma"] = detail::format_double(cfg.noise_sigma);
    m.metadata["factor_sparsity"] = detail::format_double(cfg.factor_sparsity);
    m.metadata["n_classes"] = std::to_string(cfg.n_classes);
    const auto path = dir / "manifest.json";
    save_manifest(m, path);
    return path;
}

} // namespace conealign
