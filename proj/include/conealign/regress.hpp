#pragma once

// Linear predictability of reference codes from SAE codes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "conealign/error.hpp"
#include "conealign/matrix.hpp"
#include "conealign/synth.hpp"

namespace conealign {

struct RegressionConfig {
    double ridge = 1e-6;
    double test_fraction = 0.2;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(ridge >= 0.0) || !std::isfinite(ridge)) throw ConfigError("ridge must be >= 0");
        if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must lie in (0, 1)");
    }
};

struct RegressionFit {
    Matrix weights;            // c_sae x c_ref
    std::vector<double> bias;  // c_ref
    double r2 = 0.0;           // held out
    double r2_insample = 0.0;  // all rows, unregularized
    double ridge = 0.0;
    std::uint64_t split_seed = 0;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    std::vector<std::string> flags;
};

namespace detail {

inline Eigen::MatrixXd augment(const Matrix& x, std::span<const std::size_t> rows) {
    Eigen::MatrixXd a(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(x.cols + 1));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        auto src = x.row(rows[r]);
        for (std::size_t c = 0; c < x.cols; ++c) a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = src[c];
        a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(x.cols)) = 1.0;
    }
    return a;
}

inline Eigen::MatrixXd gather(const Matrix& y, std::span<const std::size_t> rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(y.cols));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        auto src = y.row(rows[r]);
        for (std::size_t c = 0; c < y.cols; ++c) out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = src[c];
    }
    return out;
}

// 1 - SS_res / SS_tot with the supplied target mean; NaN when the target
// has no variance.
inline double r2_score(const Eigen::MatrixXd& y, const Eigen::MatrixXd& pred, const Eigen::RowVectorXd& mean) {
    const double ss_res = (y - pred).squaredNorm();
    const double ss_tot = (y.rowwise() - mean).squaredNorm();
    const double scale = std::max(1.0, y.squaredNorm());
    if (!(ss_tot > 1e-24 * scale)) return std::nan("");
    return 1.0 - ss_res / ss_tot;
}

} // namespace detail

/// Ridge regression on a random train split (bias column unpenalized); R²
/// on the held-out rows uses the train-split target mean.
inline RegressionFit fit_predictability(const Matrix& sae_codes, const Matrix& ref_codes, const RegressionConfig& cfg) {
    cfg.validate();
    if (sae_codes.rows != ref_codes.rows) {
        throw DataError("code matrices disagree on sample count (" + std::to_string(sae_codes.rows) + " vs " +
                        std::to_string(ref_codes.rows) + ")");
    }
    const std::size_t n = sae_codes.rows, p = sae_codes.cols;
    auto [train, test] = split_indices(n, 1.0 - cfg.test_fraction, cfg.seed);

    RegressionFit fit;
    fit.ridge = cfg.ridge;
    fit.split_seed = cfg.seed;
    fit.n_train = train.size();
    fit.n_test = test.size();
    if (train.size() <= p) fit.flags.push_back("underdetermined_train_split");

    const Eigen::MatrixXd xa = detail::augment(sae_codes, train);
    const Eigen::MatrixXd ya = detail::gather(ref_codes, train);
    Eigen::MatrixXd gram = xa.transpose() * xa;
    for (std::size_t j = 0; j < p; ++j) gram(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)) += cfg.ridge;

    Eigen::MatrixXd coef;
    if (cfg.ridge == 0.0) {
        Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
        if (!lu.isInvertible()) {
            throw SingularError("normal matrix is singular with ridge = 0 (rank " + std::to_string(lu.rank()) + " of " +
                                std::to_string(gram.rows()) + "); use ridge > 0");
        }
        coef = lu.solve(xa.transpose() * ya);
    } else {
        Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
        if (ldlt.info() != Eigen::Success) throw SingularError("ridge normal equations could not be factored");
        coef = ldlt.solve(xa.transpose() * ya);
    }
    if (!coef.allFinite()) throw SingularError("ridge solution is not finite; increase ridge");

    fit.weights = Matrix(p, ref_codes.cols);
    fit.bias.assign(ref_codes.cols, 0.0);
    for (std::size_t j = 0; j < p; ++j)
        for (std::size_t c = 0; c < ref_codes.cols; ++c)
            fit.weights(j, c) = coef(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c));
    for (std::size_t c = 0; c < ref_codes.cols; ++c)
        fit.bias[c] = coef(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(c));

    const Eigen::RowVectorXd train_mean = ya.colwise().mean();
    const Eigen::MatrixXd xt = detail::augment(sae_codes, test);
    const Eigen::MatrixXd yt = detail::gather(ref_codes, test);
    const double r2 = detail::r2_score(yt, xt * coef, train_mean);
    if (std::isnan(r2)) {
        fit.r2 = 0.0;
        fit.flags.push_back("r2_zero_variance");
    } else {
        fit.r2 = r2;
    }

    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    const Eigen::MatrixXd xall = detail::augment(sae_codes, all);
    const Eigen::MatrixXd yall = detail::gather(ref_codes, all);
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(xall);
    const Eigen::MatrixXd coef_all = cod.solve(yall);
    const double r2_in = detail::r2_score(yall, xall * coef_all, yall.colwise().mean());
    if (std::isnan(r2_in)) {
        fit.r2_insample = 0.0;
        if (fit.flags.empty() || fit.flags.back() != "r2_zero_variance") fit.flags.push_back("r2_zero_variance");
    } else {
        fit.r2_insample = r2_in;
    }
    return fit;
}

inline RegressionFit fit_predictability(const Matrix& sae_codes, const Matrix& ref_codes, double ridge = 1e-6,
                                        double test_fraction = 0.2, std::uint64_t seed = 0) {
    return fit_predictability(sae_codes, ref_codes, RegressionConfig{ridge, test_fraction, seed});
}

} // namespace conealign
