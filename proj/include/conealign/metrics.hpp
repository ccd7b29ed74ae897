#pragma once

// Alignment metrics between an SAE (dictionary + codes) and a reference
// concept model (CBM or ground truth).
//
// corr(.,.) is Pearson. A zero-variance column or atom correlates 0 with
// everything and is reported through the *_zero_var flags; argmax ties go to
// the lowest reference index.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "conealign/error.hpp"
#include "conealign/matrix.hpp"

namespace conealign {

inline constexpr long kUnmatched = -1;

struct CorrResult {
    Matrix corr; // p x q
    std::vector<char> a_zero_var;
    std::vector<char> b_zero_var;

    std::size_t zero_var_a() const { return static_cast<std::size_t>(std::count(a_zero_var.begin(), a_zero_var.end(), 1)); }
    std::size_t zero_var_b() const { return static_cast<std::size_t>(std::count(b_zero_var.begin(), b_zero_var.end(), 1)); }
};

namespace detail {

// Centers each column in place and returns the column norms; sets
// zero_var for constant columns.
inline std::vector<double> center_columns(RowMajor& x, std::vector<char>& zero_var) {
    const auto n = x.rows();
    std::vector<double> norms(static_cast<std::size_t>(x.cols()), 0.0);
    zero_var.assign(static_cast<std::size_t>(x.cols()), 0);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        auto col = x.col(j);
        const double lo = col.minCoeff(), hi = col.maxCoeff();
        if (lo == hi) {
            zero_var[static_cast<std::size_t>(j)] = 1;
            col.setZero();
            continue;
        }
        const double mean = col.sum() / static_cast<double>(n);
        col.array() -= mean;
        const double nrm = col.norm();
        const double scale = std::max(std::abs(lo), std::abs(hi));
        if (!(nrm > 1e-13 * scale * std::sqrt(static_cast<double>(n)))) {
            zero_var[static_cast<std::size_t>(j)] = 1;
            col.setZero();
            continue;
        }
        norms[static_cast<std::size_t>(j)] = nrm;
    }
    return norms;
}

} // namespace detail

/// Pearson correlation between every column of `a` and every column of `b`.
inline CorrResult corr_matrix(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) {
        throw DataError("correlation inputs disagree on row count (" + std::to_string(a.rows) + " vs " +
                        std::to_string(b.rows) + ")");
    }
    if (a.rows < 2) throw DataError("correlation needs at least 2 observations");
    RowMajor ca = a.eigen(), cb = b.eigen();
    CorrResult out;
    const auto na = detail::center_columns(ca, out.a_zero_var);
    const auto nb = detail::center_columns(cb, out.b_zero_var);
    RowMajor raw = ca.transpose() * cb;
    out.corr = Matrix(a.cols, b.cols);
    for (std::size_t i = 0; i < a.cols; ++i) {
        for (std::size_t j = 0; j < b.cols; ++j) {
            if (out.a_zero_var[i] || out.b_zero_var[j]) continue;
            const double r = raw(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) / (na[i] * nb[j]);
            out.corr(i, j) = std::clamp(r, -1.0, 1.0);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Geometric alignment
// ---------------------------------------------------------------------------

struct GeometricAlignment {
    double rho_geom = 0.0;     // mean over SAE atoms of max_i |corr(d_j, w_i)|
    double rho_geom_cbm = 0.0; // mean over reference rows of max_j |corr(d_j, w_i)|
    std::size_t constant_sae_atoms = 0;
    std::size_t constant_ref_atoms = 0;
};

/// Correlations are taken across the d coordinates of each pair of atoms.
inline GeometricAlignment geometric_alignment(const Matrix& sae_dict, const Matrix& cbm_dict) {
    if (sae_dict.cols != cbm_dict.cols) {
        throw DimensionError("dictionaries disagree on dimension (" + std::to_string(sae_dict.cols) + " vs " +
                             std::to_string(cbm_dict.cols) + ")");
    }
    if (sae_dict.cols < 2) throw DataError("geometric correlation needs d >= 2");
    if (sae_dict.rows == 0 || cbm_dict.rows == 0) throw DataError("empty dictionary");
    const auto cr = corr_matrix(transpose(sae_dict), transpose(cbm_dict)); // c_sae x c_cbm
    GeometricAlignment g;
    g.constant_sae_atoms = cr.zero_var_a();
    g.constant_ref_atoms = cr.zero_var_b();
    for (std::size_t j = 0; j < sae_dict.rows; ++j) {
        double best = 0.0;
        for (std::size_t i = 0; i < cbm_dict.rows; ++i) best = std::max(best, std::abs(cr.corr(j, i)));
        g.rho_geom += best;
    }
    g.rho_geom /= static_cast<double>(sae_dict.rows);
    for (std::size_t i = 0; i < cbm_dict.rows; ++i) {
        double best = 0.0;
        for (std::size_t j = 0; j < sae_dict.rows; ++j) best = std::max(best, std::abs(cr.corr(j, i)));
        g.rho_geom_cbm += best;
    }
    g.rho_geom_cbm /= static_cast<double>(cbm_dict.rows);
    return g;
}

inline double rho_geom(const Matrix& sae_dict, const Matrix& cbm_dict) {
    return geometric_alignment(sae_dict, cbm_dict).rho_geom;
}

// ---------------------------------------------------------------------------
// Activation alignment and match distribution
// ---------------------------------------------------------------------------

struct MatchAssignment {
    std::vector<long> match_of;        // per SAE column: reference index or kUnmatched
    std::vector<double> match_strength; // winning |corr|
    std::vector<double> p;              // per reference concept, sums to 1 over matched columns
    std::size_t unmatched = 0;
};

struct ActivationAlignment {
    double rho_act = 0.0;
    MatchAssignment assignment;
    std::size_t dead_sae_columns = 0;
    std::size_t dead_ref_columns = 0;
};

/// Builds the match distribution from a per-column match vector. Unmatched
/// columns are excluded, so p sums to 1 whenever anything matched.
inline MatchAssignment make_assignment(std::vector<long> match_of, std::vector<double> strength, std::size_t c_ref) {
    MatchAssignment a;
    a.match_of = std::move(match_of);
    a.match_strength = std::move(strength);
    a.p.assign(c_ref, 0.0);
    std::size_t matched = 0;
    for (long m : a.match_of) {
        if (m == kUnmatched) {
            ++a.unmatched;
            continue;
        }
        if (m < 0 || static_cast<std::size_t>(m) >= c_ref) throw DataError("match index out of range");
        a.p[static_cast<std::size_t>(m)] += 1.0;
        ++matched;
    }
    if (matched) {
        for (auto& v : a.p) v /= static_cast<double>(matched);
    }
    return a;
}

inline ActivationAlignment rho_act(const Matrix& sae_codes, const Matrix& cbm_codes) {
    if (sae_codes.rows != cbm_codes.rows) {
        throw DataError("code matrices disagree on sample count (" + std::to_string(sae_codes.rows) + " vs " +
                        std::to_string(cbm_codes.rows) + ")");
    }
    if (sae_codes.cols == 0 || cbm_codes.cols == 0) throw DataError("empty code matrix");
    const auto cr = corr_matrix(sae_codes, cbm_codes);
    ActivationAlignment out;
    out.dead_sae_columns = cr.zero_var_a();
    out.dead_ref_columns = cr.zero_var_b();
    const bool any_live_ref = out.dead_ref_columns < cbm_codes.cols;
    std::vector<long> match(sae_codes.cols, kUnmatched);
    std::vector<double> strength(sae_codes.cols, 0.0);
    for (std::size_t j = 0; j < sae_codes.cols; ++j) {
        if (cr.a_zero_var[j] || !any_live_ref) continue;
        long best_i = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < cbm_codes.cols; ++i) {
            const double v = std::abs(cr.corr(j, i));
            if (v > best) best = v, best_i = static_cast<long>(i);
        }
        match[j] = best_i;
        strength[j] = best;
        out.rho_act += best;
    }
    out.rho_act /= static_cast<double>(sae_codes.cols);
    out.assignment = make_assignment(std::move(match), std::move(strength), cbm_codes.cols);
    return out;
}

struct MatchEntropy {
    double raw = 0.0;        // nats
    double normalized = 0.0; // raw / ln(c_ref)
};

inline MatchEntropy match_entropy(const MatchAssignment& a, std::size_t c_ref) {
    if (c_ref < 2) throw DataError("match entropy needs at least 2 reference concepts");
    if (a.p.size() != c_ref) throw DimensionError("match distribution length != number of reference concepts");
    MatchEntropy h;
    for (double p : a.p) {
        if (p > 0.0) h.raw -= p * std::log(p);
    }
    h.normalized = std::min(1.0, h.raw / std::log(static_cast<double>(c_ref)));
    return h;
}

// ---------------------------------------------------------------------------
// Sample-level top-k agreement
// ---------------------------------------------------------------------------

struct TopKScores {
    std::size_t k = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Indices of the k largest entries (ties: lower index first).
inline std::vector<std::size_t> topk_indices(std::span<const double> v, std::size_t k) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, v.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
    idx.resize(k);
    return idx;
}

inline TopKScores topk_scores(const Matrix& sae_codes, const Matrix& cbm_codes, const MatchAssignment& assignment,
                              std::size_t k) {
    if (sae_codes.rows != cbm_codes.rows) throw DataError("code matrices disagree on sample count");
    if (assignment.match_of.size() != sae_codes.cols) throw DimensionError("assignment length != SAE code width");
    if (k < 1 || k > std::min(sae_codes.cols, cbm_codes.cols)) {
        throw ConfigError("top-k k=" + std::to_string(k) + " outside [1, " +
                          std::to_string(std::min(sae_codes.cols, cbm_codes.cols)) + "]");
    }
    TopKScores s;
    s.k = k;
    const std::size_t n = sae_codes.rows;
    if (n == 0) return s;
    std::vector<char> in_ref(cbm_codes.cols), in_mapped(cbm_codes.cols);
    double p_sum = 0.0, r_sum = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        std::fill(in_ref.begin(), in_ref.end(), 0);
        std::fill(in_mapped.begin(), in_mapped.end(), 0);
        for (auto i : topk_indices(cbm_codes.row(t), k)) in_ref[i] = 1;
        std::size_t mapped = 0, hit = 0;
        for (auto j : topk_indices(sae_codes.row(t), k)) {
            const long m = assignment.match_of[j];
            if (m == kUnmatched || in_mapped[static_cast<std::size_t>(m)]) continue;
            in_mapped[static_cast<std::size_t>(m)] = 1;
            ++mapped;
            hit += in_ref[static_cast<std::size_t>(m)];
        }
        p_sum += mapped ? static_cast<double>(hit) / static_cast<double>(mapped) : 0.0;
        r_sum += static_cast<double>(hit) / static_cast<double>(k);
    }
    s.precision = p_sum / static_cast<double>(n);
    s.recall = r_sum / static_cast<double>(n);
    s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

// ---------------------------------------------------------------------------
// Atom-to-concept matching
// ---------------------------------------------------------------------------

/// S(i, j) = corr(D_j, W_i) across coordinates; shape c_ref x c_sae.
inline Matrix atom_concept_similarity(const Matrix& sae_dict, const Matrix& cbm_dict) {
    if (sae_dict.cols != cbm_dict.cols) throw DimensionError("dictionaries disagree on dimension");
    if (sae_dict.cols < 2) throw DataError("atom similarity needs d >= 2");
    return corr_matrix(transpose(cbm_dict), transpose(sae_dict)).corr;
}

/// Per atom j, argmax_i |S(i, j)|.
inline std::vector<std::size_t> atom_concepts(const Matrix& similarity) {
    std::vector<std::size_t> out(similarity.cols, 0);
    for (std::size_t j = 0; j < similarity.cols; ++j) {
        double best = -1.0;
        for (std::size_t i = 0; i < similarity.rows; ++i) {
            const double v = std::abs(similarity(i, j));
            if (v > best) best = v, out[j] = i;
        }
    }
    return out;
}

/// Each sample's concept: the concept of its most active atom, or
/// kUnmatched when the sample's code is all zero.
inline std::vector<long> sample_concepts(const Matrix& sae_codes, std::span<const std::size_t> atom_concept) {
    if (atom_concept.size() != sae_codes.cols) throw DimensionError("atom assignment length != SAE code width");
    std::vector<long> out(sae_codes.rows, kUnmatched);
    for (std::size_t t = 0; t < sae_codes.rows; ++t) {
        auto r = sae_codes.row(t);
        std::size_t best = 0;
        for (std::size_t j = 1; j < r.size(); ++j)
            if (r[j] > r[best]) best = j;
        if (!r.empty() && r[best] > 0.0) out[t] = static_cast<long>(atom_concept[best]);
    }
    return out;
}

/// Counts of assigned concepts per class label: num_classes x c_ref.
inline Matrix concept_histogram(std::span<const long> sample_concept, const LabelVector& labels, std::size_t c_ref) {
    if (sample_concept.size() != labels.size()) throw DimensionError("sample count mismatch between codes and labels");
    Matrix h(labels.num_classes, c_ref);
    for (std::size_t t = 0; t < labels.size(); ++t) {
        if (sample_concept[t] == kUnmatched) continue;
        h(static_cast<std::size_t>(labels.values[t]), static_cast<std::size_t>(sample_concept[t])) += 1.0;
    }
    return h;
}

} // namespace conealign
