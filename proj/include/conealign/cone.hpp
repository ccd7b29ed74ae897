#pragma once

// Cone recovery: express each reference direction v as a nonnegative
// combination of dictionary atoms.
//
//   nn_lasso          min_{a >= 0} ||v - a^T D||^2 + lambda ||a||_1   (coordinate descent)
//   nnls_membership   min_{a >= 0} ||v - a^T D||                      (Lawson-Hanson active set)
//   recover_all       row-wise nn_lasso plus the containment summaries
//                     (normalized residual, support size, coverage)

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "conealign/error.hpp"
#include "conealign/matrix.hpp"

namespace conealign {

struct RecoveryConfig {
    double lasso_lambda = 0.01;
    std::size_t max_iters = 20000; // full coordinate sweeps
    double tol = 1e-10;            // sup-norm coordinate change that stops the sweeps
    bool normalize_atoms = true;
    double active_eps = 1e-10;
    // Re-solve the normal equations on the final support (and fall back to
    // an active-set solve when KKT still fails); kept only if KKT improves.
    bool polish = true;
    std::size_t workers = 1;

    void validate() const {
        if (!(lasso_lambda >= 0.0) || !std::isfinite(lasso_lambda)) throw ConfigError("lasso_lambda must be >= 0");
        if (!(tol > 0.0)) throw ConfigError("tol must be > 0");
        if (!(active_eps > 0.0)) throw ConfigError("active_eps must be > 0");
        if (max_iters == 0) throw ConfigError("max_iters must be > 0");
    }
};

struct LassoSolution {
    std::vector<double> alpha; // coefficients on the caller's (unnormalized) atoms
    double residual_norm = 0.0;
    std::size_t iterations = 0;
    bool converged = true; // false is the convergence warning
    bool kkt_satisfied = true;
    double kkt_violation = 0.0; // max violation divided by kkt_scale
    double kkt_scale = 1.0;
    bool polished = false;
};

/// Per-dictionary state shared by every right-hand side: the working atoms
/// (unit rows when normalize_atoms is set), their Gram matrix and the scale
/// used by the KKT test.
class LassoProblem {
public:
    LassoProblem(const Matrix& dict, RecoveryConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        if (dict.rows == 0) throw DimensionError("dictionary has no atoms");
        atoms_ = dict;
        scale_.assign(dict.rows, 1.0);
        if (cfg_.normalize_atoms) {
            for (std::size_t j = 0; j < dict.rows; ++j) {
                const double nrm = norm2(dict.row(j));
                if (nrm == 0.0) throw DataError("atom " + std::to_string(j) + " has zero norm and cannot be normalized");
                scale_[j] = nrm;
                for (auto& x : atoms_.row(j)) x /= nrm;
            }
        }
        gram_ = atoms_.eigen() * atoms_.eigen().transpose();
        double max_row = 0.0;
        for (Eigen::Index j = 0; j < gram_.rows(); ++j) max_row = std::max(max_row, gram_.row(j).cwiseAbs().sum());
        gram_rowsum_ = max_row;
    }

    std::size_t atoms() const noexcept { return atoms_.rows; }
    std::size_t dim() const noexcept { return atoms_.cols; }
    const RecoveryConfig& config() const noexcept { return cfg_; }

    /// KKT tolerance scale for right-hand side v: 2 * max_j sum_k |G_jk|
    /// (the worst gradient drift per unit coordinate change) times max(1, ||v||).
    double kkt_scale(double v_norm) const { return 2.0 * std::max(gram_rowsum_, 1e-300) * std::max(1.0, v_norm); }

    LassoSolution solve(std::span<const double> v) const {
        if (v.size() != dim()) {
            throw DimensionError("vector of length " + std::to_string(v.size()) + " against dictionary of dimension " +
                                 std::to_string(dim()));
        }
        for (double x : v) {
            if (!std::isfinite(x)) throw DataError("non-finite entry in recovery target");
        }
        const auto c = static_cast<Eigen::Index>(atoms());
        const double lambda = cfg_.lasso_lambda;
        const Eigen::Map<const Eigen::VectorXd> vv(v.data(), static_cast<Eigen::Index>(v.size()));
        const Eigen::VectorXd b = atoms_.eigen() * vv;

        Eigen::VectorXd a = Eigen::VectorXd::Zero(c);
        Eigen::VectorXd q = -b; // q = G a - b, half the smooth gradient
        LassoSolution sol;
        sol.converged = false;
        for (std::size_t it = 0; it < cfg_.max_iters; ++it) {
            double max_change = 0.0;
            for (Eigen::Index j = 0; j < c; ++j) {
                const double gjj = gram_(j, j);
                if (gjj <= 0.0) continue;
                const double next = std::max(0.0, a[j] - (q[j] + 0.5 * lambda) / gjj);
                const double delta = next - a[j];
                if (delta != 0.0) {
                    a[j] = next;
                    q.noalias() += delta * gram_.col(j);
                    max_change = std::max(max_change, std::abs(delta));
                }
            }
            sol.iterations = it + 1;
            if (max_change < cfg_.tol) {
                sol.converged = true;
                break;
            }
        }

        const double v_norm = vv.norm();
        sol.kkt_scale = kkt_scale(v_norm);
        double viol = kkt_violation(a, b, sol.kkt_scale);
        if (cfg_.polish) {
            Eigen::VectorXd p;
            if (polish(a, b, p)) {
                const double pviol = kkt_violation(p, b, sol.kkt_scale);
                if (pviol <= cfg_.tol && objective(p, vv) <= objective(a, vv) + 1e-12 * std::max(1.0, v_norm * v_norm)) {
                    a = p;
                    viol = pviol;
                    sol.polished = true;
                }
            }
        }
        if (cfg_.polish && viol > cfg_.tol) {
            // Coordinate descent crawls on overcomplete, nearly degenerate
            // problems; finish with an exact active-set solve. A certified
            // result clears the iteration-cap warning.
            const Eigen::VectorXd p = active_set(b);
            const double pviol = kkt_violation(p, b, sol.kkt_scale);
            if (pviol < viol) {
                a = p;
                viol = pviol;
                sol.polished = true;
                if (viol <= cfg_.tol) sol.converged = true;
            }
        }
        sol.kkt_violation = viol;
        sol.kkt_satisfied = viol <= cfg_.tol;

        const Eigen::VectorXd recon = atoms_.eigen().transpose() * a;
        sol.residual_norm = (vv - recon).norm();
        sol.alpha.resize(atoms());
        for (std::size_t j = 0; j < atoms(); ++j) sol.alpha[j] = a[static_cast<Eigen::Index>(j)] / scale_[j];
        return sol;
    }

    /// Reconstruction alpha^T D on the caller's atoms.
    std::vector<double> reconstruct(std::span<const double> alpha) const {
        std::vector<double> out(dim(), 0.0);
        for (std::size_t j = 0; j < atoms(); ++j) {
            const double w = alpha[j] * scale_[j];
            if (w == 0.0) continue;
            auto r = atoms_.row(j);
            for (std::size_t k = 0; k < dim(); ++k) out[k] += w * r[k];
        }
        return out;
    }

private:
    double objective(const Eigen::VectorXd& a, const Eigen::Map<const Eigen::VectorXd>& v) const {
        const Eigen::VectorXd r = v - atoms_.eigen().transpose() * a;
        return r.squaredNorm() + cfg_.lasso_lambda * a.sum();
    }

    double kkt_violation(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double scale) const {
        const Eigen::VectorXd grad = 2.0 * (gram_ * a - b).array() + cfg_.lasso_lambda;
        double worst = 0.0;
        for (Eigen::Index j = 0; j < a.size(); ++j) {
            if (gram_(j, j) <= 0.0) continue;
            const double v = a[j] > 0.0 ? std::abs(grad[j]) : std::max(0.0, -grad[j]);
            worst = std::max(worst, v);
        }
        return worst / scale;
    }

    bool polish(const Eigen::VectorXd& a, const Eigen::VectorXd& b, Eigen::VectorXd& out) const {
        std::vector<Eigen::Index> support;
        for (Eigen::Index j = 0; j < a.size(); ++j)
            if (a[j] > 0.0) support.push_back(j);
        if (support.empty()) return false;
        const auto s = static_cast<Eigen::Index>(support.size());
        Eigen::MatrixXd gs(s, s);
        Eigen::VectorXd rhs(s);
        for (Eigen::Index i = 0; i < s; ++i) {
            rhs[i] = b[support[i]] - 0.5 * cfg_.lasso_lambda;
            for (Eigen::Index k = 0; k < s; ++k) gs(i, k) = gram_(support[i], support[k]);
        }
        Eigen::LDLT<Eigen::MatrixXd> ldlt(gs);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.rcond() < 1e-12) return false;
        const Eigen::VectorXd x = ldlt.solve(rhs);
        if ((x.array() <= 0.0).any()) return false;
        out = Eigen::VectorXd::Zero(a.size());
        for (Eigen::Index i = 0; i < s; ++i) out[support[i]] = x[i];
        return true;
    }

    /// Lawson-Hanson on the Gram form: min a'Ga - 2h'a over a >= 0 with
    /// h = b - lambda/2.
    Eigen::VectorXd active_set(const Eigen::VectorXd& b) const {
        const Eigen::Index c = b.size();
        const Eigen::VectorXd h = b.array() - 0.5 * cfg_.lasso_lambda;
        const double w_tol = 10.0 * std::numeric_limits<double>::epsilon() * std::max(gram_rowsum_, 1.0) *
                             static_cast<double>(c) * std::max(1.0, b.cwiseAbs().maxCoeff());
        const std::size_t max_outer = 10 * static_cast<std::size_t>(c) + 50;
        std::vector<char> passive(static_cast<std::size_t>(c), 0);
        Eigen::VectorXd x = Eigen::VectorXd::Zero(c);

        // Returns false when G_PP z = h_P is inconsistent; z then holds the
        // least-squares residual, a null direction of G_PP along which the
        // objective falls linearly.
        auto solve_passive = [&](Eigen::VectorXd& z) {
            std::vector<Eigen::Index> idx;
            for (Eigen::Index j = 0; j < c; ++j)
                if (passive[static_cast<std::size_t>(j)]) idx.push_back(j);
            const auto s = static_cast<Eigen::Index>(idx.size());
            Eigen::MatrixXd gs(s, s);
            Eigen::VectorXd rhs(s);
            for (Eigen::Index i = 0; i < s; ++i) {
                rhs[i] = h[idx[static_cast<std::size_t>(i)]];
                for (Eigen::Index k = 0; k < s; ++k) gs(i, k) = gram_(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(k)]);
            }
            const Eigen::VectorXd zs = gs.completeOrthogonalDecomposition().solve(rhs);
            const Eigen::VectorXd r = rhs - gs * zs;
            const bool consistent = r.cwiseAbs().maxCoeff() <= 1e-10 * std::max(1.0, rhs.cwiseAbs().maxCoeff());
            z = Eigen::VectorXd::Zero(c);
            for (Eigen::Index i = 0; i < s; ++i) z[idx[static_cast<std::size_t>(i)]] = consistent ? zs[i] : r[i];
            return consistent;
        };

        Eigen::VectorXd w = h - gram_ * x;
        std::vector<char> banned(static_cast<std::size_t>(c), 0);
        for (std::size_t outer = 0; outer < max_outer; ++outer) {
            Eigen::Index t = -1;
            double best = w_tol;
            for (Eigen::Index j = 0; j < c; ++j) {
                const auto uj = static_cast<std::size_t>(j);
                if (!passive[uj] && !banned[uj] && w[j] > best) best = w[j], t = j;
            }
            if (t < 0) break;
            passive[static_cast<std::size_t>(t)] = 1;
            Eigen::VectorXd z;
            for (std::size_t inner = 0; inner < max_outer; ++inner) {
                if (!solve_passive(z)) {
                    // Null step: slide along z until a passive coordinate hits zero.
                    double step = INFINITY;
                    Eigen::Index block = -1;
                    for (Eigen::Index j = 0; j < c; ++j) {
                        if (passive[static_cast<std::size_t>(j)] && z[j] < 0.0 && x[j] / -z[j] < step) {
                            step = x[j] / -z[j], block = j;
                        }
                    }
                    if (block < 0) break;
                    x += step * z;
                    x[block] = 0.0;
                    for (Eigen::Index j = 0; j < c; ++j) {
                        if (passive[static_cast<std::size_t>(j)] && x[j] <= 0.0) {
                            passive[static_cast<std::size_t>(j)] = 0;
                            x[j] = 0.0;
                        }
                    }
                    continue;
                }
                bool feasible = true;
                for (Eigen::Index j = 0; j < c; ++j)
                    if (passive[static_cast<std::size_t>(j)] && z[j] <= 0.0) feasible = false;
                if (feasible) {
                    x = z;
                    break;
                }
                // Move towards z until the first passive coordinate hits zero
                // and release it.
                double step = 1.0;
                Eigen::Index block = -1;
                for (Eigen::Index j = 0; j < c; ++j) {
                    if (passive[static_cast<std::size_t>(j)] && z[j] <= 0.0) {
                        const double denom = x[j] - z[j];
                        const double r = denom > 0.0 ? x[j] / denom : 0.0;
                        if (block < 0 || r < step) step = r, block = j;
                    }
                }
                x += step * (z - x);
                x[block] = 0.0;
                for (Eigen::Index j = 0; j < c; ++j) {
                    if (passive[static_cast<std::size_t>(j)] && x[j] <= 0.0) {
                        passive[static_cast<std::size_t>(j)] = 0;
                        x[j] = 0.0;
                    }
                }
            }
            // An entering coordinate that is released at once would be
            // picked again; skip it until the passive set changes otherwise.
            if (!passive[static_cast<std::size_t>(t)]) banned[static_cast<std::size_t>(t)] = 1;
            else std::fill(banned.begin(), banned.end(), char{0});
            w = h - gram_ * x;
        }
        return x;
    }

    RecoveryConfig cfg_;
    Matrix atoms_;
    std::vector<double> scale_;
    Eigen::MatrixXd gram_;
    double gram_rowsum_ = 0.0;
};

inline LassoSolution nn_lasso(std::span<const double> v, const Matrix& dict, const RecoveryConfig& cfg) {
    return LassoProblem(dict, cfg).solve(v);
}

struct MembershipResult {
    bool inside = false;
    double residual_norm = 0.0;
    std::vector<double> alpha;
    std::size_t iterations = 0;

    std::size_t support(double eps = 0.0) const {
        return static_cast<std::size_t>(std::count_if(alpha.begin(), alpha.end(), [eps](double x) { return x > eps; }));
    }
};

/// Exact cone membership by Lawson-Hanson NNLS on A = D^T.
/// inside is residual <= tol * ||v||.
inline MembershipResult nnls_membership(std::span<const double> v, const Matrix& dict, double tol) {
    if (dict.rows == 0) throw DimensionError("dictionary has no atoms");
    if (v.size() != dict.cols) {
        throw DimensionError("vector of length " + std::to_string(v.size()) + " against dictionary of dimension " +
                             std::to_string(dict.cols));
    }
    const auto c = static_cast<Eigen::Index>(dict.rows);
    const Eigen::Map<const Eigen::VectorXd> b(v.data(), static_cast<Eigen::Index>(v.size()));
    const Eigen::MatrixXd A = dict.eigen().transpose(); // d x c

    MembershipResult res;
    res.alpha.assign(dict.rows, 0.0);
    const double b_norm = b.norm();
    if (b_norm == 0.0) {
        res.inside = true;
        return res;
    }

    Eigen::VectorXd x = Eigen::VectorXd::Zero(c);
    std::vector<char> passive(static_cast<std::size_t>(c), 0);
    const double w_tol = 10.0 * std::numeric_limits<double>::epsilon() * A.cwiseAbs().colwise().sum().maxCoeff() *
                         static_cast<double>(std::max<Eigen::Index>(A.rows(), c)) * std::max(1.0, b_norm);
    const std::size_t max_outer = 3 * static_cast<std::size_t>(c) + 10;

    auto solve_passive = [&](Eigen::VectorXd& z) {
        std::vector<Eigen::Index> idx;
        for (Eigen::Index j = 0; j < c; ++j)
            if (passive[static_cast<std::size_t>(j)]) idx.push_back(j);
        Eigen::MatrixXd Ap(A.rows(), static_cast<Eigen::Index>(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k) Ap.col(static_cast<Eigen::Index>(k)) = A.col(idx[k]);
        const Eigen::VectorXd zp = Ap.colPivHouseholderQr().solve(b);
        z = Eigen::VectorXd::Zero(c);
        for (std::size_t k = 0; k < idx.size(); ++k) z[idx[k]] = zp[static_cast<Eigen::Index>(k)];
    };

    Eigen::VectorXd w = A.transpose() * (b - A * x);
    for (std::size_t outer = 0; outer < max_outer; ++outer) {
        Eigen::Index t = -1;
        double best = w_tol;
        for (Eigen::Index j = 0; j < c; ++j) {
            if (!passive[static_cast<std::size_t>(j)] && w[j] > best) best = w[j], t = j;
        }
        if (t < 0) break;
        passive[static_cast<std::size_t>(t)] = 1;
        ++res.iterations;

        Eigen::VectorXd z;
        for (std::size_t inner = 0; inner < max_outer; ++inner) {
            solve_passive(z);
            bool feasible = true;
            for (Eigen::Index j = 0; j < c; ++j)
                if (passive[static_cast<std::size_t>(j)] && z[j] <= 0.0) feasible = false;
            if (feasible) break;
            double step = 1.0;
            for (Eigen::Index j = 0; j < c; ++j) {
                if (passive[static_cast<std::size_t>(j)] && z[j] <= 0.0) {
                    const double denom = x[j] - z[j];
                    if (denom > 0.0) step = std::min(step, x[j] / denom);
                }
            }
            x += step * (z - x);
            for (Eigen::Index j = 0; j < c; ++j) {
                if (passive[static_cast<std::size_t>(j)] && x[j] <= 1e-300) {
                    passive[static_cast<std::size_t>(j)] = 0;
                    x[j] = 0.0;
                }
            }
        }
        x = z;
        for (Eigen::Index j = 0; j < c; ++j)
            if (!passive[static_cast<std::size_t>(j)]) x[j] = 0.0;
        w = A.transpose() * (b - A * x);
    }

    for (Eigen::Index j = 0; j < c; ++j) res.alpha[static_cast<std::size_t>(j)] = std::max(0.0, x[j]);
    const Eigen::VectorXd xa = Eigen::Map<const Eigen::VectorXd>(res.alpha.data(), c);
    res.residual_norm = (b - A * xa).norm();
    res.inside = res.residual_norm <= tol * b_norm;
    return res;
}

struct ConeRecovery {
    Matrix alphas;                   // c_ref x c_dict, nonnegative
    std::vector<double> residuals;   // normalized residual per reference row
    std::vector<std::size_t> supports;
    double coverage = 0.0;
    std::vector<char> degenerate;    // zero-norm reference row
    std::vector<char> nonconverged;  // coordinate descent hit max_iters
    std::vector<char> kkt_failed;
    std::vector<std::string> flags;

    double mean_delta() const {
        return residuals.empty() ? 0.0
                                 : std::accumulate(residuals.begin(), residuals.end(), 0.0) /
                                       static_cast<double>(residuals.size());
    }
    double mean_support() const {
        if (supports.empty()) return 0.0;
        double s = 0.0;
        for (auto x : supports) s += static_cast<double>(x);
        return s / static_cast<double>(supports.size());
    }
};

/// Recovers every row of `reference` from the atoms of `dict`.
/// Rows are independent and may be spread over cfg.workers threads; the
/// result does not depend on the worker count.
inline ConeRecovery recover_all(const Matrix& reference, const Matrix& dict, const RecoveryConfig& cfg) {
    if (reference.cols != dict.cols) {
        throw DimensionError("reference dimension " + std::to_string(reference.cols) + " != dictionary dimension " +
                             std::to_string(dict.cols));
    }
    const LassoProblem problem(dict, cfg);
    const std::size_t m = reference.rows;
    ConeRecovery out;
    out.alphas = Matrix(m, dict.rows);
    out.residuals.assign(m, 0.0);
    out.supports.assign(m, 0);
    out.degenerate.assign(m, 0);
    out.nonconverged.assign(m, 0);
    out.kkt_failed.assign(m, 0);
    std::vector<double> recon_energy(m, 0.0), target_energy(m, 0.0);

    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const auto v = reference.row(i);
            const double vn = norm2(v);
            if (vn == 0.0) {
                out.degenerate[i] = 1;
                continue;
            }
            const auto sol = problem.solve(v);
            std::copy(sol.alpha.begin(), sol.alpha.end(), out.alphas.row(i).begin());
            out.residuals[i] = sol.residual_norm / vn;
            out.supports[i] = static_cast<std::size_t>(
                std::count_if(sol.alpha.begin(), sol.alpha.end(), [&](double a) { return a > cfg.active_eps; }));
            out.nonconverged[i] = !sol.converged;
            out.kkt_failed[i] = !sol.kkt_satisfied;
            const auto recon = problem.reconstruct(sol.alpha);
            recon_energy[i] = dot(recon, recon);
            target_energy[i] = vn * vn;
        }
    };

    const std::size_t workers = std::clamp<std::size_t>(cfg.workers, 1, std::max<std::size_t>(m, 1));
    if (workers <= 1) {
        work(0, m);
    } else {
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        const std::size_t chunk = (m + workers - 1) / workers;
        for (std::size_t w = 0; w < workers; ++w) {
            const std::size_t b = std::min(m, w * chunk), e = std::min(m, b + chunk);
            pool.emplace_back([&, w, b, e] {
                try {
                    work(b, e);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    // Summed in row order so the total is independent of the worker count.
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < m; ++i) num += recon_energy[i], den += target_energy[i];
    out.coverage = den > 0.0 ? num / den : 0.0;

    if (den == 0.0) out.flags.emplace_back("all_reference_rows_zero");
    if (out.coverage > 1.0) out.flags.emplace_back("coverage_exceeds_one");
    auto count = [](const std::vector<char>& v) { return std::count(v.begin(), v.end(), char{1}); };
    if (auto k = count(out.degenerate)) out.flags.push_back("degenerate_rows:" + std::to_string(k));
    if (auto k = count(out.nonconverged)) out.flags.push_back("convergence_warning:" + std::to_string(k));
    if (auto k = count(out.kkt_failed)) out.flags.push_back("kkt_violation:" + std::to_string(k));
    return out;
}

} // namespace conealign
