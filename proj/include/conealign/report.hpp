#pragma once

// AlignmentReport: every alignment metric for one (SAE, reference) pair,
// with JSON as the canonical form and a fixed-order CSV projection.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "conealign/cone.hpp"
#include "conealign/error.hpp"
#include "conealign/matrix.hpp"
#include "conealign/metrics.hpp"
#include "conealign/regress.hpp"
#include "conealign/sae.hpp"
#include "conealign/tensor_io.hpp"

namespace conealign {

inline constexpr const char* kReportSchemaVersion = "1.0";

struct AlignConfig {
    RecoveryConfig recovery;
    RegressionConfig regression;
    std::size_t topk_k = 5;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["lasso_lambda"] = recovery.lasso_lambda;
        j["max_iters"] = recovery.max_iters;
        j["tol"] = recovery.tol;
        j["normalize_atoms"] = recovery.normalize_atoms;
        j["active_eps"] = recovery.active_eps;
        j["polish"] = recovery.polish;
        j["topk_k"] = topk_k;
        j["ridge"] = regression.ridge;
        j["test_fraction"] = regression.test_fraction;
        j["split_seed"] = regression.seed;
        return j;
    }
};

struct AlignmentReport {
    double rho_geom = 0.0;
    double rho_geom_cbm = 0.0;
    double rho_act = 0.0;
    double coverage = 0.0;
    double mean_delta = 0.0;
    double mean_support = 0.0;
    double r2 = 0.0;
    double r2_insample = 0.0;
    double h_match_raw = 0.0;
    double h_match_normalized = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double observed_sparsity = 0.0;
    std::size_t dead_atoms = 0;

    std::size_t n_samples = 0;
    std::size_t dim = 0;
    std::size_t c_sae = 0;
    std::size_t c_ref = 0;
    std::size_t topk_k = 0;
    std::size_t dead_ref_columns = 0;

    nlohmann::ordered_json config = nlohmann::ordered_json::object();
    std::vector<std::string> flags;
};

/// Metric columns in CSV order. New metrics are appended, never inserted.
inline const std::vector<std::string>& report_csv_columns() {
    static const std::vector<std::string> cols = {
        "rho_geom",  "rho_geom_cbm", "rho_act", "coverage", "mean_delta",         "mean_support",
        "r2",        "r2_insample",  "h_match_raw", "h_match_normalized", "precision", "recall",
        "f1",        "observed_sparsity", "dead_atoms", "n_samples", "dim", "c_sae", "c_ref", "topk_k",
    };
    return cols;
}

struct AlignInputs {
    const Matrix& sae_dict;  // c_sae x d
    const Matrix& sae_codes; // n x c_sae
    const Matrix& ref_dict;  // c_ref x d
    const Matrix& ref_codes; // n x c_ref
};

inline AlignmentReport build_report(const AlignInputs& in, const AlignConfig& cfg,
                                    nlohmann::ordered_json config_echo = nlohmann::ordered_json::object()) {
    const auto& [sd, sc, rd, rc] = in;
    if (sd.cols != rd.cols) {
        throw DimensionError("SAE dictionary has d=" + std::to_string(sd.cols) + " but reference dictionary has d=" +
                             std::to_string(rd.cols));
    }
    if (sc.cols != sd.rows) {
        throw DimensionError("SAE codes have " + std::to_string(sc.cols) + " columns but the SAE dictionary has " +
                             std::to_string(sd.rows) + " atoms");
    }
    if (rc.cols != rd.rows) {
        throw DimensionError("reference codes have " + std::to_string(rc.cols) +
                             " columns but the reference dictionary has " + std::to_string(rd.rows) + " atoms");
    }
    if (sc.rows != rc.rows) {
        throw DimensionError("SAE codes have " + std::to_string(sc.rows) + " rows but reference codes have " +
                             std::to_string(rc.rows));
    }

    AlignmentReport r;
    r.n_samples = sc.rows;
    r.dim = sd.cols;
    r.c_sae = sd.rows;
    r.c_ref = rd.rows;

    const auto geo = geometric_alignment(sd, rd);
    r.rho_geom = geo.rho_geom;
    r.rho_geom_cbm = geo.rho_geom_cbm;
    if (geo.constant_sae_atoms) r.flags.push_back("constant_sae_atoms:" + std::to_string(geo.constant_sae_atoms));
    if (geo.constant_ref_atoms) r.flags.push_back("constant_ref_atoms:" + std::to_string(geo.constant_ref_atoms));

    const auto rec = recover_all(rd, sd, cfg.recovery);
    r.coverage = rec.coverage;
    r.mean_delta = rec.mean_delta();
    r.mean_support = rec.mean_support();
    r.flags.insert(r.flags.end(), rec.flags.begin(), rec.flags.end());

    const auto act = rho_act(sc, rc);
    r.rho_act = act.rho_act;
    r.dead_ref_columns = act.dead_ref_columns;
    if (act.dead_sae_columns) r.flags.push_back("unmatched_sae_columns:" + std::to_string(act.dead_sae_columns));
    if (act.dead_ref_columns) r.flags.push_back("dead_ref_columns:" + std::to_string(act.dead_ref_columns));

    if (rd.rows >= 2) {
        const auto h = match_entropy(act.assignment, rd.rows);
        r.h_match_raw = h.raw;
        r.h_match_normalized = h.normalized;
    } else {
        r.flags.emplace_back("h_match_undefined_single_concept");
    }

    std::size_t k = cfg.topk_k;
    const std::size_t k_max = std::min(sc.cols, rc.cols);
    if (k > k_max) {
        r.flags.push_back("topk_k_clamped:" + std::to_string(k) + "->" + std::to_string(k_max));
        k = k_max;
    }
    const auto tk = topk_scores(sc, rc, act.assignment, k);
    r.topk_k = k;
    r.precision = tk.precision;
    r.recall = tk.recall;
    r.f1 = tk.f1;

    const auto fit = fit_predictability(sc, rc, cfg.regression);
    r.r2 = fit.r2;
    r.r2_insample = fit.r2_insample;
    r.flags.insert(r.flags.end(), fit.flags.begin(), fit.flags.end());

    r.observed_sparsity = observed_sparsity(sc);
    r.dead_atoms = dead_atoms(sc);

    r.config = nlohmann::ordered_json::object();
    r.config["metrics"] = cfg.to_json();
    for (auto it = config_echo.begin(); it != config_echo.end(); ++it) r.config[it.key()] = it.value();
    return r;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline double report_value(const AlignmentReport& r, const std::string& col) {
    if (col == "rho_geom") return r.rho_geom;
    if (col == "rho_geom_cbm") return r.rho_geom_cbm;
    if (col == "rho_act") return r.rho_act;
    if (col == "coverage") return r.coverage;
    if (col == "mean_delta") return r.mean_delta;
    if (col == "mean_support") return r.mean_support;
    if (col == "r2") return r.r2;
    if (col == "r2_insample") return r.r2_insample;
    if (col == "h_match_raw") return r.h_match_raw;
    if (col == "h_match_normalized") return r.h_match_normalized;
    if (col == "precision") return r.precision;
    if (col == "recall") return r.recall;
    if (col == "f1") return r.f1;
    if (col == "observed_sparsity") return r.observed_sparsity;
    if (col == "dead_atoms") return static_cast<double>(r.dead_atoms);
    if (col == "n_samples") return static_cast<double>(r.n_samples);
    if (col == "dim") return static_cast<double>(r.dim);
    if (col == "c_sae") return static_cast<double>(r.c_sae);
    if (col == "c_ref") return static_cast<double>(r.c_ref);
    if (col == "topk_k") return static_cast<double>(r.topk_k);
    throw ConfigError("unknown report column '" + col + "'");
}

inline nlohmann::ordered_json to_json(const AlignmentReport& r) {
    nlohmann::ordered_json j;
    j["schema_version"] = kReportSchemaVersion;
    nlohmann::ordered_json m;
    for (const auto& col : report_csv_columns()) {
        const double v = report_value(r, col);
        if (col == "dead_atoms" || col == "n_samples" || col == "dim" || col == "c_sae" || col == "c_ref" ||
            col == "topk_k") {
            m[col] = static_cast<std::uint64_t>(v);
        } else if (std::isfinite(v)) {
            m[col] = v;
        } else {
            m[col] = nullptr;
        }
    }
    m["dead_ref_columns"] = r.dead_ref_columns;
    j["metrics"] = std::move(m);
    j["config"] = r.config;
    j["flags"] = r.flags;
    return j;
}

inline std::string report_json_string(const AlignmentReport& r) { return to_json(r).dump(2) + "\n"; }

inline std::string report_csv_header() {
    std::string s;
    for (const auto& c : report_csv_columns()) s += (s.empty() ? "" : ",") + c;
    return s;
}

inline std::string report_csv_row(const AlignmentReport& r) {
    std::string s;
    bool first = true;
    for (const auto& c : report_csv_columns()) {
        if (!first) s += ",";
        first = false;
        s += detail::format_double(report_value(r, c));
    }
    return s;
}

inline void write_report_json(const AlignmentReport& r, const std::filesystem::path& path) {
    detail::write_file(path, report_json_string(r));
}

/// Appends one row; writes the header first when the file is new or empty.
inline void append_report_csv(const AlignmentReport& r, const std::filesystem::path& path) {
    std::error_code ec;
    const bool fresh = !std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) == 0;
    std::ofstream out(path, std::ios::app | std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for appending");
    if (fresh) out << report_csv_header() << "\n";
    out << report_csv_row(r) << "\n";
    if (!out) throw IoError("write to '" + path.string() + "' failed");
}

/// Structural validation against the published schema. Returns the list of
/// problems; empty means valid. Accepts json or ordered_json.
template <class Json>
std::vector<std::string> validate_report(const Json& j) {
    std::vector<std::string> errs;
    if (!j.is_object()) return {"report is not a JSON object"};
    if (!j.contains("schema_version") || !j["schema_version"].is_string()) {
        errs.emplace_back("missing string field schema_version");
    } else if (j["schema_version"].template get<std::string>().rfind("1.", 0) != 0) {
        errs.emplace_back("unsupported schema_version " + j["schema_version"].template get<std::string>());
    }
    if (!j.contains("metrics") || !j["metrics"].is_object()) {
        errs.emplace_back("missing object field metrics");
    } else {
        const auto& m = j["metrics"];
        static const std::vector<std::string> unit = {"rho_geom", "rho_geom_cbm", "rho_act",   "mean_delta",
                                                      "h_match_normalized", "precision", "recall", "f1",
                                                      "observed_sparsity"};
        static const std::vector<std::string> counts = {"dead_atoms", "n_samples", "dim", "c_sae", "c_ref", "topk_k"};
        for (const auto& col : report_csv_columns()) {
            if (!m.contains(col)) {
                errs.push_back("metrics." + col + " missing");
                continue;
            }
            const auto& v = m[col];
            if (std::find(counts.begin(), counts.end(), col) != counts.end()) {
                if (!v.is_number_unsigned()) errs.push_back("metrics." + col + " must be a nonnegative integer");
                continue;
            }
            if (v.is_null()) continue;
            if (!v.is_number()) {
                errs.push_back("metrics." + col + " must be a number or null");
                continue;
            }
            const double x = v.template get<double>();
            const bool bounded = std::find(unit.begin(), unit.end(), col) != unit.end();
            if (bounded && (x < 0.0 || x > 1.0)) errs.push_back("metrics." + col + " outside [0, 1]");
            if ((col == "coverage" || col == "mean_support" || col == "h_match_raw") && x < 0.0)
                errs.push_back("metrics." + col + " negative");
            if ((col == "r2" || col == "r2_insample") && x > 1.0 + 1e-12) errs.push_back("metrics." + col + " above 1");
        }
    }
    if (!j.contains("config") || !j["config"].is_object()) errs.emplace_back("missing object field config");
    if (!j.contains("flags") || !j["flags"].is_array()) {
        errs.emplace_back("missing array field flags");
    } else {
        for (const auto& f : j["flags"])
            if (!f.is_string()) errs.emplace_back("flags entries must be strings");
    }
    return errs;
}

/// Config key order survives only when parsed as ordered_json.
template <class Json>
AlignmentReport report_from_json(const Json& j) {
    const auto errs = validate_report(j);
    if (!errs.empty()) throw FormatError("invalid report: " + errs.front());
    AlignmentReport r;
    const auto& m = j["metrics"];
    auto num = [&](const char* k) { return m[k].is_null() ? std::nan("") : m[k].template get<double>(); };
    r.rho_geom = num("rho_geom");
    r.rho_geom_cbm = num("rho_geom_cbm");
    r.rho_act = num("rho_act");
    r.coverage = num("coverage");
    r.mean_delta = num("mean_delta");
    r.mean_support = num("mean_support");
    r.r2 = num("r2");
    r.r2_insample = num("r2_insample");
    r.h_match_raw = num("h_match_raw");
    r.h_match_normalized = num("h_match_normalized");
    r.precision = num("precision");
    r.recall = num("recall");
    r.f1 = num("f1");
    r.observed_sparsity = num("observed_sparsity");
    r.dead_atoms = m["dead_atoms"].template get<std::size_t>();
    r.n_samples = m["n_samples"].template get<std::size_t>();
    r.dim = m["dim"].template get<std::size_t>();
    r.c_sae = m["c_sae"].template get<std::size_t>();
    r.c_ref = m["c_ref"].template get<std::size_t>();
    r.topk_k = m["topk_k"].template get<std::size_t>();
    if (m.contains("dead_ref_columns")) r.dead_ref_columns = m["dead_ref_columns"].template get<std::size_t>();
    r.config = nlohmann::ordered_json::parse(j["config"].dump());
    r.flags = j["flags"].template get<std::vector<std::string>>();
    return r;
}

} // namespace conealign
