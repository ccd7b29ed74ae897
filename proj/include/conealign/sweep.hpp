#pragma once

// Experiment grids over SAE hyperparameters. Each cell trains one SAE on
// the dataset's activations and aligns it against the dataset's reference
// dictionary and codes (ground truth for synthetic data).

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <exception>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "conealign/error.hpp"
#include "conealign/matrix.hpp"
#include "conealign/report.hpp"
#include "conealign/sae.hpp"
#include "conealign/tensor_io.hpp"

namespace conealign {

/// What a sweep aligns against: activations plus a reference dictionary
/// and its codes.
struct AlignmentData {
    Matrix activations;
    Matrix ref_dict;
    Matrix ref_codes;

    void validate() const {
        if (activations.cols != ref_dict.cols) throw DimensionError("activations and reference dictionary disagree on d");
        if (activations.rows != ref_codes.rows) throw DimensionError("activations and reference codes disagree on n");
        if (ref_codes.cols != ref_dict.rows) throw DimensionError("reference codes and dictionary disagree on width");
    }
};

enum class SweepAxis { sparsity, expansion, variant };

inline std::string to_string(SweepAxis a) {
    switch (a) {
    case SweepAxis::sparsity: return "sparsity";
    case SweepAxis::expansion: return "expansion";
    case SweepAxis::variant: return "variant";
    }
    return "?";
}

inline SweepAxis parse_sweep_axis(const std::string& s) {
    if (s == "sparsity") return SweepAxis::sparsity;
    if (s == "expansion") return SweepAxis::expansion;
    if (s == "variant") return SweepAxis::variant;
    throw ConfigError("unknown sweep axis '" + s + "' (supported: sparsity, expansion, variant)");
}

inline const std::vector<double>& default_sparsity_grid() {
    static const std::vector<double> g = {0.0012, 0.0024, 0.005, 0.012, 0.024, 0.05, 0.1};
    return g;
}
inline const std::vector<double>& default_expansion_grid() {
    static const std::vector<double> g = {1, 2, 4, 8};
    return g;
}

struct SweepSpec {
    SweepAxis axis = SweepAxis::sparsity;
    std::vector<std::string> values; // textual so the variant axis fits too
    SaeConfig base_sae;
    double expansion = 2.0; // used unless the axis is expansion
    AlignConfig align;
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    std::size_t workers = 1;

    bool numeric() const { return axis != SweepAxis::variant; }

    double numeric_value(std::size_t i) const {
        const auto& s = values.at(i);
        double v = 0.0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
            throw ConfigError("sweep value '" + s + "' is not a number");
        }
        return v;
    }

    void validate() const {
        if (values.empty()) throw ConfigError("sweep needs at least one value");
        if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
        for (std::size_t i = 0; i < values.size(); ++i) {
            for (std::size_t j = 0; j < i; ++j) {
                const bool dup = numeric() ? numeric_value(i) == numeric_value(j) : values[i] == values[j];
                if (dup) throw ConfigError("duplicate sweep value '" + values[i] + "'");
            }
            if (axis == SweepAxis::variant) {
                parse_sae_variant(values[i]);
            } else {
                const double v = numeric_value(i);
                if (axis == SweepAxis::sparsity && !(v > 0.0 && v <= 1.0))
                    throw ConfigError("target_l0 value " + values[i] + " outside (0, 1]");
                if (axis == SweepAxis::expansion && !(v > 0.0)) throw ConfigError("expansion must be positive");
            }
        }
        if (!(expansion > 0.0)) throw ConfigError("expansion must be positive");
    }

    /// SAE configuration for value i and a given seed.
    SaeConfig cell_config(std::size_t i, std::size_t d, std::uint64_t seed) const {
        SaeConfig c = base_sae;
        c.seed = seed;
        double exp = expansion;
        switch (axis) {
        case SweepAxis::sparsity: c.target_l0 = numeric_value(i); break;
        case SweepAxis::expansion: exp = numeric_value(i); break;
        case SweepAxis::variant: c.variant = parse_sae_variant(values[i]); break;
        }
        c.dict_size = dict_size_for(d, exp);
        return c;
    }
};

struct SweepCell {
    std::string value;
    std::uint64_t seed = 0;
    std::optional<AlignmentReport> report;
    std::string error; // non-empty when the cell failed
};

struct TrendStat {
    std::optional<double> spearman; // mean over seeds with a defined value
    std::size_t seeds_used = 0;
};

struct SweepResult {
    SweepAxis axis = SweepAxis::sparsity;
    std::vector<std::string> values;
    std::vector<std::uint64_t> seeds;
    std::vector<SweepCell> cells; // value-major, seeds inner
    std::vector<std::pair<std::string, TrendStat>> trend_stats;
    std::vector<std::string> flags;

    const SweepCell& cell(std::size_t value_idx, std::size_t seed_idx) const {
        return cells.at(value_idx * seeds.size() + seed_idx);
    }
    std::optional<double> trend(const std::string& metric) const {
        for (const auto& [k, v] : trend_stats)
            if (k == metric) return v.spearman;
        return std::nullopt;
    }
};

/// Metrics that get a trend statistic and a radar axis.
inline const std::vector<std::string>& trend_metrics() {
    static const std::vector<std::string> m = {"coverage",   "r2",          "f1",     "rho_geom",
                                               "rho_geom_cbm", "rho_act",   "h_match_normalized",
                                               "mean_delta", "mean_support", "precision", "recall",
                                               "observed_sparsity"};
    return m;
}

// ---------------------------------------------------------------------------
// Rank statistics
// ---------------------------------------------------------------------------

/// Ranks starting at 1, ties get the average of their positions.
inline std::vector<double> average_ranks(std::span<const double> x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

/// Spearman rank correlation; nullopt when fewer than two points or either
/// side is constant.
inline std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DimensionError("spearman inputs differ in length");
    if (x.size() < 2) return std::nullopt;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) return std::nullopt;
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Cells
// ---------------------------------------------------------------------------

/// Trains an SAE with `cfg` and aligns it against `data`.
inline AlignmentReport align_trained_sae(const AlignmentData& data, const SaeConfig& cfg, const AlignConfig& acfg,
                                         nlohmann::ordered_json echo = nlohmann::ordered_json::object()) {
    const auto trained = train(data.activations, cfg);
    const auto codes = encode_all(trained.model, data.activations, cfg);
    echo["sae"] = cfg.to_json();
    echo["sae"]["state"] = "trained";
    return build_report({trained.model.decoder, codes, data.ref_dict, data.ref_codes}, acfg, echo);
}

struct SanityResult {
    AlignmentReport trained;
    AlignmentReport random;
};

/// Same metric configuration for both reports; only the SAE differs. The
/// untrained SAE is the trainer's own starting point (zero epochs).
inline SanityResult run_sanity(const AlignmentData& data, const SaeConfig& cfg, const AlignConfig& acfg) {
    data.validate();
    SanityResult out;
    out.trained = align_trained_sae(data, cfg, acfg);
    const auto init = initialize(data.activations, cfg);
    const auto codes = encode_all(init, data.activations, cfg);
    nlohmann::ordered_json echo;
    echo["sae"] = cfg.to_json();
    echo["sae"]["state"] = "untrained";
    out.random = build_report({init.decoder, codes, data.ref_dict, data.ref_codes}, acfg, echo);
    return out;
}

inline SweepResult run_sweep(const AlignmentData& data, const SweepSpec& spec) {
    spec.validate();
    data.validate();
    SweepResult res;
    res.axis = spec.axis;
    res.values = spec.values;
    res.seeds = spec.seeds;
    const std::size_t nv = spec.values.size(), ns = spec.seeds.size();
    res.cells.resize(nv * ns);

    auto run_cell = [&](std::size_t c) {
        const std::size_t vi = c / ns, si = c % ns;
        auto& cell = res.cells[c];
        cell.value = spec.values[vi];
        cell.seed = spec.seeds[si];
        try {
            const auto cfg = spec.cell_config(vi, data.activations.cols, cell.seed);
            nlohmann::ordered_json echo;
            echo["sweep"] = {{"axis", to_string(spec.axis)}, {"value", cell.value}, {"seed", cell.seed}};
            cell.report = align_trained_sae(data, cfg, spec.align, echo);
        } catch (const std::exception& e) {
            cell.error = e.what();
        }
    };
    const std::size_t total = res.cells.size();
    const std::size_t workers = std::clamp<std::size_t>(spec.workers, 1, total);
    if (workers == 1) {
        for (std::size_t c = 0; c < total; ++c) run_cell(c);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t c = w; c < total; c += workers) run_cell(c);
            });
        }
        for (auto& t : pool) t.join();
    }

    for (const auto& cell : res.cells)
        if (!cell.error.empty()) res.flags.push_back("cell_failed:" + cell.value + ":seed" + std::to_string(cell.seed));

    if (!spec.numeric()) res.flags.emplace_back("trend_undefined_non_numeric_axis");
    else if (nv < 2) res.flags.emplace_back("trend_undefined_single_value");

    for (const auto& metric : trend_metrics()) {
        TrendStat ts;
        if (spec.numeric()) {
            double sum = 0.0;
            for (std::size_t si = 0; si < ns; ++si) {
                std::vector<double> xs, ys;
                for (std::size_t vi = 0; vi < nv; ++vi) {
                    const auto& cell = res.cell(vi, si);
                    if (!cell.report) continue;
                    xs.push_back(spec.numeric_value(vi));
                    ys.push_back(report_value(*cell.report, metric));
                }
                if (auto s = spearman(xs, ys)) sum += *s, ++ts.seeds_used;
            }
            if (ts.seeds_used) ts.spearman = sum / static_cast<double>(ts.seeds_used);
        }
        res.trend_stats.emplace_back(metric, ts);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Output directory
// ---------------------------------------------------------------------------

inline std::string cell_file_name(SweepAxis axis, const std::string& value, std::uint64_t seed) {
    std::string v = value;
    for (auto& ch : v)
        if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-' || ch == '_')) ch = '_';
    return to_string(axis) + "_" + v + "_seed" + std::to_string(seed) + ".json";
}

/// Per-value means over seeds, min-max normalized with bounds taken over
/// every successful cell.
inline nlohmann::ordered_json radar_json(const SweepResult& res) {
    nlohmann::ordered_json j;
    j["axis"] = to_string(res.axis);
    j["values"] = res.values;
    nlohmann::ordered_json metrics = nlohmann::ordered_json::object(), bounds = nlohmann::ordered_json::object();
    for (const auto& metric : trend_metrics()) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const auto& cell : res.cells) {
            if (!cell.report) continue;
            const double v = report_value(*cell.report, metric);
            if (!std::isfinite(v)) continue;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (std::size_t vi = 0; vi < res.values.size(); ++vi) {
            double sum = 0.0;
            std::size_t cnt = 0;
            for (std::size_t si = 0; si < res.seeds.size(); ++si) {
                const auto& cell = res.cell(vi, si);
                if (!cell.report) continue;
                const double v = report_value(*cell.report, metric);
                if (std::isfinite(v)) sum += v, ++cnt;
            }
            if (!cnt) {
                arr.push_back(nullptr);
            } else if (hi > lo) {
                arr.push_back((sum / static_cast<double>(cnt) - lo) / (hi - lo));
            } else {
                arr.push_back(0.0);
            }
        }
        metrics[metric] = std::move(arr);
        if (std::isfinite(lo)) bounds[metric] = {{"min", lo}, {"max", hi}};
        else bounds[metric] = nullptr;
    }
    j["metrics"] = std::move(metrics);
    j["bounds"] = std::move(bounds);
    return j;
}

inline nlohmann::ordered_json sweep_summary_json(const SweepResult& res) {
    nlohmann::ordered_json j;
    j["axis"] = to_string(res.axis);
    j["values"] = res.values;
    j["seeds"] = res.seeds;
    nlohmann::ordered_json trends = nlohmann::ordered_json::object();
    for (const auto& [k, v] : res.trend_stats) {
        if (v.spearman) trends[k] = {{"spearman", *v.spearman}, {"seeds_used", v.seeds_used}};
        else trends[k] = {{"spearman", nullptr}, {"seeds_used", v.seeds_used}};
    }
    j["trend_stats"] = std::move(trends);
    j["flags"] = res.flags;
    return j;
}

/// Writes one report per cell, summary.csv, radar.json and trends.json.
inline void write_sweep(const SweepResult& res, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "cells", ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
    std::string csv = "axis,value,seed,status," + report_csv_header() + "\n";
    const std::size_t ncols = report_csv_columns().size();
    for (const auto& cell : res.cells) {
        csv += to_string(res.axis) + "," + cell.value + "," + std::to_string(cell.seed) + ",";
        if (cell.report) {
            write_report_json(*cell.report, dir / "cells" / cell_file_name(res.axis, cell.value, cell.seed));
            csv += "ok," + report_csv_row(*cell.report) + "\n";
        } else {
            csv += "failed" + std::string(ncols, ',') + "\n";
        }
    }
    detail::write_file(dir / "summary.csv", csv);
    detail::write_file(dir / "radar.json", radar_json(res).dump(2) + "\n");
    detail::write_file(dir / "trends.json", sweep_summary_json(res).dump(2) + "\n");
}

} // namespace conealign
