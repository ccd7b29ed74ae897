#pragma once

// Subcommands of the conealign executable. run_cli is callable in-process
// so tests can drive it without spawning.
//
// Exit codes: 0 success, 1 runtime or data error, 2 usage error,
// 3 cone-check found the vector outside the cone.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "conealign/cbm.hpp"
#include "conealign/cone.hpp"
#include "conealign/error.hpp"
#include "conealign/metrics.hpp"
#include "conealign/report.hpp"
#include "conealign/sae.hpp"
#include "conealign/sweep.hpp"
#include "conealign/synth.hpp"
#include "conealign/tensor_io.hpp"

namespace conealign::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitOutside = 3;

// Thrown from command bodies for problems CLI11 cannot see (conflicting or
// missing input combinations).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

struct Source {
    Matrix m;
    std::string from; // file or checkpoint, for error messages
};

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, ',')) {
        const auto b = cur.find_first_not_of(" \t"), e = cur.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
    }
    return out;
}

inline void require_match(const Source& a, bool a_rows, const Source& b, bool b_rows, const std::string& what) {
    const auto va = a_rows ? a.m.rows : a.m.cols, vb = b_rows ? b.m.rows : b.m.cols;
    if (va == vb) return;
    throw DimensionError(what + " mismatch: '" + a.from + "' (" + shape_str(a.m) + ") vs '" + b.from + "' (" +
                         shape_str(b.m) + ")");
}

struct AlignOptions {
    std::string manifest;
    std::string activations;
    std::string sae_dict, sae_codes, sae_checkpoint;
    std::string cbm_dict, cbm_codes, cbm_checkpoint;
    std::string out;
    std::string format = "json";
    double lasso_lambda = RecoveryConfig{}.lasso_lambda;
    std::size_t topk_k = 5;
    double ridge = RegressionConfig{}.ridge;
    double test_fraction = RegressionConfig{}.test_fraction;
    std::uint64_t split_seed = 0;
    std::size_t workers = 1;
};

struct SaeOptions {
    std::string variant = "topk";
    double expansion = 2.0;
    double target_l0 = SaeConfig{}.target_l0;
    double l1_weight = SaeConfig{}.l1_weight;
    std::size_t epochs = SaeConfig{}.epochs;
    std::size_t batch_size = SaeConfig{}.batch_size;
    double learning_rate = SaeConfig{}.learning_rate;
    std::uint64_t seed = 0;

    SaeConfig to_config(std::size_t d) const {
        SaeConfig c;
        c.variant = parse_sae_variant(variant);
        c.dict_size = dict_size_for(d, expansion);
        c.target_l0 = target_l0;
        c.l1_weight = l1_weight;
        c.epochs = epochs;
        c.batch_size = batch_size;
        c.learning_rate = learning_rate;
        c.seed = seed;
        c.validate();
        return c;
    }
};

inline void add_sae_options(CLI::App* app, SaeOptions& o) {
    app->add_option("--variant", o.variant, "SAE variant: vanilla, topk, batchtopk")->capture_default_str();
    app->add_option("--expansion", o.expansion, "dictionary size / d")->capture_default_str();
    app->add_option("--target-l0", o.target_l0, "target fraction of active units (topk, batchtopk)")
        ->capture_default_str();
    app->add_option("--l1", o.l1_weight, "L1 weight (vanilla)")->capture_default_str();
    app->add_option("--epochs", o.epochs)->capture_default_str();
    app->add_option("--batch-size", o.batch_size)->capture_default_str();
    app->add_option("--lr", o.learning_rate, "SGD learning rate")->capture_default_str();
    app->add_option("--seed", o.seed)->capture_default_str();
}

inline void add_metric_options(CLI::App* app, AlignOptions& o) {
    app->add_option("--lasso-lambda", o.lasso_lambda, "L1 weight of the nonnegative recovery")->capture_default_str();
    app->add_option("--topk-k", o.topk_k, "k for sample-level top-k agreement")->capture_default_str();
    app->add_option("--ridge", o.ridge, "ridge penalty of the predictability fit")->capture_default_str();
    app->add_option("--test-fraction", o.test_fraction, "held-out fraction for R2")->capture_default_str();
    app->add_option("--split-seed", o.split_seed, "seed of the R2 train/test split")->capture_default_str();
    app->add_option("--workers", o.workers, "threads for cone recovery")->capture_default_str();
}

inline AlignConfig align_config(const AlignOptions& o) {
    AlignConfig c;
    c.recovery.lasso_lambda = o.lasso_lambda;
    c.recovery.workers = o.workers;
    c.recovery.validate();
    c.regression.ridge = o.ridge;
    c.regression.test_fraction = o.test_fraction;
    c.regression.seed = o.split_seed;
    c.regression.validate();
    if (o.topk_k == 0) throw ConfigError("--topk-k must be >= 1");
    c.topk_k = o.topk_k;
    return c;
}

inline Source load_source(const std::string& path) { return {load_matrix(path), path}; }

inline Source manifest_source(const Manifest& m, const char* key) {
    const auto* slot = m.matrix_slot(key);
    if (!slot || !*slot) throw ManifestError("manifest has no '" + std::string(key) + "' entry");
    return {**slot, m.path_of(key).string()};
}

inline int cmd_gen_synth(const SynthConfig& cfg, const std::string& out, std::ostream& os) {
    const auto ds = generate(cfg);
    const auto path = write_dataset(ds, cfg, out);
    os << "wrote " << path.string() << " (" << ds.size() << " samples, d=" << cfg.d << ", " << cfg.c_true
       << " atoms)\n";
    return kExitOk;
}

inline int cmd_train_sae(const std::string& manifest, const SaeOptions& o, const std::string& out, std::ostream& os) {
    static constexpr std::string_view req[] = {"activations"};
    const auto m = load_manifest(manifest, req);
    const auto cfg = o.to_config(m.activations->cols);
    const auto res = train(*m.activations, cfg);
    save_sae(res.model, cfg, res.epoch_mse, out);
    os << "trained " << to_string(cfg.variant) << " SAE with " << cfg.dict_size << " atoms";
    if (cfg.variant != SaeVariant::vanilla) os << " (k=" << cfg.k() << ")";
    os << "; relative error " << relative_error(res.model, *m.activations, cfg) << "\nwrote " << out << "\n";
    return kExitOk;
}

inline int cmd_train_cbm(const std::string& manifest, const CbmConfig& cfg, const std::string& out, std::ostream& os) {
    static constexpr std::string_view req[] = {"activations", "concept_labels", "class_labels"};
    const auto m = load_manifest(manifest, req);
    cfg.validate();
    const auto res = train_cbm(*m.activations, *m.concept_labels, *m.class_labels, cfg);
    save_cbm(res.model, cfg, res.epoch_loss, out);
    os << "trained " << to_string(cfg.mode) << " CBM; concept accuracy "
       << concept_accuracy(res.model, *m.activations, *m.concept_labels) << ", class accuracy "
       << class_accuracy(res.model, *m.activations, *m.class_labels) << "\nwrote " << out << "\n";
    return kExitOk;
}

struct ResolvedPair {
    Source sae_dict, sae_codes, ref_dict, ref_codes;
    nlohmann::ordered_json echo = nlohmann::ordered_json::object();
};

// Explicit flags take precedence over manifest entries; checkpoints provide
// the dictionary and compute codes from the activations.
inline ResolvedPair resolve_inputs(const AlignOptions& o) {
    std::optional<Manifest> man;
    if (!o.manifest.empty()) man = load_manifest(o.manifest);
    ResolvedPair r;
    if (man && !man->metadata.empty()) {
        nlohmann::ordered_json meta = nlohmann::ordered_json::object();
        for (const auto& [k, v] : man->metadata) meta[k] = v;
        r.echo["dataset"] = meta;
    }

    auto activations = [&]() -> Source {
        if (!o.activations.empty()) return load_source(o.activations);
        if (man && man->activations) return manifest_source(*man, "activations");
        throw UsageError("checkpoint inputs need activations (--activations or a manifest entry)");
    };

    if (!o.sae_checkpoint.empty()) {
        if (!o.sae_dict.empty() || !o.sae_codes.empty())
            throw UsageError("--sae-checkpoint cannot be combined with --sae-dict/--sae-codes");
        auto [model, cfg] = load_sae(o.sae_checkpoint);
        const auto act = activations();
        if (act.m.cols != model.dim()) {
            throw DimensionError("ambient dimension mismatch: '" + act.from + "' (" + shape_str(act.m) + ") vs '" +
                                 o.sae_checkpoint + "' (input dim " + std::to_string(model.dim()) + ")");
        }
        r.sae_dict = {model.decoder, o.sae_checkpoint + "/decoder.npy"};
        r.sae_codes = {encode_all(model, act.m, cfg), "codes of " + o.sae_checkpoint + " on " + act.from};
        r.echo["sae"] = cfg.to_json();
    } else {
        r.sae_dict = !o.sae_dict.empty() ? load_source(o.sae_dict)
                     : man             ? manifest_source(*man, "sae_dict")
                                       : throw UsageError("no SAE dictionary given");
        r.sae_codes = !o.sae_codes.empty() ? load_source(o.sae_codes)
                      : man              ? manifest_source(*man, "sae_codes")
                                         : throw UsageError("no SAE codes given");
    }

    if (!o.cbm_checkpoint.empty()) {
        if (!o.cbm_dict.empty() || !o.cbm_codes.empty())
            throw UsageError("--cbm-checkpoint cannot be combined with --cbm-dict/--cbm-codes");
        const auto model = load_cbm(o.cbm_checkpoint);
        const auto act = activations();
        if (act.m.cols != model.dim()) {
            throw DimensionError("ambient dimension mismatch: '" + act.from + "' (" + shape_str(act.m) + ") vs '" +
                                 o.cbm_checkpoint + "' (input dim " + std::to_string(model.dim()) + ")");
        }
        r.ref_dict = {model.concept_weights, o.cbm_checkpoint + "/concept_weights.npy"};
        r.ref_codes = {predict_concepts_all(model, act.m), "concepts of " + o.cbm_checkpoint + " on " + act.from};
    } else {
        r.ref_dict = !o.cbm_dict.empty() ? load_source(o.cbm_dict)
                     : man             ? manifest_source(*man, "cbm_dict")
                                       : throw UsageError("no CBM dictionary given");
        r.ref_codes = !o.cbm_codes.empty() ? load_source(o.cbm_codes)
                      : man              ? manifest_source(*man, "cbm_codes")
                                         : throw UsageError("no CBM codes given");
    }

    require_match(r.sae_dict, false, r.ref_dict, false, "ambient dimension");
    require_match(r.sae_codes, false, r.sae_dict, true, "SAE atom count");
    require_match(r.ref_codes, false, r.ref_dict, true, "CBM concept count");
    require_match(r.sae_codes, true, r.ref_codes, true, "sample count");
    return r;
}

inline int cmd_align(const AlignOptions& o, std::ostream& os) {
    if (o.format != "json" && o.format != "csv") throw UsageError("--format must be json or csv");
    if (o.format == "csv" && o.out.empty()) throw UsageError("--format csv needs --out");
    const auto cfg = align_config(o);
    auto in = resolve_inputs(o);
    const auto rep = build_report({in.sae_dict.m, in.sae_codes.m, in.ref_dict.m, in.ref_codes.m}, cfg, in.echo);
    if (o.format == "csv") {
        append_report_csv(rep, o.out);
        os << "appended row to " << o.out << "\n";
    } else if (o.out.empty()) {
        os << report_json_string(rep);
    } else {
        write_report_json(rep, o.out);
        os << "wrote " << o.out << "\n";
    }
    return kExitOk;
}

struct SweepOptions {
    std::string manifest, axis, values, seeds = "0,1,2", out;
    std::size_t workers = 1;
};

inline int cmd_sweep(const SweepOptions& so, const SaeOptions& sae, const AlignOptions& ao, std::ostream& os) {
    SweepSpec spec;
    try {
        spec.axis = parse_sweep_axis(so.axis);
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    spec.values = split_list(so.values);
    if (spec.values.empty()) throw UsageError("--values must list at least one value");
    spec.seeds.clear();
    for (const auto& s : split_list(so.seeds)) {
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size()) throw UsageError("bad seed '" + s + "'");
        spec.seeds.push_back(v);
    }
    if (spec.seeds.empty()) throw UsageError("--seeds must list at least one seed");
    try {
        spec.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }

    static constexpr std::string_view req[] = {"activations", "cbm_dict", "cbm_codes"};
    const auto m = load_manifest(so.manifest, req);
    spec.base_sae = sae.to_config(m.activations->cols);
    spec.expansion = sae.expansion;
    spec.align = align_config(ao);
    spec.workers = so.workers;
    const AlignmentData data{*m.activations, *m.cbm_dict, *m.cbm_codes};
    const auto res = run_sweep(data, spec);
    write_sweep(res, so.out);
    std::size_t failed = 0;
    for (const auto& c : res.cells) failed += !c.error.empty();
    os << "sweep over " << to_string(spec.axis) << ": " << res.cells.size() << " cells (" << failed
       << " failed)\nwrote " << so.out << "\n";
    for (const auto& [k, v] : res.trend_stats) {
        if (v.spearman) os << "  spearman(" << k << ") = " << *v.spearman << "\n";
    }
    return failed ? kExitRuntime : kExitOk;
}

inline int cmd_cone_check(const std::string& dict_path, const std::string& vec_path, double tol, std::ostream& os) {
    const auto dict = load_matrix(dict_path);
    const auto v = load_vector(vec_path);
    if (v.size() != dict.cols) {
        throw DimensionError("dimension mismatch: '" + vec_path + "' has length " + std::to_string(v.size()) +
                             " but '" + dict_path + "' has d=" + std::to_string(dict.cols));
    }
    const auto res = nnls_membership(v, dict, tol);
    os << (res.inside ? "inside" : "outside") << "\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", res.residual_norm);
    os << "residual " << buf << "\n";
    os << "support";
    for (std::size_t j = 0; j < res.alpha.size(); ++j) {
        if (res.alpha[j] > 0.0) {
            std::snprintf(buf, sizeof buf, "%.17g", res.alpha[j]);
            os << " " << j << ":" << buf;
        }
    }
    os << "\n";
    return res.inside ? kExitOk : kExitOutside;
}

inline int cmd_histogram(const AlignOptions& o, const std::string& labels_path, std::ostream& os) {
    auto in = resolve_inputs(o);
    std::optional<LabelVector> labels;
    if (!labels_path.empty()) {
        labels = load_labels(labels_path);
    } else if (!o.manifest.empty()) {
        static constexpr std::string_view req[] = {"class_labels"};
        labels = *load_manifest(o.manifest, req).class_labels;
    } else {
        throw UsageError("histogram needs class labels (--labels or a manifest entry)");
    }
    const auto sim = atom_concept_similarity(in.sae_dict.m, in.ref_dict.m);
    const auto atom_c = atom_concepts(sim);
    const auto per_sample = sample_concepts(in.sae_codes.m, atom_c);
    const auto h = concept_histogram(per_sample, *labels, in.ref_dict.m.rows);
    std::string text = "class";
    for (std::size_t c = 0; c < h.cols; ++c) text += ",concept_" + std::to_string(c);
    text += "\n";
    for (std::size_t y = 0; y < h.rows; ++y) {
        text += std::to_string(y);
        for (std::size_t c = 0; c < h.cols; ++c) text += "," + std::to_string(static_cast<long long>(h(y, c)));
        text += "\n";
    }
    if (o.out.empty()) {
        os << text;
    } else {
        conealign::detail::write_file(o.out, text);
        os << "wrote " << o.out << "\n";
    }
    return kExitOk;
}

} // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Alignment metrics between sparse autoencoder and concept bottleneck dictionaries", "conealign"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    SynthConfig synth;
    std::string synth_out;
    auto* gen = app.add_subcommand("gen-synth", "generate a synthetic dataset with a known dictionary");
    gen->add_option("--n", synth.n_samples, "samples")->capture_default_str();
    gen->add_option("--d", synth.d, "ambient dimension")->capture_default_str();
    gen->add_option("--latent", synth.k_latent, "latent factors")->capture_default_str();
    gen->add_option("--atoms", synth.c_true, "ground-truth atoms")->capture_default_str();
    gen->add_option("--noise", synth.noise_sigma, "Gaussian noise sigma")->capture_default_str();
    gen->add_option("--sparsity", synth.factor_sparsity, "probability a factor is active")->capture_default_str();
    gen->add_option("--classes", synth.n_classes, "number of classes")->capture_default_str();
    gen->add_option("--seed", synth.seed)->capture_default_str();
    gen->add_option("--out", synth_out, "output directory")->required();

    std::string manifest, ckpt_out;
    detail::SaeOptions sae_opts;
    auto* tsae = app.add_subcommand("train-sae", "train a sparse autoencoder on a manifest's activations");
    tsae->add_option("--manifest", manifest)->required();
    tsae->add_option("--out", ckpt_out, "checkpoint directory")->required();
    detail::add_sae_options(tsae, sae_opts);

    CbmConfig cbm_cfg;
    std::string cbm_mode = "joint";
    auto* tcbm = app.add_subcommand("train-cbm", "train a concept bottleneck model");
    tcbm->add_option("--manifest", manifest)->required();
    tcbm->add_option("--out", ckpt_out, "checkpoint directory")->required();
    tcbm->add_option("--mode", cbm_mode, "joint, sequential or independent")->capture_default_str();
    tcbm->add_option("--lambda", cbm_cfg.lambda, "concept loss weight")->capture_default_str();
    tcbm->add_option("--epochs", cbm_cfg.epochs)->capture_default_str();
    tcbm->add_option("--batch-size", cbm_cfg.batch_size)->capture_default_str();
    tcbm->add_option("--lr", cbm_cfg.learning_rate)->capture_default_str();
    tcbm->add_option("--seed", cbm_cfg.seed)->capture_default_str();

    detail::AlignOptions align_opts;
    auto add_inputs = [&](CLI::App* a) {
        a->add_option("--manifest", align_opts.manifest, "dataset manifest");
        a->add_option("--activations", align_opts.activations, "activations for checkpoint inputs");
        a->add_option("--sae-dict", align_opts.sae_dict);
        a->add_option("--sae-codes", align_opts.sae_codes);
        a->add_option("--sae-checkpoint", align_opts.sae_checkpoint);
        a->add_option("--cbm-dict", align_opts.cbm_dict);
        a->add_option("--cbm-codes", align_opts.cbm_codes);
        a->add_option("--cbm-checkpoint", align_opts.cbm_checkpoint);
    };
    auto* align = app.add_subcommand("align", "compute the alignment report for one dictionary pair");
    add_inputs(align);
    align->add_option("--out", align_opts.out, "report path (stdout when omitted)");
    align->add_option("--format", align_opts.format, "json or csv")->capture_default_str();
    detail::add_metric_options(align, align_opts);

    detail::SweepOptions sweep_opts;
    detail::SaeOptions sweep_sae;
    detail::AlignOptions sweep_align;
    auto* sweep = app.add_subcommand("sweep", "train and align SAEs over a hyperparameter grid");
    sweep->add_option("--manifest", sweep_opts.manifest)->required();
    sweep->add_option("--axis", sweep_opts.axis, "sparsity, expansion or variant")->required();
    sweep->add_option("--values", sweep_opts.values, "comma-separated axis values")->required();
    sweep->add_option("--seeds", sweep_opts.seeds, "comma-separated seeds")->capture_default_str();
    sweep->add_option("--out", sweep_opts.out, "output directory")->required();
    sweep->add_option("--cell-workers", sweep_opts.workers, "cells trained in parallel")->capture_default_str();
    detail::add_sae_options(sweep, sweep_sae);
    detail::add_metric_options(sweep, sweep_align);

    std::string dict_path, vec_path;
    double tol = 1e-6;
    auto* cone = app.add_subcommand("cone-check", "test whether a vector lies in the cone of a dictionary");
    cone->add_option("--dict", dict_path)->required();
    cone->add_option("--vector", vec_path)->required();
    cone->add_option("--tol", tol, "relative residual tolerance")->capture_default_str();

    std::string labels_path;
    auto* hist = app.add_subcommand("histogram", "per-class counts of the concept assigned to each sample");
    add_inputs(hist);
    hist->add_option("--labels", labels_path, "class labels (defaults to the manifest entry)");
    hist->add_option("--out", align_opts.out, "csv path (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitUsage;
    }

    try {
        if (*gen) return detail::cmd_gen_synth(synth, synth_out, out);
        if (*tsae) {
            try {
                parse_sae_variant(sae_opts.variant);
            } catch (const ConfigError& e) {
                throw UsageError(e.what());
            }
            return detail::cmd_train_sae(manifest, sae_opts, ckpt_out, out);
        }
        if (*tcbm) {
            try {
                cbm_cfg.mode = parse_cbm_mode(cbm_mode);
            } catch (const ConfigError& e) {
                throw UsageError(e.what());
            }
            return detail::cmd_train_cbm(manifest, cbm_cfg, ckpt_out, out);
        }
        if (*align) return detail::cmd_align(align_opts, out);
        if (*sweep) return detail::cmd_sweep(sweep_opts, sweep_sae, sweep_align, out);
        if (*cone) return detail::cmd_cone_check(dict_path, vec_path, tol, out);
        if (*hist) return detail::cmd_histogram(align_opts, labels_path, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const TrainingError& e) {
        err << "training diverged: " << e.what() << " (last finite epoch " << e.last_finite_epoch() << ")\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

} // namespace conealign::cli
