// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * @file cli.hpp
 * @brief The `miub` command line: compute, simulate, fit, plot, selftest.
 *
 * Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
 * failure. Every output file is written via temp-file rename, and commands
 * that produce several files compute everything before writing any of them.
 */

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "miub/aggregator.hpp"
#include "miub/capture.hpp"
#include "miub/error.hpp"
#include "miub/info_kernels.hpp"
#include "miub/io.hpp"
#include "miub/joint_estimator.hpp"
#include "miub/scaling_fit.hpp"
#include "miub/svg_plot.hpp"
#include "miub/toy_sim.hpp"

namespace miub::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

/// Kernel entry points used by selftest. Tests swap in perturbed versions to
/// check that selftest notices.
struct KernelTable {
    std::function<NatValue(const ProbVec&, const ProbVec&)> js = [](const ProbVec& p, const ProbVec& q) {
        return miub::js(p, q);
    };
    std::function<NatValue(const ProbVec&, const ProbVec&)> kl = [](const ProbVec& p, const ProbVec& q) {
        return miub::kl(p, q);
    };
    std::function<NatValue(const ProbVec&)> entropy = [](const ProbVec& p) { return miub::entropy(p); };
};

// ---------------------------------------------------------------------------
// compute

struct ComputeOptions {
    std::vector<std::string> captures;
    std::string out;
    double temperature = 1.0;
    std::size_t bins = 32;
    bool lenient = false;
    std::string format = "csv";
};

inline nlohmann::ordered_json report_to_json(const MetricReport& r) {
    nlohmann::ordered_json j;
    j["model"] = r.meta.model_name;
    j["N"] = r.meta.n_params;
    j["R"] = r.meta.lora_rank;
    j["D"] = r.meta.dataset_size;
    j["share_k"] = r.meta.share_k;
    j["length_bin"] = r.meta.length_bin;
    j["aggregate_M_nats"] = r.aggregate_m;
    j["aggregate_M_bits"] = r.aggregate_m / kLn2;
    j["per_module_mean_nats"] = r.per_module_mean;
    j["mi_nats"] = r.mi ? nlohmann::ordered_json(r.mi->nats) : nlohmann::ordered_json(nullptr);
    j["miub_nats"] = r.miub ? nlohmann::ordered_json(r.miub->nats) : nlohmann::ordered_json(nullptr);
    j["inequality_ok"] = r.mi ? nlohmann::ordered_json(r.inequality_satisfied) : nlohmann::ordered_json(nullptr);
    j["joint_undersampled"] = r.joint_undersampled;
    j["ce_nats"] = r.ce ? nlohmann::ordered_json(*r.ce) : nlohmann::ordered_json(nullptr);
    j["ppl"] = r.ppl ? nlohmann::ordered_json(*r.ppl) : nlohmann::ordered_json(nullptr);
    j["n_samples"] = r.n_samples;
    j["n_modules"] = r.n_modules;
    j["temperature"] = r.temperature;
    j["bins"] = r.bins;
    j["dropped_modules"] = r.dropped_modules;
    nlohmann::ordered_json mods = nlohmann::ordered_json::object();
    for (const auto& [id, m] : r.per_module) mods[id] = m.mean_js;
    j["per_module_mean_js_nats"] = mods;
    return j;
}

inline int cmd_compute(const ComputeOptions& o, std::ostream& out, std::ostream& err) {
    AggregateOptions agg;
    agg.temperature = o.temperature;
    agg.quantization.bins = o.bins;
    agg.strict = !o.lenient;
    std::vector<MetricReport> reports;
    for (const auto& dir : o.captures) {
        const auto set = read_capture_set(dir);
        reports.push_back(compare_metrics(set, agg));
        for (const auto& d : reports.back().dropped_modules) err << "warning: " << dir << ": dropped module " << d << "\n";
    }
    const fs::path outdir(o.out);
    std::vector<std::pair<fs::path, std::string>> files;
    if (o.format == "json") {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& r : reports) arr.push_back(report_to_json(r));
        files.emplace_back(outdir / "report.json", arr.dump(2) + "\n");
    } else {
        files.emplace_back(outdir / "report.csv", report_csv(reports));
        for (std::size_t i = 0; i < reports.size(); ++i) {
            const std::string name = reports.size() == 1 ? "modules.csv" : "modules_" + std::to_string(i) + ".csv";
            files.emplace_back(outdir / name, module_csv(reports[i]));
        }
    }
    for (const auto& [path, bytes] : files) io::write_file_atomic(path, bytes);
    for (const auto& r : reports) {
        out << r.meta.model_name << ": aggregate_M = " << io::format_double(r.aggregate_m) << " nats over "
            << r.n_samples << " samples x " << r.n_modules << " modules\n";
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOptions {
    std::string out;
    std::vector<std::uint64_t> seeds{42};
    std::vector<int> ranks{2, 4, 8, 16};
    std::vector<int> shares{4, 2, 1};
    std::vector<std::string> lengths{"short"};
    toy::ToySimConfig base{}; // architecture and training knobs; rank/share/seed/length come from the grid
    double temperature = 1.0;
    std::size_t bins = 32;
};

inline std::vector<toy::ToySimConfig> expand_grid(const SimulateOptions& o) {
    std::vector<toy::ToySimConfig> grid;
    for (auto seed : o.seeds)
        for (const auto& len : o.lengths)
            for (int share : o.shares)
                for (int rank : o.ranks) {
                    auto c = o.base;
                    c.seed = seed;
                    c.length_bin = toy::length_bin_from_string(len);
                    c.share_k = share;
                    c.rank = rank;
                    c.validate();
                    grid.push_back(c);
                }
    return grid;
}

inline std::string cell_dir_name(const toy::ToySimConfig& c) {
    return "s" + std::to_string(c.seed) + "_" + toy::to_string(c.length_bin) + "_k" + std::to_string(c.share_k) + "_r" +
           std::to_string(c.rank);
}

inline nlohmann::ordered_json config_to_json(const toy::ToySimConfig& c) {
    return {{"layers", c.layers},
            {"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"d_ffn", c.d_ffn},
            {"vocab", c.vocab},
            {"steps", c.steps},
            {"lr", c.lr},
            {"batch_size", c.batch_size},
            {"train_samples", c.train_samples},
            {"capture_samples", c.capture_samples},
            {"pretrain_steps", c.pretrain_steps},
            {"pretrain_lr", c.pretrain_lr},
            {"pretrain_batch_size", c.pretrain_batch_size},
            {"pooling", toy::to_string(c.pooling)},
            {"optimizer", "sgd"}};
}

inline int cmd_simulate(const SimulateOptions& o, std::ostream& out, std::ostream& err) {
    const auto grid = expand_grid(o);
    AggregateOptions agg;
    agg.temperature = o.temperature;
    agg.quantization.bins = o.bins;
    const auto cells = toy::run_scaling_grid(grid, agg);

    const fs::path outdir(o.out);
    std::vector<MetricReport> reports;
    std::vector<ScalingObservation> obs;
    nlohmann::ordered_json cell_log = nlohmann::ordered_json::array();
    bool any_failed = false;
    for (const auto& cell : cells) {
        nlohmann::ordered_json j{{"dir", cell_dir_name(cell.config)},
                                 {"seed", cell.config.seed},
                                 {"length_bin", toy::to_string(cell.config.length_bin)},
                                 {"share_k", cell.config.share_k},
                                 {"rank", cell.config.rank},
                                 {"ok", cell.ok}};
        if (cell.ok) {
            write_capture_set(cell.captures, outdir / "cells" / cell_dir_name(cell.config));
            reports.push_back(cell.report);
            obs.push_back(cell.observation);
            j["n_params"] = cell.observation.n_params;
            j["aggregate_M_nats"] = cell.report.aggregate_m;
            j["initial_loss"] = cell.train.initial_loss;
            j["final_loss"] = cell.train.final_loss;
        } else {
            any_failed = true;
            j["error"] = cell.error;
            err << "cell " << cell_dir_name(cell.config) << " failed: " << cell.error << "\n";
        }
        cell_log.push_back(j);
    }
    nlohmann::ordered_json manifest;
    manifest["tool"] = "miub";
    manifest["version"] = kVersion;
    manifest["eigen_version"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                std::to_string(EIGEN_MINOR_VERSION);
    manifest["seeds"] = o.seeds;
    manifest["grid"] = {{"rank", o.ranks}, {"share_k", o.shares}, {"length_bin", o.lengths}};
    manifest["config"] = config_to_json(o.base);
    manifest["temperature"] = o.temperature;
    manifest["bins"] = o.bins;
    manifest["cells"] = cell_log;

    if (!obs.empty()) {
        io::write_file_atomic(outdir / "scaling.csv", scaling_csv(obs));
        io::write_file_atomic(outdir / "report.csv", report_csv(reports));
    }
    io::write_file_atomic(outdir / "run_manifest.json", manifest.dump(2) + "\n");
    out << obs.size() << " of " << cells.size() << " cells completed\n";
    if (obs.empty()) return kNumeric;
    return any_failed ? kNumeric : kOk;
}

// ---------------------------------------------------------------------------
// fit

struct FitOptions {
    std::string input;
    std::string out;
};

inline int cmd_fit(const FitOptions& o, std::ostream& out, std::ostream& err) {
    const auto obs = parse_scaling_csv(io::read_file(o.input));
    ScalingFitConfig cfg;
    ScalingFitResult fit;
    try {
        fit = fit_scaling_law(obs, cfg);
    } catch (const InvalidArgument& e) {
        throw DataError(e.what());
    }
    for (const auto& w : fit.warnings) err << "warning: " << w << "\n";
    const auto j = fit_to_json(fit, cfg);
    if (o.out.empty()) {
        out << j.dump(2) << "\n";
    } else {
        io::write_file_atomic(o.out, j.dump(2) + "\n");
    }
    if (!fit.converged) {
        err << "error: fit did not converge\n";
        return kNumeric;
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// plot

namespace detail {

// Minimal RFC 4180 reader for the report CSVs this tool writes.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        if (quoted) {
            if (ch == '"' && i + 1 < text.size() && text[i + 1] == '"') {
                field += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                field += ch;
            }
            continue;
        }
        if (ch == '"') {
            quoted = true;
            any = true;
        } else if (ch == ',') {
            row.push_back(field);
            field.clear();
            any = true;
        } else if (ch == '\n') {
            row.push_back(field);
            rows.push_back(row);
            row.clear();
            field.clear();
            any = false;
        } else if (ch != '\r') {
            field += ch;
            any = true;
        }
    }
    if (quoted) throw DataError("report CSV: unterminated quoted field");
    if (any) {
        row.push_back(field);
        rows.push_back(row);
    }
    return rows;
}

struct AxisPoint {
    double sum_m = 0.0, sum_ppl = 0.0;
    int n = 0, n_ppl = 0;
};

} // namespace detail

struct PlotOptions {
    std::string report;
    std::string out;
};

/// Renders the line plots for a report CSV: one SVG per axis that takes more
/// than one value (all three when none does). Returns file name -> bytes.
inline std::map<std::string, std::string> render_plots(const std::string& csv_text) {
    const auto rows = detail::parse_csv(csv_text);
    if (rows.empty()) throw DataError("report CSV is empty");
    const auto& header = rows[0];
    auto col = [&](const std::string& name) {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw DataError("report CSV lacks column '" + name + "'");
    };
    const std::size_t c_m = col("aggregate_M_nats"), c_r = col("R"), c_n = col("N"), c_len = col("length_bin"),
                      c_ppl = col("ppl");
    if (rows.size() < 2) throw DataError("report CSV has no data rows");

    struct Axis {
        std::string key, file, label, title;
        std::size_t column;
        bool categorical;
    };
    const std::vector<Axis> axes{
        {"rank", "miub_vs_rank.svg", "LoRA rank R", "aggregate M vs rank", c_r, false},
        {"n", "miub_vs_params.svg", "effective parameters N", "aggregate M vs model size", c_n, false},
        {"length", "miub_vs_length.svg", "length bin", "aggregate M vs data length", c_len, true}};
    auto length_order = [](const std::string& s) {
        if (s == "short") return 0;
        if (s == "medium") return 1;
        if (s == "long") return 2;
        return 3;
    };

    std::map<std::string, std::string> files;
    std::vector<std::pair<const Axis*, std::vector<std::pair<std::string, detail::AxisPoint>>>> plans;
    for (const auto& ax : axes) {
        std::map<std::pair<double, std::string>, detail::AxisPoint> pts;
        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto& row = rows[r];
            if (row.size() != header.size()) {
                throw DataError("report CSV line " + std::to_string(r + 1) + ": expected " +
                                std::to_string(header.size()) + " fields");
            }
            const std::string& raw = row[ax.column];
            const double key = ax.categorical ? length_order(raw) : io::parse_double(raw, header[ax.column]);
            auto& p = pts[{key, raw}];
            p.sum_m += io::parse_double(row[c_m], "aggregate_M_nats");
            ++p.n;
            if (!row[c_ppl].empty()) {
                p.sum_ppl += io::parse_double(row[c_ppl], "ppl");
                ++p.n_ppl;
            }
        }
        std::vector<std::pair<std::string, detail::AxisPoint>> ordered;
        for (const auto& [k, p] : pts) ordered.emplace_back(k.second, p);
        plans.emplace_back(&ax, std::move(ordered));
    }
    const bool any_varies =
        std::any_of(plans.begin(), plans.end(), [](const auto& pl) { return pl.second.size() > 1; });
    for (const auto& [ax, pts] : plans) {
        if (any_varies && pts.size() < 2) continue;
        svg::LinePlot plot;
        plot.title = ax->title;
        plot.x_label = ax->label;
        plot.left = {"aggregate M (nats)", {}, "#1f77b4"};
        bool have_ppl = true;
        for (const auto& [label, p] : pts) {
            plot.x_ticks.push_back(label);
            plot.left.y.push_back(p.sum_m / p.n);
            have_ppl = have_ppl && p.n_ppl == p.n;
        }
        if (have_ppl) {
            svg::Series ppl{"PPL", {}, "#d62728"};
            for (const auto& [label, p] : pts) ppl.y.push_back(p.sum_ppl / p.n_ppl);
            plot.right = ppl;
        }
        files[ax->file] = svg::render(plot);
    }
    return files;
}

inline int cmd_plot(const PlotOptions& o, std::ostream& out, std::ostream&) {
    const auto files = render_plots(io::read_file(o.report));
    for (const auto& [name, bytes] : files) {
        io::write_file_atomic(fs::path(o.out) / name, bytes);
        out << "wrote " << (fs::path(o.out) / name).string() << "\n";
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// selftest

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

/// Runs the kernel, estimator, fit and format checks. Reference values were
/// computed independently in 30-digit arithmetic.
inline std::vector<CheckResult> run_selftest(const KernelTable& k = {}) {
    std::vector<CheckResult> out;
    auto check = [&](const std::string& name, auto&& fn) {
        CheckResult r{name, false, ""};
        try {
            r.detail = fn();
            r.pass = r.detail.empty();
        } catch (const std::exception& e) {
            r.detail = std::string("threw: ") + e.what();
        }
        out.push_back(r);
    };
    auto rel = [](double got, double want, double tol) -> std::string {
        const double e = want == 0.0 ? std::abs(got) : std::abs(got - want) / std::abs(want);
        if (e <= tol) return "";
        return "got " + io::format_double(got) + ", want " + io::format_double(want);
    };

    check("softmax (1,2)", [&] {
        const auto p = softmax(std::vector<double>{1.0, 2.0});
        return rel(p[0], 0.268941421369995120748840758, 1e-10) + rel(p[1], 0.731058578630004879251159242, 1e-10);
    });
    check("entropy (0.25,0.75)", [&] { return rel(k.entropy(ProbVec({0.25, 0.75})).nats, 0.562335144618808350288, 1e-10); });
    check("kl (0.5,0.5)||(0.25,0.75)", [&] {
        return rel(k.kl(ProbVec({0.5, 0.5}), ProbVec({0.25, 0.75})).nats, 0.143841036225890463720, 1e-10);
    });
    check("kl support violation flagged", [&] {
        return k.kl(ProbVec({0.5, 0.5}), ProbVec({1.0, 0.0})).infinite ? std::string() : std::string("not flagged infinite");
    });
    check("js (0.5,0.5)||(0.25,0.75)", [&] {
        return rel(k.js(ProbVec({0.5, 0.5}), ProbVec({0.25, 0.75})).nats, 0.0338220755686052300004, 1e-10);
    });
    check("cross entropy one-hot", [&] {
        return rel(cross_entropy(ProbVec({1, 0, 0}), ProbVec({0.7, 0.2, 0.1})).nats, 0.356674943938732378913, 1e-10) +
               rel(cross_entropy(ProbVec({0, 1, 0}), ProbVec({0.7, 0.3, 0.0})).nats, 1.20397280432593599262, 1e-10);
    });
    check("perplexity (ln 0.5, ln 0.125)", [&] {
        const std::vector<double> lp{std::log(0.5), std::log(0.125)};
        return rel(perplexity(lp), 4.0, 1e-10) + rel(mean_nll(lp), 1.38629436111989061883, 1e-10);
    });
    check("js symmetry", [&] {
        std::mt19937_64 gen(12345);
        for (int i = 0; i < 2000; ++i) {
            const std::size_t dim = 2 + gen() % 31;
            std::vector<double> p(dim), q(dim);
            double sp = 0, sq = 0;
            for (std::size_t d = 0; d < dim; ++d) {
                p[d] = -std::log(1.0 - static_cast<double>(gen() >> 11) * 0x1.0p-53);
                q[d] = -std::log(1.0 - static_cast<double>(gen() >> 11) * 0x1.0p-53);
                sp += p[d];
                sq += q[d];
            }
            for (auto& v : p) v /= sp;
            for (auto& v : q) v /= sq;
            const ProbVec pp(p), qq(q);
            const double a = k.js(pp, qq).nats, b = k.js(qq, pp).nats;
            if (a != b) return "js(p,q) != js(q,p) on pair " + std::to_string(i);
            if (!(a >= 0.0 && a <= kLn2)) return "js outside [0, ln 2] on pair " + std::to_string(i);
        }
        return std::string();
    });
    check("js identical and disjoint", [&] {
        const double same = k.js(ProbVec({0.3, 0.7}), ProbVec({0.3, 0.7})).nats;
        const double dis = k.js(ProbVec({1.0, 0.0}), ProbVec({0.0, 1.0})).nats;
        return (same == 0.0 ? std::string() : "js(p,p) != 0; ") + rel(dis, kLn2, 1e-12);
    });
    check("quantize (1,2,1,2) x (5,5,6,6)", [&] {
        const auto h = quantize_pairs(std::vector<double>{1, 2, 1, 2}, std::vector<double>{5, 5, 6, 6}, {2});
        for (double v : h.joint())
            if (v != 0.25) return std::string("joint cell != 0.25");
        return std::string();
    });
    check("mi/miub diagonal joint", [&] {
        const auto h = JointHistogram::from_joint(2, {0.5, 0.0, 0.0, 0.5});
        return rel(mutual_information(h).nats, kLn2, 1e-10) + rel(miub(h).nats, 0.149554513063195397179, 1e-10);
    });
    check("mi/miub [[0.4,0.1],[0.1,0.4]]", [&] {
        const auto h = JointHistogram::from_joint(2, {0.4, 0.1, 0.1, 0.4});
        return rel(mutual_information(h).nats, 0.192744757021757429884, 1e-10) +
               rel(miub(h).nats, 0.0351230409403381365941, 1e-10);
    });
    check("mi/miub independence", [&] {
        const auto h = JointHistogram::from_joint(2, {0.125, 0.125, 0.375, 0.375});
        return (mutual_information(h).nats == 0.0 && miub(h).nats == 0.0) ? std::string() : std::string("not exactly 0");
    });
    check("scaling predict example", [&] {
        ScalingFitResult f;
        f.A = 2;
        f.alpha = 0.5;
        f.n0 = 100;
        f.B = 1;
        f.beta = 1;
        f.r0 = 8;
        return rel(predict(f, 400, 8, 1), 2.0, 1e-12);
    });
    check("scaling synthetic recovery", [&] {
        ScalingFitResult t;
        t.A = 2, t.alpha = 0.5, t.B = 1, t.beta = 0.3, t.C = 0.5, t.gamma = 0.7, t.n0 = 1e5, t.r0 = 2, t.d0 = 16;
        std::vector<ScalingObservation> obs;
        for (double n : {1e5, 2e5, 4e5, 8e5})
            for (double r : {2.0, 4.0, 8.0, 16.0})
                for (double d : {16.0, 32.0, 64.0, 128.0}) obs.push_back({n, r, d, predict(t, n, r, d)});
        const auto f = fit_scaling_law(obs);
        std::string msg;
        if (!(f.rmse < 1e-8)) msg += "rmse " + io::format_double(f.rmse) + "; ";
        const double got[] = {f.A, f.alpha, f.B, f.beta, f.C, f.gamma};
        const double want[] = {2, 0.5, 1, 0.3, 0.5, 0.7};
        for (int i = 0; i < 6; ++i)
            if (std::abs(got[i] - want[i]) > 1e-3) msg += "parameter " + std::to_string(i) + " off; ";
        return msg;
    });
    check("capture format round trip", [&] {
        CaptureSet set;
        set.meta.model_name = "selftest";
        set.meta.n_params = 1;
        set.meta.lora_rank = 1;
        set.meta.dataset_size = 1;
        for (std::uint64_t s = 0; s < 2; ++s) {
            ModuleCapture c;
            c.sample_id = s;
            c.module_id = "layer00.attn_q";
            c.h_base = {0.0f, 1.0f, -2.5f};
            c.h_adapted = {0.5f, 1.0f, -2.0f};
            set.captures.push_back(c);
        }
        const fs::path dir = fs::temp_directory_path() / ("miub_selftest_" + std::to_string(std::random_device{}()));
        write_capture_set(set, dir);
        const auto back = read_capture_set(dir);
        const std::string manifest = io::read_file(dir / kManifestFile);
        const std::string blob = io::read_file(dir / kBlobFile);
        fs::remove_all(dir);
        if (!(back == set)) return std::string("round trip changed the set");
        if (blob.size() != 8 + 2 * 2 * 3 * 4) return std::string("unexpected blob size");
        for (std::size_t n = 0; n < blob.size(); ++n) {
            try {
                parse_capture_set(manifest, std::string_view(blob).substr(0, n));
                return "blob truncated to " + std::to_string(n) + " bytes was accepted";
            } catch (const CaptureFormatError&) {
            }
        }
        for (std::size_t n = 0; n < manifest.size(); ++n) {
            try {
                parse_capture_set(std::string_view(manifest).substr(0, n), blob);
                return "manifest truncated to " + std::to_string(n) + " bytes was accepted";
            } catch (const CaptureFormatError&) {
            }
        }
        return std::string();
    });
    check("zero delta aggregates to 0", [&] {
        CaptureSet set;
        set.meta.n_params = 1;
        set.meta.lora_rank = 1;
        ModuleCapture c;
        c.module_id = "layer00.attn_q";
        c.h_base = c.h_adapted = {0.1f, -0.2f, 0.3f};
        set.captures.push_back(c);
        return aggregate(set).aggregate_m == 0.0 ? std::string() : std::string("nonzero");
    });
    return out;
}

inline int cmd_selftest(std::ostream& out, std::ostream&, const KernelTable& k = {}) {
    const auto results = run_selftest(k);
    int failed = 0;
    for (const auto& r : results) {
        out << (r.pass ? "PASS " : "FAIL ") << r.name;
        if (!r.pass) out << ": " << r.detail;
        out << "\n";
        failed += r.pass ? 0 : 1;
    }
    out << (results.size() - static_cast<std::size_t>(failed)) << "/" << results.size() << " checks passed\n";
    return failed == 0 ? kOk : kData;
}

// ---------------------------------------------------------------------------
// Entry point

/// Applies a flat `key=value` file to `app`'s options. Keys are long option
/// names without the dashes, with `_` accepted for `-`. Options already given
/// on the command line keep their values.
inline void apply_config_file(CLI::App& app, const std::string& path) {
    std::istringstream in(io::read_file(path));
    std::string line;
    for (int lineno = 1; std::getline(in, line); ++lineno) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw CLI::ConversionError(path + ":" + std::to_string(lineno) + ": expected key=value");
        }
        auto trim = [](std::string v) {
            const auto b = v.find_first_not_of(" \t\r");
            const auto e = v.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        std::replace(key.begin(), key.end(), '_', '-');
        CLI::Option* opt = key == "config" ? nullptr : app.get_option_no_throw("--" + key);
        if (opt == nullptr) {
            throw CLI::ConversionError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
        if (opt->count() > 0) continue;
        opt->add_result(value);
        opt->run_callback();
    }
}

/// Parses argv and dispatches. Never throws; maps failures to exit codes.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const KernelTable& kernels = {}) {
    CLI::App app{"MIUB metric toolkit: compute, simulate, fit, plot, selftest", "miub"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    ComputeOptions co;
    auto* compute = app.add_subcommand("compute", "Compute metrics from capture directories");
    compute->add_option("--captures", co.captures, "Capture directory (repeatable)")->required();
    compute->add_option("--out", co.out, "Output directory")->required();
    compute->add_option("--temperature", co.temperature, "Softmax temperature")->check(CLI::PositiveNumber);
    compute->add_option("--bins", co.bins, "Histogram bins per variable")->check(CLI::Range(2, 4096));
    auto* strict_flag = compute->add_flag("--strict", "Reject ragged module coverage (default)");
    auto* lenient_flag = compute->add_flag("--lenient", co.lenient, "Intersect modules across samples");
    strict_flag->excludes(lenient_flag);
    compute->add_option("--format", co.format, "Report format")->check(CLI::IsMember({"csv", "json"}));

    SimulateOptions so;
    std::vector<std::uint64_t> seeds;
    std::string pooling = "last_token";
    auto* simulate = app.add_subcommand("simulate", "Run the toy transformer grid and write captures");
    std::string sim_config;
    simulate->add_option("--config", sim_config, "Flat key=value file; command line flags take precedence");
    simulate->add_option("--out", so.out, "Output directory")->required();
    simulate->add_option("--seed", seeds, "Seed (repeatable)");
    simulate->add_option("--grid-rank", so.ranks, "LoRA ranks")->delimiter(',')->check(CLI::PositiveNumber);
    simulate->add_option("--grid-share", so.shares, "Layer-sharing factors")->delimiter(',');
    simulate->add_option("--grid-length", so.lengths, "Length bins")
        ->delimiter(',')
        ->check(CLI::IsMember({"short", "medium", "long"}));
    simulate->add_option("--steps", so.base.steps, "LoRA training steps")->check(CLI::NonNegativeNumber);
    simulate->add_option("--lr", so.base.lr, "LoRA learning rate")->check(CLI::PositiveNumber);
    simulate->add_option("--layers", so.base.layers, "Transformer layers (even)");
    simulate->add_option("--d-model", so.base.d_model, "Hidden width");
    simulate->add_option("--heads", so.base.n_heads, "Attention heads");
    simulate->add_option("--d-ffn", so.base.d_ffn, "Feed-forward width");
    simulate->add_option("--vocab", so.base.vocab, "Vocabulary size (even)");
    simulate->add_option("--batch-size", so.base.batch_size, "LoRA training batch size");
    simulate->add_option("--train-samples", so.base.train_samples, "Training sequences per cell");
    simulate->add_option("--capture-samples", so.base.capture_samples, "Captured sequences per cell");
    simulate->add_option("--pretrain-steps", so.base.pretrain_steps, "Base pretraining steps");
    simulate->add_option("--pretrain-lr", so.base.pretrain_lr, "Base pretraining learning rate");
    simulate->add_option("--pretrain-batch-size", so.base.pretrain_batch_size, "Base pretraining batch size");
    simulate->add_option("--pooling", pooling, "Hidden-state pooling")->check(CLI::IsMember({"last_token", "mean"}));
    simulate->add_option("--temperature", so.temperature, "Softmax temperature")->check(CLI::PositiveNumber);
    simulate->add_option("--bins", so.bins, "Histogram bins per variable")->check(CLI::Range(2, 4096));

    FitOptions fo;
    auto* fit = app.add_subcommand("fit", "Fit the three-term scaling law to a scaling CSV");
    fit->add_option("--input", fo.input, "Scaling CSV (n_params,rank,data_size,miub)")->required();
    fit->add_option("--out", fo.out, "Output JSON path (stdout when omitted)");

    PlotOptions po;
    auto* plot = app.add_subcommand("plot", "Render SVG plots from a report CSV");
    plot->add_option("--report", po.report, "Report CSV from compute or simulate")->required();
    plot->add_option("--out", po.out, "Output directory")->required();

    auto* selftest = app.add_subcommand("selftest", "Run built-in numeric checks");

    try {
        app.parse(argc, argv);
        if (!sim_config.empty()) apply_config_file(*simulate, sim_config);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    }

    try {
        if (compute->parsed()) return cmd_compute(co, out, err);
        if (simulate->parsed()) {
            if (!seeds.empty()) so.seeds = seeds;
            so.base.pooling = pooling == "mean" ? toy::Pooling::Mean : toy::Pooling::LastToken;
            try {
                expand_grid(so);
            } catch (const InvalidArgument& e) {
                err << "error: " << e.what() << "\n";
                return kUsage;
            }
            return cmd_simulate(so, out, err);
        }
        if (fit->parsed()) return cmd_fit(fo, out, err);
        if (plot->parsed()) return cmd_plot(po, out, err);
        if (selftest->parsed()) return cmd_selftest(out, err, kernels);
    } catch (const NumericError& e) {
        err << "error: " << e.what() << "\n";
        return kNumeric;
    } catch (const InvalidArgument& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kData;
    }
    return kUsage;
}

} // namespace miub::cli
