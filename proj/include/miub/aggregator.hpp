// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * @file aggregator.hpp
 * @brief The operational metric M = (1/N) sum_samples sum_modules JS(P || Q).
 *
 * P and Q are the softmaxed base and adapted hidden states at one LoRA site.
 * Per-module values within a sample are summed, not averaged. The joint-based
 * MI and ln(2)*JS(P_OL || P_O P_L) estimates are separate report columns.
 *
 * Reductions run in sorted (sample_id, module_id) order, so reports do not
 * depend on the order captures arrive in.
 */

#include <algorithm>
#include <cmath>
#include <iterator>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "miub/capture.hpp"
#include "miub/error.hpp"
#include "miub/info_kernels.hpp"
#include "miub/io.hpp"
#include "miub/joint_estimator.hpp"

namespace miub {

struct AggregateOptions {
    double temperature = 1.0;
    QuantizationSpec quantization{};
    bool strict = true; // ragged module coverage: reject (strict) or intersect (lenient)
};

struct ModuleSummary {
    std::uint32_t layer = 0;
    Site site = Site::AttnQ;
    double mean_js = 0.0; // nats, averaged over samples
    std::size_t n_samples = 0;
};

struct MetricReport {
    std::map<std::string, ModuleSummary> per_module;
    std::map<std::uint64_t, double> per_sample_sum;
    double aggregate_m = 0.0;          // nats, raw double sum averaged over samples
    double per_module_mean = 0.0;      // aggregate_m / n_modules
    std::optional<NatValue> mi;        // absent when too few coordinate pairs to quantize
    std::optional<NatValue> miub;
    bool inequality_satisfied = false; // mi <= miub; reported, never assumed
    bool joint_undersampled = false;
    std::optional<double> ce;          // nats per token
    std::optional<double> ppl;
    std::size_t n_samples = 0;
    std::size_t n_modules = 0;
    double temperature = 1.0;
    std::size_t bins = 0;
    std::vector<std::string> dropped_modules; // lenient mode only
    CaptureMeta meta;
};

/// JS between softmax(h_base / T) and softmax(h_adapted / T); in [0, ln 2].
inline NatValue per_module_js(const ModuleCapture& capture, double temperature = 1.0) {
    if (capture.h_base.size() != capture.h_adapted.size()) {
        throw InvalidArgument("per_module_js: h_base and h_adapted differ in dim");
    }
    return js(softmax(capture.h_base, temperature), softmax(capture.h_adapted, temperature));
}

struct TokenMetrics {
    double ce = 0.0;
    double ppl = 1.0;
};

/// Mean per-token cross-entropy against the observed tokens and the matching
/// perplexity, pooled over all samples. Absent when there is no sidecar or it
/// holds no tokens.
inline std::optional<TokenMetrics> token_metrics(const CaptureSet& set) {
    if (!set.token_logprobs) return std::nullopt;
    auto sorted = *set.token_logprobs;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const SampleLogprobs& a, const SampleLogprobs& b) { return a.sample_id < b.sample_id; });
    std::vector<double> all;
    for (const auto& s : sorted) all.insert(all.end(), s.logprobs.begin(), s.logprobs.end());
    if (all.empty()) return std::nullopt;
    const double ce = mean_nll(all);
    return TokenMetrics{ce, std::exp(ce)};
}

/// Computes the full report for a CaptureSet.
inline MetricReport aggregate(const CaptureSet& set, const AggregateOptions& opts = {}) {
    if (set.captures.empty()) throw DataError("aggregate: empty capture set");
    if (auto v = validate(set); !v.empty()) throw DataError("aggregate: invalid capture set: " + v.front().message);

    std::vector<const ModuleCapture*> order;
    order.reserve(set.captures.size());
    for (const auto& c : set.captures) order.push_back(&c);
    std::sort(order.begin(), order.end(), [](const ModuleCapture* a, const ModuleCapture* b) {
        return a->sample_id != b->sample_id ? a->sample_id < b->sample_id : a->module_id < b->module_id;
    });

    std::map<std::uint64_t, std::set<std::string>> coverage;
    std::set<std::string> all_modules;
    for (const auto* c : order) {
        coverage[c->sample_id].insert(c->module_id);
        all_modules.insert(c->module_id);
    }
    std::set<std::string> common = all_modules;
    for (const auto& [sid, mods] : coverage) {
        std::set<std::string> keep;
        std::set_intersection(common.begin(), common.end(), mods.begin(), mods.end(), std::inserter(keep, keep.end()));
        common = std::move(keep);
    }

    MetricReport rep;
    if (common.size() != all_modules.size()) {
        if (opts.strict) {
            std::string msg = "ragged module coverage across samples:";
            for (const auto& [sid, mods] : coverage) {
                std::vector<std::string> missing;
                std::set_difference(all_modules.begin(), all_modules.end(), mods.begin(), mods.end(),
                                    std::back_inserter(missing));
                if (missing.empty()) continue;
                msg += "\n  sample " + std::to_string(sid) + " lacks:";
                for (const auto& m : missing) msg += " " + m;
            }
            throw DataError(msg);
        }
        std::set_difference(all_modules.begin(), all_modules.end(), common.begin(), common.end(),
                            std::back_inserter(rep.dropped_modules));
        if (common.empty()) throw DataError("aggregate: samples share no common module");
    }

    std::vector<float> pooled_base, pooled_adapted;
    for (const auto* c : order) {
        if (!common.count(c->module_id)) continue;
        const double v = per_module_js(*c, opts.temperature).nats;
        rep.per_sample_sum[c->sample_id] += v;
        auto& mod = rep.per_module[c->module_id];
        mod.layer = c->layer_index;
        mod.site = c->site;
        mod.mean_js += v;
        ++mod.n_samples;
        pooled_base.insert(pooled_base.end(), c->h_base.begin(), c->h_base.end());
        pooled_adapted.insert(pooled_adapted.end(), c->h_adapted.begin(), c->h_adapted.end());
    }
    for (auto& [id, mod] : rep.per_module) mod.mean_js /= static_cast<double>(mod.n_samples);

    double total = 0.0;
    for (const auto& [sid, s] : rep.per_sample_sum) total += s;
    rep.n_samples = rep.per_sample_sum.size();
    rep.n_modules = common.size();
    rep.aggregate_m = total / static_cast<double>(rep.n_samples);
    rep.per_module_mean = rep.aggregate_m / static_cast<double>(rep.n_modules);

    if (pooled_base.size() >= opts.quantization.bins) {
        const auto h = quantize_pairs(std::span<const float>(pooled_base), std::span<const float>(pooled_adapted),
                                      opts.quantization);
        rep.mi = mutual_information(h);
        rep.miub = miub(h);
        rep.inequality_satisfied = rep.mi->nats <= rep.miub->nats;
        rep.joint_undersampled = h.undersampled();
    }

    if (auto tm = token_metrics(set)) {
        rep.ce = tm->ce;
        rep.ppl = tm->ppl;
    }
    rep.temperature = opts.temperature;
    rep.bins = opts.quantization.bins;
    rep.meta = set.meta;
    return rep;
}

/// aggregate() with CE and PPL alongside M. A missing sidecar leaves the
/// CE/PPL fields absent rather than failing.
inline MetricReport compare_metrics(const CaptureSet& set, const AggregateOptions& opts = {}) {
    return aggregate(set, opts);
}

// ---------------------------------------------------------------------------
// CSV serialization

inline constexpr const char* kReportCsvHeader =
    "model,N,R,D,share_k,length_bin,aggregate_M_nats,aggregate_M_bits,mi_nats,miub_nats,inequality_ok,"
    "ce_nats,ppl,n_samples,n_modules,temperature,bins";

inline constexpr const char* kModuleCsvHeader = "module_id,layer,site,mean_js_nats,n_samples";

namespace detail {
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    return out + "\"";
}
} // namespace detail

inline std::string report_csv_row(const MetricReport& r) {
    using io::format_double;
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    auto nat = [](const std::optional<NatValue>& v) { return v ? format_double(v->nats) : std::string(); };
    std::string row;
    row += detail::csv_field(r.meta.model_name) + ",";
    row += format_double(r.meta.n_params) + ",";
    row += std::to_string(r.meta.lora_rank) + ",";
    row += format_double(r.meta.dataset_size) + ",";
    row += std::to_string(r.meta.share_k) + ",";
    row += detail::csv_field(r.meta.length_bin) + ",";
    row += format_double(r.aggregate_m) + ",";
    row += format_double(r.aggregate_m / kLn2) + ",";
    row += nat(r.mi) + ",";
    row += nat(r.miub) + ",";
    row += std::string(r.mi ? (r.inequality_satisfied ? "true" : "false") : "") + ",";
    row += opt(r.ce) + ",";
    row += opt(r.ppl) + ",";
    row += std::to_string(r.n_samples) + ",";
    row += std::to_string(r.n_modules) + ",";
    row += format_double(r.temperature) + ",";
    row += std::to_string(r.bins);
    return row;
}

inline std::string report_csv(const std::vector<MetricReport>& reports) {
    std::string out = std::string(kReportCsvHeader) + "\n";
    for (const auto& r : reports) out += report_csv_row(r) + "\n";
    return out;
}

inline std::string module_csv(const MetricReport& r) {
    std::string out = std::string(kModuleCsvHeader) + "\n";
    for (const auto& [id, m] : r.per_module) {
        out += detail::csv_field(id) + "," + std::to_string(m.layer) + "," + std::string(to_string(m.site)) + "," +
               io::format_double(m.mean_js) + "," + std::to_string(m.n_samples) + "\n";
    }
    return out;
}

} // namespace miub
