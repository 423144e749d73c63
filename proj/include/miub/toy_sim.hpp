// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Synthetic task, LoRA-only training loop, hidden-state capture and the
// build -> share -> train -> capture -> aggregate grid.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "miub/aggregator.hpp"
#include "miub/capture.hpp"
#include "miub/error.hpp"
#include "miub/scaling_fit.hpp"
#include "miub/toy_model.hpp"

namespace miub::toy {

// ---------------------------------------------------------------------------
// Keyed associative recall

struct TaskSample {
    std::vector<int> tokens; // full sequence; tokens.back() is the label
    int label() const { return tokens.back(); }
    std::span<const int> input() const { return std::span<const int>(tokens).first(tokens.size() - 1); }
    /// Every value token is a prediction target: each key position predicts
    /// its value, and the query position predicts the label. Values of keys
    /// not seen earlier are unpredictable and only teach the value prior.
    std::vector<Target> targets() const {
        std::vector<Target> out;
        for (std::size_t t = 0; t + 1 < tokens.size(); t += 2) out.push_back({static_cast<int>(t), tokens[t + 1]});
        return out;
    }
};

/**
 * Sequences of the bin's length laid out as
 *
 *   k1 v1 k2 v2 ... kP vP  q  v(q)
 *
 * Keys come from the lower half of the vocabulary and values from the upper
 * half. Each sequence draws its own key->value table, so the answer is only
 * recoverable from context. Labels cycle through the value tokens, which keeps
 * them balanced.
 */
inline std::vector<TaskSample> generate_synthetic_task(std::uint64_t seed, LengthBin bin, int n_samples,
                                                       int vocab = 64) {
    if (n_samples < 1) throw InvalidArgument("generate_synthetic_task: n_samples must be >= 1");
    if (vocab < 4 || vocab % 2 != 0) throw InvalidArgument("generate_synthetic_task: vocab must be even and >= 4");
    const int len = sequence_length(bin);
    const int n_pairs = (len - 2) / 2;
    const int n_keys = vocab / 2;
    Rng rng(seed);
    std::vector<TaskSample> out;
    out.reserve(static_cast<std::size_t>(n_samples));
    for (int s = 0; s < n_samples; ++s) {
        const int label = n_keys + s % n_keys;
        std::vector<int> table(static_cast<std::size_t>(n_keys));
        for (auto& v : table) v = n_keys + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_keys)));
        std::vector<int> keys(static_cast<std::size_t>(n_pairs));
        for (auto& k : keys) k = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_keys)));
        const int query = keys[rng.below(static_cast<std::uint64_t>(n_pairs))];
        table[static_cast<std::size_t>(query)] = label;

        TaskSample ts;
        ts.tokens.reserve(static_cast<std::size_t>(len));
        for (int k : keys) {
            ts.tokens.push_back(k);
            ts.tokens.push_back(table[static_cast<std::size_t>(k)]);
        }
        ts.tokens.push_back(query);
        ts.tokens.push_back(label);
        out.push_back(std::move(ts));
    }
    return out;
}

// Training and capture sets come from disjoint streams of the config seed.
inline std::vector<TaskSample> training_set(const ToySimConfig& c) {
    return generate_synthetic_task(c.seed ^ kTrainStream, c.length_bin, c.train_samples, c.vocab);
}

inline std::vector<TaskSample> capture_set_samples(const ToySimConfig& c) {
    return generate_synthetic_task(c.seed ^ kProbeStream, c.length_bin, c.capture_samples, c.vocab);
}

/// Fresh samples for every pretraining step, so pretraining cannot memorize.
/// Lengths cycle short, medium, long so every position embedding is seen.
inline std::vector<TaskSample> pretraining_set(const ToySimConfig& c) {
    const int n = c.pretrain_steps * c.pretrain_batch_size;
    const LengthBin bins[] = {LengthBin::Short, LengthBin::Medium, LengthBin::Long};
    std::vector<std::vector<TaskSample>> per_bin;
    for (std::uint64_t b = 0; b < 3; ++b) {
        per_bin.push_back(generate_synthetic_task(c.seed ^ kPretrainStream ^ (b << 56), bins[b], n / 3 + 1, c.vocab));
    }
    std::vector<TaskSample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(std::move(per_bin[static_cast<std::size_t>(i % 3)][static_cast<std::size_t>(i / 3)]));
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainStats {
    std::vector<double> step_losses; // mean batch loss per step, nats
    double initial_loss = 0.0;       // mean loss over the training set before step 0
    double final_loss = 0.0;         // same, after the last step
    std::size_t effective_n_params = 0;
    std::size_t lora_param_count = 0;
};

inline double mean_loss(const ToyModel& m, const std::vector<TaskSample>& data) {
    double sum = 0.0;
    for (const auto& s : data) sum += loss_and_grad(forward(m, s.input()), s.targets(), nullptr);
    return sum / static_cast<double>(data.size());
}

/// Mean loss and LoRA gradient over one batch.
inline double batch_loss_and_grads(const ToyModel& m, std::span<const TaskSample> batch,
                                   std::vector<LayerLora>& grads) {
    grads = zero_lora_grads(m);
    double loss = 0.0;
    Mat dlogits;
    for (const auto& s : batch) {
        const auto fc = forward(m, s.input());
        loss += loss_and_grad(fc, s.targets(), &dlogits);
        backward(m, fc, dlogits, grads);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (auto& ll : grads)
        for (auto& p : ll.site) {
            p.a *= inv;
            p.b *= inv;
        }
    return loss * inv;
}

/// Plain SGD on the LoRA factors only. Batches walk the dataset in order,
/// wrapping around.
inline TrainStats train_lora(ToyModel& m, const std::vector<TaskSample>& data, const ToySimConfig& c) {
    if (data.empty()) throw InvalidArgument("train_lora: empty dataset");
    TrainStats st;
    st.effective_n_params = effective_base_params(m);
    st.lora_param_count = lora_param_count(m);
    st.initial_loss = mean_loss(m, data);

    std::vector<TaskSample> batch;
    std::vector<LayerLora> grads;
    std::size_t cursor = 0;
    for (int step = 0; step < c.steps; ++step) {
        batch.clear();
        for (int b = 0; b < c.batch_size; ++b) {
            batch.push_back(data[cursor]);
            cursor = (cursor + 1) % data.size();
        }
        const double loss = batch_loss_and_grads(m, batch, grads);
        if (!std::isfinite(loss)) {
            throw NumericError("train_lora: loss became non-finite at step " + std::to_string(step));
        }
        st.step_losses.push_back(loss);
        for (std::size_t l = 0; l < m.lora.size(); ++l) {
            for (std::size_t s = 0; s < m.lora[l].site.size(); ++s) {
                m.lora[l].site[s].a -= c.lr * grads[l].site[s].a;
                m.lora[l].site[s].b -= c.lr * grads[l].site[s].b;
            }
        }
    }
    st.final_loss = c.steps == 0 ? st.initial_loss : mean_loss(m, data);
    if (!std::isfinite(st.final_loss)) throw NumericError("train_lora: final loss is non-finite");
    return st;
}

// ---------------------------------------------------------------------------
// Base pretraining

/// Full-weight SGD on every base layer of an untied model (embeddings stay
/// fixed). Returns the per-step batch losses.
inline std::vector<double> pretrain_base(ToyModel& m, const std::vector<TaskSample>& data, int steps, double lr,
                                         int batch) {
    for (std::size_t l = 0; l < m.base.size(); ++l) {
        if (m.canonical[l] != static_cast<int>(l)) throw InvalidArgument("pretrain_base: model has tied layers");
    }
    if (data.empty()) throw InvalidArgument("pretrain_base: empty dataset");
    if (batch < 1) throw InvalidArgument("pretrain_base: batch must be >= 1");
    std::vector<LayerWeights> weights;
    for (const auto& p : m.base) weights.push_back(*p);
    std::vector<double> losses;
    std::size_t cursor = 0;
    Mat dlogits;
    for (int step = 0; step < steps; ++step) {
        auto lora_grads = zero_lora_grads(m);
        auto grads = zero_base_grads(m);
        double loss = 0.0;
        for (int b = 0; b < batch; ++b) {
            const auto& s = data[cursor];
            cursor = (cursor + 1) % data.size();
            const auto fc = forward(m, s.input());
            loss += loss_and_grad(fc, s.targets(), &dlogits);
            backward(m, fc, dlogits, lora_grads, &grads);
        }
        loss /= batch;
        if (!std::isfinite(loss)) {
            throw NumericError("pretrain_base: loss became non-finite at step " + std::to_string(step));
        }
        losses.push_back(loss);
        for (std::size_t l = 0; l < weights.size(); ++l) {
            for (std::size_t k = 0; k < weights[l].w.size(); ++k) weights[l].w[k] -= (lr / batch) * grads[l].w[k];
            m.base[l] = std::make_shared<const LayerWeights>(weights[l]);
        }
    }
    return losses;
}

namespace detail {

inline std::string pretrain_key(const ToySimConfig& c) {
    return std::to_string(c.seed) + "/" + std::to_string(c.layers) + "/" + std::to_string(c.d_model) + "/" +
           std::to_string(c.n_heads) + "/" + std::to_string(c.d_ffn) + "/" + std::to_string(c.vocab) + "/" +
           std::to_string(c.pretrain_steps) + "/" + io::format_double(c.pretrain_lr) + "/" +
           std::to_string(c.pretrain_batch_size);
}

} // namespace detail

/// build_model, with the base layers pretrained first when
/// config.pretrain_steps > 0 and layer sharing applied afterwards. Pretrained
/// weights depend only on the seed and architecture, so they are computed once
/// per process and reused across ranks and sharing variants.
inline ToyModel prepare_model(const ToySimConfig& config) {
    config.validate();
    ToySimConfig untied = config;
    untied.share_k = 1;
    ToyModel m = build_model(untied);
    if (config.pretrain_steps > 0) {
        static std::mutex mu;
        static std::map<std::string, std::vector<std::shared_ptr<const LayerWeights>>> cache;
        const auto key = detail::pretrain_key(config);
        std::lock_guard<std::mutex> lock(mu);
        auto it = cache.find(key);
        if (it == cache.end()) {
            ToyModel pre = m;
            const auto data = pretraining_set(config);
            pretrain_base(pre, data, config.pretrain_steps, config.pretrain_lr, config.pretrain_batch_size);
            it = cache.emplace(key, pre.base).first;
        }
        m.base = it->second;
    }
    apply_layer_sharing(m, config.share_k);
    return m;
}

// ---------------------------------------------------------------------------
// Capture

/**
 * One ModuleCapture per (sample, layer, site): h_base is the frozen dense
 * output and h_adapted = h_base + B A x, both pooled per config.pooling.
 * The sidecar carries the adapted model's log-prob of every target token.
 */
inline CaptureSet capture_hidden(const ToyModel& m, const std::vector<TaskSample>& samples, int n_samples = -1) {
    const auto& c = m.config;
    const std::size_t n = n_samples < 0 ? samples.size()
                                        : std::min(samples.size(), static_cast<std::size_t>(n_samples));
    CaptureSet set;
    std::vector<SampleLogprobs> lps;
    double total_len = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = samples[i];
        total_len += static_cast<double>(s.tokens.size());
        const auto fc = forward(m, s.input());
        for (int l = 0; l < c.layers; ++l) {
            for (Site site : kAllSites) {
                const auto& sc = fc.layers[static_cast<std::size_t>(l)].site[static_cast<std::size_t>(site_index(site))];
                RowVec base, delta;
                if (c.pooling == Pooling::LastToken) {
                    base = sc.base_out.bottomRows(1);
                    delta = sc.delta.bottomRows(1);
                } else {
                    base = sc.base_out.colwise().mean();
                    delta = sc.delta.colwise().mean();
                }
                ModuleCapture mc;
                mc.sample_id = i;
                mc.module_id = module_id(l, site);
                mc.layer_index = static_cast<std::uint32_t>(l);
                mc.site = site;
                mc.h_base.resize(static_cast<std::size_t>(base.size()));
                mc.h_adapted.resize(mc.h_base.size());
                for (Eigen::Index k = 0; k < base.size(); ++k) {
                    mc.h_base[static_cast<std::size_t>(k)] = static_cast<float>(base[k]);
                    mc.h_adapted[static_cast<std::size_t>(k)] = static_cast<float>(base[k] + delta[k]);
                }
                set.captures.push_back(std::move(mc));
            }
        }
        SampleLogprobs lp{i, {}};
        for (const auto& t : s.targets()) {
            lp.logprobs.push_back(log_softmax(fc.logits.row(t.position).transpose())[t.token]);
        }
        lps.push_back(std::move(lp));
    }
    set.token_logprobs = std::move(lps);

    auto& meta = set.meta;
    meta.model_name = "toy-l" + std::to_string(c.layers) + "-d" + std::to_string(c.d_model);
    meta.n_params = static_cast<double>(effective_base_params(m));
    meta.lora_rank = c.rank;
    meta.dataset_size = n > 0 ? total_len / static_cast<double>(n) : 0.0;
    meta.share_k = c.share_k;
    meta.length_bin = to_string(c.length_bin);
    meta.seed = c.seed;
    meta.pooling = to_string(c.pooling);
    meta.extra = {{"optimizer", "sgd"},
                  {"lr", io::format_double(c.lr)},
                  {"steps", std::to_string(c.steps)},
                  {"batch_size", std::to_string(c.batch_size)},
                  {"softmax_axis", "hidden"},
                  {"lora_params", std::to_string(lora_param_count(m))}};
    return set;
}

// ---------------------------------------------------------------------------
// Grid

struct CellResult {
    ToySimConfig config;
    bool ok = false;
    std::string error;
    ScalingObservation observation;
    TrainStats train;
    CaptureSet captures;
    MetricReport report;
};

/// build -> share -> train -> capture -> aggregate for one configuration.
inline CellResult run_cell(const ToySimConfig& cfg, const AggregateOptions& agg = {}) {
    CellResult cell;
    cell.config = cfg;
    auto model = prepare_model(cfg);
    const auto train = training_set(cfg);
    cell.train = train_lora(model, train, cfg);
    cell.captures = capture_hidden(model, capture_set_samples(cfg));
    cell.report = aggregate(cell.captures, agg);
    cell.observation = {cell.captures.meta.n_params, static_cast<double>(cfg.rank), cell.captures.meta.dataset_size,
                        cell.report.aggregate_m};
    cell.ok = true;
    return cell;
}

/// Runs every cell in order. A failing cell is recorded with its error and
/// skipped.
inline std::vector<CellResult> run_scaling_grid(const std::vector<ToySimConfig>& grid, const AggregateOptions& agg = {}) {
    if (grid.empty()) throw InvalidArgument("run_scaling_grid: empty grid");
    std::vector<CellResult> out;
    out.reserve(grid.size());
    for (const auto& cfg : grid) {
        try {
            out.push_back(run_cell(cfg, agg));
        } catch (const std::exception& e) {
            CellResult failed;
            failed.config = cfg;
            failed.error = e.what();
            out.push_back(std::move(failed));
        }
    }
    return out;
}

inline std::vector<ScalingObservation> observations(const std::vector<CellResult>& cells) {
    std::vector<ScalingObservation> obs;
    for (const auto& c : cells)
        if (c.ok) obs.push_back(c.observation);
    return obs;
}

} // namespace miub::toy
