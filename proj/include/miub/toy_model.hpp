// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * @file toy_model.hpp
 * @brief A small pre-LN transformer with a LoRA adapter on every dense layer.
 *
 * Layer l computes
 *
 *   a   = LN(x)                     q, k, v = a W^T + (a A^T) B^T
 *   ctx = causal multi-head attention(q, k, v)
 *   x  += ctx Wo^T + (ctx Ao^T) Bo^T
 *   n   = LN(x)                     u = n Wup^T + (n Aup^T) Bup^T
 *   x  += gelu(u) Wdown^T + (gelu(u) Adown^T) Bdown^T
 *
 * and the logits are U LN(x) at the last position. LN has no affine
 * parameters. Base weights are immutable and shared through shared_ptr, so
 * layers tied by parameter sharing point at the same object. Only the LoRA
 * factors (A: rank x d_in, B: d_out x rank, B = 0 at init) ever change.
 *
 * Forward and backward passes are written out by hand; there is no autograd.
 */

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "miub/capture.hpp"
#include "miub/error.hpp"

namespace miub::toy {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

enum class LengthBin { Short, Medium, Long };

inline int sequence_length(LengthBin b) {
    switch (b) {
    case LengthBin::Short: return 16;
    case LengthBin::Medium: return 48;
    case LengthBin::Long: return 96;
    }
    return 16;
}

inline std::string to_string(LengthBin b) {
    switch (b) {
    case LengthBin::Short: return "short";
    case LengthBin::Medium: return "medium";
    case LengthBin::Long: return "long";
    }
    return "?";
}

inline LengthBin length_bin_from_string(const std::string& s) {
    if (s == "short") return LengthBin::Short;
    if (s == "medium") return LengthBin::Medium;
    if (s == "long") return LengthBin::Long;
    throw InvalidArgument("unknown length bin '" + s + "' (expected short, medium or long)");
}

enum class Pooling { LastToken, Mean };

inline std::string to_string(Pooling p) { return p == Pooling::LastToken ? "last_token" : "mean"; }

struct ToySimConfig {
    int layers = 8;
    int d_model = 64;
    int n_heads = 4;
    int d_ffn = 256;
    int vocab = 64;
    int rank = 8;
    int share_k = 1; // over the last half of the layers
    std::uint64_t seed = 42;
    int steps = 500;
    double lr = 1e-3;
    LengthBin length_bin = LengthBin::Short;
    int batch_size = 1;
    int train_samples = 256;
    int capture_samples = 32;
    Pooling pooling = Pooling::LastToken;
    int pretrain_steps = 300; // full-weight SGD on the base layers before sharing
    double pretrain_lr = 0.2;
    int pretrain_batch_size = 4;

    void validate() const {
        auto fail = [](const std::string& m) { throw InvalidArgument("ToySimConfig: " + m); };
        if (layers < 2 || layers % 2 != 0) fail("layers must be an even number >= 2");
        if (d_model < 2 || n_heads < 1 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
        if (d_ffn < 2) fail("d_ffn must be >= 2");
        if (vocab < 4 || vocab % 2 != 0) fail("vocab must be an even number >= 4");
        if (rank < 1) fail("rank must be >= 1");
        if (share_k < 1 || (layers / 2) % share_k != 0) fail("share_k must divide layers/2");
        if (steps < 0) fail("steps must be >= 0");
        if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be positive");
        if (batch_size < 1) fail("batch_size must be >= 1");
        if (train_samples < 1 || capture_samples < 1) fail("sample counts must be >= 1");
        if (pretrain_steps < 0) fail("pretrain_steps must be >= 0");
        if (!(pretrain_lr > 0.0) || !std::isfinite(pretrain_lr)) fail("pretrain_lr must be positive");
        if (pretrain_batch_size < 1) fail("pretrain_batch_size must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Deterministic randomness (mt19937_64 output is fully specified; the
// standard distributions are not, so they are avoided).

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return mag * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t below(std::uint64_t n) { return eng_() % n; }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Stream tags so each consumer of the seed draws independent numbers.
inline constexpr std::uint64_t kBaseStream = 0x62617365ull;   // "base"
inline constexpr std::uint64_t kLoraStream = 0x6c6f7261ull;   // "lora"
inline constexpr std::uint64_t kTrainStream = 0x747261696eull; // "train"
inline constexpr std::uint64_t kProbeStream = 0x70726f6265ull; // "probe"
inline constexpr std::uint64_t kPretrainStream = 0x707265ull;  // "pre"

inline Mat gaussian(Rng& rng, int rows, int cols, double stddev) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
    return m;
}

// ---------------------------------------------------------------------------
// Parameters

inline constexpr int kSitesPerLayer = 6;

inline int site_index(Site s) { return static_cast<int>(s); }

struct LayerWeights {
    std::array<Mat, kSitesPerLayer> w; // indexed by Site, each d_out x d_in
};

struct LoraPair {
    Mat a; // rank x d_in
    Mat b; // d_out x rank
};

struct LayerLora {
    std::array<LoraPair, kSitesPerLayer> site;
};

struct ToyModel {
    ToySimConfig config;
    std::shared_ptr<const Mat> token_embedding; // vocab x d
    std::shared_ptr<const Mat> position_embedding; // max_len x d
    std::shared_ptr<const Mat> unembedding;     // vocab x d
    std::vector<std::shared_ptr<const LayerWeights>> base; // per layer; tied layers share the pointer
    std::vector<int> canonical;                 // layer -> index of the layer whose weights it uses
    std::vector<LayerLora> lora;
};

inline std::pair<int, int> site_shape(const ToySimConfig& c, Site s) {
    // (d_out, d_in)
    switch (s) {
    case Site::FfnUp: return {c.d_ffn, c.d_model};
    case Site::FfnDown: return {c.d_model, c.d_ffn};
    default: return {c.d_model, c.d_model};
    }
}

inline std::string module_id(int layer, Site s) {
    std::string l = std::to_string(layer);
    if (l.size() < 2) l = "0" + l;
    return "layer" + l + "." + std::string(miub::to_string(s));
}

/// Ties each consecutive group of `share_k` layers in the second half of the
/// network to the base weights of the group's first layer. The first half and
/// all LoRA adapters are untouched. Sharing is applied to the model's own
/// untied weights, so calling this again with a different k is not supported
/// once layers are tied.
inline void apply_layer_sharing(ToyModel& model, int share_k) {
    const int layers = model.config.layers;
    const int half = layers / 2;
    if (share_k < 1 || half % share_k != 0) {
        throw InvalidArgument("apply_layer_sharing: share_k=" + std::to_string(share_k) + " does not divide " +
                              std::to_string(half));
    }
    if (model.config.share_k != 1 && model.config.share_k != share_k) {
        throw InvalidArgument("apply_layer_sharing: model is already tied with share_k=" +
                              std::to_string(model.config.share_k));
    }
    for (int l = half; l < layers; ++l) {
        const int canon = half + ((l - half) / share_k) * share_k;
        model.canonical[static_cast<std::size_t>(l)] = canon;
        model.base[static_cast<std::size_t>(l)] = model.base[static_cast<std::size_t>(canon)];
    }
    model.config.share_k = share_k;
}

/// Builds base weights from config.seed alone (so every rank and sharing
/// variant of one seed starts from the same network), LoRA A ~ N(0, 1/rank),
/// B = 0, then applies config.share_k.
inline ToyModel build_model(const ToySimConfig& config) {
    config.validate();
    ToyModel m;
    m.config = config;
    m.config.share_k = 1;
    const int d = config.d_model;
    const int max_len = sequence_length(LengthBin::Long);

    Rng base_rng(config.seed ^ kBaseStream);
    m.token_embedding = std::make_shared<const Mat>(gaussian(base_rng, config.vocab, d, 1.0));
    m.position_embedding = std::make_shared<const Mat>(gaussian(base_rng, max_len, d, 1.0));
    m.unembedding = std::make_shared<const Mat>(gaussian(base_rng, config.vocab, d, 1.0 / std::sqrt(d)));
    for (int l = 0; l < config.layers; ++l) {
        LayerWeights w;
        for (Site s : kAllSites) {
            auto [out, in] = site_shape(config, s);
            w.w[static_cast<std::size_t>(site_index(s))] = gaussian(base_rng, out, in, 1.0 / std::sqrt(in));
        }
        m.base.push_back(std::make_shared<const LayerWeights>(std::move(w)));
        m.canonical.push_back(l);
    }

    Rng lora_rng(config.seed ^ kLoraStream);
    const double a_std = 1.0 / std::sqrt(static_cast<double>(config.rank));
    for (int l = 0; l < config.layers; ++l) {
        LayerLora ll;
        for (Site s : kAllSites) {
            auto [out, in] = site_shape(config, s);
            auto& p = ll.site[static_cast<std::size_t>(site_index(s))];
            p.a = gaussian(lora_rng, config.rank, in, a_std);
            p.b = Mat::Zero(out, config.rank);
        }
        m.lora.push_back(std::move(ll));
    }
    apply_layer_sharing(m, config.share_k);
    return m;
}

/// Base parameters with tied weight sets counted once.
inline std::size_t effective_base_params(const ToyModel& m) {
    std::size_t n = static_cast<std::size_t>(m.token_embedding->size() + m.position_embedding->size() +
                                             m.unembedding->size());
    std::vector<const LayerWeights*> seen;
    for (const auto& p : m.base) {
        if (std::find(seen.begin(), seen.end(), p.get()) != seen.end()) continue;
        seen.push_back(p.get());
        for (const auto& w : p->w) n += static_cast<std::size_t>(w.size());
    }
    return n;
}

inline std::size_t lora_param_count(const ToyModel& m) {
    std::size_t n = 0;
    for (const auto& ll : m.lora)
        for (const auto& p : ll.site) n += static_cast<std::size_t>(p.a.size() + p.b.size());
    return n;
}

namespace detail {
inline void fnv_mix(std::uint64_t& h, const Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(m.data()[i]);
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xFFu;
            h *= 1099511628211ull;
        }
    }
}
} // namespace detail

/// FNV-1a over the bit patterns of every base weight, per layer in order.
inline std::uint64_t base_checksum(const ToyModel& m) {
    std::uint64_t h = 1469598103934665603ull;
    detail::fnv_mix(h, *m.token_embedding);
    detail::fnv_mix(h, *m.position_embedding);
    detail::fnv_mix(h, *m.unembedding);
    for (const auto& p : m.base)
        for (const auto& w : p->w) detail::fnv_mix(h, w);
    return h;
}

inline std::uint64_t lora_checksum(const ToyModel& m) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& ll : m.lora)
        for (const auto& p : ll.site) {
            detail::fnv_mix(h, p.a);
            detail::fnv_mix(h, p.b);
        }
    return h;
}

// ---------------------------------------------------------------------------
// Forward / backward

inline constexpr double kLayerNormEps = 1e-5;

struct SiteCache {
    Mat input;      // T x d_in
    Mat projected;  // input A^T, T x rank
    Mat base_out;   // input W^T, T x d_out
    Mat delta;      // projected B^T, T x d_out
};

struct LayerCache {
    Mat x_in, ln1, x_mid, ln2, pre_act, act;
    Vec inv_std1, inv_std2;
    Mat q, k, v, ctx;
    std::vector<Mat> probs; // per head, T x T
    std::array<SiteCache, kSitesPerLayer> site;
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    Mat x_final;       // T x d
    Mat ln_final;      // T x d, normalized
    Vec inv_std_final; // T
    Mat logits;        // T x vocab
};

namespace detail {

inline Mat layer_norm(const Mat& x, Vec& inv_std) {
    Mat y(x.rows(), x.cols());
    inv_std.resize(x.rows());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const double mean = x.row(t).mean();
        const double var = (x.row(t).array() - mean).square().mean();
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std[t] = is;
        y.row(t) = (x.row(t).array() - mean) * is;
    }
    return y;
}

// dx for y = (x - mean) * inv_std, given dy and y.
inline Mat layer_norm_backward(const Mat& dy, const Mat& y, const Vec& inv_std) {
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index t = 0; t < dy.rows(); ++t) {
        const double mean_dy = dy.row(t).mean();
        const double mean_dyy = dy.row(t).dot(y.row(t)) / static_cast<double>(dy.cols());
        dx.row(t) = inv_std[t] * (dy.row(t).array() - mean_dy - y.row(t).array() * mean_dyy);
    }
    return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

inline Mat site_forward(const Mat& input, const Mat& w, const LoraPair& lora, SiteCache& cache) {
    cache.input = input;
    cache.base_out = input * w.transpose();
    cache.projected = input * lora.a.transpose();
    cache.delta = cache.projected * lora.b.transpose();
    return cache.base_out + cache.delta;
}

// Accumulates LoRA grads (and base grads when gw is set) and returns d input.
inline Mat site_backward(const Mat& dy, const Mat& w, const LoraPair& lora, const SiteCache& cache, LoraPair& grad,
                         Mat* gw = nullptr) {
    const Mat dy_b = dy * lora.b;         // T x rank
    grad.b.noalias() += dy.transpose() * cache.projected;
    grad.a.noalias() += dy_b.transpose() * cache.input;
    if (gw) gw->noalias() += dy.transpose() * cache.input;
    return dy * w + dy_b * lora.a;
}

} // namespace detail

/// Runs the model over `tokens` and caches everything backward() needs.
inline ForwardCache forward(const ToyModel& m, std::span<const int> tokens) {
    const auto& c = m.config;
    const auto T = static_cast<Eigen::Index>(tokens.size());
    if (T < 1 || T > m.position_embedding->rows()) throw InvalidArgument("forward: bad sequence length");
    const int dh = c.d_model / c.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Mat x(T, c.d_model);
    for (Eigen::Index t = 0; t < T; ++t) {
        const int tok = tokens[static_cast<std::size_t>(t)];
        if (tok < 0 || tok >= c.vocab) throw InvalidArgument("forward: token out of vocabulary");
        x.row(t) = m.token_embedding->row(tok) + m.position_embedding->row(t);
    }

    ForwardCache fc;
    fc.layers.resize(static_cast<std::size_t>(c.layers));
    for (int l = 0; l < c.layers; ++l) {
        auto& lc = fc.layers[static_cast<std::size_t>(l)];
        const auto& w = m.base[static_cast<std::size_t>(l)]->w;
        const auto& lo = m.lora[static_cast<std::size_t>(l)].site;
        auto si = [](Site s) { return static_cast<std::size_t>(site_index(s)); };

        lc.x_in = x;
        lc.ln1 = detail::layer_norm(x, lc.inv_std1);
        lc.q = detail::site_forward(lc.ln1, w[si(Site::AttnQ)], lo[si(Site::AttnQ)], lc.site[si(Site::AttnQ)]);
        lc.k = detail::site_forward(lc.ln1, w[si(Site::AttnK)], lo[si(Site::AttnK)], lc.site[si(Site::AttnK)]);
        lc.v = detail::site_forward(lc.ln1, w[si(Site::AttnV)], lo[si(Site::AttnV)], lc.site[si(Site::AttnV)]);

        lc.ctx = Mat::Zero(T, c.d_model);
        lc.probs.resize(static_cast<std::size_t>(c.n_heads));
        for (int h = 0; h < c.n_heads; ++h) {
            const auto q_h = lc.q.middleCols(h * dh, dh);
            const auto k_h = lc.k.middleCols(h * dh, dh);
            const auto v_h = lc.v.middleCols(h * dh, dh);
            Mat p = (q_h * k_h.transpose()) * scale;
            for (Eigen::Index i = 0; i < T; ++i) {
                const double mx = p.row(i).head(i + 1).maxCoeff();
                double z = 0.0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    p(i, j) = std::exp(p(i, j) - mx);
                    z += p(i, j);
                }
                for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= z;
                for (Eigen::Index j = i + 1; j < T; ++j) p(i, j) = 0.0;
            }
            lc.ctx.middleCols(h * dh, dh) = p * v_h;
            lc.probs[static_cast<std::size_t>(h)] = std::move(p);
        }
        x += detail::site_forward(lc.ctx, w[si(Site::AttnO)], lo[si(Site::AttnO)], lc.site[si(Site::AttnO)]);
        lc.x_mid = x;

        lc.ln2 = detail::layer_norm(x, lc.inv_std2);
        lc.pre_act = detail::site_forward(lc.ln2, w[si(Site::FfnUp)], lo[si(Site::FfnUp)], lc.site[si(Site::FfnUp)]);
        lc.act = lc.pre_act.unaryExpr([](double v) { return detail::gelu(v); });
        x += detail::site_forward(lc.act, w[si(Site::FfnDown)], lo[si(Site::FfnDown)], lc.site[si(Site::FfnDown)]);
    }
    fc.x_final = x;
    fc.ln_final = detail::layer_norm(x, fc.inv_std_final);
    fc.logits = fc.ln_final * m.unembedding->transpose();
    return fc;
}

/// Zero-filled gradient buffers shaped like model.lora.
inline std::vector<LayerLora> zero_lora_grads(const ToyModel& m) {
    std::vector<LayerLora> g = m.lora;
    for (auto& ll : g)
        for (auto& p : ll.site) {
            p.a.setZero();
            p.b.setZero();
        }
    return g;
}

/// Zero-filled gradient buffers, one untied LayerWeights per layer.
inline std::vector<LayerWeights> zero_base_grads(const ToyModel& m) {
    std::vector<LayerWeights> g;
    for (const auto& p : m.base) {
        LayerWeights w = *p;
        for (auto& x : w.w) x.setZero();
        g.push_back(std::move(w));
    }
    return g;
}

/// Back-propagates d loss / d logits (T x vocab) into LoRA grads, and into
/// per-layer base-weight grads when `base_grads` is given.
inline void backward(const ToyModel& m, const ForwardCache& fc, const Mat& dlogits, std::vector<LayerLora>& grads,
                     std::vector<LayerWeights>* base_grads = nullptr) {
    const auto& c = m.config;
    const Eigen::Index T = fc.x_final.rows();
    const int dh = c.d_model / c.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    auto si = [](Site s) { return static_cast<std::size_t>(site_index(s)); };

    if (dlogits.rows() != T || dlogits.cols() != c.vocab) throw InvalidArgument("backward: dlogits shape mismatch");
    Mat dx = detail::layer_norm_backward(dlogits * (*m.unembedding), fc.ln_final, fc.inv_std_final);

    for (int l = c.layers - 1; l >= 0; --l) {
        const auto& lc = fc.layers[static_cast<std::size_t>(l)];
        const auto& w = m.base[static_cast<std::size_t>(l)]->w;
        const auto& lo = m.lora[static_cast<std::size_t>(l)].site;
        auto& g = grads[static_cast<std::size_t>(l)].site;
        auto gw = [&](Site s) -> Mat* {
            return base_grads ? &(*base_grads)[static_cast<std::size_t>(l)].w[si(s)] : nullptr;
        };

        // FFN branch
        const Mat dact = detail::site_backward(dx, w[si(Site::FfnDown)], lo[si(Site::FfnDown)],
                                               lc.site[si(Site::FfnDown)], g[si(Site::FfnDown)], gw(Site::FfnDown));
        const Mat dpre = dact.cwiseProduct(lc.pre_act.unaryExpr([](double v) { return detail::gelu_grad(v); }));
        const Mat dln2 = detail::site_backward(dpre, w[si(Site::FfnUp)], lo[si(Site::FfnUp)], lc.site[si(Site::FfnUp)],
                                               g[si(Site::FfnUp)], gw(Site::FfnUp));
        dx += detail::layer_norm_backward(dln2, lc.ln2, lc.inv_std2);

        // Attention branch
        const Mat dctx = detail::site_backward(dx, w[si(Site::AttnO)], lo[si(Site::AttnO)], lc.site[si(Site::AttnO)],
                                               g[si(Site::AttnO)], gw(Site::AttnO));
        Mat dq = Mat::Zero(T, c.d_model), dk = Mat::Zero(T, c.d_model), dv = Mat::Zero(T, c.d_model);
        for (int h = 0; h < c.n_heads; ++h) {
            const Mat& p = lc.probs[static_cast<std::size_t>(h)];
            const auto dctx_h = dctx.middleCols(h * dh, dh);
            const Mat dp = dctx_h * lc.v.middleCols(h * dh, dh).transpose();
            dv.middleCols(h * dh, dh) = p.transpose() * dctx_h;
            Mat ds(T, T);
            for (Eigen::Index i = 0; i < T; ++i) {
                const double row_dot = dp.row(i).dot(p.row(i));
                ds.row(i) = p.row(i).array() * (dp.row(i).array() - row_dot);
            }
            ds *= scale;
            dq.middleCols(h * dh, dh) = ds * lc.k.middleCols(h * dh, dh);
            dk.middleCols(h * dh, dh) = ds.transpose() * lc.q.middleCols(h * dh, dh);
        }
        Mat dln1 = detail::site_backward(dq, w[si(Site::AttnQ)], lo[si(Site::AttnQ)], lc.site[si(Site::AttnQ)],
                                         g[si(Site::AttnQ)], gw(Site::AttnQ));
        dln1 += detail::site_backward(dk, w[si(Site::AttnK)], lo[si(Site::AttnK)], lc.site[si(Site::AttnK)],
                                      g[si(Site::AttnK)], gw(Site::AttnK));
        dln1 += detail::site_backward(dv, w[si(Site::AttnV)], lo[si(Site::AttnV)], lc.site[si(Site::AttnV)],
                                      g[si(Site::AttnV)], gw(Site::AttnV));
        dx += detail::layer_norm_backward(dln1, lc.ln1, lc.inv_std1);
    }
}

/// Log-softmax of the logits evaluated stably.
inline Vec log_softmax(const Vec& logits) {
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    return logits.array() - lse;
}

/// A supervised next-token prediction: the logits at `position` should put
/// their mass on `token`.
struct Target {
    int position = 0;
    int token = 0;
};

/// Mean cross-entropy over `targets`; fills dlogits (T x vocab) if non-null.
inline double loss_and_grad(const ForwardCache& fc, std::span<const Target> targets, Mat* dlogits) {
    if (targets.empty()) throw InvalidArgument("loss_and_grad: no targets");
    const double inv = 1.0 / static_cast<double>(targets.size());
    if (dlogits) *dlogits = Mat::Zero(fc.logits.rows(), fc.logits.cols());
    double loss = 0.0;
    for (const auto& t : targets) {
        if (t.position < 0 || t.position >= fc.logits.rows() || t.token < 0 || t.token >= fc.logits.cols()) {
            throw InvalidArgument("loss_and_grad: target out of range");
        }
        const Vec lsm = log_softmax(fc.logits.row(t.position).transpose());
        loss -= lsm[t.token];
        if (dlogits) {
            dlogits->row(t.position) += inv * lsm.array().exp().matrix().transpose();
            (*dlogits)(t.position, t.token) -= inv;
        }
    }
    return loss * inv;
}

} // namespace miub::toy
