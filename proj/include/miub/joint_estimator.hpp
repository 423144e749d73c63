// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * @file joint_estimator.hpp
 * @brief Plug-in estimates of I(O;L) and ln(2) * JS(P_OL || P_O x P_L).
 *
 * Paired scalar coordinates (o_i, l_i) are quantized per variable into a
 * bins x bins histogram. The empirical joint and the product of its marginals
 * are then fed to the discrete kernels. No bias correction is applied.
 *
 * The two estimates are reported side by side. MI <= MIUB does not hold in
 * general (MIUB is bounded by (ln 2)^2 while MI is not), so nothing here
 * assumes it.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "miub/error.hpp"
#include "miub/info_kernels.hpp"

namespace miub {

enum class RangeStrategy { MinMax, SymmetricPercentile };

struct QuantizationSpec {
    std::size_t bins = 32;
    RangeStrategy range = RangeStrategy::SymmetricPercentile;
    double percentile = 99.5; // in (50, 100], SymmetricPercentile only

    void validate() const {
        if (bins < 2) throw InvalidArgument("quantization needs bins >= 2");
        if (range == RangeStrategy::SymmetricPercentile && !(percentile > 50.0 && percentile <= 100.0)) {
            throw InvalidArgument("percentile must lie in (50, 100]");
        }
    }
};

/// Immutable bins x bins empirical joint distribution with its marginals.
class JointHistogram {
public:
    /// Builds from raw counts (row index = O bin, column index = L bin).
    JointHistogram(std::size_t bins, std::vector<std::uint64_t> counts) : bins_(bins), counts_(std::move(counts)) {
        if (bins_ < 1 || counts_.size() != bins_ * bins_) {
            throw InvalidArgument("joint histogram needs bins*bins counts");
        }
        std::uint64_t n = 0;
        for (auto c : counts_) n += c;
        if (n == 0) throw InvalidArgument("joint histogram has no samples");
        n_samples_ = n;
        joint_.resize(counts_.size());
        for (std::size_t k = 0; k < counts_.size(); ++k) {
            joint_[k] = static_cast<double>(counts_[k]) / static_cast<double>(n);
        }
        marginal_o_ = row_sums(bins_, joint_);
        marginal_l_ = col_sums(bins_, joint_);
    }

    /// Builds from a probability table; counts are left empty. Used by tests
    /// and by callers that already hold a normalized joint.
    static JointHistogram from_joint(std::size_t bins, std::vector<double> joint) {
        return JointHistogram(bins, std::move(joint), 0);
    }

    std::size_t bins() const { return bins_; }
    std::uint64_t n_samples() const { return n_samples_; }
    std::span<const std::uint64_t> counts() const { return counts_; }
    std::span<const double> joint() const { return joint_; }
    double joint(std::size_t i, std::size_t j) const { return joint_[i * bins_ + j]; }
    std::span<const double> marginal_o() const { return marginal_o_; }
    std::span<const double> marginal_l() const { return marginal_l_; }

    /// True when fewer than 10 * bins^2 samples back the histogram.
    bool undersampled() const { return n_samples_ < 10 * bins_ * bins_; }

    /// Product of the marginals, flattened row-major like joint().
    std::vector<double> product_of_marginals() const {
        std::vector<double> out(bins_ * bins_);
        for (std::size_t i = 0; i < bins_; ++i)
            for (std::size_t j = 0; j < bins_; ++j) out[i * bins_ + j] = marginal_o_[i] * marginal_l_[j];
        return out;
    }

    // Marginals are always formed with these, in this summation order.
    static std::vector<double> row_sums(std::size_t bins, std::span<const double> joint) {
        std::vector<double> out(bins, 0.0);
        for (std::size_t i = 0; i < bins; ++i)
            for (std::size_t j = 0; j < bins; ++j) out[i] += joint[i * bins + j];
        return out;
    }
    static std::vector<double> col_sums(std::size_t bins, std::span<const double> joint) {
        std::vector<double> out(bins, 0.0);
        for (std::size_t i = 0; i < bins; ++i)
            for (std::size_t j = 0; j < bins; ++j) out[j] += joint[i * bins + j];
        return out;
    }

private:
    JointHistogram(std::size_t bins, std::vector<double> joint, int) : bins_(bins), joint_(std::move(joint)) {
        if (bins_ < 1 || joint_.size() != bins_ * bins_) {
            throw InvalidArgument("joint table must have bins*bins entries");
        }
        ProbVec validated(joint_); // range and sum checks
        joint_ = validated.vec();
        n_samples_ = 0;
        marginal_o_ = row_sums(bins_, joint_);
        marginal_l_ = col_sums(bins_, joint_);
    }

    std::size_t bins_ = 0;
    std::uint64_t n_samples_ = 0;
    std::vector<std::uint64_t> counts_;
    std::vector<double> joint_;
    std::vector<double> marginal_o_;
    std::vector<double> marginal_l_;
};

namespace detail {

// Linear-interpolated percentile over a sorted copy, q in [0, 100].
inline double percentile(std::vector<double> values, double q) {
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

struct BinRange {
    double lo = 0.0;
    double hi = 0.0;
};

template <std::floating_point T>
BinRange bin_range(std::span<const T> xs, const QuantizationSpec& spec) {
    if (spec.range == RangeStrategy::MinMax) {
        auto [mn, mx] = std::minmax_element(xs.begin(), xs.end());
        return {static_cast<double>(*mn), static_cast<double>(*mx)};
    }
    std::vector<double> v(xs.begin(), xs.end());
    return {percentile(v, 100.0 - spec.percentile), percentile(std::move(v), spec.percentile)};
}

// Out-of-range values land in the edge bins. A degenerate range puts
// everything in bin 0.
inline std::size_t bin_of(double x, const BinRange& r, std::size_t bins) {
    const double width = r.hi - r.lo;
    if (!(width > 0.0)) return 0;
    const double pos = (x - r.lo) / width * static_cast<double>(bins);
    if (!(pos > 0.0)) return 0;
    const auto b = static_cast<std::size_t>(pos);
    return std::min(b, bins - 1);
}

} // namespace detail

/// Quantizes paired coordinates into a bins x bins histogram.
template <std::floating_point T>
JointHistogram quantize_pairs(std::span<const T> o, std::span<const T> l, const QuantizationSpec& spec = {}) {
    spec.validate();
    if (o.size() != l.size()) {
        throw InvalidArgument("quantize_pairs: length mismatch (" + std::to_string(o.size()) + " vs " +
                              std::to_string(l.size()) + ")");
    }
    if (o.empty()) throw InvalidArgument("quantize_pairs: empty input");
    if (o.size() < spec.bins) {
        throw InvalidArgument("quantize_pairs: need at least `bins` samples");
    }
    for (std::size_t i = 0; i < o.size(); ++i) {
        if (!std::isfinite(static_cast<double>(o[i])) || !std::isfinite(static_cast<double>(l[i]))) {
            throw InvalidArgument("quantize_pairs: non-finite coordinate at index " + std::to_string(i));
        }
    }
    const auto range_o = detail::bin_range(o, spec);
    const auto range_l = detail::bin_range(l, spec);
    std::vector<std::uint64_t> counts(spec.bins * spec.bins, 0);
    for (std::size_t i = 0; i < o.size(); ++i) {
        const auto bi = detail::bin_of(static_cast<double>(o[i]), range_o, spec.bins);
        const auto bj = detail::bin_of(static_cast<double>(l[i]), range_l, spec.bins);
        ++counts[bi * spec.bins + bj];
    }
    return JointHistogram(spec.bins, std::move(counts));
}

template <std::floating_point T>
JointHistogram quantize_pairs(const std::vector<T>& o, const std::vector<T>& l, const QuantizationSpec& spec = {}) {
    return quantize_pairs(std::span<const T>(o), std::span<const T>(l), spec);
}

/// I(O;L) = KL(P_OL || P_O x P_L), bounded by min(H(P_O), H(P_L)).
inline NatValue mutual_information(const JointHistogram& h) {
    // Near independence MI is first-order sensitive to rounding in the
    // marginal product, so it is formed in extended precision. Each cell adds
    // q f((p - q) / q) + (p - q), which equals p ln(p / q).
    // A table equal to its double-precision marginal product is independent
    // at working precision, matching what miub() sees.
    const auto product = h.product_of_marginals();
    if (std::equal(product.begin(), product.end(), h.joint().begin())) return NatValue::finite(0.0);
    using ld = long double;
    const std::size_t b = h.bins();
    std::vector<ld> mo(b, 0), ml(b, 0);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) {
            mo[i] += h.joint(i, j);
            ml[j] += h.joint(i, j);
        }
    ld spread = 0, mass = 0;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) {
            const ld p = h.joint(i, j);
            if (p <= 0) continue; // p > 0 implies both marginals are positive
            const ld q = mo[i] * ml[j];
            spread += q * detail::one_plus_x_log_one_plus_x_minus_x((p - q) / q);
            mass += p - q;
        }
    return NatValue::finite(std::max(static_cast<double>(spread + mass), 0.0));
}

/// ln(2) * JS(P_OL || P_O x P_L) over the flattened bins x bins cells; in [0, (ln 2)^2].
inline NatValue miub(const JointHistogram& h) {
    const ProbVec joint(std::vector<double>(h.joint().begin(), h.joint().end()));
    const ProbVec product(h.product_of_marginals());
    return NatValue::finite(kLn2 * js(joint, product).nats);
}

} // namespace miub
