// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * @file info_kernels.hpp
 * @brief Scalar information-theoretic kernels over finite discrete distributions.
 *
 * Everything is in nats. Conversion to bits happens only when a value is
 * reported (NatValue::bits). The conventions 0 ln 0 = 0 and 0 ln(0/0) = 0 hold
 * everywhere, so JS divergence is always finite while KL and cross-entropy
 * return a flagged-infinite NatValue on an absolute-continuity violation.
 *
 * All functions are pure and thread-safe.
 */

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "miub/error.hpp"

namespace miub {

inline constexpr double kLn2 = std::numbers::ln2;

// Relative tolerance on the sum of a probability vector. Inside it the vector
// is renormalized silently, outside it the vector is rejected.
inline constexpr double kProbSumTolerance = 1e-9;

/// An information quantity in nats, possibly flagged infinite.
struct NatValue {
    double nats = 0.0;
    bool infinite = false;

    static NatValue finite(double v) { return {v, false}; }
    static NatValue inf() { return {std::numeric_limits<double>::infinity(), true}; }

    bool is_finite() const { return !infinite; }
    double bits() const { return infinite ? nats : nats / kLn2; }

    friend bool operator==(const NatValue&, const NatValue&) = default;
};

/// A validated finite discrete probability distribution.
class ProbVec {
public:
    ProbVec() = default;

    /// Validates and (within tolerance) renormalizes. Throws InvalidArgument otherwise.
    explicit ProbVec(std::vector<double> probs) : p_(std::move(probs)) {
        if (p_.empty()) throw InvalidArgument("probability vector must have dim >= 1");
        double sum = 0.0;
        for (std::size_t i = 0; i < p_.size(); ++i) {
            if (!std::isfinite(p_[i]) || p_[i] < 0.0) {
                throw InvalidArgument("probability entry " + std::to_string(i) +
                                      " is negative or non-finite");
            }
            sum += p_[i];
        }
        if (!(std::abs(sum - 1.0) <= kProbSumTolerance)) {
            throw InvalidArgument("probabilities sum to " + std::to_string(sum) +
                                  ", outside 1e-9 of 1");
        }
        if (sum != 1.0) {
            for (double& v : p_) v /= sum;
        }
    }

    std::size_t size() const { return p_.size(); }
    double operator[](std::size_t i) const { return p_[i]; }
    std::span<const double> values() const { return p_; }
    const std::vector<double>& vec() const { return p_; }

private:
    std::vector<double> p_;
};

namespace detail {

inline void require_same_dim(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw InvalidArgument(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                              " vs " + std::to_string(b) + ")");
    }
}

// f(x) = (1 + x) ln(1 + x) - x, which is >= 0 and ~ x^2/2 near zero.
// The direct form cancels catastrophically for small |x|, so a short series
// takes over there.
template <std::floating_point T>
T one_plus_x_log_one_plus_x_minus_x(T x) {
    if (x == T(-1)) return T(1);
    if (std::abs(x) < T(1e-3)) {
        // sum_{n>=2} (-1)^n x^n / (n (n - 1))
        T term = x * x;
        T sum = 0;
        for (int n = 2; n < 11; ++n) {
            sum += ((n % 2 == 0) ? term : -term) / static_cast<T>(n * (n - 1));
            term *= x;
        }
        return sum;
    }
    return (T(1) + x) * std::log1p(x) - x;
}

// KL(p || m) for p and m of equal total mass with m_i > 0 wherever p_i > 0,
// written as sum_i m_i f((p_i - m_i) / m_i). Every term is non-negative, so
// there is no cancellation when p is close to m.
inline double kl_equal_mass(std::span<const double> p, std::span<const double> m) {
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (m[i] <= 0.0) continue; // p_i == 0 too
        sum += m[i] * one_plus_x_log_one_plus_x_minus_x((p[i] - m[i]) / m[i]);
    }
    return sum;
}

} // namespace detail

/// Rejects non-finite logits, naming the first offending index.
template <std::floating_point T>
void validate_logits(std::span<const T> logits) {
    if (logits.empty()) throw InvalidArgument("logits must have dim >= 1");
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (!std::isfinite(static_cast<double>(logits[i]))) {
            throw InvalidArgument("non-finite logit at index " + std::to_string(i));
        }
    }
}

/// Max-subtracted softmax evaluated in double precision.
template <std::floating_point T>
ProbVec softmax(std::span<const T> logits, double temperature = 1.0) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw InvalidArgument("softmax temperature must be positive and finite");
    }
    validate_logits(logits);
    double max_logit = -std::numeric_limits<double>::infinity();
    for (T v : logits) max_logit = std::max(max_logit, static_cast<double>(v));

    std::vector<double> out(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp((static_cast<double>(logits[i]) - max_logit) / temperature);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return ProbVec(std::move(out));
}

template <std::floating_point T>
ProbVec softmax(const std::vector<T>& logits, double temperature = 1.0) {
    return softmax(std::span<const T>(logits), temperature);
}

/// Shannon entropy, in [0, ln dim].
inline NatValue entropy(const ProbVec& p) {
    double h = 0.0;
    for (double v : p.values()) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return NatValue::finite(std::clamp(h, 0.0, std::log(static_cast<double>(p.size()))));
}

/// KL(p || q). Flagged infinite when some p_i > 0 has q_i = 0.
inline NatValue kl(const ProbVec& p, const ProbVec& q) {
    detail::require_same_dim(p.size(), q.size(), "kl");
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        if (q[i] <= 0.0) return NatValue::inf();
        sum += p[i] * std::log(p[i] / q[i]);
    }
    return NatValue::finite(std::max(sum, 0.0));
}

/// Jensen-Shannon divergence with M = (p + q) / 2, in [0, ln 2].
/// js(p, q) == js(q, p) bit-exactly: M is formed once and the two halves are
/// combined with a commutative add.
inline NatValue js(const ProbVec& p, const ProbVec& q) {
    detail::require_same_dim(p.size(), q.size(), "js");
    std::vector<double> m(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
    const double kl_p = detail::kl_equal_mass(p.values(), m);
    const double kl_q = detail::kl_equal_mass(q.values(), m);
    return NatValue::finite(std::clamp(0.5 * (kl_p + kl_q), 0.0, kLn2));
}

/// H(p, q) = -sum p_i ln q_i. Flagged infinite when some p_i > 0 has q_i = 0.
inline NatValue cross_entropy(const ProbVec& p, const ProbVec& q) {
    detail::require_same_dim(p.size(), q.size(), "cross_entropy");
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        if (q[i] <= 0.0) return NatValue::inf();
        sum -= p[i] * std::log(q[i]);
    }
    return NatValue::finite(std::max(sum, 0.0));
}

/// Mean negative log-likelihood (nats per token) of a sequence of token log-probs.
inline double mean_nll(std::span<const double> token_logprobs) {
    if (token_logprobs.empty()) throw InvalidArgument("perplexity of an empty sequence");
    double sum = 0.0;
    for (std::size_t i = 0; i < token_logprobs.size(); ++i) {
        const double lp = token_logprobs[i];
        if (!std::isfinite(lp)) {
            throw InvalidArgument("non-finite log-prob at index " + std::to_string(i));
        }
        if (lp > 0.0) {
            throw InvalidArgument("positive log-prob at index " + std::to_string(i));
        }
        sum -= lp;
    }
    return sum / static_cast<double>(token_logprobs.size());
}

/// exp of the mean negative log-likelihood.
inline double perplexity(std::span<const double> token_logprobs) {
    return std::exp(mean_nll(token_logprobs));
}

} // namespace miub
