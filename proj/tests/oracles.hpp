// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Test-only reference computations. Straight textbook sums in long double,
// sharing no code with the library.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

using ld = long double;

inline ld kl(const std::vector<double>& p, const std::vector<double>& q) {
    ld s = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0) s += static_cast<ld>(p[i]) * std::log(static_cast<ld>(p[i]) / static_cast<ld>(q[i]));
    return s;
}

inline ld js(const std::vector<double>& p, const std::vector<double>& q) {
    std::vector<ld> m(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) m[i] = (static_cast<ld>(p[i]) + static_cast<ld>(q[i])) / 2;
    ld a = 0, b = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0) a += p[i] * std::log(static_cast<ld>(p[i]) / m[i]);
        if (q[i] > 0) b += q[i] * std::log(static_cast<ld>(q[i]) / m[i]);
    }
    return (a + b) / 2;
}

inline ld entropy(const std::vector<double>& p) {
    ld s = 0;
    for (double v : p)
        if (v > 0) s -= v * std::log(static_cast<ld>(v));
    return s;
}

// joint[i][j], rows = O, cols = L.
inline std::vector<ld> product_of_marginals(const std::vector<std::vector<double>>& joint) {
    const std::size_t n = joint.size(), m = joint[0].size();
    std::vector<ld> po(n, 0), pl(m, 0), out;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            po[i] += joint[i][j];
            pl[j] += joint[i][j];
        }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.push_back(po[i] * pl[j]);
    return out;
}

inline ld mutual_information(const std::vector<std::vector<double>>& joint) {
    const auto prod = product_of_marginals(joint);
    ld s = 0;
    std::size_t k = 0;
    for (const auto& row : joint)
        for (double v : row) {
            if (v > 0) s += v * std::log(static_cast<ld>(v) / prod[k]);
            ++k;
        }
    return s;
}

inline ld miub(const std::vector<std::vector<double>>& joint) {
    const auto prod = product_of_marginals(joint);
    ld a = 0, b = 0;
    std::size_t k = 0;
    for (const auto& row : joint)
        for (double v : row) {
            const ld m = (static_cast<ld>(v) + prod[k]) / 2;
            if (v > 0) a += v * std::log(static_cast<ld>(v) / m);
            if (prod[k] > 0) b += prod[k] * std::log(prod[k] / m);
            ++k;
        }
    return std::log(2.0L) * (a + b) / 2;
}

// Flat Dirichlet(1) draw via normalized exponentials.
inline std::vector<double> dirichlet(std::mt19937_64& gen, std::size_t dim) {
    std::vector<double> v(dim);
    double s = 0;
    for (auto& x : v) {
        double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
        if (u <= 0) u = 0x1.0p-53;
        x = -std::log(u);
        s += x;
    }
    for (auto& x : v) x /= s;
    return v;
}

inline double rel_err(long double got, long double want) {
    if (want == 0) return static_cast<double>(std::fabs(got));
    return static_cast<double>(std::fabs(got - want) / std::fabs(want));
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

} // namespace oracle
