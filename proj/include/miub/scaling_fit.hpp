// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * @file scaling_fit.hpp
 * @brief Fits MIUB(N, R, D) = A (N0/N)^alpha + B (R0/R)^beta + C (D0/D)^gamma.
 *
 * N0, R0, D0 are pinned to the smallest observed value on each axis; they are
 * redundant with A, B, C. A, B, C are fitted as logarithms so they stay
 * positive, exponents are unconstrained. The optimizer is damped least
 * squares ((J^T J + lambda I) delta = J^T r with lambda adapted per step),
 * restarted from a fixed 3x3x3 grid of initial exponents.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "miub/error.hpp"
#include "miub/io.hpp"

namespace miub {

struct ScalingObservation {
    double n_params = 0.0;
    double rank = 0.0;
    double data_size = 0.0;
    double miub = 0.0;
};

struct ScalingFitConfig {
    std::size_t max_iterations = 500; // per start
    double relative_tolerance = 1e-10;
    double gradient_tolerance = 1e-8;
    double initial_lambda = 1e-3;
    std::vector<double> start_exponents{0.1, 0.5, 1.0};
};

struct ScalingFitResult {
    double A = 0.0, B = 0.0, C = 0.0;
    double alpha = 0.0, beta = 0.0, gamma = 0.0;
    double n0 = 1.0, r0 = 1.0, d0 = 1.0;
    double rmse = 0.0;
    double r_squared = 0.0;
    double objective = 0.0;     // sum of squared residuals
    double gradient_norm = 0.0; // of the objective w.r.t. (ln A, ln B, ln C, alpha, beta, gamma)
    std::size_t n_iterations = 0;
    bool converged = false;
    std::vector<std::string> warnings;
};

struct Goodness {
    double rmse = 0.0;
    double r_squared = 0.0;
    std::vector<double> residuals; // observed - predicted
};

/// Evaluates the three-term law; each term is formed in log space.
inline double predict(const ScalingFitResult& fit, double n, double r, double d) {
    if (!(n > 0.0) || !(r > 0.0) || !(d > 0.0)) throw InvalidArgument("predict: n, r, d must be positive");
    if (fit.A < 0.0 || fit.B < 0.0 || fit.C < 0.0) throw InvalidArgument("predict: coefficients must be non-negative");
    auto term = [](double coef, double x0, double x, double expo) {
        if (coef == 0.0) return 0.0;
        return std::exp(std::log(coef) + expo * (std::log(x0) - std::log(x)));
    };
    return term(fit.A, fit.n0, n, fit.alpha) + term(fit.B, fit.r0, r, fit.beta) + term(fit.C, fit.d0, d, fit.gamma);
}

inline Goodness goodness(const ScalingFitResult& fit, std::span<const ScalingObservation> obs) {
    if (obs.empty()) throw InvalidArgument("goodness: no observations");
    Goodness g;
    double mean = 0.0;
    for (const auto& o : obs) mean += o.miub;
    mean /= static_cast<double>(obs.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (const auto& o : obs) {
        const double res = o.miub - predict(fit, o.n_params, o.rank, o.data_size);
        g.residuals.push_back(res);
        ss_res += res * res;
        ss_tot += (o.miub - mean) * (o.miub - mean);
    }
    g.rmse = std::sqrt(ss_res / static_cast<double>(obs.size()));
    // Constant targets leave R^2 undefined: 1 for an exact fit, else 0.
    g.r_squared = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : (ss_res == 0.0 ? 1.0 : 0.0);
    return g;
}

namespace detail {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

// Per-observation log-ratios ln(x0/x) for the three axes.
struct Design {
    std::vector<std::array<double, 3>> log_ratio;
    std::vector<double> y;
};

// Parameters: (ln A, ln B, ln C, alpha, beta, gamma).
inline void residuals_and_jacobian(const Design& d, const Vec6& theta, Eigen::VectorXd& res, Eigen::MatrixXd& jac) {
    const std::size_t m = d.y.size();
    res.resize(static_cast<Eigen::Index>(m));
    jac.resize(static_cast<Eigen::Index>(m), 6);
    for (std::size_t i = 0; i < m; ++i) {
        double pred = 0.0;
        for (int k = 0; k < 3; ++k) {
            const double t = std::exp(theta[k] + theta[k + 3] * d.log_ratio[i][k]);
            pred += t;
            jac(static_cast<Eigen::Index>(i), k) = t;
            jac(static_cast<Eigen::Index>(i), k + 3) = t * d.log_ratio[i][k];
        }
        res[static_cast<Eigen::Index>(i)] = pred - d.y[i];
    }
}

inline double objective(const Design& d, const Vec6& theta) {
    Eigen::VectorXd r;
    Eigen::MatrixXd j;
    residuals_and_jacobian(d, theta, r, j);
    return r.squaredNorm();
}

/// Analytic gradient of sum r_i^2; exposed for finite-difference checks.
inline Vec6 objective_gradient(const Design& d, const Vec6& theta) {
    Eigen::VectorXd r;
    Eigen::MatrixXd j;
    residuals_and_jacobian(d, theta, r, j);
    return 2.0 * j.transpose() * r;
}

inline Design make_design(std::span<const ScalingObservation> obs, double n0, double r0, double d0) {
    Design d;
    for (const auto& o : obs) {
        d.log_ratio.push_back({std::log(n0) - std::log(o.n_params), std::log(r0) - std::log(o.rank),
                               std::log(d0) - std::log(o.data_size)});
        d.y.push_back(o.miub);
    }
    return d;
}

// With exponents fixed the law is linear in (A, B, C); a ridge-regularized
// solve gives the starting coefficients, floored to stay positive.
inline Vec6 initial_theta(const Design& d, double a, double b, double g) {
    const auto m = static_cast<Eigen::Index>(d.y.size());
    Eigen::MatrixXd X(m, 3);
    Eigen::VectorXd y(m);
    double scale = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
        const auto& lr = d.log_ratio[static_cast<std::size_t>(i)];
        X(i, 0) = std::exp(a * lr[0]);
        X(i, 1) = std::exp(b * lr[1]);
        X(i, 2) = std::exp(g * lr[2]);
        y[i] = d.y[static_cast<std::size_t>(i)];
        scale = std::max(scale, std::abs(y[i]));
    }
    if (scale == 0.0) scale = 1.0;
    Eigen::Matrix3d G = X.transpose() * X;
    G += 1e-8 * G.trace() * Eigen::Matrix3d::Identity();
    Eigen::Vector3d coef = G.ldlt().solve(X.transpose() * y);
    const double floor = 1e-3 * scale;
    Vec6 theta;
    for (int k = 0; k < 3; ++k) theta[k] = std::log(std::max(coef[k], floor));
    theta[3] = a;
    theta[4] = b;
    theta[5] = g;
    return theta;
}

struct StartResult {
    Vec6 theta;
    double objective = 0.0;
    double gradient_norm = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
};

inline StartResult levenberg_marquardt(const Design& d, Vec6 theta, const ScalingFitConfig& cfg) {
    Eigen::VectorXd r;
    Eigen::MatrixXd J;
    residuals_and_jacobian(d, theta, r, J);
    double f = r.squaredNorm();
    double lambda = cfg.initial_lambda;
    StartResult out;
    std::size_t it = 0;
    for (; it < cfg.max_iterations; ++it) {
        const Vec6 grad = 2.0 * J.transpose() * r;
        if (grad.norm() < cfg.gradient_tolerance || f == 0.0) {
            out.converged = true;
            break;
        }
        const Mat6 JtJ = J.transpose() * J;
        const Vec6 Jtr = J.transpose() * r;
        bool accepted = false;
        while (lambda < 1e16) {
            const Mat6 lhs = JtJ + lambda * Mat6::Identity();
            const Vec6 step = lhs.ldlt().solve(-Jtr);
            const Vec6 trial = theta + step;
            Eigen::VectorXd r_new;
            Eigen::MatrixXd J_new;
            residuals_and_jacobian(d, trial, r_new, J_new);
            const double f_new = r_new.squaredNorm();
            if (std::isfinite(f_new) && f_new < f) {
                const double rel = (f - f_new) / f;
                theta = trial;
                r = std::move(r_new);
                J = std::move(J_new);
                f = f_new;
                lambda = std::max(lambda / 10.0, 1e-15);
                accepted = true;
                if (rel < cfg.relative_tolerance) out.converged = true;
                break;
            }
            lambda *= 10.0;
        }
        if (!accepted) {
            // No descent direction left at any damping: a stationary point up
            // to rounding.
            out.converged = true;
            ++it;
            break;
        }
        if (out.converged) {
            ++it;
            break;
        }
    }
    out.theta = theta;
    out.objective = f;
    out.gradient_norm = (2.0 * J.transpose() * r).norm();
    out.iterations = it;
    return out;
}

inline std::size_t distinct_count(std::span<const ScalingObservation> obs, double ScalingObservation::*field) {
    std::set<double> s;
    for (const auto& o : obs) s.insert(o.*field);
    return s.size();
}

} // namespace detail

inline ScalingFitResult fit_scaling_law(std::span<const ScalingObservation> obs, const ScalingFitConfig& cfg = {}) {
    if (obs.empty()) throw InvalidArgument("fit_scaling_law: no observations");
    for (const auto& o : obs) {
        if (!(o.n_params > 0.0) || !(o.rank > 0.0) || !(o.data_size > 0.0) || !std::isfinite(o.n_params) ||
            !std::isfinite(o.rank) || !std::isfinite(o.data_size)) {
            throw InvalidArgument("fit_scaling_law: n_params, rank and data_size must be positive and finite");
        }
        if (!std::isfinite(o.miub)) throw InvalidArgument("fit_scaling_law: non-finite miub");
    }
    const std::size_t dn = detail::distinct_count(obs, &ScalingObservation::n_params);
    const std::size_t dr = detail::distinct_count(obs, &ScalingObservation::rank);
    const std::size_t dd = detail::distinct_count(obs, &ScalingObservation::data_size);
    if (dn < 2 && dr < 2 && dd < 2) {
        throw InvalidArgument("fit_scaling_law: degenerate design, every observation shares the same (N, R, D)");
    }

    ScalingFitResult best;
    best.objective = std::numeric_limits<double>::infinity();
    auto min_of = [&](double ScalingObservation::*field) {
        double v = std::numeric_limits<double>::infinity();
        for (const auto& o : obs) v = std::min(v, o.*field);
        return v;
    };
    best.n0 = min_of(&ScalingObservation::n_params);
    best.r0 = min_of(&ScalingObservation::rank);
    best.d0 = min_of(&ScalingObservation::data_size);
    const auto design = detail::make_design(obs, best.n0, best.r0, best.d0);

    std::size_t total_iterations = 0;
    detail::StartResult winner;
    winner.objective = std::numeric_limits<double>::infinity();
    for (double a : cfg.start_exponents) {
        for (double b : cfg.start_exponents) {
            for (double g : cfg.start_exponents) {
                auto sr = detail::levenberg_marquardt(design, detail::initial_theta(design, a, b, g), cfg);
                total_iterations += sr.iterations;
                if (sr.objective < winner.objective) winner = sr; // ties keep the earlier start
            }
        }
    }

    best.A = std::exp(winner.theta[0]);
    best.B = std::exp(winner.theta[1]);
    best.C = std::exp(winner.theta[2]);
    best.alpha = winner.theta[3];
    best.beta = winner.theta[4];
    best.gamma = winner.theta[5];
    best.objective = winner.objective;
    best.gradient_norm = winner.gradient_norm;
    best.n_iterations = total_iterations;
    best.converged = winner.converged;
    if (obs.size() < 6) best.warnings.push_back("fewer than 6 observations; fit is underdetermined");
    if (dn < 2) best.warnings.push_back("alpha is unidentifiable: n_params takes a single value");
    if (dr < 2) best.warnings.push_back("beta is unidentifiable: rank takes a single value");
    if (dd < 2) best.warnings.push_back("gamma is unidentifiable: data_size takes a single value");
    const auto g = goodness(best, obs);
    best.rmse = g.rmse;
    best.r_squared = g.r_squared;
    return best;
}

inline ScalingFitResult fit_scaling_law(const std::vector<ScalingObservation>& obs, const ScalingFitConfig& cfg = {}) {
    return fit_scaling_law(std::span<const ScalingObservation>(obs), cfg);
}

// ---------------------------------------------------------------------------
// Interchange formats

inline constexpr const char* kScalingCsvHeader = "n_params,rank,data_size,miub";

/// Parses the scaling CSV. Columns are located by header name; extra columns are ignored.
inline std::vector<ScalingObservation> parse_scaling_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        for (char ch : s) {
            if (ch == ',') {
                out.push_back(cur);
                cur.clear();
            } else if (ch != '\r') {
                cur += ch;
            }
        }
        out.push_back(cur);
        return out;
    };
    if (!std::getline(in, line)) throw DataError("scaling CSV is empty");
    const auto header = split(line);
    auto col = [&](const std::string& name) {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw DataError("scaling CSV lacks column '" + name + "'");
    };
    const std::size_t cn = col("n_params"), cr = col("rank"), cd = col("data_size"), cm = col("miub");
    std::vector<ScalingObservation> obs;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto f = split(line);
        if (f.size() < header.size()) throw DataError("scaling CSV line " + std::to_string(lineno) + ": too few fields");
        obs.push_back({io::parse_double(f[cn], "n_params"), io::parse_double(f[cr], "rank"),
                       io::parse_double(f[cd], "data_size"), io::parse_double(f[cm], "miub")});
    }
    return obs;
}

inline std::string scaling_csv(std::span<const ScalingObservation> obs) {
    std::string out = std::string(kScalingCsvHeader) + "\n";
    for (const auto& o : obs) {
        out += io::format_double(o.n_params) + "," + io::format_double(o.rank) + "," + io::format_double(o.data_size) +
               "," + io::format_double(o.miub) + "\n";
    }
    return out;
}

inline nlohmann::ordered_json fit_to_json(const ScalingFitResult& f, const ScalingFitConfig& cfg) {
    nlohmann::ordered_json j;
    j["A"] = f.A;
    j["B"] = f.B;
    j["C"] = f.C;
    j["alpha"] = f.alpha;
    j["beta"] = f.beta;
    j["gamma"] = f.gamma;
    j["n0"] = f.n0;
    j["r0"] = f.r0;
    j["d0"] = f.d0;
    j["rmse"] = f.rmse;
    j["r_squared"] = f.r_squared;
    j["objective"] = f.objective;
    j["gradient_norm"] = f.gradient_norm;
    j["n_iterations"] = f.n_iterations;
    j["converged"] = f.converged;
    j["warnings"] = f.warnings;
    j["config"] = {{"max_iterations", cfg.max_iterations},
                   {"relative_tolerance", cfg.relative_tolerance},
                   {"gradient_tolerance", cfg.gradient_tolerance},
                   {"initial_lambda", cfg.initial_lambda},
                   {"start_exponents", cfg.start_exponents}};
    return j;
}

} // namespace miub
