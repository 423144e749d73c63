// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "miub/scaling_fit.hpp"

namespace miub {
namespace {

ScalingFitResult truth() {
    ScalingFitResult t;
    t.A = 2.0;
    t.alpha = 0.5;
    t.B = 1.0;
    t.beta = 0.3;
    t.C = 0.5;
    t.gamma = 0.7;
    t.n0 = 1e5;
    t.r0 = 2;
    t.d0 = 16;
    return t;
}

std::vector<ScalingObservation> synthetic_grid(double scale = 1.0) {
    const auto t = truth();
    std::vector<ScalingObservation> obs;
    for (double n : {1e5, 2e5, 4e5, 8e5})
        for (double r : {2.0, 4.0, 8.0, 16.0})
            for (double d : {16.0, 32.0, 64.0, 128.0}) obs.push_back({n, r, d, scale * predict(t, n, r, d)});
    return obs;
}

TEST(Predict, Examples) {
    ScalingFitResult z;
    EXPECT_EQ(predict(z, 3, 4, 5), 0.0);

    ScalingFitResult one;
    one.A = 1;
    one.alpha = 1;
    one.n0 = 123;
    EXPECT_DOUBLE_EQ(predict(one, 123, 7, 9), 1.0);

    ScalingFitResult f;
    f.A = 2;
    f.alpha = 0.5;
    f.n0 = 100;
    f.B = 1;
    f.beta = 1;
    f.r0 = 8;
    EXPECT_NEAR(predict(f, 400, 8, 1), 2.0, 1e-15);

    EXPECT_THROW(predict(f, 0, 1, 1), InvalidArgument);
    EXPECT_THROW(predict(f, 1, -1, 1), InvalidArgument);
}

TEST(Predict, MonotoneInEachAxis) {
    const auto t = truth();
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> u(0.5, 3.0);
    for (int i = 0; i < 200; ++i) {
        const double n = 1e5 * u(gen), r = 2 * u(gen), d = 16 * u(gen);
        const double y = predict(t, n, r, d);
        EXPECT_LE(predict(t, n * 1.01, r, d), y);
        EXPECT_LE(predict(t, n, r * 1.01, d), y);
        EXPECT_LE(predict(t, n, r, d * 1.01), y);
    }
}

TEST(Fit, SyntheticRecovery) {
    const auto obs = synthetic_grid();
    const auto fit = fit_scaling_law(obs);
    EXPECT_TRUE(fit.converged);
    EXPECT_LT(fit.rmse, 1e-8);
    EXPECT_NEAR(fit.A, 2.0, 1e-3);
    EXPECT_NEAR(fit.alpha, 0.5, 1e-3);
    EXPECT_NEAR(fit.B, 1.0, 1e-3);
    EXPECT_NEAR(fit.beta, 0.3, 1e-3);
    EXPECT_NEAR(fit.C, 0.5, 1e-3);
    EXPECT_NEAR(fit.gamma, 0.7, 1e-3);
    EXPECT_EQ(fit.n0, 1e5);
    EXPECT_EQ(fit.r0, 2.0);
    EXPECT_EQ(fit.d0, 16.0);
    EXPECT_TRUE(fit.warnings.empty());
    const auto g = goodness(fit, obs);
    for (double r : g.residuals) EXPECT_LT(std::abs(r), 1e-7);
    EXPECT_NEAR(g.r_squared, 1.0, 1e-12);
}

TEST(Fit, GradientMatchesFiniteDifferences) {
    const auto obs = synthetic_grid();
    const auto design = detail::make_design(obs, 1e5, 2, 16);
    detail::Vec6 theta;
    theta << std::log(1.5), std::log(0.7), std::log(0.9), 0.4, 0.6, 0.2;
    const auto grad = detail::objective_gradient(design, theta);
    for (int k = 0; k < 6; ++k) {
        const double h = 1e-6;
        auto tp = theta, tm = theta;
        tp[k] += h;
        tm[k] -= h;
        const double fd = (detail::objective(design, tp) - detail::objective(design, tm)) / (2 * h);
        EXPECT_LT(std::abs(fd - grad[k]) / std::abs(grad[k]), 1e-5) << "parameter " << k;
    }

    // At the converged fit both vanish.
    const auto fit = fit_scaling_law(obs);
    detail::Vec6 best;
    best << std::log(fit.A), std::log(fit.B), std::log(fit.C), fit.alpha, fit.beta, fit.gamma;
    const auto g = detail::objective_gradient(design, best);
    for (int k = 0; k < 6; ++k) {
        const double h = 1e-6;
        auto tp = best, tm = best;
        tp[k] += h;
        tm[k] -= h;
        const double fd = (detail::objective(design, tp) - detail::objective(design, tm)) / (2 * h);
        EXPECT_LT(std::abs(fd - g[k]), 1e-9) << "parameter " << k;
    }
    EXPECT_LE(fit.gradient_norm, 1e-8);
}

TEST(Fit, PermutationInvariant) {
    auto obs = synthetic_grid();
    for (auto& o : obs) o.miub *= 1.0 + 0.01 * std::sin(o.n_params * o.rank + o.data_size); // noisy, non-zero optimum
    const auto base = fit_scaling_law(obs);
    std::mt19937_64 gen(9);
    for (int i = 0; i < 3; ++i) {
        std::shuffle(obs.begin(), obs.end(), gen);
        EXPECT_NEAR(fit_scaling_law(obs).objective, base.objective, 1e-9);
    }
}

TEST(Fit, RescalingScalesCoefficientsOnly) {
    const auto a = fit_scaling_law(synthetic_grid());
    const double c = 3.0;
    const auto b = fit_scaling_law(synthetic_grid(c));
    EXPECT_NEAR(b.A / a.A, c, 1e-6 * c);
    EXPECT_NEAR(b.B / a.B, c, 1e-6 * c);
    EXPECT_NEAR(b.C / a.C, c, 1e-6 * c);
    EXPECT_NEAR(b.alpha, a.alpha, 1e-6);
    EXPECT_NEAR(b.beta, a.beta, 1e-6);
    EXPECT_NEAR(b.gamma, a.gamma, 1e-6);
}

TEST(Fit, ConstantDataIsAbsorbed) {
    auto obs = synthetic_grid();
    for (auto& o : obs) o.miub = 0.75;
    const auto fit = fit_scaling_law(obs);
    EXPECT_LT(fit.rmse, 1e-6);
    EXPECT_NEAR(fit.A + fit.B + fit.C, 0.75, 1e-6);
    // Each term is flat: either its exponent is ~0 or its coefficient is ~0.
    EXPECT_LT(std::min(std::abs(fit.alpha), fit.A), 1e-3);
    EXPECT_LT(std::min(std::abs(fit.beta), fit.B), 1e-3);
    EXPECT_LT(std::min(std::abs(fit.gamma), fit.C), 1e-3);
}

TEST(Fit, SingleAxisWarnsButSucceeds) {
    std::vector<ScalingObservation> obs;
    for (double n : {1e5, 2e5, 4e5, 8e5, 1.6e6, 3.2e6}) obs.push_back({n, 8, 16, 0.2 + 2.0 * std::pow(1e5 / n, 0.5)});
    const auto fit = fit_scaling_law(obs);
    EXPECT_LT(fit.rmse, 1e-8);
    EXPECT_NEAR(fit.alpha, 0.5, 1e-3);
    EXPECT_NEAR(fit.A, 2.0, 1e-3);
    EXPECT_NEAR(fit.B + fit.C, 0.2, 1e-6);
    ASSERT_EQ(fit.warnings.size(), 2u);
    EXPECT_NE(fit.warnings[0].find("beta"), std::string::npos);
    EXPECT_NE(fit.warnings[1].find("gamma"), std::string::npos);
}

TEST(Fit, RejectsDegenerateAndInvalid) {
    std::vector<ScalingObservation> same(8, {1e5, 8, 16, 0.3});
    EXPECT_THROW(fit_scaling_law(same), InvalidArgument);
    EXPECT_THROW(fit_scaling_law(std::vector<ScalingObservation>{}), InvalidArgument);
    auto obs = synthetic_grid();
    obs[3].rank = 0;
    EXPECT_THROW(fit_scaling_law(obs), InvalidArgument);
    obs = synthetic_grid();
    obs[3].miub = NAN;
    EXPECT_THROW(fit_scaling_law(obs), InvalidArgument);
}

TEST(Fit, NonConvergenceIsReported) {
    ScalingFitConfig cfg;
    cfg.max_iterations = 1;
    auto obs = synthetic_grid();
    const auto fit = fit_scaling_law(obs, cfg);
    EXPECT_FALSE(fit.converged);
}

TEST(Goodness, Definitions) {
    const auto obs = synthetic_grid();
    const auto g = goodness(truth(), obs);
    EXPECT_LT(g.rmse, 1e-15);
    EXPECT_NEAR(g.r_squared, 1.0, 1e-15);

    double mean = 0;
    for (const auto& o : obs) mean += o.miub;
    mean /= static_cast<double>(obs.size());
    ScalingFitResult flat;
    flat.A = mean; // alpha = 0 makes the law a constant
    EXPECT_NEAR(goodness(flat, obs).r_squared, 0.0, 1e-12);
    EXPECT_THROW(goodness(flat, std::vector<ScalingObservation>{}), InvalidArgument);
}

TEST(ScalingCsv, RoundTrip) {
    const auto obs = synthetic_grid();
    const auto back = parse_scaling_csv(scaling_csv(obs));
    ASSERT_EQ(back.size(), obs.size());
    for (std::size_t i = 0; i < obs.size(); ++i) {
        EXPECT_EQ(back[i].n_params, obs[i].n_params);
        EXPECT_EQ(back[i].miub, obs[i].miub);
    }
    EXPECT_THROW(parse_scaling_csv("n_params,rank,miub\n1,2,3\n"), DataError);
    EXPECT_THROW(parse_scaling_csv("n_params,rank,data_size,miub\n1,2,x,3\n"), DataError);
    const auto reordered = parse_scaling_csv("miub,extra,data_size,rank,n_params\n0.5,z,16,4,1000\n");
    ASSERT_EQ(reordered.size(), 1u);
    EXPECT_EQ(reordered[0].rank, 4.0);
}

} // namespace
} // namespace miub
