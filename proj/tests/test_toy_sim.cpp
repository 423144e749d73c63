// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "miub/toy_sim.hpp"
#include "test_util.hpp"

namespace miub::toy {
namespace {

ToySimConfig tiny() {
    ToySimConfig c;
    c.layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ffn = 16;
    c.vocab = 8;
    c.rank = 2;
    c.steps = 20;
    c.lr = 0.05;
    c.train_samples = 16;
    c.capture_samples = 4;
    return c;
}

ToySimConfig small() {
    ToySimConfig c;
    c.layers = 4;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ffn = 32;
    c.vocab = 16;
    c.rank = 4;
    c.steps = 30;
    c.lr = 0.05;
    c.train_samples = 32;
    c.capture_samples = 6;
    c.pretrain_steps = 10;
    return c;
}

std::size_t per_layer_params(const ToySimConfig& c) {
    return 4u * c.d_model * c.d_model + 2u * c.d_model * c.d_ffn;
}

std::size_t embedding_params(const ToySimConfig& c) {
    return static_cast<std::size_t>(2 * c.vocab * c.d_model + sequence_length(LengthBin::Long) * c.d_model);
}

TEST(Config, Validation) {
    EXPECT_NO_THROW(ToySimConfig{}.validate());
    auto bad = [](auto mutate) {
        ToySimConfig c;
        mutate(c);
        EXPECT_THROW(c.validate(), InvalidArgument);
    };
    bad([](ToySimConfig& c) { c.layers = 1; });
    bad([](ToySimConfig& c) { c.n_heads = 3; });
    bad([](ToySimConfig& c) { c.rank = 0; });
    bad([](ToySimConfig& c) { c.share_k = 3; });
    bad([](ToySimConfig& c) { c.lr = 0; });
    bad([](ToySimConfig& c) { c.steps = -1; });
    EXPECT_THROW(length_bin_from_string("huge"), InvalidArgument);
}

TEST(BuildModel, SitesAndSharing) {
    ToySimConfig c;
    const auto m1 = build_model(c);
    EXPECT_EQ(m1.lora.size() * kSitesPerLayer, 48u);
    for (int l = 0; l < 8; ++l) EXPECT_EQ(m1.canonical[static_cast<std::size_t>(l)], l);
    for (std::size_t i = 0; i < m1.base.size(); ++i)
        for (std::size_t j = i + 1; j < m1.base.size(); ++j) EXPECT_NE(m1.base[i].get(), m1.base[j].get());
    for (const auto& ll : m1.lora)
        for (const auto& p : ll.site) EXPECT_TRUE(p.b.isZero(0.0));

    const std::size_t full = embedding_params(c) + 8 * per_layer_params(c);
    EXPECT_EQ(effective_base_params(m1), full);

    c.share_k = 4;
    const auto m4 = build_model(c);
    EXPECT_EQ(effective_base_params(m4), full - 3 * per_layer_params(c));
    for (int l = 4; l < 8; ++l) EXPECT_EQ(m4.base[static_cast<std::size_t>(l)].get(), m4.base[4].get());

    c.share_k = 2;
    const auto m2 = build_model(c);
    EXPECT_EQ(m2.base[4].get(), m2.base[5].get());
    EXPECT_EQ(m2.base[6].get(), m2.base[7].get());
    EXPECT_NE(m2.base[5].get(), m2.base[6].get());
    EXPECT_EQ(effective_base_params(m2), full - 2 * per_layer_params(c));
    EXPECT_EQ(lora_param_count(m1), lora_param_count(m4));
}

TEST(BuildModel, Determinism) {
    const auto a = build_model(ToySimConfig{}), b = build_model(ToySimConfig{});
    EXPECT_EQ(base_checksum(a), base_checksum(b));
    EXPECT_EQ(lora_checksum(a), lora_checksum(b));
    ToySimConfig other;
    other.seed = 43;
    EXPECT_NE(base_checksum(build_model(other)), base_checksum(a));
}

TEST(ApplyLayerSharing, IdentityAndRejection) {
    auto m = build_model(tiny());
    const auto sample = generate_synthetic_task(1, LengthBin::Short, 1, 8)[0];
    const auto tokens = sample.input();
    const Mat before = forward(m, tokens).logits;
    apply_layer_sharing(m, 1);
    EXPECT_EQ(forward(m, tokens).logits, before);
    ToySimConfig c;
    auto big = build_model(c);
    EXPECT_THROW(apply_layer_sharing(big, 3), InvalidArgument);
}

TEST(SyntheticTask, Properties) {
    const auto a = generate_synthetic_task(5, LengthBin::Short, 640);
    const auto b = generate_synthetic_task(5, LengthBin::Short, 640);
    std::map<int, int> label_counts;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].tokens, b[i].tokens);
        ASSERT_EQ(a[i].tokens.size(), 16u);
        const int label = a[i].label();
        const int query = a[i].tokens[14];
        bool found = false;
        for (std::size_t k = 0; k + 1 < 14; k += 2) {
            if (a[i].tokens[k] == query) {
                EXPECT_EQ(a[i].tokens[k + 1], label); // every occurrence of the key maps to the label
                found = true;
            }
        }
        EXPECT_TRUE(found);
        ++label_counts[label];
    }
    const double expected = 640.0 / 32.0;
    EXPECT_EQ(label_counts.size(), 32u);
    for (const auto& [label, n] : label_counts) {
        EXPECT_GE(label, 32);
        EXPECT_LE(std::abs(n - expected), 0.1 * expected);
    }
    EXPECT_EQ(generate_synthetic_task(5, LengthBin::Medium, 1)[0].tokens.size(), 48u);
    EXPECT_EQ(generate_synthetic_task(5, LengthBin::Long, 1)[0].tokens.size(), 96u);
    EXPECT_THROW(generate_synthetic_task(5, LengthBin::Short, 0), InvalidArgument);
}

TEST(SyntheticTask, TargetsAreValuePositions) {
    const auto s = generate_synthetic_task(8, LengthBin::Short, 1)[0];
    const auto t = s.targets();
    ASSERT_EQ(t.size(), 8u);
    for (std::size_t i = 0; i < t.size(); ++i) {
        EXPECT_EQ(t[i].position, static_cast<int>(2 * i));
        EXPECT_EQ(t[i].token, s.tokens[2 * i + 1]);
    }
    EXPECT_EQ(t.back().position, 14);
    EXPECT_EQ(t.back().token, s.label());
}

TEST(Loss, MatchesLogSoftmaxMean) {
    auto m = build_model(tiny());
    const auto s = generate_synthetic_task(2, LengthBin::Short, 1, 8)[0];
    const auto fc = forward(m, s.input());
    const auto targets = s.targets();
    double want = 0.0;
    for (const auto& t : targets) {
        const Vec row = fc.logits.row(t.position).transpose();
        double z = 0.0;
        for (Eigen::Index k = 0; k < row.size(); ++k) z += std::exp(row[k]);
        want += std::log(z) - row[t.token];
    }
    want /= static_cast<double>(targets.size());
    Mat dl;
    EXPECT_NEAR(loss_and_grad(fc, targets, &dl), want, 1e-12);
    // Each supervised row of dlogits sums to zero; unsupervised rows are zero.
    for (Eigen::Index r = 0; r < dl.rows(); ++r) EXPECT_NEAR(dl.row(r).sum(), 0.0, 1e-15);
    EXPECT_EQ(dl.row(1).cwiseAbs().sum(), 0.0);
    EXPECT_THROW(loss_and_grad(fc, std::vector<Target>{}, nullptr), InvalidArgument);
    EXPECT_THROW(loss_and_grad(fc, std::vector<Target>{{99, 0}}, nullptr), InvalidArgument);
}

// Central differences on the scalar loss of one sample.
struct GradCase {
    Mat* param;
    Eigen::Index index;
    double analytic;
};

TEST(Backward, LoraGradientsMatchFiniteDifferences) {
    auto m = build_model(tiny());
    Rng rng(99);
    for (auto& ll : m.lora)
        for (auto& p : ll.site) p.b = gaussian(rng, static_cast<int>(p.b.rows()), static_cast<int>(p.b.cols()), 0.5);
    const auto sample = generate_synthetic_task(3, LengthBin::Short, 1, 8)[0];
    auto grads = zero_lora_grads(m);
    Mat dl;
    const auto fc = forward(m, sample.input());
    loss_and_grad(fc, sample.targets(), &dl);
    backward(m, fc, dl, grads);

    std::vector<GradCase> cases;
    std::mt19937_64 pick(2024);
    for (int i = 0; i < 20; ++i) {
        const auto l = static_cast<std::size_t>(pick() % m.lora.size());
        const auto s = static_cast<std::size_t>(pick() % kSitesPerLayer);
        const bool use_a = (i % 2) == 0;
        Mat& p = use_a ? m.lora[l].site[s].a : m.lora[l].site[s].b;
        const Mat& g = use_a ? grads[l].site[s].a : grads[l].site[s].b;
        const auto idx = static_cast<Eigen::Index>(pick() % static_cast<std::uint64_t>(p.size()));
        cases.push_back({&p, idx, g.data()[idx]});
    }
    for (const auto& gc : cases) {
        const double h = 1e-5;
        const double orig = gc.param->data()[gc.index];
        gc.param->data()[gc.index] = orig + h;
        const double lp = loss_and_grad(forward(m, sample.input()), sample.targets(), nullptr);
        gc.param->data()[gc.index] = orig - h;
        const double lm = loss_and_grad(forward(m, sample.input()), sample.targets(), nullptr);
        gc.param->data()[gc.index] = orig;
        const double fd = (lp - lm) / (2 * h);
        const double denom = std::max(std::abs(fd), 1e-8);
        EXPECT_LT(std::abs(fd - gc.analytic) / denom, 1e-4) << "fd " << fd << " analytic " << gc.analytic;
    }
}

TEST(Backward, BaseGradientsMatchFiniteDifferences) {
    auto m = build_model(tiny());
    const auto sample = generate_synthetic_task(4, LengthBin::Short, 1, 8)[0];
    auto lg = zero_lora_grads(m);
    auto bg = zero_base_grads(m);
    Mat dl;
    const auto fc = forward(m, sample.input());
    loss_and_grad(fc, sample.targets(), &dl);
    backward(m, fc, dl, lg, &bg);
    std::mt19937_64 pick(7);
    for (int i = 0; i < 12; ++i) {
        const auto l = static_cast<std::size_t>(pick() % 2);
        const auto s = static_cast<std::size_t>(pick() % kSitesPerLayer);
        LayerWeights w = *m.base[l];
        const auto idx = static_cast<Eigen::Index>(pick() % static_cast<std::uint64_t>(w.w[s].size()));
        const double h = 1e-5, orig = w.w[s].data()[idx];
        auto eval = [&](double v) {
            LayerWeights tmp = w;
            tmp.w[s].data()[idx] = v;
            auto mm = m;
            mm.base[l] = std::make_shared<const LayerWeights>(tmp);
            return loss_and_grad(forward(mm, sample.input()), sample.targets(), nullptr);
        };
        const double fd = (eval(orig + h) - eval(orig - h)) / (2 * h);
        const double an = bg[l].w[s].data()[idx];
        EXPECT_LT(std::abs(fd - an) / std::max(std::abs(fd), 1e-8), 1e-4) << "fd " << fd << " analytic " << an;
    }
}

TEST(Training, StepsZeroKeepsLoss) {
    auto c = tiny();
    c.steps = 0;
    auto m = build_model(c);
    const auto st = train_lora(m, training_set(c), c);
    EXPECT_EQ(st.final_loss, st.initial_loss);
    EXPECT_TRUE(st.step_losses.empty());
}

TEST(Training, FrozenBaseAndLossDecrease) {
    const auto c = small();
    auto m = prepare_model(c);
    const auto before = base_checksum(m);
    const auto lora_before = lora_checksum(m);
    const auto st = train_lora(m, training_set(c), c);
    EXPECT_EQ(base_checksum(m), before);
    EXPECT_NE(lora_checksum(m), lora_before);
    EXPECT_LT(st.final_loss, st.initial_loss);
    for (double l : st.step_losses) EXPECT_TRUE(std::isfinite(l));
    EXPECT_EQ(st.step_losses.size(), static_cast<std::size_t>(c.steps));
}

TEST(Training, DefaultConfigLossDecreaseAndAnchor) {
    ToySimConfig c;
    c.rank = 8;
    c.share_k = 1;
    const auto cell = run_cell(c);
    EXPECT_LT(cell.train.final_loss, cell.train.initial_loss);
    // Regression anchor for seed 42, rank 8, share 1, short.
    EXPECT_NEAR(cell.report.aggregate_m, 3.1866134884558624e-4, 3.2e-10);
    EXPECT_EQ(cell.observation.n_params, 407552.0);
}

TEST(Training, DivergenceReportsStep) {
    auto c = tiny();
    c.lr = 1e300;
    auto m = build_model(c);
    try {
        train_lora(m, training_set(c), c);
        FAIL() << "expected divergence";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
}

TEST(Pretraining, SharedLayersReferenceOneWeightSet) {
    auto c = small();
    c.share_k = 2;
    const auto m = prepare_model(c);
    EXPECT_EQ(m.base[2].get(), m.base[3].get());
    auto u = c;
    u.share_k = 1;
    const auto mu = prepare_model(u);
    // Same pretrained weights, then tied: layer 2 is the group's canonical layer.
    EXPECT_EQ(m.base[2].get(), mu.base[2].get());
    EXPECT_NE(base_checksum(mu), base_checksum(build_model(u)));
    EXPECT_EQ(effective_base_params(m), effective_base_params(mu) - per_layer_params(c));
}

TEST(Capture, UntrainedCapturesAreIdentical) {
    auto c = small();
    c.steps = 0;
    auto m = prepare_model(c);
    const auto set = capture_hidden(m, capture_set_samples(c));
    EXPECT_EQ(set.captures.size(), static_cast<std::size_t>(c.capture_samples * 6 * c.layers));
    for (const auto& cap : set.captures) EXPECT_EQ(cap.h_base, cap.h_adapted);
    EXPECT_EQ(aggregate(set).aggregate_m, 0.0);
    EXPECT_EQ(set.meta.n_params, static_cast<double>(effective_base_params(m)));
    EXPECT_EQ(set.meta.lora_rank, c.rank);
    EXPECT_EQ(set.meta.dataset_size, 16.0);
    EXPECT_EQ(set.meta.seed, c.seed);
}

TEST(Capture, RoundTripGivesIdenticalMetrics) {
    const auto cell = run_cell(small());
    test::TempDir dir;
    write_capture_set(cell.captures, dir.path());
    const auto back = read_capture_set(dir.path());
    EXPECT_EQ(back, cell.captures);
    EXPECT_EQ(report_csv_row(aggregate(back)), report_csv_row(cell.report));
}

TEST(Grid, DeterministicAndOrdered) {
    std::vector<ToySimConfig> grid;
    for (int share : {2, 1}) {
        for (int rank : {2, 4}) {
            auto c = small();
            c.share_k = share;
            c.rank = rank;
            grid.push_back(c);
        }
    }
    const auto a = run_scaling_grid(grid), b = run_scaling_grid(grid);
    ASSERT_EQ(a.size(), 4u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        ASSERT_TRUE(a[i].ok) << a[i].error;
        EXPECT_EQ(a[i].config.rank, grid[i].rank);
        EXPECT_EQ(a[i].captures, b[i].captures);
        EXPECT_EQ(a[i].train.step_losses, b[i].train.step_losses);
        EXPECT_EQ(report_csv_row(a[i].report), report_csv_row(b[i].report));
        EXPECT_GT(a[i].report.aggregate_m, 0.0);
    }
    EXPECT_LT(a[0].observation.n_params, a[2].observation.n_params);
    EXPECT_EQ(observations(a).size(), 4u);
}

TEST(Grid, FailedCellIsRecordedAndSkipped) {
    auto good = tiny();
    auto bad = tiny();
    bad.lr = 1e300;
    const auto cells = run_scaling_grid({good, bad, good});
    ASSERT_EQ(cells.size(), 3u);
    EXPECT_TRUE(cells[0].ok);
    EXPECT_FALSE(cells[1].ok);
    EXPECT_NE(cells[1].error.find("step"), std::string::npos);
    EXPECT_TRUE(cells[2].ok);
    EXPECT_EQ(observations(cells).size(), 2u);
    EXPECT_THROW(run_scaling_grid({}), InvalidArgument);
}

} // namespace
} // namespace miub::toy
