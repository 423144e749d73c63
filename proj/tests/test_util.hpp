// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <filesystem>
#include <random>
#include <string>

#include "miub/capture.hpp"

namespace miub::test {

/// Unique scratch directory, removed on destruction.
class TempDir {
public:
    TempDir() {
        static int counter = 0;
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("miub_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::string module_name(std::size_t m) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "layer%02zu.", m / 6);
    return buf + std::string(to_string(kAllSites[m % 6]));
}

/// Small seeded CaptureSet with Gaussian hidden states.
inline CaptureSet make_capture_set(std::size_t n_samples, std::size_t n_modules, std::size_t dim, std::uint64_t seed,
                                   bool with_logprobs) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    CaptureSet set;
    for (std::size_t s = 0; s < n_samples; ++s) {
        for (std::size_t m = 0; m < n_modules; ++m) {
            ModuleCapture c;
            c.sample_id = s;
            c.module_id = module_name(m);
            c.layer_index = static_cast<std::uint32_t>(m / 6);
            c.site = kAllSites[m % 6];
            for (std::size_t k = 0; k < dim; ++k) {
                c.h_base.push_back(nd(gen));
                c.h_adapted.push_back(c.h_base.back() + 0.1f * nd(gen));
            }
            set.captures.push_back(std::move(c));
        }
    }
    set.meta.model_name = "test-model";
    set.meta.n_params = 1000;
    set.meta.lora_rank = 4;
    set.meta.dataset_size = 16;
    set.meta.share_k = 1;
    set.meta.length_bin = "short";
    set.meta.seed = seed;
    set.meta.extra = {{"note", "x"}};
    if (with_logprobs) {
        std::vector<SampleLogprobs> lps;
        for (std::size_t s = 0; s < n_samples; ++s) lps.push_back({s, {-0.5 - static_cast<double>(s), -1.25}});
        set.token_logprobs = lps;
    }
    return set;
}

} // namespace miub::test
