// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * @file capture.hpp
 * @brief Paired base/adapted hidden-state captures and their on-disk format.
 *
 * A capture directory holds:
 *
 *   manifest.jsonl  header line {"format":"miub-manifest","version":1,"meta":{...}}
 *                   then one record per capture:
 *                   {"sample_id","module_id","layer","site","dim","base_offset","adapted_offset"}
 *   captures.bin    8-byte magic "MIUBCAP1", then little-endian f32 vectors.
 *                   Offsets in the manifest are absolute byte positions.
 *   logprobs.jsonl  optional, {"sample_id": int, "logprobs": [...]} per line (nats, <= 0)
 *
 * Every manifest line, including the last, ends in '\n'. The vectors named by
 * the manifest must tile the blob after the magic exactly, which lets the
 * reader reject a manifest or blob that lost its tail.
 *
 * h_base is the frozen dense output before the LoRA delta is added;
 * h_adapted is the residual sum.
 */

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "miub/error.hpp"
#include "miub/io.hpp"

namespace miub {

namespace fs = std::filesystem;

enum class Site { AttnQ, AttnK, AttnV, AttnO, FfnUp, FfnDown };

inline constexpr Site kAllSites[] = {Site::AttnQ, Site::AttnK, Site::AttnV,
                                     Site::AttnO, Site::FfnUp, Site::FfnDown};

inline std::string_view to_string(Site s) {
    switch (s) {
    case Site::AttnQ: return "attn_q";
    case Site::AttnK: return "attn_k";
    case Site::AttnV: return "attn_v";
    case Site::AttnO: return "attn_o";
    case Site::FfnUp: return "ffn_up";
    case Site::FfnDown: return "ffn_down";
    }
    return "?";
}

inline std::optional<Site> site_from_string(std::string_view s) {
    for (Site site : kAllSites)
        if (to_string(site) == s) return site;
    return std::nullopt;
}

/// One (h_base, h_adapted) pair at one LoRA site for one sample.
struct ModuleCapture {
    std::uint64_t sample_id = 0;
    std::string module_id;
    std::uint32_t layer_index = 0;
    Site site = Site::AttnQ;
    std::vector<float> h_base;
    std::vector<float> h_adapted;

    friend bool operator==(const ModuleCapture&, const ModuleCapture&) = default;
};

struct CaptureMeta {
    std::string model_name;
    double n_params = 0.0;
    std::int64_t lora_rank = 0;
    double dataset_size = 0.0;
    std::int64_t share_k = 1;
    std::string length_bin;
    std::uint64_t seed = 0;
    std::string pooling = "last_token";
    std::map<std::string, std::string> extra;

    friend bool operator==(const CaptureMeta&, const CaptureMeta&) = default;
};

struct SampleLogprobs {
    std::uint64_t sample_id = 0;
    std::vector<double> logprobs;

    friend bool operator==(const SampleLogprobs&, const SampleLogprobs&) = default;
};

struct CaptureSet {
    std::vector<ModuleCapture> captures;
    CaptureMeta meta;
    std::optional<std::vector<SampleLogprobs>> token_logprobs;

    friend bool operator==(const CaptureSet&, const CaptureSet&) = default;
};

struct Violation {
    enum class Kind { BadMeta, NonFinite, DimMismatch, DimTooSmall, DuplicateKey, InconsistentModuleDim, BadLogprob,
                      LogprobCoverage };
    Kind kind;
    std::string message;
};

/// Every invariant violation in `set`; empty iff the set is valid.
inline std::vector<Violation> validate(const CaptureSet& set) {
    using K = Violation::Kind;
    std::vector<Violation> out;
    const auto& m = set.meta;
    if (!(m.n_params > 0.0) || !std::isfinite(m.n_params)) out.push_back({K::BadMeta, "meta.n_params must be > 0"});
    if (m.lora_rank < 1) out.push_back({K::BadMeta, "meta.lora_rank must be >= 1"});

    std::set<std::pair<std::uint64_t, std::string>> keys;
    std::map<std::string, std::size_t> module_dims;
    for (std::size_t i = 0; i < set.captures.size(); ++i) {
        const auto& c = set.captures[i];
        const std::string where =
            "capture " + std::to_string(i) + " (sample " + std::to_string(c.sample_id) + ", module '" + c.module_id + "')";
        if (c.h_base.size() != c.h_adapted.size()) {
            out.push_back({K::DimMismatch, where + ": h_base dim " + std::to_string(c.h_base.size()) +
                                               " != h_adapted dim " + std::to_string(c.h_adapted.size())});
        } else if (c.h_base.size() < 2) {
            out.push_back({K::DimTooSmall, where + ": dim must be >= 2"});
        }
        auto finite = [](const std::vector<float>& v) {
            return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
        };
        if (!finite(c.h_base) || !finite(c.h_adapted)) out.push_back({K::NonFinite, where + ": non-finite entry"});
        if (!keys.emplace(c.sample_id, c.module_id).second) {
            out.push_back({K::DuplicateKey, where + ": duplicate (sample_id, module_id)"});
        }
        auto [it, inserted] = module_dims.emplace(c.module_id, c.h_base.size());
        if (!inserted && it->second != c.h_base.size()) {
            out.push_back({K::InconsistentModuleDim, where + ": dim " + std::to_string(c.h_base.size()) +
                                                         " differs from earlier dim " + std::to_string(it->second)});
        }
    }
    if (set.token_logprobs) {
        std::set<std::uint64_t> samples, covered;
        for (const auto& c : set.captures) samples.insert(c.sample_id);
        for (const auto& s : *set.token_logprobs) {
            if (!covered.insert(s.sample_id).second) {
                out.push_back({K::LogprobCoverage, "sample " + std::to_string(s.sample_id) + ": duplicate log-prob entry"});
            } else if (!samples.count(s.sample_id)) {
                out.push_back({K::LogprobCoverage, "sample " + std::to_string(s.sample_id) + ": log-probs for unknown sample"});
            }
            if (s.logprobs.empty()) {
                out.push_back({K::LogprobCoverage, "sample " + std::to_string(s.sample_id) + ": empty log-prob list"});
            }
            for (double lp : s.logprobs) {
                if (!std::isfinite(lp) || lp > 0.0) {
                    out.push_back({K::BadLogprob, "sample " + std::to_string(s.sample_id) +
                                                      ": token log-probs must be finite and <= 0"});
                    break;
                }
            }
        }
        for (auto id : samples) {
            if (!covered.count(id)) {
                out.push_back({K::LogprobCoverage, "sample " + std::to_string(id) + ": no log-prob entry"});
            }
        }
    }
    return out;
}

/// Distinct reader failure modes.
class CaptureFormatError : public DataError {
public:
    enum class Kind { Io, NotACaptureFile, VersionMismatch, MalformedManifest, Truncated, Inconsistent, NonFinitePayload, Invalid };

    CaptureFormatError(Kind kind, const std::string& msg) : DataError(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

inline constexpr char kCaptureMagic[8] = {'M', 'I', 'U', 'B', 'C', 'A', 'P', '1'};
inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestFile = "manifest.jsonl";
inline constexpr const char* kBlobFile = "captures.bin";
inline constexpr const char* kLogprobFile = "logprobs.jsonl";

namespace detail {

using ojson = nlohmann::ordered_json;

inline void append_f32_le(std::string& out, float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
}

inline float load_f32_le(const char* p) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
    return std::bit_cast<float>(bits);
}

inline ojson meta_to_json(const CaptureMeta& m) {
    ojson extra = ojson::object();
    for (const auto& [k, v] : m.extra) extra[k] = v;
    return ojson{{"model_name", m.model_name}, {"n_params", m.n_params},   {"lora_rank", m.lora_rank},
                 {"dataset_size", m.dataset_size}, {"share_k", m.share_k}, {"length_bin", m.length_bin},
                 {"seed", m.seed},             {"pooling", m.pooling},     {"extra", extra}};
}

inline CaptureMeta meta_from_json(const nlohmann::json& j) {
    CaptureMeta m;
    m.model_name = j.at("model_name").get<std::string>();
    m.n_params = j.at("n_params").get<double>();
    m.lora_rank = j.at("lora_rank").get<std::int64_t>();
    m.dataset_size = j.at("dataset_size").get<double>();
    m.share_k = j.at("share_k").get<std::int64_t>();
    m.length_bin = j.at("length_bin").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.pooling = j.value("pooling", std::string("last_token"));
    if (j.contains("extra")) {
        for (const auto& [k, v] : j.at("extra").items()) m.extra[k] = v.get<std::string>();
    }
    return m;
}

// Splits into '\n'-terminated lines; an unterminated tail is an error.
inline std::vector<std::string_view> split_lines(std::string_view text, const std::string& file) {
    std::vector<std::string_view> lines;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) {
            throw CaptureFormatError(CaptureFormatError::Kind::Truncated,
                                     file + ": last line is not newline-terminated (truncated file?)");
        }
        lines.push_back(text.substr(pos, nl - pos));
        pos = nl + 1;
    }
    return lines;
}

inline nlohmann::json parse_line(std::string_view line, const std::string& file, std::size_t lineno) {
    try {
        auto j = nlohmann::json::parse(line);
        if (!j.is_object()) throw std::runtime_error("not a JSON object");
        return j;
    } catch (const std::exception& e) {
        throw CaptureFormatError(CaptureFormatError::Kind::MalformedManifest,
                                 file + " line " + std::to_string(lineno) + ": " + e.what());
    }
}

} // namespace detail

/// Writes `set` into directory `dir` (created if missing). Invalid sets are
/// rejected before anything touches the disk.
inline void write_capture_set(const CaptureSet& set, const fs::path& dir) {
    if (auto v = validate(set); !v.empty()) {
        throw InvalidArgument("refusing to write invalid CaptureSet: " + v.front().message);
    }
    std::string blob(kCaptureMagic, sizeof(kCaptureMagic));
    std::string manifest;
    detail::ojson header{{"format", "miub-manifest"}, {"version", kManifestVersion}, {"meta", detail::meta_to_json(set.meta)}};
    manifest += header.dump() + "\n";
    for (const auto& c : set.captures) {
        const std::uint64_t base_offset = blob.size();
        for (float x : c.h_base) detail::append_f32_le(blob, x);
        const std::uint64_t adapted_offset = blob.size();
        for (float x : c.h_adapted) detail::append_f32_le(blob, x);
        detail::ojson rec{{"sample_id", c.sample_id},       {"module_id", c.module_id},
                          {"layer", c.layer_index},         {"site", std::string(to_string(c.site))},
                          {"dim", c.h_base.size()},         {"base_offset", base_offset},
                          {"adapted_offset", adapted_offset}};
        manifest += rec.dump() + "\n";
    }
    fs::create_directories(dir);
    io::write_file_atomic(dir / kBlobFile, blob);
    if (set.token_logprobs) {
        std::string side;
        for (const auto& s : *set.token_logprobs) {
            detail::ojson rec{{"sample_id", s.sample_id}, {"logprobs", s.logprobs}};
            side += rec.dump() + "\n";
        }
        io::write_file_atomic(dir / kLogprobFile, side);
    } else {
        std::error_code ec;
        fs::remove(dir / kLogprobFile, ec);
    }
    // Manifest last: a directory with a manifest always has its blob.
    io::write_file_atomic(dir / kManifestFile, manifest);
}

/// Parses the manifest/blob pair (and sidecar when present) without touching
/// the filesystem; every record is bounds-checked before any vector is read.
inline CaptureSet parse_capture_set(std::string_view manifest, std::string_view blob,
                                    std::optional<std::string_view> sidecar = std::nullopt) {
    using Kind = CaptureFormatError::Kind;
    if (blob.size() < sizeof(kCaptureMagic) || std::memcmp(blob.data(), kCaptureMagic, sizeof(kCaptureMagic)) != 0) {
        throw CaptureFormatError(Kind::NotACaptureFile, "not a capture file: blob magic is not MIUBCAP1");
    }
    const auto lines = detail::split_lines(manifest, kManifestFile);
    if (lines.empty()) throw CaptureFormatError(Kind::MalformedManifest, "manifest has no header line");

    CaptureSet set;
    {
        const auto header = detail::parse_line(lines[0], kManifestFile, 1);
        if (header.value("format", std::string()) != "miub-manifest") {
            throw CaptureFormatError(Kind::NotACaptureFile, "not a capture manifest: missing format 'miub-manifest'");
        }
        const auto ver = header.value("version", -1);
        if (ver != kManifestVersion) {
            throw CaptureFormatError(Kind::VersionMismatch, "unsupported manifest version " + std::to_string(ver) +
                                                                " (expected " + std::to_string(kManifestVersion) + ")");
        }
        try {
            set.meta = detail::meta_from_json(header.at("meta"));
        } catch (const nlohmann::json::exception& e) {
            throw CaptureFormatError(Kind::MalformedManifest, std::string("manifest meta: ") + e.what());
        }
    }

    struct Record {
        std::uint64_t sample_id;
        std::string module_id;
        std::uint32_t layer;
        Site site;
        std::uint64_t dim, base_offset, adapted_offset;
    };
    std::vector<Record> records;
    records.reserve(lines.size() - 1);
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const auto j = detail::parse_line(lines[li], kManifestFile, li + 1);
        Record r{};
        try {
            r.sample_id = j.at("sample_id").get<std::uint64_t>();
            r.module_id = j.at("module_id").get<std::string>();
            r.layer = j.at("layer").get<std::uint32_t>();
            const auto site = site_from_string(j.at("site").get<std::string>());
            if (!site) throw std::runtime_error("unknown site '" + j.at("site").get<std::string>() + "'");
            r.site = *site;
            r.dim = j.at("dim").get<std::uint64_t>();
            r.base_offset = j.at("base_offset").get<std::uint64_t>();
            r.adapted_offset = j.at("adapted_offset").get<std::uint64_t>();
        } catch (const std::exception& e) {
            throw CaptureFormatError(Kind::MalformedManifest,
                                     std::string(kManifestFile) + " line " + std::to_string(li + 1) + ": " + e.what());
        }
        const std::string name = "record " + std::to_string(li) + " (sample " + std::to_string(r.sample_id) +
                                 ", module '" + r.module_id + "')";
        // Guard against overflow before multiplying.
        if (r.dim > blob.size() / 4) {
            throw CaptureFormatError(Kind::Truncated, name + ": dim " + std::to_string(r.dim) + " exceeds blob");
        }
        const std::uint64_t nbytes = r.dim * 4;
        for (auto off : {r.base_offset, r.adapted_offset}) {
            if (off < sizeof(kCaptureMagic) || off > blob.size() || blob.size() - off < nbytes) {
                throw CaptureFormatError(Kind::Truncated, name + ": extent [" + std::to_string(off) + ", +" +
                                                              std::to_string(nbytes) + ") exceeds blob of " +
                                                              std::to_string(blob.size()) + " bytes");
            }
        }
        records.push_back(std::move(r));
    }

    // The declared vectors must tile the data region exactly.
    {
        std::vector<std::pair<std::uint64_t, std::uint64_t>> extents;
        for (const auto& r : records) {
            extents.emplace_back(r.base_offset, r.dim * 4);
            extents.emplace_back(r.adapted_offset, r.dim * 4);
        }
        std::sort(extents.begin(), extents.end());
        std::uint64_t cursor = sizeof(kCaptureMagic);
        for (const auto& [off, len] : extents) {
            if (off != cursor) {
                throw CaptureFormatError(Kind::Inconsistent, off < cursor ? "manifest extents overlap at byte " + std::to_string(off)
                                                                          : "blob has unreferenced bytes at " + std::to_string(cursor));
            }
            cursor += len;
        }
        if (cursor != blob.size()) {
            throw CaptureFormatError(Kind::Inconsistent, "blob has " + std::to_string(blob.size() - cursor) +
                                                             " bytes past the last manifest record");
        }
    }

    set.captures.reserve(records.size());
    for (const auto& r : records) {
        ModuleCapture c;
        c.sample_id = r.sample_id;
        c.module_id = r.module_id;
        c.layer_index = r.layer;
        c.site = r.site;
        c.h_base.resize(r.dim);
        c.h_adapted.resize(r.dim);
        for (std::uint64_t k = 0; k < r.dim; ++k) {
            c.h_base[k] = detail::load_f32_le(blob.data() + r.base_offset + 4 * k);
            c.h_adapted[k] = detail::load_f32_le(blob.data() + r.adapted_offset + 4 * k);
        }
        auto finite = [](const std::vector<float>& v) {
            return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
        };
        if (!finite(c.h_base) || !finite(c.h_adapted)) {
            throw CaptureFormatError(Kind::NonFinitePayload, "sample " + std::to_string(c.sample_id) + ", module '" +
                                                                 c.module_id + "': NaN or Inf in payload");
        }
        set.captures.push_back(std::move(c));
    }

    if (sidecar) {
        std::vector<SampleLogprobs> lps;
        const auto side_lines = detail::split_lines(*sidecar, kLogprobFile);
        for (std::size_t li = 0; li < side_lines.size(); ++li) {
            const auto j = detail::parse_line(side_lines[li], kLogprobFile, li + 1);
            SampleLogprobs s;
            try {
                s.sample_id = j.at("sample_id").get<std::uint64_t>();
                s.logprobs = j.at("logprobs").get<std::vector<double>>();
            } catch (const std::exception& e) {
                throw CaptureFormatError(Kind::MalformedManifest,
                                         std::string(kLogprobFile) + " line " + std::to_string(li + 1) + ": " + e.what());
            }
            lps.push_back(std::move(s));
        }
        set.token_logprobs = std::move(lps);
    }

    if (auto v = validate(set); !v.empty()) {
        std::string msg = "invalid capture set:";
        for (const auto& x : v) msg += "\n  " + x.message;
        throw CaptureFormatError(Kind::Invalid, msg);
    }
    return set;
}

/// Reads and fully validates a capture directory written by write_capture_set.
inline CaptureSet read_capture_set(const fs::path& dir) {
    using Kind = CaptureFormatError::Kind;
    if (!fs::is_directory(dir)) throw CaptureFormatError(Kind::Io, "capture directory not found: " + dir.string());
    std::string manifest, blob;
    std::optional<std::string> sidecar;
    try {
        manifest = io::read_file(dir / kManifestFile);
        blob = io::read_file(dir / kBlobFile);
        if (fs::exists(dir / kLogprobFile)) sidecar = io::read_file(dir / kLogprobFile);
    } catch (const DataError& e) {
        throw CaptureFormatError(Kind::Io, e.what());
    }
    return parse_capture_set(manifest, blob, sidecar ? std::optional<std::string_view>(*sidecar) : std::nullopt);
}

} // namespace miub
