#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "posediff/dataset.hpp"
#include "posediff/denoiser.hpp"
#include "posediff/diffusion.hpp"
#include "posediff/prompt.hpp"
#include "posediff/sampler.hpp"
#include "posediff/training.hpp"

namespace posediff {

struct ScheduleConfig {
    int timesteps = 1000;
    ScheduleKind kind = ScheduleKind::cosine;
    double beta_min = 1e-4;
    double beta_max = 0.999;

    NoiseSchedule build() const { return build_schedule(timesteps, kind, beta_min, beta_max); }
};

enum class Precision { f32, f64 };

/// Full configuration tree. Every field has a default; a config file names a
/// preset and overrides any subset of keys. Unknown keys are rejected.
struct RunConfig {
    std::string preset = "tiny";
    std::uint64_t seed = 0;
    ScheduleConfig schedule;
    DenoiserConfig model;
    Precision precision = Precision::f32;
    TrainConfig train;
    SamplerConfig sampler;
    std::array<Index, kPromptCount> token_budget{7, 12, 10, 10, 10, 14, 14};
    /// Optional container with precomputed `prompt/<k>/frozen` tokens; empty
    /// selects the built-in hash encoder.
    std::string frozen_tokens;
    std::string dataset;
    NormalizationParams normalization;
    bool rigid_only = false;

    static RunConfig preset_named(const std::string& name);
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::filesystem::path& path);
    nlohmann::json to_json() const;
    void validate() const;
    /// to_json() without file paths, so relocated runs hash alike.
    nlohmann::json provenance_json() const;
    /// FNV-1a 64 of the canonical provenance dump, as 16 hex digits.
    std::string hash() const;
};

std::uint64_t fnv1a64(const std::string& text);
std::string fnv1a_hex(const std::string& text);

} // namespace posediff
