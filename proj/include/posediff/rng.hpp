#pragma once

#include <cstdint>
#include <random>

#include "posediff/tensor.hpp"

namespace posediff {

std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Seed for stream `stream` at index `index` under `base`:
/// splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index).
/// Samplers use stream = hypothesis (or character) and index = step.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0) noexcept;

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double gaussian(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    /// Inclusive integer range.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }

    template <typename Scalar>
    Matrix<Scalar> gaussian_matrix(Index rows, Index cols, double stddev = 1.0) {
        Matrix<Scalar> out(rows, cols);
        for (Index i = 0; i < out.size(); ++i) {
            out.data()[i] = static_cast<Scalar>(gaussian(0.0, stddev));
        }
        return out;
    }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
};

/// Unit-Gaussian tensor with the seed it was drawn from.
template <typename Scalar>
struct NoiseSample {
    PoseSequence3D<Scalar> epsilon;
    std::uint64_t seed = 0;

    static NoiseSample draw(Index frames, Index joints, std::uint64_t seed) {
        Rng rng(seed);
        auto coords = rng.gaussian_matrix<Scalar>(frames * joints, 3);
        return {PoseSequence3D<Scalar>(frames, joints, std::move(coords)), seed};
    }
    static NoiseSample zeros(Index frames, Index joints) { return {PoseSequence3D<Scalar>(frames, joints), 0}; }
};

} // namespace posediff
