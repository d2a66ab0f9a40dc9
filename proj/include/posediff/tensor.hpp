#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>

#include "posediff/errors.hpp"

namespace posediff {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Index = Eigen::Index;

/// Frame-major joint coordinates: row `n * joints + j` holds joint j of frame n.
template <typename Scalar, int Dims>
class PoseSequence {
public:
    using Coords = Eigen::Matrix<Scalar, Eigen::Dynamic, Dims, Eigen::RowMajor>;

    PoseSequence() = default;
    PoseSequence(Index frames, Index joints)
        : frames_(frames), joints_(joints), coords_(Coords::Zero(frames * joints, Dims)) {
        if (frames <= 0 || joints <= 0) {
            throw ShapeError("pose sequence needs positive frame and joint counts");
        }
    }
    PoseSequence(Index frames, Index joints, Coords coords)
        : frames_(frames), joints_(joints), coords_(std::move(coords)) {
        if (coords_.rows() != frames * joints) {
            throw ShapeError("pose sequence has " + std::to_string(coords_.rows()) + " rows, expected " +
                             std::to_string(frames * joints));
        }
    }

    Index frames() const noexcept { return frames_; }
    Index joints() const noexcept { return joints_; }
    Index size() const noexcept { return coords_.size(); }

    const Coords& coords() const noexcept { return coords_; }
    Coords& coords() noexcept { return coords_; }

    auto joint(Index frame, Index j) { return coords_.row(frame * joints_ + j); }
    auto joint(Index frame, Index j) const { return coords_.row(frame * joints_ + j); }

    bool same_shape(const PoseSequence& other) const noexcept {
        return frames_ == other.frames_ && joints_ == other.joints_;
    }

    template <typename Other>
    PoseSequence<Other, Dims> cast() const {
        return {frames_, joints_, coords_.template cast<Other>()};
    }

    friend bool operator==(const PoseSequence& a, const PoseSequence& b) {
        return a.same_shape(b) && a.coords_ == b.coords_;
    }

private:
    Index frames_ = 0;
    Index joints_ = 0;
    Coords coords_;
};

template <typename Scalar>
using PoseSequence2D = PoseSequence<Scalar, 2>;
template <typename Scalar>
using PoseSequence3D = PoseSequence<Scalar, 3>;

template <typename Scalar, int Dims>
void require_same_shape(const PoseSequence<Scalar, Dims>& a, const PoseSequence<Scalar, Dims>& b,
                        const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.frames()) + "x" +
                         std::to_string(a.joints()) + " vs " + std::to_string(b.frames()) + "x" +
                         std::to_string(b.joints()) + ")");
    }
}

} // namespace posediff
