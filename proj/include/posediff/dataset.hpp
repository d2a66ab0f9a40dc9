#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "posediff/container.hpp"
#include "posediff/sampler.hpp"
#include "posediff/tensor.hpp"

namespace posediff {

/// Joint indices of the four body-part prompts {head, body, arms, legs}.
struct PartMapping {
    std::array<std::vector<Index>, 4> groups;

    static const std::array<std::string, 4>& names();
    /// Standard 17-joint partition.
    static PartMapping standard17();
    /// Every group non-empty and every index inside [0, joints).
    void validate(Index joints) const;
    nlohmann::json to_json() const;
    static PartMapping from_json(const nlohmann::json& j);
};

/// One person over N frames. Absent frames hold zeros in both tensors.
struct SequenceRecord {
    std::string id;
    std::string scene;  // records sharing a scene are estimated together
    int character = 0;
    std::string action;
    PoseSequence2D<double> keypoints_2d;          // pixels
    std::optional<PoseSequence3D<double>> gt_3d;  // mm, camera coordinates
    std::optional<CameraIntrinsics> camera;
    std::vector<std::uint8_t> presence;  // N entries

    Index frames() const { return keypoints_2d.frames(); }
    Index joints() const { return keypoints_2d.joints(); }
    bool all_present() const;
    void validate() const;
};

struct Dataset {
    std::vector<SequenceRecord> records;
    std::vector<int> parents;  // skeleton tree, -1 for the root
    PartMapping parts;
    std::array<double, 2> image_size{1000.0, 1000.0};

    Index joints() const;
    /// Record camera, or the fallback camera at the image center.
    CameraIntrinsics camera_for(const SequenceRecord& record) const;
    const SequenceRecord& find(const std::string& id) const;
    void validate() const;
};

inline constexpr int kDatasetVersion = 1;

TensorContainer dataset_to_container(const Dataset& dataset);
/// Throws LoadError naming the offending record.
Dataset dataset_from_container(const TensorContainer& container);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

enum class MotionKind { walk_cycle, arm_wave, sit };
MotionKind parse_motion_kind(const std::string& name);
std::string to_string(MotionKind kind);

/// 17-joint skeleton tree (hip root, legs, spine, head, arms).
const std::vector<int>& standard17_parents();

/// Joints kept for a J-joint skeleton (5 <= J <= 17), ascending.
std::vector<Index> reduced_joint_set(Index joints);

struct SynthOptions {
    int sequences = 8;
    Index frames = 16;
    Index joints = 17;
    std::uint64_t seed = 0;
    MotionKind motion = MotionKind::walk_cycle;
    /// Cycle through all three motions instead of `motion`.
    bool mixed = false;
    /// People per scene; characters after the first get an absent window.
    int characters = 1;
};

/// Forward-kinematics skeletons with per-sequence bone lengths, phase,
/// heading and placement, viewed by a generated pinhole camera. The 2D
/// keypoints are reproject(gt_3d) exactly.
Dataset synth_generate(const SynthOptions& options);

/// Edge lengths per frame for the tree `parents` (row per frame).
Matrix<double> bone_lengths(const PoseSequence3D<double>& pose, const std::vector<int>& parents);

enum class NormalizationMode { root_centered, image_normalized };
NormalizationMode parse_normalization_mode(const std::string& name);
std::string to_string(NormalizationMode mode);

/// 3D: (Y - Y_root) / metric_scale in both modes.
/// 2D image_normalized: keypoint_scale * ((u - cx) / fx, (v - cy) / fy).
/// 2D root_centered: the same, minus the root joint of each frame.
/// Absent frames stay zero.
struct NormalizationParams {
    NormalizationMode mode = NormalizationMode::image_normalized;
    double metric_scale = 1000.0;
    double keypoint_scale = 4.5;
    Index root_joint = 0;

    nlohmann::json to_json() const;
    static NormalizationParams from_json(const nlohmann::json& j);
};

/// Per-record quantities needed to invert the transform.
struct NormalizationState {
    Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> root_3d;  // zero without gt
    Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor> root_2d;
    CameraIntrinsics camera;
};

struct NormalizedRecord {
    PoseSequence2D<double> keypoints;
    std::optional<PoseSequence3D<double>> target;
    NormalizationState state;
};

NormalizedRecord normalize_record(const SequenceRecord& record, const CameraIntrinsics& camera,
                                  const NormalizationParams& params);
std::vector<NormalizedRecord> normalize(const Dataset& dataset, const NormalizationParams& params);

/// Inverse of the 3D transform (root re-added from the state).
PoseSequence3D<double> denormalize_pose(const PoseSequence3D<double>& pose, const NormalizationState& state,
                                        const NormalizationParams& params,
                                        const std::vector<std::uint8_t>& presence = {});
/// Model output to root-relative millimeters.
PoseSequence3D<double> to_relative_mm(const PoseSequence3D<double>& pose, const NormalizationParams& params);
PoseSequence2D<double> denormalize_keypoints(const PoseSequence2D<double>& keypoints, const NormalizationState& state,
                                             const NormalizationParams& params,
                                             const std::vector<std::uint8_t>& presence = {});

/// gt minus its root joint per frame.
PoseSequence3D<double> root_relative(const PoseSequence3D<double>& pose, Index root_joint = 0);

} // namespace posediff
