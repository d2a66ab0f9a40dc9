#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "posediff/tensor.hpp"

namespace posediff {

inline constexpr double kPckThreshold = 150.0;

/// Euclidean error per (frame, joint), N x J.
Matrix<double> joint_errors(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt);

/// Mean joint error in the units of the inputs (mm).
double mpjpe(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt);

/// Mean error of each joint over frames (length J).
RowVector<double> per_joint_mpjpe(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt);

enum class AlignmentKind { similarity, rigid };

/// Per frame, the rotation (det +1), translation and, for similarity, scale
/// taking pred closest to gt in least squares. Throws AlignmentError for a
/// frame whose joints are (nearly) collinear in either pose.
PoseSequence3D<double> procrustes_align(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt,
                                        AlignmentKind kind = AlignmentKind::similarity);

double p_mpjpe(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt,
               AlignmentKind kind = AlignmentKind::similarity);

/// Percentage of joints with error at most threshold_mm.
double pck(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt,
           double threshold_mm = kPckThreshold);

/// Thresholds 0, 5, ..., 150 mm.
std::vector<double> auc_thresholds();

/// Mean pck over auc_thresholds().
double auc(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt);

/// Same metrics restricted to frames whose mask entry is non-zero.
PoseSequence3D<double> select_frames(const PoseSequence3D<double>& pose, const std::vector<std::uint8_t>& mask);

struct SequenceMetrics {
    std::string id;
    std::string action;
    double mpjpe_mm = 0.0;
    double p_mpjpe_mm = 0.0;
    double pck_percent = 0.0;
    double auc_percent = 0.0;
    Index frames = 0;
};

SequenceMetrics evaluate_sequence(const std::string& id, const std::string& action,
                                  const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt,
                                  AlignmentKind kind = AlignmentKind::similarity);

struct MetricReport {
    std::vector<SequenceMetrics> sequences;
    /// Per action: mean of its sequences' metrics.
    std::map<std::string, SequenceMetrics> per_action;
    /// Mean over actions (each action weighted once).
    SequenceMetrics aggregate;
};

MetricReport build_report(std::vector<SequenceMetrics> sequences);

/// Columns: scope,id,action,frames,mpjpe_mm,p_mpjpe_mm,pck150_percent,auc_percent.
/// Rows: sequences sorted by id, then actions sorted by name, then "aggregate".
std::string report_csv(const MetricReport& report);

} // namespace posediff
