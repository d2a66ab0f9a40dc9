#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

#include "posediff/config.hpp"
#include "posediff/dataset.hpp"
#include "posediff/metrics.hpp"

namespace posediff {

namespace fs = std::filesystem;

inline constexpr const char* kCheckpointFile = "checkpoint_last.ptc";
inline constexpr const char* kTrainLogFile = "train_log.csv";

/// Run configuration echoed into a container's manifest.
RunConfig config_from_meta(const nlohmann::json& meta);

void cmd_synth(const SynthOptions& options, const fs::path& out);

struct TrainSummary {
    int epochs_completed = 0;
    std::int64_t steps = 0;
    double last_epoch_loss = 0.0;
    fs::path checkpoint;
};

/// The checkpoint a fresh training run starts from, before any step.
TensorContainer initial_checkpoint(const RunConfig& config);

/// Trains on every record of `dataset`, writing checkpoint_last.ptc after
/// each epoch and one train_log.csv row per optimizer step into `out_dir`.
/// With `resume`, continues from the checkpoint found there.
TrainSummary cmd_train(const RunConfig& config, const fs::path& dataset, const fs::path& out_dir, bool resume,
                       std::ostream* progress = nullptr);

struct EstimateOptions {
    std::optional<int> hypotheses;
    std::optional<int> iterations;
    std::optional<std::uint64_t> seed;
    std::optional<bool> per_frame_jpma;
    std::optional<bool> deterministic;
};

/// Writes `pred/<scene>/poses` (C x N x J x 3, root-relative mm),
/// `pred/<scene>/per_joint_hypothesis_index` (C x N x J) and
/// `pred/<scene>/presence` (C x N) for every scene of the dataset.
void cmd_estimate(const fs::path& checkpoint, const fs::path& dataset, const fs::path& out,
                  const EstimateOptions& options = {}, std::ostream* progress = nullptr);

/// Root-relative predictions of one record, with its presence mask.
struct RecordPrediction {
    PoseSequence3D<double> pose;
    std::vector<std::uint8_t> presence;
};
std::map<std::string, RecordPrediction> read_predictions(const TensorContainer& predictions);

/// Pairs predictions with ground truth by record id and writes the report
/// CSV to `out`; `per_joint_out`, when set, gets id,joint,mpjpe_mm rows.
MetricReport cmd_eval(const fs::path& predictions, const fs::path& dataset, const fs::path& out, bool rigid_only,
                      const std::optional<fs::path>& per_joint_out = std::nullopt);

/// `<id>.svg` with predicted and ground-truth skeletons per frame and
/// `<id>_joint_error.csv` in `out_dir`.
void cmd_plot(const fs::path& predictions, const fs::path& dataset, const std::string& id, const fs::path& out_dir);

} // namespace posediff
