#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

#include "posediff/commands.hpp"

namespace fs = std::filesystem;
using namespace posediff;

namespace {

RunConfig resolve_config(const std::string& config_path, const std::string& preset) {
    if (!config_path.empty()) {
        return RunConfig::load(config_path);
    }
    return RunConfig::preset_named(preset.empty() ? "tiny" : preset);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"posediff: prompt-conditioned diffusion lifting of 2D keypoint sequences to 3D poses"};
    app.require_subcommand(1);

    // synth
    SynthOptions synth;
    std::string synth_out;
    std::string motion = "walk_cycle";
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic skeleton dataset (.ptc)");
    synth_cmd->add_option("--out", synth_out, "Output dataset path")->required();
    synth_cmd->add_option("--sequences", synth.sequences, "Number of sequences (scenes)")->capture_default_str();
    synth_cmd->add_option("--frames", synth.frames, "Frames per sequence")->capture_default_str();
    synth_cmd->add_option("--joints", synth.joints, "Joints per skeleton (5..17)")->capture_default_str();
    synth_cmd->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
    synth_cmd->add_option("--motion", motion, "walk_cycle, arm_wave, sit or mixed")->capture_default_str();
    synth_cmd->add_option("--characters", synth.characters, "People per scene")->capture_default_str();

    // train
    std::string config_path;
    std::string preset;
    std::string data_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs;
    std::optional<std::int64_t> max_steps;
    bool resume = false;
    bool no_prompt = false;
    bool no_fpc = false;
    bool no_pts = false;
    auto* train_cmd = app.add_subcommand("train", "Train the denoiser");
    train_cmd->add_option("--config", config_path, "Run configuration (JSON)");
    train_cmd->add_option("--preset", preset, "Preset when no --config is given: tiny or paper");
    train_cmd->add_option("--data", data_path, "Dataset (.ptc); overrides data.dataset");
    train_cmd->add_option("--out", out_dir, "Run directory for checkpoint and log")->required();
    train_cmd->add_option("--seed", seed, "Overrides the configured seed");
    train_cmd->add_option("--epochs", epochs, "Overrides train.epochs");
    train_cmd->add_option("--max-steps", max_steps, "Overrides train.max_steps");
    train_cmd->add_flag("--resume", resume, "Continue from the run directory's checkpoint");
    train_cmd->add_flag("--no-prompt", no_prompt, "Ablation: drop prompt conditioning entirely");
    train_cmd->add_flag("--no-fpc", no_fpc, "Ablation: drop prompt cross-attention");
    train_cmd->add_flag("--no-pts", no_pts, "Ablation: drop timestamp stylization");

    // estimate
    std::string checkpoint;
    std::string estimate_out;
    EstimateOptions estimate;
    bool per_frame = false;
    bool deterministic = false;
    auto* estimate_cmd = app.add_subcommand("estimate", "Lift 2D keypoints to 3D with a trained checkpoint");
    estimate_cmd->add_option("--checkpoint", checkpoint, "Checkpoint (.ptc)")->required();
    estimate_cmd->add_option("--data", data_path, "Dataset (.ptc)")->required();
    estimate_cmd->add_option("--out", estimate_out, "Predictions output (.ptc)")->required();
    estimate_cmd->add_option("--hypotheses", estimate.hypotheses, "Hypotheses H");
    estimate_cmd->add_option("--iterations", estimate.iterations, "DDIM iterations M");
    estimate_cmd->add_option("--seed", estimate.seed, "Sampling seed");
    estimate_cmd->add_flag("--per-frame-jpma", per_frame, "Select hypotheses per frame and joint");
    estimate_cmd->add_flag("--deterministic", deterministic, "Drop the stochastic DDIM term");

    // eval
    std::string predictions;
    std::string eval_out;
    std::string per_joint_out;
    bool rigid_only = false;
    auto* eval_cmd = app.add_subcommand("eval", "Score predictions against ground truth");
    eval_cmd->add_option("--predictions", predictions, "Predictions (.ptc)")->required();
    eval_cmd->add_option("--data", data_path, "Dataset (.ptc)")->required();
    eval_cmd->add_option("--out", eval_out, "Report CSV")->required();
    eval_cmd->add_option("--per-joint", per_joint_out, "Optional per-joint error CSV");
    eval_cmd->add_flag("--rigid-only", rigid_only, "Procrustes without scale");

    // plot
    std::string sequence_id;
    std::string plot_out;
    auto* plot_cmd = app.add_subcommand("plot", "Render one sequence as SVG plus a per-joint error CSV");
    plot_cmd->add_option("--predictions", predictions, "Predictions (.ptc)")->required();
    plot_cmd->add_option("--data", data_path, "Dataset (.ptc)")->required();
    plot_cmd->add_option("--id", sequence_id, "Sequence id")->required();
    plot_cmd->add_option("--out", plot_out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*synth_cmd) {
            if (motion == "mixed") {
                synth.mixed = true;
            } else {
                synth.motion = parse_motion_kind(motion);
            }
            cmd_synth(synth, synth_out);
            std::cout << "wrote " << synth_out << "\n";
        } else if (*train_cmd) {
            auto config = resolve_config(config_path, preset);
            if (seed) {
                config.seed = *seed;
            }
            if (epochs) {
                config.train.epochs = *epochs;
            }
            if (max_steps) {
                config.train.max_steps = *max_steps;
            }
            if (!data_path.empty()) {
                config.dataset = data_path;
            }
            config.model.use_prompt = config.model.use_prompt && !no_prompt;
            config.model.use_fpc = config.model.use_fpc && !no_fpc;
            config.model.use_pts = config.model.use_pts && !no_pts;
            config.validate();
            if (config.dataset.empty()) {
                throw ConfigError("no dataset given; pass --data or set data.dataset in the config");
            }
            const auto summary = cmd_train(config, config.dataset, out_dir, resume, &std::cout);
            std::cout << "trained " << summary.steps << " steps over " << summary.epochs_completed
                      << " epochs; checkpoint " << summary.checkpoint.string() << " (config " << config.hash()
                      << ")\n";
        } else if (*estimate_cmd) {
            if (per_frame) {
                estimate.per_frame_jpma = true;
            }
            if (deterministic) {
                estimate.deterministic = true;
            }
            cmd_estimate(checkpoint, data_path, estimate_out, estimate, &std::cout);
            std::cout << "wrote " << estimate_out << "\n";
        } else if (*eval_cmd) {
            std::optional<fs::path> per_joint;
            if (!per_joint_out.empty()) {
                per_joint = per_joint_out;
            }
            const auto report = cmd_eval(predictions, data_path, eval_out, rigid_only, per_joint);
            std::cout << "MPJPE " << report.aggregate.mpjpe_mm << " mm, P-MPJPE " << report.aggregate.p_mpjpe_mm
                      << " mm, PCK " << report.aggregate.pck_percent << " %, AUC " << report.aggregate.auc_percent
                      << " %\n";
        } else if (*plot_cmd) {
            cmd_plot(predictions, data_path, sequence_id, plot_out);
            std::cout << "wrote " << (fs::path(plot_out) / (sequence_id + ".svg")).string() << "\n";
        }
    } catch (const InvariantViolation& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
