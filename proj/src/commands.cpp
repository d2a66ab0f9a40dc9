#include "posediff/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "posediff/rng.hpp"

namespace posediff {

namespace {

constexpr std::uint64_t kWeightStream = 0x77656967ULL;
constexpr std::uint64_t kPromptStream = 0x70726f6dULL;
constexpr std::uint64_t kSceneStream = 0x7363656eULL;

std::string number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

PromptSpec prompt_for(const RunConfig& config, const std::string& action) {
    auto spec = PromptSpec::for_action(action);
    spec.token_budget = config.token_budget;
    return spec;
}

FrozenTokenSource frozen_source(const RunConfig& config) {
    if (!config.frozen_tokens.empty()) {
        return FrozenTokenSource(load_frozen_tokens(TensorContainer::read(config.frozen_tokens), config.model.dim));
    }
    return FrozenTokenSource(std::make_shared<HashTextEncoder>(config.model.dim));
}

void require_compatible(const Dataset& dataset, const DenoiserConfig& model) {
    if (dataset.joints() != model.joints) {
        throw CompatibilityError("dataset has " + std::to_string(dataset.joints()) + " joints, model expects " +
                                 std::to_string(model.joints));
    }
    for (const auto& r : dataset.records) {
        if (r.frames() != model.frames) {
            throw CompatibilityError("record '" + r.id + "' has " + std::to_string(r.frames()) +
                                     " frames, model expects " + std::to_string(model.frames));
        }
    }
}

Dataset open_dataset(const fs::path& path) {
    if (!fs::exists(path)) {
        throw ConfigError("dataset " + path.string() + " does not exist (create one with `posediff synth`)");
    }
    return load_dataset(path);
}

// hash of the parts of a config that must agree for a resume
std::string resume_key(const RunConfig& config) {
    auto j = config.provenance_json();
    j["train"].erase("epochs");
    j["train"].erase("max_steps");
    return fnv1a_hex(j.dump());
}

void write_text(const fs::path& path, const std::string& text) { atomic_write(path, text); }

// keeps the header and rows whose step is at most `last_step`
void truncate_log(const fs::path& path, std::int64_t last_step) {
    std::ifstream in(path);
    if (!in) {
        return;
    }
    std::string line;
    std::string kept;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            kept += line + "\n";
            header = false;
            continue;
        }
        const auto a = line.find(',');
        const auto b = line.find(',', a + 1);
        if (a == std::string::npos || b == std::string::npos) {
            continue;
        }
        if (std::stoll(line.substr(a + 1, b - a - 1)) <= last_step) {
            kept += line + "\n";
        }
    }
    in.close();
    write_text(path, kept);
}

template <typename Scalar>
Checkpoint<Scalar> fresh_checkpoint(const RunConfig& config) {
    Checkpoint<Scalar> ckpt;
    ckpt.state.weights = DenoiserWeights<Scalar>::init(config.model, derive_seed(config.seed, kWeightStream));
    ckpt.state.bank = init_modifiers<Scalar>(prompt_for(config, ""), config.model.dim,
                                             derive_seed(config.seed, kPromptStream));
    ckpt.seed = config.seed;
    ckpt.config = config.provenance_json();
    ckpt.config_hash = config.hash();
    return ckpt;
}

template <typename Scalar>
TrainSummary train_impl(const RunConfig& config, const Dataset& dataset, const fs::path& out_dir, bool resume,
                        std::ostream* progress) {
    const auto schedule = config.schedule.build();
    const auto normalized = normalize(dataset, config.normalization);
    std::vector<TrainingSample<Scalar>> samples;
    for (std::size_t i = 0; i < dataset.records.size(); ++i) {
        const auto& r = dataset.records[i];
        if (!normalized[i].target) {
            throw ConfigError("record '" + r.id + "' has no ground truth and cannot be used for training");
        }
        samples.push_back({normalized[i].keypoints.template cast<Scalar>(), normalized[i].target->template cast<Scalar>(),
                           prompt_for(config, r.action)});
    }

    auto frozen = frozen_source(config);
    const fs::path ckpt_path = out_dir / kCheckpointFile;
    const fs::path log_path = out_dir / kTrainLogFile;

    Checkpoint<Scalar> ckpt;
    if (resume && fs::exists(ckpt_path)) {
        const auto container = TensorContainer::read(ckpt_path);
        const auto stored = config_from_meta(container.meta());
        if (resume_key(stored) != resume_key(config)) {
            throw CompatibilityError("checkpoint " + ckpt_path.string() +
                                     " was written under a different configuration; refusing to resume");
        }
        ckpt = Checkpoint<Scalar>::from_container(container, config.model);
        truncate_log(log_path, ckpt.step);
        if (progress) {
            *progress << "resuming at epoch " << ckpt.epoch << ", step " << ckpt.step << "\n";
        }
    } else {
        ckpt = fresh_checkpoint<Scalar>(config);
        write_text(log_path, "epoch,step,loss,lr,wall_ms\n");
    }
    ckpt.seed = config.seed;
    ckpt.config = config.provenance_json();
    ckpt.config_hash = config.hash();

    std::ofstream log(log_path, std::ios::app);
    if (!log) {
        throw ConfigError("cannot write training log " + log_path.string());
    }
    TrainSummary summary;
    summary.checkpoint = ckpt_path;
    while (ckpt.epoch < config.train.epochs) {
        const std::int64_t skipped = ckpt.epoch_batches;
        const auto result = train_epoch(
            samples, ckpt.state, ckpt.optimizer, schedule, config.train, frozen, ckpt.epoch, config.seed,
            [&](const StepRecord& s) {
                char wall[32];
                std::snprintf(wall, sizeof(wall), "%.3f", s.wall_ms);
                log << s.epoch << ',' << s.step << ',' << number(s.loss) << ',' << number(s.lr) << ',' << wall << '\n';
                log.flush();
            },
            skipped);
        ckpt.step = ckpt.optimizer.step;
        summary.last_epoch_loss = result.mean_loss;
        if (result.stopped_early) {
            ckpt.epoch_batches = skipped + result.steps;
        } else {
            ckpt.epoch += 1;
            ckpt.epoch_batches = 0;
        }
        auto container = ckpt.to_container();
        if (!config.frozen_tokens.empty()) {
            store_frozen_tokens(container, frozen.get(prompt_for(config, "")));
        }
        container.write(ckpt_path);
        if (progress && result.steps > 0 && (result.stopped_early || ckpt.epoch % 50 == 0 || ckpt.epoch == config.train.epochs)) {
            *progress << "epoch " << ckpt.epoch << " step " << ckpt.step << " loss " << result.mean_loss << "\n";
        }
        if (result.stopped_early) {
            break;
        }
    }
    summary.epochs_completed = ckpt.epoch;
    summary.steps = ckpt.step;
    return summary;
}

struct SceneGroup {
    std::string scene;
    std::vector<const SequenceRecord*> records;
};

std::vector<SceneGroup> scenes_of(const Dataset& dataset) {
    std::map<std::string, std::vector<const SequenceRecord*>> grouped;
    for (const auto& r : dataset.records) {
        grouped[r.scene.empty() ? r.id : r.scene].push_back(&r);
    }
    std::vector<SceneGroup> out;
    for (auto& [scene, records] : grouped) {
        std::sort(records.begin(), records.end(), [](const auto* a, const auto* b) {
            return a->character != b->character ? a->character < b->character : a->id < b->id;
        });
        out.push_back({scene, records});
    }
    return out;
}

template <typename Scalar>
void estimate_impl(const TensorContainer& ckpt_container, const RunConfig& config, const Dataset& dataset,
                   const fs::path& out, const SamplerConfig& sampler, std::uint64_t seed, std::ostream* progress) {
    const auto ckpt = Checkpoint<Scalar>::from_container(ckpt_container, config.model);
    const auto schedule = config.schedule.build();
    // a checkpoint trained on precomputed tokens carries them
    auto frozen = ckpt_container.contains("prompt/1/frozen")
                      ? FrozenTokenSource(load_frozen_tokens(ckpt_container, config.model.dim))
                      : frozen_source(config);
    SamplerContext<Scalar> ctx{&ckpt.state.weights, &ckpt.state.bank, &schedule,
                               translation_placement<Scalar>(config.normalization.metric_scale)};

    TensorContainer preds;
    nlohmann::json scenes = nlohmann::json::array();
    nlohmann::json cameras = nlohmann::json::object();
    const Index N = config.model.frames;
    const Index J = config.model.joints;
    const Index root = config.normalization.root_joint;
    for (const auto& group : scenes_of(dataset)) {
        MultiHumanInput<Scalar> input;
        std::vector<const FrozenTokens*> tokens;
        nlohmann::json ids = nlohmann::json::array();
        for (const auto* r : group.records) {
            const auto cam = dataset.camera_for(*r);
            const auto norm = normalize_record(*r, cam, config.normalization);
            SequenceInput<Scalar> in{norm.keypoints.template cast<Scalar>(), r->keypoints_2d, cam, r->presence,
                                     prompt_for(config, r->action)};
            input.characters.push_back(std::move(in));
            ids.push_back(r->id);
            cameras[r->id] = {{"fx", cam.fx}, {"fy", cam.fy}, {"cx", cam.cx}, {"cy", cam.cy},
                              {"fallback", !r->camera.has_value()}};
        }
        for (const auto& ch : input.characters) {
            tokens.push_back(&frozen.get(ch.prompt));
        }
        const auto estimates =
            estimate_multi(input, tokens, ctx, sampler, derive_seed(seed, kSceneStream, fnv1a64(group.scene)));

        const auto C = static_cast<std::int64_t>(estimates.size());
        std::vector<double> poses;
        std::vector<double> index;
        std::vector<double> presence;
        for (std::size_t c = 0; c < estimates.size(); ++c) {
            auto mm = to_relative_mm(estimates[c].pose.template cast<double>(), config.normalization);
            const auto& mask = input.characters[c].presence;
            for (Index n = 0; n < N; ++n) {
                if (mask[static_cast<std::size_t>(n)] != 0) {
                    const Eigen::RowVector3d r0 = mm.joint(n, root);
                    mm.coords().middleRows(n * J, J).rowwise() -= r0;
                }
                presence.push_back(mask[static_cast<std::size_t>(n)]);
            }
            poses.insert(poses.end(), mm.coords().data(), mm.coords().data() + mm.coords().size());
            for (Index i = 0; i < estimates[c].hypothesis_index.size(); ++i) {
                index.push_back(estimates[c].hypothesis_index.data()[i]);
            }
        }
        const std::string base = "pred/" + group.scene + "/";
        preds.put<double>(base + "poses", {C, N, J, 3}, poses);
        preds.put<double>(base + "per_joint_hypothesis_index", {C, N, J}, index);
        preds.put<double>(base + "presence", {C, N}, presence);
        scenes.push_back({{"scene", group.scene}, {"records", ids}});
        if (progress) {
            *progress << "estimated " << group.scene << " (" << C << " character" << (C == 1 ? "" : "s") << ")\n";
        }
    }
    auto& meta = preds.meta();
    meta["kind"] = "predictions";
    meta["units"] = "mm, root-relative";
    meta["config"] = config.provenance_json();
    meta["config_hash"] = config.hash();
    meta["sampler"] = {{"hypotheses", sampler.hypotheses},
                       {"iterations", sampler.iterations},
                       {"deterministic", sampler.deterministic},
                       {"per_frame_jpma", sampler.jpma.per_frame},
                       {"seed", seed}};
    meta["checkpoint"] = {{"epoch", ckpt.epoch}, {"step", ckpt.step}};
    meta["cameras"] = cameras;
    meta["scenes"] = scenes;
    preds.write(out);
}

struct Paired {
    const SequenceRecord* record;
    PoseSequence3D<double> pred;
    PoseSequence3D<double> gt;
};

// present frames of prediction and root-relative ground truth
Paired pair_record(const SequenceRecord& record, const RecordPrediction& pred, Index root) {
    if (!record.gt_3d) {
        throw PairingError("record '" + record.id + "' has no ground truth");
    }
    if (!pred.pose.same_shape(*record.gt_3d)) {
        throw PairingError("prediction for '" + record.id + "' does not match its ground-truth shape");
    }
    return {&record, select_frames(pred.pose, record.presence),
            select_frames(root_relative(*record.gt_3d, root), record.presence)};
}

std::vector<Paired> pair_all(const Dataset& dataset, const std::map<std::string, RecordPrediction>& preds,
                             Index root) {
    std::set<std::string> truth;
    for (const auto& r : dataset.records) {
        if (r.gt_3d && std::any_of(r.presence.begin(), r.presence.end(), [](auto p) { return p != 0; })) {
            truth.insert(r.id);
        }
    }
    std::vector<std::string> missing_pred;
    std::vector<std::string> missing_truth;
    for (const auto& id : truth) {
        if (!preds.count(id)) {
            missing_pred.push_back(id);
        }
    }
    for (const auto& [id, _] : preds) {
        if (!truth.count(id)) {
            missing_truth.push_back(id);
        }
    }
    if (!missing_pred.empty() || !missing_truth.empty()) {
        std::string msg = "predictions and dataset do not pair up;";
        if (!missing_pred.empty()) {
            msg += " without prediction:";
            for (const auto& id : missing_pred) {
                msg += " " + id;
            }
            msg += ";";
        }
        if (!missing_truth.empty()) {
            msg += " without ground truth:";
            for (const auto& id : missing_truth) {
                msg += " " + id;
            }
        }
        throw PairingError(msg);
    }
    std::vector<Paired> out;
    for (const auto& id : truth) {
        out.push_back(pair_record(dataset.find(id), preds.at(id), root));
    }
    return out;
}

Index root_joint_of(const TensorContainer& preds) {
    return config_from_meta(preds.meta()).normalization.root_joint;
}

} // namespace

RunConfig config_from_meta(const nlohmann::json& meta) {
    if (!meta.contains("config")) {
        throw LoadError("container carries no run configuration");
    }
    return RunConfig::from_json(meta.at("config"));
}

void cmd_synth(const SynthOptions& options, const fs::path& out) { save_dataset(synth_generate(options), out); }

TensorContainer initial_checkpoint(const RunConfig& config) {
    config.validate();
    if (config.precision == Precision::f64) {
        return fresh_checkpoint<double>(config).to_container();
    }
    return fresh_checkpoint<float>(config).to_container();
}

TrainSummary cmd_train(const RunConfig& config, const fs::path& dataset_path, const fs::path& out_dir, bool resume,
                       std::ostream* progress) {
    config.validate();
    const auto dataset = open_dataset(dataset_path);
    require_compatible(dataset, config.model);
    fs::create_directories(out_dir);
    if (config.precision == Precision::f64) {
        return train_impl<double>(config, dataset, out_dir, resume, progress);
    }
    return train_impl<float>(config, dataset, out_dir, resume, progress);
}

void cmd_estimate(const fs::path& checkpoint, const fs::path& dataset_path, const fs::path& out,
                  const EstimateOptions& options, std::ostream* progress) {
    if (!fs::exists(checkpoint)) {
        throw ConfigError("checkpoint " + checkpoint.string() + " does not exist (run `posediff train` first)");
    }
    const auto container = TensorContainer::read(checkpoint);
    auto config = config_from_meta(container.meta());
    const auto dataset = open_dataset(dataset_path);
    require_compatible(dataset, config.model);
    auto sampler = config.sampler;
    if (options.hypotheses) {
        sampler.hypotheses = *options.hypotheses;
    }
    if (options.iterations) {
        sampler.iterations = *options.iterations;
    }
    if (options.per_frame_jpma) {
        sampler.jpma.per_frame = *options.per_frame_jpma;
    }
    if (options.deterministic) {
        sampler.deterministic = *options.deterministic;
    }
    sampler.validate();
    if (sampler.iterations > config.schedule.timesteps) {
        throw ConfigError("iterations cannot exceed the schedule's " + std::to_string(config.schedule.timesteps) +
                          " timesteps");
    }
    const std::uint64_t seed = options.seed.value_or(config.seed);
    if (out.has_parent_path()) {
        fs::create_directories(out.parent_path());
    }
    if (config.precision == Precision::f64) {
        estimate_impl<double>(container, config, dataset, out, sampler, seed, progress);
    } else {
        estimate_impl<float>(container, config, dataset, out, sampler, seed, progress);
    }
}

std::map<std::string, RecordPrediction> read_predictions(const TensorContainer& preds) {
    const auto& meta = preds.meta();
    if (meta.value("kind", "") != "predictions") {
        throw LoadError("container does not hold predictions");
    }
    std::map<std::string, RecordPrediction> out;
    for (const auto& s : meta.at("scenes")) {
        const auto scene = s.at("scene").get<std::string>();
        const auto ids = s.at("records").get<std::vector<std::string>>();
        const std::string base = "pred/" + scene + "/";
        if (!preds.contains(base + "poses") || !preds.contains(base + "presence")) {
            throw LoadError("predictions lack tensors for scene '" + scene + "'");
        }
        const auto& shape = preds.entry(base + "poses").shape;
        if (shape.size() != 4 || shape[0] != static_cast<std::int64_t>(ids.size()) || shape[3] != 3) {
            throw LoadError("prediction tensor of scene '" + scene + "' has an unexpected shape");
        }
        const Index N = shape[1];
        const Index J = shape[2];
        const auto poses = preds.values<double>(base + "poses");
        const auto presence = preds.values<double>(base + "presence");
        for (std::size_t c = 0; c < ids.size(); ++c) {
            RecordPrediction p;
            p.pose = PoseSequence3D<double>(
                N, J,
                Eigen::Map<const PoseSequence3D<double>::Coords>(poses.data() + c * static_cast<std::size_t>(N * J * 3),
                                                                 N * J, 3));
            for (Index n = 0; n < N; ++n) {
                p.presence.push_back(static_cast<std::uint8_t>(presence[c * static_cast<std::size_t>(N) + static_cast<std::size_t>(n)]));
            }
            out.emplace(ids[c], std::move(p));
        }
    }
    return out;
}

MetricReport cmd_eval(const fs::path& predictions, const fs::path& dataset_path, const fs::path& out,
                      bool rigid_only, const std::optional<fs::path>& per_joint_out) {
    const auto container = TensorContainer::read(predictions);
    const auto preds = read_predictions(container);
    const auto dataset = open_dataset(dataset_path);
    const auto paired = pair_all(dataset, preds, root_joint_of(container));
    const auto kind = rigid_only ? AlignmentKind::rigid : AlignmentKind::similarity;
    std::vector<SequenceMetrics> rows;
    std::string per_joint = "id,joint,mpjpe_mm\n";
    for (const auto& p : paired) {
        rows.push_back(evaluate_sequence(p.record->id, p.record->action, p.pred, p.gt, kind));
        const auto joints = per_joint_mpjpe(p.pred, p.gt);
        for (Index j = 0; j < joints.size(); ++j) {
            per_joint += p.record->id + "," + std::to_string(j) + "," + number(joints(j)) + "\n";
        }
    }
    auto report = build_report(std::move(rows));
    if (out.has_parent_path()) {
        fs::create_directories(out.parent_path());
    }
    write_text(out, report_csv(report));
    if (per_joint_out) {
        write_text(*per_joint_out, per_joint);
    }
    return report;
}

void cmd_plot(const fs::path& predictions, const fs::path& dataset_path, const std::string& id,
              const fs::path& out_dir) {
    const auto container = TensorContainer::read(predictions);
    const auto preds = read_predictions(container);
    const auto dataset = open_dataset(dataset_path);
    const auto& record = dataset.find(id);
    auto it = preds.find(id);
    if (it == preds.end()) {
        throw LookupError("no prediction for sequence '" + id + "'");
    }
    if (!record.gt_3d) {
        throw ConfigError("sequence '" + id + "' has no ground truth to plot against");
    }
    const Index root = root_joint_of(container);
    const auto cam = dataset.camera_for(record);
    const auto& gt = *record.gt_3d;
    const Index J = gt.joints();

    // both skeletons through the ground-truth root so they overlay in the image
    std::vector<Index> frames;
    std::vector<PoseSequence2D<double>> gt2d;
    std::vector<PoseSequence2D<double>> pred2d;
    for (Index n = 0; n < gt.frames(); ++n) {
        if (record.presence[static_cast<std::size_t>(n)] == 0) {
            continue;
        }
        PoseSequence3D<double> g(1, J, gt.coords().middleRows(n * J, J));
        PoseSequence3D<double> p(1, J, it->second.pose.coords().middleRows(n * J, J));
        p.coords().rowwise() += gt.joint(n, root);
        frames.push_back(n);
        gt2d.push_back(reproject(g, cam));
        pred2d.push_back(reproject(p, cam));
    }
    if (frames.empty()) {
        throw LookupError("sequence '" + id + "' has no present frame");
    }
    Eigen::RowVector2d lo = gt2d.front().coords().colwise().minCoeff();
    Eigen::RowVector2d hi = gt2d.front().coords().colwise().maxCoeff();
    for (std::size_t i = 0; i < frames.size(); ++i) {
        for (const auto* s : {&gt2d[i], &pred2d[i]}) {
            lo = lo.cwiseMin(s->coords().colwise().minCoeff());
            hi = hi.cwiseMax(s->coords().colwise().maxCoeff());
        }
    }
    const double cell = 200.0;
    const double margin = 10.0;
    const double extent = std::max(hi(0) - lo(0), hi(1) - lo(1));
    const double scale = extent > 0.0 ? (cell - 2 * margin) / extent : 1.0;
    const int columns = 4;
    const int rows = static_cast<int>((frames.size() + columns - 1) / columns);

    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << columns * cell << "\" height=\"" << rows * cell
        << "\" data-joints=\"" << J << "\">\n";
    svg << "<title>" << id << ": ground truth (green) and prediction (red)</title>\n";
    auto at = [&](const Eigen::RowVector2d& p, double ox, double oy) {
        return Eigen::RowVector2d(ox + margin + (p(0) - lo(0)) * scale, oy + margin + (p(1) - lo(1)) * scale);
    };
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const double ox = static_cast<double>(i % columns) * cell;
        const double oy = static_cast<double>(i / columns) * cell;
        svg << "<g class=\"frame\" data-frame=\"" << frames[i] << "\">\n";
        svg << "<text x=\"" << ox + 4 << "\" y=\"" << oy + 12 << "\" font-size=\"10\">frame " << frames[i]
            << "</text>\n";
        for (const auto& [pose, tag, color] :
             {std::tuple{&gt2d[i], "gt", "#2a9d3a"}, std::tuple{&pred2d[i], "pred", "#d1342c"}}) {
            for (Index j = 0; j < J; ++j) {
                const int parent = dataset.parents[static_cast<std::size_t>(j)];
                if (parent < 0) {
                    continue;
                }
                const auto a = at(pose->joint(0, j), ox, oy);
                const auto b = at(pose->joint(0, parent), ox, oy);
                svg << "<line class=\"bone-" << tag << "\" x1=\"" << a(0) << "\" y1=\"" << a(1) << "\" x2=\"" << b(0)
                    << "\" y2=\"" << b(1) << "\" stroke=\"" << color << "\" stroke-width=\"1.5\"/>\n";
            }
            for (Index j = 0; j < J; ++j) {
                const auto a = at(pose->joint(0, j), ox, oy);
                svg << "<circle class=\"joint-" << tag << "\" cx=\"" << a(0) << "\" cy=\"" << a(1)
                    << "\" r=\"2\" fill=\"" << color << "\"/>\n";
            }
        }
        svg << "</g>\n";
    }
    svg << "</svg>\n";

    const auto paired = pair_record(record, it->second, root);
    const auto joints = per_joint_mpjpe(paired.pred, paired.gt);
    std::string csv = "id,joint,mpjpe_mm\n";
    for (Index j = 0; j < joints.size(); ++j) {
        csv += id + "," + std::to_string(j) + "," + number(joints(j)) + "\n";
    }
    fs::create_directories(out_dir);
    write_text(out_dir / (id + ".svg"), svg.str());
    write_text(out_dir / (id + "_joint_error.csv"), csv);
}

} // namespace posediff
