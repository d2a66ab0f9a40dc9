#include "posediff/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "posediff/rng.hpp"

namespace posediff {

namespace {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

constexpr std::uint64_t kSynthStream = 0x73796e74ULL;

Mat3 rot_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
Mat3 rot_y(double a) { return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix(); }
Mat3 rot_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

// forward swing of the bone below the joint (bones hang along -y, forward is +z)
Mat3 flex(double a) { return rot_x(-a); }

// rest offsets from parent, mm; y up, x toward the subject's left, z forward
const std::array<Vec3, 17>& rest_offsets() {
    static const std::array<Vec3, 17> offsets{
        Vec3(0, 0, 0),      Vec3(-130, 0, 0), Vec3(0, -450, 0), Vec3(0, -440, 0), Vec3(130, 0, 0),
        Vec3(0, -450, 0),   Vec3(0, -440, 0), Vec3(0, 230, 0),  Vec3(0, 250, 0),  Vec3(0, 110, 0),
        Vec3(0, 120, 0),    Vec3(170, 0, 0),  Vec3(0, -280, 0), Vec3(0, -250, 0), Vec3(-170, 0, 0),
        Vec3(0, -280, 0),   Vec3(0, -250, 0)};
    return offsets;
}

struct Frame17 {
    std::array<Mat3, 17> local;
    Vec3 root;  // world position of the hip
};

struct MotionParams {
    double phase0 = 0.0;
    double cycles = 1.0;
    double amplitude = 1.0;
    double heading = 0.0;
};

Frame17 motion_frame(MotionKind kind, double phase, double progress, const MotionParams& mp, double frames) {
    Frame17 f;
    for (auto& r : f.local) {
        r = Mat3::Identity();
    }
    const double a = mp.amplitude;
    const double s = std::sin(phase);
    f.root = Vec3(0, 920, 0);
    switch (kind) {
    case MotionKind::walk_cycle: {
        const double advance = std::min(30.0, 800.0 / frames) * progress * frames;
        f.root += Vec3(0, 15.0 * std::cos(2.0 * phase), advance);
        f.local[1] = flex(0.45 * a * s);
        f.local[4] = flex(-0.45 * a * s);
        f.local[2] = flex(-(0.15 + 0.5 * a * std::max(0.0, std::sin(phase + 1.2))));
        f.local[5] = flex(-(0.15 + 0.5 * a * std::max(0.0, std::sin(phase + 1.2 + std::numbers::pi))));
        f.local[7] = rot_y(0.1 * a * s);
        f.local[14] = flex(-0.35 * a * s) * rot_z(-0.1);
        f.local[11] = flex(0.35 * a * s) * rot_z(0.1);
        f.local[15] = flex(0.3 + 0.1 * s);
        f.local[12] = flex(0.3 - 0.1 * s);
        break;
    }
    case MotionKind::arm_wave: {
        f.local[7] = rot_z(0.05 * a * s);
        f.local[11] = rot_z(1.3 + 0.6 * a * s);
        f.local[14] = rot_z(-(1.3 + 0.6 * a * std::sin(phase + 0.5)));
        f.local[12] = rot_z(0.6 + 0.5 * a * std::sin(phase + 1.0));
        f.local[15] = rot_z(-(0.6 + 0.5 * a * std::sin(phase + 1.5)));
        f.local[2] = flex(-0.05);
        f.local[5] = flex(-0.05);
        f.local[9] = flex(0.1 * std::sin(phase * 0.5));
        break;
    }
    case MotionKind::sit: {
        const double d = 0.5 * (1.0 - std::cos(phase)) * std::min(1.0, a);
        f.root += Vec3(0, -420.0 * d, -100.0 * d);
        f.local[1] = flex(1.4 * d);
        f.local[4] = flex(1.4 * d);
        f.local[2] = flex(-1.5 * d);
        f.local[5] = flex(-1.5 * d);
        f.local[7] = flex(-0.3 * d);
        f.local[11] = flex(0.3 * d);
        f.local[14] = flex(0.3 * d);
        f.local[12] = flex(0.4 * d);
        f.local[15] = flex(0.4 * d);
        break;
    }
    }
    f.local[0] = rot_y(mp.heading) * f.local[0];
    return f;
}

// world positions of the kept joints; each kept joint hangs from its nearest
// kept ancestor through the summed rest offsets, rotated by that ancestor's
// global frame, so edge lengths never change
std::vector<Vec3> pose_world(const Frame17& f, const std::vector<Index>& kept, const std::vector<int>& reduced_parents,
                             const std::array<Vec3, 17>& offsets) {
    const auto& parents = standard17_parents();
    std::array<Mat3, 17> global;
    for (int j = 0; j < 17; ++j) {
        global[j] = parents[j] < 0 ? f.local[j] : global[parents[j]] * f.local[j];
    }
    std::vector<Vec3> out(kept.size());
    for (std::size_t k = 0; k < kept.size(); ++k) {
        const int j = static_cast<int>(kept[k]);
        if (reduced_parents[k] < 0) {
            out[k] = f.root;
            continue;
        }
        const int q = static_cast<int>(kept[static_cast<std::size_t>(reduced_parents[k])]);
        Vec3 sum = Vec3::Zero();
        for (int a = j; a != q; a = parents[a]) {
            sum += offsets[a];
        }
        out[k] = out[static_cast<std::size_t>(reduced_parents[k])] + global[q] * sum;
    }
    return out;
}

std::string padded(int v, int width) {
    auto s = std::to_string(v);
    return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

bool frame_is_zero(const Matrix<double>& m) { return m.isZero(0); }

template <int Dims>
bool absent_frames_zero(const PoseSequence<double, Dims>& pose, const std::vector<std::uint8_t>& presence) {
    const Index J = pose.joints();
    for (Index n = 0; n < pose.frames(); ++n) {
        if (presence[static_cast<std::size_t>(n)] == 0 && !frame_is_zero(pose.coords().middleRows(n * J, J))) {
            return false;
        }
    }
    return true;
}

} // namespace

const std::array<std::string, 4>& PartMapping::names() {
    static const std::array<std::string, 4> n{"head", "body", "arms", "legs"};
    return n;
}

PartMapping PartMapping::standard17() {
    PartMapping p;
    p.groups = {std::vector<Index>{9, 10}, std::vector<Index>{0, 7, 8}, std::vector<Index>{11, 12, 13, 14, 15, 16},
                std::vector<Index>{1, 2, 3, 4, 5, 6}};
    return p;
}

void PartMapping::validate(Index joints) const {
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].empty()) {
            throw ConfigError("part group '" + names()[g] + "' is empty");
        }
        for (Index j : groups[g]) {
            if (j < 0 || j >= joints) {
                throw ConfigError("part group '" + names()[g] + "' names joint " + std::to_string(j) +
                                  " outside [0, " + std::to_string(joints) + ")");
            }
        }
    }
}

nlohmann::json PartMapping::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t g = 0; g < groups.size(); ++g) {
        j[names()[g]] = groups[g];
    }
    return j;
}

PartMapping PartMapping::from_json(const nlohmann::json& j) {
    PartMapping p;
    for (std::size_t g = 0; g < p.groups.size(); ++g) {
        p.groups[g] = j.at(names()[g]).get<std::vector<Index>>();
    }
    return p;
}

bool SequenceRecord::all_present() const {
    return std::all_of(presence.begin(), presence.end(), [](std::uint8_t p) { return p != 0; });
}

void SequenceRecord::validate() const {
    const std::string where = "record '" + id + "': ";
    if (id.empty()) {
        throw LoadError("record with an empty id");
    }
    if (static_cast<Index>(presence.size()) != frames()) {
        throw LoadError(where + "presence has " + std::to_string(presence.size()) + " entries for " +
                        std::to_string(frames()) + " frames");
    }
    if (gt_3d && !gt_3d->same_shape(PoseSequence3D<double>(frames(), joints()))) {
        throw LoadError(where + "2D keypoints and 3D ground truth disagree on N or J");
    }
    if (camera) {
        camera->validate();
    }
    if (!absent_frames_zero(keypoints_2d, presence) || (gt_3d && !absent_frames_zero(*gt_3d, presence))) {
        throw LoadError(where + "absent frames must hold zeros");
    }
}

Index Dataset::joints() const {
    if (records.empty()) {
        throw LoadError("dataset has no records");
    }
    return records.front().joints();
}

CameraIntrinsics Dataset::camera_for(const SequenceRecord& record) const {
    return record.camera ? *record.camera : CameraIntrinsics::fallback(image_size[0], image_size[1]);
}

const SequenceRecord& Dataset::find(const std::string& id) const {
    for (const auto& r : records) {
        if (r.id == id) {
            return r;
        }
    }
    throw LookupError("no sequence with id '" + id + "'");
}

void Dataset::validate() const {
    const Index J = joints();
    std::set<std::string> seen;
    for (const auto& r : records) {
        r.validate();
        if (!seen.insert(r.id).second) {
            throw LoadError("record '" + r.id + "' appears twice");
        }
        if (r.joints() != J) {
            throw LoadError("record '" + r.id + "' has " + std::to_string(r.joints()) + " joints, dataset has " +
                            std::to_string(J));
        }
    }
    if (static_cast<Index>(parents.size()) != J) {
        throw LoadError("skeleton has " + std::to_string(parents.size()) + " parents for " + std::to_string(J) +
                        " joints");
    }
    parts.validate(J);
}

TensorContainer dataset_to_container(const Dataset& dataset) {
    dataset.validate();
    TensorContainer c;
    nlohmann::json sequences = nlohmann::json::array();
    for (const auto& r : dataset.records) {
        const std::string base = "seq/" + r.id + "/";
        const std::int64_t N = r.frames();
        const std::int64_t J = r.joints();
        c.put<double>(base + "keypoints_2d", {N, J, 2},
                      std::span<const double>(r.keypoints_2d.coords().data(), static_cast<std::size_t>(N * J * 2)));
        if (r.gt_3d) {
            c.put<double>(base + "gt_3d", {N, J, 3},
                          std::span<const double>(r.gt_3d->coords().data(), static_cast<std::size_t>(N * J * 3)));
        }
        std::vector<double> presence(r.presence.begin(), r.presence.end());
        c.put<double>(base + "presence", {N}, presence);
        nlohmann::json cam = nullptr;
        if (r.camera) {
            cam = {{"fx", r.camera->fx}, {"fy", r.camera->fy}, {"cx", r.camera->cx}, {"cy", r.camera->cy}};
        }
        sequences.push_back({{"id", r.id},
                             {"scene", r.scene},
                             {"character", r.character},
                             {"action", r.action},
                             {"frames", N},
                             {"joints", J},
                             {"camera", cam},
                             {"keypoints_2d", base + "keypoints_2d"},
                             {"gt_3d", r.gt_3d ? nlohmann::json(base + "gt_3d") : nlohmann::json(nullptr)},
                             {"presence", base + "presence"}});
    }
    auto& meta = c.meta();
    meta["kind"] = "dataset";
    meta["dataset_version"] = kDatasetVersion;
    meta["units"] = "mm";
    meta["coordinates"] = "camera frame, x right, y down, z forward; keypoints in pixels";
    meta["image_size"] = dataset.image_size;
    meta["skeleton"] = {{"parents", dataset.parents}};
    meta["parts"] = dataset.parts.to_json();
    meta["sequences"] = sequences;
    return c;
}

Dataset dataset_from_container(const TensorContainer& c) {
    const auto& meta = c.meta();
    if (meta.value("kind", "") != "dataset") {
        throw LoadError("container is not a dataset");
    }
    if (meta.value("dataset_version", -1) != kDatasetVersion) {
        throw LoadError("unsupported dataset version " + meta.value("dataset_version", nlohmann::json(nullptr)).dump());
    }
    Dataset d;
    try {
        d.image_size = meta.at("image_size").get<std::array<double, 2>>();
        d.parents = meta.at("skeleton").at("parents").get<std::vector<int>>();
        d.parts = PartMapping::from_json(meta.at("parts"));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("dataset manifest: ") + e.what());
    }
    for (const auto& s : meta.at("sequences")) {
        const std::string id = s.value("id", "");
        const std::string where = "record '" + id + "': ";
        try {
            SequenceRecord r;
            r.id = id;
            r.scene = s.value("scene", id);
            r.character = s.value("character", 0);
            r.action = s.value("action", "");
            const auto N = s.at("frames").get<std::int64_t>();
            const auto J = s.at("joints").get<std::int64_t>();
            if (N <= 0 || J <= 0) {
                throw LoadError(where + "N and J must be positive");
            }
            auto fetch = [&](const std::string& name, std::vector<std::int64_t> shape) {
                if (!c.contains(name)) {
                    throw LoadError(where + "missing tensor '" + name + "'");
                }
                if (c.entry(name).shape != shape) {
                    nlohmann::json got = c.entry(name).shape;
                    nlohmann::json want = shape;
                    throw LoadError(where + "tensor '" + name + "' has shape " + got.dump() + ", manifest implies " +
                                    want.dump());
                }
                return c.values<double>(name);
            };
            const auto kp = fetch(s.at("keypoints_2d").get<std::string>(), {N, J, 2});
            r.keypoints_2d = PoseSequence2D<double>(
                N, J, Eigen::Map<const PoseSequence2D<double>::Coords>(kp.data(), N * J, 2));
            if (!s.at("gt_3d").is_null()) {
                const auto gt = fetch(s.at("gt_3d").get<std::string>(), {N, J, 3});
                r.gt_3d = PoseSequence3D<double>(
                    N, J, Eigen::Map<const PoseSequence3D<double>::Coords>(gt.data(), N * J, 3));
            }
            for (double p : fetch(s.at("presence").get<std::string>(), {N})) {
                if (p != 0.0 && p != 1.0) {
                    throw LoadError(where + "presence values must be 0 or 1");
                }
                r.presence.push_back(static_cast<std::uint8_t>(p));
            }
            if (!s.at("camera").is_null()) {
                const auto& cam = s.at("camera");
                r.camera = CameraIntrinsics{cam.at("fx").get<double>(), cam.at("fy").get<double>(),
                                            cam.at("cx").get<double>(), cam.at("cy").get<double>()};
            }
            d.records.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw LoadError(where + e.what());
        } catch (const LoadError&) {
            throw;
        } catch (const Error& e) {
            throw LoadError(where + e.what());
        }
    }
    try {
        d.validate();
    } catch (const LoadError&) {
        throw;
    } catch (const Error& e) {
        throw LoadError(e.what());
    }
    return d;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
    dataset_to_container(dataset).write(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
    return dataset_from_container(TensorContainer::read(path));
}

MotionKind parse_motion_kind(const std::string& name) {
    if (name == "walk_cycle") {
        return MotionKind::walk_cycle;
    }
    if (name == "arm_wave") {
        return MotionKind::arm_wave;
    }
    if (name == "sit") {
        return MotionKind::sit;
    }
    throw ConfigError("unknown motion '" + name + "' (expected walk_cycle, arm_wave or sit)");
}

std::string to_string(MotionKind kind) {
    switch (kind) {
    case MotionKind::walk_cycle:
        return "walk_cycle";
    case MotionKind::arm_wave:
        return "arm_wave";
    case MotionKind::sit:
        return "sit";
    }
    return "walk_cycle";
}

const std::vector<int>& standard17_parents() {
    static const std::vector<int> parents{-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15};
    return parents;
}

std::vector<Index> reduced_joint_set(Index joints) {
    if (joints < 5 || joints > 17) {
        throw ConfigError("synthetic skeletons support 5 to 17 joints, got " + std::to_string(joints));
    }
    // the first five cover body, head, arms and legs
    static const std::array<Index, 17> priority{0, 10, 13, 3, 16, 6, 8, 12, 15, 2, 5, 11, 14, 1, 4, 7, 9};
    std::vector<Index> kept(priority.begin(), priority.begin() + joints);
    std::sort(kept.begin(), kept.end());
    return kept;
}

Matrix<double> bone_lengths(const PoseSequence3D<double>& pose, const std::vector<int>& parents) {
    if (static_cast<Index>(parents.size()) != pose.joints()) {
        throw ShapeError("bone_lengths: parent list does not match joint count");
    }
    Matrix<double> out = Matrix<double>::Zero(pose.frames(), pose.joints());
    for (Index n = 0; n < pose.frames(); ++n) {
        for (Index j = 0; j < pose.joints(); ++j) {
            if (parents[static_cast<std::size_t>(j)] >= 0) {
                out(n, j) = (pose.joint(n, j) - pose.joint(n, parents[static_cast<std::size_t>(j)])).norm();
            }
        }
    }
    return out;
}

Dataset synth_generate(const SynthOptions& o) {
    if (o.sequences < 1 || o.frames < 1 || o.characters < 1) {
        throw ConfigError("synth: sequences, frames and characters must be positive");
    }
    const auto kept = reduced_joint_set(o.joints);
    const auto& full_parents = standard17_parents();
    std::vector<int> parents(kept.size(), -1);
    std::vector<int> position(17, -1);
    for (std::size_t k = 0; k < kept.size(); ++k) {
        position[static_cast<std::size_t>(kept[k])] = static_cast<int>(k);
    }
    for (std::size_t k = 0; k < kept.size(); ++k) {
        for (int a = full_parents[static_cast<std::size_t>(kept[k])]; a >= 0; a = full_parents[static_cast<std::size_t>(a)]) {
            if (position[static_cast<std::size_t>(a)] >= 0) {
                parents[k] = position[static_cast<std::size_t>(a)];
                break;
            }
        }
    }
    Dataset d;
    d.parents = parents;
    const auto standard = PartMapping::standard17();
    for (std::size_t g = 0; g < 4; ++g) {
        for (Index j : standard.groups[g]) {
            if (position[static_cast<std::size_t>(j)] >= 0) {
                d.parts.groups[g].push_back(position[static_cast<std::size_t>(j)]);
            }
        }
    }

    const Index N = o.frames;
    const Index J = o.joints;
    static const std::array<MotionKind, 3> kinds{MotionKind::walk_cycle, MotionKind::arm_wave, MotionKind::sit};
    for (int s = 0; s < o.sequences; ++s) {
        Rng rng(derive_seed(o.seed, kSynthStream, static_cast<std::uint64_t>(s)));
        const auto motion = o.mixed ? kinds[static_cast<std::size_t>(s) % kinds.size()] : o.motion;
        CameraIntrinsics cam;
        cam.fx = rng.uniform(1000.0, 1200.0);
        cam.fy = cam.fx * rng.uniform(0.99, 1.01);
        cam.cx = 500.0 + rng.uniform(-20.0, 20.0);
        cam.cy = 500.0 + rng.uniform(-20.0, 20.0);
        const double camera_height = rng.uniform(1300.0, 1700.0);
        const double depth = rng.uniform(4000.0, 5500.0);
        for (int c = 0; c < o.characters; ++c) {
            const double scale = rng.uniform(0.9, 1.1);
            auto offsets = rest_offsets();
            for (std::size_t j = 1; j < offsets.size(); ++j) {
                offsets[j] *= scale * rng.uniform(0.97, 1.03);
            }
            MotionParams mp;
            mp.phase0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
            mp.cycles = rng.uniform(0.8, 1.5);
            mp.amplitude = rng.uniform(0.8, 1.2);
            mp.heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const Vec3 place(1200.0 * (c - 0.5 * (o.characters - 1)) + rng.uniform(-300.0, 300.0), 0.0,
                             depth + rng.uniform(-300.0, 300.0));

            std::vector<std::uint8_t> presence(static_cast<std::size_t>(N), 1);
            if (c > 0 && N >= 4) {
                const auto len = rng.uniform_int(N / 4, N / 2);
                const auto start = rng.uniform_int(0, N - len);
                std::fill(presence.begin() + start, presence.begin() + start + len, 0);
            }

            SequenceRecord r;
            r.scene = o.characters == 1 ? "seq" + padded(s, 4) : "scene" + padded(s, 4);
            r.id = o.characters == 1 ? r.scene : r.scene + "_c" + std::to_string(c);
            r.character = c;
            r.action = to_string(motion);
            r.camera = cam;
            r.presence = presence;
            PoseSequence3D<double> gt(N, J);
            for (Index n = 0; n < N; ++n) {
                if (presence[static_cast<std::size_t>(n)] == 0) {
                    continue;
                }
                const double progress = N > 1 ? static_cast<double>(n) / static_cast<double>(N) : 0.0;
                const double phase = mp.phase0 + 2.0 * std::numbers::pi * mp.cycles * progress;
                auto frame = motion_frame(motion, phase, progress, mp, static_cast<double>(N));
                frame.root = rot_y(mp.heading) * (frame.root - Vec3(0, 920, 0)) + Vec3(0, 920, 0);
                const auto world = pose_world(frame, kept, parents, offsets);
                for (Index j = 0; j < J; ++j) {
                    const Vec3 w = world[static_cast<std::size_t>(j)] + place;
                    gt.joint(n, j) = Eigen::RowVector3d(w.x(), camera_height - w.y(), w.z());
                }
            }
            PoseSequence2D<double> kp(N, J);
            for (Index n = 0; n < N; ++n) {
                if (presence[static_cast<std::size_t>(n)] == 0) {
                    continue;
                }
                PoseSequence3D<double> one(1, J, gt.coords().middleRows(n * J, J));
                kp.coords().middleRows(n * J, J) = reproject(one, cam).coords();
            }
            r.keypoints_2d = std::move(kp);
            r.gt_3d = std::move(gt);
            d.records.push_back(std::move(r));
        }
    }
    d.validate();
    return d;
}

NormalizationMode parse_normalization_mode(const std::string& name) {
    if (name == "root_centered") {
        return NormalizationMode::root_centered;
    }
    if (name == "image_normalized") {
        return NormalizationMode::image_normalized;
    }
    throw ConfigError("unknown normalization '" + name + "' (expected root_centered or image_normalized)");
}

std::string to_string(NormalizationMode mode) {
    return mode == NormalizationMode::root_centered ? "root_centered" : "image_normalized";
}

nlohmann::json NormalizationParams::to_json() const {
    return {{"mode", to_string(mode)},
            {"metric_scale", metric_scale},
            {"keypoint_scale", keypoint_scale},
            {"root_joint", root_joint}};
}

NormalizationParams NormalizationParams::from_json(const nlohmann::json& j) {
    NormalizationParams p;
    p.mode = parse_normalization_mode(j.at("mode").get<std::string>());
    p.metric_scale = j.at("metric_scale").get<double>();
    p.keypoint_scale = j.at("keypoint_scale").get<double>();
    p.root_joint = j.at("root_joint").get<Index>();
    return p;
}

PoseSequence3D<double> root_relative(const PoseSequence3D<double>& pose, Index root_joint) {
    PoseSequence3D<double> out = pose;
    const Index J = pose.joints();
    for (Index n = 0; n < pose.frames(); ++n) {
        const Eigen::RowVector3d root = pose.joint(n, root_joint);
        out.coords().middleRows(n * J, J).rowwise() -= root;
    }
    return out;
}

NormalizedRecord normalize_record(const SequenceRecord& record, const CameraIntrinsics& cam,
                                  const NormalizationParams& params) {
    if (!(params.metric_scale > 0.0) || !(params.keypoint_scale > 0.0)) {
        throw ConfigError("normalization scales must be positive");
    }
    const Index N = record.frames();
    const Index J = record.joints();
    if (params.root_joint < 0 || params.root_joint >= J) {
        throw ConfigError("normalization root joint outside the skeleton");
    }
    NormalizedRecord out{PoseSequence2D<double>(N, J), std::nullopt, {}};
    out.state.camera = cam;
    out.state.root_3d.setZero(N, 3);
    out.state.root_2d.setZero(N, 2);
    for (Index n = 0; n < N; ++n) {
        if (record.presence[static_cast<std::size_t>(n)] == 0) {
            continue;
        }
        for (Index j = 0; j < J; ++j) {
            const auto p = record.keypoints_2d.joint(n, j);
            out.keypoints.joint(n, j) = Eigen::RowVector2d(params.keypoint_scale * (p(0) - cam.cx) / cam.fx,
                                                           params.keypoint_scale * (p(1) - cam.cy) / cam.fy);
        }
        if (params.mode == NormalizationMode::root_centered) {
            out.state.root_2d.row(n) = out.keypoints.joint(n, params.root_joint);
            out.keypoints.coords().middleRows(n * J, J).rowwise() -= out.state.root_2d.row(n);
        }
    }
    if (record.gt_3d) {
        PoseSequence3D<double> target(N, J);
        for (Index n = 0; n < N; ++n) {
            if (record.presence[static_cast<std::size_t>(n)] == 0) {
                continue;
            }
            out.state.root_3d.row(n) = record.gt_3d->joint(n, params.root_joint);
            target.coords().middleRows(n * J, J) =
                (record.gt_3d->coords().middleRows(n * J, J).rowwise() - out.state.root_3d.row(n)) /
                params.metric_scale;
        }
        out.target = std::move(target);
    } else if (params.mode == NormalizationMode::root_centered) {
        throw ConfigError("record '" + record.id + "': root_centered normalization needs ground truth");
    }
    return out;
}

std::vector<NormalizedRecord> normalize(const Dataset& dataset, const NormalizationParams& params) {
    std::vector<NormalizedRecord> out;
    out.reserve(dataset.records.size());
    for (const auto& r : dataset.records) {
        out.push_back(normalize_record(r, dataset.camera_for(r), params));
    }
    return out;
}

PoseSequence3D<double> to_relative_mm(const PoseSequence3D<double>& pose, const NormalizationParams& params) {
    return {pose.frames(), pose.joints(), pose.coords() * params.metric_scale};
}

PoseSequence3D<double> denormalize_pose(const PoseSequence3D<double>& pose, const NormalizationState& state,
                                        const NormalizationParams& params,
                                        const std::vector<std::uint8_t>& presence) {
    auto out = to_relative_mm(pose, params);
    const Index J = pose.joints();
    for (Index n = 0; n < pose.frames(); ++n) {
        if (!presence.empty() && presence[static_cast<std::size_t>(n)] == 0) {
            continue;
        }
        out.coords().middleRows(n * J, J).rowwise() += state.root_3d.row(n);
    }
    return out;
}

PoseSequence2D<double> denormalize_keypoints(const PoseSequence2D<double>& keypoints, const NormalizationState& state,
                                             const NormalizationParams& params,
                                             const std::vector<std::uint8_t>& presence) {
    const Index J = keypoints.joints();
    PoseSequence2D<double> out(keypoints.frames(), J);
    const auto& cam = state.camera;
    for (Index n = 0; n < keypoints.frames(); ++n) {
        if (!presence.empty() && presence[static_cast<std::size_t>(n)] == 0) {
            continue;
        }
        for (Index j = 0; j < J; ++j) {
            Eigen::RowVector2d p = keypoints.joint(n, j);
            if (params.mode == NormalizationMode::root_centered) {
                p += state.root_2d.row(n);
            }
            out.joint(n, j) = Eigen::RowVector2d(p(0) / params.keypoint_scale * cam.fx + cam.cx,
                                                 p(1) / params.keypoint_scale * cam.fy + cam.cy);
        }
    }
    return out;
}

} // namespace posediff
