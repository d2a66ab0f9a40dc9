// Acceptance checks; one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <sstream>
#include <string>

#include <Eigen/Geometry>

#include "posediff/commands.hpp"
#include "posediff/sampler.hpp"
#include "posediff/training.hpp"

using namespace posediff;
namespace fs = std::filesystem;

namespace {

const fs::path kScratch = fs::temp_directory_path() / "posediff_acceptance";

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), f, a);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const NoiseSchedule& schedule() {
    static const auto s = build_schedule(1000, ScheduleKind::cosine, 1e-4, 0.999);
    return s;
}

// 1
Outcome diffusion_round_trip() {
    const auto start = std::chrono::steady_clock::now();
    Rng pick(1);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int t = static_cast<int>(pick.uniform_int(1, 1000));
        const Index n = pick.uniform_int(1, 8), j = pick.uniform_int(1, 17);
        Rng draw(1000 + trial);
        const PoseSequence3D<double> y0(n, j, draw.gaussian_matrix<double>(n * j, 3, 0.5));
        const auto noise = NoiseSample<double>::draw(n, j, 5000 + trial);
        const auto yt = forward_diffuse(y0, t, schedule(), noise);
        const auto eps = ddim_epsilon(yt, y0, t, schedule());
        worst = std::max(worst, (eps.coords() - noise.epsilon.coords()).cwiseAbs().maxCoeff() /
                                    noise.epsilon.coords().cwiseAbs().maxCoeff());
    }
    const double secs = seconds_since(start);
    return {worst <= 1e-10 && secs < 1.0, fmt("max rel err %.3g", worst) + fmt(", %.3f s", secs)};
}

// 2
Outcome ddim_fixed_point() {
    Rng rng(2);
    const PoseSequence3D<double> y0(6, 5, rng.gaussian_matrix<double>(30, 3, 0.3));
    const auto init = sample_initial_hypotheses<double>(4, 6, 5, 22);
    const DenoiseFn<double> oracle = [&](const PoseSequence3D<double>&, int) { return y0; };
    const auto out = ddim_loop(init, 10, schedule(), oracle, true);
    double worst = 0.0;
    for (const auto& h : out.hypotheses) {
        worst = std::max(worst, (h.coords() - y0.coords()).cwiseAbs().maxCoeff());
    }
    return {worst <= 1e-8, fmt("max |Y - Y0| %.3g", worst)};
}

// 3
Outcome forward_moments() {
    const int samples = 10000;
    const Index n = 2, j = 2;
    Rng rng(3);
    const PoseSequence3D<double> y0(n, j, rng.gaussian_matrix<double>(n * j, 3, 0.5));
    int bad = 0;
    std::string detail;
    for (int t : {50, 500, 950}) {
        const double ab = schedule().alpha_bar(t);
        Eigen::ArrayXXd sum = Eigen::ArrayXXd::Zero(n * j, 3), sq = sum;
        for (int s = 0; s < samples; ++s) {
            const auto yt = forward_diffuse(y0, t, schedule(), NoiseSample<double>::draw(n, j, derive_seed(3, t, s)));
            sum += yt.coords().array();
            sq += yt.coords().array().square();
        }
        const Eigen::ArrayXXd mean = sum / samples;
        const Eigen::ArrayXXd var = (sq - samples * mean.square()) / (samples - 1);
        const double want_var = 1.0 - ab;
        const double se_mean = std::sqrt(want_var / samples);
        const double se_var = want_var * std::sqrt(2.0 / (samples - 1));
        const Eigen::ArrayXXd want_mean = std::sqrt(ab) * y0.coords().array();
        const double zm = ((mean - want_mean).abs() / se_mean).maxCoeff();
        const double zv = ((var - want_var).abs() / se_var).maxCoeff();
        bad += zm > 3.0 || zv > 3.0;
        detail += fmt(" t=%g:", t) + fmt(" mean %.2f SE", zm) + fmt(", var %.2f SE", zv);
    }
    return {bad == 0, "worst deviation" + detail};
}

// 4
Outcome gradient_oracle() {
    const auto start = std::chrono::steady_clock::now();
    DenoiserConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.frames = 2;
    cfg.joints = 3;
    TrainableState<double> st{DenoiserWeights<double>::init(cfg, 4), init_modifiers<double>(PromptSpec{}, 8, 4)};
    Rng rng(4);
    for (auto& [_, m] : st.weights.tensors()) {
        m += rng.gaussian_matrix<double>(m.rows(), m.cols(), 0.05);
    }
    const auto frozen = encode_texts(PromptSpec{}, HashTextEncoder(8));
    const PoseSequence3D<double> yt(2, 3, rng.gaussian_matrix<double>(6, 3));
    const PoseSequence2D<double> x(2, 3, rng.gaussian_matrix<double>(6, 2));
    const PoseSequence3D<double> target(2, 3, rng.gaussian_matrix<double>(6, 3));
    const auto report = gradient_check(st, frozen, PromptSpec{}, yt, x, 400, target);
    bool has_cross = false, has_pts = false;
    double worst = 0.0;
    std::string worst_name;
    for (const auto& e : report) {
        has_cross |= e.name.rfind("cross/", 0) == 0;
        has_pts |= e.name.rfind("pts/", 0) == 0;
        if (e.relative_error >= worst) {
            worst = e.relative_error;
            worst_name = e.name;
        }
    }
    const double secs = seconds_since(start);
    const bool complete = report.size() == st.weights.tensors().size() + kPromptCount && has_cross && has_pts;
    return {complete && worst <= 1e-4 && secs < 120.0,
            std::to_string(report.size()) + " tensors, worst rel err " + fmt("%.3g", worst) + " (" + worst_name +
                ")" + fmt(", %.1f s", secs)};
}

SynthOptions train_set() {
    SynthOptions o;
    o.sequences = 8;
    o.frames = 16;
    o.joints = 17;
    o.mixed = true;
    return o;
}

double estimate_and_eval(const fs::path& ckpt, const fs::path& data, const fs::path& dir, int hypotheses,
                         int iterations) {
    EstimateOptions eo;
    eo.hypotheses = hypotheses;
    eo.iterations = iterations;
    eo.seed = 5;
    cmd_estimate(ckpt, data, dir / "pred.ptc", eo);
    return cmd_eval(dir / "pred.ptc", data, dir / "report.csv", false).aggregate.mpjpe_mm;
}

// 5
Outcome overfit() {
    const auto dir = kScratch / "overfit";
    fs::create_directories(dir);
    const auto data = dir / "data.ptc";
    cmd_synth(train_set(), data);
    auto config = RunConfig::preset_named("tiny");
    config.train.max_steps = 2000;
    initial_checkpoint(config).write(dir / "initial.ptc");
    fs::create_directories(dir / "before");
    const double before = estimate_and_eval(dir / "initial.ptc", data, dir / "before", 1, 1);
    const auto start = std::chrono::steady_clock::now();
    const auto summary = cmd_train(config, data, dir / "run", false);
    const double secs = seconds_since(start);
    fs::create_directories(dir / "after");
    const double after = estimate_and_eval(summary.checkpoint, data, dir / "after", 1, 1);
    const double ratio = after / before;
    return {summary.steps <= 2000 && ratio < 0.05 && secs < 600.0,
            fmt("MPJPE %.1f", before) + fmt(" -> %.1f mm", after) + fmt(" (%.2f%%)", 100.0 * ratio) + " after " +
                std::to_string(summary.steps) + fmt(" steps, %.0f s", secs)};
}

// reprojection distance of joint j summed over frames
double joint_error(const PoseSequence3D<double>& p, const PoseSequence2D<double>& obs, const CameraIntrinsics& cam,
                   Index j) {
    double total = 0.0;
    for (Index n = 0; n < obs.frames(); ++n) {
        const auto q = p.joint(n, j);
        total += std::hypot(cam.fx * q(0) / q(2) + cam.cx - obs.joint(n, j)(0),
                            cam.fy * q(1) / q(2) + cam.cy - obs.joint(n, j)(1));
    }
    return total;
}

// 6
Outcome jpma_oracle() {
    Rng rng(6);
    const CameraIntrinsics cam{1000.0, 1100.0, 500.0, 400.0};
    auto camera_pose = [&](Index n, Index j) {
        PoseSequence3D<double> p(n, j);
        for (Index r = 0; r < n * j; ++r) {
            p.coords()(r, 0) = rng.gaussian(0.0, 500.0);
            p.coords()(r, 1) = rng.gaussian(0.0, 500.0);
            p.coords()(r, 2) = rng.uniform(3000.0, 6000.0);
        }
        return p;
    };
    int mismatches = 0;
    int worse = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int H = 1 + static_cast<int>(rng.uniform_int(0, 4));
        const Index J = rng.uniform_int(1, 4);
        const Index N = rng.uniform_int(1, 4);
        HypothesisSet<double> set;
        for (int h = 0; h < H; ++h) {
            set.hypotheses.push_back(camera_pose(N, J));
        }
        const auto obs = reproject(camera_pose(N, J), cam);
        const auto res = jpma_aggregate(set, obs, cam);
        for (Index j = 0; j < J; ++j) {
            int best = 0;
            double best_err = std::numeric_limits<double>::infinity();
            for (int h = 0; h < H; ++h) {
                const double e = joint_error(set.hypotheses[static_cast<std::size_t>(h)], obs, cam, j);
                if (e < best_err) {
                    best_err = e;
                    best = h;
                }
            }
            const double agg = joint_error(res.pose, obs, cam, j);
            for (int h = 0; h < H; ++h) {
                worse += agg > joint_error(set.hypotheses[static_cast<std::size_t>(h)], obs, cam, j);
            }
            for (Index n = 0; n < N; ++n) {
                mismatches += res.hypothesis_index(n, j) != best;
                mismatches += res.pose.joint(n, j) != set.hypotheses[static_cast<std::size_t>(best)].joint(n, j);
            }
        }
    }
    return {mismatches == 0 && worse == 0,
            std::to_string(mismatches) + " argmin mismatches, " + std::to_string(worse) + " joints worse than a hypothesis"};
}

// 7
Outcome prompt_structure() {
    PromptSpec spec = PromptSpec::for_action("walk");
    const std::array<Index, kPromptCount> widths{7, 12, 10, 10, 10, 14, 14};
    bool layout = spec.token_budget == widths;
    const auto big = init_modifiers<double>(spec, 512, 7);
    const auto frozen_big = encode_texts(spec, HashTextEncoder(512));
    const auto assembled = assemble_prompt(big, frozen_big, spec);
    layout = layout && assembled.tokens.rows() == 77;
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        const Index at = spec.offset(k);
        const Index mr = spec.modifier_rows(k);
        layout = layout && assembled.tokens.middleRows(at, mr) == big.modifiers[k] &&
                 assembled.tokens.middleRows(at + mr, widths[k] - mr) == frozen_big[k];
    }
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (const auto& m : big.modifiers) {
        sum += m.sum();
        sq += m.squaredNorm();
        count += static_cast<std::size_t>(m.size());
    }
    const double mean = sum / static_cast<double>(count);
    const double sd = std::sqrt(sq / static_cast<double>(count) - mean * mean);
    const bool stats = count >= 10000 && std::abs(sd - 0.02) <= 0.002 && std::abs(mean) <= 0.002;

    // one epoch of training on a small model
    DenoiserConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.frames = 2;
    cfg.joints = 3;
    cfg.spatio_temporal_blocks = 1;
    TrainableState<double> st{DenoiserWeights<double>::init(cfg, 7), init_modifiers<double>(spec, 8, 7)};
    auto enc = std::make_shared<HashTextEncoder>(8);
    FrozenTokenSource source(enc);
    std::vector<TrainingSample<double>> samples;
    Rng rng(7);
    for (int i = 0; i < 6; ++i) {
        samples.push_back({PoseSequence2D<double>(2, 3, rng.gaussian_matrix<double>(6, 2)),
                           PoseSequence3D<double>(2, 3, rng.gaussian_matrix<double>(6, 3, 0.2)),
                           PromptSpec::for_action(i % 2 ? "walk" : "sit")});
    }
    std::vector<FrozenTokens> before;
    for (const auto& s : samples) {
        before.push_back(source.get(s.prompt));
    }
    std::size_t frozen_grads = 0;
    double frozen_grad_norm = 0.0;
    TrainConfig tc;
    tc.batch_size = 2;
    const auto modifiers_before = st.bank.modifiers;
    OptimizerState<double> opt;
    const auto result = train_epoch(samples, st, opt, schedule(), tc, source, 0, 7, [&](const StepRecord& rec) {
        // gradients at the weights of this step
        for (const auto& s : samples) {
            GradientMap<double> g;
            sample_loss_and_gradients(st, s, source.get(s.prompt), schedule(), 1 + static_cast<int>(rec.step * 97 % 1000),
                                      NoiseSample<double>::draw(2, 3, static_cast<std::uint64_t>(rec.step)), &g);
            for (const auto& [name, m] : g) {
                if (name.rfind("prompt/", 0) == 0 && name.find("modifier") == std::string::npos) {
                    ++frozen_grads;
                    frozen_grad_norm += m.norm();
                }
            }
        }
    });
    bool unchanged = true;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& now = source.get(samples[i].prompt);
        for (std::size_t k = 0; k < kPromptCount; ++k) {
            unchanged = unchanged && now[k] == before[i][k];
        }
    }
    bool moved = false;
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        moved = moved || st.bank.modifiers[k] != modifiers_before[k];
    }
    const bool frozen_ok = unchanged && moved && frozen_grads == 0 && frozen_grad_norm == 0.0 && result.steps == 3;
    return {layout && stats && frozen_ok, fmt("init mean %.5f", mean) + fmt(", sd %.5f", sd) + " over " +
                                              std::to_string(count) + " entries; frozen gradient entries " +
                                              std::to_string(frozen_grads) + (unchanged ? ", tokens unchanged" : ", tokens changed")};
}

PoseSequence3D<double> random_pose(Index n, Index j, Rng& rng, double s) {
    return {n, j, rng.gaussian_matrix<double>(n * j, 3, s)};
}

// 8
Outcome metrics() {
    Rng rng(8);
    int violations = 0;
    for (int i = 0; i < 1000; ++i) {
        const auto a = random_pose(2, 6, rng, 300.0), b = random_pose(2, 6, rng, 300.0);
        violations += p_mpjpe(a, b) > mpjpe(a, b);
    }
    double drift = 0.0;
    for (int i = 0; i < 100; ++i) {
        const auto gt = random_pose(2, 6, rng, 300.0), pred = random_pose(2, 6, rng, 300.0);
        const Eigen::Matrix3d r =
            Eigen::Quaterniond(rng.gaussian(), rng.gaussian(), rng.gaussian(), rng.gaussian()).normalized().toRotationMatrix();
        const double s = rng.uniform(0.2, 5.0);
        const Eigen::RowVector3d t(rng.gaussian(0, 1000), rng.gaussian(0, 1000), rng.gaussian(0, 1000));
        PoseSequence3D<double> moved = pred;
        moved.coords() = ((s * pred.coords() * r).rowwise() + t).eval();
        drift = std::max(drift, std::abs(p_mpjpe(moved, gt) - p_mpjpe(pred, gt)));
    }
    int non_monotone = 0;
    int auc_mismatch = 0;
    for (int i = 0; i < 50; ++i) {
        const auto a = random_pose(3, 5, rng, 60.0), b = random_pose(3, 5, rng, 60.0);
        double prev = -1.0;
        for (double th = 0.0; th <= 400.0; th += 1.0) {
            const double v = pck(a, b, th);
            non_monotone += v < prev;
            prev = v;
        }
        double total = 0.0;
        const Index rows = a.coords().rows();
        for (int k = 0; k <= 30; ++k) {
            int hits = 0;
            for (Index r = 0; r < rows; ++r) {
                hits += (a.coords().row(r) - b.coords().row(r)).norm() <= 5.0 * k;
            }
            total += 100.0 * hits / static_cast<double>(rows);
        }
        auc_mismatch += auc(a, b) != total / 31.0;
    }
    return {violations == 0 && drift <= 1e-9 && non_monotone == 0 && auc_mismatch == 0,
            std::to_string(violations) + " p_mpjpe > mpjpe, invariance drift " + fmt("%.3g", drift) + ", " +
                std::to_string(non_monotone) + " pck decreases, " + std::to_string(auc_mismatch) + " auc mismatches"};
}

// 9
Outcome multi_human() {
    SynthOptions so;
    so.sequences = 1;
    so.frames = 8;
    so.joints = 9;
    so.characters = 3;
    so.seed = 9;
    const auto ds = synth_generate(so);
    DenoiserConfig cfg;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.frames = 8;
    cfg.joints = 9;
    cfg.spatio_temporal_blocks = 1;
    const auto weights = DenoiserWeights<float>::init(cfg, 9);
    const auto bank = init_modifiers<float>(PromptSpec{}, 16, 9);
    SamplerContext<float> ctx{&weights, &bank, &schedule(), translation_placement<float>(1000.0)};
    HashTextEncoder enc(16);
    MultiHumanInput<float> input;
    std::vector<FrozenTokens> tokens;
    for (const auto& r : ds.records) {
        const auto cam = ds.camera_for(r);
        const auto norm = normalize_record(r, cam, NormalizationParams{});
        input.characters.push_back(
            {norm.keypoints.cast<float>(), r.keypoints_2d, cam, r.presence, PromptSpec::for_action(r.action)});
        tokens.push_back(encode_texts(input.characters.back().prompt, enc));
    }
    std::vector<const FrozenTokens*> ptrs;
    for (const auto& t : tokens) {
        ptrs.push_back(&t);
    }
    SamplerConfig sc;
    sc.hypotheses = 5;
    sc.iterations = 4;
    const auto multi = estimate_multi(input, ptrs, ctx, sc, 909);
    int differing = multi.size() == 3 ? 0 : 1;
    for (std::size_t c = 0; c < multi.size(); ++c) {
        const auto single = estimate_single(input.characters[c], tokens[c], ctx, sc, character_seed(909, c));
        const auto& a = single.pose.coords();
        const auto& b = multi[c].pose.coords();
        differing += a.size() != b.size() ||
                     std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(*a.data())) != 0;
        differing += !(single.hypothesis_index == multi[c].hypothesis_index);
    }
    return {differing == 0, std::to_string(differing) + " differing outputs over 3 characters"};
}

// 10
Outcome determinism() {
    const auto data = kScratch / "determinism_data.ptc";
    cmd_synth(train_set(), data);
    auto config = RunConfig::preset_named("tiny");
    config.train.max_steps = 200;
    std::array<std::string, 2> preds, reports;
    for (int i = 0; i < 2; ++i) {
        const auto dir = kScratch / ("determinism_" + std::to_string(i));
        const auto summary = cmd_train(config, data, dir, false);
        cmd_estimate(summary.checkpoint, data, dir / "pred.ptc");
        cmd_eval(dir / "pred.ptc", data, dir / "report.csv", false);
        preds[static_cast<std::size_t>(i)] = slurp(dir / "pred.ptc");
        reports[static_cast<std::size_t>(i)] = slurp(dir / "report.csv");
    }
    const bool same = !preds[0].empty() && preds[0] == preds[1] && reports[0] == reports[1];
    return {same, std::string("predictions ") + (preds[0] == preds[1] ? "identical" : "differ") + " (" +
                      std::to_string(preds[0].size()) + " bytes), reports " +
                      (reports[0] == reports[1] ? "identical" : "differ")};
}

// 11
Outcome ablations() {
    const auto data = kScratch / "ablation_train.ptc";
    const auto val = kScratch / "ablation_val.ptc";
    cmd_synth(train_set(), data);
    auto vo = train_set();
    vo.seed = 1011;
    cmd_synth(vo, val);
    struct Variant {
        const char* name;
        bool prompt, fpc, pts;
    };
    const std::array<Variant, 4> variants{{{"full", true, true, true},
                                           {"w/o Prompt", false, true, true},
                                           {"w/o FPC", true, false, true},
                                           {"w/o PTS", true, true, false}}};
    std::array<double, 4> mpjpe_mm{};
    std::string detail;
    bool finite = true;
    for (std::size_t i = 0; i < variants.size(); ++i) {
        auto config = RunConfig::preset_named("tiny");
        config.train.max_steps = 1000;
        config.model.use_prompt = variants[i].prompt;
        config.model.use_fpc = variants[i].fpc;
        config.model.use_pts = variants[i].pts;
        const auto dir = kScratch / ("ablation_" + std::to_string(i));
        const auto summary = cmd_train(config, data, dir, false);
        finite = finite && summary.steps == 1000;
        mpjpe_mm[i] = estimate_and_eval(summary.checkpoint, val, dir, config.sampler.hypotheses,
                                        config.sampler.iterations);
        finite = finite && std::isfinite(mpjpe_mm[i]);
        detail += std::string(i ? ", " : "") + variants[i].name + fmt(" %.1f", mpjpe_mm[i]);
    }
    return {finite && mpjpe_mm[0] <= mpjpe_mm[1], "validation MPJPE mm after 1000 steps: " + detail};
}

} // namespace

int main() {
    fs::remove_all(kScratch);
    fs::create_directories(kScratch);
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"diffusion round-trip", diffusion_round_trip},
        {"ddim fixed point", ddim_fixed_point},
        {"forward-process moments", forward_moments},
        {"gradient oracle", gradient_oracle},
        {"overfit", overfit},
        {"jpma oracle", jpma_oracle},
        {"prompt structure", prompt_structure},
        {"metrics", metrics},
        {"multi-human", multi_human},
        {"determinism", determinism},
        {"ablations", ablations},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
