#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <set>

#include "posediff/dataset.hpp"
#include "posediff/sampler.hpp"

using namespace posediff;

namespace {

CameraIntrinsics test_camera() { return {1000.0, 1100.0, 500.0, 400.0}; }

PoseSequence3D<double> camera_pose(Index n, Index j, Rng& rng) {
    PoseSequence3D<double> p(n, j);
    for (Index r = 0; r < n * j; ++r) {
        p.coords()(r, 0) = rng.gaussian(0.0, 500.0);
        p.coords()(r, 1) = rng.gaussian(0.0, 500.0);
        p.coords()(r, 2) = rng.uniform(3000.0, 6000.0);
    }
    return p;
}

// plain pinhole per joint, summed over frames, first minimum wins
IndexMatrix brute_force_jpma(const std::vector<PoseSequence3D<double>>& hyps, const PoseSequence2D<double>& obs,
                             const CameraIntrinsics& cam) {
    const Index N = obs.frames(), J = obs.joints();
    IndexMatrix out(N, J);
    for (Index j = 0; j < J; ++j) {
        int best_h = -1;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t h = 0; h < hyps.size(); ++h) {
            double total = 0.0;
            for (Index n = 0; n < N; ++n) {
                const auto p = hyps[h].joint(n, j);
                const double du = cam.fx * p(0) / p(2) + cam.cx - obs.joint(n, j)(0);
                const double dv = cam.fy * p(1) / p(2) + cam.cy - obs.joint(n, j)(1);
                total += std::sqrt(du * du + dv * dv);
            }
            if (total < best) {
                best = total;
                best_h = static_cast<int>(h);
            }
        }
        out.col(j).setConstant(best_h);
    }
    return out;
}

} // namespace

TEST_CASE("reprojection by hand") {
    PoseSequence3D<double> p(1, 2);
    p.coords() << 100, -50, 2000, 0, 0, 1000;
    const auto uv = reproject(p, test_camera());
    CHECK(uv.joint(0, 0)(0) == doctest::Approx(550.0));
    CHECK(uv.joint(0, 0)(1) == doctest::Approx(372.5));
    CHECK(uv.joint(0, 1)(0) == doctest::Approx(500.0));
    CHECK(uv.joint(0, 1)(1) == doctest::Approx(400.0));
    p.coords()(1, 2) = 0.0;
    CHECK_THROWS_AS(reproject(p, test_camera()), DegenerateError);
    p.coords()(1, 2) = -5.0;
    CHECK_THROWS_AS(reproject(p, test_camera()), DegenerateError);
    CHECK_THROWS_AS(reproject(p, CameraIntrinsics{0.0, 1.0, 0.0, 0.0}), Error);
}

TEST_CASE("fallback camera") {
    const auto c = CameraIntrinsics::fallback(1920, 1080);
    CHECK(c.fx == 1000.0);
    CHECK(c.fy == 1000.0);
    CHECK(c.cx == 960.0);
    CHECK(c.cy == 540.0);
}

TEST_CASE("jpma matches exhaustive per-joint argmin") {
    Rng rng(2024);
    const auto cam = test_camera();
    for (int trial = 0; trial < 100; ++trial) {
        const int H = 1 + trial % 5;
        const Index J = 1 + (trial / 5) % 4;
        const Index N = 1 + trial % 3;
        HypothesisSet<double> set;
        for (int h = 0; h < H; ++h) {
            set.hypotheses.push_back(camera_pose(N, J, rng));
        }
        const auto obs = reproject(camera_pose(N, J, rng), cam);
        const auto res = jpma_aggregate(set, obs, cam);
        const auto oracle = brute_force_jpma(set.hypotheses, obs, cam);
        CHECK(res.hypothesis_index == oracle);
        for (Index n = 0; n < N; ++n) {
            for (Index j = 0; j < J; ++j) {
                CHECK(res.pose.joint(n, j) == set.hypotheses[oracle(n, j)].joint(n, j));
            }
        }
    }
}

TEST_CASE("jpma ties go to the lowest index") {
    Rng rng(5);
    const auto cam = test_camera();
    const auto a = camera_pose(2, 3, rng);
    const auto b = camera_pose(2, 3, rng);
    HypothesisSet<double> set{{b, a, a, b}, 0};
    const auto obs = reproject(a, cam);
    const auto res = jpma_aggregate(set, obs, cam);
    CHECK((res.hypothesis_index.array() == 1).all());
    CHECK(res.pose == a);
    JpmaOptions per_frame{true};
    CHECK((jpma_aggregate(set, obs, cam, per_frame).hypothesis_index.array() == 1).all());
}

TEST_CASE("per-frame jpma picks per frame and joint") {
    std::vector<Matrix<double>> errors(2, Matrix<double>(2, 2));
    errors[0] << 1, 5, 9, 1;
    errors[1] << 2, 1, 1, 2;
    const auto seq = jpma_select(errors, JpmaOptions{false});
    CHECK(seq(0, 0) == 1);  // 10 vs 3
    CHECK(seq(1, 0) == 1);
    CHECK(seq(0, 1) == 1);  // 6 vs 3
    const auto pf = jpma_select(errors, JpmaOptions{true});
    CHECK(pf(0, 0) == 0);
    CHECK(pf(0, 1) == 1);
    CHECK(pf(1, 0) == 1);
    CHECK(pf(1, 1) == 0);
    CHECK_THROWS_AS(jpma_select({}, JpmaOptions{}), ConfigError);
}

TEST_CASE("non-projectable joints lose the vote instead of failing") {
    Rng rng(6);
    const auto cam = test_camera();
    auto good = camera_pose(1, 2, rng);
    auto behind = good;
    behind.coords()(0, 2) = -100.0;
    const auto obs = reproject(good, cam);
    const auto errors = reprojection_errors<double>({behind, good}, obs, cam);
    CHECK(std::isinf(errors[0](0, 0)));
    HypothesisSet<double> set{{behind, good}, 0};
    CHECK(jpma_aggregate(set, obs, cam).hypothesis_index(0, 0) == 1);
}

TEST_CASE("absent frames do not vote") {
    Rng rng(7);
    const auto cam = test_camera();
    auto a = camera_pose(2, 1, rng);
    auto b = a;
    b.coords()(1, 0) += 400.0;  // b only differs in frame 1
    a.coords()(0, 0) += 10.0;   // a is slightly worse in frame 0
    const auto obs = reproject(b, cam);
    HypothesisSet<double> set{{a, b}, 0};
    CHECK(jpma_aggregate(set, obs, cam).hypothesis_index(0, 0) == 1);
    std::vector<std::uint8_t> only_first{1, 0};
    CHECK(jpma_aggregate(set, obs, cam, {}, only_first).hypothesis_index(0, 0) == 1);
    std::vector<std::uint8_t> only_second{0, 1};
    const auto res = jpma_aggregate(set, obs, cam, {}, only_second);
    CHECK(res.hypothesis_index(0, 0) == 1);
    const auto errs = reprojection_errors<double>({a, b}, obs, cam, only_second);
    CHECK(errs[0](0, 0) == 0.0);
}

TEST_CASE("root translation is recovered exactly") {
    Rng rng(8);
    const auto cam = test_camera();
    PoseSequence3D<double> rel(3, 5, rng.gaussian_matrix<double>(15, 3, 300.0));
    Eigen::Matrix<double, 3, 3, Eigen::RowMajor> shift;
    shift << 100, -200, 4000, -50, 20, 5000, 0, 0, 3500;
    PoseSequence3D<double> world = rel;
    for (Index n = 0; n < 3; ++n) {
        for (Index j = 0; j < 5; ++j) {
            world.joint(n, j) += shift.row(n);
        }
    }
    const auto obs = reproject(world, cam);
    const auto t = solve_root_translation(rel, obs, cam);
    CHECK((t - shift).cwiseAbs().maxCoeff() <= 1e-6);
    const auto placed = place_in_camera(rel, obs, cam);
    CHECK((placed.coords() - world.coords()).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("initial hypotheses are per-index streams") {
    const auto a = sample_initial_hypotheses<double>(5, 2, 3, 42);
    const auto b = sample_initial_hypotheses<double>(2, 2, 3, 42);
    CHECK(a.size() == 5);
    CHECK(a.hypotheses[1] == b.hypotheses[1]);
    CHECK(a.hypotheses[1] == NoiseSample<double>::draw(2, 3, derive_seed(42, 1, 0)).epsilon);
    CHECK(!(a.hypotheses[0] == a.hypotheses[1]));
    CHECK(a.seed_base == 42);
}

TEST_CASE("deterministic loop with a perfect denoiser stays on the forward path") {
    const auto sched = build_schedule(1000, ScheduleKind::cosine, 1e-4, 0.999);
    Rng rng(10);
    const PoseSequence3D<double> y0(4, 3, rng.gaussian_matrix<double>(12, 3, 0.3));
    const auto init = sample_initial_hypotheses<double>(3, 4, 3, 77);
    std::mutex mu;
    std::vector<double> drift;
    // every hypothesis keeps the noise it started with
    std::vector<PoseSequence3D<double>> eps0;
    for (const auto& h : init.hypotheses) {
        eps0.push_back(ddim_epsilon(h, y0, 1000, sched));
    }
    const DenoiseFn<double> oracle = [&](const PoseSequence3D<double>& yt, int t) {
        double best = 1e300;
        for (const auto& e : eps0) {
            const Eigen::MatrixXd expect =
                std::sqrt(sched.alpha_bar(t)) * y0.coords() + std::sqrt(1 - sched.alpha_bar(t)) * e.coords();
            best = std::min(best, (yt.coords() - expect).cwiseAbs().maxCoeff());
        }
        std::lock_guard<std::mutex> lock(mu);
        drift.push_back(best);
        return y0;
    };
    const auto out = ddim_loop(init, 10, sched, oracle, true);
    CHECK(drift.size() == 30);
    for (double d : drift) {
        CHECK(d <= 1e-10);
    }
    for (const auto& h : out.hypotheses) {
        CHECK((h.coords() - y0.coords()).cwiseAbs().maxCoeff() <= 1e-8);
    }
}

TEST_CASE("loop call counts and timestamps") {
    const auto sched = build_schedule(1000, ScheduleKind::cosine, 1e-4, 0.999);
    std::atomic<int> calls{0};
    std::mutex mu;
    std::multiset<int> stamps;
    const DenoiseFn<double> count = [&](const PoseSequence3D<double>& yt, int t) {
        ++calls;
        std::lock_guard<std::mutex> lock(mu);
        stamps.insert(t);
        return PoseSequence3D<double>(yt.frames(), yt.joints(), yt.coords() * 0.5);
    };
    const auto init = sample_initial_hypotheses<double>(20, 2, 2, 1);
    ddim_loop(init, 10, sched, count, false);
    CHECK(calls == 200);
    for (int t = 100; t <= 1000; t += 100) {
        CHECK(stamps.count(t) == 20);
    }
    CHECK(stamps.count(0) == 0);

    calls = 0;
    const auto one = ddim_loop(init, 1, sched, count, false);
    CHECK(calls == 20);
    CHECK(one.hypotheses[3].coords() == init.hypotheses[3].coords() * 0.5);
    CHECK_THROWS_AS(ddim_loop(init, 1001, sched, count, false), ConfigError);
}

TEST_CASE("stochastic loop is reproducible and hypothesis-local") {
    const auto sched = build_schedule(100, ScheduleKind::cosine, 1e-4, 0.999);
    const DenoiseFn<double> shrink = [](const PoseSequence3D<double>& yt, int) {
        return PoseSequence3D<double>(yt.frames(), yt.joints(), yt.coords() * 0.9);
    };
    const auto a = ddim_loop(sample_initial_hypotheses<double>(4, 2, 3, 9), 5, sched, shrink, false);
    const auto b = ddim_loop(sample_initial_hypotheses<double>(4, 2, 3, 9), 5, sched, shrink, false);
    const auto c = ddim_loop(sample_initial_hypotheses<double>(2, 2, 3, 9), 5, sched, shrink, false);
    const auto d = ddim_loop(sample_initial_hypotheses<double>(4, 2, 3, 9), 5, sched, shrink, true);
    CHECK(a.hypotheses == b.hypotheses);
    CHECK(a.hypotheses[1] == c.hypotheses[1]);
    CHECK(!(a.hypotheses[1] == d.hypotheses[1]));
}

TEST_CASE("multi-human estimate equals stacked single estimates") {
    SynthOptions so;
    so.sequences = 1;
    so.frames = 4;
    so.joints = 6;
    so.characters = 3;
    so.seed = 4;
    const auto ds = synth_generate(so);
    REQUIRE(ds.records.size() == 3);

    DenoiserConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.frames = 4;
    cfg.joints = 6;
    cfg.spatio_temporal_blocks = 1;
    const auto weights = DenoiserWeights<float>::init(cfg, 1);
    const auto bank = init_modifiers<float>(PromptSpec{}, 8, 2);
    const auto sched = build_schedule(100, ScheduleKind::cosine, 1e-4, 0.999);
    SamplerContext<float> ctx{&weights, &bank, &sched, translation_placement<float>(1000.0)};
    HashTextEncoder enc(8);

    MultiHumanInput<float> input;
    std::vector<FrozenTokens> tokens;
    NormalizationParams np;
    for (const auto& r : ds.records) {
        const auto cam = ds.camera_for(r);
        const auto norm = normalize_record(r, cam, np);
        input.characters.push_back(
            {norm.keypoints.cast<float>(), r.keypoints_2d, cam, r.presence, PromptSpec::for_action(r.action)});
        tokens.push_back(encode_texts(input.characters.back().prompt, enc));
    }
    std::vector<const FrozenTokens*> ptrs;
    for (const auto& t : tokens) {
        ptrs.push_back(&t);
    }
    SamplerConfig sc;
    sc.hypotheses = 4;
    sc.iterations = 3;
    const auto multi = estimate_multi(input, ptrs, ctx, sc, 99);
    REQUIRE(multi.size() == 3);
    for (std::size_t c = 0; c < 3; ++c) {
        const auto single = estimate_single(input.characters[c], tokens[c], ctx, sc, character_seed(99, c));
        CHECK(single.pose == multi[c].pose);
        CHECK(single.hypothesis_index == multi[c].hypothesis_index);
        for (Index n = 0; n < 4; ++n) {
            if (input.characters[c].presence[static_cast<std::size_t>(n)] == 0) {
                CHECK(multi[c].pose.coords().middleRows(n * 6, 6).isZero(0));
            }
        }
    }
    CHECK(!(multi[0].pose == multi[1].pose));

    auto broken = input;
    for (std::size_t c = 1; c < 3; ++c) {
        auto& ch = broken.characters[c];
        for (Index n = 0; n < 4; ++n) {
            if (ch.presence[static_cast<std::size_t>(n)] == 0) {
                ch.keypoints.coords()(n * 6, 0) = 1.0f;
                CHECK_THROWS_AS(broken.validate(), ConfigError);
                return;
            }
        }
    }
    FAIL("synthetic scene has no absent frame");
}
