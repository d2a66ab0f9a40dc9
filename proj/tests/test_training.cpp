#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "posediff/commands.hpp"
#include "posediff/training.hpp"

using namespace posediff;
namespace fs = std::filesystem;

namespace {

DenoiserConfig small_model() {
    DenoiserConfig c;
    c.dim = 8;
    c.heads = 2;
    c.frames = 2;
    c.joints = 3;
    c.spatio_temporal_blocks = 1;
    return c;
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("posediff_test_training_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) {
        out.push_back(line);
    }
    return out;
}

// drops the trailing wall-clock column
std::string without_wall(const std::string& row) { return row.substr(0, row.rfind(',')); }

RunConfig small_run(const fs::path& data) {
    auto c = RunConfig::preset_named("tiny");
    c.model.dim = 8;
    c.model.heads = 2;
    c.model.frames = 4;
    c.model.joints = 5;
    c.model.spatio_temporal_blocks = 1;
    c.train.epochs = 3;
    c.train.batch_size = 2;
    c.seed = 17;
    c.dataset = data.string();
    return c;
}

} // namespace

TEST_CASE("learning rate schedule") {
    TrainConfig c;
    c.lr = 0.01;
    c.lr_decay = 0.5;
    CHECK(lr_schedule(0, c) == 0.01);
    CHECK(lr_schedule(1, c) == doctest::Approx(0.005).epsilon(1e-15));
    CHECK(lr_schedule(3, c) == doctest::Approx(0.00125).epsilon(1e-15));
}

TEST_CASE("rmse loss") {
    PoseSequence3D<double> a(1, 2), b(1, 2);
    a.coords() << 1, 2, 3, 4, 5, 6;
    b.coords() << 1, 2, 3, 4, 5, 12;
    CHECK(mse_loss(a, b) == doctest::Approx(std::sqrt(36.0 / 6.0)));
    Tape<double> tape;
    auto p = tape.parameter("p", Matrix<double>(a.coords()));
    auto l = rmse_loss(p, Matrix<double>(b.coords()));
    CHECK(l.value()(0, 0) == doctest::Approx(1.0 * std::sqrt(6.0)));
    tape.backward(l);
    // d sqrt(mean(d^2)) / d p = d / (n * rmse)
    CHECK(tape.grad(p)(1, 2) == doctest::Approx(-6.0 / (6.0 * std::sqrt(6.0))));
    CHECK(tape.grad(p)(0, 0) == 0.0);
}

TEST_CASE("adamw matches hand-computed steps") {
    Matrix<double> p = Matrix<double>::Constant(1, 1, 1.0);
    ParameterRefs<double> refs{{"p", &p}};
    OptimizerState<double> st;
    TrainConfig c;
    c.weight_decay = 0.1;
    adamw_step(refs, GradientMap<double>{{"p", Matrix<double>::Constant(1, 1, 0.5)}}, st, 0.1, c);
    CHECK(p(0, 0) == doctest::Approx(0.890000002).epsilon(1e-14));
    adamw_step(refs, GradientMap<double>{{"p", Matrix<double>::Constant(1, 1, -1.0)}}, st, 0.1, c);
    CHECK(p(0, 0) == doctest::Approx(0.9177103542205653).epsilon(1e-14));
    CHECK(st.step == 2);
}

TEST_CASE("adamw against a scalar re-derivation") {
    Rng rng(3);
    Matrix<double> p = rng.gaussian_matrix<double>(3, 4);
    Matrix<double> q = p;  // oracle copy
    Matrix<double> m = Matrix<double>::Zero(3, 4), v = Matrix<double>::Zero(3, 4);
    ParameterRefs<double> refs{{"w", &p}};
    OptimizerState<double> st;
    TrainConfig c;
    for (int s = 1; s <= 5; ++s) {
        const Matrix<double> g = rng.gaussian_matrix<double>(3, 4);
        const double lr = 0.01 * s;
        adamw_step(refs, GradientMap<double>{{"w", g}}, st, lr, c);
        for (Index i = 0; i < g.size(); ++i) {
            double& mi = m.data()[i];
            double& vi = v.data()[i];
            double& qi = q.data()[i];
            mi = c.beta1 * mi + (1 - c.beta1) * g.data()[i];
            vi = c.beta2 * vi + (1 - c.beta2) * g.data()[i] * g.data()[i];
            const double mh = mi / (1 - std::pow(c.beta1, s));
            const double vh = vi / (1 - std::pow(c.beta2, s));
            qi = qi * (1 - lr * c.weight_decay) - lr * mh / (std::sqrt(vh) + c.eps);
        }
    }
    CHECK((p - q).cwiseAbs().maxCoeff() <= 1e-13);
}

TEST_CASE("adamw refuses non-finite gradients and skips absent ones") {
    Matrix<double> p = Matrix<double>::Ones(1, 2);
    Matrix<double> other = Matrix<double>::Ones(1, 1);
    ParameterRefs<double> refs{{"p", &p}, {"o", &other}};
    OptimizerState<double> st;
    Matrix<double> bad(1, 2);
    bad << 1.0, std::nan("");
    CHECK_THROWS_AS(adamw_step(refs, GradientMap<double>{{"p", bad}}, st, 0.1, TrainConfig{}), NumericalError);
    adamw_step(refs, GradientMap<double>{{"p", Matrix<double>::Ones(1, 2)}}, st, 0.1, TrainConfig{});
    CHECK(other(0, 0) == 1.0);
}

TEST_CASE("gradient clipping") {
    GradientMap<double> g{{"a", Matrix<double>::Constant(1, 1, 3.0)}, {"b", Matrix<double>::Constant(1, 1, 4.0)}};
    CHECK(clip_gradients(g, 1.0) == doctest::Approx(5.0));
    CHECK(g.at("a")(0, 0) == doctest::Approx(0.6));
    CHECK(g.at("b")(0, 0) == doctest::Approx(0.8));
    CHECK(clip_gradients(g, 10.0) == doctest::Approx(1.0));
    CHECK(g.at("b")(0, 0) == doctest::Approx(0.8));
}

TEST_CASE("gradient check on a small denoiser") {
    const auto cfg = small_model();
    TrainableState<double> st{DenoiserWeights<double>::init(cfg, 1), init_modifiers<double>(PromptSpec{}, 8, 2)};
    // nudge zero-initialized tensors so every path carries signal
    Rng rng(5);
    for (auto& [_, m] : st.weights.tensors()) {
        m += rng.gaussian_matrix<double>(m.rows(), m.cols(), 0.05);
    }
    const auto frozen = encode_texts(PromptSpec{}, HashTextEncoder(8));
    PoseSequence3D<double> yt(2, 3, rng.gaussian_matrix<double>(6, 3));
    PoseSequence2D<double> x(2, 3, rng.gaussian_matrix<double>(6, 2));
    PoseSequence3D<double> target(2, 3, rng.gaussian_matrix<double>(6, 3));
    const auto report = gradient_check(st, frozen, PromptSpec{}, yt, x, 321, target);
    CHECK(report.size() == st.weights.tensors().size() + 7);
    for (const auto& e : report) {
        INFO(e.name);
        CHECK(e.relative_error <= 1e-4);
        if (e.name.find("attn/k/bias") != std::string::npos) {
            // softmax ignores a per-row shift, so this gradient is exactly zero
            CHECK(e.analytic_norm <= 1e-12);
        } else {
            CHECK(e.analytic_norm > 1e-6);
        }
    }
}

TEST_CASE("train_epoch is reproducible and leaves frozen tokens alone") {
    const auto cfg = small_model();
    const auto sched = build_schedule(100, ScheduleKind::cosine, 1e-4, 0.999);
    std::vector<TrainingSample<double>> samples;
    Rng rng(8);
    for (int i = 0; i < 5; ++i) {
        samples.push_back({PoseSequence2D<double>(2, 3, rng.gaussian_matrix<double>(6, 2)),
                           PoseSequence3D<double>(2, 3, rng.gaussian_matrix<double>(6, 3, 0.2)),
                           PromptSpec::for_action(i % 2 ? "walk" : "sit")});
    }
    TrainConfig tc;
    tc.batch_size = 2;
    tc.lr = 1e-3;
    auto fresh = [&] {
        return TrainableState<double>{DenoiserWeights<double>::init(cfg, 1), init_modifiers<double>(PromptSpec{}, 8, 2)};
    };
    auto enc = std::make_shared<HashTextEncoder>(8);
    const auto frozen_before = encode_texts(PromptSpec::for_action("walk"), *enc);

    auto a = fresh();
    OptimizerState<double> oa;
    FrozenTokenSource fa(enc);
    std::vector<StepRecord> steps;
    const auto ra = train_epoch(samples, a, oa, sched, tc, fa, 0, 99, [&](const StepRecord& s) { steps.push_back(s); });
    CHECK(ra.steps == 3);
    CHECK(steps.size() == 3);
    CHECK(steps.back().step == 3);

    auto b = fresh();
    OptimizerState<double> ob;
    FrozenTokenSource fb(enc);
    train_epoch(samples, b, ob, sched, tc, fb, 0, 99);
    CHECK(a.weights.tensors() == b.weights.tensors());

    const auto& after = fa.get(PromptSpec::for_action("walk"));
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        CHECK(after[k] == frozen_before[k]);
    }
    // modifiers did move
    CHECK(a.bank.modifiers[0] != fresh().bank.modifiers[0]);

    // the only prompt gradients are the modifiers
    GradientMap<double> grads;
    sample_loss_and_gradients(a, samples[0], after, sched, 40, NoiseSample<double>::draw(2, 3, 1), &grads);
    std::size_t prompt_entries = 0;
    for (const auto& [name, _] : grads) {
        CHECK(name.find("frozen") == std::string::npos);
        prompt_entries += name.rfind("prompt/", 0) == 0;
    }
    CHECK(prompt_entries == kPromptCount);
}

TEST_CASE("skipping batches resumes an epoch exactly") {
    const auto cfg = small_model();
    const auto sched = build_schedule(50, ScheduleKind::cosine, 1e-4, 0.999);
    std::vector<TrainingSample<double>> samples;
    Rng rng(9);
    for (int i = 0; i < 6; ++i) {
        samples.push_back({PoseSequence2D<double>(2, 3, rng.gaussian_matrix<double>(6, 2)),
                           PoseSequence3D<double>(2, 3, rng.gaussian_matrix<double>(6, 3, 0.2)), PromptSpec{}});
    }
    TrainConfig tc;
    tc.batch_size = 2;
    FrozenTokenSource frozen(std::make_shared<HashTextEncoder>(8));
    auto init = TrainableState<double>{DenoiserWeights<double>::init(cfg, 1), init_modifiers<double>(PromptSpec{}, 8, 2)};

    auto whole = init;
    OptimizerState<double> ow;
    train_epoch(samples, whole, ow, sched, tc, frozen, 2, 5);

    auto part = init;
    OptimizerState<double> op;
    TrainConfig capped = tc;
    capped.max_steps = 1;
    const auto r1 = train_epoch(samples, part, op, sched, capped, frozen, 2, 5);
    CHECK(r1.stopped_early);
    CHECK(r1.steps == 1);
    train_epoch(samples, part, op, sched, tc, frozen, 2, 5, {}, 1);
    CHECK(op.step == ow.step);
    CHECK(part.weights.tensors() == whole.weights.tensors());
    CHECK(part.bank.modifiers[3] == whole.bank.modifiers[3]);
}

TEST_CASE("checkpoint container round trip is bit exact") {
    const auto cfg = small_model();
    Checkpoint<float> ck;
    ck.state.weights = DenoiserWeights<float>::init(cfg, 4);
    ck.state.bank = init_modifiers<float>(PromptSpec{}, 8, 5);
    Rng rng(1);
    for (auto& [name, m] : ck.state.weights.tensors()) {
        ck.optimizer.first_moment[name] = rng.gaussian_matrix<float>(m.rows(), m.cols());
        ck.optimizer.second_moment[name] = rng.gaussian_matrix<float>(m.rows(), m.cols()).cwiseAbs();
    }
    ck.optimizer.step = 12;
    ck.epoch = 3;
    ck.epoch_batches = 1;
    ck.step = 12;
    ck.seed = 0xfeedULL;
    ck.config = {{"preset", "tiny"}};
    ck.config_hash = "abc";
    const auto bytes = ck.to_container().serialize();
    const auto back = Checkpoint<float>::from_container(TensorContainer::deserialize(bytes), cfg);
    CHECK(back.state.weights.tensors() == ck.state.weights.tensors());
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        CHECK(back.state.bank.modifiers[k] == ck.state.bank.modifiers[k]);
    }
    CHECK(back.optimizer.first_moment == ck.optimizer.first_moment);
    CHECK(back.optimizer.second_moment == ck.optimizer.second_moment);
    CHECK(back.optimizer.step == 12);
    CHECK(back.epoch == 3);
    CHECK(back.epoch_batches == 1);
    CHECK(back.seed == 0xfeedULL);
    CHECK(back.config_hash == "abc");
    CHECK(back.to_container().serialize() == bytes);

    auto wider = cfg;
    wider.dim = 16;
    CHECK_THROWS_AS(Checkpoint<float>::from_container(TensorContainer::deserialize(bytes), wider), CompatibilityError);
}

TEST_CASE("interrupted training resumes bit-exactly") {
    const auto dir = scratch("resume");
    SynthOptions so;
    so.sequences = 5;
    so.frames = 4;
    so.joints = 5;
    so.seed = 3;
    const auto data = dir / "data.ptc";
    cmd_synth(so, data);
    auto config = small_run(data);

    const auto full = cmd_train(config, data, dir / "full", false);
    CHECK(full.epochs_completed == 3);
    CHECK(full.steps == 9);

    auto first = config;
    first.train.max_steps = 4;  // stops inside epoch 1
    const auto cut = cmd_train(first, data, dir / "cut", false);
    CHECK(cut.steps == 4);
    const auto resumed = cmd_train(config, data, dir / "cut", true);
    CHECK(resumed.steps == 9);

    const auto a = TensorContainer::read(dir / "full" / kCheckpointFile);
    const auto b = TensorContainer::read(dir / "cut" / kCheckpointFile);
    REQUIRE(a.names() == b.names());
    for (const auto& name : a.names()) {
        INFO(name);
        CHECK(a.entry(name).bytes == b.entry(name).bytes);
    }
    CHECK(a.meta().at("step") == b.meta().at("step"));
    CHECK(a.meta().at("epoch") == b.meta().at("epoch"));

    const auto la = read_lines(dir / "full" / kTrainLogFile);
    const auto lb = read_lines(dir / "cut" / kTrainLogFile);
    REQUIRE(la.size() == 10);
    REQUIRE(lb.size() == la.size());
    CHECK(la[0] == "epoch,step,loss,lr,wall_ms");
    for (std::size_t i = 0; i < la.size(); ++i) {
        CHECK(without_wall(la[i]) == without_wall(lb[i]));
    }

    // a different model refuses to resume from this directory
    auto other = config;
    other.model.dim = 16;
    CHECK_THROWS_AS(cmd_train(other, data, dir / "cut", true), CompatibilityError);
    fs::remove_all(dir);
}

TEST_CASE("train config validation") {
    TrainConfig c;
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.lr = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}
