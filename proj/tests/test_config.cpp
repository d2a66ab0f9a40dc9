#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "posediff/config.hpp"

using namespace posediff;
using nlohmann::json;

namespace {

std::string config_error(const json& j) {
    try {
        RunConfig::from_json(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST_CASE("presets") {
    const auto tiny = RunConfig::preset_named("tiny");
    CHECK(tiny.model.dim == 64);
    CHECK(tiny.model.heads == 4);
    CHECK(tiny.model.frames == 16);
    CHECK(tiny.sampler.hypotheses == 10);
    CHECK(tiny.sampler.iterations == 5);
    const auto paper = RunConfig::preset_named("paper");
    CHECK(paper.model.dim == 512);
    CHECK(paper.model.heads == 8);
    CHECK(paper.model.frames == 243);
    CHECK(paper.sampler.hypotheses == 20);
    CHECK(paper.sampler.iterations == 10);
    CHECK(paper.schedule.timesteps == 1000);
    CHECK(paper.schedule.kind == ScheduleKind::cosine);
    CHECK(paper.token_budget == std::array<Index, kPromptCount>{7, 12, 10, 10, 10, 14, 14});
    CHECK_NOTHROW(tiny.validate());
    CHECK_NOTHROW(paper.validate());
    CHECK_THROWS_AS(RunConfig::preset_named("huge"), ConfigError);
}

TEST_CASE("overrides apply on top of the preset") {
    const auto c = RunConfig::from_json(json{{"preset", "paper"}, {"model", {{"dim", 256}}}, {"seed", 9}});
    CHECK(c.model.dim == 256);
    CHECK(c.model.heads == 8);
    CHECK(c.seed == 9);
    const auto d = RunConfig::from_json(json::object());
    CHECK(d.preset == "tiny");
}

TEST_CASE("unknown keys are rejected with their dotted path") {
    CHECK(config_error(json{{"modle", json::object()}}).find("'modle'") != std::string::npos);
    CHECK(config_error(json{{"train", {{"lr", 1e-3}, {"learning_rate", 1e-3}}}}).find("'train.learning_rate'") !=
          std::string::npos);
    CHECK(config_error(json{{"model", {{"dim", "wide"}}}}).find("model.dim") != std::string::npos);
    CHECK(!config_error(json::array()).empty());
    CHECK(!config_error(json{{"preset", 3}}).empty());
}

TEST_CASE("invalid values are rejected") {
    CHECK(!config_error(json{{"model", {{"dim", 30}, {"heads", 4}}}}).empty());
    CHECK(!config_error(json{{"train", {{"lr", -1.0}}}}).empty());
    CHECK(!config_error(json{{"sampler", {{"hypotheses", 0}}}}).empty());
    CHECK(!config_error(json{{"sampler", {{"iterations", 2000}}}}).empty());
    CHECK(!config_error(json{{"schedule", {{"kind", "quadratic"}}}}).empty());
    CHECK(!config_error(json{{"prompt", {{"token_budget", {7, 12, 10, 10, 10, 14, 13}}}}}).empty());
    CHECK(!config_error(json{{"data", {{"root_joint", 17}}}}).empty());
    CHECK(!config_error(json{{"data", {{"normalization", "whatever"}}}}).empty());
    CHECK(!config_error(json{{"model", {{"precision", "float16"}}}}).empty());
}

TEST_CASE("json round trip") {
    auto c = RunConfig::preset_named("paper");
    c.seed = 42;
    c.model.use_fpc = false;
    c.precision = Precision::f64;
    c.train.max_steps = 77;
    c.sampler.deterministic = true;
    c.dataset = "/data/x.ptc";
    c.normalization.mode = NormalizationMode::root_centered;
    const auto j = c.to_json();
    const auto back = RunConfig::from_json(j);
    CHECK(back.to_json() == j);
    CHECK(back.hash() == c.hash());
}

TEST_CASE("hash tracks settings but not file locations") {
    auto a = RunConfig::preset_named("tiny");
    auto b = a;
    b.dataset = "/elsewhere/data.ptc";
    b.frozen_tokens = "/elsewhere/tokens.ptc";
    CHECK(a.hash() == b.hash());
    b.seed = 1;
    CHECK(a.hash() != b.hash());
    CHECK(a.hash().size() == 16);
}

TEST_CASE("fnv1a reference values") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a_hex("foobar") == "85944171f73967e8");
}

TEST_CASE("loading from disk") {
    const auto dir = std::filesystem::temp_directory_path() / "posediff_test_config";
    std::filesystem::create_directories(dir);
    {
        std::ofstream(dir / "ok.json") << R"({"preset":"tiny","train":{"epochs":3}})";
        std::ofstream(dir / "bad.json") << "{ not json";
    }
    CHECK(RunConfig::load(dir / "ok.json").train.epochs == 3);
    CHECK_THROWS_AS(RunConfig::load(dir / "bad.json"), ConfigError);
    CHECK_THROWS_AS(RunConfig::load(dir / "none.json"), ConfigError);
    std::filesystem::remove_all(dir);
}
