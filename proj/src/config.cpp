#include "posediff/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace posediff {

namespace {

// Copies known keys of `j` into fields; anything else is an error.
class Reader {
public:
    Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError("config '" + display() + "' must be an object");
        }
    }

    template <typename T>
    void read(const char* key, T& field) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        try {
            field = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config key '" + qualified(key) + "' has the wrong type: " + j_.at(key).dump());
        }
    }

    template <typename Fn>
    void section(const char* key, Fn&& fn) {
        seen_.insert(key);
        if (j_.contains(key)) {
            Reader inner(j_.at(key), qualified(key));
            fn(inner);
            inner.finish();
        }
    }

    void finish() const {
        for (const auto& [key, _] : j_.items()) {
            if (!seen_.count(key)) {
                throw ConfigError("unknown config key '" + qualified(key) + "'");
            }
        }
    }

    std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    std::string display() const { return path_.empty() ? "<root>" : path_; }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

std::string precision_name(Precision p) { return p == Precision::f32 ? "float32" : "float64"; }

Precision parse_precision(const std::string& s) {
    if (s == "float32") {
        return Precision::f32;
    }
    if (s == "float64") {
        return Precision::f64;
    }
    throw ConfigError("model.precision must be float32 or float64, got '" + s + "'");
}

} // namespace

RunConfig RunConfig::preset_named(const std::string& name) {
    RunConfig c;
    c.preset = name;
    if (name == "tiny") {
        c.model.dim = 64;
        c.model.heads = 4;
        c.model.frames = 16;
        c.model.joints = 17;
        c.train.epochs = 1000;
        c.train.lr = 3e-3;
        c.train.lr_decay = 0.999;
        c.sampler.hypotheses = 10;
        c.sampler.iterations = 5;
        return c;
    }
    if (name == "paper") {
        c.model.dim = 512;
        c.model.heads = 8;
        c.model.frames = 243;
        c.model.joints = 17;
        c.sampler.hypotheses = 20;
        c.sampler.iterations = 10;
        return c;
    }
    throw ConfigError("unknown preset '" + name + "' (expected tiny or paper)");
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    std::string preset = "tiny";
    if (j.is_object() && j.contains("preset")) {
        if (!j.at("preset").is_string()) {
            throw ConfigError("config key 'preset' must be a string");
        }
        preset = j.at("preset").get<std::string>();
    }
    RunConfig c = preset_named(preset);
    Reader root(j, "");
    root.read("preset", c.preset);
    root.read("seed", c.seed);
    root.section("schedule", [&](Reader& r) {
        std::string kind = to_string(c.schedule.kind);
        r.read("timesteps", c.schedule.timesteps);
        r.read("kind", kind);
        r.read("beta_min", c.schedule.beta_min);
        r.read("beta_max", c.schedule.beta_max);
        c.schedule.kind = parse_schedule_kind(kind);
    });
    root.section("model", [&](Reader& r) {
        std::string precision = precision_name(c.precision);
        r.read("dim", c.model.dim);
        r.read("heads", c.model.heads);
        r.read("spatial_blocks", c.model.spatial_blocks);
        r.read("temporal_blocks", c.model.temporal_blocks);
        r.read("spatio_temporal_blocks", c.model.spatio_temporal_blocks);
        r.read("frames", c.model.frames);
        r.read("joints", c.model.joints);
        r.read("mlp_ratio", c.model.mlp_ratio);
        r.read("use_prompt", c.model.use_prompt);
        r.read("use_fpc", c.model.use_fpc);
        r.read("use_pts", c.model.use_pts);
        r.read("precision", precision);
        c.precision = parse_precision(precision);
    });
    root.section("train", [&](Reader& r) {
        r.read("epochs", c.train.epochs);
        r.read("batch_size", c.train.batch_size);
        r.read("lr", c.train.lr);
        r.read("lr_decay", c.train.lr_decay);
        r.read("beta1", c.train.beta1);
        r.read("beta2", c.train.beta2);
        r.read("eps", c.train.eps);
        r.read("weight_decay", c.train.weight_decay);
        r.read("grad_clip", c.train.grad_clip);
        r.read("max_steps", c.train.max_steps);
    });
    root.section("sampler", [&](Reader& r) {
        r.read("hypotheses", c.sampler.hypotheses);
        r.read("iterations", c.sampler.iterations);
        r.read("deterministic", c.sampler.deterministic);
        r.read("per_frame_jpma", c.sampler.jpma.per_frame);
    });
    root.section("prompt", [&](Reader& r) {
        r.read("token_budget", c.token_budget);
        r.read("frozen_tokens", c.frozen_tokens);
    });
    root.section("data", [&](Reader& r) {
        std::string mode = to_string(c.normalization.mode);
        r.read("dataset", c.dataset);
        r.read("normalization", mode);
        r.read("metric_scale", c.normalization.metric_scale);
        r.read("keypoint_scale", c.normalization.keypoint_scale);
        r.read("root_joint", c.normalization.root_joint);
        c.normalization.mode = parse_normalization_mode(mode);
    });
    root.section("eval", [&](Reader& r) { r.read("rigid_only", c.rigid_only); });
    root.finish();
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

nlohmann::json RunConfig::to_json() const {
    return {
        {"preset", preset},
        {"seed", seed},
        {"schedule",
         {{"timesteps", schedule.timesteps},
          {"kind", to_string(schedule.kind)},
          {"beta_min", schedule.beta_min},
          {"beta_max", schedule.beta_max}}},
        {"model",
         {{"dim", model.dim},
          {"heads", model.heads},
          {"spatial_blocks", model.spatial_blocks},
          {"temporal_blocks", model.temporal_blocks},
          {"spatio_temporal_blocks", model.spatio_temporal_blocks},
          {"frames", model.frames},
          {"joints", model.joints},
          {"mlp_ratio", model.mlp_ratio},
          {"use_prompt", model.use_prompt},
          {"use_fpc", model.use_fpc},
          {"use_pts", model.use_pts},
          {"precision", precision_name(precision)}}},
        {"train",
         {{"epochs", train.epochs},
          {"batch_size", train.batch_size},
          {"lr", train.lr},
          {"lr_decay", train.lr_decay},
          {"beta1", train.beta1},
          {"beta2", train.beta2},
          {"eps", train.eps},
          {"weight_decay", train.weight_decay},
          {"grad_clip", train.grad_clip},
          {"max_steps", train.max_steps}}},
        {"sampler",
         {{"hypotheses", sampler.hypotheses},
          {"iterations", sampler.iterations},
          {"deterministic", sampler.deterministic},
          {"per_frame_jpma", sampler.jpma.per_frame}}},
        {"prompt", {{"token_budget", token_budget}, {"frozen_tokens", frozen_tokens}}},
        {"data",
         {{"dataset", dataset},
          {"normalization", to_string(normalization.mode)},
          {"metric_scale", normalization.metric_scale},
          {"keypoint_scale", normalization.keypoint_scale},
          {"root_joint", normalization.root_joint}}},
        {"eval", {{"rigid_only", rigid_only}}},
    };
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    sampler.validate();
    if (sampler.iterations > schedule.timesteps) {
        throw ConfigError("sampler.iterations cannot exceed schedule.timesteps");
    }
    PromptSpec spec;
    spec.token_budget = token_budget;
    spec.validate();
    build_schedule(schedule.timesteps, schedule.kind, schedule.beta_min, schedule.beta_max);
    if (!(normalization.metric_scale > 0.0) || !(normalization.keypoint_scale > 0.0)) {
        throw ConfigError("data.metric_scale and data.keypoint_scale must be positive");
    }
    if (normalization.root_joint < 0 || normalization.root_joint >= model.joints) {
        throw ConfigError("data.root_joint must index a joint of the model");
    }
}

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string fnv1a_hex(const std::string& text) {
    const std::uint64_t h = fnv1a64(text);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

nlohmann::json RunConfig::provenance_json() const {
    auto j = to_json();
    j["data"].erase("dataset");
    j["prompt"].erase("frozen_tokens");
    return j;
}

std::string RunConfig::hash() const { return fnv1a_hex(provenance_json().dump()); }

} // namespace posediff
