#pragma once

// Experiment configuration: one JSON object with sections
//   problem: "sine1d" | "gradient2d"
//   model:   ModelConfig keys, optionally starting from "preset": "reference" | "tiny"
//   train:   TrainConfig keys
//   data:    generator keys (batch size and seed come from `train`)
// Unknown keys are rejected so typos surface as errors.

#include "compvae/nets.hpp"
#include "compvae/synthgen.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

namespace compvae {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    int batch_size = 256;
    double adam_alpha = 1e-4;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.9;
    double adam_epsilon = 1e-8;
    long anneal_every = 20000;
    double anneal_factor = 0.5;
    double alpha_min = 1e-6;
    int curriculum_start_K = 2;
    long curriculum_step_every = 3000;
    int curriculum_max_K = 16;
    long max_iterations = 500000;
    std::uint64_t seed = 0;
    long checkpoint_every = 5000;
    long metrics_every = 100;
    long convergence_window = 10000;
    double convergence_min_improvement_bits = 0.1;
    int max_consecutive_restores = 3;
    std::string precision = "float32";  // "float32" or "float64"

    void validate() const {
        auto need = [](bool ok, const std::string& what) {
            if (!ok) throw ConfigError("train config: " + what);
        };
        need(batch_size >= 1, "batch_size must be >= 1");
        need(adam_alpha > 0 && alpha_min > 0, "learning rates must be positive");
        need(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1, "adam betas must be in [0, 1)");
        need(adam_epsilon > 0, "adam_epsilon must be positive");
        need(anneal_every >= 1, "anneal_every must be >= 1");
        need(anneal_factor > 0 && anneal_factor <= 1, "anneal_factor must be in (0, 1]");
        need(curriculum_start_K >= 1 && curriculum_step_every >= 1 && curriculum_max_K >= 1,
             "curriculum values must be positive");
        need(curriculum_start_K <= curriculum_max_K, "curriculum_start_K must not exceed curriculum_max_K");
        need(max_iterations >= 1, "max_iterations must be >= 1");
        need(checkpoint_every >= 1 && metrics_every >= 1, "checkpoint_every and metrics_every must be >= 1");
        need(convergence_window >= 1 && convergence_min_improvement_bits >= 0, "convergence settings must be positive");
        need(max_consecutive_restores >= 0, "max_consecutive_restores must be >= 0");
        need(precision == "float32" || precision == "float64", "precision must be float32 or float64");
    }
};

/// Paper defaults; the curriculum cap differs per problem.
inline TrainConfig default_train_config(synthgen::Problem p) {
    TrainConfig t;
    t.curriculum_max_K = p == synthgen::Problem::sine1d ? 16 : 8;
    return t;
}

struct ExperimentConfig {
    synthgen::Problem problem = synthgen::Problem::sine1d;
    nets::ModelConfig model;
    TrainConfig train;
    synthgen::DataSpec data = synthgen::SineBatchSpec{};

    /// Generator spec with the batch size and seed this run uses.
    synthgen::DataSpec stream_spec(std::uint64_t data_seed) const {
        synthgen::DataSpec s = data;
        std::visit(
            [&](auto& spec) {
                spec.batch_size = train.batch_size;
                spec.seed = data_seed;
            },
            s);
        return s;
    }

    /// Copies data geometry into the model config and checks cross-section consistency.
    void finalize() {
        if (synthgen::problem_of(data) != problem) throw ConfigError("data section does not match the problem type");
        model.problem = problem;
        if (const auto* s = std::get_if<synthgen::SineBatchSpec>(&data)) {
            model.timesteps = s->timesteps;
            model.freq_lo = s->freq_range.lo;
            model.freq_hi = s->freq_range.hi;
        }
        try {
            model.validate();
            std::visit([](const auto& s) { s.validate(); }, data);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        train.validate();
        const auto parts = synthgen::parts_range(data);
        if (train.curriculum_start_K < parts.lo)
            throw ConfigError("train config: curriculum_start_K is below the data's minimum part count");
    }
};

namespace config_detail {

/// Tracks which keys of a JSON object were read, to reject the rest.
class Section {
public:
    Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError("section '" + name_ + "' must be a JSON object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(name_ + "." + key + ": wrong type");
        }
    }

    void known(const char* key) { seen_.insert(key); }

    void range(const char* key, synthgen::IntRange& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer())
            throw ConfigError(name_ + "." + key + ": expected [lo, hi] integers");
        out = {v[0].get<int>(), v[1].get<int>()};
    }

    void interval(const char* key, double& lo, double& hi) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
            throw ConfigError(name_ + "." + key + ": expected [lo, hi] numbers");
        lo = v[0].get<double>();
        hi = v[1].get<double>();
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("unknown key '" + name_ + "." + k + "'");
    }

private:
    const nlohmann::json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

}  // namespace config_detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using config_detail::Section;
    Section top(j, "config");
    ExperimentConfig c;

    std::string problem = "sine1d";
    top.get("problem", problem);
    try {
        c.problem = synthgen::problem_from_string(problem);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    c.train = default_train_config(c.problem);
    c.model.problem = c.problem;
    if (c.problem == synthgen::Problem::gradient2d) c.data = synthgen::GradientBatchSpec{};

    static const nlohmann::json empty = nlohmann::json::object();
    auto sub = [&](const char* name) -> const nlohmann::json& {
        top.known(name);
        return j.contains(name) ? j.at(name) : empty;
    };

    {
        Section m(sub("model"), "model");
        std::string preset, arch;
        m.get("preset", preset);
        if (preset == "reference")
            c.model = nets::reference_config(c.problem);
        else if (preset == "tiny")
            c.model = nets::tiny_config(c.problem, nets::Arch::dense);
        else if (!preset.empty())
            throw ConfigError("model.preset must be 'reference' or 'tiny'");
        m.get("arch", arch);
        if (!arch.empty()) {
            try {
                c.model.arch = nets::arch_from_string(arch);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        }
        m.get("dim_w", c.model.dim_w);
        m.get("dim_z", c.model.dim_z);
        m.get("graph_layers", c.model.graph_layers);
        m.get("sigma_floor", c.model.sigma_floor);
        m.get("noise_scale", c.model.noise_scale);
        m.get("label_embed", c.model.label_embed);
        m.get("location_embed", c.model.location_embed);
        m.get("prior_hidden", c.model.prior_hidden);
        m.get("decoder_hidden", c.model.decoder_hidden);
        m.get("feature", c.model.feature);
        m.get("encoder_hidden", c.model.encoder_hidden);
        m.get("graph_width", c.model.graph_width);
        m.get("conv_channels", c.model.conv_channels);
        m.finish();
    }
    {
        Section t(sub("train"), "train");
        auto& r = c.train;
        t.get("batch_size", r.batch_size);
        t.get("adam_alpha", r.adam_alpha);
        t.get("adam_beta1", r.adam_beta1);
        t.get("adam_beta2", r.adam_beta2);
        t.get("adam_epsilon", r.adam_epsilon);
        t.get("anneal_every", r.anneal_every);
        t.get("anneal_factor", r.anneal_factor);
        t.get("alpha_min", r.alpha_min);
        t.get("curriculum_start_K", r.curriculum_start_K);
        t.get("curriculum_step_every", r.curriculum_step_every);
        t.get("curriculum_max_K", r.curriculum_max_K);
        t.get("max_iterations", r.max_iterations);
        t.get("seed", r.seed);
        t.get("checkpoint_every", r.checkpoint_every);
        t.get("metrics_every", r.metrics_every);
        t.get("convergence_window", r.convergence_window);
        t.get("convergence_min_improvement_bits", r.convergence_min_improvement_bits);
        t.get("max_consecutive_restores", r.max_consecutive_restores);
        t.get("precision", r.precision);
        t.finish();
    }
    {
        Section d(sub("data"), "data");
        if (auto* s = std::get_if<synthgen::SineBatchSpec>(&c.data)) {
            d.range("freq_range", s->freq_range);
            d.range("parts_range", s->parts_range);
            d.get("timesteps", s->timesteps);
            d.get("resolution", s->resolution);
            d.get("nonlinearity", s->nonlinearity);
            d.get("amplitude_mean", s->amplitude_mean);
            d.get("amplitude_std", s->amplitude_std);
            d.get("phase_std", s->phase_std);
        } else {
            auto& g = std::get<synthgen::GradientBatchSpec>(c.data);
            d.range("anchor_count_range", g.anchor_count_range);
            d.interval("intensity_range", g.intensity_lo, g.intensity_hi);
            d.interval("location_range", g.location_lo, g.location_hi);
            d.get("gamma", g.gamma);
        }
        d.finish();
    }
    top.finish();
    c.finalize();
    return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["problem"] = synthgen::to_string(c.problem);
    const auto& m = c.model;
    j["model"] = {{"arch", nets::to_string(m.arch)},
                  {"dim_w", m.dim_w},
                  {"dim_z", m.dim_z},
                  {"graph_layers", m.graph_layers},
                  {"sigma_floor", m.sigma_floor},
                  {"noise_scale", m.noise_scale},
                  {"label_embed", m.label_embed},
                  {"location_embed", m.location_embed},
                  {"prior_hidden", m.prior_hidden},
                  {"decoder_hidden", m.decoder_hidden},
                  {"feature", m.feature},
                  {"encoder_hidden", m.encoder_hidden},
                  {"graph_width", m.graph_width},
                  {"conv_channels", m.conv_channels}};
    const auto& t = c.train;
    j["train"] = {{"batch_size", t.batch_size},
                  {"adam_alpha", t.adam_alpha},
                  {"adam_beta1", t.adam_beta1},
                  {"adam_beta2", t.adam_beta2},
                  {"adam_epsilon", t.adam_epsilon},
                  {"anneal_every", t.anneal_every},
                  {"anneal_factor", t.anneal_factor},
                  {"alpha_min", t.alpha_min},
                  {"curriculum_start_K", t.curriculum_start_K},
                  {"curriculum_step_every", t.curriculum_step_every},
                  {"curriculum_max_K", t.curriculum_max_K},
                  {"max_iterations", t.max_iterations},
                  {"seed", t.seed},
                  {"checkpoint_every", t.checkpoint_every},
                  {"metrics_every", t.metrics_every},
                  {"convergence_window", t.convergence_window},
                  {"convergence_min_improvement_bits", t.convergence_min_improvement_bits},
                  {"max_consecutive_restores", t.max_consecutive_restores},
                  {"precision", t.precision}};
    if (const auto* s = std::get_if<synthgen::SineBatchSpec>(&c.data)) {
        j["data"] = {{"freq_range", {s->freq_range.lo, s->freq_range.hi}},
                     {"parts_range", {s->parts_range.lo, s->parts_range.hi}},
                     {"timesteps", s->timesteps},
                     {"resolution", s->resolution},
                     {"nonlinearity", s->nonlinearity},
                     {"amplitude_mean", s->amplitude_mean},
                     {"amplitude_std", s->amplitude_std},
                     {"phase_std", s->phase_std}};
    } else {
        const auto& g = std::get<synthgen::GradientBatchSpec>(c.data);
        j["data"] = {{"anchor_count_range", {g.anchor_count_range.lo, g.anchor_count_range.hi}},
                     {"intensity_range", {g.intensity_lo, g.intensity_hi}},
                     {"location_range", {g.location_lo, g.location_hi}},
                     {"gamma", g.gamma}};
    }
    return j;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is, nullptr, true, true);  // comments allowed
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    try {
        return config_from_json(j);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

}  // namespace compvae
