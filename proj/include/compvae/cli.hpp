#pragma once

// Command-line driver: train, resume, compose, eval, dump-data, kl-debug.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 training diverged.
// Every artifact goes under the output directory (--output, else
// $COMPVAE_OUTPUT, else ./compvae_output).

#include "compvae/config.hpp"
#include "compvae/evalkit/oracle.hpp"
#include "compvae/evalkit/probes.hpp"
#include "compvae/io.hpp"
#include "compvae/plot.hpp"
#include "compvae/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace compvae::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using synthgen::PartLabel;
using synthgen::Problem;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GlobalOptions {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output;
    std::string device = "cpu";
};

inline fs::path output_dir(const GlobalOptions& g) {
    if (g.output) return *g.output;
    if (const char* env = std::getenv("COMPVAE_OUTPUT"); env && *env) return env;
    return "compvae_output";
}

/// Precision dispatch: calls f.template operator()<float or double>().
template <class F>
decltype(auto) with_precision(const std::string& precision, F&& f) {
    if (precision == "float64") return f.template operator()<double>();
    return f.template operator()<float>();
}

// ------------------------------------------------------------ labels

inline const std::vector<std::string>& color_names() {
    static const std::vector<std::string> names{"red", "green", "blue", "black", "white"};
    return names;
}

/// 1D: "3,5,7". 2D: "red:-0.5:0.2,white:0.1:0.4" (color name or id, then x and y).
inline std::vector<PartLabel> parse_labels(const std::string& text, Problem problem) {
    std::vector<PartLabel> out;
    std::stringstream ss(text);
    std::string item;
    auto number = [&](const std::string& s, const std::string& what) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(s, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != s.size()) throw UsageError("bad " + what + " '" + s + "' in labels '" + text + "'");
        return v;
    };
    while (std::getline(ss, item, ',')) {
        if (item.empty()) throw UsageError("empty label in '" + text + "'");
        if (problem == Problem::sine1d) {
            const double f = number(item, "frequency");
            if (f != std::floor(f)) throw UsageError("frequency labels are integers, got '" + item + "'");
            out.push_back({static_cast<int>(f), 0.0, 0.0});
        } else {
            std::vector<std::string> parts;
            std::stringstream is(item);
            std::string p;
            while (std::getline(is, p, ':')) parts.push_back(p);
            if (parts.size() != 3) throw UsageError("2D labels are color:x:y, got '" + item + "'");
            const auto& names = color_names();
            const auto it = std::find(names.begin(), names.end(), parts[0]);
            const int color = it != names.end() ? static_cast<int>(it - names.begin())
                                                : static_cast<int>(number(parts[0], "color"));
            out.push_back({color, number(parts[1], "x"), number(parts[2], "y")});
        }
    }
    if (out.empty()) throw UsageError("no labels given");
    return out;
}

inline std::string format_label(const PartLabel& l, Problem problem) {
    if (problem == Problem::sine1d) return std::to_string(l.category);
    std::ostringstream os;
    const auto& names = color_names();
    os << (l.category >= 0 && l.category < static_cast<int>(names.size()) ? names[static_cast<std::size_t>(l.category)]
                                                                          : std::to_string(l.category))
       << ":" << l.x << ":" << l.y;
    return os.str();
}

inline io::Tensor labels_tensor(std::span<const PartLabel> labels) {
    Matrix<double> m(static_cast<Eigen::Index>(labels.size()), 3);
    for (std::size_t i = 0; i < labels.size(); ++i)
        m.row(static_cast<Eigen::Index>(i)) << labels[i].category, labels[i].x, labels[i].y;
    return io::Tensor::from_matrix(m);
}

// ------------------------------------------------------------ metrics log

inline std::vector<trainer::MetricsRow> read_metrics(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::vector<trainer::MetricsRow> rows;
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        trainer::MetricsRow r;
        if (!(ls >> r.iteration >> r.k_max >> r.learning_rate >> r.L_w >> r.L_z >> r.L_x >> r.elbo >> r.wall_time_s))
            throw std::runtime_error(path.string() + ": malformed metrics line '" + line + "'");
        rows.push_back(r);
    }
    return rows;
}

/// Loss curves in bits against iteration; log axis, signed-log when a curve crosses zero.
inline void write_loss_plot(const fs::path& metrics, const fs::path& svg) {
    const auto rows = read_metrics(metrics);
    if (rows.empty()) return;
    plot::Panel p;
    p.title = "losses";
    p.x_label = "iteration";
    p.y_label = "bits";
    p.series = {{"L_w", {}, {}}, {"L_z", {}, {}}, {"L_x", {}, {}}, {"ELBO", {}, {}}};
    bool positive = true;
    for (const auto& r : rows) {
        const double v[] = {r.L_w, r.L_z, r.L_x, r.elbo};
        for (int k = 0; k < 4; ++k) {
            p.series[static_cast<std::size_t>(k)].x.push_back(static_cast<double>(r.iteration));
            p.series[static_cast<std::size_t>(k)].y.push_back(v[k]);
            positive = positive && v[k] > 0;
        }
    }
    p.y_scale = positive ? plot::Scale::log : plot::Scale::symlog;
    if (!positive) p.y_label = "bits (signed log scale)";
    plot::write_svg(svg, {p}, 1);
}

// ------------------------------------------------------------ train / resume

inline fs::path checkpoint_path(const fs::path& out, long iteration) {
    char name[64];
    std::snprintf(name, sizeof name, "iter_%08ld.cvae", iteration);
    return out / "checkpoints" / name;
}

inline void save_checkpoint(const fs::path& out, long iteration, const io::Archive& a) {
    io::write_archive(checkpoint_path(out, iteration), a);
    io::write_archive(out / "checkpoints" / "latest.cvae", a);
}

template <class S>
int drive_training(trainer::Trainer<S>& t, const fs::path& out, long until, std::ostream& log) {
    const auto& tc = t.config().train;
    std::ofstream metrics(out / "metrics.tsv", std::ios::app);
    if (!metrics) throw std::runtime_error("cannot open " + (out / "metrics.tsv").string());
    long last_saved = -1;
    trainer::Hooks hooks;
    hooks.on_metrics = [&](const trainer::MetricsRow& r) {
        metrics << trainer::format_row(r) << '\n';
        metrics.flush();
        if (r.iteration % (10 * tc.metrics_every) == 0)
            log << "iter " << r.iteration << "  K<=" << r.k_max << "  elbo " << r.elbo << " bits  (L_w " << r.L_w
                << ", L_z " << r.L_z << ", L_x " << r.L_x << ")\n";
    };
    hooks.on_checkpoint = [&](long iteration, const io::Archive& a) {
        save_checkpoint(out, iteration, a);
        last_saved = iteration;
    };
    hooks.on_restore = [&](long iteration, int total) {
        log << "non-finite loss; restored the last checkpoint (iteration " << iteration << ", restore #" << total
            << "), learning-rate scale now " << t.recovery_scale() << "\n";
    };
    trainer::StopReason reason;
    try {
        reason = t.run(until, hooks);
    } catch (const trainer::DivergenceError& e) {
        metrics.close();
        write_loss_plot(out / "metrics.tsv", out / "loss.svg");
        log << "error: " << e.what() << "\n";
        return 2;
    }
    if (last_saved != t.iteration()) save_checkpoint(out, t.iteration(), t.snapshot());
    metrics.close();
    write_loss_plot(out / "metrics.tsv", out / "loss.svg");
    log << "stopped at iteration " << t.iteration() << " (" << trainer::to_string(reason) << "); outputs in "
        << out.string() << "\n";
    return 0;
}

struct TrainArgs {
    std::optional<long> iterations;
};

inline int cmd_train(const GlobalOptions& g, const TrainArgs& a, std::ostream& log) {
    if (!g.config) throw UsageError("train needs --config PATH");
    ExperimentConfig cfg = load_config(*g.config);
    if (g.seed) cfg.train.seed = *g.seed;
    const fs::path out = output_dir(g);
    fs::create_directories(out / "checkpoints");
    plot::write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
    plot::write_text(out / "metrics.tsv", std::string(trainer::metrics_header()) + "\n");
    const long until = a.iterations.value_or(cfg.train.max_iterations);
    return with_precision(cfg.train.precision, [&]<class S>() {
        trainer::Trainer<S> t(cfg);
        return drive_training(t, out, until, log);
    });
}

struct ResumeArgs {
    std::optional<std::string> checkpoint;
    std::optional<long> iterations;
};

/// Keeps the metrics rows up to the checkpoint so numbering stays contiguous.
inline void trim_metrics(const fs::path& path, long iteration) {
    std::string text = std::string(trainer::metrics_header()) + "\n";
    if (fs::exists(path))
        for (const auto& r : read_metrics(path))
            if (r.iteration <= iteration) text += trainer::format_row(r) + "\n";
    plot::write_text(path, text);
}

inline int cmd_resume(const GlobalOptions& g, const ResumeArgs& a, std::ostream& log) {
    const fs::path out = output_dir(g);
    const fs::path ckpt = a.checkpoint ? fs::path(*a.checkpoint) : out / "checkpoints" / "latest.cvae";
    if (g.config) log << "note: resume takes its configuration from the checkpoint; --config is ignored\n";
    if (g.seed) log << "note: resume continues the checkpoint's random streams; --seed is ignored\n";
    const io::Archive archive = io::read_archive(ckpt);
    const ExperimentConfig cfg = trainer::config_from_archive(archive);
    fs::create_directories(out / "checkpoints");
    const long until = a.iterations.value_or(cfg.train.max_iterations);
    return with_precision(cfg.train.precision, [&]<class S>() {
        trainer::Trainer<S> t(archive);
        trim_metrics(out / "metrics.tsv", t.iteration());
        log << "resuming from iteration " << t.iteration() << " (" << ckpt.string() << ")\n";
        return drive_training(t, out, until, log);
    });
}

// ------------------------------------------------------------ compose

enum class ComposeMode { incremental, single };

struct ComposeRequest {
    fs::path checkpoint;
    std::vector<PartLabel> labels;
    ComposeMode mode = ComposeMode::incremental;
    int samples_per_step = 4;
    fs::path output_dir;
    std::uint64_t seed = 0;
};

struct Composition {
    std::vector<std::vector<PartLabel>> steps;  ///< label set used at each step
    std::vector<Matrix<double>> whole_mean;     ///< per sample: (steps, x_dim) decoder means
    std::vector<Matrix<double>> whole_sample;   ///< per sample: (steps, x_dim) draws from p(x|z, w~)
    std::vector<Matrix<double>> part_mean;      ///< per sample: (K, x_dim) each part decoded on its own
};

/// Draws every part latent once per sample and reuses it across steps, so a
/// step differs from the previous one only by the added part. In single mode
/// the labels are put in a canonical order first, making the output
/// independent of the order they were listed in.
template <class S>
Composition compose(const nets::Model<S>& model, std::vector<PartLabel> labels, ComposeMode mode, int samples,
                    std::uint64_t seed) {
    if (labels.empty()) throw UsageError("compose: need at least one label");
    if (samples < 1) throw UsageError("compose: samples per step must be >= 1");
    model.validate_labels(labels);
    if (mode == ComposeMode::single)
        std::sort(labels.begin(), labels.end(), [](const PartLabel& a, const PartLabel& b) {
            return std::tie(a.category, a.x, a.y) < std::tie(b.category, b.x, b.y);
        });
    Composition c;
    const std::size_t k = labels.size();
    if (mode == ComposeMode::single)
        c.steps.push_back(labels);
    else
        for (std::size_t i = 1; i <= k; ++i) c.steps.emplace_back(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(i));

    Rng rng(trainer::derive_seed(seed, trainer::sampling_noise));
    auto normal = [&rng](Eigen::Index r, Eigen::Index cols) {
        Matrix<S> m(r, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.normal());
        return m;
    };
    auto draw = [&](const latentcorr::DiagGaussian<S>& d) {
        return Matrix<S>(d.mu.array() + (d.log_var.array() * S(0.5)).exp() * normal(d.mu.rows(), d.mu.cols()).array());
    };
    const auto& cfg = model.config();
    const auto prior = model.prior_w(labels);
    for (int s = 0; s < samples; ++s) {
        const Matrix<S> w = draw(prior);
        Matrix<double> means(static_cast<Eigen::Index>(c.steps.size()), cfg.x_dim());
        Matrix<double> draws(means.rows(), means.cols());
        for (std::size_t step = 0; step < c.steps.size(); ++step) {
            const auto n = static_cast<Eigen::Index>(c.steps[step].size());
            const Matrix<S> w_tilde = w.topRows(n).colwise().sum();
            const Matrix<S> z = draw(model.prior_z(w_tilde));
            auto px = model.decode(z, w_tilde);
            px.log_var = nets::expand_x_log_var(cfg, px.log_var);
            means.row(static_cast<Eigen::Index>(step)) = px.mu.row(0).template cast<double>();
            draws.row(static_cast<Eigen::Index>(step)) = draw(px).row(0).template cast<double>();
        }
        Matrix<double> parts(static_cast<Eigen::Index>(k), cfg.x_dim());
        for (std::size_t i = 0; i < k; ++i) {
            const Matrix<S> wi = w.row(static_cast<Eigen::Index>(i));
            const Matrix<S> z = draw(model.prior_z(wi));
            parts.row(static_cast<Eigen::Index>(i)) = model.decode(z, wi).mu.row(0).template cast<double>();
        }
        c.whole_mean.push_back(std::move(means));
        c.whole_sample.push_back(std::move(draws));
        c.part_mean.push_back(std::move(parts));
    }
    return c;
}

inline std::string steps_caption(const std::vector<PartLabel>& labels, Problem p) {
    std::string s = "{";
    for (std::size_t i = 0; i < labels.size(); ++i) s += (i ? "," : "") + format_label(labels[i], p);
    return s + "}";
}

inline void write_composition(const Composition& c, const ExperimentConfig& cfg, const ComposeRequest& req) {
    const fs::path& out = req.output_dir;
    fs::create_directories(out);
    const Problem problem = cfg.problem;
    const std::size_t n_steps = c.steps.size(), samples = c.whole_mean.size();

    io::Archive a;
    a.meta = {{"kind", "composition"},
              {"problem", synthgen::to_string(problem)},
              {"mode", req.mode == ComposeMode::single ? "single" : "incremental"},
              {"seed", req.seed},
              {"samples_per_step", samples},
              {"labels", steps_caption(c.steps.back(), problem)}};
    a.put("labels", labels_tensor(c.steps.back()));
    for (std::size_t s = 0; s < samples; ++s) {
        a.put("whole_mean/" + std::to_string(s), io::Tensor::from_matrix(c.whole_mean[s]));
        a.put("whole_sample/" + std::to_string(s), io::Tensor::from_matrix(c.whole_sample[s]));
        a.put("part_mean/" + std::to_string(s), io::Tensor::from_matrix(c.part_mean[s]));
    }
    io::write_archive(out / "composition.cvae", a);

    auto step_name = [](std::size_t i, const char* ext) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "step_%02zu.%s", i + 1, ext);
        return std::string(buf);
    };
    if (problem == Problem::sine1d) {
        std::vector<double> t(static_cast<std::size_t>(c.whole_mean[0].cols()));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
        auto to_vec = [](const Matrix<double>& m, Eigen::Index r) {
            std::vector<double> v(static_cast<std::size_t>(m.cols()));
            for (Eigen::Index j = 0; j < m.cols(); ++j) v[static_cast<std::size_t>(j)] = m(r, j);
            return v;
        };
        std::vector<plot::Panel> all;
        for (std::size_t step = 0; step < n_steps; ++step) {
            plot::Panel parts{"parts " + steps_caption(c.steps[step], problem), {}, plot::Scale::linear, "t", "x"};
            const std::size_t first = req.mode == ComposeMode::single ? 0 : step;
            for (std::size_t i = first; i < c.steps[step].size(); ++i)
                parts.series.push_back({"l=" + format_label(c.steps[step][i], problem), t,
                                        to_vec(c.part_mean[0], static_cast<Eigen::Index>(i))});
            plot::Panel whole{"whole " + steps_caption(c.steps[step], problem), {}, plot::Scale::linear, "t", "x"};
            for (std::size_t s = 0; s < samples; ++s)
                whole.series.push_back({s == 0 ? "decoder mean" : "", t,
                                        to_vec(c.whole_mean[s], static_cast<Eigen::Index>(step)), s == 0 ? 1.0 : 0.45});
            plot::write_svg(out / step_name(step, "svg"), {parts, whole}, 2);
            all.push_back(std::move(parts));
            all.push_back(std::move(whole));
        }
        plot::write_svg(out / "panel.svg", all, 2);
    } else {
        const int n = synthgen::GradientBatchSpec{}.image_size;
        std::vector<RowVector<double>> panel;
        const int cols = static_cast<int>(samples) + 1;
        for (std::size_t step = 0; step < n_steps; ++step) {
            std::vector<RowVector<double>> row;
            const std::size_t part = req.mode == ComposeMode::single ? 0 : step;
            row.push_back(c.part_mean[0].row(static_cast<Eigen::Index>(part)));
            for (std::size_t s = 0; s < samples; ++s) row.push_back(c.whole_mean[s].row(static_cast<Eigen::Index>(step)));
            plot::write_ppm_grid(out / step_name(step, "ppm"), row, n, cols);
            panel.insert(panel.end(), row.begin(), row.end());
        }
        plot::write_ppm_grid(out / "panel.ppm", panel, n, cols);
    }
}

inline int cmd_compose(const ComposeRequest& req, std::ostream& log) {
    const io::Archive archive = io::read_archive(req.checkpoint);
    const ExperimentConfig cfg = trainer::config_from_archive(archive);
    for (const auto& l : req.labels) {
        if (cfg.problem == Problem::gradient2d && (l.category < 0 || l.category > 4))
            throw UsageError("label " + format_label(l, cfg.problem) + " is not a color id of the gradient2d problem");
    }
    return with_precision(cfg.train.precision, [&]<class S>() {
        const auto model = trainer::model_from_archive<S>(archive);
        Composition c;
        try {
            c = compose(model, req.labels, req.mode, req.samples_per_step, req.seed);
        } catch (const std::invalid_argument& e) {
            throw UsageError(std::string("labels do not fit the checkpoint's problem: ") + e.what());
        }
        write_composition(c, cfg, req);
        log << "composed " << c.steps.size() << " step(s) x " << req.samples_per_step << " sample(s) into "
            << req.output_dir.string() << "\n";
        return 0;
    });
}

// ------------------------------------------------------------ eval

struct EvalArgs {
    std::optional<std::string> checkpoint;
    std::string suite = "all";
    int generations = 100;
    std::size_t mc_samples = 100000;
    int kl_cases = 20;
};

/// Fixed-width table built from a reports file, one line per record.
inline std::string summary_table(const fs::path& reports) {
    std::ifstream is(reports);
    if (!is) throw std::runtime_error("cannot open " + reports.string());
    std::ostringstream os;
    os << std::left << std::setw(20) << "probe" << std::setw(34) << "source" << std::setw(44) << "metric" << "value\n";
    os << std::string(106, '-') << "\n";
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const json r = json::parse(line);
        const json& h = r.at("headline");
        std::string source = r.at("source").get<std::string>();
        if (source.size() > 32) source = "..." + source.substr(source.size() - 29);
        const json& v = h.at("value");
        os << std::setw(20) << r.at("probe").get<std::string>() << std::setw(34) << source << std::setw(44)
           << h.at("metric").get<std::string>() << (v.is_string() ? v.get<std::string>() : v.dump()) << "\n";
    }
    return os.str();
}

inline std::string problem_layout(Problem p) {
    return p == Problem::sine1d ? "(batch, T) curves" : "(batch, 3*32*32) images, channel-major (R plane, G plane, B plane)";
}

inline json kl_oracle_report(std::size_t n_samples, int cases, Rng& rng) {
    static constexpr Eigen::Index ks[] = {1, 2, 4, 8}, ds[] = {2, 8};
    json rec = {{"probe", "kl_oracle"}, {"source", "random families"}, {"mc_samples", n_samples}};
    int agree = 0;
    json rows = json::array();
    for (int c = 0; c < cases; ++c) {
        const auto r = evalkit::kl_oracle_case(ks[c % 4], ds[(c / 4) % 2], n_samples, rng);
        agree += r.agrees;
        rows.push_back({{"K", r.parts},
                        {"d", r.dim},
                        {"closed_form", r.closed_form},
                        {"monte_carlo", r.mc.estimate},
                        {"std_error", r.mc.std_error},
                        {"agrees", r.agrees}});
    }
    rec["cases"] = rows;
    rec["headline"] = {{"metric", "cases agreeing (1% or 3 s.e.)"}, {"value", std::to_string(agree) + "/" + std::to_string(cases)}};
    return rec;
}

inline int cmd_eval(const GlobalOptions& g, const EvalArgs& a, std::ostream& log) {
    static const std::vector<std::string> suites{"kl_oracle", "freq", "amplitude", "color", "all"};
    if (std::find(suites.begin(), suites.end(), a.suite) == suites.end())
        throw UsageError("unknown suite '" + a.suite + "' (kl_oracle, freq, amplitude, color, all)");
    const fs::path out = output_dir(g);
    fs::create_directories(out);
    const std::uint64_t seed = g.seed.value_or(0);
    std::optional<io::Archive> archive;
    std::optional<ExperimentConfig> cfg;
    if (a.checkpoint) {
        archive = io::read_archive(*a.checkpoint);
        cfg = trainer::config_from_archive(*archive);
    } else if (g.config) {
        cfg = load_config(*g.config);
    }
    const Problem problem = cfg ? cfg->problem : Problem::sine1d;
    const bool want_all = a.suite == "all";
    std::vector<json> records;

    if (want_all || a.suite == "kl_oracle") {
        Rng rng(trainer::derive_seed(seed, 10));
        records.push_back(kl_oracle_report(a.mc_samples, a.kl_cases, rng));
    }

    auto model_run = [&]<class S>() {
        std::optional<nets::Model<S>> model;
        if (archive) model.emplace(trainer::model_from_archive<S>(*archive));
        const std::string source = model ? "model " + a.checkpoint.value() : "ground-truth generator";

        const bool freq = a.suite == "freq" || (want_all && problem == Problem::sine1d);
        const bool amp = a.suite == "amplitude" || (want_all && problem == Problem::sine1d);
        const bool color = a.suite == "color" || (want_all && (problem == Problem::gradient2d || !archive));
        if ((freq || amp) && problem != Problem::sine1d)
            throw UsageError("suite '" + a.suite + "' needs a sine1d checkpoint or config");
        if (color && archive && problem != Problem::gradient2d)
            throw UsageError("suite 'color' needs a gradient2d checkpoint");

        const synthgen::SineBatchSpec sine =
            cfg && problem == Problem::sine1d ? std::get<synthgen::SineBatchSpec>(cfg->data) : synthgen::SineBatchSpec{};
        const int train_max_k = cfg ? std::min(cfg->train.curriculum_max_K, synthgen::parts_range(cfg->data).hi)
                                    : sine.parts_range.hi;
        const evalkit::WholeSampler sampler =
            model ? evalkit::model_sampler(*model) : evalkit::ground_truth_sampler(sine);

        if (freq) {
            Rng rng(trainer::derive_seed(seed, 11));
            const auto r = evalkit::freq_recovery_probe(sampler, sine.freq_range, train_max_k, sine.resolution,
                                                        a.generations, rng);
            json rows = json::array();
            for (const auto& rep : r.reports)
                rows.push_back({{"target", rep.target_freqs},
                                {"detected", rep.detected_freqs},
                                {"matched", rep.matched_fraction},
                                {"in_range_precision", evalkit::in_range_precision(rep, sine.freq_range)}});
            records.push_back({{"probe", "freq_recovery"},
                               {"source", source},
                               {"generations", a.generations},
                               {"max_parts", train_max_k},
                               {"mean_matched_fraction", r.mean_matched_fraction},
                               {"mean_in_range_precision", r.mean_in_range_precision},
                               {"cases", rows},
                               {"headline", {{"metric", "mean matched fraction (precision " +
                                                            std::to_string(r.mean_in_range_precision).substr(0, 5) + ")"},
                                             {"value", r.mean_matched_fraction}}}});
        }
        if (amp) {
            Rng rng(trainer::derive_seed(seed, 12));
            std::vector<int> ks;
            for (int k = 1; k <= 2 * train_max_k; k *= 2) ks.push_back(k);
            if (ks.back() != 2 * train_max_k) ks.push_back(2 * train_max_k);
            const auto pts = evalkit::amplitude_vs_k(sampler, ks, sine.freq_range, std::max(a.generations / 2, 1), rng);
            json rows = json::array();
            bool finite = true;
            for (const auto& p : pts) {
                rows.push_back({{"K", p.parts}, {"mean_abs", p.mean_abs}, {"finite", p.finite}});
                finite = finite && p.finite;
            }
            const bool mono = evalkit::strictly_increasing(pts);
            records.push_back({{"probe", "amplitude_vs_K"},
                               {"source", source},
                               {"training_max_K", train_max_k},
                               {"points", rows},
                               {"monotone", mono},
                               {"finite", finite},
                               {"headline", {{"metric", "monotone in K"}, {"value", mono ? "yes" : "no"}}}});
        }
        if (color) {
            const synthgen::GradientBatchSpec spec = cfg && problem == Problem::gradient2d
                                                         ? std::get<synthgen::GradientBatchSpec>(cfg->data)
                                                         : synthgen::GradientBatchSpec{};
            Rng rng(trainer::derive_seed(seed, 13));
            double err = 0.0, base = 0.0;
            std::vector<double> intensity;
            for (int n = 0; n < a.generations; ++n) {
                const int k = static_cast<int>(rng.uniform_int(spec.anchor_count_range.lo, spec.anchor_count_range.hi));
                std::vector<PartLabel> labels(static_cast<std::size_t>(k));
                for (auto& l : labels) {
                    l.category = static_cast<int>(rng.uniform_int(0, 4));
                    l.x = rng.uniform(spec.location_lo, spec.location_hi);
                    l.y = rng.uniform(spec.location_lo, spec.location_hi);
                }
                intensity.assign(labels.size(), 0.0);
                for (auto& v : intensity) v = rng.uniform(spec.intensity_lo, spec.intensity_hi);
                const RowVector<double> truth = synthgen::gradient_image(labels, intensity, spec.gamma, spec.image_size);
                base += evalkit::color_field_error(truth, labels, spec, rng);
                if (model) {
                    const auto gen = nets::generate(*model, labels, rng);
                    err += evalkit::color_field_error(gen.x.mu.row(0).template cast<double>(), labels, spec, rng);
                }
            }
            json rec = {{"probe", "color_field_error"},
                        {"source", source},
                        {"generations", a.generations},
                        {"ground_truth_baseline", base / a.generations}};
            if (model) rec["model_error"] = err / a.generations;
            rec["headline"] = {{"metric", model ? "mean error (baseline " + std::to_string(base / a.generations) + ")"
                                                : "ground-truth self distance"},
                               {"value", model ? err / a.generations : base / a.generations}};
            records.push_back(rec);
        }
        return 0;
    };
    with_precision(cfg ? cfg->train.precision : "float64", model_run);

    {
        std::ofstream os(out / "reports.jsonl", std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + (out / "reports.jsonl").string());
        for (const auto& r : records) os << r.dump() << "\n";
    }
    const std::string table = summary_table(out / "reports.jsonl");
    plot::write_text(out / "summary.txt", table);
    log << table;
    return 0;
}

// ------------------------------------------------------------ dump-data

struct DumpArgs {
    int batches = 1;
};

inline int cmd_dump_data(const GlobalOptions& g, const DumpArgs& a, std::ostream& log) {
    if (a.batches < 1) throw UsageError("dump-data: --batches must be >= 1");
    ExperimentConfig cfg = g.config ? load_config(*g.config) : config_from_json(json::object());
    const std::uint64_t seed = g.seed.value_or(cfg.train.seed);
    const std::uint64_t data_seed = trainer::derive_seed(seed, trainer::data_stream);
    const synthgen::DataSpec spec = cfg.stream_spec(data_seed);
    synthgen::BatchStream stream(spec, synthgen::parts_range(spec).hi);
    const fs::path out = output_dir(g);
    io::Archive archive;
    archive.meta = {{"kind", "data"}, {"problem", synthgen::to_string(cfg.problem)}, {"seed", seed}};
    json tensors = json::array();
    for (int b = 0; b < a.batches; ++b) {
        const auto batch = stream.next();
        char prefix[32];
        std::snprintf(prefix, sizeof prefix, "batch_%04d/", b);
        archive.put(std::string(prefix) + "data", io::Tensor::from_matrix(batch.data));
        archive.put(std::string(prefix) + "labels", labels_tensor(batch.labels));
        archive.put(std::string(prefix) + "part_params", io::Tensor::from_matrix(batch.part_params));
    }
    for (const auto& [name, t] : archive.tensors)
        tensors.push_back({{"name", name}, {"dtype", io::to_string(t.dtype)}, {"shape", t.shape}});
    io::write_archive(out / "data.cvae", archive);
    json data = to_json(cfg)["data"];
    data["batch_size"] = cfg.train.batch_size;
    const json manifest = {
        {"archive", "data.cvae"},
        {"format", "CVAEARCH v1: magic, u32 version, u64 meta size + JSON meta, u32 tensor count, "
                   "per tensor (u32 name size, name, u8 dtype, u32 rank, u64 dims, raw little-endian row-major data), "
                   "u64 FNV-1a checksum"},
        {"problem", synthgen::to_string(cfg.problem)},
        {"seed", seed},
        {"data_stream_seed", data_seed},
        {"batches", a.batches},
        {"spec", data},
        {"layout",
         {{"data", problem_layout(cfg.problem)},
          {"labels", "(batch*K, 3): category, x, y; rows n*K .. n*K+K-1 belong to example n"},
          {"part_params", "(batch*K, 2): amplitude, phase (sine1d) or intensity, 0 (gradient2d)"}}},
        {"tensors", tensors}};
    plot::write_text(out / "data.manifest.json", manifest.dump(2) + "\n");
    log << "wrote " << a.batches << " batch(es) to " << (out / "data.cvae").string() << "\n";
    return 0;
}

// ------------------------------------------------------------ kl-debug

struct KlDebugArgs {
    int parts = 3;
    int dim = 4;
    std::size_t mc_samples = 100000;
};

inline int cmd_kl_debug(const GlobalOptions& g, const KlDebugArgs& a, std::ostream& os) {
    if (a.parts < 1 || a.dim < 1) throw UsageError("kl-debug: --parts and --dim must be >= 1");
    Rng rng(trainer::derive_seed(g.seed.value_or(0), 20));
    const auto q = evalkit::random_family(a.parts, a.dim, rng);
    const auto p = evalkit::random_prior(a.parts, a.dim, rng);
    const Matrix<double> rho = latentcorr::activate_rho(q.rho_pre);
    const Matrix<double> sigma = q.log_sigma.array().exp();
    os << std::setprecision(6);
    os << "family: K=" << a.parts << " d=" << a.dim << " seed=" << g.seed.value_or(0) << "\n";
    os << "column sums of rho:";
    for (Eigen::Index j = 0; j < a.dim; ++j) os << " " << rho.col(j).sum();
    os << "\n\n";
    const double closed = latentcorr::kl_corr_vs_diag(q, p);
    const auto mc = evalkit::mc_kl_oracle(q, p, a.mc_samples, rng);
    os << "KL(q || p) closed form   " << closed << " nats\n";
    os << "KL(q || p) Monte Carlo   " << mc.estimate << " +- " << mc.std_error << " (n=" << mc.samples << ")\n";
    os << "relative difference      " << std::abs(closed - mc.estimate) / std::abs(closed) << "\n\n";

    const RowVector<double> exact = latentcorr::variance_of_sum(q);
    Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(a.dim), m2 = Eigen::ArrayXd::Zero(a.dim);
    Matrix<double> eps(a.parts, a.dim);
    for (std::size_t s = 0; s < a.mc_samples; ++s) {
        for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
        const Eigen::ArrayXd x = latentcorr::sample_correlated(q, eps).colwise().sum().transpose();
        const Eigen::ArrayXd delta = x - mean;
        mean += delta / static_cast<double>(s + 1);
        m2 += delta * (x - mean);
    }
    os << "variance of sum_i w_ij per coordinate\n";
    os << std::left << std::setw(6) << "j" << std::setw(14) << "exact" << std::setw(14) << "monte carlo"
       << std::setw(22) << "(sum s^2)(1-sum r)" << "(sum s^2)(1-sum r)^2\n";
    for (Eigen::Index j = 0; j < a.dim; ++j) {
        const double s2 = sigma.col(j).squaredNorm(), r = rho.col(j).sum();
        os << std::setw(6) << j << std::setw(14) << exact(j) << std::setw(14) << m2(j) / static_cast<double>(a.mc_samples - 1)
           << std::setw(22) << s2 * (1 - r) << s2 * (1 - r) * (1 - r) << "\n";
    }
    return 0;
}

// ------------------------------------------------------------ wiring

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"CompVAE: compositional generation from multisets of part labels"};
    app.require_subcommand(1);
    app.fallthrough();
    GlobalOptions g;
    std::string config, output;
    std::uint64_t seed = 0;
    auto* config_opt = app.add_option("--config", config, "experiment config (JSON, comments allowed)");
    auto* seed_opt = app.add_option("--seed", seed, "random seed");
    auto* output_opt = app.add_option("--output", output, "output directory (default $COMPVAE_OUTPUT or ./compvae_output)");
    app.add_option("--device", g.device, "compute device")->check(CLI::IsMember({"cpu", "accelerator"}));

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "train a model from a config");
    train->add_option("--iterations", train_args.iterations, "stop after this many iterations (default max_iterations)");

    ResumeArgs resume_args;
    auto* resume = app.add_subcommand("resume", "continue training from a checkpoint");
    resume->add_option("--checkpoint", resume_args.checkpoint, "checkpoint (default <output>/checkpoints/latest.cvae)");
    resume->add_option("--iterations", resume_args.iterations, "total iterations to reach");

    ComposeRequest req;
    std::string labels_text, mode = "incremental";
    std::string ckpt;
    auto* compose_cmd = app.add_subcommand("compose", "generate wholes from a label multiset, part by part");
    compose_cmd->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
    compose_cmd->add_option("--labels", labels_text, "1D: 3,5,7   2D: red:-0.5:0.2,white:0.1:0.4")->required();
    compose_cmd->add_option("--mode", mode, "incremental (one step per added part) or single")
        ->check(CLI::IsMember({"incremental", "single"}));
    compose_cmd->add_option("--samples", req.samples_per_step, "realizations per step")->check(CLI::PositiveNumber);

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "run evaluation probes and write reports");
    eval->add_option("--checkpoint", eval_args.checkpoint, "trained checkpoint (omit to probe the ground-truth generator)");
    eval->add_option("--suite", eval_args.suite, "kl_oracle, freq, amplitude, color or all");
    eval->add_option("--generations", eval_args.generations, "conditioned generations per probe")->check(CLI::PositiveNumber);
    eval->add_option("--mc-samples", eval_args.mc_samples, "Monte Carlo samples per KL case")->check(CLI::Range(1000, 100000000));

    DumpArgs dump_args;
    auto* dump = app.add_subcommand("dump-data", "write generator batches and a manifest");
    dump->add_option("--batches", dump_args.batches, "number of batches")->check(CLI::PositiveNumber);

    KlDebugArgs kl_args;
    auto* kl = app.add_subcommand("kl-debug", "closed-form vs Monte Carlo KL and variance of the sum for a random family");
    kl->add_option("--parts", kl_args.parts, "K")->check(CLI::PositiveNumber);
    kl->add_option("--dim", kl_args.dim, "latent dimension")->check(CLI::PositiveNumber);
    kl->add_option("--mc-samples", kl_args.mc_samples, "Monte Carlo samples")->check(CLI::Range(1000, 100000000));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }
    if (*config_opt) g.config = config;
    if (*seed_opt) g.seed = seed;
    if (*output_opt) g.output = output;

    try {
        if (g.device == "accelerator")
            throw UsageError("this build has no accelerator backend; use --device cpu");
        if (*train) return cmd_train(g, train_args, err);
        if (*resume) return cmd_resume(g, resume_args, err);
        if (*compose_cmd) {
            req.checkpoint = ckpt;
            const io::Archive head = io::read_archive(req.checkpoint);
            req.labels = parse_labels(labels_text, trainer::config_from_archive(head).problem);
            req.mode = mode == "single" ? ComposeMode::single : ComposeMode::incremental;
            req.output_dir = output_dir(g);
            req.seed = g.seed.value_or(0);
            return cmd_compose(req, err);
        }
        if (*eval) return cmd_eval(g, eval_args, out);
        if (*dump) return cmd_dump_data(g, dump_args, err);
        if (*kl) return cmd_kl_debug(g, kl_args, out);
    } catch (const trainer::DivergenceError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace compvae::cli
