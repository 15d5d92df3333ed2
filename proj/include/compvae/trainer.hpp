#pragma once

// Training: the three ELBO terms, Adam, the learning-rate and part-count
// schedules, divergence recovery, metrics and checkpoints.

#include "compvae/autodiff.hpp"
#include "compvae/config.hpp"
#include "compvae/io.hpp"
#include "compvae/latentcorr.hpp"
#include "compvae/nets.hpp"
#include "compvae/rng.hpp"
#include "compvae/synthgen.hpp"

#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace compvae::trainer {

inline constexpr int kCheckpointSchema = 1;

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline double nats_to_bits(double nats) { return nats / std::numbers::ln2; }

/// Batch means, in bits.
struct ElboBreakdown {
    double L_w = 0.0, L_z = 0.0, L_x = 0.0, total = 0.0;
};

/// K(t) = min(start + floor(t / step_every), max).
inline int curriculum_k(const TrainConfig& c, long t) {
    const long k = c.curriculum_start_K + t / c.curriculum_step_every;
    return static_cast<int>(std::min<long>(k, c.curriculum_max_K));
}

/// alpha * factor^floor(t / anneal_every), scaled by the divergence-recovery factor, floored at alpha_min.
inline double learning_rate(const TrainConfig& c, long t, double recovery_scale = 1.0) {
    const double lr = c.adam_alpha * recovery_scale * std::pow(c.anneal_factor, static_cast<double>(t / c.anneal_every));
    return std::max(lr, c.alpha_min);
}

/// Independent sub-seeds for model init, data stream and sampling noise.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t { model_init = 0, data_stream = 1, sampling_noise = 2 };

/// Reparametrization noise of one step: z (N, dim_z), node noise (N*K, noise_dim), w (N*K, dim_w).
template <class S>
struct StepNoise {
    Matrix<S> z, node, w;
};

template <class S>
Matrix<S> standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    Matrix<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.normal());
    return m;
}

template <class S>
StepNoise<S> draw_noise(const nets::ModelConfig& c, Eigen::Index n, Eigen::Index k, Rng& rng) {
    StepNoise<S> s;
    s.z = standard_normal<S>(n, c.dim_z, rng);
    s.node = standard_normal<S>(n * k, c.noise_dim(), rng);
    s.w = standard_normal<S>(n * k, c.dim_w, rng);
    return s;
}

/// Per-example terms in nats (N x 1 each) and the scalar training loss (mean total, nats).
template <class S>
struct ElboTerms {
    ad::Var<S> L_w, L_z, L_x, loss;
};

/// Records one ELBO evaluation:
///   z ~ q(z|x), {w_i} ~ q({w_i}|x,z,{l_i}), w~ = sum w_i,
///   L_w = KL(q({w_i}) || prod p(w_i|l_i))       closed form
///   L_z = log q(z|x) - log p(z|w~)               single sample
///   L_x = -log p(x|z,w~)
template <class S>
ElboTerms<S> elbo_graph(nets::Binding<S>& p, const nets::Model<S>& m, const Matrix<S>& x,
                        std::span<const synthgen::PartLabel> labels, Eigen::Index parts, const StepNoise<S>& noise) {
    ad::Tape<S>& tape = p.tape();
    const ad::Var<S> xv = tape.constant(x);
    const ad::Var<S> feat = m.features(p, xv);
    const auto qz = m.encode_z(p, feat);
    const ad::Var<S> z = ad::gaussian_sample(qz.mu, qz.log_var, noise.z);
    const auto qw = m.encode_w(p, feat, z, labels, parts, noise.node);
    const ad::Var<S> rho = latentcorr::activate_rho(qw.rho_pre, parts);
    const ad::Var<S> w = latentcorr::sample_correlated(qw.mu, qw.log_sigma, rho, noise.w, parts);
    const ad::Var<S> w_tilde = nets::Model<S>::aggregate(w, parts);

    const auto pw = m.prior_w(p, labels);
    const auto pz = m.prior_z(p, w_tilde);
    const auto px = m.decode(p, z, w_tilde);

    ElboTerms<S> t;
    t.L_w = latentcorr::kl_corr_vs_diag(qw.mu, qw.log_sigma, rho, pw.mu, pw.log_var, parts);
    t.L_z = ad::sub(ad::gaussian_nll(z, pz.mu, pz.log_var), ad::gaussian_nll(z, qz.mu, qz.log_var));
    t.L_x = ad::gaussian_nll(xv, px.mu, nets::expand_x_log_var(m.config(), px.log_var));
    t.loss = ad::mean(ad::add(ad::add(t.L_w, t.L_z), t.L_x));
    return t;
}

template <class S>
double mean_of(const ad::Var<S>& v) {
    return v.value().template cast<double>().mean();
}

/// One ELBO evaluation; fills `grads` (one tensor per parameter) when given.
template <class S>
ElboBreakdown elbo_step(const nets::Model<S>& m, const Matrix<S>& x, std::span<const synthgen::PartLabel> labels,
                        Eigen::Index parts, const StepNoise<S>& noise, std::vector<Matrix<S>>* grads = nullptr) {
    ad::Tape<S> tape;
    nets::Binding<S> p(tape, m.params(), grads != nullptr);
    const auto t = elbo_graph(p, m, x, labels, parts, noise);
    ElboBreakdown b;
    b.L_w = nats_to_bits(mean_of(t.L_w));
    b.L_z = nats_to_bits(mean_of(t.L_z));
    b.L_x = nats_to_bits(mean_of(t.L_x));
    b.total = b.L_w + b.L_z + b.L_x;
    if (grads) {
        tape.backward(t.loss);
        *grads = p.gradients();
    }
    return b;
}

template <class S>
struct Adam {
    std::vector<Matrix<S>> m, v;
    long step = 0;

    void init(const nets::ParameterSet<S>& ps) {
        m.clear();
        v.clear();
        for (const auto& p : ps.values()) {
            m.push_back(Matrix<S>::Zero(p.rows(), p.cols()));
            v.push_back(Matrix<S>::Zero(p.rows(), p.cols()));
        }
        step = 0;
    }

    void update(nets::ParameterSet<S>& ps, const std::vector<Matrix<S>>& g, double lr, const TrainConfig& c) {
        ++step;
        const S b1 = static_cast<S>(c.adam_beta1), b2 = static_cast<S>(c.adam_beta2);
        const double c1 = 1.0 - std::pow(c.adam_beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(c.adam_beta2, static_cast<double>(step));
        const S step_size = static_cast<S>(lr / c1);
        const S v_scale = static_cast<S>(1.0 / c2);
        const S eps = static_cast<S>(c.adam_epsilon);
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = b1 * m[i] + (S(1) - b1) * g[i];
            v[i] = b2 * v[i] + (S(1) - b2) * g[i].cwiseAbs2();
            ps.value(i).array() -= step_size * m[i].array() / ((v[i].array() * v_scale).sqrt() + eps);
        }
    }
};

struct MetricsRow {
    long iteration = 0;
    int k_max = 0;
    double learning_rate = 0.0;
    double L_w = 0.0, L_z = 0.0, L_x = 0.0, elbo = 0.0;  // bits, averaged since the previous row
    double wall_time_s = 0.0;
};

inline const char* metrics_header() {
    return "iteration\tK_max\tlearning_rate\tL_w_bits\tL_z_bits\tL_x_bits\telbo_bits\twall_time_s";
}

inline std::string format_row(const MetricsRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%ld\t%d\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.3f", r.iteration, r.k_max,
                  r.learning_rate, r.L_w, r.L_z, r.L_x, r.elbo, r.wall_time_s);
    return buf;
}

enum class StopReason { max_iterations, converged, requested };

inline std::string to_string(StopReason r) {
    switch (r) {
        case StopReason::max_iterations: return "max_iterations";
        case StopReason::converged: return "converged";
        case StopReason::requested: return "requested";
    }
    return "?";
}

/// Called with every metrics row and every checkpoint as they are produced.
struct Hooks {
    std::function<void(const MetricsRow&)> on_metrics;
    std::function<void(long iteration, const io::Archive&)> on_checkpoint;
    std::function<void(long iteration, int restores)> on_restore;
};

template <class S>
nets::Model<S> model_from_archive(const io::Archive& a, std::optional<synthgen::Problem> expected = std::nullopt);

template <class S>
class Trainer {
public:
    explicit Trainer(ExperimentConfig cfg)
        : cfg_(std::move(cfg)),
          model_(cfg_.model, derive_seed(cfg_.train.seed, model_init)),
          stream_(cfg_.stream_spec(derive_seed(cfg_.train.seed, data_stream)), cfg_.train.curriculum_start_K),
          noise_rng_(derive_seed(cfg_.train.seed, sampling_noise)) {
        adam_.init(model_.params());
        last_good_ = snapshot();
    }

    /// Resumes bit-exactly from a checkpoint archive.
    explicit Trainer(const io::Archive& a, std::optional<synthgen::Problem> expected = std::nullopt)
        : Trainer(checked_config(a, expected)) {
        restore(a);
        last_good_ = a;
    }

    const ExperimentConfig& config() const { return cfg_; }
    const nets::Model<S>& model() const { return model_; }
    nets::Model<S>& model() { return model_; }
    long iteration() const { return iteration_; }
    double recovery_scale() const { return lr_scale_; }
    int total_restores() const { return total_restores_; }
    double current_learning_rate() const { return learning_rate(cfg_.train, iteration_, lr_scale_); }

    /// One optimization step. Returns the breakdown, or nullopt if the loss was
    /// not finite (parameters untouched in that case).
    std::optional<ElboBreakdown> step() {
        const int k_cap = curriculum_k(cfg_.train, iteration_);
        stream_.set_curriculum(std::max(k_cap, synthgen::parts_range(stream_.spec()).lo));
        const synthgen::LabeledBatch batch = stream_.next();
        const Eigen::Index parts = batch.parts;
        const StepNoise<S> noise = draw_noise<S>(cfg_.model, batch.batch_size(), parts, noise_rng_);
        const Matrix<S> x = batch.data.template cast<S>();

        std::vector<Matrix<S>> grads;
        ElboBreakdown b;
        try {
            b = elbo_step(model_, x, batch.labels, parts, noise, &grads);
        } catch (const std::domain_error&) {
            return std::nullopt;  // non-finite activations reached a guarded op
        }
        if (!std::isfinite(b.total)) return std::nullopt;
        for (const auto& g : grads)
            if (!g.allFinite()) return std::nullopt;

        adam_.update(model_.params(), grads, current_learning_rate(), cfg_.train);
        ++iteration_;
        last_k_ = k_cap;
        window_.L_w += b.L_w;
        window_.L_z += b.L_z;
        window_.L_x += b.L_x;
        ++window_count_;
        history_.push_back(b.total);
        while (static_cast<long>(history_.size()) > 2 * cfg_.train.convergence_window) history_.pop_front();
        return b;
    }

    /// Trains until `until` iterations (capped at max_iterations) or convergence.
    StopReason run(long until, const Hooks& hooks = {}) {
        const auto& tc = cfg_.train;
        until = std::min(until, tc.max_iterations);
        auto clock_start = std::chrono::steady_clock::now();
        double wall_base = wall_time_;
        while (iteration_ < until) {
            const auto result = step();
            wall_time_ = wall_base + seconds_since(clock_start);
            if (!result) {
                recover(hooks);
                clock_start = std::chrono::steady_clock::now();
                wall_base = wall_time_;
                continue;
            }
            if (iteration_ % tc.metrics_every == 0) {
                const MetricsRow row = take_row();
                if (hooks.on_metrics) hooks.on_metrics(row);
            }
            if (iteration_ % tc.checkpoint_every == 0) {
                last_good_ = snapshot();
                consecutive_restores_ = 0;
                if (hooks.on_checkpoint) hooks.on_checkpoint(iteration_, last_good_);
            }
            if (iteration_ % tc.metrics_every == 0 && converged()) return StopReason::converged;
        }
        return iteration_ >= tc.max_iterations ? StopReason::max_iterations : StopReason::requested;
    }

    /// True when the mean total ELBO of the last window improved on the window
    /// before it by less than the configured threshold.
    bool converged() const {
        const long w = cfg_.train.convergence_window;
        if (static_cast<long>(history_.size()) < 2 * w) return false;
        double older = 0.0, recent = 0.0;
        for (long i = 0; i < w; ++i) {
            older += history_[static_cast<std::size_t>(i)];
            recent += history_[static_cast<std::size_t>(i + w)];
        }
        return (older - recent) / static_cast<double>(w) < cfg_.train.convergence_min_improvement_bits;
    }

    io::Archive snapshot() const {
        io::Archive a;
        a.meta = {{"schema", kCheckpointSchema},
                  {"kind", "checkpoint"},
                  {"problem", synthgen::to_string(cfg_.problem)},
                  {"config", to_json(cfg_)},
                  {"counters",
                   {{"iteration", iteration_},
                    {"recovery_scale", lr_scale_},
                    {"consecutive_restores", consecutive_restores_},
                    {"total_restores", total_restores_},
                    {"wall_time_s", wall_time_},
                    {"adam_step", adam_.step},
                    {"last_k", last_k_},
                    {"window_count", window_count_},
                    {"window_L_w", window_.L_w},
                    {"window_L_z", window_.L_z},
                    {"window_L_x", window_.L_x}}},
                  {"rng", {{"data", stream_.rng().state()}, {"noise", noise_rng_.state()}}}};
        const auto& ps = model_.params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            a.put("param/" + ps.name(i), io::Tensor::from_matrix(ps.value(i)));
            a.put("adam_m/" + ps.name(i), io::Tensor::from_matrix(adam_.m[i]));
            a.put("adam_v/" + ps.name(i), io::Tensor::from_matrix(adam_.v[i]));
        }
        a.put("convergence_history", io::Tensor::from(std::vector<double>(history_.begin(), history_.end())));
        return a;
    }

    void restore(const io::Archive& a) {
        check_schema(a);
        if (a.meta.at("config") != to_json(cfg_))
            throw CheckpointError("checkpoint configuration differs from the trainer's configuration");
        load_parameters(a, model_.params(), "param/");
        adam_.init(model_.params());
        load_into(a, adam_.m, model_.params(), "adam_m/");
        load_into(a, adam_.v, model_.params(), "adam_v/");
        const auto& c = a.meta.at("counters");
        iteration_ = c.at("iteration").get<long>();
        lr_scale_ = c.at("recovery_scale").get<double>();
        consecutive_restores_ = c.at("consecutive_restores").get<int>();
        total_restores_ = c.at("total_restores").get<int>();
        wall_time_ = c.at("wall_time_s").get<double>();
        adam_.step = c.at("adam_step").get<long>();
        last_k_ = c.at("last_k").get<int>();
        window_count_ = c.at("window_count").get<long>();
        window_.L_w = c.at("window_L_w").get<double>();
        window_.L_z = c.at("window_L_z").get<double>();
        window_.L_x = c.at("window_L_x").get<double>();
        stream_.rng().restore(a.meta.at("rng").at("data").get<std::string>());
        noise_rng_.restore(a.meta.at("rng").at("noise").get<std::string>());
        const auto h = a.get("convergence_history").values<double>();
        history_.assign(h.begin(), h.end());
    }

private:
    ExperimentConfig cfg_;
    nets::Model<S> model_;
    synthgen::BatchStream stream_;
    Rng noise_rng_;
    Adam<S> adam_;

    long iteration_ = 0;
    double lr_scale_ = 1.0;
    int consecutive_restores_ = 0;
    int total_restores_ = 0;
    double wall_time_ = 0.0;
    int last_k_ = 0;
    ElboBreakdown window_;
    long window_count_ = 0;
    std::deque<double> history_;
    io::Archive last_good_;

    static double seconds_since(std::chrono::steady_clock::time_point t) {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
    }

    MetricsRow take_row() {
        MetricsRow r;
        const double n = static_cast<double>(std::max<long>(window_count_, 1));
        r.iteration = iteration_;
        r.k_max = last_k_;
        r.learning_rate = learning_rate(cfg_.train, iteration_ - 1, lr_scale_);
        r.L_w = window_.L_w / n;
        r.L_z = window_.L_z / n;
        r.L_x = window_.L_x / n;
        r.elbo = r.L_w + r.L_z + r.L_x;
        r.wall_time_s = wall_time_;
        window_ = {};
        window_count_ = 0;
        return r;
    }

    void recover(const Hooks& hooks) {
        if (consecutive_restores_ >= cfg_.train.max_consecutive_restores)
            throw DivergenceError("training diverged at iteration " + std::to_string(iteration_) + " after " +
                                  std::to_string(consecutive_restores_) + " consecutive restorations");
        const double scale = lr_scale_ * cfg_.train.anneal_factor;
        const int consecutive = consecutive_restores_ + 1, total = total_restores_ + 1;
        const double wall = wall_time_;
        restore(last_good_);
        lr_scale_ = scale;
        consecutive_restores_ = consecutive;
        total_restores_ = total;
        wall_time_ = wall;
        if (hooks.on_restore) hooks.on_restore(iteration_, total);
    }

    static ExperimentConfig checked_config(const io::Archive& a, std::optional<synthgen::Problem> expected) {
        check_schema(a);
        ExperimentConfig c = config_from_json(a.meta.at("config"));
        if (expected && *expected != c.problem)
            throw CheckpointError("checkpoint is for problem " + synthgen::to_string(c.problem) + ", expected " +
                                  synthgen::to_string(*expected));
        return c;
    }

public:
    static void check_schema(const io::Archive& a) {
        if (!a.meta.contains("schema") || !a.meta.contains("kind") || a.meta.at("kind") != "checkpoint")
            throw CheckpointError("archive is not a checkpoint");
        const int schema = a.meta.at("schema").get<int>();
        if (schema != kCheckpointSchema)
            throw CheckpointError("checkpoint schema " + std::to_string(schema) + " is not supported (expected " +
                                  std::to_string(kCheckpointSchema) + ")");
    }

    static void load_parameters(const io::Archive& a, nets::ParameterSet<S>& ps, const std::string& prefix) {
        load_into(a, ps.values(), ps, prefix);
    }

    static void load_into(const io::Archive& a, std::vector<Matrix<S>>& dst, const nets::ParameterSet<S>& ps,
                          const std::string& prefix) {
        for (std::size_t i = 0; i < ps.size(); ++i) {
            const auto& t = a.get(prefix + ps.name(i));
            if (t.dtype != io::dtype_of<S>())
                throw CheckpointError("tensor " + prefix + ps.name(i) + " has dtype " + io::to_string(t.dtype) +
                                      ", expected " + io::to_string(io::dtype_of<S>()));
            Matrix<S> m = t.template to_matrix<S>();
            if (m.rows() != ps.value(i).rows() || m.cols() != ps.value(i).cols())
                throw CheckpointError("tensor " + prefix + ps.name(i) + " has the wrong shape");
            dst[i] = std::move(m);
        }
    }
};

/// Parameters of a checkpoint, for evaluation and composition.
template <class S>
nets::Model<S> model_from_archive(const io::Archive& a, std::optional<synthgen::Problem> expected) {
    Trainer<S>::check_schema(a);
    const ExperimentConfig c = config_from_json(a.meta.at("config"));
    if (expected && *expected != c.problem)
        throw CheckpointError("checkpoint is for problem " + synthgen::to_string(c.problem) + ", expected " +
                              synthgen::to_string(*expected));
    nets::Model<S> m(c.model, 0);
    Trainer<S>::load_parameters(a, m.params(), "param/");
    return m;
}

inline ExperimentConfig config_from_archive(const io::Archive& a) {
    Trainer<double>::check_schema(a);
    return config_from_json(a.meta.at("config"));
}

}  // namespace compvae::trainer
