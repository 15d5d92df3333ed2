#pragma once

// Synthetic (whole, parts) generators.
//
// 1D: each part is a sine wave with an integer frequency label and a random
// amplitude and phase; the whole is K * tanh(C / K * sum of the waves).
// 2D: each part is a colored anchor site with a random intensity; every
// pixel blends the anchor colors with softmax weights on
// -intensity * squared distance, followed by gamma correction.

#include "compvae/autodiff.hpp"
#include "compvae/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace compvae::synthgen {

enum class Problem { sine1d, gradient2d };

inline std::string to_string(Problem p) { return p == Problem::sine1d ? "sine1d" : "gradient2d"; }

inline Problem problem_from_string(const std::string& s) {
    if (s == "sine1d") return Problem::sine1d;
    if (s == "gradient2d") return Problem::gradient2d;
    throw std::invalid_argument("unknown problem '" + s + "' (expected sine1d or gradient2d)");
}

/// A part's category. For sine1d `category` is the frequency; for gradient2d
/// it is a palette color id and (x, y) is the anchor location in [-1, 1]^2.
struct PartLabel {
    int category = 0;
    double x = 0.0;
    double y = 0.0;

    bool operator==(const PartLabel&) const = default;
};

struct IntRange {
    int lo = 1;
    int hi = 1;

    bool contains(int v) const { return v >= lo && v <= hi; }
    bool operator==(const IntRange&) const = default;
};

struct SineBatchSpec {
    int batch_size = 256;
    IntRange freq_range{1, 10};
    IntRange parts_range{1, 16};
    int timesteps = 200;
    double resolution = 100.0;  ///< samples per fundamental period
    double nonlinearity = 3.0;  ///< C
    double amplitude_mean = 1.0;
    double amplitude_std = 0.3;
    double phase_std = 0.8;  ///< the text variant uses pi / 2
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("sine spec: batch_size must be >= 1");
        if (freq_range.lo < 1 || freq_range.hi < freq_range.lo)
            throw std::invalid_argument("sine spec: freq_range must be a non-empty range of positive integers");
        if (parts_range.lo < 1 || parts_range.hi < parts_range.lo)
            throw std::invalid_argument("sine spec: parts_range must be non-empty with min >= 1");
        if (timesteps < 1) throw std::invalid_argument("sine spec: timesteps must be >= 1");
        if (!(resolution > 0)) throw std::invalid_argument("sine spec: resolution must be positive");
        if (!(nonlinearity > 0)) throw std::invalid_argument("sine spec: nonlinearity C must be positive");
        if (!(amplitude_std >= 0) || !(phase_std >= 0))
            throw std::invalid_argument("sine spec: standard deviations must be non-negative");
    }
};

struct Rgb {
    double r, g, b;
};

/// Palette order matches the reference generator: red, green, blue, black, white.
inline constexpr std::array<Rgb, 5> kPalette{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, 0}, {1, 1, 1}}};

enum Color : int { red = 0, green = 1, blue = 2, black = 3, white = 4 };

struct GradientBatchSpec {
    int batch_size = 256;
    IntRange anchor_count_range{1, 8};
    int image_size = 32;
    double intensity_lo = 5.0;
    double intensity_hi = 10.0;
    double location_lo = -0.9;
    double location_hi = 0.9;
    double gamma = 1.0 / 2.4;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("gradient spec: batch_size must be >= 1");
        if (anchor_count_range.lo < 1 || anchor_count_range.hi < anchor_count_range.lo)
            throw std::invalid_argument("gradient spec: anchor_count_range must be non-empty with min >= 1");
        if (image_size != 32) throw std::invalid_argument("gradient spec: image_size is fixed to 32");
        if (!(intensity_lo > 0) || intensity_hi < intensity_lo)
            throw std::invalid_argument("gradient spec: intensity range must be positive and non-empty");
        if (location_lo < -1 || location_hi > 1 || location_hi < location_lo)
            throw std::invalid_argument("gradient spec: location range must lie inside [-1, 1]");
        if (!(gamma > 0)) throw std::invalid_argument("gradient spec: gamma must be positive");
    }

    Eigen::Index pixels() const { return static_cast<Eigen::Index>(image_size) * image_size; }
};

using DataSpec = std::variant<SineBatchSpec, GradientBatchSpec>;

inline Problem problem_of(const DataSpec& spec) {
    return std::holds_alternative<SineBatchSpec>(spec) ? Problem::sine1d : Problem::gradient2d;
}

/// Output of a generator. Every example in a batch has the same part count K;
/// labels and part_params hold K consecutive entries per example.
struct LabeledBatch {
    Problem problem = Problem::sine1d;
    Eigen::Index parts = 0;
    Matrix<double> data;                 ///< (batch, T) or (batch, 3*32*32) channel-major
    std::vector<PartLabel> labels;       ///< batch * K
    Matrix<double> part_params;          ///< batch * K rows: (amplitude, phase) or (intensity, 0)

    Eigen::Index batch_size() const { return data.rows(); }
    std::span<const PartLabel> labels_of(Eigen::Index example) const {
        return std::span<const PartLabel>(labels).subspan(static_cast<std::size_t>(example * parts),
                                                          static_cast<std::size_t>(parts));
    }
};

// ---------------------------------------------------------------- 1D

/// Evaluates K * tanh(C / K * sum_i a_i cos(2 pi f_i t / resolution + phase_i)) on t = 0..T-1.
inline RowVector<double> sine_curve(std::span<const int> freqs, std::span<const double> amplitudes,
                                    std::span<const double> phases, int timesteps, double resolution, double c) {
    if (freqs.empty()) throw std::invalid_argument("sine_curve: need at least one part");
    if (amplitudes.size() != freqs.size() || phases.size() != freqs.size())
        throw std::invalid_argument("sine_curve: per-part arrays differ in length");
    const double k = static_cast<double>(freqs.size());
    RowVector<double> out(timesteps);
    for (int t = 0; t < timesteps; ++t) {
        const double time = static_cast<double>(t) / resolution;
        double acc = 0.0;
        for (std::size_t i = 0; i < freqs.size(); ++i)
            acc += amplitudes[i] * std::cos(2.0 * std::numbers::pi * freqs[i] * time + phases[i]);
        out(t) = k * std::tanh(c / k * acc);
    }
    return out;
}

inline LabeledBatch generate_sine_batch(const SineBatchSpec& spec, int k, Rng& rng) {
    spec.validate();
    if (k <= 0) throw std::invalid_argument("generate_sine_batch: K must be >= 1");
    if (!spec.parts_range.contains(k)) throw std::invalid_argument("generate_sine_batch: K outside parts_range");
    LabeledBatch b;
    b.problem = Problem::sine1d;
    b.parts = k;
    b.data.resize(spec.batch_size, spec.timesteps);
    b.labels.resize(static_cast<std::size_t>(spec.batch_size) * k);
    b.part_params.resize(static_cast<Eigen::Index>(spec.batch_size) * k, 2);
    std::vector<int> freqs(k);
    std::vector<double> amps(k), phases(k);
    for (int n = 0; n < spec.batch_size; ++n) {
        for (int i = 0; i < k; ++i) freqs[i] = static_cast<int>(rng.uniform_int(spec.freq_range.lo, spec.freq_range.hi));
        for (int i = 0; i < k; ++i) {
            amps[i] = rng.normal(spec.amplitude_mean, spec.amplitude_std);
            phases[i] = rng.normal(0.0, spec.phase_std);
        }
        b.data.row(n) = sine_curve(freqs, amps, phases, spec.timesteps, spec.resolution, spec.nonlinearity);
        for (int i = 0; i < k; ++i) {
            const auto row = static_cast<Eigen::Index>(n) * k + i;
            b.labels[static_cast<std::size_t>(row)] = PartLabel{freqs[i], 0.0, 0.0};
            b.part_params(row, 0) = amps[i];
            b.part_params(row, 1) = phases[i];
        }
    }
    return b;
}

/// Pure function of (spec, spec.seed, K).
inline LabeledBatch generate_sine_batch(const SineBatchSpec& spec, int k) {
    Rng rng(spec.seed);
    return generate_sine_batch(spec, k, rng);
}

// ---------------------------------------------------------------- 2D

/// Pixel-center coordinate of index i on a side of n pixels, spanning [-1, 1].
inline double pixel_coord(int i, int n) { return static_cast<double>(i) * 2.0 / (n - 1) - 1.0; }

/// Softmax-blended colors before gamma correction, (3, n, n) channel-major.
inline RowVector<double> gradient_image_linear(std::span<const PartLabel> anchors, std::span<const double> intensities,
                                               int n = 32) {
    if (anchors.empty()) throw std::invalid_argument("gradient_image: need at least one anchor");
    if (intensities.size() != anchors.size()) throw std::invalid_argument("gradient_image: intensity count mismatch");
    for (const auto& a : anchors)
        if (a.category < 0 || a.category >= static_cast<int>(kPalette.size()))
            throw std::invalid_argument("gradient_image: unknown color id " + std::to_string(a.category));
    const auto k = anchors.size();
    const Eigen::Index plane = static_cast<Eigen::Index>(n) * n;
    RowVector<double> img = RowVector<double>::Zero(3 * plane);
    std::vector<double> logits(k);
    for (int py = 0; py < n; ++py) {
        const double yc = pixel_coord(py, n);
        for (int px = 0; px < n; ++px) {
            const double xc = pixel_coord(px, n);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < k; ++i) {
                const double dx = xc - anchors[i].x, dy = yc - anchors[i].y;
                logits[i] = -intensities[i] * (dx * dx + dy * dy);
                mx = std::max(mx, logits[i]);
            }
            double z = 0.0;
            for (auto& l : logits) z += (l = std::exp(l - mx));
            double r = 0, g = 0, bl = 0;
            for (std::size_t i = 0; i < k; ++i) {
                const Rgb& c = kPalette[static_cast<std::size_t>(anchors[i].category)];
                const double w = logits[i] / z;
                r += w * c.r;
                g += w * c.g;
                bl += w * c.b;
            }
            const Eigen::Index p = static_cast<Eigen::Index>(py) * n + px;
            img(p) = r;
            img(plane + p) = g;
            img(2 * plane + p) = bl;
        }
    }
    return img;
}

/// Gamma-corrected image clamped to [0, 1].
inline RowVector<double> gradient_image(std::span<const PartLabel> anchors, std::span<const double> intensities,
                                        double gamma = 1.0 / 2.4, int n = 32) {
    RowVector<double> img = gradient_image_linear(anchors, intensities, n);
    return img.unaryExpr([gamma](double v) { return std::clamp(std::pow(std::max(v, 0.0), gamma), 0.0, 1.0); });
}

inline LabeledBatch generate_gradient_batch(const GradientBatchSpec& spec, int k, Rng& rng) {
    spec.validate();
    if (k <= 0) throw std::invalid_argument("generate_gradient_batch: K must be >= 1");
    if (!spec.anchor_count_range.contains(k))
        throw std::invalid_argument("generate_gradient_batch: K outside anchor_count_range");
    LabeledBatch b;
    b.problem = Problem::gradient2d;
    b.parts = k;
    b.data.resize(spec.batch_size, 3 * spec.pixels());
    b.labels.resize(static_cast<std::size_t>(spec.batch_size) * k);
    b.part_params = Matrix<double>::Zero(static_cast<Eigen::Index>(spec.batch_size) * k, 2);
    std::vector<PartLabel> anchors(k);
    std::vector<double> intensity(k);
    for (int n = 0; n < spec.batch_size; ++n) {
        for (int i = 0; i < k; ++i) anchors[i].category = static_cast<int>(rng.uniform_int(0, kPalette.size() - 1));
        for (int i = 0; i < k; ++i) {
            anchors[i].x = rng.uniform(spec.location_lo, spec.location_hi);
            anchors[i].y = rng.uniform(spec.location_lo, spec.location_hi);
        }
        for (int i = 0; i < k; ++i) intensity[i] = rng.uniform(spec.intensity_lo, spec.intensity_hi);
        b.data.row(n) = gradient_image(anchors, intensity, spec.gamma, spec.image_size);
        for (int i = 0; i < k; ++i) {
            const auto row = static_cast<Eigen::Index>(n) * k + i;
            b.labels[static_cast<std::size_t>(row)] = anchors[i];
            b.part_params(row, 0) = intensity[i];
        }
    }
    return b;
}

inline LabeledBatch generate_gradient_batch(const GradientBatchSpec& spec, int k) {
    Rng rng(spec.seed);
    return generate_gradient_batch(spec, k, rng);
}

// ---------------------------------------------------------------- streams

inline IntRange parts_range(const DataSpec& spec) {
    return std::visit(
        [](const auto& s) {
            if constexpr (std::is_same_v<std::decay_t<decltype(s)>, SineBatchSpec>)
                return s.parts_range;
            else
                return s.anchor_count_range;
        },
        spec);
}

inline LabeledBatch generate_batch(const DataSpec& spec, int k, Rng& rng) {
    return std::visit(
        [&](const auto& s) {
            if constexpr (std::is_same_v<std::decay_t<decltype(s)>, SineBatchSpec>)
                return generate_sine_batch(s, k, rng);
            else
                return generate_gradient_batch(s, k, rng);
        },
        spec);
}

/// Infinite stream of freshly generated batches. The part count of every
/// batch is drawn uniformly between the spec's minimum and the current
/// curriculum maximum. Not safe for concurrent pulls.
class BatchStream {
public:
    BatchStream(DataSpec spec, int curriculum_k)
        : spec_(std::move(spec)), rng_(std::visit([](const auto& s) { return s.seed; }, spec_)) {
        std::visit([](const auto& s) { s.validate(); }, spec_);
        set_curriculum(curriculum_k);
    }

    void set_curriculum(int curriculum_k) {
        const IntRange r = parts_range(spec_);
        if (curriculum_k < 1 || curriculum_k < r.lo)
            throw std::invalid_argument("BatchStream: curriculum K must be >= 1 and >= the minimum part count");
        curriculum_k_ = std::min(curriculum_k, r.hi);
    }

    int curriculum() const { return curriculum_k_; }

    /// Draws the part count for the next batch; exposed for testing the K distribution.
    int draw_parts() { return static_cast<int>(rng_.uniform_int(parts_range(spec_).lo, curriculum_k_)); }

    LabeledBatch next() {
        const int k = draw_parts();
        return generate_batch(spec_, k, rng_);
    }

    const DataSpec& spec() const { return spec_; }
    Rng& rng() { return rng_; }
    const Rng& rng() const { return rng_; }

private:
    DataSpec spec_;
    Rng rng_;
    int curriculum_k_ = 1;
};

}  // namespace compvae::synthgen
