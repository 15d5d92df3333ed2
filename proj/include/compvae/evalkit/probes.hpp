#pragma once

// Quantitative probes for trained models and for the ground-truth generators:
// spectral frequency recovery (1D), part-count amplitude trend (1D) and
// color-field error (2D). These are surrogates for visual inspection of
// composed samples, not quantities the model optimizes.

#include "compvae/nets.hpp"
#include "compvae/rng.hpp"
#include "compvae/synthgen.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace compvae::evalkit {

struct FreqRecoveryReport {
    std::vector<int> target_freqs;
    std::vector<int> detected_freqs;
    double matched_fraction = 0.0;
};

/// Magnitude spectrum |X_b| for b = 0 .. T/2.
inline std::vector<double> magnitude_spectrum(std::span<const double> curve) {
    if (curve.empty()) return {};
    std::vector<double> in(curve.begin(), curve.end());
    std::vector<std::complex<double>> out;
    Eigen::FFT<double> fft;
    fft.fwd(out, in);
    std::vector<double> mag(curve.size() / 2 + 1);
    for (std::size_t b = 0; b < mag.size(); ++b) mag[b] = std::abs(out[b]);
    return mag;
}

namespace detail {

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const auto mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double hi = v[mid];
    if (v.size() % 2) return hi;
    return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
}

}  // namespace detail

/// Spectral peaks (bin indices, DC excluded): local maxima above
/// median + mad_factor * MAD of the non-DC magnitudes. A relative floor of
/// 1e-9 of the largest magnitude keeps roundoff out of exactly periodic curves.
inline std::vector<int> spectral_peaks(std::span<const double> curve, double mad_factor = 3.0) {
    const auto mag = magnitude_spectrum(curve);
    if (mag.size() < 2) return {};
    const std::vector<double> body(mag.begin() + 1, mag.end());
    const double med = detail::median(body);
    std::vector<double> dev(body.size());
    for (std::size_t i = 0; i < body.size(); ++i) dev[i] = std::abs(body[i] - med);
    const double mad = detail::median(dev);
    const double top = *std::max_element(body.begin(), body.end());
    const double floor = std::max(med + mad_factor * mad, 1e-9 * top);
    std::vector<int> peaks;
    if (!(top > 0.0)) return peaks;
    const std::size_t last = mag.size() - 1;
    for (std::size_t b = 1; b <= last; ++b) {
        const double m = mag[b];
        if (!(m > floor)) continue;
        const bool left = b == 1 || m > mag[b - 1];
        const bool right = b == last || m >= mag[b + 1];
        if (left && right) peaks.push_back(static_cast<int>(b));
    }
    return peaks;
}

/// Matches conditioned frequencies to spectral peaks of a curve. Frequency f
/// sits at bin f * T / resolution; each peak serves at most one target and
/// must lie within half a bin of it.
inline FreqRecoveryReport freq_recovery(std::span<const double> curve, std::span<const int> target_freqs,
                                        double resolution) {
    if (!(resolution > 0)) throw std::invalid_argument("freq_recovery: resolution must be positive");
    FreqRecoveryReport r;
    r.target_freqs.assign(target_freqs.begin(), target_freqs.end());
    std::sort(r.target_freqs.begin(), r.target_freqs.end());
    const double bins_per_freq = static_cast<double>(curve.size()) / resolution;
    if (!r.target_freqs.empty()) {
        const int fmax = r.target_freqs.back();
        if (static_cast<double>(curve.size()) < 2.0 * fmax * bins_per_freq)
            throw std::invalid_argument("freq_recovery: curve too short to resolve the target frequencies");
    }
    const auto peaks = spectral_peaks(curve);
    for (int b : peaks) r.detected_freqs.push_back(static_cast<int>(std::lround(b / bins_per_freq)));

    std::vector<bool> used(peaks.size(), false);
    int matched = 0;
    for (int f : r.target_freqs) {
        const double want = f * bins_per_freq;
        std::size_t best = peaks.size();
        double best_gap = 0.5 + 1e-9;
        for (std::size_t i = 0; i < peaks.size(); ++i) {
            const double gap = std::abs(peaks[i] - want);
            if (!used[i] && gap <= best_gap) {
                best = i;
                best_gap = gap;
            }
        }
        if (best < peaks.size()) {
            used[best] = true;
            ++matched;
        }
    }
    r.matched_fraction = r.target_freqs.empty() ? 0.0 : static_cast<double>(matched) / r.target_freqs.size();
    return r;
}

// ------------------------------------------------------------ amplitude vs K

struct AmplitudePoint {
    int parts = 0;
    double mean_abs = 0.0;  ///< mean |x(t)| over time steps and wholes
    bool finite = true;
};

/// Produces one whole (a curve) for a label multiset.
using WholeSampler = std::function<RowVector<double>(std::span<const synthgen::PartLabel>, Rng&)>;

/// For every K, draws `wholes` random frequency multisets of size K (uniform,
/// duplicates allowed), samples a whole for each and averages |x|.
inline std::vector<AmplitudePoint> amplitude_vs_k(const WholeSampler& sample, std::span<const int> ks,
                                                  synthgen::IntRange freq_range, int wholes, Rng& rng) {
    if (wholes < 1) throw std::invalid_argument("amplitude_vs_k: need at least one whole per K");
    std::vector<AmplitudePoint> out;
    for (int k : ks) {
        if (k < 1) throw std::invalid_argument("amplitude_vs_k: K must be >= 1");
        AmplitudePoint p{k, 0.0, true};
        std::vector<synthgen::PartLabel> labels(static_cast<std::size_t>(k));
        for (int n = 0; n < wholes; ++n) {
            for (auto& l : labels) l = {static_cast<int>(rng.uniform_int(freq_range.lo, freq_range.hi)), 0.0, 0.0};
            const RowVector<double> x = sample(labels, rng);
            if (!x.allFinite()) p.finite = false;
            p.mean_abs += x.cwiseAbs().mean();
        }
        p.mean_abs /= wholes;
        out.push_back(p);
    }
    return out;
}

/// Ground-truth sampler: amplitudes and phases from the spec's distributions.
inline WholeSampler ground_truth_sampler(const synthgen::SineBatchSpec& spec) {
    return [spec](std::span<const synthgen::PartLabel> labels, Rng& rng) {
        std::vector<int> f;
        std::vector<double> a, ph;
        for (const auto& l : labels) {
            f.push_back(l.category);
            a.push_back(rng.normal(spec.amplitude_mean, spec.amplitude_std));
            ph.push_back(rng.normal(0.0, spec.phase_std));
        }
        return synthgen::sine_curve(f, a, ph, spec.timesteps, spec.resolution, spec.nonlinearity);
    };
}

/// Model sampler: ancestral sample of the latents, decoder mean as the whole.
template <class S>
WholeSampler model_sampler(const nets::Model<S>& model) {
    return [&model](std::span<const synthgen::PartLabel> labels, Rng& rng) {
        const auto g = nets::generate(model, labels, rng);
        return RowVector<double>(g.x.mu.row(0).template cast<double>());
    };
}

/// K distinct frequencies drawn without replacement from the range.
inline std::vector<synthgen::PartLabel> distinct_frequencies(int k, synthgen::IntRange freq_range, Rng& rng) {
    std::vector<int> pool;
    for (int f = freq_range.lo; f <= freq_range.hi; ++f) pool.push_back(f);
    if (k < 1 || k > static_cast<int>(pool.size()))
        throw std::invalid_argument("distinct_frequencies: K must lie in [1, number of frequencies]");
    std::vector<synthgen::PartLabel> out;
    for (int i = 0; i < k; ++i) {
        const auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1));
        out.push_back({pool[idx], 0.0, 0.0});
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(idx));
    }
    return out;
}

/// Share of the detected frequencies inside the label range that were asked
/// for. matched_fraction ignores extra peaks; this catches a curve that simply
/// contains every frequency. 0 when nothing in range was detected.
inline double in_range_precision(const FreqRecoveryReport& r, synthgen::IntRange freq_range) {
    std::vector<int> remaining = r.target_freqs;
    int in_range = 0, hits = 0;
    for (int f : r.detected_freqs) {
        if (!freq_range.contains(f)) continue;
        ++in_range;
        const auto it = std::find(remaining.begin(), remaining.end(), f);
        if (it != remaining.end()) {
            ++hits;
            remaining.erase(it);
        }
    }
    return in_range ? static_cast<double>(hits) / in_range : 0.0;
}

struct FreqProbeResult {
    double mean_matched_fraction = 0.0;
    double mean_in_range_precision = 0.0;
    std::vector<FreqRecoveryReport> reports;
};

/// Conditioned generations on distinct-frequency label sets with K uniform in
/// [1, max_parts], scored by freq_recovery on each whole.
inline FreqProbeResult freq_recovery_probe(const WholeSampler& sample, synthgen::IntRange freq_range, int max_parts,
                                           double resolution, int generations, Rng& rng) {
    if (generations < 1) throw std::invalid_argument("freq_recovery_probe: need at least one generation");
    max_parts = std::min(max_parts, freq_range.hi - freq_range.lo + 1);
    FreqProbeResult r;
    for (int n = 0; n < generations; ++n) {
        const int k = static_cast<int>(rng.uniform_int(1, max_parts));
        const auto labels = distinct_frequencies(k, freq_range, rng);
        const RowVector<double> x = sample(labels, rng);
        std::vector<int> target;
        for (const auto& l : labels) target.push_back(l.category);
        r.reports.push_back(freq_recovery({x.data(), static_cast<std::size_t>(x.size())}, target, resolution));
        r.mean_matched_fraction += r.reports.back().matched_fraction;
        r.mean_in_range_precision += in_range_precision(r.reports.back(), freq_range);
    }
    r.mean_matched_fraction /= generations;
    r.mean_in_range_precision /= generations;
    return r;
}

/// True when mean amplitude grows strictly with K along the given points.
inline bool strictly_increasing(std::span<const AmplitudePoint> pts) {
    for (std::size_t i = 1; i < pts.size(); ++i)
        if (!(pts[i].mean_abs > pts[i - 1].mean_abs)) return false;
    return true;
}

// ------------------------------------------------------------ color field

/// Mean over pixels of the Euclidean RGB distance between two channel-major
/// (3 * n * n) images. Lies in [0, sqrt(3)] for images in [0, 1].
inline double color_distance(const RowVector<double>& a, const RowVector<double>& b) {
    if (a.size() != b.size() || a.size() % 3 != 0)
        throw std::invalid_argument("color_distance: images must share a (3, n, n) shape");
    const Eigen::Index plane = a.size() / 3;
    double acc = 0.0;
    for (Eigen::Index p = 0; p < plane; ++p) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double d = a(c * plane + p) - b(c * plane + p);
            s += d * d;
        }
        acc += std::sqrt(s);
    }
    return acc / static_cast<double>(plane);
}

/// Ground-truth expected image for the labels: average of `draws` images with
/// intensities redrawn from the spec's distribution.
inline RowVector<double> expected_color_field(std::span<const synthgen::PartLabel> labels,
                                              const synthgen::GradientBatchSpec& spec, Rng& rng, int draws = 64) {
    if (draws < 1) throw std::invalid_argument("expected_color_field: need at least one draw");
    RowVector<double> acc = RowVector<double>::Zero(3 * spec.pixels());
    std::vector<double> intensity(labels.size());
    for (int n = 0; n < draws; ++n) {
        for (auto& v : intensity) v = rng.uniform(spec.intensity_lo, spec.intensity_hi);
        acc += synthgen::gradient_image(labels, intensity, spec.gamma, spec.image_size);
    }
    return acc / static_cast<double>(draws);
}

/// Distance between a generated image and the ground-truth expected image for the same labels.
inline double color_field_error(const RowVector<double>& generated, std::span<const synthgen::PartLabel> labels,
                                const synthgen::GradientBatchSpec& spec, Rng& rng, int draws = 64) {
    return color_distance(generated, expected_color_field(labels, spec, rng, draws));
}

}  // namespace compvae::evalkit
