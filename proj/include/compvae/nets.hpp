#pragma once

// Learned distributions of the model.
//
// Generative side: p(w_i | l_i), p(z | w~), p(x | z, w~).
// Inference side:  q(z | x) and the graph network q({w_i} | x, z, {l_i}).
//
// Batched layout: x holds one example per row, 1D curves as (N, T) and images
// as (N, 3*32*32) channel-major. Part-level tensors hold K consecutive rows
// per example, so row n*K + i is part i of example n.

#include "compvae/autodiff.hpp"
#include "compvae/conv.hpp"
#include "compvae/latentcorr.hpp"
#include "compvae/layers.hpp"
#include "compvae/rng.hpp"
#include "compvae/synthgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace compvae::nets {

using synthgen::PartLabel;
using synthgen::Problem;

/// `dense`: fully connected pre-processing and decoder heads, cheap enough for desk-scale runs.
/// `reference`: the convolutional stacks of the published architecture.
enum class Arch { dense, reference };

inline std::string to_string(Arch a) { return a == Arch::dense ? "dense" : "reference"; }

inline Arch arch_from_string(const std::string& s) {
    if (s == "dense") return Arch::dense;
    if (s == "reference") return Arch::reference;
    throw std::invalid_argument("unknown architecture: " + s);
}

struct ModelConfig {
    Problem problem = Problem::sine1d;
    Arch arch = Arch::dense;
    int dim_w = 256;
    int dim_z = 128;
    int graph_layers = 3;
    double sigma_floor = 1e-2;
    double noise_scale = 0.1;

    int label_embed = 1024;      // 1D: label embedding in q; 2D: color embedding (both sides)
    int location_embed = 32;     // 2D only: Linear(2, location_embed) on anchor positions
    int prior_hidden = 1280;     // hidden width of p(z|w~), and of p(w|l) in 2D
    int decoder_hidden = 800;    // 1D decoder trunk; the 2D trunk is dim_w wide
    int feature = 800;           // width of the shared pre-processing block output
    int encoder_hidden = 512;    // 1D q(z|x) hidden width
    int graph_width = 2048;
    int conv_channels = 160;     // reference arch: widest channel count of the encoder

    // data geometry
    int timesteps = 200;
    int freq_lo = 1, freq_hi = 10;
    int image_size = 32;

    int x_dim() const { return problem == Problem::sine1d ? timesteps : 3 * image_size * image_size; }
    int x_var_dim() const { return problem == Problem::sine1d ? timesteps : image_size * image_size; }
    int frequency_count() const { return freq_hi - freq_lo + 1; }
    int noise_dim() const { return problem == Problem::sine1d ? label_embed : label_embed + location_embed; }
    int graph_input() const { return feature + dim_z + noise_dim(); }
    double log_var_floor() const { return 2.0 * std::log(sigma_floor); }

    void validate() const {
        auto need = [](bool ok, const std::string& what) {
            if (!ok) throw std::invalid_argument("model config: " + what);
        };
        need(dim_w >= 1 && dim_z >= 1, "latent sizes must be >= 1");
        need(graph_layers >= 1, "graph_layers must be >= 1");
        need(sigma_floor > 0.0, "sigma_floor must be > 0");
        need(noise_scale >= 0.0, "noise_scale must be >= 0");
        need(label_embed >= 1 && location_embed >= 1 && prior_hidden >= 1 && decoder_hidden >= 1 && feature >= 1 &&
                 encoder_hidden >= 1 && graph_width >= 1 && conv_channels >= 1,
             "layer widths must be >= 1");
        if (problem == Problem::sine1d) {
            need(timesteps >= 1, "timesteps must be >= 1");
            need(freq_lo >= 1 && freq_hi >= freq_lo, "frequency range must be non-empty and positive");
        } else {
            need(image_size == 32, "image_size is fixed at 32");
        }
        if (arch == Arch::reference) {
            if (problem == Problem::sine1d) {
                need(timesteps == 200, "reference 1D architecture requires timesteps = 200");
                need(conv_channels % 8 == 0, "reference 1D architecture requires conv_channels divisible by 8");
                need(decoder_hidden == 5 * conv_channels, "reference 1D architecture requires decoder_hidden = 5 * conv_channels");
                need(feature == 5 * conv_channels, "reference 1D architecture requires feature = 5 * conv_channels");
            } else {
                need(conv_channels % 4 == 0, "reference 2D architecture requires conv_channels divisible by 4");
                need(dim_w % 16 == 0 && dim_w >= 64, "reference 2D architecture requires dim_w divisible by 16 and >= 64");
                need(feature == 16 * conv_channels, "reference 2D architecture requires feature = 16 * conv_channels");
            }
        }
    }
};

/// Latent sizes from the paper text, layer widths from its architecture tables.
inline ModelConfig reference_config(Problem problem) {
    ModelConfig c;
    c.problem = problem;
    c.arch = Arch::reference;
    if (problem == Problem::gradient2d) {
        c.dim_w = 2048;
        c.dim_z = 1024;
        c.label_embed = 32;
        c.location_embed = 32;
        c.prior_hidden = 1024;
        c.feature = 1024;
        c.conv_channels = 64;
    }
    return c;
}

/// Test-sized model: every free width is at most 8.
inline ModelConfig tiny_config(Problem problem, Arch arch = Arch::dense) {
    ModelConfig c;
    c.problem = problem;
    c.arch = arch;
    c.dim_w = 4;
    c.dim_z = 3;
    c.label_embed = 4;
    c.location_embed = 4;
    c.prior_hidden = 8;
    c.decoder_hidden = 8;
    c.feature = 8;
    c.encoder_hidden = 8;
    c.graph_width = 8;
    c.conv_channels = 8;
    if (arch == Arch::reference) {
        if (problem == Problem::sine1d) {
            c.decoder_hidden = 40;
            c.feature = 40;
        } else {
            c.dim_w = 64;
            c.feature = 128;
        }
    }
    return c;
}

template <class S>
struct DiagVar {
    ad::Var<S> mu, log_var;
};

template <class S>
struct CorrVar {
    ad::Var<S> mu, log_sigma, rho_pre;
};

/// Latents of a composed sample: one row of w per part.
template <class S>
struct LatentState {
    Matrix<S> w, w_tilde, z;
};

template <class S>
class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed);
        build(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParameterSet<S>& params() { return params_; }
    const ParameterSet<S>& params() const { return params_; }

    void validate_labels(std::span<const PartLabel> labels) const {
        for (const auto& l : labels) {
            if (cfg_.problem == Problem::sine1d) {
                if (l.category < cfg_.freq_lo || l.category > cfg_.freq_hi)
                    throw std::invalid_argument("frequency label " + std::to_string(l.category) + " outside [" +
                                                std::to_string(cfg_.freq_lo) + ", " + std::to_string(cfg_.freq_hi) +
                                                "]");
            } else {
                if (l.category < 0 || l.category >= static_cast<int>(synthgen::kPalette.size()))
                    throw std::invalid_argument("unknown color id " + std::to_string(l.category));
                if (!std::isfinite(l.x) || !std::isfinite(l.y))
                    throw std::invalid_argument("non-finite anchor location");
            }
        }
    }

    // ---- generative side --------------------------------------------------

    DiagVar<S> prior_w(Binding<S>& p, std::span<const PartLabel> labels) const {
        validate_labels(labels);
        ad::Var<S> out;
        if (cfg_.problem == Problem::sine1d) {
            out = pw_embed_(p, frequency_index(labels));
        } else {
            const ad::Var<S> loc = ad::elu(pw_loc_(p, locations(p.tape(), labels)));
            const ad::Var<S> col = pw_color_(p, color_index(labels));
            out = pw_out_(p, ad::elu(pw_hidden_(p, ad::concat_cols<S>({loc, col}))));
        }
        return split_floored(out, cfg_.dim_w);
    }

    DiagVar<S> prior_z(Binding<S>& p, const ad::Var<S>& w_tilde) const {
        check_finite(w_tilde.value(), "prior_z: non-finite w_tilde");
        ad::Var<S> h = ad::elu(pz_in_(p, w_tilde));
        if (cfg_.problem == Problem::gradient2d) h = ad::elu(pz_res_(p, h));
        return split_floored(pz_out_(p, h), cfg_.dim_z);
    }

    /// Returns mu over the full x space; for images log_var is (N, 32*32), shared by the channels.
    DiagVar<S> decode(Binding<S>& p, const ad::Var<S>& z, const ad::Var<S>& w_tilde) const {
        const S floor = static_cast<S>(cfg_.log_var_floor());
        if (cfg_.problem == Problem::sine1d) {
            ad::Var<S> h = ad::elu(dec_in_(p, ad::concat_cols<S>({w_tilde, z})));
            for (const auto& r : dec_res_) h = ad::elu(r(p, h));
            ad::Var<S> out;
            if (cfg_.arch == Arch::dense) {
                out = dec_out_(p, h);
            } else {
                h = ad::elu(dec_t1_(p, h));
                h = ad::elu(dec_c1_(p, h));
                h = ad::elu(dec_t2_(p, h));
                h = ad::elu(dec_c2_(p, h));
                h = ad::elu(dec_t3_(p, h));
                h = dec_c3_(p, h);
                const Eigen::Index len = dec_t3_.out_length();
                const Eigen::Index start = (len - cfg_.timesteps) / 2;
                out = ad::crop1d(h, 2, len, start, cfg_.timesteps);
            }
            const Eigen::Index t = cfg_.timesteps;
            return {ad::slice_cols(out, 0, t), ad::clamp_min(ad::slice_cols(out, t, t), floor)};
        }
        ad::Var<S> h = ad::elu(ad::add(dec_w_res_(p, w_tilde), dec_z_(p, z)));
        h = ad::tanh(dec_res_[0](p, h));
        h = ad::elu(dec_res_[1](p, h));
        ad::Var<S> out;
        if (cfg_.arch == Arch::dense) {
            out = dec_out_(p, h);
        } else {
            const Eigen::Index c0 = cfg_.dim_w / 16;
            h = ad::upsample_bilinear2x(h, c0, 4, 4);
            h = ad::elu(dec_conv_[0](p, h));
            h = ad::upsample_bilinear2x(h, dec_conv_[0].out_channels, 8, 8);
            h = ad::elu(dec_conv_[1](p, h));
            h = ad::upsample_bilinear2x(h, dec_conv_[1].out_channels, 16, 16);
            h = ad::elu(dec_conv_[2](p, h));
            out = dec_conv_[3](p, h);
        }
        const Eigen::Index px = cfg_.image_size * cfg_.image_size;
        return {ad::slice_cols(out, 0, 3 * px), ad::clamp_min(ad::slice_cols(out, 3 * px, px), floor)};
    }

    // ---- inference side ---------------------------------------------------

    /// The pre-processing block shared by q(z|x) and q({w_i}|...).
    ad::Var<S> features(Binding<S>& p, const ad::Var<S>& x) const {
        if (x.cols() != cfg_.x_dim())
            throw std::invalid_argument("features: x has " + std::to_string(x.cols()) + " columns, expected " +
                                        std::to_string(cfg_.x_dim()));
        ad::Var<S> h = x;
        if (cfg_.arch == Arch::dense) {
            h = ad::elu(pre_in_(p, h));
        } else if (cfg_.problem == Problem::sine1d) {
            for (const auto& c : pre_conv1d_) h = ad::elu(c(p, h));
        } else {
            for (const auto& c : pre_conv2d_) h = ad::elu(c(p, h));
        }
        return ad::elu(pre_res_(p, h));
    }

    DiagVar<S> encode_z(Binding<S>& p, const ad::Var<S>& feat) const {
        ad::Var<S> h = feat;
        if (cfg_.problem == Problem::sine1d) {
            h = ad::elu(qz_in_(p, h));
            for (const auto& r : qz_res_) h = ad::elu(r(p, h));
        } else {
            h = ad::elu(qz_res_[0](p, h));
        }
        const ad::Var<S> out = qz_out_(p, h);
        return {ad::slice_cols(out, 0, cfg_.dim_z), ad::slice_cols(out, cfg_.dim_z, cfg_.dim_z)};
    }

    /// `feat` and `z` hold one row per example, `labels` and `node_noise` K rows per example.
    /// `node_noise` is standard normal; it is scaled by noise_scale here.
    CorrVar<S> encode_w(Binding<S>& p, const ad::Var<S>& feat, const ad::Var<S>& z,
                        std::span<const PartLabel> labels, Eigen::Index parts, const Matrix<S>& node_noise) const {
        if (parts < 1) throw std::invalid_argument("encode_w: K must be >= 1");
        const Eigen::Index n = feat.rows();
        if (static_cast<Eigen::Index>(labels.size()) != n * parts || z.rows() != n)
            throw std::invalid_argument("encode_w: labels / z rows do not match the batch");
        if (node_noise.rows() != n * parts || node_noise.cols() != cfg_.noise_dim())
            throw std::invalid_argument("encode_w: node_noise must be (N*K, " + std::to_string(cfg_.noise_dim()) + ")");
        validate_labels(labels);

        ad::Var<S> label_part;
        if (cfg_.problem == Problem::sine1d) {
            label_part = qw_embed_(p, frequency_index(labels));
        } else {
            const ad::Var<S> loc = ad::elu(qw_loc_(p, locations(p.tape(), labels)));
            label_part = ad::concat_cols<S>({loc, qw_color_(p, color_index(labels))});
        }
        const Matrix<S> eps = node_noise * static_cast<S>(cfg_.noise_scale);
        label_part = ad::add(label_part, p.tape().constant(eps));

        ad::Var<S> h = ad::concat_cols<S>({ad::repeat_rows(feat, parts), ad::repeat_rows(z, parts), label_part});
        for (const auto& b : graph_) h = ad::elu(b(p, h, parts));
        const ad::Var<S> out = qw_out_(p, h);
        const Eigen::Index d = cfg_.dim_w;
        return {ad::slice_cols(out, 0, d), ad::slice_cols(out, d, d), ad::slice_cols(out, 2 * d, d)};
    }

    static ad::Var<S> aggregate(const ad::Var<S>& w, Eigen::Index parts) { return ad::group_sum(w, parts); }

    // ---- plain-value conveniences (evaluation, no gradients) ---------------

    latentcorr::DiagGaussian<S> prior_w(std::span<const PartLabel> labels) const {
        ad::Tape<S> tape;
        Binding<S> p(tape, params_, false);
        return to_plain(prior_w(p, labels));
    }

    latentcorr::DiagGaussian<S> prior_z(const Matrix<S>& w_tilde) const {
        ad::Tape<S> tape;
        Binding<S> p(tape, params_, false);
        return to_plain(prior_z(p, tape.constant(w_tilde)));
    }

    latentcorr::DiagGaussian<S> decode(const Matrix<S>& z, const Matrix<S>& w_tilde) const {
        ad::Tape<S> tape;
        Binding<S> p(tape, params_, false);
        return to_plain(decode(p, tape.constant(z), tape.constant(w_tilde)));
    }

    latentcorr::DiagGaussian<S> encode_z(const Matrix<S>& x) const {
        ad::Tape<S> tape;
        Binding<S> p(tape, params_, false);
        return to_plain(encode_z(p, features(p, tape.constant(x))));
    }

    latentcorr::CorrGaussianFamily<S> encode_w(const Matrix<S>& x, const Matrix<S>& z,
                                               std::span<const PartLabel> labels, Eigen::Index parts,
                                               const Matrix<S>& node_noise) const {
        ad::Tape<S> tape;
        Binding<S> p(tape, params_, false);
        const CorrVar<S> q =
            encode_w(p, features(p, tape.constant(x)), tape.constant(z), labels, parts, node_noise);
        return {q.mu.value(), q.log_sigma.value(), q.rho_pre.value()};
    }

    static Matrix<S> aggregate(const Matrix<S>& w, Eigen::Index parts) {
        if (parts < 1 || w.rows() % parts != 0) throw std::invalid_argument("aggregate: rows not a multiple of K");
        Matrix<S> out = Matrix<S>::Zero(w.rows() / parts, w.cols());
        for (Eigen::Index r = 0; r < w.rows(); ++r) out.row(r / parts) += w.row(r);
        return out;
    }

private:
    ModelConfig cfg_;
    ParameterSet<S> params_;

    // generative
    Embedding pw_embed_, pw_color_;
    Linear pw_loc_, pw_hidden_, pw_out_;
    Linear pz_in_, pz_out_;
    Residual pz_res_;
    Linear dec_in_, dec_z_, dec_out_;
    Residual dec_w_res_;
    std::vector<Residual> dec_res_;
    ConvTranspose1d dec_t1_, dec_t2_, dec_t3_;
    Conv1d dec_c1_, dec_c2_, dec_c3_;
    std::vector<Conv2d> dec_conv_;
    // inference
    Linear pre_in_;
    std::vector<Conv1d> pre_conv1d_;
    std::vector<Conv2d> pre_conv2d_;
    Residual pre_res_;
    Linear qz_in_, qz_out_;
    std::vector<Residual> qz_res_;
    Embedding qw_embed_, qw_color_;
    Linear qw_loc_;
    std::vector<GraphBlock> graph_;
    Linear qw_out_;

    void build(Rng& rng) {
        const ModelConfig& c = cfg_;
        auto& ps = params_;
        const bool is1d = c.problem == Problem::sine1d;

        // p(w | l)
        if (is1d) {
            pw_embed_ = Embedding::make(ps, "prior_w.embed", c.frequency_count(), 2 * c.dim_w, rng);
        } else {
            pw_loc_ = Linear::make(ps, "prior_w.loc", 2, c.location_embed, rng);
            pw_color_ = Embedding::make(ps, "prior_w.color", synthgen::kPalette.size(), c.label_embed, rng);
            pw_hidden_ = Linear::make(ps, "prior_w.hidden", c.location_embed + c.label_embed, c.prior_hidden, rng);
            pw_out_ = Linear::make(ps, "prior_w.out", c.prior_hidden, 2 * c.dim_w, rng);
        }

        // p(z | w~)
        pz_in_ = Linear::make(ps, "prior_z.in", c.dim_w, c.prior_hidden, rng);
        if (!is1d) pz_res_ = Residual::make(ps, "prior_z.res", c.prior_hidden, rng);
        pz_out_ = Linear::make(ps, "prior_z.out", c.prior_hidden, 2 * c.dim_z, rng);

        // p(x | z, w~)
        if (is1d) {
            dec_in_ = Linear::make(ps, "decoder.in", c.dim_w + c.dim_z, c.decoder_hidden, rng);
            for (int i = 0; i < 3; ++i)
                dec_res_.push_back(Residual::make(ps, "decoder.res" + std::to_string(i), c.decoder_hidden, rng));
            if (c.arch == Arch::dense) {
                dec_out_ = Linear::make(ps, "decoder.out", c.decoder_hidden, 2 * c.timesteps, rng);
            } else {
                const Eigen::Index ch = c.conv_channels;
                dec_t1_ = ConvTranspose1d::make(ps, "decoder.tconv0", {ch, 5, 4, 2, 0}, ch / 2, rng);
                dec_c1_ = Conv1d::make(ps, "decoder.conv0", {ch / 2, dec_t1_.out_length(), 7, 1, 3}, ch / 2, rng);
                dec_t2_ = ConvTranspose1d::make(ps, "decoder.tconv1", {ch / 2, dec_t1_.out_length(), 8, 4, 0}, ch / 4, rng);
                dec_c2_ = Conv1d::make(ps, "decoder.conv1", {ch / 4, dec_t2_.out_length(), 7, 1, 3}, ch / 4, rng);
                dec_t3_ = ConvTranspose1d::make(ps, "decoder.tconv2", {ch / 4, dec_t2_.out_length(), 15, 5, 0}, ch / 8, rng);
                dec_c3_ = Conv1d::make(ps, "decoder.conv2", {ch / 8, dec_t3_.out_length(), 7, 1, 3}, 2, rng);
            }
        } else {
            dec_w_res_ = Residual::make(ps, "decoder.w_res", c.dim_w, rng);
            dec_z_ = Linear::make(ps, "decoder.z_in", c.dim_z, c.dim_w, rng);
            dec_res_.push_back(Residual::make(ps, "decoder.res0", c.dim_w, rng));
            dec_res_.push_back(Residual::make(ps, "decoder.res1", c.dim_w, rng));
            const Eigen::Index px = c.image_size * c.image_size;
            if (c.arch == Arch::dense) {
                dec_out_ = Linear::make(ps, "decoder.out", c.dim_w, 4 * px, rng);
            } else {
                const Eigen::Index c0 = c.dim_w / 16;
                const Eigen::Index c1 = c0 / 2, c2 = c0 / 4, c3 = std::max<Eigen::Index>(1, 3 * c0 / 16);
                dec_conv_.push_back(Conv2d::make(ps, "decoder.conv0", {c0, 8, 8, 5, 1, 2}, c1, rng));
                dec_conv_.push_back(Conv2d::make(ps, "decoder.conv1", {c1, 16, 16, 5, 1, 2}, c2, rng));
                dec_conv_.push_back(Conv2d::make(ps, "decoder.conv2", {c2, 32, 32, 5, 1, 2}, c3, rng));
                dec_conv_.push_back(Conv2d::make(ps, "decoder.conv3", {c3, 32, 32, 5, 1, 2}, 4, rng));
            }
        }

        // pre(x)
        if (c.arch == Arch::dense) {
            pre_in_ = Linear::make(ps, "pre.in", c.x_dim(), c.feature, rng);
        } else if (is1d) {
            const Eigen::Index ch = c.conv_channels;
            const std::vector<std::array<Eigen::Index, 5>> layers = {
                {1, ch / 4, 10, 5, 0}, {ch / 4, ch / 4, 7, 1, 3}, {ch / 4, ch / 2, 6, 3, 0},
                {ch / 2, ch / 2, 7, 1, 3}, {ch / 2, ch, 4, 2, 0}};
            Eigen::Index len = c.timesteps;
            for (std::size_t i = 0; i < layers.size(); ++i) {
                const auto& l = layers[i];
                pre_conv1d_.push_back(
                    Conv1d::make(ps, "pre.conv" + std::to_string(i), {l[0], len, l[2], l[3], l[4]}, l[1], rng));
                len = pre_conv1d_.back().out_length();
            }
            if (len * ch != c.feature) throw std::logic_error("reference 1D encoder geometry mismatch");
        } else {
            const Eigen::Index ch = c.conv_channels;
            const std::vector<std::array<Eigen::Index, 5>> layers = {
                {3, ch / 4, 5, 1, 2}, {ch / 4, ch / 2, 4, 2, 1}, {ch / 2, ch / 2, 5, 1, 2},
                {ch / 2, 3 * ch / 4, 4, 2, 1}, {3 * ch / 4, ch, 4, 2, 1}};
            Eigen::Index side = c.image_size;
            for (std::size_t i = 0; i < layers.size(); ++i) {
                const auto& l = layers[i];
                pre_conv2d_.push_back(
                    Conv2d::make(ps, "pre.conv" + std::to_string(i), {l[0], side, side, l[2], l[3], l[4]}, l[1], rng));
                side = pre_conv2d_.back().shape.out_height();
            }
            if (side * side * ch != c.feature) throw std::logic_error("reference 2D encoder geometry mismatch");
        }
        pre_res_ = Residual::make(ps, "pre.res", c.feature, rng);

        // q(z | x)
        if (is1d) {
            qz_in_ = Linear::make(ps, "encoder_z.in", c.feature, c.encoder_hidden, rng);
            qz_res_.push_back(Residual::make(ps, "encoder_z.res0", c.encoder_hidden, rng));
            qz_res_.push_back(Residual::make(ps, "encoder_z.res1", c.encoder_hidden, rng));
            qz_out_ = Linear::make(ps, "encoder_z.out", c.encoder_hidden, 2 * c.dim_z, rng);
        } else {
            qz_res_.push_back(Residual::make(ps, "encoder_z.res0", c.feature, rng));
            qz_out_ = Linear::make(ps, "encoder_z.out", c.feature, 2 * c.dim_z, rng);
        }

        // q({w_i} | x, z, {l_i})
        if (is1d) {
            qw_embed_ = Embedding::make(ps, "encoder_w.embed", c.frequency_count(), c.label_embed, rng);
        } else {
            qw_loc_ = Linear::make(ps, "encoder_w.loc", 2, c.location_embed, rng);
            qw_color_ = Embedding::make(ps, "encoder_w.color", synthgen::kPalette.size(), c.label_embed, rng);
        }
        Eigen::Index width = c.graph_input();
        for (int i = 0; i < c.graph_layers; ++i) {
            graph_.push_back(GraphBlock::make(ps, "encoder_w.graph" + std::to_string(i), width, c.graph_width, rng));
            width = c.graph_width;
        }
        qw_out_ = Linear::make(ps, "encoder_w.out", c.graph_width, 3 * c.dim_w, rng);
    }

    DiagVar<S> split_floored(const ad::Var<S>& out, Eigen::Index d) const {
        return {ad::slice_cols(out, 0, d),
                ad::clamp_min(ad::slice_cols(out, d, d), static_cast<S>(cfg_.log_var_floor()))};
    }

    std::vector<Eigen::Index> frequency_index(std::span<const PartLabel> labels) const {
        std::vector<Eigen::Index> idx;
        idx.reserve(labels.size());
        for (const auto& l : labels) idx.push_back(l.category - cfg_.freq_lo);
        return idx;
    }

    static std::vector<Eigen::Index> color_index(std::span<const PartLabel> labels) {
        std::vector<Eigen::Index> idx;
        idx.reserve(labels.size());
        for (const auto& l : labels) idx.push_back(l.category);
        return idx;
    }

    static ad::Var<S> locations(ad::Tape<S>& tape, std::span<const PartLabel> labels) {
        Matrix<S> m(static_cast<Eigen::Index>(labels.size()), 2);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            m(static_cast<Eigen::Index>(i), 0) = static_cast<S>(labels[i].x);
            m(static_cast<Eigen::Index>(i), 1) = static_cast<S>(labels[i].y);
        }
        return tape.constant(std::move(m));
    }

    static void check_finite(const Matrix<S>& m, const char* what) {
        if (!m.allFinite()) throw std::domain_error(what);
    }

    static latentcorr::DiagGaussian<S> to_plain(const DiagVar<S>& d) { return {d.mu.value(), d.log_var.value()}; }
};

/// Images: per-channel copy of the shared pixel log-variance, (N, 1024) -> (N, 3072).
template <class S>
ad::Var<S> expand_x_log_var(const ModelConfig& cfg, const ad::Var<S>& log_var) {
    return cfg.problem == Problem::gradient2d ? ad::tile_cols(log_var, 3) : log_var;
}

template <class S>
Matrix<S> expand_x_log_var(const ModelConfig& cfg, const Matrix<S>& log_var) {
    return cfg.problem == Problem::gradient2d ? Matrix<S>(log_var.replicate(1, 3)) : log_var;
}

template <class S>
struct Generation {
    LatentState<S> latent;
    latentcorr::DiagGaussian<S> parts_prior;  // p(w_i | l_i), K rows
    latentcorr::DiagGaussian<S> x;            // p(x | z, w~), log_var expanded to the x shape
};

/// Ancestral sampling from the generative side for one label multiset:
/// w_i ~ p(w_i|l_i), w~ = sum w_i, z ~ p(z|w~), then p(x|z,w~).
template <class S>
Generation<S> generate(const Model<S>& model, std::span<const PartLabel> labels, Rng& rng) {
    if (labels.empty()) throw std::invalid_argument("generate: need at least one label");
    auto normal = [&rng](Eigen::Index r, Eigen::Index c) {
        Matrix<S> m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.normal());
        return m;
    };
    Generation<S> g;
    g.parts_prior = model.prior_w(labels);
    const Matrix<S> eps_w = normal(g.parts_prior.mu.rows(), g.parts_prior.mu.cols());
    g.latent.w = g.parts_prior.mu.array() + (g.parts_prior.log_var.array() * S(0.5)).exp() * eps_w.array();
    g.latent.w_tilde = Model<S>::aggregate(g.latent.w, g.latent.w.rows());
    const auto pz = model.prior_z(g.latent.w_tilde);
    const Matrix<S> eps_z = normal(1, pz.mu.cols());
    g.latent.z = pz.mu.array() + (pz.log_var.array() * S(0.5)).exp() * eps_z.array();
    g.x = model.decode(g.latent.z, g.latent.w_tilde);
    g.x.log_var = expand_x_log_var(model.config(), g.x.log_var);
    return g;
}

}  // namespace compvae::nets
