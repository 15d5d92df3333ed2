#pragma once

// Sampling oracles for the correlated part-latent family.
//
// These work from the dense per-coordinate covariance D S S^T D built
// directly from its definition, factor it with a Cholesky decomposition and
// evaluate exact log-densities. They share no code path with the closed-form
// KL, the variance-of-sum identity or the sampler they are used to check.

#include "compvae/latentcorr.hpp"
#include "compvae/rng.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace compvae::evalkit {

struct McEstimate {
    double estimate = 0.0;
    double std_error = 0.0;
    std::size_t samples = 0;
};

/// Activated rho computed straight from exp(r) / (1 + sum exp(r)), no stabilization.
inline Eigen::MatrixXd naive_rho(const Eigen::MatrixXd& rho_pre) {
    Eigen::MatrixXd e = rho_pre.array().exp();
    Eigen::RowVectorXd denom = e.colwise().sum().array() + 1.0;
    return e.array().rowwise() / denom.array();
}

/// Covariance of (w_1j .. w_Kj): D_j (I - rho_j 1^T)(I - rho_j 1^T)^T D_j.
inline Eigen::MatrixXd covariance_matrix(const Eigen::VectorXd& sigma, const Eigen::VectorXd& rho) {
    const Eigen::Index k = sigma.size();
    Eigen::MatrixXd s = Eigen::MatrixXd::Identity(k, k) - rho * Eigen::RowVectorXd::Ones(k);
    Eigen::MatrixXd d = sigma.asDiagonal();
    return d * s * s.transpose() * d;
}

/// Per-coordinate lower Cholesky factors of the family's covariance.
inline std::vector<Eigen::MatrixXd> cholesky_factors(const latentcorr::CorrGaussianFamily<double>& q) {
    const Eigen::MatrixXd rho = naive_rho(q.rho_pre);
    const Eigen::MatrixXd sigma = q.log_sigma.array().exp();
    std::vector<Eigen::MatrixXd> out;
    for (Eigen::Index j = 0; j < q.dim(); ++j) {
        Eigen::LLT<Eigen::MatrixXd> llt(covariance_matrix(sigma.col(j), rho.col(j)));
        if (llt.info() != Eigen::Success)
            throw std::domain_error("mc oracle: covariance is not positive definite (invalid rho)");
        out.push_back(llt.matrixL());
    }
    return out;
}

/// Draws n samples, each a (K, d) matrix, through the Cholesky route.
inline std::vector<Eigen::MatrixXd> sample_cholesky(const latentcorr::CorrGaussianFamily<double>& q, std::size_t n,
                                                    Rng& rng) {
    const auto factors = cholesky_factors(q);
    std::vector<Eigen::MatrixXd> out;
    out.reserve(n);
    const Eigen::Index k = q.parts();
    Eigen::VectorXd eps(k);
    for (std::size_t s = 0; s < n; ++s) {
        Eigen::MatrixXd w(k, q.dim());
        for (Eigen::Index j = 0; j < q.dim(); ++j) {
            for (Eigen::Index i = 0; i < k; ++i) eps(i) = rng.normal();
            w.col(j) = q.mu.col(j) + factors[static_cast<std::size_t>(j)] * eps;
        }
        out.push_back(std::move(w));
    }
    return out;
}

/// Monte Carlo estimate of KL(q || p) = E_q[log q(w) - log p(w)] with exact log-densities.
inline McEstimate mc_kl_oracle(const latentcorr::CorrGaussianFamily<double>& q,
                               const latentcorr::DiagGaussian<double>& p, std::size_t n_samples, Rng& rng) {
    if (n_samples < 1000) throw std::invalid_argument("mc_kl_oracle: need at least 1000 samples");
    q.validate();
    p.validate();
    if (p.mu.rows() != q.parts() || p.mu.cols() != q.dim())
        throw std::invalid_argument("mc_kl_oracle: prior shape mismatch");
    const auto factors = cholesky_factors(q);
    const Eigen::Index k = q.parts(), d = q.dim();
    const double log2pi = std::log(2.0 * std::numbers::pi);

    double log_det_q = 0.0;
    for (const auto& l : factors) log_det_q += 2.0 * l.diagonal().array().log().sum();
    const Eigen::MatrixXd inv_var_p = (-p.log_var.array()).exp();
    const double log_det_p = p.log_var.sum();
    const double n_dims = static_cast<double>(k * d);

    double mean = 0.0, m2 = 0.0;
    Eigen::VectorXd eps(k);
    for (std::size_t s = 0; s < n_samples; ++s) {
        double quad_q = 0.0, quad_p = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) {
            for (Eigen::Index i = 0; i < k; ++i) eps(i) = rng.normal();
            quad_q += eps.squaredNorm();  // (w - mu)^T Sigma^-1 (w - mu) with w = mu + L eps
            const Eigen::VectorXd w = q.mu.col(j) + factors[static_cast<std::size_t>(j)] * eps;
            quad_p += ((w - p.mu.col(j)).array().square() * inv_var_p.col(j).array()).sum();
        }
        const double log_q = -0.5 * (n_dims * log2pi + log_det_q + quad_q);
        const double log_p = -0.5 * (n_dims * log2pi + log_det_p + quad_p);
        const double x = log_q - log_p;
        const double delta = x - mean;
        mean += delta / static_cast<double>(s + 1);
        m2 += delta * (x - mean);
    }
    const double var = m2 / static_cast<double>(n_samples - 1);
    return {mean, std::sqrt(var / static_cast<double>(n_samples)), n_samples};
}

/// Random family with mu ~ N(0, 1), log sigma ~ U(-0.7, 0.5), rho logits ~ U(-2, 1).
inline latentcorr::CorrGaussianFamily<double> random_family(Eigen::Index k, Eigen::Index d, Rng& rng) {
    latentcorr::CorrGaussianFamily<double> f{Eigen::MatrixXd(k, d), Eigen::MatrixXd(k, d), Eigen::MatrixXd(k, d)};
    for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = 0; j < d; ++j) {
            f.mu(i, j) = rng.normal();
            f.log_sigma(i, j) = rng.uniform(-0.7, 0.5);
            f.rho_pre(i, j) = rng.uniform(-2.0, 1.0);
        }
    return f;
}

/// Random diagonal prior with mu ~ N(0, 1), log variance ~ U(-0.5, 0.8).
inline latentcorr::DiagGaussian<double> random_prior(Eigen::Index k, Eigen::Index d, Rng& rng) {
    latentcorr::DiagGaussian<double> p{Eigen::MatrixXd(k, d), Eigen::MatrixXd(k, d)};
    for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = 0; j < d; ++j) {
            p.mu(i, j) = rng.normal();
            p.log_var(i, j) = rng.uniform(-0.5, 0.8);
        }
    return p;
}

struct KlOracleCase {
    Eigen::Index parts = 0, dim = 0;
    double closed_form = 0.0;
    McEstimate mc;
    bool agrees = false;  ///< within 1% relative or 3 standard errors, whichever is looser
};

/// Draws a random (q, p) pair and compares the closed-form KL with the Monte Carlo estimate.
inline KlOracleCase kl_oracle_case(Eigen::Index k, Eigen::Index d, std::size_t n_samples, Rng& rng) {
    const auto q = random_family(k, d, rng);
    const auto p = random_prior(k, d, rng);
    KlOracleCase c{k, d, latentcorr::kl_corr_vs_diag(q, p), mc_kl_oracle(q, p, n_samples, rng), false};
    const double tol = std::max(0.01 * std::abs(c.closed_form), 3.0 * c.mc.std_error);
    c.agrees = std::abs(c.closed_form - c.mc.estimate) <= tol;
    return c;
}

/// Empirical per-coordinate covariance of Cholesky-route samples, (K x K) per coordinate.
inline std::vector<Eigen::MatrixXd> empirical_covariance(const std::vector<Eigen::MatrixXd>& samples) {
    if (samples.size() < 2) throw std::invalid_argument("empirical_covariance: need at least 2 samples");
    const Eigen::Index k = samples.front().rows(), d = samples.front().cols();
    const double n = static_cast<double>(samples.size());
    std::vector<Eigen::MatrixXd> out;
    for (Eigen::Index j = 0; j < d; ++j) {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(k);
        for (const auto& s : samples) mean += s.col(j);
        mean /= n;
        Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(k, k);
        for (const auto& s : samples) {
            const Eigen::VectorXd c = s.col(j) - mean;
            cov.noalias() += c * c.transpose();
        }
        out.push_back(cov / (n - 1.0));
    }
    return out;
}

}  // namespace compvae::evalkit
