#pragma once

// Correlated multivariate normal over the K part latents.
//
// For every latent coordinate j the K values (w_1j .. w_Kj) are drawn as
//
//     w_ij = mu_ij + sigma_ij * (eps_ij - rho_ij * sum_i' eps_i'j)
//
// i.e. from N(mu_j, D_j S_j S_j^T D_j) with D_j = diag(sigma_.j) and
// S_j = I - rho_j 1^T. Coordinates j != j' are independent. The rho are
// produced from unconstrained logits so that rho > 0 and sum_i rho_ij < 1,
// which keeps |S_j| = 1 - sum_i rho_ij strictly positive.
//
// Families are stored as matrices with K rows and d columns; batched
// families stack several groups of K consecutive rows.

#include "compvae/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace compvae::latentcorr {

/// Below this value 1 - sum(rho) is clamped before taking its log.
inline constexpr double kDetFloor = 1e-6;

/// Diagonal normal N(mu, exp(log_var)).
template <class S>
struct DiagGaussian {
    Matrix<S> mu;
    Matrix<S> log_var;

    void validate() const {
        if (mu.rows() != log_var.rows() || mu.cols() != log_var.cols())
            throw std::invalid_argument("DiagGaussian: mu and log_var shapes differ");
        if (!log_var.array().exp().allFinite() || !mu.allFinite())
            throw std::invalid_argument("DiagGaussian: non-finite parameters");
    }
    Matrix<S> variance() const { return log_var.array().exp(); }
    Matrix<S> stddev() const { return (log_var.array() * S(0.5)).exp(); }
};

/// Correlated family of K part latents of dimension d.
template <class S>
struct CorrGaussianFamily {
    Matrix<S> mu;         ///< (K, d)
    Matrix<S> log_sigma;  ///< (K, d), sigma = exp(log_sigma)
    Matrix<S> rho_pre;    ///< (K, d) logits of rho

    Eigen::Index parts() const { return mu.rows(); }
    Eigen::Index dim() const { return mu.cols(); }

    void validate() const {
        if (mu.rows() == 0 || mu.cols() == 0) throw std::invalid_argument("CorrGaussianFamily: empty");
        if (log_sigma.rows() != mu.rows() || log_sigma.cols() != mu.cols() || rho_pre.rows() != mu.rows() ||
            rho_pre.cols() != mu.cols())
            throw std::invalid_argument("CorrGaussianFamily: parameter shapes differ");
        if (!mu.allFinite() || !log_sigma.allFinite() || !rho_pre.allFinite())
            throw std::invalid_argument("CorrGaussianFamily: non-finite parameters");
    }
    Matrix<S> sigma() const { return log_sigma.array().exp(); }
};

namespace detail {

inline void check_group(Eigen::Index rows, Eigen::Index group, const char* op) {
    if (group < 1 || rows % group != 0)
        throw std::invalid_argument(std::string(op) + ": rows not a multiple of the part count");
}

template <class S>
void check_same(const Matrix<S>& a, const Matrix<S>& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

// sum over each group of `group` consecutive rows, broadcast back to every row
template <class S>
Matrix<S> group_total(const Matrix<S>& m, Eigen::Index group) {
    Matrix<S> out(m.rows(), m.cols());
    for (Eigen::Index r = 0; r < m.rows(); r += group)
        out.middleRows(r, group) = m.middleRows(r, group).colwise().sum().replicate(group, 1);
    return out;
}

template <class S>
Matrix<S> group_sums(const Matrix<S>& m, Eigen::Index group) {
    Matrix<S> out(m.rows() / group, m.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) = m.middleRows(r * group, group).colwise().sum();
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------- plain values

/// rho_ij = exp(r_ij) / (1 + sum_i' exp(r_i'j)) within each group of rows,
/// evaluated with max-subtraction over the logits and the implicit zero logit.
template <class S>
Matrix<S> activate_rho(const Matrix<S>& rho_pre, Eigen::Index group) {
    detail::check_group(rho_pre.rows(), group, "activate_rho");
    Matrix<S> out(rho_pre.rows(), rho_pre.cols());
    for (Eigen::Index r = 0; r < rho_pre.rows(); r += group) {
        const auto block = rho_pre.middleRows(r, group);
        const RowVector<S> m = block.colwise().maxCoeff().cwiseMax(S(0));
        Matrix<S> e = (block.rowwise() - m).array().exp();
        const RowVector<S> denom = (-m.array()).exp().matrix() + e.colwise().sum();
        out.middleRows(r, group) = e.array().rowwise() / denom.array();
    }
    return out;
}

template <class S>
Matrix<S> activate_rho(const Matrix<S>& rho_pre) {
    return activate_rho(rho_pre, rho_pre.rows());
}

/// Reparametrized draw from the family given standard-normal noise.
template <class S>
Matrix<S> sample_correlated(const CorrGaussianFamily<S>& family, const Matrix<S>& eps) {
    family.validate();
    detail::check_same(family.mu, eps, "sample_correlated");
    const Matrix<S> rho = activate_rho(family.rho_pre);
    const RowVector<S> total = eps.colwise().sum();
    Matrix<S> centered = eps - (rho.array().rowwise() * total.array()).matrix();
    return family.mu + family.sigma().cwiseProduct(centered);
}

/// Variance of sum_i w_ij for every coordinate j.
///
/// sum_i w_ij - sum_i mu_ij = sum_k eps_kj (sigma_kj - sum_i sigma_ij rho_ij), so the
/// variance is sum_k (sigma_kj - s_j)^2 with s_j = sum_i sigma_ij rho_ij. With equal
/// sigmas this reduces to (sum_i sigma_ij^2)(1 - sum_i rho_ij)^2.
template <class S>
RowVector<S> variance_of_sum(const Matrix<S>& sigma, const Matrix<S>& rho) {
    detail::check_same(sigma, rho, "variance_of_sum");
    const RowVector<S> s = sigma.cwiseProduct(rho).colwise().sum();
    return (sigma.rowwise() - s).array().square().colwise().sum();
}

template <class S>
RowVector<S> variance_of_sum(const CorrGaussianFamily<S>& family) {
    family.validate();
    return variance_of_sum<S>(family.sigma(), activate_rho(family.rho_pre));
}

/// log |S_j| = log(1 - sum_i rho_ij) per coordinate, via the matrix determinant lemma.
template <class S>
RowVector<S> log_det_S(const Matrix<S>& rho) {
    const RowVector<S> residual = RowVector<S>::Ones(rho.cols()) - rho.colwise().sum();
    if ((residual.array() <= S(0)).any())
        throw std::domain_error("log_det_S: sum of rho reaches 1, the covariance is singular");
    return residual.array().log();
}

/// Per-group KL( q || prod_i N(mu_p_i, exp(log_var_p_i)) ), one value per group
/// of `group` rows, summed over coordinates.
template <class S>
Matrix<S> kl_corr_vs_diag_groups(const Matrix<S>& mu_q, const Matrix<S>& log_sigma_q, const Matrix<S>& rho,
                                 const Matrix<S>& mu_p, const Matrix<S>& log_var_p, Eigen::Index group) {
    detail::check_same(mu_q, log_sigma_q, "kl_corr_vs_diag");
    detail::check_same(mu_q, rho, "kl_corr_vs_diag");
    detail::check_same(mu_q, mu_p, "kl_corr_vs_diag");
    detail::check_same(mu_q, log_var_p, "kl_corr_vs_diag");
    detail::check_group(mu_q.rows(), group, "kl_corr_vs_diag");
    const auto k = static_cast<S>(group);
    const auto inv_var_p = (-log_var_p.array()).exp();
    const auto ratio = (S(2) * log_sigma_q.array()).exp() * inv_var_p;  // sigma_q^2 / sigma_p^2
    const auto diag_sst = S(1) - S(2) * rho.array() + k * rho.array().square();
    const Matrix<S> per_entry =
        S(0.5) * (diag_sst * ratio + (mu_p - mu_q).array().square() * inv_var_p + log_var_p.array() -
                  S(2) * log_sigma_q.array() - S(1));
    const Matrix<S> residual = (S(1) - detail::group_sums<S>(rho, group).array()).cwiseMax(S(kDetFloor));
    Matrix<S> out = detail::group_sums<S>(per_entry, group).rowwise().sum();
    out.col(0) -= residual.array().log().matrix().rowwise().sum();
    return out;
}

/// Exact KL divergence between a correlated family and K independent diagonal priors.
template <class S>
S kl_corr_vs_diag(const CorrGaussianFamily<S>& q, const DiagGaussian<S>& p) {
    q.validate();
    p.validate();
    detail::check_same(q.mu, p.mu, "kl_corr_vs_diag");
    const Matrix<S> rho = activate_rho(q.rho_pre);
    const S kl = kl_corr_vs_diag_groups<S>(q.mu, q.log_sigma, rho, p.mu, p.log_var, q.parts())(0, 0);
    if (!std::isfinite(static_cast<double>(kl))) throw std::runtime_error("kl_corr_vs_diag: non-finite result");
    return kl;
}

/// KL between two diagonal normals, summed over all entries.
template <class S>
S kl_diag(const DiagGaussian<S>& q, const DiagGaussian<S>& p) {
    detail::check_same(q.mu, p.mu, "kl_diag");
    const auto inv_var_p = (-p.log_var.array()).exp();
    return S(0.5) * ((q.log_var.array().exp() * inv_var_p) + (p.mu - q.mu).array().square() * inv_var_p +
                     p.log_var.array() - q.log_var.array() - S(1))
                        .sum();
}

// ---------------------------------------------------------------- tape operations

/// Tape version of activate_rho; rows are grouped by `group` parts.
template <class S>
ad::Var<S> activate_rho(const ad::Var<S>& rho_pre, Eigen::Index group) {
    ad::Tape<S>* t = rho_pre.tape();
    Matrix<S> rho = activate_rho<S>(rho_pre.value(), group);
    const std::size_t out_id = t->size();
    return t->record(std::move(rho), {rho_pre}, [t, rho_pre, group, out_id](const Matrix<S>& g) {
        const Matrix<S>& r = t->value(out_id);
        // d rho_i / d pre_k = rho_i (delta_ik - rho_k)
        const Matrix<S> dot = detail::group_total<S>(g.cwiseProduct(r), group);
        t->accumulate(rho_pre, r.cwiseProduct(g - dot));
    });
}

/// Tape version of sample_correlated for grouped rows; `eps` is fixed noise.
template <class S>
ad::Var<S> sample_correlated(const ad::Var<S>& mu, const ad::Var<S>& log_sigma, const ad::Var<S>& rho,
                             const Matrix<S>& eps, Eigen::Index group) {
    detail::check_same(mu.value(), log_sigma.value(), "sample_correlated");
    detail::check_same(mu.value(), rho.value(), "sample_correlated");
    detail::check_same(mu.value(), eps, "sample_correlated");
    detail::check_group(mu.rows(), group, "sample_correlated");
    ad::Tape<S>* t = mu.tape();
    Matrix<S> total = detail::group_total<S>(eps, group);
    Matrix<S> sigma = log_sigma.value().array().exp();
    Matrix<S> centered = eps - rho.value().cwiseProduct(total);
    Matrix<S> w = mu.value() + sigma.cwiseProduct(centered);
    return t->record(std::move(w), {mu, log_sigma, rho},
                     [t, mu, log_sigma, rho, sigma = std::move(sigma), centered = std::move(centered),
                      total = std::move(total)](const Matrix<S>& g) {
                         t->accumulate(mu, g);
                         if (t->needs(log_sigma)) t->accumulate(log_sigma, g.cwiseProduct(sigma).cwiseProduct(centered));
                         if (t->needs(rho)) t->accumulate(rho, -(g.cwiseProduct(sigma).cwiseProduct(total)));
                     });
}

/// Tape version of the closed-form KL; returns one value per group (rows/group x 1).
template <class S>
ad::Var<S> kl_corr_vs_diag(const ad::Var<S>& mu_q, const ad::Var<S>& log_sigma_q, const ad::Var<S>& rho,
                           const ad::Var<S>& mu_p, const ad::Var<S>& log_var_p, Eigen::Index group) {
    ad::Tape<S>* t = mu_q.tape();
    Matrix<S> out = kl_corr_vs_diag_groups<S>(mu_q.value(), log_sigma_q.value(), rho.value(), mu_p.value(),
                                              log_var_p.value(), group);
    return t->record(std::move(out), {mu_q, log_sigma_q, rho, mu_p, log_var_p},
                     [t, mu_q, log_sigma_q, rho, mu_p, log_var_p, group](const Matrix<S>& g) {
                         const auto k = static_cast<S>(group);
                         const Eigen::Index n = g.rows();
                         // broadcast each group's upstream gradient to its rows
                         Matrix<S> gr(mu_q.rows(), mu_q.cols());
                         for (Eigen::Index b = 0; b < n; ++b)
                             gr.middleRows(b * group, group).setConstant(g(b, 0));
                         const Matrix<S>& r = rho.value();
                         const Matrix<S> inv_var_p = (-log_var_p.value().array()).exp();
                         const Matrix<S> ratio = (S(2) * log_sigma_q.value().array()).exp() * inv_var_p.array();
                         const Matrix<S> diag_sst = (S(1) - S(2) * r.array() + k * r.array().square()).matrix();
                         const Matrix<S> diff = mu_p.value() - mu_q.value();
                         const Matrix<S> dmu = diff.cwiseProduct(inv_var_p);
                         if (t->needs(mu_q)) t->accumulate(mu_q, -(gr.cwiseProduct(dmu)));
                         if (t->needs(mu_p)) t->accumulate(mu_p, gr.cwiseProduct(dmu));
                         if (t->needs(log_sigma_q))
                             t->accumulate(log_sigma_q, gr.cwiseProduct((diag_sst.cwiseProduct(ratio).array() - S(1)).matrix()));
                         if (t->needs(log_var_p)) {
                             Matrix<S> d = S(0.5) * (S(1) - diag_sst.cwiseProduct(ratio).array() -
                                                     diff.array().square() * inv_var_p.array());
                             t->accumulate(log_var_p, gr.cwiseProduct(d));
                         }
                         if (t->needs(rho)) {
                             const Matrix<S> residual = S(1) - detail::group_sums<S>(r, group).array();
                             Matrix<S> dres(mu_q.rows(), mu_q.cols());
                             for (Eigen::Index b = 0; b < n; ++b)
                                 for (Eigen::Index j = 0; j < residual.cols(); ++j) {
                                     const S v = residual(b, j);
                                     // -log(max(v, floor)) has slope 1/v above the floor
                                     const S d = v >= S(kDetFloor) ? S(1) / v : S(0);
                                     dres.col(j).segment(b * group, group).setConstant(d);
                                 }
                             Matrix<S> d = ratio.cwiseProduct((k * r.array() - S(1)).matrix()) + dres;
                             t->accumulate(rho, gr.cwiseProduct(d));
                         }
                     });
}

}  // namespace compvae::latentcorr
