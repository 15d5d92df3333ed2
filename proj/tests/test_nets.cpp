#include "compvae/nets.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace compvae;
using nets::Arch;
using nets::Binding;
using nets::Model;
using nets::ModelConfig;
using synthgen::PartLabel;
using synthgen::Problem;

namespace {

ModelConfig tiny1d(Arch arch = Arch::dense) {
    ModelConfig c = nets::tiny_config(Problem::sine1d, arch);
    if (arch == Arch::dense) c.timesteps = 24;
    c.freq_hi = 5;
    return c;
}

ModelConfig tiny2d(Arch arch = Arch::dense) { return nets::tiny_config(Problem::gradient2d, arch); }

synthgen::LabeledBatch batch_for(const ModelConfig& c, int n, int k, std::uint64_t seed) {
    Rng rng(seed);
    if (c.problem == Problem::sine1d) {
        synthgen::SineBatchSpec spec;
        spec.batch_size = n;
        spec.timesteps = c.timesteps;
        spec.freq_range = {c.freq_lo, c.freq_hi};
        return synthgen::generate_sine_batch(spec, k, rng);
    }
    synthgen::GradientBatchSpec spec;
    spec.batch_size = n;
    return synthgen::generate_gradient_batch(spec, k, rng);
}

Matrix<double> normals(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix<double> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

// Random linear functional of a tensor, so no gradient entry cancels by symmetry.
ad::Var<double> project(const ad::Var<double>& v, std::uint64_t seed) {
    return ad::sum(ad::mul(v, v.tape()->constant(normals(v.rows(), v.cols(), seed))));
}

std::vector<Eigen::Index> permutation_within_groups(Eigen::Index n, Eigen::Index k, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(n * k));
    for (Eigen::Index b = 0; b < n; ++b) {
        std::vector<Eigen::Index> local(static_cast<std::size_t>(k));
        std::iota(local.begin(), local.end(), 0);
        std::shuffle(local.begin(), local.end(), rng);
        for (Eigen::Index i = 0; i < k; ++i) perm[static_cast<std::size_t>(b * k + i)] = b * k + local[static_cast<std::size_t>(i)];
    }
    return perm;
}

Matrix<double> permute_rows(const Matrix<double>& m, const std::vector<Eigen::Index>& perm) {
    Matrix<double> out(m.rows(), m.cols());
    for (std::size_t r = 0; r < perm.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(perm[r]);
    return out;
}

}  // namespace

TEST(ModelConfig, PresetsValidate) {
    EXPECT_NO_THROW(nets::reference_config(Problem::sine1d).validate());
    EXPECT_NO_THROW(nets::reference_config(Problem::gradient2d).validate());
    for (auto p : {Problem::sine1d, Problem::gradient2d})
        for (auto a : {Arch::dense, Arch::reference}) EXPECT_NO_THROW(nets::tiny_config(p, a).validate());
}

TEST(ModelConfig, RejectsBadValues) {
    ModelConfig c = tiny1d();
    c.sigma_floor = 0.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = tiny1d();
    c.dim_w = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = nets::tiny_config(Problem::sine1d, Arch::reference);
    c.timesteps = 100;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ModelConfig, ReferenceGraphInputWidths) {
    const auto c2 = nets::reference_config(Problem::gradient2d);
    EXPECT_EQ(c2.graph_input(), 2112);
    const auto c1 = nets::reference_config(Problem::sine1d);
    EXPECT_EQ(c1.graph_input(), 800 + 128 + 1024);
}

TEST(Model, SameSeedSameParameters) {
    Model<double> a(tiny1d(), 5), b(tiny1d(), 5), c(tiny1d(), 6);
    ASSERT_EQ(a.params().size(), b.params().size());
    bool differs = false;
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        EXPECT_EQ(a.params().value(i), b.params().value(i));
        differs |= a.params().value(i) != c.params().value(i);
    }
    EXPECT_TRUE(differs);
}

class ModelShapes : public ::testing::TestWithParam<std::tuple<Problem, Arch>> {};

TEST_P(ModelShapes, AllOperations) {
    const auto [problem, arch] = GetParam();
    ModelConfig c = problem == Problem::sine1d ? tiny1d(arch) : tiny2d(arch);
    Model<double> m(c, 1);
    const int n = 2, k = 3;
    const auto batch = batch_for(c, n, k, 9);

    const auto pw = m.prior_w(batch.labels);
    EXPECT_EQ(pw.mu.rows(), n * k);
    EXPECT_EQ(pw.mu.cols(), c.dim_w);
    EXPECT_EQ(pw.log_var.cols(), c.dim_w);

    const Matrix<double> w_tilde = normals(n, c.dim_w, 3);
    const auto pz = m.prior_z(w_tilde);
    EXPECT_EQ(pz.mu.rows(), n);
    EXPECT_EQ(pz.mu.cols(), c.dim_z);

    const Matrix<double> z = normals(n, c.dim_z, 4);
    const auto px = m.decode(z, w_tilde);
    EXPECT_EQ(px.mu.rows(), n);
    EXPECT_EQ(px.mu.cols(), c.x_dim());
    EXPECT_EQ(px.log_var.cols(), c.x_var_dim());
    if (problem == Problem::sine1d) {
        EXPECT_EQ(px.mu.cols(), c.timesteps);
        EXPECT_EQ(px.log_var.cols(), c.timesteps);
    } else {
        EXPECT_EQ(px.mu.cols(), 3 * 32 * 32);
        EXPECT_EQ(px.log_var.cols(), 32 * 32);
    }
    EXPECT_TRUE(px.mu.allFinite());

    const Matrix<double> x = batch.data;
    const auto qz = m.encode_z(x);
    EXPECT_EQ(qz.mu.rows(), n);
    EXPECT_EQ(qz.mu.cols(), c.dim_z);

    const auto qw = m.encode_w(x, z, batch.labels, k, normals(n * k, c.noise_dim(), 5));
    EXPECT_EQ(qw.parts(), n * k);
    EXPECT_EQ(qw.dim(), c.dim_w);
    EXPECT_TRUE(qw.mu.allFinite() && qw.log_sigma.allFinite() && qw.rho_pre.allFinite());
}

INSTANTIATE_TEST_SUITE_P(Tiny, ModelShapes,
                         ::testing::Combine(::testing::Values(Problem::sine1d, Problem::gradient2d),
                                            ::testing::Values(Arch::dense, Arch::reference)));

TEST(PriorW, SameLabelSameOutput) {
    Model<double> m(tiny1d(), 2);
    const std::vector<PartLabel> labels{{3}, {3}};
    const auto p = m.prior_w(labels);
    EXPECT_EQ(p.mu.row(0), p.mu.row(1));
    EXPECT_EQ(p.log_var.row(0), p.log_var.row(1));

    Model<double> m2(tiny2d(), 2);
    const std::vector<PartLabel> anchors{{synthgen::blue, 0.3, -0.2}, {synthgen::blue, 0.3, -0.2}};
    const auto q = m2.prior_w(anchors);
    EXPECT_EQ(q.mu.row(0), q.mu.row(1));
}

TEST(PriorW, DistinctFrequenciesDistinctMeans) {
    Model<double> m(tiny1d(), 2);
    const std::vector<PartLabel> labels{{1}, {2}, {3}, {4}, {5}};
    const auto p = m.prior_w(labels);
    for (int i = 0; i < 5; ++i)
        for (int j = i + 1; j < 5; ++j) EXPECT_GT((p.mu.row(i) - p.mu.row(j)).norm(), 1e-6);
}

TEST(PriorW, RejectsInvalidLabels) {
    Model<double> m(tiny1d(), 2);
    const std::vector<PartLabel> bad{{6}};
    EXPECT_THROW(m.prior_w(bad), std::invalid_argument);
    const std::vector<PartLabel> zero{{0}};
    EXPECT_THROW(m.prior_w(zero), std::invalid_argument);
    Model<double> m2(tiny2d(), 2);
    const std::vector<PartLabel> color{{5, 0.0, 0.0}};
    EXPECT_THROW(m2.prior_w(color), std::invalid_argument);
}

TEST(SigmaFloor, GenerativeSideIsClamped) {
    ModelConfig c = tiny1d();
    Model<double> m(c, 3);
    const double floor = 2.0 * std::log(c.sigma_floor);
    // drive every raw log-variance far below the floor
    auto& table = m.params().value(m.params().find("prior_w.embed.table"));
    table.rightCols(c.dim_w).setConstant(-50.0);
    m.params().value(m.params().find("prior_z.out.bias")).rightCols(c.dim_z).setConstant(-50.0);
    m.params().value(m.params().find("decoder.out.bias")).rightCols(c.timesteps).setConstant(-50.0);

    const std::vector<PartLabel> labels{{1}, {4}};
    const auto pw = m.prior_w(labels);
    EXPECT_DOUBLE_EQ(pw.log_var.minCoeff(), floor);
    EXPECT_GE((pw.log_var.array() * 0.5).exp().minCoeff(), c.sigma_floor * (1 - 1e-12));

    const auto pz = m.prior_z(normals(2, c.dim_w, 1));
    EXPECT_GE(pz.log_var.minCoeff(), floor);
    const auto px = m.decode(normals(2, c.dim_z, 2), normals(2, c.dim_w, 3));
    EXPECT_GE(px.log_var.minCoeff(), floor);
}

TEST(SigmaFloor, HoldsAtRandomInit) {
    for (auto p : {Problem::sine1d, Problem::gradient2d}) {
        ModelConfig c = p == Problem::sine1d ? tiny1d() : tiny2d();
        Model<double> m(c, 4);
        const auto batch = batch_for(c, 3, 4, 2);
        const double floor = c.log_var_floor();
        EXPECT_GE(m.prior_w(batch.labels).log_var.minCoeff(), floor);
        EXPECT_GE(m.prior_z(normals(3, c.dim_w, 1) * 10.0).log_var.minCoeff(), floor);
        EXPECT_GE(m.decode(normals(3, c.dim_z, 2), normals(3, c.dim_w, 3)).log_var.minCoeff(), floor);
    }
}

TEST(PriorZ, RejectsNonFiniteInput) {
    Model<double> m(tiny1d(), 2);
    Matrix<double> w = Matrix<double>::Zero(1, 4);
    w(0, 2) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(m.prior_z(w), std::domain_error);
}

TEST(PriorZ, GradientWrtInputMatchesFiniteDifferences) {
    Model<double> m(tiny1d(), 7);
    const auto res = compvae::testing::grad_check(
        [&](ad::Tape<double>& t, const std::vector<ad::Var<double>>& v) {
            Binding<double> p(t, m.params(), false);
            return project(m.prior_z(p, v[0]).mu, 11);
        },
        {normals(2, 4, 8)});
    EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(Decode, ImageLogVarSharedAcrossChannels) {
    Model<double> m(tiny2d(), 2);
    const auto px = m.decode(normals(1, 3, 1), normals(1, 4, 2));
    const Matrix<double> full = nets::expand_x_log_var(m.config(), px.log_var);
    ASSERT_EQ(full.cols(), 3 * 1024);
    for (int ch = 1; ch < 3; ++ch) EXPECT_EQ(full.middleCols(ch * 1024, 1024), full.leftCols(1024));
}

TEST(Decode, LikelihoodFiniteAtInit) {
    for (auto p : {Problem::sine1d, Problem::gradient2d})
        for (auto a : {Arch::dense, Arch::reference}) {
            ModelConfig c = p == Problem::sine1d ? tiny1d(a) : tiny2d(a);
            Model<double> m(c, 12);
            const auto batch = batch_for(c, 4, 2, 3);
            ad::Tape<double> t;
            Binding<double> b(t, m.params(), false);
            const auto px = m.decode(b, t.constant(normals(4, c.dim_z, 1)), t.constant(normals(4, c.dim_w, 2)));
            const auto nll = ad::gaussian_nll(t.constant(batch.data), px.mu, nets::expand_x_log_var(c, px.log_var));
            EXPECT_TRUE(nll.value().allFinite());
        }
}

TEST(EncodeZ, DeterministicAndInputSensitive) {
    ModelConfig c = tiny1d();
    Model<double> m(c, 3);
    const auto batch = batch_for(c, 2, 2, 5);
    const auto a = m.encode_z(batch.data);
    const auto b = m.encode_z(batch.data);
    EXPECT_EQ(a.mu, b.mu);
    EXPECT_GT((a.mu.row(0) - a.mu.row(1)).norm(), 1e-8);
}

TEST(EncodeZ, RejectsWrongShape) {
    Model<double> m(tiny1d(), 3);
    EXPECT_THROW(m.encode_z(Matrix<double>::Zero(2, 7)), std::invalid_argument);
}

TEST(EncodeW, PermutationEquivariance) {
    for (auto p : {Problem::sine1d, Problem::gradient2d}) {
        ModelConfig c = p == Problem::sine1d ? tiny1d() : tiny2d();
        Model<double> m(c, 21);
        const int n = 3, k = 4;
        const auto batch = batch_for(c, n, k, 8);
        const Matrix<double> z = normals(n, c.dim_z, 2), noise = normals(n * k, c.noise_dim(), 3);
        const auto base = m.encode_w(batch.data, z, batch.labels, k, noise);
        for (std::uint64_t s = 0; s < 5; ++s) {
            const auto perm = permutation_within_groups(n, k, 100 + s);
            std::vector<PartLabel> labels(batch.labels.size());
            for (std::size_t r = 0; r < perm.size(); ++r) labels[r] = batch.labels[static_cast<std::size_t>(perm[r])];
            const auto q = m.encode_w(batch.data, z, labels, k, permute_rows(noise, perm));
            EXPECT_LT((q.mu - permute_rows(base.mu, perm)).cwiseAbs().maxCoeff(), 1e-12);
            EXPECT_LT((q.log_sigma - permute_rows(base.log_sigma, perm)).cwiseAbs().maxCoeff(), 1e-12);
            EXPECT_LT((q.rho_pre - permute_rows(base.rho_pre, perm)).cwiseAbs().maxCoeff(), 1e-12);
        }
    }
}

TEST(EncodeW, SinglePartHasFiniteOutput) {
    ModelConfig c = tiny1d();
    Model<double> m(c, 2);
    const auto batch = batch_for(c, 2, 1, 4);
    const auto q = m.encode_w(batch.data, normals(2, c.dim_z, 1), batch.labels, 1, normals(2, c.noise_dim(), 2));
    EXPECT_TRUE(q.mu.allFinite() && q.log_sigma.allFinite() && q.rho_pre.allFinite());
}

TEST(EncodeW, DuplicateLabelsSeparatedByNoise) {
    ModelConfig c = tiny1d();
    Model<double> m(c, 2);
    const auto batch = batch_for(c, 1, 1, 4);
    const std::vector<PartLabel> labels{{2}, {2}};
    const Matrix<double> z = normals(1, c.dim_z, 1);
    const auto distinct = m.encode_w(batch.data, z, labels, 2, normals(2, c.noise_dim(), 3));
    EXPECT_GT((distinct.mu.row(0) - distinct.mu.row(1)).norm(), 1e-8);
    // with identical noise the two nodes are indistinguishable
    Matrix<double> same(2, c.noise_dim());
    same.row(0) = normals(1, c.noise_dim(), 4);
    same.row(1) = same.row(0);
    const auto tied = m.encode_w(batch.data, z, labels, 2, same);
    EXPECT_LT((tied.mu.row(0) - tied.mu.row(1)).norm(), 1e-14);
}

TEST(EncodeW, AnyPartCountWithFixedParameters) {
    ModelConfig c = tiny1d();
    Model<double> m(c, 2);
    const std::size_t count = m.params().scalar_count();
    for (int k = 1; k <= 12; ++k) {
        const auto batch = batch_for(c, 2, k, static_cast<std::uint64_t>(k));
        const auto q = m.encode_w(batch.data, normals(2, c.dim_z, 1), batch.labels, k, normals(2 * k, c.noise_dim(), 2));
        EXPECT_EQ(q.parts(), 2 * k);
        EXPECT_TRUE(q.mu.allFinite());
    }
    EXPECT_EQ(m.params().scalar_count(), count);
}

TEST(EncodeW, RejectsBadArguments) {
    ModelConfig c = tiny1d();
    Model<double> m(c, 2);
    const auto batch = batch_for(c, 2, 2, 4);
    const Matrix<double> z = normals(2, c.dim_z, 1);
    EXPECT_THROW(m.encode_w(batch.data, z, batch.labels, 0, normals(4, c.noise_dim(), 2)), std::invalid_argument);
    EXPECT_THROW(m.encode_w(batch.data, z, batch.labels, 2, normals(4, c.noise_dim() + 1, 2)), std::invalid_argument);
    EXPECT_THROW(m.encode_w(batch.data, z, batch.labels, 3, normals(6, c.noise_dim(), 2)), std::invalid_argument);
}

TEST(Aggregate, SumOverParts) {
    const Matrix<double> w = normals(3, 5, 1);
    EXPECT_EQ(Model<double>::aggregate(w, 1), w);
    const Matrix<double> sum = Model<double>::aggregate(w, 3);
    EXPECT_LT((sum - (w.row(0) + w.row(1) + w.row(2))).cwiseAbs().maxCoeff(), 1e-15);
    Matrix<double> swapped = w;
    swapped.row(0) = w.row(2);
    swapped.row(2) = w.row(0);
    EXPECT_LT((Model<double>::aggregate(swapped, 3) - sum).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_THROW(Model<double>::aggregate(w, 2), std::invalid_argument);
}

TEST(Generate, LatentsAreConsistent) {
    for (auto p : {Problem::sine1d, Problem::gradient2d}) {
        ModelConfig c = p == Problem::sine1d ? tiny1d() : tiny2d();
        Model<double> m(c, 6);
        const auto batch = batch_for(c, 1, 3, 2);
        Rng rng(4);
        const auto g = nets::generate(m, batch.labels, rng);
        EXPECT_EQ(g.latent.w.rows(), 3);
        const Eigen::RowVectorXd sum = g.latent.w.colwise().sum();
        EXPECT_LT((g.latent.w_tilde.row(0) - sum).norm(), 1e-12 * (1 + sum.norm()));
        EXPECT_EQ(g.x.mu.cols(), c.x_dim());
        EXPECT_EQ(g.x.log_var.cols(), c.x_dim());
        EXPECT_TRUE(g.x.mu.allFinite() && g.x.log_var.allFinite());
    }
}

// Finite-difference checks of each sub-network in isolation, against its own parameters.
class SubnetGradients : public ::testing::TestWithParam<std::tuple<Problem, Arch>> {};

TEST_P(SubnetGradients, MatchFiniteDifferences) {
    const auto [problem, arch] = GetParam();
    ModelConfig c = problem == Problem::sine1d ? tiny1d(arch) : tiny2d(arch);
    Model<double> m(c, 31);
    const int n = 2, k = 3;
    const auto batch = batch_for(c, n, k, 13);
    const Matrix<double> x = batch.data, w_tilde = normals(n, c.dim_w, 1), z = normals(n, c.dim_z, 2),
                         noise = normals(n * k, c.noise_dim(), 3);
    // large tensors (conv and image-sized layers) are subsampled
    const std::size_t per_tensor = arch == Arch::reference || problem == Problem::gradient2d ? 24 : 0;
    // Conv pre-activations sit close enough to the ELU kink that a 1e-5 step crosses it;
    // the central-difference error there is first order in the step.
    // The smaller step raises roundoff, so gradients below 1e-5 are compared absolutely.
    const double step = arch == Arch::reference ? 1e-6 : 1e-5;
    const double floor = arch == Arch::reference ? 1e-5 : 1e-6;

    auto check = [&](const char* what, auto fn) {
        const auto res = compvae::testing::param_grad_check(m.params(), fn, per_tensor, step, floor);
        EXPECT_LT(res.max_rel_error, 1e-4) << what << " (abs " << res.max_abs_error << ")";
        EXPECT_GT(res.checked, 0u);
    };
    check("prior_w", [&](Binding<double>& p) {
        const auto d = m.prior_w(p, batch.labels);
        return ad::add(project(d.mu, 1), project(d.log_var, 2));
    });
    check("prior_z", [&](Binding<double>& p) {
        const auto d = m.prior_z(p, p.tape().constant(w_tilde));
        return ad::add(project(d.mu, 3), project(d.log_var, 4));
    });
    check("decode", [&](Binding<double>& p) {
        const auto d = m.decode(p, p.tape().constant(z), p.tape().constant(w_tilde));
        return ad::add(project(d.mu, 5), project(d.log_var, 6));
    });
    check("encode_z", [&](Binding<double>& p) {
        const auto d = m.encode_z(p, m.features(p, p.tape().constant(x)));
        return ad::add(project(d.mu, 7), project(d.log_var, 8));
    });
    check("encode_w", [&](Binding<double>& p) {
        const auto q = m.encode_w(p, m.features(p, p.tape().constant(x)), p.tape().constant(z), batch.labels, k, noise);
        return ad::add(ad::add(project(q.mu, 9), project(q.log_sigma, 10)), project(q.rho_pre, 11));
    });
}

INSTANTIATE_TEST_SUITE_P(Tiny, SubnetGradients,
                         ::testing::Combine(::testing::Values(Problem::sine1d, Problem::gradient2d),
                                            ::testing::Values(Arch::dense, Arch::reference)));
