#include "compvae/autodiff.hpp"
#include "compvae/conv.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

using namespace compvae;
using compvae::testing::grad_check;
using compvae::testing::random_matrix;
using V = ad::Var<double>;
using T = ad::Tape<double>;

namespace {

// weighted sum so every output entry gets a distinct upstream gradient
V weighted(T& t, const V& y, unsigned seed = 99) {
    return ad::sum(ad::mul(y, t.constant(random_matrix(y.rows(), y.cols(), seed))));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(Autodiff, MatmulAndBias) {
    auto r = grad_check(
        [](T& t, const std::vector<V>& in) { return weighted(t, ad::add_row(ad::matmul(in[0], in[1]), in[2])); },
        {random_matrix(3, 4, 1), random_matrix(4, 5, 2), random_matrix(1, 5, 3)});
    EXPECT_LT(r.max_rel_error, kTol);
    EXPECT_EQ(r.checked, 12u + 20u + 5u);
}

TEST(Autodiff, PointwiseOps) {
    auto r = grad_check(
        [](T& t, const std::vector<V>& in) {
            V a = ad::elu(in[0]);
            V b = ad::tanh(in[1]);
            V c = ad::mul(ad::exp(in[0]), ad::square(in[1]));
            V d = ad::log(ad::add_scalar(ad::square(in[0]), 1.0));
            return weighted(t, ad::sub(ad::add(a, b), ad::scale(ad::add(c, d), 0.3)));
        },
        {random_matrix(4, 3, 4, 2.0), random_matrix(4, 3, 5)});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autodiff, ClampMinBlocksGradientBelowFloor) {
    T t;
    Matrix<double> m(1, 3);
    m << -2.0, 0.5, 3.0;
    V x = t.variable(m);
    V y = ad::sum(ad::clamp_min(x, 0.0));
    t.backward(y);
    EXPECT_DOUBLE_EQ(y.scalar(), 3.5);
    const Matrix<double> g = t.grad(x);
    EXPECT_DOUBLE_EQ(g(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(g(0, 1), 1.0);
    EXPECT_DOUBLE_EQ(g(0, 2), 1.0);
}

TEST(Autodiff, LayoutOps) {
    auto r = grad_check(
        [](T& t, const std::vector<V>& in) {
            V cat = ad::concat_cols<double>({in[0], ad::repeat_rows(in[1], 3)});
            V sl = ad::slice_cols(cat, 1, 4);
            V gs = ad::group_sum(sl, 3);
            V tiled = ad::tile_cols(gs, 2);
            V rs = ad::row_sum(tiled);
            return ad::add(weighted(t, tiled), ad::mean(ad::square(rs)));
        },
        {random_matrix(6, 3, 6), random_matrix(2, 2, 7)});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autodiff, GatherRowsAccumulatesRepeatedIndices) {
    auto r = grad_check(
        [](T& t, const std::vector<V>& in) { return weighted(t, ad::gather_rows(in[0], {2, 0, 2, 1})); },
        {random_matrix(3, 4, 8)});
    EXPECT_LT(r.max_rel_error, kTol);
    T t;
    V table = t.variable(random_matrix(3, 2, 9));
    EXPECT_THROW(ad::gather_rows(table, {3}), std::invalid_argument);
}

TEST(Autodiff, GaussianNll) {
    auto r = grad_check(
        [](T& t, const std::vector<V>& in) { return weighted(t, ad::gaussian_nll(in[0], in[1], in[2])); },
        {random_matrix(3, 5, 10), random_matrix(3, 5, 11), random_matrix(3, 5, 12)});
    EXPECT_LT(r.max_rel_error, kTol);

    // standard normal at the mean: 0.5 * log(2 pi) per entry
    T t;
    V x = t.constant(Matrix<double>::Zero(1, 4));
    V nll = ad::gaussian_nll(x, x, x);
    EXPECT_NEAR(nll.scalar(), 4 * 0.5 * std::log(2 * std::numbers::pi), 1e-12);
}

TEST(Autodiff, GaussianSampleReparametrization) {
    const Matrix<double> noise = random_matrix(2, 3, 13);
    auto r = grad_check(
        [noise](T& t, const std::vector<V>& in) { return weighted(t, ad::gaussian_sample(in[0], in[1], noise)); },
        {random_matrix(2, 3, 14), random_matrix(2, 3, 15)});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autodiff, ConstantsReceiveNoGradientAndBackwardNeedsScalar) {
    T t;
    V c = t.constant(Matrix<double>::Ones(2, 2));
    V v = t.variable(Matrix<double>::Ones(2, 2));
    V y = ad::sum(ad::mul(c, v));
    EXPECT_FALSE(t.requires_grad(ad::mul(c, c)));
    t.backward(y);
    EXPECT_TRUE(t.grad(c).isZero());
    EXPECT_TRUE(t.grad(v).isOnes());
    EXPECT_THROW(t.backward(v), std::invalid_argument);
}

TEST(Autodiff, ShapeMismatchThrows) {
    T t;
    V a = t.variable(Matrix<double>::Ones(2, 3));
    V b = t.variable(Matrix<double>::Ones(3, 2));
    EXPECT_THROW(ad::add(a, b), std::invalid_argument);
    EXPECT_THROW(ad::matmul(a, a), std::invalid_argument);
    EXPECT_THROW(ad::group_sum(a, 4), std::invalid_argument);
}

TEST(Conv, Conv1dGradient) {
    const ad::Conv1dShape s{2, 9, 3, 2, 1};  // 2 channels, length 9, k=3, stride 2, pad 1
    ASSERT_EQ(s.out_length(), 5);
    auto r = grad_check(
        [s](T& t, const std::vector<V>& in) { return weighted(t, ad::conv1d(in[0], in[1], in[2], s)); },
        {random_matrix(2, 18, 20), random_matrix(3, 6, 21), random_matrix(1, 3, 22)});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Conv, Conv1dMatchesDirectSum) {
    T t;
    const ad::Conv1dShape s{1, 5, 3, 1, 0};
    Matrix<double> x(1, 5), w(1, 3), b(1, 1);
    x << 1, 2, 3, 4, 5;
    w << 1, 0, -1;
    b << 0.5;
    V y = ad::conv1d(t.constant(x), t.constant(w), t.constant(b), s);
    ASSERT_EQ(y.cols(), 3);
    for (int o = 0; o < 3; ++o) EXPECT_DOUBLE_EQ(y.value()(0, o), x(0, o) - x(0, o + 2) + 0.5);
}

TEST(Conv, ConvTranspose1dGradientAndLength) {
    const ad::Conv1dShape s{3, 4, 4, 2, 0};  // 3 in channels, length 4
    ASSERT_EQ(s.transposed_length(), 10);
    auto r = grad_check(
        [s](T& t, const std::vector<V>& in) { return weighted(t, ad::conv_transpose1d(in[0], in[1], in[2], s)); },
        {random_matrix(2, 12, 23), random_matrix(3, 2 * 4, 24), random_matrix(1, 2, 25)});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Conv, ConvTransposeIsAdjointOfConv) {
    // <conv(x), y> == <x, convT(y)> with shared weights and zero bias
    const ad::Conv1dShape fwd{2, 11, 4, 3, 1};
    const Eigen::Index lo = fwd.out_length();
    const ad::Conv1dShape back{3, lo, 4, 3, 1};
    ASSERT_EQ(back.transposed_length(), 11 - ((11 + 2 - 4) % 3));
    T t;
    const Matrix<double> w = random_matrix(3, 8, 26);  // conv: (C_out=3, C_in*k=8)
    Matrix<double> wt(3, 8);                            // convT: (C_in=3, C_out*k=8), same tensor
    wt = w;
    const Matrix<double> x = random_matrix(1, 2 * 11, 27);
    const Matrix<double> y = random_matrix(1, 3 * lo, 28);
    V cx = ad::conv1d(t.constant(x), t.constant(w), t.constant(Matrix<double>::Zero(1, 3)), fwd);
    V ty = ad::conv_transpose1d(t.constant(y), t.constant(wt), t.constant(Matrix<double>::Zero(1, 2)), back);
    const double lhs = cx.value().cwiseProduct(y).sum();
    const double rhs = x.leftCols(ty.cols()).cwiseProduct(ty.value()).sum();
    EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Conv, Conv2dGradient) {
    const ad::Conv2dShape s{2, 5, 5, 3, 2, 1};
    ASSERT_EQ(s.out_height(), 3);
    auto r = grad_check(
        [s](T& t, const std::vector<V>& in) { return weighted(t, ad::conv2d(in[0], in[1], in[2], s)); },
        {random_matrix(2, 50, 30), random_matrix(3, 18, 31), random_matrix(1, 3, 32)});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Conv, UpsampleBilinear) {
    auto r = grad_check(
        [](T& t, const std::vector<V>& in) { return weighted(t, ad::upsample_bilinear2x(in[0], 2, 3, 2)); },
        {random_matrix(2, 12, 33)});
    EXPECT_LT(r.max_rel_error, kTol);

    // a constant image stays constant, a ramp keeps its endpoints' ordering
    T t;
    V c = ad::upsample_bilinear2x(t.constant(Matrix<double>::Constant(1, 4, 0.7)), 1, 2, 2);
    EXPECT_TRUE(c.value().isApprox(Matrix<double>::Constant(1, 16, 0.7)));
    Matrix<double> ramp(1, 2);
    ramp << 0.0, 1.0;
    V u = ad::upsample_bilinear2x(t.constant(ramp), 1, 1, 2);
    EXPECT_DOUBLE_EQ(u.value()(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(u.value()(0, 1), 0.25);
    EXPECT_DOUBLE_EQ(u.value()(0, 2), 0.75);
    EXPECT_DOUBLE_EQ(u.value()(0, 3), 1.0);
}

TEST(Conv, Crop) {
    auto r = grad_check(
        [](T& t, const std::vector<V>& in) { return weighted(t, ad::crop1d(in[0], 2, 6, 1, 3)); },
        {random_matrix(2, 12, 34)});
    EXPECT_LT(r.max_rel_error, kTol);
}
