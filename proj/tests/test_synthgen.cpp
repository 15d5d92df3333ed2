#include "compvae/synthgen.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <map>

using namespace compvae;
using namespace compvae::synthgen;

namespace {

bool bytes_equal(const Matrix<double>& a, const Matrix<double>& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

// ------------------------------------------------------------ 1D

TEST(SineCurve, SinglePartAtOrigin) {
    const int f[] = {1};
    const double a[] = {1.0}, ph[] = {0.0};
    const auto x = sine_curve(f, a, ph, 200, 100.0, 3.0);
    EXPECT_NEAR(x(0), std::tanh(3.0), 1e-15);
    EXPECT_NEAR(x(0), 0.99505, 5e-6);
    // one full period later the curve repeats
    EXPECT_NEAR(x(100), x(0), 1e-12);
}

TEST(SineCurve, ZeroAmplitudeIsFlat) {
    const int f[] = {3};
    const double a[] = {0.0}, ph[] = {0.4};
    EXPECT_TRUE(sine_curve(f, a, ph, 50, 100.0, 3.0).isZero());
}

TEST(SineCurve, IncreasingNonlinearityGrowsMagnitude) {
    const int f[] = {2, 5, 7};
    const double a[] = {1.1, 0.8, 0.9}, ph[] = {0.3, -0.5, 1.0};
    const auto lo = sine_curve(f, a, ph, 200, 100.0, 1.0);
    const auto hi = sine_curve(f, a, ph, 200, 100.0, 4.0);
    for (Eigen::Index t = 0; t < lo.size(); ++t)
        if (std::abs(lo(t)) > 1e-12) EXPECT_GT(std::abs(hi(t)), std::abs(lo(t)));
}

TEST(SineBatch, ShapesLabelsAndRangeBound) {
    SineBatchSpec spec;
    spec.batch_size = 64;
    spec.seed = 5;
    for (int k : {1, 4, 16}) {
        const auto b = generate_sine_batch(spec, k);
        EXPECT_EQ(b.data.rows(), 64);
        EXPECT_EQ(b.data.cols(), 200);
        EXPECT_EQ(b.parts, k);
        EXPECT_EQ(b.labels.size(), static_cast<std::size_t>(64 * k));
        EXPECT_LT(b.data.cwiseAbs().maxCoeff(), static_cast<double>(k));
        for (const auto& l : b.labels) EXPECT_TRUE(spec.freq_range.contains(l.category));
    }
}

TEST(SineBatch, DataFollowsClosedFormFromDrawnParameters) {
    SineBatchSpec spec;
    spec.batch_size = 4;
    spec.seed = 6;
    const auto b = generate_sine_batch(spec, 3);
    for (Eigen::Index n = 0; n < 4; ++n) {
        std::vector<int> f;
        std::vector<double> a, ph;
        for (int i = 0; i < 3; ++i) {
            f.push_back(b.labels_of(n)[static_cast<std::size_t>(i)].category);
            a.push_back(b.part_params(n * 3 + i, 0));
            ph.push_back(b.part_params(n * 3 + i, 1));
        }
        EXPECT_TRUE(b.data.row(n).isApprox(sine_curve(f, a, ph, 200, 100.0, 3.0)));
    }
}

TEST(SineBatch, AmplitudeAndPhaseDistributions) {
    SineBatchSpec spec;
    spec.batch_size = 6250;
    spec.timesteps = 1;
    spec.seed = 7;
    const auto b = generate_sine_batch(spec, 16);  // 10^5 parts
    ASSERT_EQ(b.part_params.rows(), 100000);
    const Eigen::ArrayXd amp = b.part_params.col(0);
    const double mean = amp.mean();
    const double sd = std::sqrt((amp - mean).square().sum() / (amp.size() - 1));
    EXPECT_NEAR(mean, 1.0, 0.01);
    EXPECT_NEAR(sd, 0.3, 0.01);
    const Eigen::ArrayXd ph = b.part_params.col(1);
    EXPECT_NEAR(std::sqrt(ph.square().mean()), 0.8, 0.01);

    spec.phase_std = std::numbers::pi / 2;
    const auto b2 = generate_sine_batch(spec, 16);
    const Eigen::ArrayXd ph2 = b2.part_params.col(1);
    EXPECT_NEAR(std::sqrt(ph2.square().mean()), std::numbers::pi / 2, 0.02);
}

TEST(SineBatch, FrequenciesUniformWithDuplicates) {
    SineBatchSpec spec;
    spec.batch_size = 2000;
    spec.timesteps = 1;
    spec.seed = 8;
    const auto b = generate_sine_batch(spec, 10);
    std::map<int, int> counts;
    bool duplicate_seen = false;
    for (Eigen::Index n = 0; n < 2000; ++n) {
        std::map<int, int> local;
        for (const auto& l : b.labels_of(n)) duplicate_seen |= ++local[l.category] > 1;
        for (const auto& [f, c] : local) counts[f] += c;
    }
    EXPECT_TRUE(duplicate_seen);
    ASSERT_EQ(counts.size(), 10u);
    for (const auto& [f, c] : counts) EXPECT_NEAR(c / 20000.0, 0.1, 0.01) << "frequency " << f;
}

TEST(SineBatch, RejectsInvalidInput) {
    SineBatchSpec spec;
    EXPECT_THROW(generate_sine_batch(spec, 0), std::invalid_argument);
    EXPECT_THROW(generate_sine_batch(spec, 17), std::invalid_argument);
    spec.freq_range = {5, 4};
    EXPECT_THROW(generate_sine_batch(spec, 1), std::invalid_argument);
    spec.freq_range = {1, 10};
    spec.nonlinearity = 0;
    EXPECT_THROW(generate_sine_batch(spec, 1), std::invalid_argument);
}

TEST(SineBatch, PureFunctionOfSpecSeedAndK) {
    SineBatchSpec spec;
    spec.batch_size = 16;
    spec.seed = 9;
    EXPECT_TRUE(bytes_equal(generate_sine_batch(spec, 5).data, generate_sine_batch(spec, 5).data));
    spec.seed = 10;
    const auto other = generate_sine_batch(spec, 5);
    spec.seed = 9;
    EXPECT_FALSE(bytes_equal(generate_sine_batch(spec, 5).data, other.data));
}

// ------------------------------------------------------------ 2D

TEST(GradientImage, SingleWhiteAnchorIsWhite) {
    const PartLabel a[] = {{white, 0.3, -0.2}};
    const double in[] = {7.0};
    EXPECT_TRUE(gradient_image(a, in).isOnes());
}

TEST(GradientImage, IdenticalColorsGiveThatColor) {
    const PartLabel a[] = {{red, -0.5, 0.1}, {red, 0.6, 0.7}};
    const double in[] = {5.5, 9.0};
    const auto img = gradient_image(a, in);
    EXPECT_TRUE(img.head(1024).isOnes());
    EXPECT_TRUE(img.tail(2048).isZero());
}

TEST(GradientImage, PixelsNearBlackAreDarkerThanNearWhite) {
    const PartLabel a[] = {{black, -0.9, -0.9}, {white, 0.9, 0.9}};
    const double in[] = {7.0, 7.0};
    const auto img = gradient_image(a, in);
    // pixel closest to (-0.9, -0.9) is (1, 1); closest to (0.9, 0.9) is (30, 30)
    const Eigen::Index near_black = 1 * 32 + 1, near_white = 30 * 32 + 30;
    for (int c = 0; c < 3; ++c) EXPECT_LT(img(c * 1024 + near_black), img(c * 1024 + near_white));
}

TEST(GradientImage, PreGammaPixelsAreConvexCombinationsOfPresentColors) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const int k = static_cast<int>(rng.uniform_int(1, 6));
        std::vector<PartLabel> a(k);
        std::vector<double> in(k);
        for (int i = 0; i < k; ++i) {
            a[i] = {static_cast<int>(rng.uniform_int(0, 4)), rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)};
            in[i] = rng.uniform(5, 10);
        }
        const auto img = gradient_image_linear(a, in);
        for (int c = 0; c < 3; ++c) {
            double lo = 1, hi = 0;
            for (const auto& l : a) {
                const auto& col = kPalette[static_cast<std::size_t>(l.category)];
                const double v = c == 0 ? col.r : (c == 1 ? col.g : col.b);
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            const auto plane = img.segment(c * 1024, 1024);
            EXPECT_GE(plane.minCoeff(), lo - 1e-12);
            EXPECT_LE(plane.maxCoeff(), hi + 1e-12);
        }
    }
}

TEST(GradientBatch, RangesAndLabels) {
    GradientBatchSpec spec;
    spec.batch_size = 32;
    spec.seed = 12;
    const auto b = generate_gradient_batch(spec, 5);
    EXPECT_EQ(b.data.cols(), 3 * 32 * 32);
    EXPECT_GE(b.data.minCoeff(), 0.0);
    EXPECT_LE(b.data.maxCoeff(), 1.0);
    for (const auto& l : b.labels) {
        EXPECT_GE(l.x, -0.9);
        EXPECT_LE(l.x, 0.9);
        EXPECT_GE(l.y, -0.9);
        EXPECT_LE(l.y, 0.9);
        EXPECT_TRUE(l.category >= 0 && l.category < 5);
    }
    EXPECT_GE(b.part_params.col(0).minCoeff(), 5.0);
    EXPECT_LE(b.part_params.col(0).maxCoeff(), 10.0);
    EXPECT_THROW(generate_gradient_batch(spec, 0), std::invalid_argument);
    EXPECT_THROW(generate_gradient_batch(spec, 9), std::invalid_argument);
}

TEST(GradientBatch, PixelGridSpansUnitSquare) {
    EXPECT_DOUBLE_EQ(pixel_coord(0, 32), -1.0);
    EXPECT_DOUBLE_EQ(pixel_coord(31, 32), 1.0);
}

TEST(GradientBatch, PureFunctionOfSeed) {
    GradientBatchSpec spec;
    spec.batch_size = 8;
    spec.seed = 13;
    EXPECT_TRUE(bytes_equal(generate_gradient_batch(spec, 3).data, generate_gradient_batch(spec, 3).data));
}

// ------------------------------------------------------------ streams

TEST(BatchStream, DegenerateCurriculumAlwaysOnePart) {
    SineBatchSpec spec;
    spec.batch_size = 2;
    BatchStream s(spec, 1);
    for (int i = 0; i < 50; ++i) EXPECT_EQ(s.next().parts, 1);
}

TEST(BatchStream, PartCountUniformOverCurriculum) {
    SineBatchSpec spec;
    spec.seed = 14;
    BatchStream s(spec, 4);
    std::array<int, 5> counts{};
    for (int i = 0; i < 10000; ++i) ++counts[static_cast<std::size_t>(s.draw_parts())];
    EXPECT_EQ(counts[0], 0);
    for (int k = 1; k <= 4; ++k) EXPECT_NEAR(counts[static_cast<std::size_t>(k)] / 10000.0, 0.25, 0.02);
}

TEST(BatchStream, SameSeedSameBytesAndFreshBatches) {
    GradientBatchSpec spec;
    spec.batch_size = 4;
    spec.seed = 15;
    BatchStream a(spec, 3), b(spec, 3);
    Matrix<double> prev;
    for (int i = 0; i < 5; ++i) {
        const auto x = a.next(), y = b.next();
        EXPECT_TRUE(bytes_equal(x.data, y.data));
        EXPECT_EQ(x.labels, y.labels);
        if (i > 0 && prev.cols() == x.data.cols() && prev.rows() == x.data.rows()) EXPECT_FALSE(bytes_equal(prev, x.data));
        prev = x.data;
    }
}

TEST(BatchStream, CurriculumCappedAtSpecMaximum) {
    GradientBatchSpec spec;
    BatchStream s(spec, 100);
    EXPECT_EQ(s.curriculum(), 8);
    EXPECT_THROW(s.set_curriculum(0), std::invalid_argument);
}
