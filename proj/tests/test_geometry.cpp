#include <gtest/gtest.h>

#include "lanefusion/geometry.hpp"
#include "lanefusion/rng.hpp"

using namespace lanefusion;

namespace {

Calibration simple_calib(double f, double cx, double cy) {
    Calibration c;
    c.K << f, 0, cx, 0, f, cy, 0, 0, 1;
    return c;
}

SparseModalMap map_with(int w, int h, std::initializer_list<std::tuple<int, int, float, float, float>> px) {
    SparseModalMap m(w, h);
    for (const auto& [x, y, r, hh, d] : px) {
        const size_t i = static_cast<size_t>(y) * w + x;
        m.known[i] = 1;
        m.channels[kReflectance][i] = r;
        m.channels[kHeight][i] = hh;
        m.channels[kDistance][i] = d;
    }
    return m;
}

}  // namespace

TEST(ProjectPoints, OpticalAxisHitsPrincipalPoint) {
    PointCloud cloud;
    cloud.points.push_back({0, 0, 10, 0.5f});
    SparseModalMap m = project_points(cloud, simple_calib(100, 64, 48), 128, 96);
    EXPECT_EQ(m.known[static_cast<size_t>(48) * 128 + 64], 1);
    EXPECT_NEAR(m.coverage(), 1.0 / (128.0 * 96.0), 1e-12);
}

TEST(ProjectPoints, HandEvaluatedPixel) {
    // u = (100*1 + 64*10) / 10 = 74, v = cy
    PointCloud cloud;
    cloud.points.push_back({1, 0, 10, 0.5f});
    SparseModalMap m = project_points(cloud, simple_calib(100, 64, 64), 128, 128);
    const size_t idx = static_cast<size_t>(64) * 128 + 74;
    ASSERT_EQ(m.known[idx], 1);
    EXPECT_FLOAT_EQ(m.channels[kReflectance][idx], 0.5f);
    EXPECT_FLOAT_EQ(m.channels[kHeight][idx], 10.0f);  // sensor z is the third coordinate
    EXPECT_NEAR(m.channels[kDistance][idx], std::sqrt(101.0), 1e-5);
}

TEST(ProjectPoints, BehindCameraDropped) {
    PointCloud cloud;
    cloud.points.push_back({0, 0, -5, 0.5f});
    SparseModalMap m = project_points(cloud, simple_calib(100, 64, 64), 128, 128);
    EXPECT_EQ(m.coverage(), 0.0);
}

TEST(ProjectPoints, CollisionKeepsNearerPoint) {
    PointCloud cloud;
    cloud.points.push_back({0, 0, 20, 0.9f});
    cloud.points.push_back({0, 0, 10, 0.2f});
    SparseModalMap m = project_points(cloud, simple_calib(100, 64, 64), 128, 128);
    const size_t idx = static_cast<size_t>(64) * 128 + 64;
    EXPECT_FLOAT_EQ(m.channels[kDistance][idx], 10.0f);
    EXPECT_FLOAT_EQ(m.channels[kReflectance][idx], 0.2f);
}

TEST(ProjectPoints, AllPixelsInBounds) {
    Rng rng(7);
    PointCloud cloud;
    for (int i = 0; i < 5000; ++i)
        cloud.points.push_back({static_cast<float>(rng.uniform(-50, 50)),
                                static_cast<float>(rng.uniform(-50, 50)),
                                static_cast<float>(rng.uniform(-5, 80)),
                                static_cast<float>(rng.uniform())});
    SparseModalMap m = project_points(cloud, simple_calib(80, 32, 24), 64, 48);
    // writes only happen through bounds-checked indices; verify structure
    for (size_t i = 0; i < m.known.size(); ++i)
        if (m.known[i]) EXPECT_GT(m.channels[kDistance][i], 0.0f);
}

TEST(ProjectPoints, CoverageMonotoneInPointCount) {
    Rng rng(3);
    PointCloud cloud;
    for (int i = 0; i < 2000; ++i) {
        const float z = static_cast<float>(rng.uniform(2, 60));
        cloud.points.push_back({static_cast<float>(rng.uniform(-0.3, 0.3) * z),
                                static_cast<float>(rng.uniform(-0.2, 0.2) * z), z,
                                static_cast<float>(rng.uniform())});
    }
    const Calibration c = simple_calib(90, 64, 48);
    double prev = 0.0;
    for (size_t n : {10u, 100u, 400u, 1000u, 2000u}) {
        PointCloud prefix;
        prefix.points.assign(cloud.points.begin(), cloud.points.begin() + n);
        const double cov = project_points(prefix, c, 128, 96).coverage();
        EXPECT_GE(cov, prev);
        prev = cov;
    }
}

TEST(KnnComplete, DenseInputIsIdentity) {
    SparseModalMap m(4, 3);
    Rng rng(11);
    for (size_t i = 0; i < m.known.size(); ++i) {
        m.known[i] = 1;
        for (int c = 0; c < 3; ++c) m.channels[c][i] = static_cast<float>(rng.uniform());
    }
    DenseModalMap d = knn_complete(m);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(d.channels[c], m.channels[c]);
    EXPECT_FALSE(d.degenerate);
}

TEST(KnnComplete, EquidistantThreeGivesMean) {
    // three known pixels at distance 2 from (2,2); values 3/9, 6/9, 9/9
    SparseModalMap m = map_with(5, 5,
                                {{0, 2, 3.0f / 9, 1, 10},
                                 {2, 0, 6.0f / 9, 2, 20},
                                 {4, 2, 9.0f / 9, 3, 30}});
    DenseModalMap d = knn_complete(m, 3);
    const size_t idx = 2 * 5 + 2;
    EXPECT_NEAR(d.channels[kReflectance][idx], 6.0f / 9, 1e-6);
    EXPECT_NEAR(d.channels[kHeight][idx], 2.0f, 1e-6);
    EXPECT_NEAR(d.channels[kDistance][idx], 20.0f, 1e-5);
}

TEST(KnnComplete, InverseDistanceWeights) {
    // blank (2,2); known at distance 1, 2, 2 with values 10, 4, 4
    // weights (0.5, 0.25, 0.25) -> 7
    SparseModalMap m = map_with(6, 6, {{3, 2, 10, 0, 0}, {0, 2, 4, 0, 0}, {2, 4, 4, 0, 0}});
    DenseModalMap d = knn_complete(m, 3);
    EXPECT_NEAR(d.channels[kReflectance][2 * 6 + 2], 7.0f, 1e-5);
}

TEST(KnnComplete, FewerThanKUsesAll) {
    SparseModalMap m = map_with(8, 8, {{1, 1, 2, 0, 0}, {6, 6, 4, 0, 0}});
    DenseModalMap d = knn_complete(m, 3);
    // every blank pixel is a convex combination of the two known values
    for (size_t i = 0; i < m.known.size(); ++i) {
        EXPECT_GE(d.channels[kReflectance][i], 2.0f - 1e-5f);
        EXPECT_LE(d.channels[kReflectance][i], 4.0f + 1e-5f);
    }
}

TEST(KnnComplete, EmptyInputFlagsDegenerate) {
    SparseModalMap m(4, 4);
    DenseModalMap d = knn_complete(m);
    EXPECT_TRUE(d.degenerate);
    for (int c = 0; c < 3; ++c)
        for (float v : d.channels[c]) EXPECT_EQ(v, 0.0f);
}

TEST(KnnComplete, KnownPixelPreservationAndConvexity) {
    Rng rng(123);
    for (int trial = 0; trial < 100; ++trial) {
        const int w = 12 + static_cast<int>(rng.below(20));
        const int h = 8 + static_cast<int>(rng.below(16));
        SparseModalMap m(w, h);
        const int nk = 1 + static_cast<int>(rng.below(30));
        for (int i = 0; i < nk; ++i) {
            const size_t idx = static_cast<size_t>(rng.below(static_cast<uint64_t>(w) * h));
            m.known[idx] = 1;
            for (int c = 0; c < 3; ++c)
                m.channels[c][idx] = static_cast<float>(rng.uniform(-5, 5));
        }
        float lo[3] = {1e9f, 1e9f, 1e9f}, hi[3] = {-1e9f, -1e9f, -1e9f};
        for (size_t i = 0; i < m.known.size(); ++i)
            if (m.known[i])
                for (int c = 0; c < 3; ++c) {
                    lo[c] = std::min(lo[c], m.channels[c][i]);
                    hi[c] = std::max(hi[c], m.channels[c][i]);
                }
        DenseModalMap d = knn_complete(m, 3);
        for (size_t i = 0; i < m.known.size(); ++i) {
            if (m.known[i]) {
                for (int c = 0; c < 3; ++c)
                    EXPECT_EQ(d.channels[c][i], m.channels[c][i]);  // bitwise
            } else {
                for (int c = 0; c < 3; ++c) {
                    EXPECT_GE(d.channels[c][i], lo[c] - 1e-5f);
                    EXPECT_LE(d.channels[c][i], hi[c] + 1e-5f);
                }
            }
        }
    }
}

TEST(ComposeModalImage, IdentityRescale) {
    DenseModalMap d(4, 2);
    Rng rng(5);
    for (auto& v : d.channels[kReflectance]) v = static_cast<float>(rng.uniform());
    NormalizationBounds b;
    b.minmax = {{{0, 1}, {0, 1}, {0, 1}}};
    DenseModalMap out = compose_modal_image(d, b);
    EXPECT_EQ(out.channels[kReflectance], d.channels[kReflectance]);
}

TEST(ComposeModalImage, EndpointsMapToRangeEnds) {
    DenseModalMap d(2, 1);
    d.channels[kDistance][0] = 5;
    d.channels[kDistance][1] = 55;
    NormalizationBounds b;
    b.minmax[kDistance] = {5, 55};
    DenseModalMap out = compose_modal_image(d, b);
    EXPECT_FLOAT_EQ(out.channels[kDistance][0], 0.0f);
    EXPECT_FLOAT_EQ(out.channels[kDistance][1], 1.0f);
}

TEST(ComposeModalImage, HandEvaluatedHeight) {
    DenseModalMap d(1, 1);
    d.channels[kHeight][0] = -1.73f;
    DenseModalMap out = compose_modal_image(d);  // default bounds (-3, 3)
    EXPECT_NEAR(out.channels[kHeight][0], 0.211666667f, 1e-6);
}

TEST(ComposeModalImage, DegenerateBoundsError) {
    DenseModalMap d(2, 2);
    NormalizationBounds b;
    b.minmax[kHeight] = {1.0f, 1.0f};
    EXPECT_THROW(compose_modal_image(d, b), std::invalid_argument);
}

TEST(ComposeModalImage, IdempotentWithUnitBounds) {
    DenseModalMap d(6, 4);
    Rng rng(17);
    for (int c = 0; c < 3; ++c)
        for (auto& v : d.channels[c]) v = static_cast<float>(rng.uniform(-1, 2));
    NormalizationBounds unit;
    unit.minmax = {{{0, 1}, {0, 1}, {0, 1}}};
    DenseModalMap once = compose_modal_image(d, unit);
    DenseModalMap twice = compose_modal_image(once, unit);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(once.channels[c], twice.channels[c]);
}

TEST(Calibration, InvariantsEnforced) {
    Calibration c = simple_calib(100, 64, 48);
    EXPECT_NO_THROW(c.validate());
    c.K(2, 2) = 2.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = simple_calib(100, 64, 48);
    c.R(0, 0) = 0.5;  // no longer orthonormal
    EXPECT_THROW(c.validate(), std::invalid_argument);
}
