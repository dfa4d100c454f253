#include <gtest/gtest.h>

#include <filesystem>

#include "lanefusion/dataio.hpp"
#include "lanefusion/geometry.hpp"

using namespace lanefusion;
namespace fs = std::filesystem;

namespace {

std::string identity_calib_text() {
    return "K: 1 0 0 0 1 0 0 0 1\nR: 1 0 0 0 1 0 0 0 1\nT: 0 0 0\n";
}

Eigen::Matrix3d rot_zyx(double a, double b, double c) {
    return (Eigen::AngleAxisd(a, Eigen::Vector3d::UnitZ()) *
            Eigen::AngleAxisd(b, Eigen::Vector3d::UnitY()) *
            Eigen::AngleAxisd(c, Eigen::Vector3d::UnitX()))
        .toRotationMatrix();
}

}  // namespace

TEST(ParseCalibration, IdentityCase) {
    Calibration c = parse_calibration(identity_calib_text());
    EXPECT_TRUE(c.K.isApprox(Eigen::Matrix3d::Identity()));
    EXPECT_TRUE(c.R.isApprox(Eigen::Matrix3d::Identity()));
    EXPECT_EQ(c.T.norm(), 0.0);
}

TEST(ParseCalibration, MissingRowNamesKey) {
    const std::string text = "K: 1 0 0 0 1 0 0 0 1\nR: 1 0 0 0 1 0 0 0 1\n";
    try {
        parse_calibration(text);
        FAIL() << "expected parse error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("T"), std::string::npos);
    }
}

TEST(ParseCalibration, NonOrthonormalRotationRejected) {
    const std::string text = "K: 1 0 0 0 1 0 0 0 1\nR: 1 0 0 0 2 0 0 0 1\nT: 0 0 0\n";
    EXPECT_THROW(parse_calibration(text), std::invalid_argument);
}

TEST(ParseCalibration, KittiAdapterMatchesDirectProduct) {
    // P2 = K [I | t_cam], Tr = [R | T]; the direct chain P2 * [Tr; 0 0 0 1]
    // is the projection oracle.
    Rng rng(99);
    Eigen::Matrix3d K;
    K << 721.5377, 0, 609.5593, 0, 721.5377, 172.854, 0, 0, 1;
    const Eigen::Vector3d t_cam(44.85728 / 721.5377, 0.2163791 / 721.5377, 2.745884e-3);
    Eigen::Matrix<double, 3, 4> P2;
    P2.leftCols<3>() = K;
    P2.col(3) = K * t_cam;
    const Eigen::Matrix3d R = rot_zyx(-M_PI / 2 + 0.01, 0.004, -M_PI / 2 - 0.02);
    const Eigen::Vector3d T(-0.011, -0.054, -0.292);
    Eigen::Matrix<double, 3, 4> Tr;
    Tr.leftCols<3>() = R;
    Tr.col(3) = T;

    std::ostringstream ss;
    ss.precision(17);
    ss << "P2:";
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) ss << " " << P2(i, j);
    ss << "\nTr_velo_to_cam:";
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) ss << " " << Tr(i, j);
    ss << "\n";

    const Calibration c = parse_calibration(ss.str());
    Eigen::Matrix4d TrH = Eigen::Matrix4d::Identity();
    TrH.topRows<3>() = Tr;
    int checked = 0;
    while (checked < 100) {
        const Eigen::Vector3d p(rng.uniform(2, 60), rng.uniform(-15, 15), rng.uniform(-3, 2));
        const Eigen::Vector4d ph(p.x(), p.y(), p.z(), 1.0);
        const Eigen::Vector3d direct = P2 * TrH * ph;
        if (direct.z() < 0.5) continue;
        const Eigen::Vector3d ours = c.K * (c.R * p + c.T);
        EXPECT_NEAR(direct.x() / direct.z(), ours.x() / ours.z(), 1e-4);
        EXPECT_NEAR(direct.y() / direct.z(), ours.y() / ours.z(), 1e-4);
        ++checked;
    }

    // the parsed calibration drives the projection op itself
    PointCloud cloud;
    cloud.points.push_back({10.0f, 1.0f, -1.0f, 0.5f});
    const Eigen::Vector3d uvw = c.K * (c.R * Eigen::Vector3d(10, 1, -1) + c.T);
    const int px = static_cast<int>(std::floor(uvw.x() / uvw.z()));
    const int py = static_cast<int>(std::floor(uvw.y() / uvw.z()));
    SparseModalMap m = project_points(cloud, c, 1242, 375);
    ASSERT_TRUE(px >= 0 && px < 1242 && py >= 0 && py < 375);
    EXPECT_EQ(m.known[static_cast<size_t>(py) * 1242 + px], 1);
}

TEST(LoadPointCloud, BinaryLayout) {
    std::vector<uint8_t> bytes(32);
    const float rec[8] = {1, 2, 3, 0.5f, -4, 5, -6, 0.25f};
    std::memcpy(bytes.data(), rec, 32);
    PointCloud c = load_point_cloud(bytes);
    ASSERT_EQ(c.size(), 2u);
    EXPECT_FLOAT_EQ(c.points[0].x, 1);
    EXPECT_FLOAT_EQ(c.points[1].reflectance, 0.25f);

    EXPECT_TRUE(load_point_cloud({}).empty());

    std::vector<uint8_t> bad(17);
    EXPECT_THROW(load_point_cloud(bad), std::runtime_error);
}

TEST(LoadPointCloud, ReflectanceClampedOnIngest) {
    std::vector<uint8_t> bytes(16);
    const float rec[4] = {1, 2, 3, 7.5f};
    std::memcpy(bytes.data(), rec, 16);
    PointCloud c = load_point_cloud(bytes);
    EXPECT_FLOAT_EQ(c.points[0].reflectance, 1.0f);
}

TEST(SplitDataset, PaperSizesAndRounding) {
    const DatasetSplit s = split_dataset(383, 5);
    EXPECT_EQ(s.train.size(), 229u);
    EXPECT_EQ(s.val.size(), 38u);
    EXPECT_EQ(s.test.size(), 116u);
    const DatasetSplit t = split_dataset(10, 1);
    EXPECT_EQ(t.train.size(), 6u);
    EXPECT_EQ(t.val.size(), 1u);
    EXPECT_EQ(t.test.size(), 3u);
    EXPECT_THROW(split_dataset(9, 1), std::invalid_argument);
}

TEST(SplitDataset, DeterministicAndExhaustive) {
    const DatasetSplit a = split_dataset(57, 1234);
    const DatasetSplit b = split_dataset(57, 1234);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.val, b.val);
    EXPECT_EQ(a.test, b.test);

    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 10 + static_cast<int>(rng.below(500));
        const DatasetSplit s = split_dataset(n, rng.next_u64());
        EXPECT_EQ(s.train.size(), static_cast<size_t>(std::floor(0.6 * n)));
        EXPECT_EQ(s.val.size(), static_cast<size_t>(std::floor(0.1 * n)));
        std::vector<int> all;
        all.insert(all.end(), s.train.begin(), s.train.end());
        all.insert(all.end(), s.val.begin(), s.val.end());
        all.insert(all.end(), s.test.begin(), s.test.end());
        ASSERT_EQ(all.size(), static_cast<size_t>(n));
        std::sort(all.begin(), all.end());
        for (int i = 0; i < n; ++i) ASSERT_EQ(all[static_cast<size_t>(i)], i);
    }
}

TEST(Synthetic, DeterministicFromSeed) {
    const FrameRecord a = generate_synthetic_frame(7);
    const FrameRecord b = generate_synthetic_frame(7);
    ASSERT_EQ(a.image.numel(), b.image.numel());
    EXPECT_EQ(std::memcmp(a.image.data(), b.image.data(), sizeof(float) * a.image.numel()), 0);
    EXPECT_EQ(a.lane_mask.v, b.lane_mask.v);
    ASSERT_EQ(a.cloud.size(), b.cloud.size());
    for (size_t i = 0; i < a.cloud.size(); ++i) {
        EXPECT_EQ(a.cloud.points[i].x, b.cloud.points[i].x);
        EXPECT_EQ(a.cloud.points[i].reflectance, b.cloud.points[i].reflectance);
    }
}

TEST(Synthetic, CoverageTracksConfiguredRatio) {
    for (uint64_t seed : {1u, 9u, 23u}) {
        const FrameRecord f = generate_synthetic_frame(seed);
        const SparseModalMap m = project_points(f.cloud, f.calib, 256, 128);
        EXPECT_GE(m.coverage(), 0.012);
        EXPECT_LE(m.coverage(), 0.018);
    }
}

TEST(Synthetic, LaneSubsetOfRoadAndInvariants) {
    for (uint64_t seed : {3u, 4u, 5u}) {
        const FrameRecord f = generate_synthetic_frame(seed);
        EXPECT_NO_THROW(validate_frame(f));
        ASSERT_FALSE(f.road_mask.empty());
        size_t lane_px = 0;
        for (size_t i = 0; i < f.lane_mask.v.size(); ++i) {
            if (f.lane_mask.v[i]) {
                ++lane_px;
                EXPECT_EQ(f.road_mask.v[i], 1);
            }
        }
        EXPECT_GT(lane_px, 100u);  // stripes are actually visible
    }
}

TEST(Synthetic, ConfigValidation) {
    SyntheticConfig cfg;
    cfg.lane_count = 1;
    EXPECT_THROW(generate_synthetic_frame(1, cfg), std::invalid_argument);
}

TEST(Augment, FlipTwiceIsIdentity) {
    const FrameRecord f = generate_synthetic_frame(11);
    AugmentationPlan plan;
    plan.seed = 3;
    plan.ops = {{AugKind::Flip, 0.0, 1.0}};  // always applies
    const FrameRecord once = augment_frame(f, plan);
    const FrameRecord twice = augment_frame(once, plan);
    EXPECT_EQ(std::memcmp(twice.image.data(), f.image.data(), sizeof(float) * f.image.numel()), 0);
    EXPECT_EQ(twice.lane_mask.v, f.lane_mask.v);
    EXPECT_EQ(twice.road_mask.v, f.road_mask.v);
    // and the flip actually changed something
    EXPECT_NE(std::memcmp(once.image.data(), f.image.data(), sizeof(float) * f.image.numel()), 0);
}

TEST(Augment, PhotometricOpsNeverTouchMasks) {
    const FrameRecord f = generate_synthetic_frame(12);
    AugmentationPlan plan;
    plan.seed = 5;
    plan.ops = {{AugKind::Brightness, 0.6, 1.4},
                {AugKind::Contrast, 0.6, 1.4},
                {AugKind::GaussianNoise, 0.01, 0.05},
                {AugKind::LaneErase, 5, 15}};
    const FrameRecord out = augment_frame(f, plan);
    EXPECT_EQ(out.lane_mask.v, f.lane_mask.v);
    EXPECT_EQ(out.road_mask.v, f.road_mask.v);
    EXPECT_NE(std::memcmp(out.image.data(), f.image.data(), sizeof(float) * f.image.numel()), 0);
}

TEST(Augment, RotationRoundTripWithinBoundaryBand) {
    // central stripes, comfortably away from the frame border
    FrameRecord f;
    f.image = Tensor({3, 128, 256});
    Rng rng(6);
    for (int64_t i = 0; i < f.image.numel(); ++i) f.image[i] = static_cast<float>(rng.uniform());
    f.lane_mask = Mask(256, 128);
    f.road_mask = Mask(256, 128);
    for (int y = 44; y < 84; ++y)
        for (int x = 40; x < 216; ++x) {
            f.road_mask.at(y, x) = 1;
            if ((y / 6) % 2 == 0) f.lane_mask.at(y, x) = 1;
        }

    AugmentationPlan fwd{{{AugKind::Rotation, 5.0, 5.0}}, 1};
    AugmentationPlan bwd{{{AugKind::Rotation, -5.0, -5.0}}, 1};
    const FrameRecord back = augment_frame(augment_frame(f, fwd), bwd);

    auto near_boundary = [&](int y, int x) {
        bool saw0 = false, saw1 = false;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int yy = std::clamp(y + dy, 0, 127), xx = std::clamp(x + dx, 0, 255);
                (f.lane_mask.at(yy, xx) ? saw1 : saw0) = true;
            }
        return saw0 && saw1;
    };
    for (int y = 0; y < 128; ++y)
        for (int x = 0; x < 256; ++x)
            if (back.lane_mask.at(y, x) != f.lane_mask.at(y, x))
                ASSERT_TRUE(near_boundary(y, x)) << "mismatch far from boundary at " << y << "," << x;
}

TEST(Augment, PreservesBinarityAndImageRange) {
    const FrameRecord f = generate_synthetic_frame(13);
    for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        const FrameRecord out = augment_frame(f, default_augmentation_plan(seed));
        EXPECT_NO_THROW(validate_frame(out));
    }
}

TEST(Augment, ReplayableFromSeed) {
    const FrameRecord f = generate_synthetic_frame(14);
    const AugmentationPlan plan = default_augmentation_plan(42);
    const FrameRecord a = augment_frame(f, plan);
    const FrameRecord b = augment_frame(f, plan);
    EXPECT_EQ(std::memcmp(a.image.data(), b.image.data(), sizeof(float) * a.image.numel()), 0);
    EXPECT_EQ(a.lane_mask.v, b.lane_mask.v);
}

TEST(Augment, GeometricOpsWarpLidarWithImage) {
    FrameRecord f = generate_synthetic_frame(15);
    SparseModalMap sp = project_points(f.cloud, f.calib, 256, 128);
    f.lidar = modal_tensor(sp, {}, true);
    AugmentationPlan plan{{{AugKind::Flip, 0.0, 1.0}}, 9};
    const FrameRecord out = augment_frame(f, plan);
    // flipped lidar equals lidar of flipped columns
    const int64_t plane = 128 * 256;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 128; y += 5)
            for (int x = 0; x < 256; x += 7)
                EXPECT_EQ(out.lidar[c * plane + y * 256 + x],
                          f.lidar[c * plane + y * 256 + (255 - x)]);
}

TEST(RoundTrip, WriteReadWriteIsStable) {
    const fs::path dir = fs::temp_directory_path() / "lf_roundtrip";
    fs::create_directories(dir);
    const FrameRecord f = generate_synthetic_frame(21);

    save_image_tensor((dir / "img.png").string(), f.image);
    save_mask((dir / "lane.png").string(), f.lane_mask);
    write_binary_file((dir / "cloud.bin").string(), serialize_point_cloud(f.cloud));
    {
        std::ofstream out(dir / "calib.txt");
        out << serialize_calibration(f.calib);
    }

    const Tensor img = load_image_tensor((dir / "img.png").string());
    const Mask lane = load_mask((dir / "lane.png").string());
    const PointCloud cloud = load_point_cloud(read_binary_file((dir / "cloud.bin").string()));
    const Calibration calib = parse_calibration(read_text_file((dir / "calib.txt").string()));

    save_image_tensor((dir / "img2.png").string(), img);
    EXPECT_EQ(read_binary_file((dir / "img.png").string()),
              read_binary_file((dir / "img2.png").string()));
    EXPECT_EQ(lane.v, f.lane_mask.v);
    ASSERT_EQ(cloud.size(), f.cloud.size());
    for (size_t i = 0; i < cloud.size(); ++i) EXPECT_EQ(cloud.points[i].x, f.cloud.points[i].x);
    EXPECT_TRUE(calib.K.isApprox(f.calib.K, 1e-12));
    EXPECT_TRUE(calib.R.isApprox(f.calib.R, 1e-12));
    fs::remove_all(dir);
}

TEST(Manifest, RoundTrip) {
    const fs::path dir = fs::temp_directory_path() / "lf_manifest";
    fs::create_directories(dir);
    Manifest m;
    ManifestEntry e;
    e.image = "a.png";
    e.cloud = "a.bin";
    e.calib = "a.txt";
    e.lane_mask = "a_lane.png";
    m.frames.push_back(e);
    e.road_mask = "b_road.png";
    e.lidar_map = "b_lidar.png";
    m.frames.push_back(e);
    write_manifest((dir / "manifest.json").string(), m);
    const Manifest back = read_manifest((dir / "manifest.json").string());
    ASSERT_EQ(back.frames.size(), 2u);
    EXPECT_EQ(back.frames[0].road_mask, "");
    EXPECT_EQ(back.frames[1].lidar_map, "b_lidar.png");
    fs::remove_all(dir);
}

TEST(ResizeFrame, ScalesIntrinsics) {
    const FrameRecord f = generate_synthetic_frame(31);
    const FrameRecord half = resize_frame(f, 64, 128);
    EXPECT_EQ(half.image.dim(1), 64);
    EXPECT_EQ(half.image.dim(2), 128);
    EXPECT_NEAR(half.calib.K(0, 0), f.calib.K(0, 0) / 2.0, 1e-9);
    EXPECT_NEAR(half.calib.K(1, 1), f.calib.K(1, 1) / 2.0, 1e-9);
    EXPECT_NO_THROW(validate_frame(half));
}

TEST(FrameRecord, ValidationCatchesMismatches) {
    FrameRecord f = generate_synthetic_frame(32);
    f.lane_mask = Mask(10, 10);
    EXPECT_THROW(validate_frame(f), std::invalid_argument);
}
