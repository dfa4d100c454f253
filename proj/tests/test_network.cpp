#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "lanefusion/network.hpp"
#include "lanefusion/rng.hpp"

using namespace lanefusion;

namespace {

Tensor random_image(uint64_t seed, int c = 3, int h = 128, int w = 256) {
    Rng rng(seed);
    Tensor t({c, h, w});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform());
    return t;
}

Tensor random_feat(Rng& rng, std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(-1, 1));
    return t;
}

// test readout: scalar sum of all elements
Var sum_all(const Var& x) {
    double s = 0.0;
    for (int64_t i = 0; i < x->value.numel(); ++i) s += x->value[i];
    Tensor out({1});
    out[0] = static_cast<float>(s);
    return make_node(std::move(out), {x}, [x](Node& n) {
        for (int64_t i = 0; i < x->value.numel(); ++i) x->grad[i] += n.grad[0];
    });
}

constexpr Variant kAll[] = {Variant::V1,  Variant::V2,  Variant::V3,      Variant::V4, Variant::V5,
                            Variant::V3r, Variant::V4r, Variant::V3rPlus, Variant::V6};

}  // namespace

TEST(ArchitectureConfig, VariantFlagTable) {
    auto c = ArchitectureConfig::for_variant(Variant::V2);
    EXPECT_TRUE(c.fuse_early);
    EXPECT_FALSE(c.dense_lidar);
    c = ArchitectureConfig::for_variant(Variant::V6);
    EXPECT_TRUE(c.fuse_early && c.fuse_middle && c.dense_lidar && c.multitask && c.adaptive_fuse);
    EXPECT_FALSE(c.fuse_late);
    for (Variant v : kAll) EXPECT_NO_THROW(ArchitectureConfig::for_variant(v).validate());
}

TEST(ArchitectureConfig, ClosedConfigSpace) {
    // no multitask flavor of V5 exists
    nlohmann::json j = {{"variant", "V5"}, {"multitask", true}};
    EXPECT_THROW(ArchitectureConfig::from_json(j), std::invalid_argument);
    nlohmann::json ok = {{"variant", "V3r+"}, {"base_width", 4}};
    const ArchitectureConfig c = ArchitectureConfig::from_json(ok);
    EXPECT_EQ(c.variant, Variant::V3rPlus);
    EXPECT_TRUE(c.adaptive_fuse);
    const ArchitectureConfig back = ArchitectureConfig::from_json(c.to_json());
    EXPECT_EQ(back.variant, c.variant);
    EXPECT_EQ(back.base_width, c.base_width);
}

TEST(Model, ShapeSuiteAllVariants) {
    const Tensor img = random_image(10);
    const Tensor lid = random_image(11);
    for (Variant v : kAll) {
        Model m(ArchitectureConfig::for_variant(v, 4), 99);
        SegmentationOutput out = m.infer(img, m.config().has_lidar() ? &lid : nullptr);
        ASSERT_EQ(out.lane_logprob.shape(), (std::vector<int>{2, 128, 256})) << variant_name(v);
        const int64_t plane = 128 * 256;
        for (int64_t i = 0; i < plane; i += 997) {
            const double s = std::exp(out.lane_logprob[i]) + std::exp(out.lane_logprob[plane + i]);
            ASSERT_NEAR(s, 1.0, 1e-5) << variant_name(v);
        }
        if (m.config().multitask) {
            ASSERT_EQ(out.road_logprob.shape(), (std::vector<int>{2, 128, 256})) << variant_name(v);
            EXPECT_GE(out.k, 0.0f);
            EXPECT_LE(out.k, 1.0f);
        } else {
            EXPECT_TRUE(out.road_logprob.empty());
        }
    }
}

TEST(Model, LidarContractErrors) {
    Model v1(ArchitectureConfig::for_variant(Variant::V1, 4), 1);
    const Tensor img = random_image(1);
    const Tensor lid = random_image(2);
    EXPECT_THROW(v1.infer(img, &lid), std::invalid_argument);
    Model v3(ArchitectureConfig::for_variant(Variant::V3, 4), 1);
    EXPECT_THROW(v3.infer(img, nullptr), std::invalid_argument);
    const Tensor small = random_image(3, 3, 64, 128);
    EXPECT_THROW(v1.infer(small, nullptr), std::invalid_argument);
}

TEST(Model, V6RespondsToLidar) {
    const Tensor img = random_image(20);
    const Tensor lid = random_image(21);
    Tensor zeros = lid;
    zeros.fill(0.0f);
    for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        Model m(ArchitectureConfig::for_variant(Variant::V6, 4), seed);
        SegmentationOutput a = m.infer(img, &lid);
        SegmentationOutput b = m.infer(img, &zeros);
        bool differs = false;
        for (int64_t i = 0; i < a.lane_logprob.numel() && !differs; ++i)
            differs = a.lane_logprob[i] != b.lane_logprob[i];
        EXPECT_TRUE(differs) << "seed " << seed;
    }
}

TEST(Model, InferenceDeterministic) {
    const Tensor img = random_image(30);
    const Tensor lid = random_image(31);
    Model m(ArchitectureConfig::for_variant(Variant::V6, 4), 7);
    SegmentationOutput a = m.infer(img, &lid);
    SegmentationOutput b = m.infer(img, &lid);
    ASSERT_EQ(a.lane_logprob.numel(), b.lane_logprob.numel());
    EXPECT_EQ(std::memcmp(a.lane_logprob.data(), b.lane_logprob.data(),
                          sizeof(float) * a.lane_logprob.numel()),
              0);
}

TEST(Model, CheckpointRoundTrip) {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "lf_ckpt_test.ckpt").string();
    Model m(ArchitectureConfig::for_variant(Variant::V3r, 4), 42);
    m.save(path);
    Model m2 = Model::load(path);
    EXPECT_EQ(m2.config().variant, Variant::V3r);
    ASSERT_EQ(m.parameters().size(), m2.parameters().size());
    for (size_t i = 0; i < m.parameters().size(); ++i) {
        const Tensor& a = m.parameters()[i].var->value;
        const Tensor& b = m2.parameters()[i].var->value;
        ASSERT_EQ(a.shape(), b.shape());
        EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()), 0)
            << m.parameters()[i].name;
    }
    const Tensor img = random_image(40);
    const Tensor lid = random_image(41);
    SegmentationOutput oa = m.infer(img, &lid);
    SegmentationOutput ob = m2.infer(img, &lid);
    EXPECT_EQ(std::memcmp(oa.lane_logprob.data(), ob.lane_logprob.data(),
                          sizeof(float) * oa.lane_logprob.numel()),
              0);
    fs::remove(path);
}

TEST(FuseBlocks, ConcatFuseShapeAndZeroWeightCollapse) {
    ParamRegistry reg;
    Rng rng(5);
    FuseBlock f = FuseBlock::make(reg, "f", 16, false, rng);
    Tensor ta = random_feat(rng, {1, 16, 8, 8});
    Tensor tb = random_feat(rng, {1, 16, 8, 8});
    Var out = f(make_leaf(ta), make_leaf(tb), true);
    EXPECT_EQ(out->value.shape(), (std::vector<int>{1, 16, 8, 8}));

    // zero the fusion convolution: the output collapses to the shift parameter
    f.conv.w->value.fill(0.0f);
    for (int64_t i = 0; i < 16; ++i) f.bn.beta->value[i] = 0.3f;
    Var collapsed = f(make_leaf(ta), make_leaf(tb), true);
    for (int64_t i = 0; i < collapsed->value.numel(); ++i)
        ASSERT_NEAR(collapsed->value[i], 0.3f, 1e-6);
}

TEST(FuseBlocks, ConcatFuseGradientReachesBothInputs) {
    ParamRegistry reg;
    Rng rng(6);
    FuseBlock f = FuseBlock::make(reg, "f", 8, false, rng);
    Var a = make_leaf(random_feat(rng, {1, 8, 6, 6}), true);
    Var b = make_leaf(random_feat(rng, {1, 8, 6, 6}), true);
    backward(sum_all(f(a, b, true)));
    double ga = 0, gb = 0;
    for (int64_t i = 0; i < a->value.numel(); ++i) {
        ga += std::abs(a->grad[i]);
        gb += std::abs(b->grad[i]);
    }
    EXPECT_GT(ga, 1e-8);
    EXPECT_GT(gb, 1e-8);
}

TEST(FuseBlocks, AdaptiveParamCountBeatsConcat) {
    for (int c : {3, 8, 16, 32}) {
        ParamRegistry reg;
        Rng rng(7);
        FuseBlock::make(reg, "f", c, true, rng);
        const int64_t adaptive_params = reg.num_params();
        const int64_t expect = 2 * c * 9 + 2 * c * c + 2 * c;  // depthwise + pointwise + norm
        EXPECT_EQ(adaptive_params, expect) << "c=" << c;
        EXPECT_LT(adaptive_params, 2 * c * c * 9) << "c=" << c;
    }
}

TEST(FuseBlocks, AdaptiveIsAsymmetric) {
    for (uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
        ParamRegistry reg;
        Rng rng(seed);
        FuseBlock f = FuseBlock::make(reg, "f", 8, true, rng);
        Tensor ta = random_feat(rng, {1, 8, 6, 6});
        Tensor tb = random_feat(rng, {1, 8, 6, 6});
        Var ab = f(make_leaf(ta), make_leaf(tb), true);
        Var ba = f(make_leaf(tb), make_leaf(ta), true);
        bool differs = false;
        for (int64_t i = 0; i < ab->value.numel() && !differs; ++i)
            differs = std::abs(ab->value[i] - ba->value[i]) > 1e-6f;
        EXPECT_TRUE(differs) << "seed " << seed;
    }
}

TEST(MultitaskCombine, HandValuesAndIdentity) {
    Tensor lane({2, 2}), road({2, 2});
    Rng rng(8);
    for (int64_t i = 0; i < 4; ++i) {
        lane[i] = static_cast<float>(rng.uniform());
        road[i] = static_cast<float>(rng.uniform());
    }
    // k = 1 reduces to the lane probability bitwise
    Tensor out = multitask_combine(lane, road, 1.0f);
    for (int64_t i = 0; i < 4; ++i) EXPECT_EQ(out[i], lane[i]);

    EXPECT_FLOAT_EQ(multitask_combine_scalar(0.9f, 0.5f, 0.5f), 0.675f);

    Tensor zero_road({2, 2});
    Tensor gated = multitask_combine(lane, zero_road, 0.0f);
    for (int64_t i = 0; i < 4; ++i) EXPECT_EQ(gated[i], 0.0f);
}

TEST(MultitaskCombine, KGradientMatchesFiniteDifferences) {
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
        const double lane = rng.uniform(0.01, 0.99);
        const double road = rng.uniform(0.01, 0.99);
        const double k = rng.uniform(0.05, 0.95);
        const double h = 1e-6;
        const double fd =
            (lane * (k + h + (1 - k - h) * road) - lane * (k - h + (1 - k + h) * road)) / (2 * h);
        const double analytic =
            multitask_combine_dk(static_cast<float>(lane), static_cast<float>(road));
        EXPECT_NEAR(analytic, fd, 1e-5 * std::max(1.0, std::abs(fd)));
    }
}

TEST(MultitaskCombine, Monotonicity) {
    Rng rng(12);
    for (int i = 0; i < 200; ++i) {
        const float lane = static_cast<float>(rng.uniform());
        const float road = static_cast<float>(rng.uniform());
        const float k = static_cast<float>(rng.uniform());
        const float d = 0.05f;
        EXPECT_LE(multitask_combine_scalar(lane, road, k),
                  multitask_combine_scalar(std::min(1.0f, lane + d), road, k) + 1e-7f);
        EXPECT_LE(multitask_combine_scalar(lane, road, std::min(k, 0.99f)),
                  multitask_combine_scalar(lane, std::min(1.0f, road + d), std::min(k, 0.99f)) +
                      1e-7f);
    }
}

TEST(MaskModality, AllCases) {
    Tensor img({3, 2, 2}, 0.5f), lid({3, 2, 2}, 0.25f);
    auto [i0, l0] = mask_modality(img, lid, ModalityMask::None);
    EXPECT_EQ(std::memcmp(i0.data(), img.data(), sizeof(float) * img.numel()), 0);
    EXPECT_EQ(std::memcmp(l0.data(), lid.data(), sizeof(float) * lid.numel()), 0);
    auto [i1, l1] = mask_modality(img, lid, ModalityMask::Lidar);
    EXPECT_EQ(std::memcmp(i1.data(), img.data(), sizeof(float) * img.numel()), 0);
    for (int64_t i = 0; i < l1.numel(); ++i) EXPECT_EQ(l1[i], 0.0f);
    auto [i2, l2] = mask_modality(i1, l1, ModalityMask::Image);  // compose: both zero
    for (int64_t i = 0; i < i2.numel(); ++i) EXPECT_EQ(i2[i], 0.0f);
    for (int64_t i = 0; i < l2.numel(); ++i) EXPECT_EQ(l2[i], 0.0f);
}
