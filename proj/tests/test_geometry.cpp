#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"
#include "vgnc/geometry.hpp"

using namespace vgnc;
using vgnc::testing::direction_angle;
using vgnc::testing::make_two_view;
using vgnc::testing::random_rotation;
using vgnc::testing::rotation_angle;

namespace {

const CameraIntrinsics kSmall{100, 100, 50, 50, 100, 100};

template <class F>
Errc error_code(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an error";
    return Errc::io;
}

} // namespace

TEST(ProjectPoint, OnAxisHitsPrincipalPoint) {
    const auto p = project_point({0, 0, 5}, {kSmall, Pose{}});
    EXPECT_DOUBLE_EQ(p.pixel.x(), 50.0);
    EXPECT_DOUBLE_EQ(p.pixel.y(), 50.0);
    EXPECT_DOUBLE_EQ(p.depth, 5.0);
}

TEST(ProjectPoint, OffAxis) {
    const auto p = project_point({1, 0, 5}, {kSmall, Pose{}});
    EXPECT_DOUBLE_EQ(p.pixel.x(), 70.0);
    EXPECT_DOUBLE_EQ(p.pixel.y(), 50.0);
}

TEST(ProjectPoint, BehindCameraThrows) {
    EXPECT_EQ(error_code([] { project_point({0, 0, -1}, {kSmall, Pose{}}); }), Errc::point_behind_camera);
}

TEST(ProjectPoint, ScaleCovariantInNormalizedCoordinates) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int i = 0; i < 50; ++i) {
        const Vec3 x(u(rng), u(rng), 3 + u(rng));
        const double s = 0.5 + std::abs(u(rng)) * 3;
        const CameraIntrinsics k1{80, 90, 40, 30, 81, 61};
        const CameraIntrinsics k2{80 * s, 90 * s, 40 * s, 30 * s, static_cast<int>(81 * s) + 1, static_cast<int>(61 * s) + 1};
        const auto p1 = project_point(x, {k1, Pose{}}).pixel;
        const auto p2 = project_point(x, {k2, Pose{}}).pixel;
        EXPECT_NEAR((k1.normalized(p1) - k2.normalized(p2)).norm(), 0.0, 1e-12);
    }
}

TEST(EssentialFromPose, ZAxisTranslation) {
    Pose p;
    p.translation = {0, 0, 1};
    Mat3 expected;
    expected << 0, -1, 0, 1, 0, 0, 0, 0, 0;
    EXPECT_TRUE(essential_from_pose(p).e.isApprox(expected));
}

TEST(EssentialFromPose, ZeroBaselineThrows) {
    EXPECT_EQ(error_code([] { essential_from_pose(Pose{}); }), Errc::degenerate_baseline);
}

TEST(EssentialFromPose, EpipolarConstraintHoldsForRandomPoses) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto f = make_two_view(rng, 50);
        const Mat3 e = essential_from_pose(f.rel).e;
        double worst = 0.0;
        for (const auto& c : f.corrs)
            worst = std::max(worst, std::abs(f.k.normalized(c.pixel_b).dot(e * f.k.normalized(c.pixel_a))));
        EXPECT_LT(worst, 1e-10);
    }
}

TEST(DecomposeEssential, RecoversForwardMotion) {
    Pose truth;
    truth.translation = {0, 0, 1};
    std::vector<Correspondence> corrs;
    const CameraView va{kSmall, Pose{}}, vb{kSmall, truth};
    for (const Vec3& x : {Vec3(0.5, 0.2, 4), Vec3(-0.4, 0.3, 5), Vec3(0.1, -0.6, 6), Vec3(-0.3, -0.2, 3)})
        corrs.push_back({project_point(x, va).pixel, project_point(x, vb).pixel});
    const Pose got = decompose_essential(essential_from_pose(truth), corrs, kSmall);
    EXPECT_LT((got.rotation - Mat3::Identity()).norm(), 1e-6);
    EXPECT_LT((got.translation - Vec3(0, 0, 1)).norm(), 1e-6);
}

TEST(DecomposeEssential, RecoversRandomPoses) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto f = make_two_view(rng, 100);
        const Pose got = decompose_essential(essential_from_pose(f.rel), f.corrs, f.k);
        EXPECT_TRUE(got.is_valid());
        EXPECT_NEAR(got.translation.norm(), 1.0, 1e-12);
        EXPECT_LT(rotation_angle(got.rotation, f.rel.rotation), 1e-6);
        EXPECT_LT(direction_angle(got.translation, f.rel.translation), 1e-6);
    }
}

TEST(DecomposeEssential, EmptyCorrespondencesThrows) {
    Pose p;
    p.translation = {0, 0, 1};
    const auto e = essential_from_pose(p);
    EXPECT_EQ(error_code([&] { decompose_essential(e, {}, kSmall); }), Errc::precondition);
}

TEST(DecomposeEssential, RankThreeRejected) {
    EssentialMatrix e{Mat3::Identity()};
    const std::vector<Correspondence> c{{Vec2(50, 50), Vec2(50, 50)}};
    EXPECT_EQ(error_code([&] { decompose_essential(e, c, kSmall); }), Errc::invalid_essential);
}

TEST(DecomposeEssential, ManifoldProjectionHasEqualSingularValues) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n;
    for (int i = 0; i < 20; ++i) {
        Mat3 m;
        for (int k = 0; k < 9; ++k) m(k / 3, k % 3) = n(rng);
        const Mat3 e = project_to_essential_manifold(m);
        Eigen::JacobiSVD<Mat3> svd(e);
        const Vec3 s = svd.singularValues();
        EXPECT_LT(s[2] / s[0], 1e-6);
        EXPECT_NEAR(s[0], s[1], 1e-6 * s[0]);
    }
}

TEST(Triangulate, HandExample) {
    Pose pb;
    pb.translation = {-1, 0, 0};
    const Vec3 x = triangulate({Vec2(50, 50), Vec2(30, 50)}, {kSmall, Pose{}}, {kSmall, pb});
    EXPECT_LT((x - Vec3(0, 0, 5)).norm(), 1e-6);
}

TEST(Triangulate, IdenticalViewsThrow) {
    EXPECT_EQ(error_code([] { triangulate({Vec2(50, 50), Vec2(50, 50)}, {kSmall, Pose{}}, {kSmall, Pose{}}); }),
              Errc::degenerate_triangulation);
}

TEST(Triangulate, InvertsProjection) {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(-1, 1);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const CameraIntrinsics k{300, 300, 160, 120, 320, 240};
        Pose pa, pb;
        pa.rotation = random_rotation(rng, 0.3);
        pa.translation = Vec3(u(rng), u(rng), u(rng)) * 0.3;
        pb.rotation = random_rotation(rng, 0.3);
        pb.translation = Vec3(1.0 + u(rng) * 0.2, u(rng) * 0.2, u(rng) * 0.2);
        const CameraView va{k, pa}, vb{k, pb};
        const Vec3 x = pa.inverse().apply(Vec3(u(rng), u(rng), 6 + u(rng)));
        if (pa.apply(x).z() <= 0.5 || pb.apply(x).z() <= 0.5) continue;
        const Vec3 got = triangulate({project_point(x, va).pixel, project_point(x, vb).pixel}, va, vb);
        worst = std::max(worst, (got - x).norm());
    }
    EXPECT_LT(worst, 1e-8);
}

TEST(Pose, QuaternionRoundTrip) {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 20; ++i) {
        const Mat3 r = random_rotation(rng, 3.0);
        const auto q = quaternion_from_rotation(r);
        EXPECT_LT((rotation_from_quaternion(q[0], q[1], q[2], q[3]) - r).norm(), 1e-12);
    }
}

TEST(Pose, LookAtIsValidAndCentersTarget) {
    const Pose p = look_at({3, -1, -4}, {0, 0, 0});
    EXPECT_TRUE(p.is_valid());
    const auto proj = project_point({0, 0, 0}, {kSmall, p});
    EXPECT_NEAR(proj.pixel.x(), 50.0, 1e-9);
    EXPECT_NEAR(proj.pixel.y(), 50.0, 1e-9);
}
