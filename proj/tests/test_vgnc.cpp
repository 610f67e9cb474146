#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "test_support.hpp"
#include "vgnc/synth.hpp"
#include "vgnc/vgnc.hpp"

using namespace vgnc;
using namespace vgnc::testing;

namespace {

GaussianCloud tiny_cloud(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-0.5, 0.5), u01(0.0, 1.0);
    GaussianCloud c;
    for (std::size_t i = 0; i < n; ++i) {
        Gaussian3D g;
        g.mean = Vec3(u(rng), u(rng), u(rng));
        g.log_scale = Vec3::Constant(std::log(0.05 + 0.1 * u01(rng)));
        g.rotation = Vec4(1 + u(rng), u(rng), u(rng), u(rng)).normalized();
        g.opacity_logit = logit(0.3 + 0.6 * u01(rng));
        g.color = Vec3(u01(rng), u01(rng), u01(rng));
        c.push_back(g);
    }
    return c;
}

// Brute-force restatement: count trailing strict rises.
bool overfit_oracle(const std::vector<double>& m, std::size_t w) {
    std::size_t rises = 0;
    for (std::size_t i = 1; i < m.size(); ++i) rises = m[i] > m[i - 1] ? rises + 1 : 0;
    return rises >= w;
}

} // namespace

// ---------------------------------------------------------------- loss

TEST(TrainingLoss, IdenticalImagesGiveZero) {
    std::mt19937_64 rng(60);
    const Image a = random_image(rng, 16, 12, 3, 0.0, 1.0);
    for (double lambda : {0.0, 0.2, 0.9}) EXPECT_NEAR(training_loss(a, a, lambda).value, 0.0, 1e-12);
}

TEST(TrainingLoss, UniformOffsetL1) {
    Image a(8, 8, 3, 0.4), b(8, 8, 3, 0.5);
    EXPECT_NEAR(training_loss(a, b, 0.0, 1.0).value, 0.1, 1e-12);
    EXPECT_NEAR(training_loss(a, b, 0.0, 3.0).value, 0.3, 1e-12);
    EXPECT_THROW(training_loss(a, Image(8, 7, 3), 0.2), Error);
}

TEST(TrainingLoss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(61);
    const Image t = random_image(rng, 14, 13, 3, 0.0, 1.0);
    Image r = random_image(rng, 14, 13, 3, 0.0, 1.0);
    const double h = 1e-5;
    for (double& v : r.data())  // keep every entry away from the L1 kink
        if (std::abs(v - t.data()[&v - r.data().data()]) < 10 * h) v += 20 * h;
    for (double scale : {1.0, 2.5}) {
        const auto res = training_loss(r, t, 0.2, scale);
        double worst = 0.0;
        for (std::size_t i = 0; i < r.size(); i += 7) {
            auto f = [&](double d) {
                Image p = r;
                p.data()[i] += d;
                return training_loss(p, t, 0.2, scale).value;
            };
            const double num = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
            worst = std::max(worst, relative_error(res.grad.data()[i], num));
        }
        EXPECT_LT(worst, 1e-4) << "loss_scale " << scale;
    }
}

// ---------------------------------------------------------------- optimizer

TEST(Optimizer, ZeroGradientsLeaveParametersUnchanged) {
    std::mt19937_64 rng(62);
    GaussianCloud c = tiny_cloud(5, rng);
    const GaussianCloud before = c;
    CloudGradients g(c.size());
    AdamState st(c.size());
    for (int i = 0; i < 3; ++i) optimizer_step(c, g, st, TrainConfig{}, 0.01);
    for (std::size_t i = 0; i < c.size(); ++i) {
        EXPECT_EQ(c.means[i], before.means[i]);
        EXPECT_EQ(c.colors[i], before.colors[i]);
        EXPECT_EQ(c.opacity_logits[i], before.opacity_logits[i]);
        EXPECT_NEAR((c.rotations[i] - before.rotations[i]).norm(), 0.0, 1e-15);
    }
}

TEST(Optimizer, ZeroLearningRateLeavesParametersUnchanged) {
    std::mt19937_64 rng(63);
    GaussianCloud c = tiny_cloud(4, rng);
    const GaussianCloud before = c;
    CloudGradients g(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        g.means[i] = Vec3(1, -2, 3);
        g.log_scales[i] = Vec3(0.5, 0.5, 0.5);
        g.rotations[i] = Vec4(1, 1, 1, 1);
        g.opacity_logits[i] = -1;
        g.colors[i] = Vec3(2, 2, 2);
    }
    TrainConfig cfg;
    cfg.lr = {0, 0, 0, 0, 0, 0};
    AdamState st(c.size());
    optimizer_step(c, g, st, cfg, 0.0);
    for (std::size_t i = 0; i < c.size(); ++i) {
        EXPECT_EQ(c.means[i], before.means[i]);
        EXPECT_EQ(c.log_scales[i], before.log_scales[i]);
        EXPECT_NEAR((c.rotations[i] - before.rotations[i]).norm(), 0.0, 1e-15);
    }
}

TEST(Optimizer, ToyQuadraticConverges) {
    double x = 0.0, m = 0.0, v = 0.0;
    for (std::size_t step = 1; step <= 500; ++step) {
        const double g = 2 * (x - 3);
        adam_update({&x, 1}, {&g, 1}, {&m, 1}, {&v, 1}, step, 0.1, AdamHyper{0.9, 0.999, 1e-8});
    }
    EXPECT_NEAR(x, 3.0, 1e-3);
}

TEST(Optimizer, QuaternionsRenormalizedAndStateChecked) {
    std::mt19937_64 rng(64);
    GaussianCloud c = tiny_cloud(6, rng);
    CloudGradients g(c.size());
    for (auto& q : g.rotations) q = Vec4(0.3, -1, 2, 0.5);
    AdamState st(c.size());
    TrainConfig cfg;
    cfg.lr.rotation = 0.2;
    optimizer_step(c, g, st, cfg, 0.0);
    for (const auto& q : c.rotations) EXPECT_NEAR(q.norm(), 1.0, 1e-12);
    AdamState bad(c.size() + 1);
    EXPECT_THROW(optimizer_step(c, g, bad, cfg, 0.0), Error);
}

// ---------------------------------------------------------------- densify / dropout

TEST(Densify, CapHaltsGrowth) {
    std::mt19937_64 rng(65);
    GaussianCloud c = tiny_cloud(10, rng);
    DensifyStats stats(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        stats.grad_accum[i] = 1.0;
        stats.touches[i] = 1;
    }
    AdamState st(c.size());
    TrainConfig cfg;
    cfg.prune_opacity = 0.0;
    const auto r = densify_and_prune(c, stats, st, cfg, 10, 1.0, rng);
    EXPECT_EQ(c.size(), 10u);
    EXPECT_EQ(r.cloned + r.split, 0u);
}

TEST(Densify, SmallGaussianIsCloned) {
    std::mt19937_64 rng(66);
    GaussianCloud c = tiny_cloud(3, rng);
    for (auto& s : c.log_scales) s = Vec3::Constant(std::log(0.001));
    DensifyStats stats(c.size());
    stats.grad_accum[1] = 0.001;
    stats.touches[1] = 2; // mean 0.0005 > 0.0002
    stats.grad_accum[2] = 0.0003;
    stats.touches[2] = 3; // mean 0.0001, below
    AdamState st(c.size());
    st.m[1][0] = 7.0;
    TrainConfig cfg;
    const auto r = densify_and_prune(c, stats, st, cfg, std::numeric_limits<std::size_t>::max(), 1.0, rng);
    ASSERT_EQ(c.size(), 4u);
    EXPECT_EQ(r.cloned, 1u);
    EXPECT_EQ(c.means[3], c.means[1]);
    EXPECT_EQ(st.size(), 4u);
    EXPECT_EQ(st.m[1][0], 7.0); // the original keeps its moments
    EXPECT_EQ(st.m[3][0], 0.0); // the clone starts fresh
    EXPECT_EQ(stats.size(), 4u);
}

TEST(Densify, LargeGaussianIsSplit) {
    std::mt19937_64 rng(67);
    GaussianCloud c = tiny_cloud(1, rng);
    c.log_scales[0] = Vec3(std::log(0.2), std::log(0.1), std::log(0.05));
    const Vec3 before = c.log_scales[0];
    DensifyStats stats(1);
    stats.grad_accum[0] = 1;
    stats.touches[0] = 1;
    AdamState st(1);
    st.m[0].fill(3.0);
    st.v[0].fill(5.0);
    const auto r = densify_and_prune(c, stats, st, TrainConfig{}, 100, 1.0, rng);
    ASSERT_EQ(c.size(), 2u);
    EXPECT_EQ(r.split, 1u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(st.m[i], ParamRow{});
        EXPECT_EQ(st.v[i], ParamRow{});
    }
    for (std::size_t i = 0; i < 2; ++i)
        EXPECT_NEAR((c[i].scale() - before.array().exp().matrix() / 1.6).norm(), 0.0, 1e-12);
    EXPECT_NE(c.means[0], c.means[1]);
}

TEST(Densify, CandidatesAdmittedByDescendingGradient) {
    std::mt19937_64 rng(68);
    GaussianCloud c = tiny_cloud(4, rng);
    for (auto& s : c.log_scales) s = Vec3::Constant(std::log(0.001));
    DensifyStats stats(4);
    const double grads[] = {0.001, 0.004, 0.0005, 0.003};
    for (std::size_t i = 0; i < 4; ++i) {
        stats.grad_accum[i] = grads[i];
        stats.touches[i] = 1;
    }
    AdamState st(4);
    densify_and_prune(c, stats, st, TrainConfig{}, 6, 1.0, rng);
    ASSERT_EQ(c.size(), 6u);
    EXPECT_EQ(c.means[4], c.means[1]);
    EXPECT_EQ(c.means[5], c.means[3]);
}

TEST(Densify, TransparentGaussianIsPruned) {
    std::mt19937_64 rng(69);
    GaussianCloud c = tiny_cloud(5, rng);
    c.opacity_logits[2] = logit(0.001);
    const Vec3 kept = c.means[3];
    DensifyStats stats(5);
    AdamState st(5);
    st.v[3][0] = 4.0;
    const auto r = densify_and_prune(c, stats, st, TrainConfig{}, 100, 1.0, rng);
    EXPECT_EQ(r.pruned, 1u);
    ASSERT_EQ(c.size(), 4u);
    EXPECT_EQ(c.means[2], kept);
    EXPECT_EQ(st.v[2][0], 4.0);
    EXPECT_TRUE(c.consistent());
}

TEST(Densify, MisalignedStatsThrow) {
    std::mt19937_64 rng(70);
    GaussianCloud c = tiny_cloud(3, rng);
    DensifyStats stats(2);
    AdamState st(3);
    EXPECT_THROW(densify_and_prune(c, stats, st, TrainConfig{}, 10, 1.0, rng), Error);
}

TEST(Dropout, ExactCountSubsetAndDeterminism) {
    std::mt19937_64 rng(71);
    const GaussianCloud orig = tiny_cloud(100, rng);
    GaussianCloud a = orig, b = orig;
    AdamState sa(100), sb(100);
    for (std::size_t i = 0; i < 100; ++i) sa.m[i][0] = sb.m[i][0] = static_cast<double>(i);
    gaussian_dropout(a, sa, 40, 99);
    gaussian_dropout(b, sb, 40, 99);
    ASSERT_EQ(a.size(), 40u);
    ASSERT_EQ(sa.size(), 40u);
    for (std::size_t i = 0; i < 40; ++i) {
        const auto src = static_cast<std::size_t>(sa.m[i][0]);
        EXPECT_EQ(a.means[i], orig.means[src]);
        EXPECT_EQ(a.means[i], b.means[i]);
        if (i) EXPECT_LT(sa.m[i - 1][0], sa.m[i][0]);
    }
    EXPECT_NE(dropout_survivors(100, 40, 1), dropout_survivors(100, 40, 2));
}

TEST(Dropout, TargetAtOrAboveCountIsNoOp) {
    std::mt19937_64 rng(72);
    GaussianCloud c = tiny_cloud(10, rng);
    const GaussianCloud before = c;
    AdamState st(10);
    gaussian_dropout(c, st, 10, 3);
    gaussian_dropout(c, st, 50, 3);
    EXPECT_EQ(c.means, before.means);
}

TEST(Dropout, SurvivorsAreUniform) {
    // Each index survives with probability k/n; check counts over many seeds.
    const std::size_t n = 10, k = 3, trials = 20000;
    std::vector<int> hits(n, 0);
    for (std::size_t s = 0; s < trials; ++s)
        for (auto i : dropout_survivors(n, k, s)) ++hits[i];
    const double expect = static_cast<double>(trials * k) / n, sd = std::sqrt(expect * (1 - 0.3));
    for (int h : hits) EXPECT_NEAR(h, expect, 5 * sd);
}

TEST(Dropout, RemovingTransparentGaussiansKeepsRender) {
    std::mt19937_64 rng(73);
    auto f = make_splat_fixture(rng, 8);
    GaussianCloud c = f.cloud;
    for (int i = 0; i < 8; ++i) {
        Gaussian3D g = c[static_cast<std::size_t>(i)];
        g.opacity_logit = -40;
        c.push_back(g);
    }
    std::vector<std::size_t> keep(8);
    std::iota(keep.begin(), keep.end(), 0);
    GaussianCloud d = c;
    d.select(keep);
    const Image a = render(c, f.view, f.settings), b = render(d, f.view, f.settings);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-6);
}

// ---------------------------------------------------------------- monitor

TEST(Monitor, Examples) {
    std::mt19937_64 rng(74);
    auto f = make_splat_fixture(rng, 6);
    const Image r = render(f.cloud, f.view, f.settings);
    const std::vector<ValidationView> exact{{&r, f.view}};
    EXPECT_EQ(validation_monitor(f.cloud, exact, f.settings), 0.0);

    Image shifted = r;
    for (double& v : shifted.data()) v += 0.1;
    const std::vector<ValidationView> one{{&shifted, f.view}};
    EXPECT_NEAR(validation_monitor(f.cloud, one, f.settings), 0.01, 1e-12);

    const Image noisy = random_image(rng, r.width(), r.height(), 3, 0.0, 1.0);
    const std::vector<ValidationView> two{{&shifted, f.view}, {&noisy, f.view}};
    EXPECT_NEAR(validation_monitor(f.cloud, two, f.settings), (0.01 + mse(noisy, r)) / 2, 1e-12);
    EXPECT_THROW(validation_monitor(f.cloud, std::span<const ValidationView>{}, f.settings), Error);
}

TEST(Monitor, LogLinkedToPooledPsnr) {
    std::mt19937_64 rng(75);
    for (int trial = 0; trial < 5; ++trial) {
        auto f = make_splat_fixture(rng, 10);
        std::vector<Image> targets;
        for (int k = 0; k < 3; ++k) targets.push_back(random_image(rng, 24, 24, 3, 0.0, 1.0));
        std::vector<ValidationView> views;
        for (const auto& t : targets) views.push_back({&t, f.view});
        const Image r = render(f.cloud, f.view, f.settings);
        // Equal-sized views: pooled MSE over the concatenation is the mean of per-view MSEs.
        double se = 0;
        std::size_t n = 0;
        for (const auto& t : targets)
            for (std::size_t i = 0; i < t.size(); ++i, ++n) se += (t.data()[i] - r.data()[i]) * (t.data()[i] - r.data()[i]);
        const double m = validation_monitor(f.cloud, views, f.settings);
        EXPECT_NEAR(-10 * std::log10(m), psnr_from_mse(se / n), 1e-9);
    }
}

TEST(DetectOverfit, Examples) {
    EXPECT_FALSE(detect_overfit(std::vector<double>{0.5, 0.4, 0.3}, 3));
    EXPECT_TRUE(detect_overfit(std::vector<double>{0.30, 0.31, 0.32, 0.33}, 3));
    EXPECT_FALSE(detect_overfit(std::vector<double>{0.30, 0.31, 0.29, 0.31, 0.32}, 3));
    EXPECT_FALSE(detect_overfit(std::vector<double>{0.30, 0.30, 0.31, 0.32}, 3));
}

TEST(DetectOverfit, AgreesWithTrailingRiseCount) {
    std::mt19937_64 rng(76);
    std::uniform_int_distribution<int> d(0, 3);
    for (int trial = 0; trial < 2000; ++trial) {
        std::vector<double> m(1 + rng() % 8);
        for (auto& v : m) v = d(rng);
        for (std::size_t w = 1; w <= 4; ++w) ASSERT_EQ(detect_overfit(m, w), overfit_oracle(m, w));
    }
}

TEST(MonitorTrace, TracksMinimumAndCoRecordedCount) {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(0, 1);
    MonitorTrace t;
    double best = 1e9;
    std::size_t best_n = 0;
    for (std::size_t it = 1; it <= 40; ++it) {
        MonitorRecord r;
        r.iteration = it * 10;
        r.gaussian_count = 100 + it;
        r.monitor = u(rng);
        r.phase = it < 30 ? Phase::grow : Phase::refine;
        t.add(r);
        if (r.monitor < best) {
            best = r.monitor;
            best_n = r.gaussian_count;
        }
        EXPECT_EQ(t.m_opt(), best);
        EXPECT_EQ(t.num_opt(), best_n);
    }
    MonitorRecord stale;
    stale.iteration = 400;
    EXPECT_THROW(t.add(stale), Error);
}

// ---------------------------------------------------------------- control loop

namespace {

struct LoopFixture {
    SynthScene scene;
    GaussianCloud init;
};

const LoopFixture& loop_fixture() {
    static const LoopFixture f = [] {
        SynthConfig c;
        c.gaussian_count = 80;
        c.width = c.height = 32;
        c.train_views = 4;
        c.test_views = 2;
        c.generated_views = 3;
        c.noisy_fraction = c.patch_fraction = 0;
        c.seed = 11;
        LoopFixture out{make_synthetic_scene(c), {}};
        std::mt19937_64 rng(12);
        std::normal_distribution<double> n(0, 0.05);
        for (std::size_t i = 0; i < out.scene.ground_truth.size(); i += 3) {
            Gaussian3D g = out.scene.ground_truth[i];
            g.mean += Vec3(n(rng), n(rng), n(rng));
            g.color = Vec3::Constant(0.5);
            g.opacity_logit = logit(0.1);
            out.init.push_back(g);
        }
        return out;
    }();
    return f;
}

TrainViews views_of(const SynthScene& s) {
    TrainViews v;
    for (const auto& x : s.scene.train) v.train.push_back({&x.image, x.camera});
    for (const auto& x : s.scene.generated) v.validation.push_back({&x.image, x.camera});
    for (const auto& x : s.scene.test) v.test.push_back({&x.image, x.camera});
    return v;
}

TrainConfig loop_config() {
    TrainConfig c;
    c.total_iterations = 400;
    c.densify_from = 50;
    c.densify_until = 250;
    c.densify_interval = 50;
    c.validation_interval = 25;
    c.grad_threshold = 0.00005;
    c.seed = 5;
    return c;
}

} // namespace

TEST(VgncTrain, ControllerContracts) {
    const auto& f = loop_fixture();
    const auto views = views_of(f.scene);
    std::size_t checkpoints = 0;
    auto cfg = loop_config();
    cfg.checkpoint_interval = 100;
    const auto res = vgnc_train(views, f.init, cfg, [&](std::size_t it, const GaussianCloud& c, const AdamState& s, const MonitorTrace&) {
        EXPECT_EQ(it % 100, 0u);
        EXPECT_EQ(c.size(), s.size());
        ++checkpoints;
    });
    EXPECT_EQ(checkpoints, 4u);
    ASSERT_TRUE(res.chosen_count.has_value());
    EXPECT_LE(res.cloud.size(), *res.chosen_count);
    EXPECT_EQ(res.controller.cap, *res.chosen_count);
    EXPECT_EQ(res.controller.phase, Phase::refine);
    EXPECT_EQ(res.optimizer.size(), res.cloud.size());

    const auto& recs = res.trace.records();
    ASSERT_EQ(recs.size(), 16u);
    double m_min = 1e9;
    std::size_t n_at_min = 0;
    int last_phase = 0;
    for (const auto& r : recs) {
        EXPECT_LE(r.gaussian_count, r.cap);
        EXPECT_TRUE(r.test_psnr.has_value());
        EXPECT_GE(static_cast<int>(r.phase), last_phase);
        last_phase = static_cast<int>(r.phase);
        if (r.monitor < m_min) {
            m_min = r.monitor;
            n_at_min = r.gaussian_count;
        }
    }
    EXPECT_EQ(res.trace.m_opt(), m_min);
    EXPECT_EQ(res.trace.num_opt(), n_at_min);
    // Training helps: the last monitor beats the first.
    EXPECT_LT(recs.back().monitor, recs.front().monitor);
}

TEST(VgncTrain, WithoutNumberControlNoDropout) {
    const auto& f = loop_fixture();
    auto cfg = loop_config();
    cfg.number_control = false;
    const auto res = vgnc_train(views_of(f.scene), f.init, cfg);
    EXPECT_FALSE(res.chosen_count.has_value());
    for (const auto& r : res.trace.records()) EXPECT_EQ(r.phase, Phase::grow);
}

TEST(VgncTrain, SeededRunWithoutDensificationIsBitReproducible) {
    const auto& f = loop_fixture();
    auto cfg = loop_config();
    cfg.total_iterations = 60;
    cfg.densify_from = 1000;
    cfg.densify_until = 1000;
    const auto a = vgnc_train(views_of(f.scene), f.init, cfg);
    const auto b = vgnc_train(views_of(f.scene), f.init, cfg);
    EXPECT_EQ(a.cloud.means, b.cloud.means);
    EXPECT_EQ(a.cloud.colors, b.cloud.colors);
    EXPECT_EQ(a.cloud.opacity_logits, b.cloud.opacity_logits);
}

TEST(VgncTrain, InitialCloudAboveCapIsDroppedFirst) {
    const auto& f = loop_fixture();
    auto cfg = loop_config();
    cfg.total_iterations = 25;
    cfg.count_cap_initial = 10;
    const auto res = vgnc_train(views_of(f.scene), f.init, cfg);
    EXPECT_LE(res.trace.records().front().gaussian_count, 10u);
}

TEST(VgncTrain, FixedCapBoundsCountWithoutNumberControl) {
    const auto& f = loop_fixture();
    auto cfg = loop_config();
    cfg.number_control = false;
    cfg.count_cap_initial = 5; // ignored without number control
    cfg.fixed_cap = 10;
    const auto res = vgnc_train(views_of(f.scene), f.init, cfg);
    EXPECT_LE(res.cloud.size(), 10u);
    EXPECT_EQ(res.trace.records().front().gaussian_count, std::min<std::size_t>(10, f.init.size()));
}

TEST(VgncTrain, Preconditions) {
    const auto& f = loop_fixture();
    auto views = views_of(f.scene);
    views.validation.clear();
    EXPECT_THROW(vgnc_train(views, f.init, loop_config()), Error);
    auto cfg = loop_config();
    cfg.validation_interval = 0;
    EXPECT_THROW(vgnc_train(views_of(f.scene), f.init, cfg), Error);
    cfg = loop_config();
    cfg.loss_dssim_weight = 1.0;
    EXPECT_THROW(vgnc_train(views_of(f.scene), f.init, cfg), Error);
}
