#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "vgnc/io.hpp"
#include "vgnc/metrics.hpp"
#include "vgnc/splat.hpp"

namespace vgnc {

struct SynthConfig {
    std::size_t gaussian_count = 500;
    int width = 64;
    int height = 64;
    std::size_t train_views = 3;
    std::size_t test_views = 8;
    std::size_t generated_views = 12;
    double arc_degrees = 60.0;     // azimuth span shared by every camera role
    double elevation_degrees = 15.0;
    double radius = 4.0;           // camera distance from the scene center
    double focal_factor = 1.2;     // fx = fy = focal_factor * width
    double scene_radius = 1.0;
    double noise_sigma = 0.05;     // additive noise on "noisy" generated views
    double input_noise_sigma = 0.0; // sensor-like noise on train views; test views stay clean
    double noisy_fraction = 0.25;  // share of generated views with additive noise
    double patch_fraction = 0.25;  // share of generated views with noise patches
    double patch_coverage = 0.3;   // pixel share replaced by noise on a patched view
    std::uint64_t seed = 0;
};

inline void apply_config(const KeyValueConfig& kv, SynthConfig& c) {
    kv.get("gaussian_count", c.gaussian_count);
    kv.get("width", c.width);
    kv.get("height", c.height);
    kv.get("train_views", c.train_views);
    kv.get("test_views", c.test_views);
    kv.get("generated_views", c.generated_views);
    kv.get("arc_degrees", c.arc_degrees);
    kv.get("elevation_degrees", c.elevation_degrees);
    kv.get("radius", c.radius);
    kv.get("focal_factor", c.focal_factor);
    kv.get("scene_radius", c.scene_radius);
    kv.get("noise_sigma", c.noise_sigma);
    kv.get("input_noise_sigma", c.input_noise_sigma);
    kv.get("noisy_fraction", c.noisy_fraction);
    kv.get("patch_fraction", c.patch_fraction);
    kv.get("patch_coverage", c.patch_coverage);
    kv.get("seed", c.seed);
}

enum class Corruption { none, noise, patches };

inline const char* corruption_name(Corruption c) {
    switch (c) {
    case Corruption::none: return "none";
    case Corruption::noise: return "noise";
    case Corruption::patches: return "patches";
    }
    return "?";
}

struct SynthScene {
    Scene scene;
    GaussianCloud ground_truth;
    std::vector<Corruption> corruption; // per generated view
    std::vector<Image> generated_clean;
};

/// Camera on a sphere around the origin, looking at it. Azimuth 0 sits on -z.
inline Pose orbit_pose(double azimuth_deg, double elevation_deg, double radius) {
    const double az = azimuth_deg * M_PI / 180.0, el = elevation_deg * M_PI / 180.0;
    const Vec3 eye(radius * std::cos(el) * std::sin(az), -radius * std::sin(el), -radius * std::cos(el) * std::cos(az));
    return look_at(eye, Vec3::Zero());
}

inline GaussianCloud sample_ground_truth(std::size_t n, double scene_radius, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0), u01(0.0, 1.0);
    std::normal_distribution<double> nrm;
    GaussianCloud cloud;
    while (cloud.size() < n) {
        const Vec3 p(u(rng), u(rng), u(rng));
        if (p.squaredNorm() > 1.0) continue;
        Gaussian3D g;
        g.mean = p * scene_radius;
        for (int k = 0; k < 3; ++k) g.log_scale[k] = std::log(scene_radius * (0.04 + 0.11 * u01(rng)));
        g.rotation = Vec4(nrm(rng), nrm(rng), nrm(rng), nrm(rng)).normalized();
        g.opacity_logit = logit(0.6 + 0.35 * u01(rng));
        g.color = Vec3(u01(rng), u01(rng), u01(rng));
        cloud.push_back(g);
    }
    return cloud;
}

/// Replaces random rectangles with uniform noise until `coverage` of the pixels are hit.
inline Image corrupt_patches(Image img, double coverage, std::mt19937_64& rng) {
    const int w = img.width(), h = img.height();
    Mask hit(w, h, false);
    const auto target = static_cast<std::size_t>(std::ceil(coverage * static_cast<double>(img.pixel_count())));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    while (hit.count() < target) {
        const int pw = std::max(2, static_cast<int>(w * (0.15 + 0.25 * u01(rng))));
        const int ph = std::max(2, static_cast<int>(h * (0.15 + 0.25 * u01(rng))));
        const int x0 = static_cast<int>(u01(rng) * (w - pw + 1)), y0 = static_cast<int>(u01(rng) * (h - ph + 1));
        for (int y = y0; y < y0 + ph; ++y)
            for (int x = x0; x < x0 + pw; ++x) {
                for (int c = 0; c < img.channels(); ++c) img.at(x, y, c) = u01(rng);
                hit.set(x, y, true);
            }
    }
    return img;
}

inline Image corrupt_noise(Image img, double sigma, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, sigma);
    for (double& v : img.data()) v = std::clamp(v + n(rng), 0.0, 1.0);
    return img;
}

/// Evenly spaced azimuths over the arc; `phase` in [0,1) shifts the samples inside their slots.
inline std::vector<double> arc_samples(std::size_t n, double arc, double phase) {
    std::vector<double> out;
    if (n == 1) return {0.0};
    for (std::size_t i = 0; i < n; ++i) {
        const double t = phase == 0.0 ? static_cast<double>(i) / static_cast<double>(n - 1)
                                      : (static_cast<double>(i) + phase) / static_cast<double>(n);
        out.push_back(-arc / 2 + arc * t);
    }
    return out;
}

inline SynthScene make_synthetic_scene(const SynthConfig& cfg) {
    if (cfg.train_views < 1 || cfg.gaussian_count < 1 || cfg.width < 16 || cfg.height < 16)
        throw Error(Errc::precondition, "synth: counts must be >= 1 and images >= 16x16");
    for (double f : {cfg.noisy_fraction, cfg.patch_fraction, cfg.patch_coverage})
        if (f < 0 || f > 1) throw Error(Errc::precondition, "synth: fractions must lie in [0,1]");
    if (cfg.noise_sigma < 0 || cfg.input_noise_sigma < 0) throw Error(Errc::precondition, "synth: noise sigmas must be >= 0");
    if (cfg.noisy_fraction + cfg.patch_fraction > 1.0 + 1e-12)
        throw Error(Errc::precondition, "synth: noisy_fraction + patch_fraction exceeds 1");

    std::mt19937_64 rng(cfg.seed);
    SynthScene out;
    out.ground_truth = sample_ground_truth(cfg.gaussian_count, cfg.scene_radius, rng);
    const double f = cfg.focal_factor * cfg.width;
    const CameraIntrinsics k{f, f, (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0, cfg.width, cfg.height};
    out.scene.k = k;
    out.scene.manifest.k = k;

    auto add = [&](ViewRole role, const std::string& name, const Pose& pose, const Image& img) {
        SceneView v{quantize8(img), {k, pose}, "images/" + name + ".png"};
        out.scene.manifest.entries.push_back({role, v.path, pose});
        (role == ViewRole::train ? out.scene.train : role == ViewRole::test ? out.scene.test : out.scene.generated)
            .push_back(std::move(v));
    };
    auto name = [](const char* prefix, std::size_t i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s_%03zu", prefix, i);
        return std::string(buf);
    };

    const auto train_az = arc_samples(cfg.train_views, cfg.arc_degrees, 0.0);
    std::mt19937_64 sensor_rng(cfg.seed ^ 0x5e5503ULL); // separate stream: other draws stay put
    for (std::size_t i = 0; i < cfg.train_views; ++i) {
        const Pose p = orbit_pose(train_az[i], cfg.elevation_degrees, cfg.radius);
        Image img = render(out.ground_truth, {k, p});
        if (cfg.input_noise_sigma > 0) img = corrupt_noise(std::move(img), cfg.input_noise_sigma, sensor_rng);
        add(ViewRole::train, name("train", i), p, img);
    }
    const auto test_az = arc_samples(cfg.test_views, cfg.arc_degrees, 0.5);
    for (std::size_t i = 0; i < cfg.test_views; ++i) {
        const double el = cfg.elevation_degrees + (i % 2 == 0 ? -5.0 : 5.0);
        const Pose p = orbit_pose(test_az[i], el, cfg.radius);
        add(ViewRole::test, name("test", i), p, render(out.ground_truth, {k, p}));
    }

    std::vector<std::size_t> order(cfg.generated_views);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_noise = static_cast<std::size_t>(std::lround(cfg.noisy_fraction * cfg.generated_views));
    const auto n_patch = std::min(cfg.generated_views - n_noise,
                                  static_cast<std::size_t>(std::lround(cfg.patch_fraction * cfg.generated_views)));
    out.corruption.assign(cfg.generated_views, Corruption::none);
    for (std::size_t i = 0; i < n_noise; ++i) out.corruption[order[i]] = Corruption::noise;
    for (std::size_t i = n_noise; i < n_noise + n_patch; ++i) out.corruption[order[i]] = Corruption::patches;

    const auto gen_az = arc_samples(cfg.generated_views, cfg.arc_degrees, 0.25);
    for (std::size_t i = 0; i < cfg.generated_views; ++i) {
        const double el = cfg.elevation_degrees + (i % 2 == 0 ? 3.0 : -3.0);
        const Pose p = orbit_pose(gen_az[i], el, cfg.radius);
        const Image clean = render(out.ground_truth, {k, p});
        Image img = clean;
        if (out.corruption[i] == Corruption::noise) img = corrupt_noise(clean, cfg.noise_sigma, rng);
        if (out.corruption[i] == Corruption::patches) img = corrupt_patches(clean, cfg.patch_coverage, rng);
        out.generated_clean.push_back(quantize8(clean));
        add(ViewRole::generated, name("generated", i), p, img);
    }
    return out;
}

/// Writes scene.txt, images/, ground_truth.ply and generated_labels.csv under `dir`.
inline void write_synthetic_scene(const fs::path& dir, const SynthScene& s) {
    std::vector<Image> images;
    for (const auto& e : s.scene.manifest.entries) {
        const auto& pool = e.role == ViewRole::train ? s.scene.train : e.role == ViewRole::test ? s.scene.test : s.scene.generated;
        for (const auto& v : pool)
            if (v.path == e.path) images.push_back(v.image);
    }
    write_scene(dir / "scene.txt", s.scene.manifest, images);
    write_ply(dir / "ground_truth.ply", s.ground_truth);
    std::string csv = "gen_index,path,corruption\n";
    for (std::size_t i = 0; i < s.corruption.size(); ++i)
        csv += std::to_string(i) + "," + s.scene.generated[i].path + "," + corruption_name(s.corruption[i]) + "\n";
    write_text(dir / "generated_labels.csv", csv);
}

} // namespace vgnc
