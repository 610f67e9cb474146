#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <vector>

#include "vgnc/error.hpp"
#include "vgnc/features.hpp"
#include "vgnc/geometry.hpp"
#include "vgnc/image.hpp"

namespace vgnc {

/// Per-pixel agreement in (0,1]; pixels without a reprojected sample are invalid and hold 0.
struct ConfidenceMap {
    int width = 0;
    int height = 0;
    std::vector<double> values;
    Mask valid;

    double operator()(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Depth assumed for every back-projected pixel of the generated view.
enum class WarpDepth {
    unit,           // d = 1 in the unit-baseline frame
    median_scene,   // median depth of the triangulated RANSAC inliers, same frame
};

struct FilterConfig {
    double sigma = 0.25;
    double theta = 0.5;
    double tau_fraction = 0.10;
    int max_fill_radius = 2;
    WarpDepth warp_depth = WarpDepth::median_scene;
    DetectorConfig detector{};
    MatchConfig match{};
    RansacConfig ransac{.min_inliers = 8}; // ~20 features per 64x64 view leave few matches
    bool keep_maps = false;
};

struct FilterEntry {
    std::size_t gen_index = 0;
    std::size_t closest_input = 0;
    std::size_t n_min = 0;
    std::size_t n_total = 0;
    bool kept = false;
    std::vector<std::size_t> n_per_input;
};

struct FilterReport {
    double tau = 0.0;
    std::vector<FilterEntry> entries;
    // maps[j][i]: confidence of generated j warped into input i (only with keep_maps)
    std::vector<std::vector<ConfidenceMap>> maps;
};

struct Reprojection {
    Image image;
    Mask valid;
};

/// Forward-warps the generated image into the input view. rel_pose maps generated-camera
/// coordinates to input-camera coordinates; each pixel is back-projected to the given depth.
inline Reprojection reproject_generated(const Image& j_img, const CameraIntrinsics& k, const Pose& rel_pose,
                                        double depth = 1.0) {
    const int w = j_img.width(), h = j_img.height(), ch = j_img.channels();
    Reprojection out{Image(w, h, ch, 0.0), Mask(w, h, false)};
    const Mat3 kk = k.matrix(), kinv = k.inverse();
    const Mat3 m = kk * rel_pose.rotation * kinv * depth;
    const Vec3 kt = kk * rel_pose.translation;
    for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u) {
            const Vec3 p = m * Vec3(u, v, 1.0) + kt;
            if (!(p.z() > 1e-8)) continue;
            const double tu = std::floor(p.x() / p.z() + 0.5), tv = std::floor(p.y() / p.z() + 0.5);
            if (tu < 0 || tv < 0 || tu >= w || tv >= h) continue;
            const int x = static_cast<int>(tu), y = static_cast<int>(tv);
            for (int c = 0; c < ch; ++c) out.image.at(x, y, c) = j_img.at(u, v, c);
            out.valid.set(x, y, true);
        }
    }
    return out;
}

/// Fills invalid pixels that see at least two valid pixels within a Chebyshev radius, using
/// inverse-distance weights. Only originally valid pixels act as sources.
inline Reprojection fill_holes(const Image& img, const Mask& mask, int max_radius) {
    if (mask.width != img.width() || mask.height != img.height())
        throw Error(Errc::shape_mismatch, "fill_holes: mask does not match image");
    Reprojection out{img, mask};
    const int w = img.width(), h = img.height(), ch = img.channels();
    std::vector<double> acc(static_cast<std::size_t>(ch));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (mask(x, y)) continue;
            std::fill(acc.begin(), acc.end(), 0.0);
            double wsum = 0.0;
            int n = 0;
            for (int dy = -max_radius; dy <= max_radius; ++dy) {
                for (int dx = -max_radius; dx <= max_radius; ++dx) {
                    const int sx = x + dx, sy = y + dy;
                    if (sx < 0 || sy < 0 || sx >= w || sy >= h || !mask(sx, sy)) continue;
                    const double wt = 1.0 / std::sqrt(static_cast<double>(dx * dx + dy * dy));
                    for (int c = 0; c < ch; ++c) acc[static_cast<std::size_t>(c)] += wt * img.at(sx, sy, c);
                    wsum += wt;
                    ++n;
                }
            }
            if (n < 2) continue;
            for (int c = 0; c < ch; ++c) out.image.at(x, y, c) = acc[static_cast<std::size_t>(c)] / wsum;
            out.valid.set(x, y, true);
        }
    }
    return out;
}

inline ConfidenceMap confidence_map(const Image& i_img, const Image& reproj, const Mask& mask, double sigma) {
    require_same_shape(i_img, reproj, "confidence_map: images differ in shape");
    if (mask.width != i_img.width() || mask.height != i_img.height())
        throw Error(Errc::shape_mismatch, "confidence_map: mask does not match image");
    if (!(sigma > 0)) throw Error(Errc::precondition, "confidence_map: sigma must be positive");
    ConfidenceMap m{i_img.width(), i_img.height(), std::vector<double>(i_img.pixel_count(), 0.0), mask};
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            if (!mask(x, y)) continue;
            double d2 = 0.0;
            for (int c = 0; c < i_img.channels(); ++c) {
                const double d = i_img.at(x, y, c) - reproj.at(x, y, c);
                d2 += d * d;
            }
            m.values[static_cast<std::size_t>(y) * m.width + x] = std::exp(-d2 / (sigma * sigma));
        }
    }
    return m;
}

/// Valid pixels at or below theta, plus every invalid pixel.
inline std::size_t low_confidence_count(const ConfidenceMap& m, double theta) {
    std::size_t n = 0;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) n += !m.valid(x, y) || m(x, y) <= theta;
    return n;
}

namespace detail {

inline double median_inlier_depth(const std::vector<Correspondence>& corrs, const std::vector<bool>& inliers,
                                  const CameraIntrinsics& k, const Pose& rel) {
    std::vector<double> depths;
    for (std::size_t i = 0; i < corrs.size(); ++i) {
        if (!inliers[i]) continue;
        const auto r = midpoint_in_a(k.normalized(corrs[i].pixel_a), k.normalized(corrs[i].pixel_b), rel.rotation,
                                     rel.translation);
        if (r.depth_a > 0 && r.depth_b > 0) depths.push_back(r.depth_a);
    }
    if (depths.empty()) return 1.0;
    auto mid = depths.begin() + static_cast<std::ptrdiff_t>(depths.size() / 2);
    std::nth_element(depths.begin(), mid, depths.end());
    return *mid;
}

struct RotationFit {
    Mat3 rotation = Mat3::Identity();
    std::size_t inliers = 0;
};

/// Kabsch rotation aligning bearing vectors a -> b.
inline Mat3 kabsch(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    Mat3 h = Mat3::Zero();
    for (std::size_t i = 0; i < a.size(); ++i) h += b[i] * a[i].transpose();
    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 d = Mat3::Identity();
    d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
    return svd.matrixU() * d * svd.matrixV().transpose();
}

/// Robust zero-baseline model b ~ K R K^-1 a from 2-point samples; the essential matrix is
/// undefined when the views share a center, and this catches that case.
inline RotationFit fit_rotation_only(const std::vector<Correspondence>& corrs, const CameraIntrinsics& k,
                                     double threshold_px, std::size_t iterations, std::uint64_t seed) {
    RotationFit best;
    if (corrs.size() < 2) return best;
    std::vector<Vec3> ba, bb;
    for (const auto& c : corrs) {
        ba.push_back(k.normalized(c.pixel_a).normalized());
        bb.push_back(k.normalized(c.pixel_b).normalized());
    }
    auto inlier_mask = [&](const Mat3& r) {
        std::vector<bool> m(corrs.size());
        for (std::size_t i = 0; i < corrs.size(); ++i) {
            const Vec3 p = r * k.normalized(corrs[i].pixel_a);
            if (p.z() <= 1e-8) continue;
            const Vec2 px(k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy);
            m[i] = (px - corrs[i].pixel_b).norm() < threshold_px;
        }
        return m;
    };
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, corrs.size() - 1);
    for (std::size_t it = 0; it < iterations; ++it) {
        const std::size_t i = pick(rng), j = pick(rng);
        if (i == j) continue;
        const Mat3 r = kabsch({ba[i], ba[j]}, {bb[i], bb[j]});
        const auto m = inlier_mask(r);
        const auto n = static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
        if (n <= best.inliers) continue;
        std::vector<Vec3> sa, sb;
        for (std::size_t q = 0; q < m.size(); ++q)
            if (m[q]) {
                sa.push_back(ba[q]);
                sb.push_back(bb[q]);
            }
        const Mat3 refined = kabsch(sa, sb);
        const auto m2 = inlier_mask(refined);
        const auto n2 = static_cast<std::size_t>(std::count(m2.begin(), m2.end(), true));
        best = n2 >= n ? RotationFit{refined, n2} : RotationFit{r, n};
    }
    return best;
}

} // namespace detail

/// Scores one generated image against one input: estimate pose, warp, fill, compare.
/// Returns H*W (maximally untrusted) when the two-view geometry cannot be estimated.
inline std::size_t score_pair(const Image& input, const std::vector<Feature>& f_input, const Image& generated,
                              const std::vector<Feature>& f_generated, const CameraIntrinsics& k,
                              const FilterConfig& cfg, ConfidenceMap* map_out = nullptr) {
    const std::size_t worst = input.pixel_count();
    if (map_out) *map_out = ConfidenceMap{input.width(), input.height(), std::vector<double>(worst, 0.0),
                                          Mask(input.width(), input.height(), false)};
    const auto corrs = match_descriptors(f_generated, f_input, cfg.match);
    if (corrs.size() < 8) return worst;
    const auto rot = detail::fit_rotation_only(corrs, k, std::sqrt(2.0) * cfg.ransac.sampson_threshold, 200, cfg.ransac.seed);
    Pose rel;
    double depth = 1.0;
    try {
        const auto est = estimate_essential_ransac(corrs, k, cfg.ransac);
        if (rot.inliers >= est.inlier_count) {
            rel.rotation = rot.rotation;
        } else {
            std::vector<Correspondence> in;
            for (std::size_t i = 0; i < corrs.size(); ++i)
                if (est.inliers[i]) in.push_back(corrs[i]);
            rel = decompose_essential(est.essential, in, k);
            if (cfg.warp_depth == WarpDepth::median_scene) depth = detail::median_inlier_depth(corrs, est.inliers, k, rel);
        }
    } catch (const Error&) {
        if (rot.inliers < std::max<std::size_t>(cfg.ransac.min_inliers, 8)) return worst;
        rel.rotation = rot.rotation;
    }
    const auto warped = reproject_generated(generated, k, rel, depth);
    const auto filled = fill_holes(warped.image, warped.valid, cfg.max_fill_radius);
    const auto conf = confidence_map(input, filled.image, filled.valid, cfg.sigma);
    if (map_out) *map_out = conf;
    return low_confidence_count(conf, cfg.theta);
}

/// Keeps generated images whose best-matching input view has at most tau low-confidence pixels.
inline std::vector<std::size_t> filter_generated_set(const std::vector<Image>& inputs, const std::vector<Image>& generated,
                                                     const CameraIntrinsics& k, const FilterConfig& cfg,
                                                     FilterReport* report = nullptr) {
    if (inputs.empty()) throw Error(Errc::precondition, "filter_generated_set: no input images");
    if (!(cfg.sigma > 0) || !(cfg.theta > 0 && cfg.theta < 1) || !(cfg.tau_fraction >= 0 && cfg.tau_fraction <= 1))
        throw Error(Errc::precondition, "filter_generated_set: invalid filter configuration");
    for (const auto& img : inputs)
        if (img.width() != k.width || img.height() != k.height)
            throw Error(Errc::shape_mismatch, "filter_generated_set: input image does not match intrinsics");
    for (const auto& img : generated)
        if (img.width() != k.width || img.height() != k.height)
            throw Error(Errc::shape_mismatch, "filter_generated_set: generated image does not match intrinsics");

    const double tau = cfg.tau_fraction * static_cast<double>(k.width) * static_cast<double>(k.height);
    FilterReport local;
    FilterReport& rep = report ? *report : local;
    rep = FilterReport{};
    rep.tau = tau;

    std::vector<std::vector<Feature>> f_in;
    for (const auto& img : inputs) f_in.push_back(detect_and_describe(img, cfg.detector));

    std::vector<std::size_t> kept;
    for (std::size_t j = 0; j < generated.size(); ++j) {
        const auto f_gen = detect_and_describe(generated[j], cfg.detector);
        FilterEntry e;
        e.gen_index = j;
        e.n_total = generated[j].pixel_count();
        e.n_min = std::numeric_limits<std::size_t>::max();
        if (cfg.keep_maps) rep.maps.emplace_back(inputs.size());
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            const std::size_t n = score_pair(inputs[i], f_in[i], generated[j], f_gen, k, cfg,
                                             cfg.keep_maps ? &rep.maps.back()[i] : nullptr);
            e.n_per_input.push_back(n);
            if (n < e.n_min) {
                e.n_min = n;
                e.closest_input = i;
            }
        }
        e.kept = static_cast<double>(e.n_min) <= tau;
        if (e.kept) kept.push_back(j);
        rep.entries.push_back(std::move(e));
    }
    return kept;
}

} // namespace vgnc
