#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vgnc/error.hpp"
#include "vgnc/geometry.hpp"
#include "vgnc/image.hpp"

namespace vgnc {

struct Feature {
    Vec2 position = Vec2::Zero();
    double scale = 1.0;
    double orientation = 0.0;
    double response = 0.0;
    std::vector<double> descriptor;
};

/// Difference-of-Gaussians detector settings. Contrast is measured on [0,1] intensities.
struct DetectorConfig {
    int octaves = 4;
    int scales_per_octave = 3;
    double sigma0 = 1.6;
    double contrast_threshold = 0.04;
    double edge_ratio = 10.0;
    bool upsample = true;
    std::size_t max_features = 0; // 0 = unlimited
};

struct MatchConfig {
    double ratio = 0.75;
    std::size_t max_matches = 0; // 0 = unlimited
    bool mutual_check = true;
};

struct RansacConfig {
    int max_iterations = 2000;
    double sampson_threshold = 1.5; // pixels
    std::size_t min_inliers = 15;
    std::uint64_t seed = 0;
    double confidence = 0.999;
};

struct RansacResult {
    EssentialMatrix essential;
    std::vector<bool> inliers;
    std::size_t inlier_count = 0;
};

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[i + radius];
    }
    for (double& v : k) v /= sum;
    return k;
}

inline int reflect(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

/// Separable Gaussian blur of a single-channel image with mirrored borders.
inline Image blur(const Image& src, double sigma) {
    if (sigma <= 0) return src;
    const auto k = gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    const int w = src.width(), h = src.height();
    Image tmp(w, h, 1), out(w, h, 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) acc += k[i + r] * src.at(reflect(x + i, w), y);
            tmp.at(x, y) = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(x, reflect(y + i, h));
            out.at(x, y) = acc;
        }
    return out;
}

inline Image upsample2x(const Image& src) {
    const int w = src.width() * 2, h = src.height() * 2;
    Image out(w, h, 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            // Half-pixel-center mapping back into the source grid.
            const double sx = std::clamp((x + 0.5) / 2.0 - 0.5, 0.0, src.width() - 1.0);
            const double sy = std::clamp((y + 0.5) / 2.0 - 0.5, 0.0, src.height() - 1.0);
            const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
            const int x1 = std::min(x0 + 1, src.width() - 1), y1 = std::min(y0 + 1, src.height() - 1);
            const double fx = sx - x0, fy = sy - y0;
            out.at(x, y) = (1 - fy) * ((1 - fx) * src.at(x0, y0) + fx * src.at(x1, y0)) +
                           fy * ((1 - fx) * src.at(x0, y1) + fx * src.at(x1, y1));
        }
    return out;
}

inline Image downsample2x(const Image& src) {
    const int w = std::max(1, src.width() / 2), h = std::max(1, src.height() / 2);
    Image out(w, h, 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(x, y) = src.at(std::min(2 * x, src.width() - 1), std::min(2 * y, src.height() - 1));
    return out;
}

struct Octave {
    std::vector<Image> gauss;
    std::vector<Image> dog;
};

inline void compute_descriptor(const Image& g, double x, double y, double sigma_oct, double angle,
                               std::vector<double>& desc) {
    constexpr int d = 4, bins = 8;
    const double hist_width = 3.0 * sigma_oct;
    const int radius = static_cast<int>(std::round(hist_width * std::sqrt(2.0) * (d + 1) * 0.5));
    const double cos_t = std::cos(-angle), sin_t = std::sin(-angle);
    std::vector<double> hist((d + 2) * (d + 2) * (bins + 2), 0.0);
    auto hidx = [&](int r, int c, int o) { return (r * (d + 2) + c) * (bins + 2) + o; };
    const double exp_scale = -1.0 / (d * d * 0.5);
    const int ix = static_cast<int>(std::round(x)), iy = static_cast<int>(std::round(y));
    for (int i = -radius; i <= radius; ++i) {
        for (int j = -radius; j <= radius; ++j) {
            const double c_rot = (j * cos_t - i * sin_t) / hist_width;
            const double r_rot = (j * sin_t + i * cos_t) / hist_width;
            const double rbin = r_rot + d / 2.0 - 0.5;
            const double cbin = c_rot + d / 2.0 - 0.5;
            const int px = ix + j, py = iy + i;
            if (rbin <= -1 || rbin >= d || cbin <= -1 || cbin >= d) continue;
            if (px <= 0 || px >= g.width() - 1 || py <= 0 || py >= g.height() - 1) continue;
            const double dx = g.at(px + 1, py) - g.at(px - 1, py);
            const double dy = g.at(px, py + 1) - g.at(px, py - 1);
            const double mag = std::hypot(dx, dy) * std::exp((c_rot * c_rot + r_rot * r_rot) * exp_scale);
            double ori = std::atan2(dy, dx) - angle;
            while (ori < 0) ori += 2 * M_PI;
            while (ori >= 2 * M_PI) ori -= 2 * M_PI;
            const double obin = ori * bins / (2 * M_PI);

            const int r0 = static_cast<int>(std::floor(rbin));
            const int c0 = static_cast<int>(std::floor(cbin));
            const int o0 = static_cast<int>(std::floor(obin));
            const double fr = rbin - r0, fc = cbin - c0, fo = obin - o0;
            for (int dr = 0; dr <= 1; ++dr) {
                const double wr = dr ? fr : 1 - fr;
                for (int dc = 0; dc <= 1; ++dc) {
                    const double wc = dc ? fc : 1 - fc;
                    for (int dobin = 0; dobin <= 1; ++dobin) {
                        const double wo = dobin ? fo : 1 - fo;
                        hist[hidx(r0 + 1 + dr, c0 + 1 + dc, (o0 + dobin) % bins)] += mag * wr * wc * wo;
                    }
                }
            }
        }
    }
    desc.assign(d * d * bins, 0.0);
    for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c)
            for (int o = 0; o < bins; ++o) desc[(r * d + c) * bins + o] = hist[hidx(r + 1, c + 1, o)];

    auto normalize = [&] {
        double n = 0.0;
        for (double v : desc) n += v * v;
        n = std::sqrt(n);
        if (n > 0)
            for (double& v : desc) v /= n;
        return n;
    };
    normalize();
    for (double& v : desc) v = std::min(v, 0.2);
    if (normalize() == 0.0) desc[0] = 1.0; // flat patch: keep the unit-norm invariant
}

} // namespace detail

/// SIFT-style keypoints: DoG extrema with quadratic refinement, Hessian edge rejection,
/// dominant gradient orientation and a 4x4x8 orientation-histogram descriptor.
inline std::vector<Feature> detect_and_describe(const Image& image, const DetectorConfig& cfg = {}) {
    if (image.width() < 16 || image.height() < 16)
        throw Error(Errc::precondition, "detector needs at least 16x16 pixels");
    const int s = cfg.scales_per_octave;
    Image base = to_gray(image);
    double base_scale = 1.0; // original pixels per base pixel
    double assumed_blur = 0.5;
    if (cfg.upsample) {
        base = detail::upsample2x(base);
        base_scale = 0.5;
        assumed_blur = 1.0;
    }
    base = detail::blur(base, std::sqrt(std::max(cfg.sigma0 * cfg.sigma0 - assumed_blur * assumed_blur, 0.01)));

    std::vector<double> sig(s + 3);
    sig[0] = cfg.sigma0;
    for (int i = 1; i < s + 3; ++i) {
        const double prev = cfg.sigma0 * std::pow(2.0, (i - 1.0) / s);
        const double total = prev * std::pow(2.0, 1.0 / s);
        sig[i] = std::sqrt(total * total - prev * prev);
    }

    std::vector<detail::Octave> pyr;
    for (int o = 0; o < cfg.octaves; ++o) {
        if (base.width() < 4 || base.height() < 4) break;
        detail::Octave oct;
        oct.gauss.push_back(base);
        for (int i = 1; i < s + 3; ++i) oct.gauss.push_back(detail::blur(oct.gauss.back(), sig[i]));
        for (int i = 0; i + 1 < s + 3; ++i) {
            Image dg(base.width(), base.height(), 1);
            for (std::size_t p = 0; p < dg.size(); ++p) dg.data()[p] = oct.gauss[i + 1].data()[p] - oct.gauss[i].data()[p];
            oct.dog.push_back(std::move(dg));
        }
        base = detail::downsample2x(oct.gauss[s]);
        pyr.push_back(std::move(oct));
    }

    const double threshold = cfg.contrast_threshold / s;
    const double prefilter = 0.5 * threshold;
    const double edge = (cfg.edge_ratio + 1) * (cfg.edge_ratio + 1) / cfg.edge_ratio;
    std::vector<Feature> out;

    for (std::size_t o = 0; o < pyr.size(); ++o) {
        const auto& dog = pyr[o].dog;
        const int w = dog[0].width(), h = dog[0].height();
        const double oct_scale = base_scale * std::pow(2.0, static_cast<double>(o));
        for (int layer = 1; layer <= s; ++layer) {
            for (int y = 1; y < h - 1; ++y) {
                for (int x = 1; x < w - 1; ++x) {
                    const double v = dog[layer].at(x, y);
                    if (std::abs(v) <= prefilter) continue;
                    bool is_max = true, is_min = true;
                    for (int dl = -1; dl <= 1 && (is_max || is_min); ++dl)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                if (!dl && !dx && !dy) continue;
                                const double n = dog[layer + dl].at(x + dx, y + dy);
                                if (n >= v) is_max = false;
                                if (n <= v) is_min = false;
                            }
                    if (!is_max && !is_min) continue;

                    // Quadratic refinement in (x, y, layer).
                    int cx = x, cy = y, cl = layer;
                    Vec3 offset = Vec3::Zero();
                    Vec3 grad = Vec3::Zero();
                    bool ok = false;
                    for (int iter = 0; iter < 5; ++iter) {
                        const auto& d0 = dog[cl];
                        const auto& dm = dog[cl - 1];
                        const auto& dp = dog[cl + 1];
                        grad = Vec3(0.5 * (d0.at(cx + 1, cy) - d0.at(cx - 1, cy)),
                                    0.5 * (d0.at(cx, cy + 1) - d0.at(cx, cy - 1)),
                                    0.5 * (dp.at(cx, cy) - dm.at(cx, cy)));
                        const double c2 = 2 * d0.at(cx, cy);
                        Mat3 hes;
                        hes(0, 0) = d0.at(cx + 1, cy) + d0.at(cx - 1, cy) - c2;
                        hes(1, 1) = d0.at(cx, cy + 1) + d0.at(cx, cy - 1) - c2;
                        hes(2, 2) = dp.at(cx, cy) + dm.at(cx, cy) - c2;
                        hes(0, 1) = hes(1, 0) = 0.25 * (d0.at(cx + 1, cy + 1) - d0.at(cx - 1, cy + 1) -
                                                        d0.at(cx + 1, cy - 1) + d0.at(cx - 1, cy - 1));
                        hes(0, 2) = hes(2, 0) = 0.25 * (dp.at(cx + 1, cy) - dp.at(cx - 1, cy) -
                                                        dm.at(cx + 1, cy) + dm.at(cx - 1, cy));
                        hes(1, 2) = hes(2, 1) = 0.25 * (dp.at(cx, cy + 1) - dp.at(cx, cy - 1) -
                                                        dm.at(cx, cy + 1) + dm.at(cx, cy - 1));
                        if (std::abs(hes.determinant()) < 1e-18) break;
                        offset = -hes.ldlt().solve(grad);
                        if (offset.cwiseAbs().maxCoeff() < 0.5) {
                            ok = true;
                            break;
                        }
                        cx += static_cast<int>(std::round(offset.x()));
                        cy += static_cast<int>(std::round(offset.y()));
                        cl += static_cast<int>(std::round(offset.z()));
                        if (cl < 1 || cl > s || cx < 1 || cx >= w - 1 || cy < 1 || cy >= h - 1) break;
                    }
                    if (!ok) continue;

                    const auto& d0 = dog[cl];
                    const double contrast = d0.at(cx, cy) + 0.5 * grad.dot(offset);
                    if (std::abs(contrast) < threshold) continue;

                    const double dxx = d0.at(cx + 1, cy) + d0.at(cx - 1, cy) - 2 * d0.at(cx, cy);
                    const double dyy = d0.at(cx, cy + 1) + d0.at(cx, cy - 1) - 2 * d0.at(cx, cy);
                    const double dxy = 0.25 * (d0.at(cx + 1, cy + 1) - d0.at(cx - 1, cy + 1) -
                                               d0.at(cx + 1, cy - 1) + d0.at(cx - 1, cy - 1));
                    const double tr = dxx + dyy, det = dxx * dyy - dxy * dxy;
                    if (det <= 0 || tr * tr / det >= edge) continue;

                    const double fx = cx + offset.x(), fy = cy + offset.y();
                    const double sigma_oct = cfg.sigma0 * std::pow(2.0, (cl + offset.z()) / s);
                    const Vec2 pos((fx + 0.5) * oct_scale - 0.5, (fy + 0.5) * oct_scale - 0.5);
                    if (pos.x() < 0 || pos.y() < 0 || pos.x() > image.width() - 1 || pos.y() > image.height() - 1)
                        continue;

                    // Orientation histogram on the matching Gaussian layer.
                    const auto& g = pyr[o].gauss[cl];
                    constexpr int nbins = 36;
                    std::vector<double> hist(nbins, 0.0);
                    const double ori_sigma = 1.5 * sigma_oct;
                    const int rad = static_cast<int>(std::round(3.0 * ori_sigma));
                    for (int i = -rad; i <= rad; ++i) {
                        const int py = cy + i;
                        if (py <= 0 || py >= h - 1) continue;
                        for (int j = -rad; j <= rad; ++j) {
                            const int px = cx + j;
                            if (px <= 0 || px >= w - 1) continue;
                            const double gx = g.at(px + 1, py) - g.at(px - 1, py);
                            const double gy = g.at(px, py + 1) - g.at(px, py - 1);
                            const double wgt = std::exp(-(i * i + j * j) / (2 * ori_sigma * ori_sigma));
                            double ang = std::atan2(gy, gx);
                            if (ang < 0) ang += 2 * M_PI;
                            const int bin = static_cast<int>(std::round(ang * nbins / (2 * M_PI))) % nbins;
                            hist[bin] += wgt * std::hypot(gx, gy);
                        }
                    }
                    std::vector<double> smooth(nbins);
                    for (int b = 0; b < nbins; ++b)
                        smooth[b] = (hist[(b + nbins - 2) % nbins] + hist[(b + 2) % nbins]) / 16.0 +
                                    (hist[(b + nbins - 1) % nbins] + hist[(b + 1) % nbins]) * 4.0 / 16.0 +
                                    hist[b] * 6.0 / 16.0;
                    const double peak = *std::max_element(smooth.begin(), smooth.end());
                    for (int b = 0; b < nbins; ++b) {
                        const double l = smooth[(b + nbins - 1) % nbins], r = smooth[(b + 1) % nbins];
                        if (!(smooth[b] > l && smooth[b] > r && smooth[b] >= 0.8 * peak)) continue;
                        double bin = b + 0.5 * (l - r) / (l - 2 * smooth[b] + r);
                        if (bin < 0) bin += nbins;
                        if (bin >= nbins) bin -= nbins;
                        Feature f;
                        f.position = pos;
                        f.scale = sigma_oct * oct_scale;
                        f.orientation = bin * 2 * M_PI / nbins;
                        f.response = std::abs(contrast);
                        detail::compute_descriptor(g, fx, fy, sigma_oct, f.orientation, f.descriptor);
                        out.push_back(std::move(f));
                    }
                    if (peak <= 0) {
                        Feature f;
                        f.position = pos;
                        f.scale = sigma_oct * oct_scale;
                        f.response = std::abs(contrast);
                        detail::compute_descriptor(g, fx, fy, sigma_oct, 0.0, f.descriptor);
                        out.push_back(std::move(f));
                    }
                }
            }
        }
    }

    std::stable_sort(out.begin(), out.end(), [](const Feature& a, const Feature& b) { return a.response > b.response; });
    if (cfg.max_features > 0 && out.size() > cfg.max_features) out.resize(cfg.max_features);
    return out;
}

inline double descriptor_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

/// Exact nearest-neighbour matching with Lowe's ratio test. Returns pairs (a -> b).
inline std::vector<Correspondence> match_descriptors(std::span<const Feature> features_a,
                                                     std::span<const Feature> features_b,
                                                     const MatchConfig& cfg = {}) {
    if (!(cfg.ratio > 0 && cfg.ratio < 1))
        throw Error(Errc::precondition, "ratio must lie in (0,1)");
    constexpr double inf = std::numeric_limits<double>::infinity();
    const std::size_t na = features_a.size(), nb = features_b.size();
    std::vector<double> dist(na * nb);
    for (std::size_t i = 0; i < na; ++i)
        for (std::size_t j = 0; j < nb; ++j)
            dist[i * nb + j] = descriptor_distance(features_a[i].descriptor, features_b[j].descriptor);

    struct Candidate {
        std::size_t a, b;
        double d;
    };
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < na; ++i) {
        double d1 = inf, d2 = inf;
        std::size_t best = nb;
        for (std::size_t j = 0; j < nb; ++j) {
            const double d = dist[i * nb + j];
            if (d < d1) {
                d2 = d1;
                d1 = d;
                best = j;
            } else if (d < d2) {
                d2 = d;
            }
        }
        if (best == nb) continue;
        if (std::isfinite(d2) && !(d1 < cfg.ratio * d2)) continue;
        if (cfg.mutual_check) {
            std::size_t back = na;
            double db = inf;
            for (std::size_t k = 0; k < na; ++k)
                if (dist[k * nb + best] < db) {
                    db = dist[k * nb + best];
                    back = k;
                }
            if (back != i) continue;
        }
        cands.push_back({i, best, d1});
    }

    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) { return x.d < y.d; });
    std::vector<bool> used_b(nb, false);
    std::vector<Correspondence> out;
    for (const auto& c : cands) {
        if (used_b[c.b]) continue;
        used_b[c.b] = true;
        out.push_back({features_a[c.a].position, features_b[c.b].position});
        if (cfg.max_matches > 0 && out.size() >= cfg.max_matches) break;
    }
    return out;
}

/// First-order geometric (Sampson) distance of a pixel correspondence under fundamental matrix F.
inline double sampson_distance(const Mat3& f, const Correspondence& c) {
    const Vec3 xa(c.pixel_a.x(), c.pixel_a.y(), 1.0);
    const Vec3 xb(c.pixel_b.x(), c.pixel_b.y(), 1.0);
    const Vec3 fa = f * xa;
    const Vec3 fb = f.transpose() * xb;
    const double num = xb.dot(fa);
    const double den = fa.x() * fa.x() + fa.y() * fa.y() + fb.x() * fb.x() + fb.y() * fb.y();
    if (den <= 0) return std::numeric_limits<double>::infinity();
    return std::abs(num) / std::sqrt(den);
}

inline Mat3 fundamental_from_essential(const Mat3& e, const CameraIntrinsics& k) {
    const Mat3 kinv = k.inverse();
    return kinv.transpose() * e * kinv;
}

/// Hartley-normalized linear solve for E from >= 8 correspondences, projected to the essential manifold.
inline Mat3 eight_point_essential(std::span<const Vec2> xa, std::span<const Vec2> xb) {
    auto normalizer = [](std::span<const Vec2> pts) {
        Vec2 mean = Vec2::Zero();
        for (const auto& p : pts) mean += p;
        mean /= static_cast<double>(pts.size());
        double spread = 0.0;
        for (const auto& p : pts) spread += (p - mean).norm();
        spread /= static_cast<double>(pts.size());
        const double sc = spread > 1e-15 ? std::sqrt(2.0) / spread : 1.0;
        Mat3 t;
        t << sc, 0, -sc * mean.x(), 0, sc, -sc * mean.y(), 0, 0, 1;
        return t;
    };
    const Mat3 ta = normalizer(xa), tb = normalizer(xb);
    Eigen::Matrix<double, Eigen::Dynamic, 9> a(static_cast<Eigen::Index>(xa.size()), 9);
    for (std::size_t i = 0; i < xa.size(); ++i) {
        const Vec3 pa = ta * Vec3(xa[i].x(), xa[i].y(), 1.0);
        const Vec3 pb = tb * Vec3(xb[i].x(), xb[i].y(), 1.0);
        const auto r = static_cast<Eigen::Index>(i);
        a.row(r) << pb.x() * pa.x(), pb.x() * pa.y(), pb.x(), pb.y() * pa.x(), pb.y() * pa.y(), pb.y(), pa.x(),
            pa.y(), 1.0;
    }
    Eigen::JacobiSVD<Eigen::Matrix<double, Eigen::Dynamic, 9>> svd(a, Eigen::ComputeFullV);
    const Eigen::Matrix<double, 9, 1> v = svd.matrixV().col(8);
    Mat3 en;
    en << v(0), v(1), v(2), v(3), v(4), v(5), v(6), v(7), v(8);
    Mat3 e = project_to_essential_manifold(tb.transpose() * en * ta);
    const double n = e.norm();
    return n > 0 ? Mat3(e / n) : e;
}

namespace detail {

/// Levenberg-Marquardt on the essential manifold (R, unit t), minimizing squared Sampson
/// distances in pixels over the given correspondences.
inline Mat3 refine_essential(const Mat3& e0, std::span<const Correspondence> corrs, const CameraIntrinsics& k,
                             int iterations = 15) {
    Eigen::JacobiSVD<Mat3> svd(e0, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 u = svd.matrixU(), v = svd.matrixV();
    if (u.determinant() < 0) u = -u;
    if (v.determinant() < 0) v = -v;
    Mat3 w;
    w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    Mat3 r = u * w * v.transpose();
    Vec3 t = u.col(2).normalized();

    const std::size_t n = corrs.size();
    auto residuals = [&](const Mat3& rr, const Vec3& tt, Eigen::VectorXd& out) {
        const Mat3 f = fundamental_from_essential(skew(tt) * rr, k);
        out.resize(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            const Vec3 xa(corrs[i].pixel_a.x(), corrs[i].pixel_a.y(), 1.0);
            const Vec3 xb(corrs[i].pixel_b.x(), corrs[i].pixel_b.y(), 1.0);
            const Vec3 fa = f * xa, fb = f.transpose() * xb;
            const double den = fa.x() * fa.x() + fa.y() * fa.y() + fb.x() * fb.x() + fb.y() * fb.y();
            out(static_cast<Eigen::Index>(i)) = den > 0 ? xb.dot(fa) / std::sqrt(den) : 0.0;
        }
    };
    auto perturb = [](const Mat3& rr, const Vec3& tt, const Eigen::Matrix<double, 5, 1>& d, Mat3& ro, Vec3& to) {
        const Vec3 omega = d.head<3>();
        const double ang = omega.norm();
        ro = (ang > 0 ? Mat3(Eigen::AngleAxisd(ang, omega / ang).toRotationMatrix()) : Mat3::Identity()) * rr;
        Vec3 b1 = tt.unitOrthogonal();
        Vec3 b2 = tt.cross(b1);
        to = (tt + d(3) * b1 + d(4) * b2).normalized();
    };

    Eigen::VectorXd res, res_try, tmp_p, tmp_m;
    residuals(r, t, res);
    double cost = res.squaredNorm();
    double lambda = 1e-3;
    Eigen::MatrixXd jac(static_cast<Eigen::Index>(n), 5);
    for (int it = 0; it < iterations; ++it) {
        constexpr double h = 1e-7;
        for (int p = 0; p < 5; ++p) {
            Eigen::Matrix<double, 5, 1> d = Eigen::Matrix<double, 5, 1>::Zero();
            Mat3 rp, rm;
            Vec3 tp, tm;
            d(p) = h;
            perturb(r, t, d, rp, tp);
            d(p) = -h;
            perturb(r, t, d, rm, tm);
            residuals(rp, tp, tmp_p);
            residuals(rm, tm, tmp_m);
            jac.col(p) = (tmp_p - tmp_m) / (2 * h);
        }
        const Eigen::Matrix<double, 5, 5> jtj = jac.transpose() * jac;
        const Eigen::Matrix<double, 5, 1> jtr = jac.transpose() * res;
        bool improved = false;
        for (int tries = 0; tries < 8 && !improved; ++tries) {
            Eigen::Matrix<double, 5, 5> a = jtj;
            a.diagonal() += lambda * (jtj.diagonal().array() + 1e-12).matrix();
            const Eigen::Matrix<double, 5, 1> step = -a.ldlt().solve(jtr);
            Mat3 rn;
            Vec3 tn;
            perturb(r, t, step, rn, tn);
            residuals(rn, tn, res_try);
            const double c = res_try.squaredNorm();
            if (c < cost) {
                r = rn;
                t = tn;
                res = res_try;
                const double rel = (cost - c) / std::max(cost, 1e-300);
                cost = c;
                lambda = std::max(lambda * 0.1, 1e-12);
                improved = true;
                if (rel < 1e-12) it = iterations;
            } else {
                lambda *= 10.0;
            }
        }
        if (!improved) break;
    }
    const Mat3 e = skew(t) * r;
    return e / e.norm();
}

} // namespace detail

/// Robust essential-matrix estimation: 8-point minimal samples, Sampson scoring in pixels,
/// local optimization on the essential manifold for every sample with a usable consensus.
/// Correspondences are canonically ordered before sampling so the result does not depend
/// on input order.
inline RansacResult estimate_essential_ransac(std::span<const Correspondence> corrs, const CameraIntrinsics& k,
                                              const RansacConfig& cfg = {}) {
    if (corrs.size() < 8)
        throw Error(Errc::insufficient_correspondences, "need at least 8 correspondences, got " + std::to_string(corrs.size()));
    if (cfg.max_iterations < 1 || !(cfg.sampson_threshold > 0))
        throw Error(Errc::precondition, "invalid RANSAC configuration");

    const std::size_t n = corrs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
        const auto& a = corrs[i];
        const auto& b = corrs[j];
        return std::tie(a.pixel_a.x(), a.pixel_a.y(), a.pixel_b.x(), a.pixel_b.y()) <
               std::tie(b.pixel_a.x(), b.pixel_a.y(), b.pixel_b.x(), b.pixel_b.y());
    });
    std::vector<Correspondence> sorted(n);
    std::vector<Vec2> na(n), nb(n);
    for (std::size_t i = 0; i < n; ++i) {
        sorted[i] = corrs[order[i]];
        na[i] = k.normalized(sorted[i].pixel_a).head<2>();
        nb[i] = k.normalized(sorted[i].pixel_b).head<2>();
    }

    const double thr = cfg.sampson_threshold;
    struct Score {
        double cost = std::numeric_limits<double>::infinity();
        std::size_t inliers = 0;
    };
    auto score = [&](const Mat3& e, std::vector<bool>* mask) {
        const Mat3 f = fundamental_from_essential(e, k);
        Score s{0.0, 0};
        for (std::size_t i = 0; i < n; ++i) {
            const double d = sampson_distance(f, sorted[i]);
            const bool in = d < thr;
            if (mask) (*mask)[i] = in;
            if (in) ++s.inliers;
            s.cost += std::min(d * d, thr * thr);
        }
        return s;
    };

    Mat3 best_e = Mat3::Zero();
    Score best;
    std::vector<bool> mask(n, false);
    std::vector<Correspondence> subset;

    // Inlier-set re-fit (linear, then manifold LM) until the truncated cost stops dropping.
    auto local_optimize = [&](Mat3 e, Score s) {
        for (int round = 0; round < 4; ++round) {
            score(e, &mask);
            subset.clear();
            std::vector<Vec2> ia, ib;
            for (std::size_t i = 0; i < n; ++i)
                if (mask[i]) {
                    subset.push_back(sorted[i]);
                    ia.push_back(na[i]);
                    ib.push_back(nb[i]);
                }
            if (subset.size() < 8) break;
            Mat3 cand = detail::refine_essential(e, subset, k);
            Score cs = score(cand, nullptr);
            const Mat3 lin = eight_point_essential(ia, ib);
            if (lin.allFinite()) {
                const Mat3 lin_ref = detail::refine_essential(lin, subset, k);
                const Score ls = score(lin_ref, nullptr);
                if (ls.cost < cs.cost) {
                    cand = lin_ref;
                    cs = ls;
                }
            }
            if (!(cs.cost < s.cost)) break;
            e = cand;
            s = cs;
        }
        return std::pair{e, s};
    };

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    std::array<Vec2, 8> sa, sb;
    long long needed = cfg.max_iterations;
    for (long long it = 0; it < needed && it < cfg.max_iterations; ++it) {
        for (std::size_t j = 0; j < 8; ++j) {
            std::uniform_int_distribution<std::size_t> pick(j, n - 1);
            std::swap(pool[j], pool[pick(rng)]);
            sa[j] = na[pool[j]];
            sb[j] = nb[pool[j]];
        }
        const Mat3 e = eight_point_essential(sa, sb);
        if (!e.allFinite() || e.norm() == 0) continue;
        Score s = score(e, nullptr);
        // Every sample with a usable consensus is polished: a clean but noisy 8-point fit often
        // scores worse raw than a lucky contaminated one and would otherwise be skipped.
        if (s.inliers < 8) continue;
        auto [le, ls] = local_optimize(e, s);
        if (!(ls.cost < best.cost)) continue;
        best = ls;
        best_e = le;
        const double w = static_cast<double>(best.inliers) / static_cast<double>(n);
        const double denom = std::log(1.0 - std::pow(w, 8));
        if (w >= 1.0) {
            needed = it + 1;
        } else if (denom < 0) {
            needed = std::min<long long>(cfg.max_iterations,
                                         static_cast<long long>(std::ceil(std::log(1.0 - cfg.confidence) / denom)));
        }
    }

    const Score final_score = best.inliers > 0 ? score(best_e, &mask) : Score{};
    if (final_score.inliers < std::max<std::size_t>(cfg.min_inliers, 8))
        throw Error(Errc::estimation_failed,
                    "best model has " + std::to_string(final_score.inliers) + " inliers, need " + std::to_string(cfg.min_inliers));

    RansacResult out;
    out.essential.e = project_to_essential_manifold(best_e);
    out.inliers.assign(n, false);
    for (std::size_t i = 0; i < n; ++i) out.inliers[order[i]] = mask[i];
    out.inlier_count = final_score.inliers;
    return out;
}

/// Text dump of matches, one `ua va ub vb inlier` row per correspondence.
inline void write_matches(const std::string& path, std::span<const Correspondence> corrs, const std::vector<bool>& inliers) {
    std::ofstream os(path);
    if (!os) throw Error(Errc::io, "cannot write " + path);
    os.precision(10);
    for (std::size_t i = 0; i < corrs.size(); ++i)
        os << corrs[i].pixel_a.x() << ' ' << corrs[i].pixel_a.y() << ' ' << corrs[i].pixel_b.x() << ' '
           << corrs[i].pixel_b.y() << ' ' << (i < inliers.size() && inliers[i] ? 1 : 0) << '\n';
}

} // namespace vgnc
