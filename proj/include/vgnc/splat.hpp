#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "vgnc/error.hpp"
#include "vgnc/geometry.hpp"
#include "vgnc/image.hpp"

namespace vgnc {

using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// One anisotropic Gaussian. Scale lives in the log domain, opacity as a logit, rotation
/// as a Hamilton quaternion (w, x, y, z), color as plain RGB.
struct Gaussian3D {
    Vec3 mean = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    Vec4 rotation = Vec4(1, 0, 0, 0);
    double opacity_logit = 0.0;
    Vec3 color = Vec3::Zero();

    double opacity() const { return sigmoid(opacity_logit); }
    Vec3 scale() const { return log_scale.array().exp(); }
};

/// Structure-of-arrays Gaussian model.
class GaussianCloud {
public:
    std::vector<Vec3> means;
    std::vector<Vec3> log_scales;
    std::vector<Vec4> rotations;
    std::vector<double> opacity_logits;
    std::vector<Vec3> colors;

    std::size_t size() const noexcept { return means.size(); }
    bool empty() const noexcept { return means.empty(); }

    void push_back(const Gaussian3D& g) {
        means.push_back(g.mean);
        log_scales.push_back(g.log_scale);
        rotations.push_back(g.rotation);
        opacity_logits.push_back(g.opacity_logit);
        colors.push_back(g.color);
    }

    Gaussian3D operator[](std::size_t i) const {
        return {means[i], log_scales[i], rotations[i], opacity_logits[i], colors[i]};
    }

    void set(std::size_t i, const Gaussian3D& g) {
        means[i] = g.mean;
        log_scales[i] = g.log_scale;
        rotations[i] = g.rotation;
        opacity_logits[i] = g.opacity_logit;
        colors[i] = g.color;
    }

    /// Keep only the listed rows, in the listed order.
    void select(std::span<const std::size_t> rows) {
        auto pick = [&](auto& v) {
            std::remove_reference_t<decltype(v)> out;
            out.reserve(rows.size());
            for (auto r : rows) out.push_back(v[r]);
            v.swap(out);
        };
        pick(means);
        pick(log_scales);
        pick(rotations);
        pick(opacity_logits);
        pick(colors);
    }

    bool consistent() const {
        const auto n = means.size();
        return log_scales.size() == n && rotations.size() == n && opacity_logits.size() == n && colors.size() == n;
    }
};

struct RenderSettings {
    Vec3 background = Vec3::Zero();
    double near_plane = 0.01;
    double dilation = 0.3;
    double min_alpha = 1.0 / 255.0;
    double min_transmittance = 1e-4;
    double eigen_floor = 1e-6;
    int tile_size = 8;
};

/// Screen-space footprint of a Gaussian, with the intermediates the backward pass needs.
struct Splat2D {
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Identity();
    double depth = 0.0;
    std::size_t source = 0;

    Mat2 conic = Mat2::Identity();
    double opacity = 0.0;
    Vec3 color = Vec3::Zero();
    int x_min = 0, x_max = -1, y_min = 0, y_max = -1;
    // backward intermediates
    Vec3 cam = Vec3::Zero();
    Eigen::Matrix<double, 2, 3> jw = Eigen::Matrix<double, 2, 3>::Zero();
    Mat3 cov3d = Mat3::Zero();
    Mat3 rot = Mat3::Identity();
    Vec3 scale = Vec3::Ones();
    Vec4 qhat = Vec4(1, 0, 0, 0);
    double qnorm = 1.0;
};

namespace detail {

inline Mat3 rotation_matrix(const Vec4& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

/// d R / d q_k for the unnormalized formula above, k = w, x, y, z.
inline std::array<Mat3, 4> rotation_jacobian(const Vec4& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    std::array<Mat3, 4> d;
    d[0] << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
    d[1] << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
    d[2] << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
    d[3] << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
    return d;
}

} // namespace detail

/// EWA projection of one Gaussian. Returns nullopt when it is culled: behind the near plane,
/// too transparent to ever pass the alpha threshold, or with a footprint that misses the image.
inline std::optional<Splat2D> project_gaussian(const Gaussian3D& g, const CameraView& view,
                                               const RenderSettings& settings = {}) {
    const auto& k = view.intrinsics;
    Splat2D s;
    s.cam = view.pose.apply(g.mean);
    if (!(s.cam.z() > settings.near_plane)) return std::nullopt;
    const double tx = s.cam.x(), ty = s.cam.y(), tz = s.cam.z();
    s.depth = tz;
    s.mean2d = Vec2(k.fx * tx / tz + k.cx, k.fy * ty / tz + k.cy);

    s.qnorm = g.rotation.norm();
    if (!(s.qnorm > 0)) return std::nullopt;
    s.qhat = g.rotation / s.qnorm;
    s.rot = detail::rotation_matrix(s.qhat);
    s.scale = g.log_scale.array().exp();
    const Mat3 m = s.rot * s.scale.asDiagonal();
    s.cov3d = m * m.transpose();

    Eigen::Matrix<double, 2, 3> j;
    j << k.fx / tz, 0, -k.fx * tx / (tz * tz), 0, k.fy / tz, -k.fy * ty / (tz * tz);
    s.jw = j * view.pose.rotation;
    s.cov2d = s.jw * s.cov3d * s.jw.transpose();
    s.cov2d(0, 0) += settings.dilation;
    s.cov2d(1, 1) += settings.dilation;
    const double det = s.cov2d.determinant();
    const double half_tr = 0.5 * s.cov2d.trace();
    const double lambda_min = half_tr - std::sqrt(std::max(half_tr * half_tr - det, 0.0));
    if (lambda_min < settings.eigen_floor) {
        const double bump = settings.eigen_floor - lambda_min;
        s.cov2d(0, 0) += bump;
        s.cov2d(1, 1) += bump;
    }
    s.conic = s.cov2d.inverse();

    s.opacity = g.opacity();
    if (s.opacity < settings.min_alpha) return std::nullopt;
    // Pixels farther than this Mahalanobis radius fall below the alpha threshold.
    const double q_max = 2.0 * std::log(s.opacity / settings.min_alpha);
    const double rx = std::sqrt(q_max * s.cov2d(0, 0));
    const double ry = std::sqrt(q_max * s.cov2d(1, 1));
    s.x_min = std::max(0, static_cast<int>(std::ceil(s.mean2d.x() - rx)));
    s.x_max = std::min(k.width - 1, static_cast<int>(std::floor(s.mean2d.x() + rx)));
    s.y_min = std::max(0, static_cast<int>(std::ceil(s.mean2d.y() - ry)));
    s.y_max = std::min(k.height - 1, static_cast<int>(std::floor(s.mean2d.y() + ry)));
    if (s.x_min > s.x_max || s.y_min > s.y_max) return std::nullopt;
    s.color = g.color;
    return s;
}

/// Forward pass record: the image plus every (splat, alpha, transmittance) that touched a pixel.
struct RenderState {
    Image image;
    std::vector<Splat2D> splats;         // visible splats, front-to-back
    std::vector<int> splat_of_source;    // cloud index -> splat index or -1
    struct Contribution {
        std::uint32_t splat;
        double alpha;      // alpha-hat
        double gauss;      // exp(-q/2)
        double trans;      // transmittance before this splat
    };
    std::vector<Contribution> contributions;
    std::vector<std::uint32_t> pixel_begin; // size W*H + 1
    std::vector<double> final_trans;
};

inline RenderState render_forward(const GaussianCloud& cloud, const CameraView& view,
                                  const RenderSettings& settings = {}) {
    const auto& k = view.intrinsics;
    const int w = k.width, h = k.height;
    RenderState st;
    st.image = Image(w, h, 3);
    st.splat_of_source.assign(cloud.size(), -1);

    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (auto s = project_gaussian(cloud[i], view, settings)) {
            s->source = i;
            st.splats.push_back(*s);
        }
    }
    // Depth order; remaining ties broken by content so the cloud order never matters.
    std::sort(st.splats.begin(), st.splats.end(), [](const Splat2D& a, const Splat2D& b) {
        return std::tie(a.depth, a.mean2d.x(), a.mean2d.y(), a.opacity, a.color.x(), a.color.y(), a.color.z()) <
               std::tie(b.depth, b.mean2d.x(), b.mean2d.y(), b.opacity, b.color.x(), b.color.y(), b.color.z());
    });
    for (std::size_t i = 0; i < st.splats.size(); ++i) st.splat_of_source[st.splats[i].source] = static_cast<int>(i);

    const int ts = std::max(1, settings.tile_size);
    const int tiles_x = (w + ts - 1) / ts, tiles_y = (h + ts - 1) / ts;
    std::vector<std::vector<std::uint32_t>> tiles(static_cast<std::size_t>(tiles_x) * tiles_y);
    for (std::size_t i = 0; i < st.splats.size(); ++i) {
        const auto& s = st.splats[i];
        for (int ty = s.y_min / ts; ty <= s.y_max / ts; ++ty)
            for (int tx = s.x_min / ts; tx <= s.x_max / ts; ++tx)
                tiles[static_cast<std::size_t>(ty) * tiles_x + tx].push_back(static_cast<std::uint32_t>(i));
    }

    st.pixel_begin.assign(static_cast<std::size_t>(w) * h + 1, 0);
    st.final_trans.assign(static_cast<std::size_t>(w) * h, 1.0);
    std::vector<std::uint32_t> counts(static_cast<std::size_t>(w) * h, 0);
    std::vector<std::vector<RenderState::Contribution>> per_pixel(static_cast<std::size_t>(w) * h);

    const double log_min_alpha = std::log(settings.min_alpha);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto& list = tiles[static_cast<std::size_t>(y / ts) * tiles_x + x / ts];
            const std::size_t pix = static_cast<std::size_t>(y) * w + x;
            auto& contrib = per_pixel[pix];
            double trans = 1.0;
            Vec3 c = Vec3::Zero();
            for (std::uint32_t si : list) {
                const auto& s = st.splats[si];
                if (x < s.x_min || x > s.x_max || y < s.y_min || y > s.y_max) continue;
                const double dx = x - s.mean2d.x(), dy = y - s.mean2d.y();
                const double q = s.conic(0, 0) * dx * dx + 2 * s.conic(0, 1) * dx * dy + s.conic(1, 1) * dy * dy;
                if (-0.5 * q + std::log(s.opacity) < log_min_alpha - 1e-12) continue;
                const double gauss = std::exp(-0.5 * q);
                const double alpha = s.opacity * gauss;
                if (alpha < settings.min_alpha) continue;
                const double next = trans * (1.0 - alpha);
                if (next < settings.min_transmittance) break;
                contrib.push_back({si, alpha, gauss, trans});
                c += s.color * (alpha * trans);
                trans = next;
            }
            c += settings.background * trans;
            st.final_trans[pix] = trans;
            for (int ch = 0; ch < 3; ++ch) st.image.at(x, y, ch) = c[ch];
        }
    }
    std::size_t total = 0;
    for (std::size_t p = 0; p < per_pixel.size(); ++p) {
        st.pixel_begin[p] = static_cast<std::uint32_t>(total);
        total += per_pixel[p].size();
    }
    st.pixel_begin.back() = static_cast<std::uint32_t>(total);
    st.contributions.reserve(total);
    for (auto& v : per_pixel) st.contributions.insert(st.contributions.end(), v.begin(), v.end());
    return st;
}

/// Front-to-back alpha compositing of the depth-sorted projected Gaussians.
inline Image render(const GaussianCloud& cloud, const CameraView& view, const RenderSettings& settings = {}) {
    return render_forward(cloud, view, settings).image;
}

/// Per-Gaussian gradients of a scalar loss, plus densification statistics.
struct CloudGradients {
    std::vector<Vec3> means;
    std::vector<Vec3> log_scales;
    std::vector<Vec4> rotations;
    std::vector<double> opacity_logits;
    std::vector<Vec3> colors;
    std::vector<double> mean2d_grad_norm; // |dL/d(mean2d)| in normalized device coordinates
    std::vector<unsigned char> visible;

    explicit CloudGradients(std::size_t n = 0)
        : means(n, Vec3::Zero()), log_scales(n, Vec3::Zero()), rotations(n, Vec4::Zero()), opacity_logits(n, 0.0),
          colors(n, Vec3::Zero()), mean2d_grad_norm(n, 0.0), visible(n, 0) {}

    std::size_t size() const { return means.size(); }
};

/// Analytic backward pass through compositing, EWA projection and the parameter activations.
inline CloudGradients render_backward(const RenderState& st, const GaussianCloud& cloud, const CameraView& view,
                                      const Image& loss_grad, const RenderSettings& settings = {}) {
    require_same_shape(st.image, loss_grad, "loss gradient must match the rendered image");
    const auto& k = view.intrinsics;
    const int w = k.width, h = k.height;
    const std::size_t ns = st.splats.size();

    std::vector<Vec2> d_mean2d(ns, Vec2::Zero());
    std::vector<Mat2> d_conic(ns, Mat2::Zero());
    std::vector<double> d_opacity(ns, 0.0);
    std::vector<Vec3> d_color(ns, Vec3::Zero());

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t pix = static_cast<std::size_t>(y) * w + x;
            const Vec3 dl_dc(loss_grad.at(x, y, 0), loss_grad.at(x, y, 1), loss_grad.at(x, y, 2));
            if (dl_dc.isZero(0.0)) continue;
            Vec3 behind = settings.background;
            for (std::uint32_t ci = st.pixel_begin[pix + 1]; ci-- > st.pixel_begin[pix];) {
                const auto& c = st.contributions[ci];
                const auto& s = st.splats[c.splat];
                d_color[c.splat] += (c.alpha * c.trans) * dl_dc;
                const double dl_dalpha = c.trans * (s.color - behind).dot(dl_dc);
                behind = c.alpha * s.color + (1.0 - c.alpha) * behind;

                d_opacity[c.splat] += dl_dalpha * c.gauss;
                const double dl_dq = -0.5 * dl_dalpha * s.opacity * c.gauss;
                const Vec2 d(x - s.mean2d.x(), y - s.mean2d.y());
                d_mean2d[c.splat] += -2.0 * dl_dq * (s.conic * d);
                d_conic[c.splat] += dl_dq * (d * d.transpose());
            }
        }
    }

    CloudGradients g(cloud.size());
    for (std::size_t i = 0; i < ns; ++i) {
        const auto& s = st.splats[i];
        const std::size_t src = s.source;
        g.visible[src] = 1;
        g.colors[src] = d_color[i];
        g.opacity_logits[src] = d_opacity[i] * s.opacity * (1.0 - s.opacity);
        g.mean2d_grad_norm[src] = Vec2(d_mean2d[i].x() * 0.5 * w, d_mean2d[i].y() * 0.5 * h).norm();

        const Mat2 d_cov2d = -s.conic * d_conic[i] * s.conic;
        const Mat3 d_cov3d = s.jw.transpose() * d_cov2d * s.jw;
        const Eigen::Matrix<double, 2, 3> d_jw = 2.0 * d_cov2d * s.jw * s.cov3d;
        const Eigen::Matrix<double, 2, 3> d_j = d_jw * view.pose.rotation.transpose();

        const double tx = s.cam.x(), ty = s.cam.y(), tz = s.cam.z();
        const double fx = k.fx, fy = k.fy;
        Vec3 d_cam = Vec3::Zero();
        d_cam.x() += d_mean2d[i].x() * fx / tz;
        d_cam.y() += d_mean2d[i].y() * fy / tz;
        d_cam.z() += -d_mean2d[i].x() * fx * tx / (tz * tz) - d_mean2d[i].y() * fy * ty / (tz * tz);
        d_cam.z() += d_j(0, 0) * (-fx / (tz * tz)) + d_j(1, 1) * (-fy / (tz * tz)) +
                     d_j(0, 2) * (2 * fx * tx / (tz * tz * tz)) + d_j(1, 2) * (2 * fy * ty / (tz * tz * tz));
        d_cam.x() += d_j(0, 2) * (-fx / (tz * tz));
        d_cam.y() += d_j(1, 2) * (-fy / (tz * tz));
        g.means[src] = view.pose.rotation.transpose() * d_cam;

        const Mat3 m = s.rot * s.scale.asDiagonal();
        const Mat3 d_m = 2.0 * d_cov3d * m;
        Mat3 d_r;
        for (int c = 0; c < 3; ++c) {
            g.log_scales[src][c] = s.rot.col(c).dot(d_m.col(c)) * s.scale[c];
            d_r.col(c) = d_m.col(c) * s.scale[c];
        }
        const auto dr_dq = detail::rotation_jacobian(s.qhat);
        Vec4 d_qhat;
        for (int q = 0; q < 4; ++q) d_qhat[q] = (dr_dq[q].array() * d_r.array()).sum();
        g.rotations[src] = (d_qhat - s.qhat * s.qhat.dot(d_qhat)) / s.qnorm;
    }
    return g;
}

inline CloudGradients render_with_gradients(const GaussianCloud& cloud, const CameraView& view, const Image& loss_grad,
                                            const RenderSettings& settings = {}) {
    return render_backward(render_forward(cloud, view, settings), cloud, view, loss_grad, settings);
}

} // namespace vgnc
