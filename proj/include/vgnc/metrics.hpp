#pragma once

#include <cmath>
#include <vector>

#include "vgnc/image.hpp"

namespace vgnc {

/// Mean squared error pooled over every pixel and channel.
inline double mse(const Image& a, const Image& b) {
    require_same_shape(a, b, "mse");
    const auto da = a.data(), db = b.data();
    double s = 0.0;
    for (std::size_t i = 0; i < da.size(); ++i) s += (da[i] - db[i]) * (da[i] - db[i]);
    return da.empty() ? 0.0 : s / static_cast<double>(da.size());
}

constexpr double kPsnrCap = 120.0;

inline double psnr_from_mse(double m) { return m < 1e-12 ? kPsnrCap : -10.0 * std::log10(m); }

inline double psnr(const Image& a, const Image& b) { return psnr_from_mse(mse(a, b)); }

namespace detail {

/// 11-tap Gaussian (sigma 1.5) separable blur; at borders the truncated window is renormalized.
class SsimWindow {
public:
    static constexpr int kRadius = 5;

    SsimWindow() {
        double s = 0.0;
        for (int i = -kRadius; i <= kRadius; ++i) s += (taps_[i + kRadius] = std::exp(-(i * i) / (2.0 * 1.5 * 1.5)));
        for (auto& t : taps_) t /= s;
    }

    /// Sum of taps that land inside [0, n) around position p.
    double coverage(int p, int n) const {
        double s = 0.0;
        for (int i = -kRadius; i <= kRadius; ++i)
            if (p + i >= 0 && p + i < n) s += taps_[i + kRadius];
        return s;
    }

    std::vector<double> blur(const std::vector<double>& in, int w, int h) const { return apply(in, w, h, false); }
    std::vector<double> blur_transpose(const std::vector<double>& in, int w, int h) const { return apply(in, w, h, true); }

private:
    double taps_[2 * kRadius + 1]{};

    // out(p) = sum_q k(q-p) in(q) / Z(p); its transpose is out(q) = sum_p k(q-p) in(p) / Z(p).
    std::vector<double> pass(const std::vector<double>& in, int w, int h, bool along_x, bool transpose) const {
        std::vector<double> out(in.size(), 0.0);
        const int n = along_x ? w : h;
        std::vector<double> inv_z(static_cast<std::size_t>(n));
        for (int p = 0; p < n; ++p) inv_z[static_cast<std::size_t>(p)] = 1.0 / coverage(p, n);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const int p = along_x ? x : y;
                double acc = 0.0;
                for (int i = -kRadius; i <= kRadius; ++i) {
                    const int q = p + i;
                    if (q < 0 || q >= n) continue;
                    const std::size_t idx = along_x ? static_cast<std::size_t>(y) * w + q : static_cast<std::size_t>(q) * w + x;
                    acc += taps_[i + kRadius] * in[idx] * (transpose ? inv_z[static_cast<std::size_t>(q)] : 1.0);
                }
                out[static_cast<std::size_t>(y) * w + x] = transpose ? acc : acc * inv_z[static_cast<std::size_t>(p)];
            }
        }
        return out;
    }

    std::vector<double> apply(const std::vector<double>& in, int w, int h, bool transpose) const {
        if (transpose) return pass(pass(in, w, h, false, true), w, h, true, true);
        return pass(pass(in, w, h, true, false), w, h, false, false);
    }
};

struct SsimResult {
    double value = 0.0;
    Image grad_a; // d(mean SSIM)/d(a)
};

inline SsimResult ssim_impl(const Image& a, const Image& b, bool want_grad) {
    require_same_shape(a, b, "ssim");
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    static const SsimWindow win;
    const int w = a.width(), h = a.height(), ch = a.channels();
    const std::size_t n = static_cast<std::size_t>(w) * h;
    SsimResult res;
    if (want_grad) res.grad_a = Image(w, h, ch, 0.0);
    if (n == 0 || ch == 0) {
        res.value = 1.0;
        return res;
    }
    const double norm = 1.0 / static_cast<double>(n * static_cast<std::size_t>(ch));
    double total = 0.0;
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (int c = 0; c < ch; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            const int px = static_cast<int>(i % static_cast<std::size_t>(w)), py = static_cast<int>(i / static_cast<std::size_t>(w));
            x[i] = a.at(px, py, c);
            y[i] = b.at(px, py, c);
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = win.blur(x, w, h), my = win.blur(y, w, h);
        const auto exx = win.blur(xx, w, h), eyy = win.blur(yy, w, h), exy = win.blur(xy, w, h);
        std::vector<double> d_mx(want_grad ? n : 0), d_exx(want_grad ? n : 0), d_exy(want_grad ? n : 0);
        for (std::size_t i = 0; i < n; ++i) {
            const double sxx = exx[i] - mx[i] * mx[i], syy = eyy[i] - my[i] * my[i], sxy = exy[i] - mx[i] * my[i];
            const double a1 = 2 * mx[i] * my[i] + c1, a2 = 2 * sxy + c2;
            const double b1 = mx[i] * mx[i] + my[i] * my[i] + c1, b2 = sxx + syy + c2;
            const double s = (a1 * a2) / (b1 * b2);
            total += s;
            if (!want_grad) continue;
            d_mx[i] = norm * ((2 * my[i] * a2 - 2 * my[i] * a1) / (b1 * b2) - s * (2 * mx[i] / b1 - 2 * mx[i] / b2));
            d_exx[i] = norm * (-s / b2);
            d_exy[i] = norm * (2 * a1 / (b1 * b2));
        }
        if (!want_grad) continue;
        const auto g_mx = win.blur_transpose(d_mx, w, h);
        const auto g_exx = win.blur_transpose(d_exx, w, h);
        const auto g_exy = win.blur_transpose(d_exy, w, h);
        for (std::size_t i = 0; i < n; ++i) {
            const int px = static_cast<int>(i % static_cast<std::size_t>(w)), py = static_cast<int>(i / static_cast<std::size_t>(w));
            res.grad_a.at(px, py, c) = g_mx[i] + 2 * x[i] * g_exx[i] + y[i] * g_exy[i];
        }
    }
    res.value = total * norm;
    return res;
}

} // namespace detail

/// Windowed SSIM averaged over channels and positions.
inline double ssim(const Image& a, const Image& b) { return detail::ssim_impl(a, b, false).value; }

/// SSIM together with its gradient with respect to the first image.
inline detail::SsimResult ssim_with_gradient(const Image& a, const Image& b) { return detail::ssim_impl(a, b, true); }

} // namespace vgnc
