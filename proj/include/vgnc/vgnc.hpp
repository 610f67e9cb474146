#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vgnc/error.hpp"
#include "vgnc/image.hpp"
#include "vgnc/metrics.hpp"
#include "vgnc/splat.hpp"

namespace vgnc {

// ---------------------------------------------------------------- configuration

struct LearningRates {
    double mean = 0.00016;        // times scene extent; decays exponentially to mean_final
    double mean_final = 0.0000016;
    double log_scale = 0.005;
    double rotation = 0.001;
    double opacity = 0.05;
    double color = 0.0025;
};

struct TrainConfig {
    std::size_t total_iterations = 10000;
    std::size_t densify_from = 500;
    std::size_t densify_until = 5000;
    std::size_t densify_interval = 100;
    std::size_t validation_interval = 100;
    double grad_threshold = 0.0002;
    double split_scale_threshold = 0.01;
    double prune_opacity = 0.005;
    std::size_t count_cap_initial = 0;   // number control: starting cap, 0 = initial cloud size
    std::size_t fixed_cap = 0;           // without number control: hard cap, 0 = unlimited
    double cap_growth_factor = 1.3;
    double loss_dssim_weight = 0.2;
    double loss_scale = 1.0;
    LearningRates lr{};
    std::size_t overfit_window = 3;
    std::uint64_t seed = 0;

    bool number_control = true;          // false: fixed cap, no dropout, no cap growth
    bool rise_detection = true;          // false: GROW always runs to densify_until
    bool refine_early_stop = false;      // stop REFINE after 10 checks without improvement
    double scene_extent = 0.0;           // 0: derived from train camera centers
    Vec3 background = Vec3::Zero();
    std::size_t checkpoint_interval = 0; // 0: no checkpoints
    std::string checkpoint_dir;

    void validate() const {
        if (validation_interval == 0 || validation_interval > densify_until)
            throw Error(Errc::precondition, "validation_interval must be in (0, densify_until]");
        if (densify_interval == 0) throw Error(Errc::precondition, "densify_interval must be positive");
        if (loss_dssim_weight < 0 || loss_dssim_weight >= 1)
            throw Error(Errc::precondition, "loss_dssim_weight must be in [0,1)");
        if (overfit_window < 1) throw Error(Errc::precondition, "overfit_window must be >= 1");
        if (cap_growth_factor < 1) throw Error(Errc::precondition, "cap_growth_factor must be >= 1");
    }
};

// ---------------------------------------------------------------- loss

struct LossResult {
    double value = 0.0;
    Image grad; // dLoss/dRendered
};

/// loss_scale * ((1 - lambda) * mean|r - t| + lambda * (1 - SSIM(r, t)) / 2)
inline LossResult training_loss(const Image& rendered, const Image& target, double lambda, double loss_scale = 1.0) {
    require_same_shape(rendered, target, "training_loss");
    LossResult res{0.0, Image(rendered.width(), rendered.height(), rendered.channels(), 0.0)};
    const auto r = rendered.data(), t = target.data();
    const double n = static_cast<double>(r.size());
    if (r.empty()) return res;
    double l1 = 0.0;
    auto g = res.grad.data();
    for (std::size_t i = 0; i < r.size(); ++i) {
        const double d = r[i] - t[i];
        l1 += std::abs(d);
        g[i] = loss_scale * (1.0 - lambda) * ((d > 0) - (d < 0)) / n;
    }
    res.value = (1.0 - lambda) * l1 / n;
    if (lambda > 0) {
        const auto s = ssim_with_gradient(rendered, target);
        res.value += lambda * (1.0 - s.value) / 2.0;
        const auto sg = s.grad_a.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= loss_scale * lambda * 0.5 * sg[i];
    }
    res.value *= loss_scale;
    return res;
}

// ---------------------------------------------------------------- optimizer

/// Per-Gaussian parameter layout used by the optimizer.
constexpr std::size_t kParamsPerGaussian = 14; // mean 3, log_scale 3, rotation 4, opacity 1, color 3
using ParamRow = std::array<double, kParamsPerGaussian>;

struct AdamState {
    std::vector<ParamRow> m;
    std::vector<ParamRow> v;
    std::size_t step = 0;

    explicit AdamState(std::size_t n = 0) : m(n, ParamRow{}), v(n, ParamRow{}) {}
    std::size_t size() const { return m.size(); }

    void select(std::span<const std::size_t> rows) {
        std::vector<ParamRow> nm, nv;
        nm.reserve(rows.size());
        nv.reserve(rows.size());
        for (auto r : rows) {
            nm.push_back(m[r]);
            nv.push_back(v[r]);
        }
        m.swap(nm);
        v.swap(nv);
    }
};

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-15;
};

/// One bias-corrected Adam update of a flat parameter block (step counts from 1).
inline void adam_update(std::span<double> x, std::span<const double> g, std::span<double> m, std::span<double> v,
                        std::size_t step, double lr, const AdamHyper& h = {}) {
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < x.size(); ++i) {
        m[i] = h.beta1 * m[i] + (1 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1 - h.beta2) * g[i] * g[i];
        const double mh = m[i] / c1, vh = v[i] / c2;
        x[i] -= lr * mh / (std::sqrt(vh) + h.eps);
    }
}

inline double mean_learning_rate(const TrainConfig& cfg, std::size_t iteration, double extent) {
    const double t = cfg.total_iterations ? std::clamp(static_cast<double>(iteration) / cfg.total_iterations, 0.0, 1.0) : 0.0;
    const double lo = std::max(cfg.lr.mean_final, 1e-30), hi = std::max(cfg.lr.mean, 1e-30);
    if (cfg.lr.mean <= 0) return 0.0;
    return extent * std::exp(std::log(hi) * (1 - t) + std::log(lo) * t);
}

/// Adam step over all parameter groups; quaternions are renormalized afterwards.
inline void optimizer_step(GaussianCloud& cloud, const CloudGradients& grads, AdamState& state, const TrainConfig& cfg,
                           double mean_lr, const AdamHyper& hyper = {}) {
    if (state.size() != cloud.size() || grads.size() != cloud.size() || !cloud.consistent())
        throw Error(Errc::alignment, "optimizer state, gradients and cloud differ in length");
    ++state.step;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        adam_update({cloud.means[i].data(), 3}, {grads.means[i].data(), 3}, {m.data(), 3}, {v.data(), 3}, state.step, mean_lr, hyper);
        adam_update({cloud.log_scales[i].data(), 3}, {grads.log_scales[i].data(), 3}, {m.data() + 3, 3}, {v.data() + 3, 3},
                    state.step, cfg.lr.log_scale, hyper);
        adam_update({cloud.rotations[i].data(), 4}, {grads.rotations[i].data(), 4}, {m.data() + 6, 4}, {v.data() + 6, 4},
                    state.step, cfg.lr.rotation, hyper);
        adam_update({&cloud.opacity_logits[i], 1}, {&grads.opacity_logits[i], 1}, {m.data() + 10, 1}, {v.data() + 10, 1},
                    state.step, cfg.lr.opacity, hyper);
        adam_update({cloud.colors[i].data(), 3}, {grads.colors[i].data(), 3}, {m.data() + 11, 3}, {v.data() + 11, 3},
                    state.step, cfg.lr.color, hyper);
        const double qn = cloud.rotations[i].norm();
        if (qn > 0) cloud.rotations[i] /= qn;
        else cloud.rotations[i] = Vec4(1, 0, 0, 0);
    }
}

// ---------------------------------------------------------------- densification

struct DensifyStats {
    std::vector<double> grad_accum;
    std::vector<std::size_t> touches;

    explicit DensifyStats(std::size_t n = 0) : grad_accum(n, 0.0), touches(n, 0) {}
    std::size_t size() const { return grad_accum.size(); }

    void accumulate(const CloudGradients& g) {
        for (std::size_t i = 0; i < g.size(); ++i)
            if (g.visible[i]) {
                grad_accum[i] += g.mean2d_grad_norm[i];
                ++touches[i];
            }
    }

    double mean(std::size_t i) const { return touches[i] ? grad_accum[i] / static_cast<double>(touches[i]) : 0.0; }
    void reset(std::size_t n) { *this = DensifyStats(n); }
};

struct DensifyResult {
    std::size_t cloned = 0;
    std::size_t split = 0;
    std::size_t pruned = 0;
};

/// Clone/split high-gradient Gaussians in descending gradient order until `cap` binds, then
/// prune transparent ones. Optimizer rows follow the Gaussians; stats are reset.
inline DensifyResult densify_and_prune(GaussianCloud& cloud, DensifyStats& stats, AdamState& state, const TrainConfig& cfg,
                                       std::size_t cap, double scene_extent, std::mt19937_64& rng) {
    if (stats.size() != cloud.size() || state.size() != cloud.size())
        throw Error(Errc::alignment, "densify: stats/state misaligned with cloud");
    DensifyResult res;
    const std::size_t n0 = cloud.size();
    std::vector<std::size_t> cand;
    for (std::size_t i = 0; i < n0; ++i)
        if (stats.mean(i) > cfg.grad_threshold) cand.push_back(i);
    std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return stats.mean(a) > stats.mean(b); });

    std::normal_distribution<double> nrm;
    const double split_limit = cfg.split_scale_threshold * scene_extent;
    for (std::size_t i : cand) {
        if (cloud.size() >= cap) break;
        Gaussian3D g = cloud[i];
        const Vec3 s = g.scale();
        if (s.maxCoeff() <= split_limit) {
            cloud.push_back(g);
            ++res.cloned;
        } else {
            state.m[i].fill(0.0);
            state.v[i].fill(0.0);
            const Mat3 r = detail::rotation_matrix(g.rotation.normalized());
            Gaussian3D a = g, b = g;
            a.mean = g.mean + r * Vec3(s.x() * nrm(rng), s.y() * nrm(rng), s.z() * nrm(rng));
            b.mean = g.mean + r * Vec3(s.x() * nrm(rng), s.y() * nrm(rng), s.z() * nrm(rng));
            a.log_scale = b.log_scale = g.log_scale.array() - std::log(1.6);
            cloud.set(i, a);
            cloud.push_back(b);
            ++res.split;
        }
        // New rows start with fresh moments; an inherited second moment throttles their first steps.
        state.m.push_back({});
        state.v.push_back({});
    }

    std::vector<std::size_t> keep;
    keep.reserve(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i)
        if (sigmoid(cloud.opacity_logits[i]) >= cfg.prune_opacity) keep.push_back(i);
    res.pruned = cloud.size() - keep.size();
    if (res.pruned) {
        cloud.select(keep);
        state.select(keep);
    }
    stats.reset(cloud.size());
    return res;
}

/// Uniformly random survivors, exactly target_count of them, original order preserved.
inline std::vector<std::size_t> dropout_survivors(std::size_t count, std::size_t target_count, std::uint64_t seed) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), 0);
    if (count <= target_count) return idx;
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < target_count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, count - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(target_count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline void gaussian_dropout(GaussianCloud& cloud, AdamState& state, std::size_t target_count, std::uint64_t seed) {
    if (state.size() != cloud.size()) throw Error(Errc::alignment, "dropout: state misaligned with cloud");
    if (cloud.size() <= target_count) return;
    const auto keep = dropout_survivors(cloud.size(), target_count, seed);
    cloud.select(keep);
    state.select(keep);
}

// ---------------------------------------------------------------- monitor

struct ValidationView {
    const Image* image = nullptr;
    CameraView camera;
};

/// Mean over views of the per-pixel-per-channel squared error.
inline double validation_monitor(const GaussianCloud& cloud, std::span<const ValidationView> views,
                                 const RenderSettings& settings = {}) {
    if (views.empty()) throw Error(Errc::precondition, "validation_monitor: empty validation set");
    double sum = 0.0;
    for (const auto& v : views) sum += mse(*v.image, render(cloud, v.camera, settings));
    return sum / static_cast<double>(views.size());
}

enum class Phase { grow, dropped, refine };

inline const char* phase_name(Phase p) {
    switch (p) {
    case Phase::grow: return "GROW";
    case Phase::dropped: return "DROPPED";
    case Phase::refine: return "REFINE";
    }
    return "?";
}

struct MonitorRecord {
    std::size_t iteration = 0;
    std::size_t gaussian_count = 0;
    std::size_t cap = 0;
    double monitor = 0.0;
    double train_psnr = 0.0;
    std::optional<double> test_psnr;
    Phase phase = Phase::grow;
};

/// Validation history with the running optimum (M_opt, Num_opt).
class MonitorTrace {
public:
    void add(const MonitorRecord& r) {
        if (!records_.empty() && r.iteration <= records_.back().iteration)
            throw Error(Errc::precondition, "trace iterations must increase");
        records_.push_back(r);
        if (!best_ || r.monitor < records_[*best_].monitor) best_ = records_.size() - 1;
    }

    const std::vector<MonitorRecord>& records() const { return records_; }
    bool has_optimum() const { return best_.has_value(); }
    double m_opt() const { return best_ ? records_[*best_].monitor : std::numeric_limits<double>::infinity(); }
    std::size_t num_opt() const { return best_ ? records_[*best_].gaussian_count : 0; }
    std::size_t opt_iteration() const { return best_ ? records_[*best_].iteration : 0; }

private:
    std::vector<MonitorRecord> records_;
    std::optional<std::size_t> best_;
};

/// True iff the last W+1 monitor values strictly increase.
inline bool detect_overfit(std::span<const double> monitor, std::size_t window) {
    if (window == 0 || monitor.size() < window + 1) return false;
    for (std::size_t i = monitor.size() - window; i < monitor.size(); ++i)
        if (!(monitor[i] > monitor[i - 1])) return false;
    return true;
}

inline bool detect_overfit(const MonitorTrace& trace, std::size_t window, Phase phase = Phase::grow) {
    std::vector<double> m;
    for (const auto& r : trace.records())
        if (r.phase == phase) m.push_back(r.monitor);
    return detect_overfit(m, window);
}

// ---------------------------------------------------------------- training loop

struct ControllerState {
    Phase phase = Phase::grow;
    std::size_t cap = 0;
    std::size_t rises = 0;
};

struct TrainViews {
    std::vector<ValidationView> train;
    std::vector<ValidationView> validation;
    std::vector<ValidationView> test; // optional, only reported
};

struct TrainResult {
    GaussianCloud cloud;
    MonitorTrace trace;
    ControllerState controller;
    AdamState optimizer;
    std::size_t iterations_run = 0;
    std::optional<std::size_t> chosen_count;      // Num_opt when GROW ended
    std::optional<std::size_t> overfit_iteration;
};

inline double camera_extent(std::span<const ValidationView> views) {
    if (views.empty()) return 1.0;
    Vec3 c = Vec3::Zero();
    for (const auto& v : views) c += v.camera.pose.center();
    c /= static_cast<double>(views.size());
    double r = 0.0;
    for (const auto& v : views) r = std::max(r, (v.camera.pose.center() - c).norm());
    return 1.1 * std::max(r, 1e-6);
}

inline double mean_psnr_over(const GaussianCloud& cloud, std::span<const ValidationView> views, const RenderSettings& rs) {
    if (views.empty()) return 0.0;
    double s = 0.0;
    for (const auto& v : views) s += mse(*v.image, render(cloud, v.camera, rs));
    return psnr_from_mse(s / static_cast<double>(views.size()));
}

using CheckpointFn = std::function<void(std::size_t iteration, const GaussianCloud&, const AdamState&, const MonitorTrace&)>;

/// Validation-guided number control around a plain splatting optimizer.
inline TrainResult vgnc_train(const TrainViews& views, GaussianCloud cloud, const TrainConfig& cfg,
                              const CheckpointFn& checkpoint = {}) {
    cfg.validate();
    if (views.train.empty()) throw Error(Errc::precondition, "vgnc_train: no train views");
    if (views.validation.empty()) throw Error(Errc::precondition, "vgnc_train: no validation views");
    if (cloud.empty()) throw Error(Errc::precondition, "vgnc_train: empty initial cloud");

    RenderSettings rs;
    rs.background = cfg.background;
    const double extent = cfg.scene_extent > 0 ? cfg.scene_extent : camera_extent(views.train);
    std::mt19937_64 rng(cfg.seed);

    TrainResult out;
    auto& ctl = out.controller;
    const std::size_t unlimited = std::numeric_limits<std::size_t>::max();
    if (cfg.number_control) ctl.cap = cfg.count_cap_initial ? cfg.count_cap_initial : cloud.size();
    else ctl.cap = cfg.fixed_cap ? cfg.fixed_cap : unlimited;
    AdamState state(cloud.size());
    // The count never exceeds the active cap, including at the start.
    gaussian_dropout(cloud, state, ctl.cap, rng());
    DensifyStats stats(cloud.size());

    std::vector<std::size_t> order(views.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    std::size_t refine_cap = 0, stale_checks = 0;
    double refine_best = std::numeric_limits<double>::infinity();

    for (std::size_t it = 1; it <= cfg.total_iterations; ++it) {
        if (cursor == order.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        const auto& tv = views.train[order[cursor++]];
        const auto st = render_forward(cloud, tv.camera, rs);
        const auto loss = training_loss(st.image, *tv.image, cfg.loss_dssim_weight, cfg.loss_scale);
        const auto grads = render_backward(st, cloud, tv.camera, loss.grad, rs);
        stats.accumulate(grads);
        optimizer_step(cloud, grads, state, cfg, mean_learning_rate(cfg, it, extent));

        // The monitor sees the cloud trained at the current count, before this tick reshapes it.
        bool stop = false;
        if (it % cfg.validation_interval == 0) {
            MonitorRecord rec;
            rec.iteration = it;
            rec.gaussian_count = cloud.size();
            rec.cap = ctl.cap == unlimited ? 0 : ctl.cap;
            rec.monitor = validation_monitor(cloud, views.validation, rs);
            rec.train_psnr = mean_psnr_over(cloud, views.train, rs);
            if (!views.test.empty()) rec.test_psnr = mean_psnr_over(cloud, views.test, rs);
            rec.phase = ctl.phase;
            out.trace.add(rec);
            if (ctl.phase == Phase::grow) {
                const auto& recs = out.trace.records();
                ctl.rises = recs.size() >= 2 && recs[recs.size() - 2].phase == Phase::grow &&
                                    rec.monitor > recs[recs.size() - 2].monitor
                                ? ctl.rises + 1
                                : 0;
            } else if (cfg.refine_early_stop) {
                if (rec.monitor < refine_best) {
                    refine_best = rec.monitor;
                    stale_checks = 0;
                } else if (++stale_checks >= 10) {
                    stop = true;
                }
            }
        }

        const bool densify_tick = it >= cfg.densify_from && it % cfg.densify_interval == 0;
        if (ctl.phase == Phase::grow && densify_tick && it <= cfg.densify_until) {
            densify_and_prune(cloud, stats, state, cfg, ctl.cap, extent, rng);
            if (cfg.number_control && ctl.cap != unlimited)
                ctl.cap = static_cast<std::size_t>(std::ceil(static_cast<double>(ctl.cap) * cfg.cap_growth_factor));
        } else if (ctl.phase != Phase::grow && densify_tick) {
            if (cloud.size() < refine_cap) densify_and_prune(cloud, stats, state, cfg, refine_cap, extent, rng);
            ctl.phase = Phase::refine;
        }

        if (cfg.number_control && ctl.phase == Phase::grow) {
            const bool schedule_end = it >= cfg.densify_until;
            const bool overfit = cfg.rise_detection && it % cfg.validation_interval == 0 &&
                                 detect_overfit(out.trace, cfg.overfit_window);
            if ((schedule_end || overfit) && out.trace.has_optimum()) {
                if (overfit && !schedule_end) out.overfit_iteration = it;
                refine_cap = out.trace.num_opt();
                out.chosen_count = refine_cap;
                gaussian_dropout(cloud, state, refine_cap, rng());
                stats.reset(cloud.size());
                ctl.phase = Phase::dropped;
                ctl.cap = refine_cap;
                ctl.rises = 0;
            }
        }

        if (checkpoint && cfg.checkpoint_interval && it % cfg.checkpoint_interval == 0) checkpoint(it, cloud, state, out.trace);
        out.iterations_run = it;
        if (stop) break;
    }
    out.cloud = std::move(cloud);
    out.optimizer = std::move(state);
    return out;
}

} // namespace vgnc
