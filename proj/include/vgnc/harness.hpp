#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "vgnc/features.hpp"
#include "vgnc/geometry.hpp"
#include "vgnc/io.hpp"
#include "vgnc/metrics.hpp"
#include "vgnc/splat.hpp"
#include "vgnc/valfilter.hpp"
#include "vgnc/vgnc.hpp"

namespace vgnc {

// ---------------------------------------------------------------- config files

inline void apply_config(const KeyValueConfig& kv, TrainConfig& c) {
    kv.get("total_iterations", c.total_iterations);
    kv.get("densify_from", c.densify_from);
    kv.get("densify_until", c.densify_until);
    kv.get("densify_interval", c.densify_interval);
    kv.get("validation_interval", c.validation_interval);
    kv.get("grad_threshold", c.grad_threshold);
    kv.get("split_scale_threshold", c.split_scale_threshold);
    kv.get("prune_opacity", c.prune_opacity);
    kv.get("count_cap_initial", c.count_cap_initial);
    kv.get("fixed_cap", c.fixed_cap);
    kv.get("cap_growth_factor", c.cap_growth_factor);
    kv.get("loss_dssim_weight", c.loss_dssim_weight);
    kv.get("loss_scale", c.loss_scale);
    kv.get("lr_mean", c.lr.mean);
    kv.get("lr_mean_final", c.lr.mean_final);
    kv.get("lr_log_scale", c.lr.log_scale);
    kv.get("lr_rotation", c.lr.rotation);
    kv.get("lr_opacity", c.lr.opacity);
    kv.get("lr_color", c.lr.color);
    kv.get("overfit_window", c.overfit_window);
    kv.get("seed", c.seed);
    kv.get("number_control", c.number_control);
    kv.get("rise_detection", c.rise_detection);
    kv.get("refine_early_stop", c.refine_early_stop);
    kv.get("scene_extent", c.scene_extent);
    kv.get("checkpoint_interval", c.checkpoint_interval);
    std::string bg;
    kv.get("background", bg);
    if (!bg.empty()) {
        std::replace(bg.begin(), bg.end(), ',', ' ');
        const auto parts = split_ws(bg);
        if (parts.size() != 3) throw Error(Errc::parse, "config key background: expected three values");
        for (int i = 0; i < 3; ++i) c.background[i] = parse_double(parts[static_cast<std::size_t>(i)], "config key background");
    }
}

inline void apply_config(const KeyValueConfig& kv, FilterConfig& c) {
    kv.get("sigma", c.sigma);
    kv.get("theta", c.theta);
    kv.get("tau_fraction", c.tau_fraction);
    kv.get("max_fill_radius", c.max_fill_radius);
    std::string depth;
    kv.get("warp_depth", depth);
    if (depth == "unit") c.warp_depth = WarpDepth::unit;
    else if (depth == "median_scene") c.warp_depth = WarpDepth::median_scene;
    else if (!depth.empty()) throw Error(Errc::parse, "config key warp_depth: expected unit or median_scene");
    kv.get("ratio", c.match.ratio);
    kv.get("max_matches", c.match.max_matches);
    kv.get("mutual_check", c.match.mutual_check);
    kv.get("max_iterations", c.ransac.max_iterations);
    kv.get("sampson_threshold", c.ransac.sampson_threshold);
    kv.get("min_inliers", c.ransac.min_inliers);
    kv.get("contrast_threshold", c.detector.contrast_threshold);
    kv.get("edge_ratio", c.detector.edge_ratio);
    kv.get("upsample", c.detector.upsample);
    kv.get("max_features", c.detector.max_features);
}

// ---------------------------------------------------------------- joint initialization

struct InitConfig {
    double scale_factor = 0.5;       // isotropic scale = factor * mean distance to 3 nearest neighbours
    double merge_fraction = 0.001;   // merge radius as a fraction of the point-set extent
    double reprojection_gate = 2.0;  // px
    DetectorConfig detector{};
    MatchConfig match{};
};

namespace detail {

inline Vec3 sample_bilinear(const Image& img, const Vec2& p) {
    const double x = std::clamp(p.x(), 0.0, img.width() - 1.0), y = std::clamp(p.y(), 0.0, img.height() - 1.0);
    const int x0 = std::min(static_cast<int>(x), img.width() - 2 < 0 ? 0 : img.width() - 2);
    const int y0 = std::min(static_cast<int>(y), img.height() - 2 < 0 ? 0 : img.height() - 2);
    const int x1 = std::min(x0 + 1, img.width() - 1), y1 = std::min(y0 + 1, img.height() - 1);
    const double fx = x - x0, fy = y - y0;
    Vec3 out = Vec3::Zero();
    for (int c = 0; c < std::min(3, img.channels()); ++c)
        out[c] = (1 - fy) * ((1 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c)) +
                 fy * ((1 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c));
    if (img.channels() == 1) out[1] = out[2] = out[0];
    return out;
}

struct InitPoint {
    Vec3 position;
    Vec3 color;
};

} // namespace detail

/// Triangulated seed points from every pair of train and kept generated views (known poses).
inline GaussianCloud joint_initialize(const Scene& scene, const std::vector<std::size_t>& kept_generated,
                                      const InitConfig& cfg = {}) {
    std::vector<const SceneView*> views;
    for (const auto& v : scene.train) views.push_back(&v);
    for (auto j : kept_generated) {
        if (j >= scene.generated.size()) throw Error(Errc::precondition, "joint_initialize: kept index out of range");
        views.push_back(&scene.generated[j]);
    }
    if (views.size() < 2) throw Error(Errc::precondition, "joint_initialize: fewer than 2 usable views");

    std::vector<std::vector<Feature>> feats;
    for (const auto* v : views) feats.push_back(detect_and_describe(v->image, cfg.detector));

    std::vector<detail::InitPoint> pts;
    for (std::size_t a = 0; a < views.size(); ++a)
        for (std::size_t b = a + 1; b < views.size(); ++b) {
            const auto& va = views[a]->camera;
            const auto& vb = views[b]->camera;
            if ((va.pose.center() - vb.pose.center()).norm() <= 1e-10) continue;
            for (const auto& c : match_descriptors(feats[a], feats[b], cfg.match)) {
                Vec3 x;
                try {
                    x = triangulate(c, va, vb);
                } catch (const Error&) {
                    continue;
                }
                bool ok = true;
                for (const auto* side : {&va, &vb}) {
                    try {
                        const auto pr = project_point(x, *side);
                        const Vec2& obs = side == &va ? c.pixel_a : c.pixel_b;
                        if ((pr.pixel - obs).norm() > cfg.reprojection_gate) ok = false;
                    } catch (const Error&) {
                        ok = false;
                    }
                }
                if (!ok) continue;
                const Vec3 col = 0.5 * (detail::sample_bilinear(views[a]->image, c.pixel_a) +
                                        detail::sample_bilinear(views[b]->image, c.pixel_b));
                pts.push_back({x, col});
            }
        }
    if (pts.empty()) throw Error(Errc::estimation_failed, "joint_initialize: no triangulated point survived");

    // Merge near-duplicates greedily in discovery order; merged members are averaged.
    Vec3 lo = pts[0].position, hi = pts[0].position;
    for (const auto& p : pts) {
        lo = lo.cwiseMin(p.position);
        hi = hi.cwiseMax(p.position);
    }
    const double eps = cfg.merge_fraction * (hi - lo).norm();
    std::vector<detail::InitPoint> merged;
    std::vector<int> members;
    for (const auto& p : pts) {
        bool absorbed = false;
        for (std::size_t m = 0; m < merged.size() && eps > 0; ++m)
            if ((merged[m].position - p.position).norm() <= eps) {
                const double n = members[m];
                merged[m].position = (merged[m].position * n + p.position) / (n + 1);
                merged[m].color = (merged[m].color * n + p.color) / (n + 1);
                ++members[m];
                absorbed = true;
                break;
            }
        if (!absorbed) {
            merged.push_back(p);
            members.push_back(1);
        }
    }

    GaussianCloud cloud;
    const std::size_t n = merged.size();
    const double fallback = std::max((hi - lo).norm() * 0.01, 1e-4);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> d;
        d.reserve(n);
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) d.push_back((merged[i].position - merged[j].position).norm());
        const std::size_t kn = std::min<std::size_t>(3, d.size());
        std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(kn), d.end());
        double mean = kn ? std::accumulate(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(kn), 0.0) / kn : fallback;
        if (mean <= 1e-9) mean = fallback;
        Gaussian3D g;
        g.mean = merged[i].position;
        g.log_scale = Vec3::Constant(std::log(cfg.scale_factor * mean));
        g.rotation = Vec4(1, 0, 0, 0);
        g.opacity_logit = logit(0.1);
        g.color = merged[i].color.cwiseMax(0.0).cwiseMin(1.0);
        cloud.push_back(g);
    }
    return cloud;
}

// ---------------------------------------------------------------- training views

inline TrainViews make_train_views(const Scene& s, const std::vector<std::size_t>& kept_generated) {
    TrainViews v;
    for (const auto& x : s.train) v.train.push_back({&x.image, x.camera});
    for (auto j : kept_generated) v.validation.push_back({&s.generated.at(j).image, s.generated[j].camera});
    for (const auto& x : s.test) v.test.push_back({&x.image, x.camera});
    return v;
}

inline std::vector<std::size_t> filter_scene(const Scene& s, const FilterConfig& cfg, FilterReport* report = nullptr) {
    std::vector<Image> in, gen;
    for (const auto& v : s.train) in.push_back(v.image);
    for (const auto& v : s.generated) gen.push_back(v.image);
    return filter_generated_set(in, gen, s.k, cfg, report);
}

inline std::string format_filter_report(const FilterReport& rep, const Scene& s) {
    std::string out = "gen_index,path,closest_input,n_min,tau,kept\n";
    for (const auto& e : rep.entries)
        out += std::to_string(e.gen_index) + "," + s.generated.at(e.gen_index).path + "," + std::to_string(e.closest_input) +
               "," + std::to_string(e.n_min) + "," + format_double(rep.tau) + "," + (e.kept ? "1" : "0") + "\n";
    return out;
}

// ---------------------------------------------------------------- trace / checkpoints

inline std::string format_trace_csv(const MonitorTrace& t) {
    std::string out = "iter,num_gaussians,cap,monitor,train_psnr,test_psnr,phase\n";
    for (const auto& r : t.records()) {
        out += std::to_string(r.iteration) + "," + std::to_string(r.gaussian_count) + "," + std::to_string(r.cap) + "," +
               format_double(r.monitor) + "," + format_double(r.train_psnr) + "," +
               (r.test_psnr ? format_double(*r.test_psnr) : std::string{}) + "," + phase_name(r.phase) + "\n";
    }
    return out;
}

inline std::string format_optimizer_state(const AdamState& s) {
    std::string out = "step " + std::to_string(s.step) + "\n";
    for (std::size_t i = 0; i < s.size(); ++i) {
        for (double v : s.m[i]) out += format_double(v) + " ";
        for (std::size_t k = 0; k < kParamsPerGaussian; ++k) out += format_double(s.v[i][k]) + (k + 1 < kParamsPerGaussian ? " " : "\n");
    }
    return out;
}

inline CheckpointFn checkpoint_writer(const fs::path& dir) {
    return [dir](std::size_t it, const GaussianCloud& c, const AdamState& s, const MonitorTrace& t) {
        char name[32];
        std::snprintf(name, sizeof name, "ckpt_%06zu", it);
        const fs::path d = dir / name;
        fs::create_directories(d);
        write_ply(d / "cloud.ply", c);
        write_text(d / "optimizer.txt", format_optimizer_state(s));
        write_text(d / "trace.csv", format_trace_csv(t));
    };
}

// ---------------------------------------------------------------- evaluation

struct EvalRow {
    std::string path;
    double psnr = 0.0;
    double ssim = 0.0;
};

inline std::vector<EvalRow> evaluate(const GaussianCloud& cloud, const std::vector<SceneView>& views, const Vec3& background) {
    RenderSettings rs;
    rs.background = background;
    std::vector<EvalRow> out;
    for (const auto& v : views) {
        const Image r = render(cloud, v.camera, rs);
        out.push_back({v.path, psnr(v.image, r), ssim(v.image, r)});
    }
    return out;
}

// ---------------------------------------------------------------- sweep

struct SweepRow {
    std::size_t cap = 0;
    std::size_t count = 0;
    double train_psnr = 0.0;
    double test_psnr = 0.0;
    double monitor = 0.0;
};

/// One fixed-cap run per entry, number control off, same seed and initial cloud.
inline std::vector<SweepRow> run_sweep(const TrainViews& views, const GaussianCloud& init, const std::vector<std::size_t>& caps,
                                       TrainConfig cfg) {
    if (caps.empty()) throw Error(Errc::precondition, "run_sweep: no caps");
    RenderSettings rs;
    rs.background = cfg.background;
    cfg.number_control = false;
    std::vector<SweepRow> rows;
    for (auto cap : caps) {
        if (cap == 0) throw Error(Errc::precondition, "run_sweep: cap must be positive");
        cfg.fixed_cap = cap;
        const auto res = vgnc_train(views, init, cfg);
        rows.push_back({cap, res.cloud.size(), mean_psnr_over(res.cloud, views.train, rs),
                        mean_psnr_over(res.cloud, views.test, rs), validation_monitor(res.cloud, views.validation, rs)});
    }
    return rows;
}

inline std::string format_sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "cap,num_gaussians,train_psnr,test_psnr,monitor\n";
    for (const auto& r : rows)
        out += std::to_string(r.cap) + "," + std::to_string(r.count) + "," + format_double(r.train_psnr) + "," +
               format_double(r.test_psnr) + "," + format_double(r.monitor) + "\n";
    return out;
}

inline std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
    const auto t = parse_csv(text, "sweep csv");
    std::vector<SweepRow> rows;
    for (const auto& r : t.rows)
        rows.push_back({static_cast<std::size_t>(parse_int(r[t.column("cap")], "cap")),
                        static_cast<std::size_t>(parse_int(r[t.column("num_gaussians")], "num_gaussians")),
                        parse_double(r[t.column("train_psnr")], "train_psnr"), parse_double(r[t.column("test_psnr")], "test_psnr"),
                        parse_double(r[t.column("monitor")], "monitor")});
    return rows;
}

// ---------------------------------------------------------------- plots

/// SVG line chart: first column is x, every other numeric column is a series scaled to its own range.
inline std::string emit_plot_svg(const std::string& csv_text, const std::string& title = "") {
    const auto t = parse_csv(csv_text, "plot csv");
    if (t.rows.empty()) throw Error(Errc::parse, "plot csv: no data rows");
    if (t.header.size() < 2) throw Error(Errc::parse, "plot csv: need an x column and at least one series");

    auto numeric = [](const std::string& s, double& v) {
        if (s.empty()) return false;
        char* end = nullptr;
        v = std::strtod(s.c_str(), &end);
        return end && *end == '\0' && std::isfinite(v);
    };
    auto short_num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4g", v);
        return std::string(buf);
    };
    std::vector<double> xs;
    for (const auto& r : t.rows) {
        double v;
        if (!numeric(r[0], v)) throw Error(Errc::parse, "plot csv: non-numeric x value '" + r[0] + "'");
        xs.push_back(v);
    }
    const double xmin = *std::min_element(xs.begin(), xs.end()), xmax = *std::max_element(xs.begin(), xs.end());
    const bool logx = xmin > 0 && xmax / xmin > 50;
    auto xmap = [&](double x) {
        const double a = logx ? std::log10(x) : x, lo = logx ? std::log10(xmin) : xmin, hi = logx ? std::log10(xmax) : xmax;
        return 60.0 + (hi > lo ? (a - lo) / (hi - lo) : 0.5) * 520.0;
    };

    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"400\" viewBox=\"0 0 800 400\">\n";
    svg << "<rect x=\"0\" y=\"0\" width=\"800\" height=\"400\" fill=\"white\"/>\n";
    if (!title.empty()) svg << "<text x=\"320\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
    svg << "<line x1=\"60\" y1=\"350\" x2=\"580\" y2=\"350\" stroke=\"black\"/>\n";
    svg << "<line x1=\"60\" y1=\"40\" x2=\"60\" y2=\"350\" stroke=\"black\"/>\n";
    svg << "<text x=\"320\" y=\"385\" text-anchor=\"middle\" font-size=\"12\">" << t.header[0] << (logx ? " (log)" : "")
        << "</text>\n";
    svg << "<text x=\"20\" y=\"195\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 20 195)\">"
        << "value (per-series range)</text>\n";
    svg << "<text x=\"60\" y=\"365\" text-anchor=\"middle\" font-size=\"10\">" << short_num(xmin) << "</text>\n";
    svg << "<text x=\"580\" y=\"365\" text-anchor=\"middle\" font-size=\"10\">" << short_num(xmax) << "</text>\n";

    std::size_t series = 0;
    for (std::size_t c = 1; c < t.header.size(); ++c) {
        std::vector<std::pair<double, double>> pts;
        bool all_numeric = true;
        for (std::size_t r = 0; r < t.rows.size(); ++r) {
            double v;
            if (numeric(t.rows[r][c], v)) pts.emplace_back(xs[r], v);
            else if (!t.rows[r][c].empty()) all_numeric = false;
        }
        if (!all_numeric || pts.empty()) continue;
        double lo = pts[0].second, hi = pts[0].second;
        for (const auto& p : pts) {
            lo = std::min(lo, p.second);
            hi = std::max(hi, p.second);
        }
        const char* color = palette[series % std::size(palette)];
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < pts.size(); ++i) {
            const double y = 350.0 - (hi > lo ? (pts[i].second - lo) / (hi - lo) : 0.5) * 300.0;
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.2f,%.2f", xmap(pts[i].first), y);
            svg << (i ? " " : "") << buf;
        }
        svg << "\"/>\n";
        const double ly = 50.0 + 18.0 * static_cast<double>(series);
        svg << "<line x1=\"595\" y1=\"" << ly << "\" x2=\"615\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        svg << "<text x=\"620\" y=\"" << ly + 4 << "\" font-size=\"11\">" << t.header[c] << " [" << short_num(lo) << ", "
            << short_num(hi) << "]</text>\n";
        ++series;
    }
    if (series == 0) throw Error(Errc::parse, "plot csv: no numeric series");
    svg << "</svg>\n";
    return svg.str();
}

inline void emit_plots(const fs::path& csv_path, const fs::path& svg_path) {
    write_text(svg_path, emit_plot_svg(read_text(csv_path), csv_path.filename().string()));
}

} // namespace vgnc
