#include <CLI11.hpp>

#include <iostream>
#include <sstream>

#include "vgnc/harness.hpp"
#include "vgnc/synth.hpp"

using namespace vgnc;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
};

struct Loaded {
    KeyValueConfig kv;
    TrainConfig train;
    FilterConfig filter;
    SynthConfig synth;
    std::string caps;
};

Loaded load_configs(const Common& c) {
    Loaded l;
    if (!c.config.empty()) l.kv = KeyValueConfig::load(c.config);
    apply_config(l.kv, l.train);
    apply_config(l.kv, l.filter);
    apply_config(l.kv, l.synth);
    l.kv.get("caps", l.caps);
    for (const auto& k : l.kv.unused()) std::cerr << "warning: unknown config key '" << k << "'\n";
    if (c.seed) {
        l.train.seed = *c.seed;
        l.filter.ransac.seed = *c.seed;
        l.synth.seed = *c.seed;
    }
    return l;
}

bool on_off(const std::string& v, const char* flag) {
    if (v == "on") return true;
    if (v == "off") return false;
    throw Error(Errc::precondition, std::string(flag) + " expects on or off");
}

fs::path out_dir(const Common& c) {
    fs::create_directories(c.out);
    return c.out;
}

std::vector<std::size_t> read_kept(const fs::path& p) {
    std::vector<std::size_t> kept;
    for (const auto& tok : split_ws(read_text(p))) kept.push_back(static_cast<std::size_t>(parse_int(tok, p.string())));
    return kept;
}

std::string join(const std::vector<std::size_t>& v) {
    std::string s;
    for (auto x : v) s += std::to_string(x) + "\n";
    return s;
}

/// Kept generated views come from a file when given, otherwise the filter runs now.
std::vector<std::size_t> kept_views(const Scene& s, const Loaded& cfg, const std::string& kept_file, const fs::path& out) {
    if (!kept_file.empty()) return read_kept(kept_file);
    FilterReport rep;
    const auto kept = filter_scene(s, cfg.filter, &rep);
    write_text(out / "filter_report.csv", format_filter_report(rep, s));
    write_text(out / "kept.txt", join(kept));
    std::cerr << "filter: kept " << kept.size() << "/" << s.generated.size() << " generated views\n";
    return kept;
}

GaussianCloud initial_cloud(const Scene& s, const std::vector<std::size_t>& kept, bool joint, const std::string& init_file) {
    if (!init_file.empty()) return read_ply(init_file);
    return joint_initialize(s, joint ? kept : std::vector<std::size_t>{});
}

std::vector<std::size_t> parse_caps(const std::string& text) {
    std::vector<std::size_t> caps;
    std::string t = text;
    std::replace(t.begin(), t.end(), ',', ' ');
    for (const auto& tok : split_ws(t)) {
        const auto v = parse_int(tok, "caps");
        if (v <= 0) throw Error(Errc::precondition, "caps must be positive");
        caps.push_back(static_cast<std::size_t>(v));
    }
    return caps;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Validation-guided Gaussian number control for sparse-view splatting"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--config", common.config, "key=value config file")->check(CLI::ExistingFile);
    app.add_option("--seed", common.seed, "seed overriding config seeds");
    app.add_option("--out", common.out, "output directory")->capture_default_str();

    std::string scene_path, kept_file, init_file, cloud_file, csv_file, caps = "100,300,1000,3000,10000";
    std::string joint_flag = "on", control_flag = "on";

    auto* synth = app.add_subcommand("synth", "write a synthetic scene (manifest, PNGs, ground-truth PLY)");
    auto* filter = app.add_subcommand("filter", "screen generated views against the train views");
    auto* init = app.add_subcommand("init", "triangulate an initial cloud");
    auto* train = app.add_subcommand("train", "optimize a cloud");
    auto* sweep = app.add_subcommand("sweep", "fixed-cap training runs, one CSV row per cap");
    auto* eval = app.add_subcommand("eval", "PSNR/SSIM of a cloud on the test views");
    auto* plot = app.add_subcommand("plot", "SVG chart of a trace or sweep CSV");

    for (auto* sc : {filter, init, train, sweep, eval})
        sc->add_option("--scene", scene_path, "scene manifest")->required()->check(CLI::ExistingFile);
    for (auto* sc : {init, train, sweep}) {
        sc->add_option("--kept", kept_file, "kept generated indices (from filter); filter runs if omitted")
            ->check(CLI::ExistingFile);
        sc->add_option("--joint-init", joint_flag, "on|off: seed from kept generated views too")->capture_default_str();
    }
    for (auto* sc : {train, sweep}) sc->add_option("--init", init_file, "initial cloud PLY")->check(CLI::ExistingFile);
    train->add_option("--number-control", control_flag, "on|off")->capture_default_str();
    sweep->add_option("--caps", caps, "comma-separated caps")->capture_default_str();
    eval->add_option("--cloud", cloud_file, "cloud PLY")->required()->check(CLI::ExistingFile);
    plot->add_option("--csv", csv_file, "trace or sweep CSV")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        const Loaded cfg = load_configs(common);
        const fs::path out = out_dir(common);

        if (*synth) {
            const auto s = make_synthetic_scene(cfg.synth);
            write_synthetic_scene(out, s);
            std::cout << (out / "scene.txt").string() << "\n";
            return 0;
        }
        if (*plot) {
            const fs::path svg = out / (fs::path(csv_file).stem().string() + ".svg");
            emit_plots(csv_file, svg);
            std::cout << svg.string() << "\n";
            return 0;
        }

        const Scene scene = load_scene(scene_path);
        if (*filter) {
            FilterReport rep;
            const auto kept = filter_scene(scene, cfg.filter, &rep);
            write_text(out / "filter_report.csv", format_filter_report(rep, scene));
            write_text(out / "kept.txt", join(kept));
            std::cout << "kept " << kept.size() << "/" << scene.generated.size() << "\n";
            return 0;
        }
        if (*eval) {
            const auto rows = evaluate(read_ply(cloud_file), scene.test, cfg.train.background);
            std::string csv = "path,psnr,ssim\n";
            double p = 0, s = 0;
            for (const auto& r : rows) {
                csv += r.path + "," + format_double(r.psnr) + "," + format_double(r.ssim) + "\n";
                p += r.psnr;
                s += r.ssim;
            }
            write_text(out / "eval.csv", csv);
            if (!rows.empty()) std::cout << "test psnr " << p / rows.size() << " ssim " << s / rows.size() << "\n";
            return 0;
        }

        const bool joint = on_off(joint_flag, "--joint-init");
        const auto kept = kept_views(scene, cfg, kept_file, out);
        if (*init) {
            const auto cloud = joint_initialize(scene, joint ? kept : std::vector<std::size_t>{});
            write_ply(out / "init.ply", cloud);
            std::cout << "initial cloud " << cloud.size() << "\n";
            return 0;
        }
        if (kept.empty()) throw Error(Errc::precondition, "no generated view survived the filter; nothing to validate on");
        const auto views = make_train_views(scene, kept);
        const auto cloud0 = initial_cloud(scene, kept, joint, init_file);

        if (*train) {
            TrainConfig tc = cfg.train;
            tc.number_control = on_off(control_flag, "--number-control");
            const auto res = vgnc_train(views, cloud0, tc, tc.checkpoint_interval ? checkpoint_writer(out / "checkpoints") : CheckpointFn{});
            write_ply(out / "cloud.ply", res.cloud);
            write_text(out / "trace.csv", format_trace_csv(res.trace));
            RenderSettings rs;
            rs.background = tc.background;
            std::ostringstream summary;
            summary << "initial_count," << cloud0.size() << "\nfinal_count," << res.cloud.size() << "\nnum_opt,"
                    << (res.chosen_count ? std::to_string(*res.chosen_count) : std::string{}) << "\nm_opt,"
                    << format_double(res.trace.m_opt()) << "\ntest_psnr," << format_double(mean_psnr_over(res.cloud, views.test, rs))
                    << "\n";
            write_text(out / "summary.csv", "key,value\n" + summary.str());
            std::cout << summary.str();
            return 0;
        }
        if (*sweep) {
            const std::string& cap_list = sweep->count("--caps") || cfg.caps.empty() ? caps : cfg.caps;
            const auto rows = run_sweep(views, cloud0, parse_caps(cap_list), cfg.train);
            write_text(out / "sweep.csv", format_sweep_csv(rows));
            std::cout << format_sweep_csv(rows);
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
