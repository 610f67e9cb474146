#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <png.h>

#include "vgnc/error.hpp"
#include "vgnc/geometry.hpp"
#include "vgnc/image.hpp"
#include "vgnc/splat.hpp"

namespace vgnc {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- PNG

/// Writes an 8-bit PNG: gray for 1 channel, RGB for 3. Values are clamped to [0,1].
inline void write_png(const fs::path& path, const Image& img) {
    if (img.channels() != 1 && img.channels() != 3)
        throw Error(Errc::precondition, "write_png: only 1 or 3 channels supported");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::vector<png_byte> bytes(img.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<png_byte>(std::lround(std::clamp(img.data()[i], 0.0, 1.0) * 255.0));
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width());
    pi.height = static_cast<png_uint_32>(img.height());
    pi.format = img.channels() == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&pi, path.string().c_str(), 0, bytes.data(), 0, nullptr))
        throw Error(Errc::io, "write_png: " + path.string() + ": " + pi.message);
}

/// Reads any PNG as 3-channel RGB in [0,1].
inline Image read_png(const fs::path& path) {
    if (!fs::exists(path)) throw Error(Errc::missing_file, path.string());
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.string().c_str()))
        throw Error(Errc::io, "read_png: " + path.string() + ": " + pi.message);
    pi.format = PNG_FORMAT_RGB;
    std::vector<png_byte> bytes(PNG_IMAGE_SIZE(pi));
    if (!png_image_finish_read(&pi, nullptr, bytes.data(), 0, nullptr)) {
        png_image_free(&pi);
        throw Error(Errc::io, "read_png: " + path.string() + ": " + pi.message);
    }
    Image img(static_cast<int>(pi.width), static_cast<int>(pi.height), 3);
    for (std::size_t i = 0; i < bytes.size(); ++i) img.data()[i] = bytes[i] / 255.0;
    return img;
}

/// Rounds to the 8-bit grid so in-memory images match what a PNG round-trip yields.
inline Image quantize8(Image img) {
    for (double& v : img.data()) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
    return img;
}

// ---------------------------------------------------------------- text helpers

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::missing_file, path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::io, "cannot write " + path.string());
    out << text;
}

inline std::vector<std::string> split_ws(const std::string& line) {
    std::istringstream is(line);
    std::vector<std::string> out;
    for (std::string tok; is >> tok;) out.push_back(tok);
    return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error(Errc::parse, where + ": not a number: '" + s + "'");
    }
}

inline long long parse_int(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error(Errc::parse, where + ": not an integer: '" + s + "'");
    }
}

// ---------------------------------------------------------------- key=value config

/// key=value lines; '#' starts a comment. Later keys override earlier ones.
class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(const std::string& text, const std::string& origin = "config") {
        KeyValueConfig cfg;
        std::istringstream is(text);
        std::string line;
        for (int no = 1; std::getline(is, line); ++no) {
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw Error(Errc::parse, origin + ":" + std::to_string(no) + ": expected key=value");
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
            };
            const std::string key = trim(line.substr(0, eq));
            if (key.empty()) throw Error(Errc::parse, origin + ":" + std::to_string(no) + ": empty key");
            cfg.values_[key] = trim(line.substr(eq + 1));
        }
        return cfg;
    }

    static KeyValueConfig load(const fs::path& path) { return parse(read_text(path), path.string()); }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    /// Overwrites `target` when the key is present; records the key as consumed.
    void get(const std::string& key, double& target) const {
        if (auto it = find(key)) target = parse_double(*it, "config key " + key);
    }
    void get(const std::string& key, int& target) const {
        if (auto it = find(key)) target = static_cast<int>(parse_int(*it, "config key " + key));
    }
    template <class U>
        requires(std::is_unsigned_v<U> && !std::is_same_v<U, bool>)
    void get(const std::string& key, U& target) const {
        if (auto it = find(key)) {
            const auto v = parse_int(*it, "config key " + key);
            if (v < 0) throw Error(Errc::parse, "config key " + key + " must be non-negative");
            target = static_cast<U>(v);
        }
    }
    void get(const std::string& key, bool& target) const {
        if (auto it = find(key)) {
            if (*it == "1" || *it == "true" || *it == "on") target = true;
            else if (*it == "0" || *it == "false" || *it == "off") target = false;
            else throw Error(Errc::parse, "config key " + key + ": expected a boolean");
        }
    }
    void get(const std::string& key, std::string& target) const {
        if (auto it = find(key)) target = *it;
    }

    /// Keys never looked up through get(); callers use this to reject typos.
    std::vector<std::string> unused() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : values_)
            if (!used_.count(k)) out.push_back(k);
        return out;
    }

private:
    std::map<std::string, std::string> values_;
    mutable std::set<std::string> used_;

    const std::string* find(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) return nullptr;
        used_.insert(key);
        return &it->second;
    }
};

// ---------------------------------------------------------------- PLY

/// ASCII PLY with activated values: x y z sx sy sz qw qx qy qz opacity r g b.
inline void write_ply(const fs::path& path, const GaussianCloud& cloud) {
    std::ostringstream os;
    os << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\n";
    for (const char* name : {"x", "y", "z", "sx", "sy", "sz", "qw", "qx", "qy", "qz", "opacity", "r", "g", "b"})
        os << "property double " << name << "\n";
    os << "end_header\n";
    os << std::setprecision(17);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Vec3 s = cloud.log_scales[i].array().exp();
        const Vec4 q = cloud.rotations[i].normalized();
        os << cloud.means[i].x() << ' ' << cloud.means[i].y() << ' ' << cloud.means[i].z() << ' ' << s.x() << ' '
           << s.y() << ' ' << s.z() << ' ' << q[0] << ' ' << q[1] << ' ' << q[2] << ' ' << q[3] << ' '
           << sigmoid(cloud.opacity_logits[i]) << ' ' << cloud.colors[i].x() << ' ' << cloud.colors[i].y() << ' '
           << cloud.colors[i].z() << '\n';
    }
    write_text(path, os.str());
}

inline GaussianCloud read_ply(const fs::path& path) {
    std::istringstream is(read_text(path));
    std::string line;
    std::size_t count = 0;
    std::vector<std::string> props;
    int no = 0;
    auto fail = [&](const std::string& why) {
        return Error(Errc::parse, path.string() + ":" + std::to_string(no) + ": " + why);
    };
    if (!std::getline(is, line) || (++no, line != "ply")) throw fail("missing ply magic");
    while (std::getline(is, line)) {
        ++no;
        const auto tok = split_ws(line);
        if (tok.empty()) continue;
        if (tok[0] == "end_header") break;
        if (tok[0] == "format" && (tok.size() < 2 || tok[1] != "ascii")) throw fail("only ascii PLY is supported");
        if (tok[0] == "element" && tok.size() == 3 && tok[1] == "vertex")
            count = static_cast<std::size_t>(parse_int(tok[2], path.string()));
        if (tok[0] == "property" && tok.size() == 3) props.push_back(tok[2]);
    }
    const std::vector<std::string> expected{"x", "y", "z", "sx", "sy", "sz", "qw", "qx", "qy", "qz", "opacity", "r", "g", "b"};
    if (props != expected) throw fail("unexpected vertex properties");
    GaussianCloud cloud;
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(is, line)) throw fail("truncated vertex list");
        ++no;
        const auto tok = split_ws(line);
        if (tok.size() != expected.size()) throw fail("expected 14 values");
        double v[14];
        for (int k = 0; k < 14; ++k) v[k] = parse_double(tok[static_cast<std::size_t>(k)], path.string() + ":" + std::to_string(no));
        if (v[3] <= 0 || v[4] <= 0 || v[5] <= 0) throw fail("scales must be positive");
        if (v[10] <= 0 || v[10] >= 1) throw fail("opacity must be in (0,1)");
        Gaussian3D g;
        g.mean = Vec3(v[0], v[1], v[2]);
        g.log_scale = Vec3(std::log(v[3]), std::log(v[4]), std::log(v[5]));
        g.rotation = Vec4(v[6], v[7], v[8], v[9]);
        g.opacity_logit = logit(v[10]);
        g.color = Vec3(v[11], v[12], v[13]);
        cloud.push_back(g);
    }
    return cloud;
}

// ---------------------------------------------------------------- scene manifest

enum class ViewRole { train, test, generated };

inline const char* role_name(ViewRole r) {
    switch (r) {
    case ViewRole::train: return "train";
    case ViewRole::test: return "test";
    case ViewRole::generated: return "generated";
    }
    return "?";
}

struct ManifestEntry {
    ViewRole role = ViewRole::train;
    std::string path;
    Pose pose;
};

struct SceneManifest {
    int version = 1;
    CameraIntrinsics k;
    std::vector<ManifestEntry> entries;

    std::size_t count(ViewRole r) const {
        return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [&](const auto& e) { return e.role == r; }));
    }
};

inline std::string format_manifest(const SceneManifest& m) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "VGNC-SCENE " << m.version << "\n";
    os << "K " << m.k.fx << ' ' << m.k.fy << ' ' << m.k.cx << ' ' << m.k.cy << ' ' << m.k.width << ' ' << m.k.height << "\n";
    for (const auto& e : m.entries) {
        const auto q = quaternion_from_rotation(e.pose.rotation);
        os << "V " << role_name(e.role) << ' ' << e.path << ' ' << q[0] << ' ' << q[1] << ' ' << q[2] << ' ' << q[3]
           << ' ' << e.pose.translation.x() << ' ' << e.pose.translation.y() << ' ' << e.pose.translation.z() << "\n";
    }
    return os.str();
}

inline SceneManifest parse_manifest(const std::string& text, const std::string& origin = "manifest") {
    SceneManifest m;
    std::istringstream is(text);
    std::string line;
    int no = 0;
    auto fail = [&](const std::string& why) { return Error(Errc::parse, origin + ":" + std::to_string(no) + ": " + why); };
    bool header = false, intrinsics = false;
    while (std::getline(is, line)) {
        ++no;
        const auto tok = split_ws(line);
        if (tok.empty() || tok[0][0] == '#') continue;
        const std::string where = origin + ":" + std::to_string(no);
        if (!header) {
            if (tok.size() != 2 || tok[0] != "VGNC-SCENE") throw fail("expected 'VGNC-SCENE 1'");
            m.version = static_cast<int>(parse_int(tok[1], where));
            if (m.version != 1) throw fail("unsupported manifest version");
            header = true;
        } else if (!intrinsics) {
            if (tok.size() != 7 || tok[0] != "K") throw fail("expected 'K fx fy cx cy width height'");
            m.k = {parse_double(tok[1], where), parse_double(tok[2], where), parse_double(tok[3], where),
                   parse_double(tok[4], where), static_cast<int>(parse_int(tok[5], where)),
                   static_cast<int>(parse_int(tok[6], where))};
            if (!m.k.valid()) throw fail("invalid intrinsics");
            intrinsics = true;
        } else {
            if (tok.size() != 10 || tok[0] != "V") throw fail("expected 'V <role> <relpath> qw qx qy qz tx ty tz'");
            ManifestEntry e;
            if (tok[1] == "train") e.role = ViewRole::train;
            else if (tok[1] == "test") e.role = ViewRole::test;
            else if (tok[1] == "generated") e.role = ViewRole::generated;
            else throw fail("unknown role '" + tok[1] + "'");
            e.path = tok[2];
            double v[7];
            for (int k = 0; k < 7; ++k) v[k] = parse_double(tok[static_cast<std::size_t>(k + 3)], where);
            const double qn = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]);
            if (std::abs(qn - 1.0) > 1e-6) throw fail("quaternion is not unit length");
            e.pose.rotation = rotation_from_quaternion(v[0], v[1], v[2], v[3]);
            e.pose.translation = Vec3(v[4], v[5], v[6]);
            m.entries.push_back(std::move(e));
        }
    }
    if (!header || !intrinsics) throw Error(Errc::parse, origin + ": truncated manifest");
    return m;
}

/// Structural checks shared by loading and writing.
inline void validate_manifest(const SceneManifest& m) {
    if (m.count(ViewRole::train) == 0) throw Error(Errc::validation, "manifest has no train entries");
    std::set<std::string> paths;
    for (const auto& e : m.entries) {
        if (!paths.insert(e.path).second) throw Error(Errc::validation, "duplicate image path " + e.path);
        if (!e.pose.is_valid()) throw Error(Errc::validation, "invalid pose for " + e.path);
    }
}

struct SceneView {
    Image image;
    CameraView camera;
    std::string path;
};

struct Scene {
    CameraIntrinsics k;
    std::vector<SceneView> train, test, generated;
    SceneManifest manifest;
};

inline Scene load_scene(const fs::path& manifest_path) {
    Scene s;
    s.manifest = parse_manifest(read_text(manifest_path), manifest_path.string());
    validate_manifest(s.manifest);
    s.k = s.manifest.k;
    const fs::path root = manifest_path.parent_path();
    for (const auto& e : s.manifest.entries) {
        const fs::path p = root / e.path;
        if (!fs::exists(p)) throw Error(Errc::missing_file, p.string());
        SceneView v{read_png(p), {s.k, e.pose}, e.path};
        if (v.image.width() != s.k.width || v.image.height() != s.k.height)
            throw Error(Errc::shape_mismatch, p.string() + " does not match the manifest intrinsics");
        (e.role == ViewRole::train ? s.train : e.role == ViewRole::test ? s.test : s.generated).push_back(std::move(v));
    }
    return s;
}

/// Writes the manifest and, for entries with an image, the PNG next to it.
inline void write_scene(const fs::path& manifest_path, const SceneManifest& m, const std::vector<Image>& images = {}) {
    validate_manifest(m);
    if (!images.empty() && images.size() != m.entries.size())
        throw Error(Errc::precondition, "write_scene: one image per manifest entry expected");
    const fs::path root = manifest_path.parent_path();
    for (std::size_t i = 0; i < images.size(); ++i) write_png(root / m.entries[i].path, images[i]);
    write_text(manifest_path, format_manifest(m));
}

// ---------------------------------------------------------------- COLMAP text import

/// Reads COLMAP cameras.txt / images.txt (PINHOLE or SIMPLE_PINHOLE, one shared camera).
/// Every image becomes a train entry.
inline SceneManifest import_colmap(const fs::path& cameras_txt, const fs::path& images_txt) {
    SceneManifest m;
    std::map<long long, CameraIntrinsics> cams;
    {
        std::istringstream is(read_text(cameras_txt));
        std::string line;
        for (int no = 1; std::getline(is, line); ++no) {
            const auto tok = split_ws(line);
            if (tok.empty() || tok[0][0] == '#') continue;
            const std::string where = cameras_txt.string() + ":" + std::to_string(no);
            if (tok.size() < 4) throw Error(Errc::parse, where + ": malformed camera line");
            const auto id = parse_int(tok[0], where);
            const auto& model = tok[1];
            const int w = static_cast<int>(parse_int(tok[2], where)), h = static_cast<int>(parse_int(tok[3], where));
            CameraIntrinsics k;
            if (model == "PINHOLE") {
                if (tok.size() != 8) throw Error(Errc::parse, where + ": PINHOLE needs fx fy cx cy");
                k = {parse_double(tok[4], where), parse_double(tok[5], where), parse_double(tok[6], where),
                     parse_double(tok[7], where), w, h};
            } else if (model == "SIMPLE_PINHOLE") {
                if (tok.size() != 7) throw Error(Errc::parse, where + ": SIMPLE_PINHOLE needs f cx cy");
                const double f = parse_double(tok[4], where);
                k = {f, f, parse_double(tok[5], where), parse_double(tok[6], where), w, h};
            } else {
                throw Error(Errc::unsupported_model, where + ": camera model " + model);
            }
            cams[id] = k;
        }
    }
    std::istringstream is(read_text(images_txt));
    std::string line;
    bool expect_points = false;
    long long camera_id = -1;
    for (int no = 1; std::getline(is, line); ++no) {
        if (!line.empty() && line[0] == '#') continue;
        if (expect_points) { // second line of each image record: 2D points, ignored
            expect_points = false;
            continue;
        }
        const auto tok = split_ws(line);
        if (tok.empty()) continue;
        const std::string where = images_txt.string() + ":" + std::to_string(no);
        if (tok.size() != 10) throw Error(Errc::parse, where + ": malformed image line");
        double v[7];
        for (int k = 0; k < 7; ++k) v[k] = parse_double(tok[static_cast<std::size_t>(k + 1)], where);
        const auto cid = parse_int(tok[8], where);
        if (!cams.count(cid)) throw Error(Errc::parse, where + ": unknown camera id");
        if (camera_id >= 0 && cid != camera_id) throw Error(Errc::validation, where + ": multiple distinct cameras");
        camera_id = cid;
        ManifestEntry e;
        e.role = ViewRole::train;
        e.path = tok[9];
        e.pose.rotation = rotation_from_quaternion(v[0], v[1], v[2], v[3]);
        e.pose.translation = Vec3(v[4], v[5], v[6]);
        m.entries.push_back(std::move(e));
        expect_points = true;
    }
    if (camera_id >= 0) m.k = cams.at(camera_id);
    else if (cams.size() == 1) m.k = cams.begin()->second;
    else if (cams.size() > 1) throw Error(Errc::validation, "multiple distinct cameras");
    return m;
}

// ---------------------------------------------------------------- CSV

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw Error(Errc::parse, "CSV has no column '" + name + "'");
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline CsvTable parse_csv(const std::string& text, const std::string& origin = "csv") {
    CsvTable t;
    std::istringstream is(text);
    std::string line;
    int no = 0;
    while (std::getline(is, line)) {
        ++no;
        if (line.empty() || line == "\r") continue;
        auto cells = split_csv_line(line);
        if (t.header.empty()) {
            t.header = std::move(cells);
            continue;
        }
        if (cells.size() != t.header.size())
            throw Error(Errc::parse, origin + ":" + std::to_string(no) + ": expected " + std::to_string(t.header.size()) + " fields");
        t.rows.push_back(std::move(cells));
    }
    if (t.header.empty()) throw Error(Errc::parse, origin + ": missing header");
    return t;
}

} // namespace vgnc
