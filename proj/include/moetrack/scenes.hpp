#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "moetrack/heads.hpp"
#include "moetrack/tokens.hpp"

#include "json.hpp"

namespace moetrack {

// Half-open frame interval [start, end).
struct CorruptionWindow {
    int start = 0;
    int end = 0;
};

inline bool in_windows(const std::vector<CorruptionWindow>& ws, int t) {
    for (const auto& w : ws)
        if (t >= w.start && t < w.end) return true;
    return false;
}

// The two modalities carry complementary content: distractors live only in
// RGB, clutter floods only X, and corruption windows never overlap, so every
// frame is trackable through at least one modality.
struct SceneSpec {
    int frame_size = 64;
    int length = 60;  // T
    int target_min = 8;
    int target_max = 16;
    double speed_min = 0.5;
    double speed_max = 2.0;
    double turn_prob = 0.1;
    int distractors = 1;
    std::vector<CorruptionWindow> rgb_windows;
    std::vector<CorruptionWindow> x_windows;

    void validate() const {
        if (frame_size <= 0 || length <= 0) throw ConfigError("scene: frame_size and length must be positive");
        if (target_min <= 0 || target_max < target_min)
            throw ConfigError("scene: need 0 < target_min <= target_max");
        if (target_max > frame_size)
            throw ConfigError("scene: target size " + std::to_string(target_max) + " exceeds frame size " +
                              std::to_string(frame_size));
        if (!(speed_min >= 0.0 && speed_max >= speed_min)) throw ConfigError("scene: bad speed bounds");
        if (!(turn_prob >= 0.0 && turn_prob <= 1.0)) throw ConfigError("scene: turn_prob outside [0,1]");
        if (distractors < 0) throw ConfigError("scene: negative distractor count");
        for (const auto* ws : {&rgb_windows, &x_windows})
            for (const auto& w : *ws)
                if (w.start < 0 || w.end > length || w.start >= w.end)
                    throw ConfigError("scene: corruption window [" + std::to_string(w.start) + "," +
                                      std::to_string(w.end) + ") outside [0," + std::to_string(length) + ")");
        for (int t = 0; t < length; ++t)
            if (in_windows(rgb_windows, t) && in_windows(x_windows, t))
                throw ConfigError("scene: both modalities corrupted at frame " + std::to_string(t));
    }
};

struct RenderedSequence {
    SceneSpec spec;
    uint64_t seed = 0;
    std::vector<Frame> rgb;
    std::vector<Frame> x;
    std::vector<BBox> gt;  // full-frame pixel coordinates
};

namespace detail {

struct MotionState {
    double cx = 0, cy = 0, w = 0, h = 0, vx = 0, vy = 0, speed = 0;
};

inline MotionState init_motion(const SceneSpec& s, RngStream& r) {
    MotionState m;
    m.w = s.target_min + r.uniform_int(s.target_max - s.target_min + 1);
    m.h = s.target_min + r.uniform_int(s.target_max - s.target_min + 1);
    m.cx = r.uniform(m.w / 2 + 1.0, s.frame_size - m.w / 2 - 1.0);
    m.cy = r.uniform(m.h / 2 + 1.0, s.frame_size - m.h / 2 - 1.0);
    m.speed = r.uniform(s.speed_min, s.speed_max);
    const double theta = r.uniform(0.0, 2.0 * std::numbers::pi);
    m.vx = m.speed * std::cos(theta);
    m.vy = m.speed * std::sin(theta);
    return m;
}

inline void step_motion(MotionState& m, const SceneSpec& s, RngStream& r) {
    if (r.bernoulli(s.turn_prob)) {
        const double theta = r.uniform(0.0, 2.0 * std::numbers::pi);
        m.vx = m.speed * std::cos(theta);
        m.vy = m.speed * std::sin(theta);
    }
    m.cx += m.vx;
    m.cy += m.vy;
    const double lox = m.w / 2, hix = s.frame_size - m.w / 2;
    const double loy = m.h / 2, hiy = s.frame_size - m.h / 2;
    if (m.cx < lox || m.cx > hix) {
        m.cx = m.cx < lox ? 2 * lox - m.cx : 2 * hix - m.cx;
        m.vx = -m.vx;
    }
    if (m.cy < loy || m.cy > hiy) {
        m.cy = m.cy < loy ? 2 * loy - m.cy : 2 * hiy - m.cy;
        m.vy = -m.vy;
    }
}

// Blends value v into the rectangle with weight a; a=1 paints it solid.
// A pixel belongs to the rectangle when its center falls inside.
inline void fill_rect(Tensor& img, double cx, double cy, double w, double h, double v, double a = 1.0) {
    const int size = img.rows();
    const int x0 = std::max(0, static_cast<int>(std::ceil(cx - w / 2 - 0.5)));
    const int x1 = std::min(size - 1, static_cast<int>(std::floor(cx + w / 2 - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(cy - h / 2 - 0.5)));
    const int y1 = std::min(size - 1, static_cast<int>(std::floor(cy + h / 2 - 0.5)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) img.at(y, x) += a * (v - img.at(y, x));
}

inline void quantize_8bit(Tensor& img) {
    for (double& v : img.data()) v = std::round(std::min(1.0, std::max(0.0, v)) * 255.0) / 255.0;
}

}  // namespace detail

// Fully deterministic per seed; pixels are already 8-bit quantized so the
// on-disk PGM round-trip is exact.
inline RenderedSequence generate_sequence(const SceneSpec& spec, uint64_t seed) {
    spec.validate();
    RenderedSequence seq;
    seq.spec = spec;
    seq.seed = seed;

    RngStream bg_rng = RngStream::substream(seed, "scene.bg");
    Tensor background({spec.frame_size, spec.frame_size});
    for (double& v : background.data()) v = 0.30 + 0.10 * bg_rng.uniform01();

    RngStream target_rng = RngStream::substream(seed, "scene.target");
    detail::MotionState target = detail::init_motion(spec, target_rng);
    std::vector<detail::MotionState> distractors;
    std::vector<RngStream> distractor_rngs;
    for (int d = 0; d < spec.distractors; ++d) {
        distractor_rngs.push_back(RngStream::substream(seed, "scene.distractor." + std::to_string(d)));
        distractors.push_back(detail::init_motion(spec, distractor_rngs.back()));
    }
    RngStream clutter_rng = RngStream::substream(seed, "scene.clutter");

    for (int t = 0; t < spec.length; ++t) {
        if (t > 0) {
            detail::step_motion(target, spec, target_rng);
            for (int d = 0; d < spec.distractors; ++d)
                detail::step_motion(distractors[d], spec, distractor_rngs[d]);
        }
        seq.gt.push_back(BBox{target.cx, target.cy, target.w, target.h});

        Tensor rgb = background;
        for (const auto& d : distractors) detail::fill_rect(rgb, d.cx, d.cy, d.w, d.h, 0.85);
        const double dim = in_windows(spec.rgb_windows, t) ? 0.05 : 1.0;
        detail::fill_rect(rgb, target.cx, target.cy, target.w, target.h, 0.9, dim);
        detail::quantize_8bit(rgb);
        seq.rgb.push_back(Frame{Modality::RGB, std::move(rgb), t});

        Tensor x = Tensor::zeros({spec.frame_size, spec.frame_size});
        if (in_windows(spec.x_windows, t)) {
            for (int b = 0; b < 12; ++b) {
                const double bw = spec.target_min + clutter_rng.uniform_int(spec.target_max - spec.target_min + 1);
                const double bh = spec.target_min + clutter_rng.uniform_int(spec.target_max - spec.target_min + 1);
                detail::fill_rect(x, clutter_rng.uniform(0.0, spec.frame_size),
                                  clutter_rng.uniform(0.0, spec.frame_size), bw, bh, 1.0);
            }
        }
        detail::fill_rect(x, target.cx, target.cy, target.w, target.h, 1.0);
        detail::quantize_8bit(x);
        seq.x.push_back(Frame{Modality::X, std::move(x), t});
    }
    return seq;
}

// Crop geometry in frame pixels: the square [origin, origin + side)^2
// resampled to a fixed output size by nearest neighbor, zero outside.
struct CropGeometry {
    double origin_x = 0, origin_y = 0, side = 1;
};

struct CropConfig {
    int search_size = 64;
    int clip_size = 32;
    int n_clips = 3;
    double context = 2.0;     // search side = context * target extent
    double jitter_px = 1.5;   // training-time center jitter
    double min_extent = 12.0; // floor on the extent so small targets keep margin
    double max_extent = 24.0; // cap so a bad size estimate cannot blow up the crop
};

inline Tensor crop_resample(const Tensor& src, const CropGeometry& g, int out_size) {
    Tensor out({out_size, out_size});
    const double scale = g.side / out_size;
    for (int i = 0; i < out_size; ++i) {
        const int sy = static_cast<int>(std::floor(g.origin_y + (i + 0.5) * scale));
        for (int j = 0; j < out_size; ++j) {
            const int sx = static_cast<int>(std::floor(g.origin_x + (j + 0.5) * scale));
            if (sy >= 0 && sy < src.rows() && sx >= 0 && sx < src.cols()) out.at(i, j) = src.at(sy, sx);
        }
    }
    return out;
}

inline CropGeometry search_geometry(double center_x, double center_y, const BBox& reference,
                                    const CropConfig& cfg) {
    if (cfg.max_extent < cfg.min_extent)
        throw ConfigError("crop: max_extent below min_extent");
    const double extent = std::min(std::max({reference.w, reference.h, cfg.min_extent}), cfg.max_extent);
    CropGeometry g;
    g.side = cfg.context * extent;
    g.origin_x = center_x - g.side / 2;
    g.origin_y = center_y - g.side / 2;
    return g;
}

inline BBox box_to_search(const BBox& frame_box, const CropGeometry& g) {
    return BBox{(frame_box.cx - g.origin_x) / g.side, (frame_box.cy - g.origin_y) / g.side,
                frame_box.w / g.side, frame_box.h / g.side};
}

inline BBox box_to_frame(const BBox& search_box, const CropGeometry& g) {
    return BBox{g.origin_x + search_box.cx * g.side, g.origin_y + search_box.cy * g.side,
                search_box.w * g.side, search_box.h * g.side};
}

// Frames in segment-layout order: RGB search, X search, then RGB/X per clip
// with clip 1 the oldest. Clip c reads source frame t - n_clips + c - 1.
struct CropResult {
    std::vector<Frame> frames;
    std::vector<uint8_t> availability;
    BBox gt_search;
    CropGeometry geometry;
};

inline CropResult crop_at(const RenderedSequence& seq, int t, double center_x, double center_y,
                          const BBox& reference, const CropConfig& cfg) {
    if (t < cfg.n_clips)
        throw ContractError("crop: frame " + std::to_string(t) + " has fewer than " +
                            std::to_string(cfg.n_clips) + " predecessors");
    if (t >= static_cast<int>(seq.gt.size())) throw ContractError("crop: frame index past end of sequence");
    CropResult out;
    out.geometry = search_geometry(center_x, center_y, reference, cfg);
    out.frames.push_back(Frame{Modality::RGB, crop_resample(seq.rgb[t].pixels, out.geometry, cfg.search_size), t});
    out.frames.push_back(Frame{Modality::X, crop_resample(seq.x[t].pixels, out.geometry, cfg.search_size), t});
    for (int c = 1; c <= cfg.n_clips; ++c) {
        const int src = t - cfg.n_clips + c - 1;
        out.frames.push_back(
            Frame{Modality::RGB, crop_resample(seq.rgb[src].pixels, out.geometry, cfg.clip_size), src});
        out.frames.push_back(Frame{Modality::X, crop_resample(seq.x[src].pixels, out.geometry, cfg.clip_size), src});
    }
    out.availability.assign(out.frames.size(), 1);
    out.gt_search = box_to_search(seq.gt[t], out.geometry);
    return out;
}

inline CropResult crop_regions(const RenderedSequence& seq, int t, const CropConfig& cfg, RngStream& rng) {
    if (t < 1) throw ContractError("crop_regions: needs a previous frame");
    const BBox& prev = seq.gt[t - 1];
    const double dx = rng.uniform(-cfg.jitter_px, cfg.jitter_px);
    const double dy = rng.uniform(-cfg.jitter_px, cfg.jitter_px);
    return crop_at(seq, t, prev.cx + dx, prev.cy + dy, prev, cfg);
}

inline void write_pgm(const std::string& path, const Tensor& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "P5\n" << img.cols() << " " << img.rows() << "\n255\n";
    std::vector<unsigned char> bytes;
    bytes.reserve(img.numel());
    for (double v : img.data())
        bytes.push_back(static_cast<unsigned char>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0)));
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to " + path);
}

inline Tensor read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255)
        throw IoError("unsupported PGM header in " + path);
    f.get();  // single whitespace after maxval
    std::vector<unsigned char> bytes(static_cast<size_t>(w) * h);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short read from " + path);
    Tensor img({h, w});
    for (size_t i = 0; i < bytes.size(); ++i) img[i] = bytes[i] / 255.0;
    return img;
}

inline nlohmann::json spec_to_json(const SceneSpec& s) {
    auto windows = [](const std::vector<CorruptionWindow>& ws) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& w : ws) a.push_back({w.start, w.end});
        return a;
    };
    return {{"frame_size", s.frame_size},   {"length", s.length},
            {"target_min", s.target_min},   {"target_max", s.target_max},
            {"speed_min", s.speed_min},     {"speed_max", s.speed_max},
            {"turn_prob", s.turn_prob},     {"distractors", s.distractors},
            {"rgb_windows", windows(s.rgb_windows)}, {"x_windows", windows(s.x_windows)}};
}

// Absent keys keep their defaults, so partial spec files stay valid.
inline SceneSpec spec_from_json(const nlohmann::json& j) {
    SceneSpec s;
    s.frame_size = j.value("frame_size", s.frame_size);
    s.length = j.value("length", s.length);
    s.target_min = j.value("target_min", s.target_min);
    s.target_max = j.value("target_max", s.target_max);
    s.speed_min = j.value("speed_min", s.speed_min);
    s.speed_max = j.value("speed_max", s.speed_max);
    s.turn_prob = j.value("turn_prob", s.turn_prob);
    s.distractors = j.value("distractors", s.distractors);
    if (j.contains("rgb_windows"))
        for (const auto& w : j.at("rgb_windows")) s.rgb_windows.push_back({w.at(0).get<int>(), w.at(1).get<int>()});
    if (j.contains("x_windows"))
        for (const auto& w : j.at("x_windows")) s.x_windows.push_back({w.at(0).get<int>(), w.at(1).get<int>()});
    return s;
}

inline uint64_t video_seed(uint64_t master_seed, int index) {
    return derive_seed(master_seed, "video." + std::to_string(index));
}

// One corruption window per modality, drawn in disjoint halves of the
// timeline so the never-both-corrupt invariant holds by construction.
inline SceneSpec derive_video_spec(const SceneSpec& base, uint64_t vseed) {
    SceneSpec s = base;
    if (!s.rgb_windows.empty() || !s.x_windows.empty()) return s;
    const int t = s.length;
    if (t < 8) return s;
    RngStream r = RngStream::substream(vseed, "scene.windows");
    const int max_len = std::max(1, t / 5), min_len = std::max(1, t / 10);
    const int rgb_len = min_len + r.uniform_int(max_len - min_len + 1);
    const int rgb_start = r.uniform_int(t / 2 - rgb_len + 1);
    s.rgb_windows.push_back({rgb_start, rgb_start + rgb_len});
    const int x_len = min_len + r.uniform_int(max_len - min_len + 1);
    const int x_start = t / 2 + r.uniform_int(t - t / 2 - x_len + 1);
    s.x_windows.push_back({x_start, x_start + x_len});
    return s;
}

namespace detail {

inline std::string frame_path(const std::string& root, int video, const char* modality, int t) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "video_%04d/%s/frame_%04d.pgm", video, modality, t);
    return root + "/" + buf;
}

}  // namespace detail

struct VideoMeta {
    int id = 0;
    uint64_t seed = 0;
    SceneSpec spec;
    std::vector<BBox> gt;
};

struct Dataset {
    std::string root;
    uint64_t master_seed = 0;
    std::vector<VideoMeta> videos;

    int size() const { return static_cast<int>(videos.size()); }

    RenderedSequence load_video(int index) const {
        if (index < 0 || index >= size()) throw ContractError("dataset: video index out of range");
        const VideoMeta& m = videos[index];
        RenderedSequence seq;
        seq.spec = m.spec;
        seq.seed = m.seed;
        seq.gt = m.gt;
        for (int t = 0; t < m.spec.length; ++t) {
            seq.rgb.push_back(Frame{Modality::RGB, read_pgm(detail::frame_path(root, m.id, "rgb", t)), t});
            seq.x.push_back(Frame{Modality::X, read_pgm(detail::frame_path(root, m.id, "x", t)), t});
        }
        return seq;
    }
};

inline void make_dataset(const SceneSpec& base, int n_videos, uint64_t seed, const std::string& root) {
    base.validate();
    if (n_videos <= 0) throw ConfigError("make_dataset: n_videos must be positive");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create " + root + ": " + ec.message());

    nlohmann::json manifest;
    manifest["format"] = "moetrack-dataset-v1";
    manifest["master_seed"] = seed;
    manifest["base_spec"] = spec_to_json(base);
    manifest["videos"] = nlohmann::json::array();

    for (int v = 0; v < n_videos; ++v) {
        const uint64_t vseed = video_seed(seed, v);
        const SceneSpec spec = derive_video_spec(base, vseed);
        RenderedSequence seq = generate_sequence(spec, vseed);

        char dir[32];
        std::snprintf(dir, sizeof(dir), "video_%04d", v);
        for (const char* sub : {"rgb", "x"}) {
            fs::create_directories(fs::path(root) / dir / sub, ec);
            if (ec) throw IoError("cannot create video directories under " + root + ": " + ec.message());
        }
        for (int t = 0; t < spec.length; ++t) {
            write_pgm(detail::frame_path(root, v, "rgb", t), seq.rgb[t].pixels);
            write_pgm(detail::frame_path(root, v, "x", t), seq.x[t].pixels);
        }

        nlohmann::json gt = nlohmann::json::array();
        for (const BBox& b : seq.gt) gt.push_back({b.cx, b.cy, b.w, b.h});
        manifest["videos"].push_back({{"id", v}, {"seed", vseed}, {"spec", spec_to_json(spec)}, {"gt", gt}});
    }

    std::ofstream f(root + "/manifest.json", std::ios::binary);
    if (!f) throw IoError("cannot write " + root + "/manifest.json");
    f << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& root) {
    std::ifstream f(root + "/manifest.json");
    if (!f) throw IoError("cannot open " + root + "/manifest.json");
    nlohmann::json manifest;
    try {
        f >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad manifest in " + root + ": " + e.what());
    }
    if (manifest.value("format", "") != "moetrack-dataset-v1")
        throw IoError("unrecognized dataset format in " + root);
    Dataset ds;
    ds.root = root;
    ds.master_seed = manifest.at("master_seed").get<uint64_t>();
    for (const auto& jv : manifest.at("videos")) {
        VideoMeta m;
        m.id = jv.at("id").get<int>();
        m.seed = jv.at("seed").get<uint64_t>();
        m.spec = spec_from_json(jv.at("spec"));
        for (const auto& b : jv.at("gt"))
            m.gt.push_back(BBox{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                b.at(3).get<double>()});
        ds.videos.push_back(std::move(m));
    }
    return ds;
}

}  // namespace moetrack
