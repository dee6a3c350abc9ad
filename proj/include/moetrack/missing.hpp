#pragma once

#include <optional>
#include <string>
#include <vector>

#include "moetrack/model.hpp"
#include "moetrack/scenes.hpp"

namespace moetrack {

enum class MissingKind { Random, Switched, Prolonged };

inline const char* missing_kind_name(MissingKind k) {
    switch (k) {
        case MissingKind::Random: return "random";
        case MissingKind::Switched: return "switched";
        case MissingKind::Prolonged: return "prolonged";
    }
    throw ContractError("unknown missing kind");
}

inline MissingKind parse_missing_kind(const std::string& s) {
    if (s == "random") return MissingKind::Random;
    if (s == "switched") return MissingKind::Switched;
    if (s == "prolonged") return MissingKind::Prolonged;
    throw ConfigError("unknown missing kind '" + s + "' (expected random|switched|prolonged)");
}

struct FrameAvailability {
    uint8_t rgb = 1;
    uint8_t x = 1;
};

struct MissingSchedule {
    MissingKind kind = MissingKind::Random;
    double rate = 0.0;
    uint64_t seed = 0;
    std::vector<FrameAvailability> frames;

    int length() const { return static_cast<int>(frames.size()); }

    int affected_count() const {
        int n = 0;
        for (const auto& f : frames) n += (f.rgb && f.x) ? 0 : 1;
        return n;
    }
};

// Random: floor(rT) frames drawn without replacement, fair coin per frame.
// Switched: the affected frames are one consecutive run at a seeded start,
// tiled into ceil(T/10)-length blocks that alternate dropping RGB then X.
// Prolonged: one contiguous run, a single coin-chosen modality throughout.
// No construction can produce a both-absent frame.
inline MissingSchedule make_schedule(MissingKind kind, int t_total, double rate, uint64_t seed) {
    if (t_total <= 0) throw ConfigError("make_schedule: length must be positive");
    if (!(rate >= 0.0 && rate < 1.0))
        throw ConfigError("make_schedule: rate " + std::to_string(rate) +
                          " outside [0,1); rate 1 would force both-absent frames");
    MissingSchedule s;
    s.kind = kind;
    s.rate = rate;
    s.seed = seed;
    s.frames.assign(t_total, FrameAvailability{});
    const int affected = static_cast<int>(rate * t_total);
    if (affected == 0) return s;

    RngStream rng = RngStream::substream(seed, "schedule");
    auto drop = [&](int t, bool drop_rgb) {
        if (drop_rgb)
            s.frames[t].rgb = 0;
        else
            s.frames[t].x = 0;
    };
    switch (kind) {
        case MissingKind::Random: {
            for (int t : rng.sample_without_replacement(t_total, affected)) drop(t, rng.bernoulli(0.5));
            break;
        }
        case MissingKind::Switched: {
            const int block = (t_total + 9) / 10;
            const int start = rng.uniform_int(t_total - affected + 1);
            for (int i = 0; i < affected; ++i) drop(start + i, (i / block) % 2 == 0);
            break;
        }
        case MissingKind::Prolonged: {
            const int start = rng.uniform_int(t_total - affected + 1);
            const bool drop_rgb = rng.bernoulli(0.5);
            for (int i = 0; i < affected; ++i) drop(start + i, drop_rgb);
            break;
        }
    }
    return s;
}

inline nlohmann::json schedule_to_json(const MissingSchedule& s) {
    nlohmann::json bits = nlohmann::json::array();
    for (const auto& f : s.frames) bits.push_back({static_cast<int>(f.rgb), static_cast<int>(f.x)});
    return {{"kind", missing_kind_name(s.kind)}, {"rate", s.rate}, {"seed", s.seed}, {"frames", bits}};
}

inline MissingSchedule schedule_from_json(const nlohmann::json& j) {
    MissingSchedule s;
    s.kind = parse_missing_kind(j.at("kind").get<std::string>());
    s.rate = j.at("rate").get<double>();
    s.seed = j.at("seed").get<uint64_t>();
    for (const auto& b : j.at("frames")) {
        FrameAvailability f;
        f.rgb = b.at(0).get<int>() ? 1 : 0;
        f.x = b.at(1).get<int>() ? 1 : 0;
        if (!f.rgb && !f.x) throw IoError("schedule has a both-absent frame");
        s.frames.push_back(f);
    }
    return s;
}

// Clip frames inherit the availability of their own source timestamps: a
// modality missing at t stays missing when that frame is reused as context.
inline CropResult apply_schedule(const MissingSchedule& s, CropResult crop, const SegmentLayout& layout) {
    if (static_cast<int>(crop.frames.size()) != layout.num_segments())
        throw ContractError("apply_schedule: frame count does not match layout");
    for (int i = 0; i < layout.num_segments(); ++i) {
        Frame& f = crop.frames[i];
        if (f.timestamp < 0 || f.timestamp >= s.length())
            throw ContractError("apply_schedule: frame timestamp " + std::to_string(f.timestamp) +
                                " outside schedule of length " + std::to_string(s.length()));
        const FrameAvailability& bits = s.frames[f.timestamp];
        const bool available = f.modality == Modality::RGB ? bits.rgb : bits.x;
        if (!available) {
            f.pixels = Tensor::zeros(f.pixels.shape());
            crop.availability[layout.segments[i].id] = 0;
        }
    }
    return crop;
}

inline double precision_metric(const std::vector<BBox>& pred, const std::vector<BBox>& gt,
                               double threshold_px = 20.0) {
    if (pred.size() != gt.size()) throw ContractError("precision_metric: length mismatch");
    if (pred.empty()) throw ContractError("precision_metric: empty inputs");
    int hits = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double dx = pred[i].cx - gt[i].cx, dy = pred[i].cy - gt[i].cy;
        if (std::sqrt(dx * dx + dy * dy) <= threshold_px) hits++;
    }
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// success(tau) = fraction of frames with IoU strictly above tau; the AUC is
// the mean over the grid tau = i/divisions, i = 0..divisions. The reporting
// default is the 21-point grid; a dense grid recovers the mean-IoU identity.
inline double success_auc(const std::vector<BBox>& pred, const std::vector<BBox>& gt, int divisions = 20) {
    if (pred.size() != gt.size()) throw ContractError("success_auc: length mismatch");
    if (pred.empty()) throw ContractError("success_auc: empty inputs");
    if (divisions <= 0) throw ContractError("success_auc: divisions must be positive");
    std::vector<double> ious;
    ious.reserve(pred.size());
    for (size_t i = 0; i < pred.size(); ++i) ious.push_back(iou(pred[i], gt[i]));
    double auc = 0.0;
    for (int i = 0; i <= divisions; ++i) {
        const double tau = static_cast<double>(i) / divisions;
        int above = 0;
        for (double v : ious) above += v > tau;
        auc += static_cast<double>(above) / static_cast<double>(ious.size());
    }
    return auc / (divisions + 1);
}

struct VideoMetrics {
    int video_id = 0;
    int n_frames = 0;
    double precision = 0.0;
    double auc = 0.0;
};

struct MetricsReport {
    std::string schedule_desc;  // "full" or kind:rate:seed
    double precision_at_20 = 0.0;
    double success_auc = 0.0;
    std::vector<VideoMetrics> videos;

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& v : videos)
            rows.push_back({{"video", v.video_id}, {"frames", v.n_frames}, {"precision", v.precision},
                            {"auc", v.auc}});
        return {{"schedule", schedule_desc}, {"precision_at_20", precision_at_20},
                {"success_auc", success_auc}, {"videos", rows}};
    }

    std::string to_csv() const {
        std::string out = "video,frames,precision,auc\n";
        char buf[128];
        for (const auto& v : videos) {
            std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f\n", v.video_id, v.n_frames, v.precision, v.auc);
            out += buf;
        }
        return out;
    }
};

struct ScheduleSpec {
    MissingKind kind = MissingKind::Random;
    double rate = 0.0;
    uint64_t seed = 0;

    std::string describe() const {
        return std::string(missing_kind_name(kind)) + ":" + std::to_string(rate) + ":" + std::to_string(seed);
    }
};

struct EvalResult {
    MetricsReport report;
    std::vector<RouteRecord> telemetry;
};

// Frame-by-frame tracker evaluation. The first n_clips frames initialize
// from ground truth; afterwards crops follow the previous prediction.
// Masking never runs here; the InferenceScope guard enforces it.
inline EvalResult evaluate(TrackModel& model, const Dataset& ds, const CropConfig& crop_cfg,
                           const std::optional<ScheduleSpec>& schedule_spec, double threshold_px = 20.0) {
    if (ds.size() == 0) throw ConfigError("evaluate: empty dataset");
    InferenceScope inference;
    EvalResult result;
    result.report.schedule_desc = schedule_spec ? schedule_spec->describe() : "full";
    const SegmentLayout layout = model.cfg.encoder.layout();

    double weighted_precision = 0.0, weighted_auc = 0.0;
    int total_frames = 0;
    for (int v = 0; v < ds.size(); ++v) {
        RenderedSequence seq = ds.load_video(v);
        const int t_total = static_cast<int>(seq.gt.size());
        std::optional<MissingSchedule> schedule;
        if (schedule_spec)
            schedule = make_schedule(schedule_spec->kind, t_total, schedule_spec->rate,
                                     video_seed(schedule_spec->seed, v));

        std::vector<BBox> preds, gts;
        BBox prev = seq.gt[crop_cfg.n_clips - 1];
        for (int t = crop_cfg.n_clips; t < t_total; ++t) {
            CropResult crop = crop_at(seq, t, prev.cx, prev.cy, prev, crop_cfg);
            if (schedule) crop = apply_schedule(*schedule, std::move(crop), layout);
            Tape tape(false);
            ModelOutput out = model_forward(tape, model, crop.frames, crop.availability);
            const BBox pred = box_to_frame(decode_box(tape, out.map), crop.geometry);
            preds.push_back(pred);
            gts.push_back(seq.gt[t]);
            result.telemetry.push_back(make_route_record(t, "video" + std::to_string(v), out.seq, model.bank,
                                                         out.fusion.gating, tape));
            prev = pred;
        }

        VideoMetrics vm;
        vm.video_id = v;
        vm.n_frames = static_cast<int>(preds.size());
        vm.precision = precision_metric(preds, gts, threshold_px);
        vm.auc = success_auc(preds, gts);
        weighted_precision += vm.precision * vm.n_frames;
        weighted_auc += vm.auc * vm.n_frames;
        total_frames += vm.n_frames;
        result.report.videos.push_back(vm);
    }
    result.report.precision_at_20 = weighted_precision / total_frames;
    result.report.success_auc = weighted_auc / total_frames;
    return result;
}

}  // namespace moetrack
