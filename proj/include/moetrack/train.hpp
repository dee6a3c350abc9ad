#pragma once

#include <chrono>
#include <optional>
#include <deque>
#include <unordered_map>

#include "moetrack/checkpoint.hpp"
#include "moetrack/missing.hpp"

namespace moetrack {

struct TrainConfig {
    uint64_t seed = 1;
    int epochs = 30;
    int steps_per_epoch = 100;
    int batch_size = 8;
    double base_lr = 3e-4;
    double lr_drop_fraction = 22.0 / 30.0;
    double weight_decay = 1e-4;
    double alpha = 0.5;                // video-level clip mask ratio
    double baseline_mask_ratio = 0.5;  // token ratio for random/tube baselines
    MaskStrategy strategy = MaskStrategy::VideoLevel;
    ModelConfig model;
    CropConfig crop;
    std::string dataset_path;
    int max_cached_videos = 32;

    int total_steps() const { return epochs * steps_per_epoch; }

    int lr_drop_epoch() const { return static_cast<int>(epochs * lr_drop_fraction + 1e-9); }

    double lr_at_epoch(int epoch) const { return epoch >= lr_drop_epoch() ? base_lr / 10.0 : base_lr; }

    void validate() const {
        if (epochs <= 0 || steps_per_epoch <= 0 || batch_size <= 0)
            throw ConfigError("train: epochs, steps_per_epoch and batch_size must be positive");
        if (!(base_lr > 0.0)) throw ConfigError("train: base_lr must be positive");
        if (!(lr_drop_fraction >= 0.0 && lr_drop_fraction <= 1.0))
            throw ConfigError("train: lr_drop_fraction outside [0,1]");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("train: alpha outside [0,1]");
        if (!(baseline_mask_ratio >= 0.0 && baseline_mask_ratio <= 1.0))
            throw ConfigError("train: baseline_mask_ratio outside [0,1]");
        if (max_cached_videos <= 0) throw ConfigError("train: max_cached_videos must be positive");
        model.validate();
        if (crop.search_size != model.encoder.search_size || crop.clip_size != model.encoder.clip_size ||
            crop.n_clips != model.encoder.n_clips)
            throw ConfigError("train: crop sizes disagree with the encoder configuration");
    }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"seed", c.seed},
            {"epochs", c.epochs},
            {"steps_per_epoch", c.steps_per_epoch},
            {"batch_size", c.batch_size},
            {"base_lr", c.base_lr},
            {"lr_drop_fraction", c.lr_drop_fraction},
            {"weight_decay", c.weight_decay},
            {"alpha", c.alpha},
            {"baseline_mask_ratio", c.baseline_mask_ratio},
            {"strategy", mask_strategy_name(c.strategy)},
            {"dataset_path", c.dataset_path},
            {"max_cached_videos", c.max_cached_videos},
            {"encoder",
             {{"patch", c.model.encoder.patch},
              {"channels", c.model.encoder.channels},
              {"n_heads", c.model.encoder.n_heads},
              {"n_blocks", c.model.encoder.n_blocks},
              {"mlp_ratio", c.model.encoder.mlp_ratio},
              {"search_size", c.model.encoder.search_size},
              {"clip_size", c.model.encoder.clip_size},
              {"n_clips", c.model.encoder.n_clips}}},
            {"hmoe", {{"widths", c.model.hmoe.widths}, {"top_k", c.model.hmoe.top_k}}},
            {"loss_weights",
             {{"aux", c.model.loss.aux}, {"cls", c.model.loss.cls}, {"l1", c.model.loss.l1},
              {"giou", c.model.loss.giou}}},
            {"crop",
             {{"context", c.crop.context}, {"jitter_px", c.crop.jitter_px}, {"min_extent", c.crop.min_extent},
              {"max_extent", c.crop.max_extent}}}};
}

// Absent keys keep their defaults, so partial config files stay valid.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.seed = j.value("seed", c.seed);
    c.epochs = j.value("epochs", c.epochs);
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.lr_drop_fraction = j.value("lr_drop_fraction", c.lr_drop_fraction);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.alpha = j.value("alpha", c.alpha);
    c.baseline_mask_ratio = j.value("baseline_mask_ratio", c.baseline_mask_ratio);
    if (j.contains("strategy")) c.strategy = parse_mask_strategy(j.at("strategy").get<std::string>());
    c.dataset_path = j.value("dataset_path", c.dataset_path);
    c.max_cached_videos = j.value("max_cached_videos", c.max_cached_videos);
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        c.model.encoder.patch = e.value("patch", c.model.encoder.patch);
        c.model.encoder.channels = e.value("channels", c.model.encoder.channels);
        c.model.encoder.n_heads = e.value("n_heads", c.model.encoder.n_heads);
        c.model.encoder.n_blocks = e.value("n_blocks", c.model.encoder.n_blocks);
        c.model.encoder.mlp_ratio = e.value("mlp_ratio", c.model.encoder.mlp_ratio);
        c.model.encoder.search_size = e.value("search_size", c.model.encoder.search_size);
        c.model.encoder.clip_size = e.value("clip_size", c.model.encoder.clip_size);
        c.model.encoder.n_clips = e.value("n_clips", c.model.encoder.n_clips);
    }
    if (j.contains("hmoe")) {
        const auto& h = j.at("hmoe");
        if (h.contains("widths")) c.model.hmoe.widths = h.at("widths").get<std::vector<int>>();
        c.model.hmoe.top_k = h.value("top_k", c.model.hmoe.top_k);
    }
    if (j.contains("loss_weights")) {
        const auto& w = j.at("loss_weights");
        c.model.loss.aux = w.value("aux", c.model.loss.aux);
        c.model.loss.cls = w.value("cls", c.model.loss.cls);
        c.model.loss.l1 = w.value("l1", c.model.loss.l1);
        c.model.loss.giou = w.value("giou", c.model.loss.giou);
    }
    if (j.contains("crop")) {
        const auto& cr = j.at("crop");
        c.crop.context = cr.value("context", c.crop.context);
        c.crop.jitter_px = cr.value("jitter_px", c.crop.jitter_px);
        c.crop.min_extent = cr.value("min_extent", c.crop.min_extent);
        c.crop.max_extent = cr.value("max_extent", c.crop.max_extent);
    }
    c.crop.search_size = c.model.encoder.search_size;
    c.crop.clip_size = c.model.encoder.clip_size;
    c.crop.n_clips = c.model.encoder.n_clips;
    return c;
}

inline uint64_t train_config_hash(const TrainConfig& c) { return fnv1a64(train_config_to_json(c).dump()); }

struct StepLog {
    int64_t step = 0;
    int epoch = 0;
    double lr = 0;
    double cls = 0, l1 = 0, giou = 0, balance = 0, importance = 0, aux = 0, total = 0;
};

struct RunLog {
    std::vector<StepLog> steps;
    std::vector<RouteRecord> telemetry;
    double wall_seconds = 0.0;
    uint64_t config_hash = 0;

    std::string steps_csv() const {
        std::string out = "step,cls,l1,giou,balance,importance,total\n";
        char buf[192];
        for (const auto& s : steps) {
            std::snprintf(buf, sizeof(buf), "%lld,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f\n",
                          static_cast<long long>(s.step), s.cls, s.l1, s.giou, s.balance, s.importance, s.total);
            out += buf;
        }
        return out;
    }

    std::string telemetry_csv() const {
        std::string out = telemetry_csv_header() + "\n";
        for (const auto& r : telemetry) out += telemetry_csv_row(r) + "\n";
        return out;
    }
};

// Keeps recently used videos decoded in memory, evicting the oldest.
class VideoCache {
  public:
    VideoCache(const Dataset& ds, int capacity) : ds_(ds), capacity_(capacity) {}

    const RenderedSequence& get(int v) {
        auto it = cache_.find(v);
        if (it != cache_.end()) return it->second;
        if (static_cast<int>(order_.size()) >= capacity_) {
            cache_.erase(order_.front());
            order_.pop_front();
        }
        order_.push_back(v);
        return cache_.emplace(v, ds_.load_video(v)).first->second;
    }

  private:
    const Dataset& ds_;
    int capacity_;
    std::unordered_map<int, RenderedSequence> cache_;
    std::deque<int> order_;
};

namespace detail {

inline TokenHook strategy_hook(const TrainConfig& cfg, RngStream& item_rng) {
    switch (cfg.strategy) {
        case MaskStrategy::None:
            return {};
        case MaskStrategy::VideoLevel: {
            RngStream mask_rng = item_rng.substream("mask");
            return mask_hook(sample_mask_decision(mask_rng, cfg.crop.n_clips, cfg.alpha));
        }
        case MaskStrategy::Random: {
            RngStream r = item_rng.substream("token_mask");
            return [r, ratio = cfg.baseline_mask_ratio](Tape& t, TokenSequence seq) mutable {
                return random_token_mask(t, seq, ratio, r);
            };
        }
        case MaskStrategy::Tube: {
            RngStream r = item_rng.substream("token_mask");
            return [r, ratio = cfg.baseline_mask_ratio](Tape& t, TokenSequence seq) mutable {
                return tube_mask(t, seq, ratio, r);
            };
        }
    }
    throw ContractError("unknown masking strategy");
}

inline TrainingExample sample_example(const TrainConfig& cfg, VideoCache& cache, int n_videos,
                                      RngStream& item_rng) {
    const int v = item_rng.uniform_int(n_videos);
    const RenderedSequence& seq = cache.get(v);
    const int t_total = static_cast<int>(seq.gt.size());
    if (t_total <= cfg.crop.n_clips)
        throw ConfigError("train: videos shorter than the clip history (" + std::to_string(t_total) + " frames)");
    const int t = cfg.crop.n_clips + item_rng.uniform_int(t_total - cfg.crop.n_clips);
    CropResult crop = crop_regions(seq, t, cfg.crop, item_rng);
    TrainingExample ex;
    ex.frames = std::move(crop.frames);
    ex.availability = std::move(crop.availability);
    ex.gt = crop.gt_search;
    ex.mask = strategy_hook(cfg, item_rng);
    return ex;
}

inline std::string nonfinite_param_report(const ParamStore& store) {
    std::string out;
    int listed = 0;
    for (const auto& p : store.entries()) {
        bool bad = false;
        for (double v : p->value.data()) bad |= !std::isfinite(v);
        for (double g : p->grad) bad |= !std::isfinite(g);
        if (bad && listed < 5) {
            out += (listed ? ", " : "") + p->name;
            listed++;
        }
    }
    return out.empty() ? "no non-finite parameters" : "non-finite in: " + out;
}

}  // namespace detail

// One optimizer step per batch; every batch element draws its own mask
// decision. A non-finite loss aborts immediately with diagnostics.
inline RunLog train(TrackModel& model, const Dataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    if (ds.size() == 0) throw ConfigError("train: empty dataset");
    const auto start = std::chrono::steady_clock::now();
    RunLog log;
    log.config_hash = train_config_hash(cfg);
    VideoCache cache(ds, cfg.max_cached_videos);

    for (int step = 0; step < cfg.total_steps(); ++step) {
        const int epoch = step / cfg.steps_per_epoch;
        const double lr = cfg.lr_at_epoch(epoch);

        RngStream step_rng = RngStream::substream(cfg.seed, "train.step." + std::to_string(step));
        std::vector<TrainingExample> batch;
        for (int i = 0; i < cfg.batch_size; ++i) {
            RngStream item_rng = step_rng.substream("item." + std::to_string(i));
            batch.push_back(detail::sample_example(cfg, cache, ds.size(), item_rng));
        }

        Tape tape;
        model.params.zero_grad();
        std::optional<BatchResult> res;
        try {
            res.emplace(model_batch_loss(tape, model, batch));
            const double t = tape.value(res->loss.total)[0];
            if (!std::isfinite(t)) throw NumericError("non-finite loss value");
            tape.backward(res->loss.total);
        } catch (const NumericError& e) {
            throw NumericError("train: aborted at step " + std::to_string(step) + ": " + e.what() + "; " +
                               detail::nonfinite_param_report(model.params));
        }
        const double total = tape.value(res->loss.total)[0];

        AdamWConfig opt;
        opt.lr = lr;
        opt.weight_decay = cfg.weight_decay;
        adamw_step(model.params, opt);

        StepLog row;
        row.step = step;
        row.epoch = epoch;
        row.lr = lr;
        row.cls = tape.value(res->loss.cls)[0];
        row.l1 = tape.value(res->loss.l1)[0];
        row.giou = tape.value(res->loss.giou)[0];
        row.balance = tape.value(res->loss.balance)[0];
        row.importance = tape.value(res->loss.importance)[0];
        row.aux = tape.value(res->loss.aux)[0];
        row.total = total;
        log.steps.push_back(row);
        for (int i = 0; i < cfg.batch_size; ++i)
            log.telemetry.push_back(make_route_record(step, "step" + std::to_string(step) + ".item" +
                                                                std::to_string(i),
                                                      res->outputs[i].seq, model.bank,
                                                      res->outputs[i].fusion.gating, tape));
    }
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return log;
}

// Missing-rate buckets {0, (0-0.3], (0.3-0.7], (0.7-1)}; labels avoid commas
// so the CSV stays naively splittable. Each bucket reports
// the mean selected expert width and per-expert selection counts.
struct RoutingBucket {
    std::string label;
    int64_t records = 0;
    int64_t selections = 0;
    double mean_width = 0.0;
    std::vector<int64_t> counts;
};

struct RoutingTable {
    std::vector<RoutingBucket> buckets;

    std::string csv() const {
        std::string out = "bucket,records,selections,mean_width";
        const size_t n_experts = buckets.empty() ? 0 : buckets[0].counts.size();
        for (size_t n = 0; n < n_experts; ++n) out += ",count_expert" + std::to_string(n);
        out += "\n";
        char buf[64];
        for (const auto& b : buckets) {
            out += b.label;
            std::snprintf(buf, sizeof(buf), ",%lld,%lld,%.6f", static_cast<long long>(b.records),
                          static_cast<long long>(b.selections), b.mean_width);
            out += buf;
            for (int64_t c : b.counts) out += "," + std::to_string(c);
            out += "\n";
        }
        return out;
    }
};

inline RoutingTable analyze_routing(const std::vector<RouteRecord>& telemetry, int n_experts) {
    if (telemetry.empty()) throw ConfigError("analyze_routing: empty telemetry");
    if (n_experts <= 0) throw ConfigError("analyze_routing: n_experts must be positive");
    RoutingTable table;
    for (const char* label : {"0", "(0-0.3]", "(0.3-0.7]", "(0.7-1)"}) {
        RoutingBucket b;
        b.label = label;
        b.counts.assign(n_experts, 0);
        table.buckets.push_back(std::move(b));
    }
    for (const auto& r : telemetry) {
        const int idx = r.missing_rate == 0.0 ? 0 : r.missing_rate <= 0.3 ? 1 : r.missing_rate <= 0.7 ? 2 : 3;
        RoutingBucket& b = table.buckets[idx];
        b.records++;
        for (size_t i = 0; i < r.selected.size(); ++i) {
            if (r.selected[i] < 0 || r.selected[i] >= n_experts)
                throw ContractError("analyze_routing: expert index out of range in telemetry");
            b.counts[r.selected[i]]++;
            b.selections++;
            b.mean_width += r.widths[i];
        }
    }
    for (auto& b : table.buckets)
        if (b.selections > 0) b.mean_width /= static_cast<double>(b.selections);
    return table;
}

}  // namespace moetrack
