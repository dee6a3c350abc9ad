#pragma once

#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "moetrack/report.hpp"

namespace moetrack {

inline constexpr const char* kToolVersion = "1.0.0";

// Flag values as parsed; unset optionals fall back to config-file values and
// built-in defaults during resolution.
struct CliOptions {
    std::optional<std::string> config;
    std::optional<uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> dataset;
    std::optional<double> alpha;
    std::optional<std::string> strategy;
    std::optional<std::string> experts;
    std::optional<std::string> missing;
    std::optional<double> rate;
};

inline std::vector<int> parse_expert_widths(const std::string& s) {
    if (s == "hetero") return HmoeConfig{}.widths;
    if (s.rfind("homo:", 0) == 0) {
        int w = 0;
        try {
            w = std::stoi(s.substr(5));
        } catch (const std::exception&) {
            throw ConfigError("--experts: cannot parse width in '" + s + "'");
        }
        if (w <= 0) throw ConfigError("--experts: width must be positive");
        return std::vector<int>(HmoeConfig{}.widths.size(), w);
    }
    throw ConfigError("--experts must be 'hetero' or 'homo:WIDTH', got '" + s + "'");
}

namespace detail {

inline std::string require_out(const CliOptions& opt, const char* cmd) {
    if (!opt.out || opt.out->empty()) throw ConfigError(std::string(cmd) + ": --out is required");
    return *opt.out;
}

inline std::string require_dataset(const CliOptions& opt, const char* cmd) {
    if (!opt.dataset || opt.dataset->empty()) throw ConfigError(std::string(cmd) + ": --dataset is required");
    return *opt.dataset;
}

inline void record_config(const std::string& out_dir, const char* subcommand, nlohmann::json resolved) {
    resolved["tool"] = "moetrack";
    resolved["version"] = kToolVersion;
    resolved["subcommand"] = subcommand;
    write_text_file(std::filesystem::path(out_dir) / "config.json", resolved.dump(2) + "\n");
}

inline nlohmann::json load_json_file(const std::string& path) {
    try {
        return nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("cannot parse " + path + ": " + e.what());
    }
}

// Train/ablate configs resolve as: built-in defaults, then --config file,
// then explicit flags.
inline TrainConfig resolve_train_config(const CliOptions& opt, const char* cmd) {
    TrainConfig cfg;
    if (opt.config) cfg = train_config_from_json(load_json_file(*opt.config));
    if (opt.seed) cfg.seed = *opt.seed;
    if (opt.alpha) cfg.alpha = *opt.alpha;
    if (opt.strategy) cfg.strategy = parse_mask_strategy(*opt.strategy);
    if (opt.experts) cfg.model.hmoe.widths = parse_expert_widths(*opt.experts);
    if (opt.dataset) cfg.dataset_path = *opt.dataset;
    if (cfg.dataset_path.empty()) throw ConfigError(std::string(cmd) + ": --dataset is required");
    cfg.validate();
    return cfg;
}

// A run directory is a train output: config.json beside a checkpoint/.
inline std::filesystem::path resolve_run_dir(const CliOptions& opt, const char* cmd) {
    if (!opt.config) throw ConfigError(std::string(cmd) + ": --config must point at a train output directory");
    std::filesystem::path p = *opt.config;
    if (std::filesystem::is_directory(p)) return p;
    return p.parent_path();
}

inline std::optional<ScheduleSpec> resolve_schedule(const CliOptions& opt) {
    if (!opt.missing) return std::nullopt;
    ScheduleSpec s;
    s.kind = parse_missing_kind(*opt.missing);
    s.rate = opt.rate.value_or(0.5);
    s.seed = opt.seed.value_or(7);
    return s;
}

inline void write_run_artifacts(const std::string& out_dir, const TrackModel& model, const RunLog& log) {
    const std::filesystem::path out(out_dir);
    save_checkpoint(model.params, out / "checkpoint");
    write_text_file(out / "steps.csv", log.steps_csv());
    write_text_file(out / "telemetry.csv", log.telemetry_csv());
}

// The recorded config parses back as a TrainConfig, so an eval directory can
// feed route-viz directly.
inline void write_eval_artifacts(const std::string& out_dir, const EvalResult& res, const TrainConfig& tc,
                                 const char* subcommand, nlohmann::json eval_meta) {
    const std::filesystem::path out(out_dir);
    write_text_file(out / "report.json", res.report.to_json().dump(2) + "\n");
    write_text_file(out / "report.csv", res.report.to_csv());
    std::string tele = telemetry_csv_header() + "\n";
    for (const auto& r : res.telemetry) tele += telemetry_csv_row(r) + "\n";
    write_text_file(out / "telemetry.csv", tele);
    nlohmann::json resolved = train_config_to_json(tc);
    eval_meta["schedule"] = res.report.schedule_desc;
    resolved["eval"] = std::move(eval_meta);
    record_config(out_dir, subcommand, std::move(resolved));
}

}  // namespace detail

inline int run_gen_data(const CliOptions& opt) {
    const std::string out = detail::require_out(opt, "gen-data");
    SceneSpec spec;
    int train_videos = 200, eval_videos = 50;
    if (opt.config) {
        const auto j = detail::load_json_file(*opt.config);
        if (j.contains("spec")) spec = spec_from_json(j.at("spec"));
        train_videos = j.value("train_videos", train_videos);
        eval_videos = j.value("eval_videos", eval_videos);
    }
    spec.validate();
    const uint64_t seed = opt.seed.value_or(7);
    const uint64_t eval_seed = derive_seed(seed, "dataset.eval");
    make_dataset(spec, train_videos, seed, out + "/train");
    make_dataset(spec, eval_videos, eval_seed, out + "/eval");
    detail::record_config(out, "gen-data",
                          {{"spec", spec_to_json(spec)},
                           {"train_videos", train_videos},
                           {"eval_videos", eval_videos},
                           {"seed", seed},
                           {"eval_seed", eval_seed}});
    std::cout << nlohmann::json{{"subcommand", "gen-data"},
                                {"train_videos", train_videos},
                                {"eval_videos", eval_videos},
                                {"out", out}}
                     .dump()
              << "\n";
    return 0;
}

inline int run_make_missing(const CliOptions& opt) {
    const std::string out = detail::require_out(opt, "make-missing");
    const std::string dataset = detail::require_dataset(opt, "make-missing");
    if (!opt.missing) throw ConfigError("make-missing: --missing is required");
    const MissingKind kind = parse_missing_kind(*opt.missing);
    const double rate = opt.rate.value_or(0.5);
    const uint64_t seed = opt.seed.value_or(7);
    const Dataset ds = load_dataset(dataset);
    for (int v = 0; v < ds.size(); ++v) {
        const MissingSchedule s = make_schedule(kind, ds.videos[v].spec.length, rate, derive_seed(seed, "schedule." + std::to_string(v)));
        char name[48];
        std::snprintf(name, sizeof(name), "schedule_video_%04d.json", v);
        write_text_file(std::filesystem::path(out) / name, schedule_to_json(s).dump(2) + "\n");
    }
    detail::record_config(out, "make-missing",
                          {{"dataset", dataset},
                           {"missing", missing_kind_name(kind)},
                           {"rate", rate},
                           {"seed", seed},
                           {"videos", ds.size()}});
    std::cout << nlohmann::json{{"subcommand", "make-missing"}, {"videos", ds.size()}, {"out", out}}.dump()
              << "\n";
    return 0;
}

inline int run_train(const CliOptions& opt) {
    const std::string out = detail::require_out(opt, "train");
    const TrainConfig cfg = detail::resolve_train_config(opt, "train");
    const Dataset ds = load_dataset(cfg.dataset_path);
    TrackModel model(cfg.model, cfg.seed);
    const RunLog log = train(model, ds, cfg);
    detail::write_run_artifacts(out, model, log);
    detail::record_config(out, "train", train_config_to_json(cfg));
    std::cout << nlohmann::json{{"subcommand", "train"},
                                {"steps", log.steps.size()},
                                {"final_total_loss", log.steps.back().total},
                                {"wall_seconds", log.wall_seconds},
                                {"out", out}}
                     .dump()
              << "\n";
    return 0;
}

inline int run_eval(const CliOptions& opt) {
    const std::string out = detail::require_out(opt, "eval");
    const std::string dataset = detail::require_dataset(opt, "eval");
    const std::filesystem::path run_dir = detail::resolve_run_dir(opt, "eval");
    const TrainConfig tc = train_config_from_json(detail::load_json_file((run_dir / "config.json").string()));
    TrackModel model(tc.model, tc.seed);
    load_checkpoint(model.params, run_dir / "checkpoint");
    const Dataset ds = load_dataset(dataset);
    const std::optional<ScheduleSpec> sched = detail::resolve_schedule(opt);
    const EvalResult res = evaluate(model, ds, tc.crop, sched);
    detail::write_eval_artifacts(out, res, tc, "eval",
                                 {{"run_dir", run_dir.string()}, {"dataset", dataset}});
    std::cout << nlohmann::json{{"subcommand", "eval"},
                                {"schedule", res.report.schedule_desc},
                                {"precision_at_20", res.report.precision_at_20},
                                {"success_auc", res.report.success_auc},
                                {"out", out}}
                     .dump()
              << "\n";
    return 0;
}

namespace detail {

struct AblationVariant {
    std::string label;
    TrainConfig cfg;
};

inline int run_ablation(const CliOptions& opt, const char* cmd, const std::string& row_key,
                        const std::vector<AblationVariant>& variants) {
    const std::string out = require_out(opt, cmd);
    const std::string dataset = require_dataset(opt, cmd);
    const Dataset train_ds = load_dataset(dataset + "/train");
    const Dataset eval_ds = load_dataset(dataset + "/eval");

    ScheduleSpec missing;
    missing.kind = opt.missing ? parse_missing_kind(*opt.missing) : MissingKind::Random;
    missing.rate = opt.rate.value_or(0.5);
    missing.seed = opt.seed.value_or(7);

    std::vector<AblationCell> cells;
    nlohmann::json variant_meta = nlohmann::json::array();
    for (const AblationVariant& v : variants) {
        TrainConfig cfg = v.cfg;
        cfg.dataset_path = dataset + "/train";
        cfg.validate();
        TrackModel model(cfg.model, cfg.seed);
        const RunLog log = train(model, train_ds, cfg);
        const std::string vdir = out + "/" + v.label;
        write_run_artifacts(vdir, model, log);
        record_config(vdir, cmd, train_config_to_json(cfg));
        const EvalResult full = evaluate(model, eval_ds, cfg.crop, std::nullopt);
        const EvalResult miss = evaluate(model, eval_ds, cfg.crop, missing);
        write_eval_artifacts(vdir + "/eval_full", full, cfg, cmd, {{"dataset", dataset + "/eval"}});
        write_eval_artifacts(vdir + "/eval_missing", miss, cfg, cmd, {{"dataset", dataset + "/eval"}});
        cells.push_back({v.label, "full", full.report.precision_at_20, full.report.success_auc});
        cells.push_back({v.label, "missing", miss.report.precision_at_20, miss.report.success_auc});
        variant_meta.push_back({{"label", v.label}, {"config", train_config_to_json(cfg)}});
    }
    write_text_file(std::filesystem::path(out) / "ablation.csv", ablation_csv(cells, row_key));
    write_text_file(std::filesystem::path(out) / "ablation.svg",
                    ablation_svg(cells, std::string(cmd) + " precision, full vs missing"));
    record_config(out, cmd,
                  {{"dataset", dataset},
                   {"missing_schedule", missing.describe()},
                   {"variants", variant_meta}});
    std::cout << nlohmann::json{{"subcommand", cmd}, {"rows", cells.size()}, {"out", out}}.dump() << "\n";
    return 0;
}

}  // namespace detail

inline int run_ablate_masking(const CliOptions& opt) {
    CliOptions base_opt = opt;
    base_opt.strategy.reset();  // the axis under ablation
    base_opt.dataset = detail::require_dataset(opt, "ablate-masking") + "/train";
    const TrainConfig base = detail::resolve_train_config(base_opt, "ablate-masking");
    std::vector<detail::AblationVariant> variants;
    for (MaskStrategy s :
         {MaskStrategy::VideoLevel, MaskStrategy::None, MaskStrategy::Random, MaskStrategy::Tube}) {
        TrainConfig cfg = base;
        cfg.strategy = s;
        variants.push_back({mask_strategy_name(s), cfg});
    }
    return detail::run_ablation(opt, "ablate-masking", "strategy", variants);
}

inline int run_ablate_experts(const CliOptions& opt) {
    CliOptions base_opt = opt;
    base_opt.experts.reset();  // the axis under ablation
    base_opt.dataset = detail::require_dataset(opt, "ablate-experts") + "/train";
    const TrainConfig base = detail::resolve_train_config(base_opt, "ablate-experts");
    std::vector<detail::AblationVariant> variants;
    for (const char* label : {"hetero", "homo:512", "homo:64", "homo:4"}) {
        TrainConfig cfg = base;
        cfg.model.hmoe.widths = parse_expert_widths(label);
        variants.push_back({label, cfg});
    }
    return detail::run_ablation(opt, "ablate-experts", "experts", variants);
}

inline int run_route_viz(const CliOptions& opt) {
    const std::string out = detail::require_out(opt, "route-viz");
    const std::filesystem::path run_dir = detail::resolve_run_dir(opt, "route-viz");
    const TrainConfig tc = train_config_from_json(detail::load_json_file((run_dir / "config.json").string()));
    const std::vector<RouteRecord> telemetry =
        telemetry_from_csv(read_text_file(run_dir / "telemetry.csv"));
    const RouteViz viz = make_route_viz(telemetry, tc.model.hmoe.widths);
    write_text_file(std::filesystem::path(out) / "routing.csv", viz.csv);
    write_text_file(std::filesystem::path(out) / "routing.svg", viz.svg);
    write_text_file(std::filesystem::path(out) / "summary.json", viz.summary.dump(2) + "\n");
    detail::record_config(out, "route-viz",
                          {{"run_dir", run_dir.string()},
                           {"records", telemetry.size()},
                           {"widths", tc.model.hmoe.widths}});
    std::cout << nlohmann::json{{"subcommand", "route-viz"}, {"records", telemetry.size()}, {"out", out}}.dump()
              << "\n";
    return 0;
}

inline int cli_main(int argc, const char* const* argv) {
    CLI::App app{"moetrack: mixture-of-experts multimodal tracker on synthetic scenes"};
    app.require_subcommand(1);
    CliOptions opt;

    auto add_common = [&](CLI::App* sub, bool with_dataset) {
        sub->add_option("--config", opt.config, "JSON config file or run directory");
        sub->add_option("--seed", opt.seed, "master random seed");
        sub->add_option("--out", opt.out, "output directory");
        if (with_dataset) sub->add_option("--dataset", opt.dataset, "dataset directory");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic two-modality dataset");
    add_common(gen, false);

    CLI::App* mm = app.add_subcommand("make-missing", "write per-video missing-modality schedules");
    add_common(mm, true);
    mm->add_option("--missing", opt.missing, "schedule kind: random, switched, prolonged");
    mm->add_option("--rate", opt.rate, "missing rate in [0,1)");

    CLI::App* tr = app.add_subcommand("train", "train a tracker");
    add_common(tr, true);
    tr->add_option("--alpha", opt.alpha, "video-level clip mask probability");
    tr->add_option("--strategy", opt.strategy, "masking strategy: video_level, none, random, tube");
    tr->add_option("--experts", opt.experts, "expert bank: hetero or homo:WIDTH");

    CLI::App* ev = app.add_subcommand("eval", "evaluate a trained run directory");
    add_common(ev, true);
    ev->add_option("--missing", opt.missing, "schedule kind: random, switched, prolonged");
    ev->add_option("--rate", opt.rate, "missing rate in [0,1)");

    CLI::App* am = app.add_subcommand("ablate-masking", "train and evaluate every masking strategy");
    add_common(am, true);
    am->add_option("--alpha", opt.alpha, "video-level clip mask probability");
    am->add_option("--experts", opt.experts, "expert bank: hetero or homo:WIDTH");
    am->add_option("--missing", opt.missing, "eval schedule kind");
    am->add_option("--rate", opt.rate, "eval missing rate in [0,1)");

    CLI::App* ae = app.add_subcommand("ablate-experts", "train and evaluate expert bank variants");
    add_common(ae, true);
    ae->add_option("--alpha", opt.alpha, "video-level clip mask probability");
    ae->add_option("--strategy", opt.strategy, "masking strategy for every variant");
    ae->add_option("--missing", opt.missing, "eval schedule kind");
    ae->add_option("--rate", opt.rate, "eval missing rate in [0,1)");

    CLI::App* rv = app.add_subcommand("route-viz", "plot expert routing by missing-rate bucket");
    add_common(rv, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cout << app.help();
        std::string msg = e.what();
        for (char& c : msg)
            if (c == '\n') c = ' ';
        std::cerr << nlohmann::json{{"error", msg}, {"code", 2}}.dump() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) return run_gen_data(opt);
        if (mm->parsed()) return run_make_missing(opt);
        if (tr->parsed()) return run_train(opt);
        if (ev->parsed()) return run_eval(opt);
        if (am->parsed()) return run_ablate_masking(opt);
        if (ae->parsed()) return run_ablate_experts(opt);
        if (rv->parsed()) return run_route_viz(opt);
        throw ContractError("no subcommand dispatched");
    } catch (const std::exception& e) {
        std::string msg = e.what();
        for (char& c : msg)
            if (c == '\n') c = ' ';
        std::cerr << nlohmann::json{{"error", msg}, {"code", 1}}.dump() << "\n";
        return 1;
    }
}

}  // namespace moetrack
