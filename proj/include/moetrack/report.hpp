#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>

#include "moetrack/train.hpp"

namespace moetrack {

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << content;
    if (!f) throw IoError("write failed for " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Hand-written grouped bar chart; the numbers always live in a CSV twin, the
// SVG is only for eyeballs.
struct BarChart {
    std::string title;
    std::string y_label;
    std::vector<std::string> groups;
    std::vector<std::string> series;
    std::vector<std::vector<double>> values;  // [group][series]

    std::string render() const {
        if (groups.empty() || series.empty()) throw ContractError("bar chart: no data");
        for (const auto& row : values)
            if (row.size() != series.size()) throw ContractError("bar chart: ragged value rows");
        if (values.size() != groups.size()) throw ContractError("bar chart: one value row per group required");

        double ymax = 0.0;
        for (const auto& row : values)
            for (double v : row) ymax = std::max(ymax, v);
        if (ymax <= 0.0) ymax = 1.0;

        const int bar_w = 16, bar_gap = 2, group_gap = 26;
        const int plot_h = 210, top = 40, left = 64;
        const int group_w = static_cast<int>(series.size()) * (bar_w + bar_gap) + group_gap;
        const int width = left + static_cast<int>(groups.size()) * group_w + 150;
        const int height = top + plot_h + 50;
        static const char* kPalette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2",
                                         "#59a14f", "#edc948", "#b07aa1", "#9c755f"};
        const size_t n_colors = sizeof(kPalette) / sizeof(kPalette[0]);

        std::ostringstream svg;
        svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
            << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
        svg << "<text x=\"" << left << "\" y=\"20\" font-family=\"monospace\" font-size=\"13\">" << title
            << "</text>\n";
        for (int tick = 0; tick <= 2; ++tick) {
            const double v = ymax * tick / 2.0;
            const double y = top + plot_h - plot_h * tick / 2.0;
            svg << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << width - 140 << "\" y2=\"" << y
                << "\" stroke=\"#ddd\"/>\n";
            char label[32];
            std::snprintf(label, sizeof(label), "%g", v);
            svg << "<text x=\"" << left - 6 << "\" y=\"" << y + 4
                << "\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"10\">" << label << "</text>\n";
        }
        svg << "<text x=\"14\" y=\"" << top + plot_h / 2
            << "\" font-family=\"monospace\" font-size=\"10\" transform=\"rotate(-90 14 " << top + plot_h / 2
            << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
        for (size_t g = 0; g < groups.size(); ++g) {
            const int gx = left + static_cast<int>(g) * group_w;
            for (size_t s = 0; s < series.size(); ++s) {
                const double v = values[g][s];
                const double h = plot_h * v / ymax;
                svg << "<rect x=\"" << gx + static_cast<int>(s) * (bar_w + bar_gap) << "\" y=\""
                    << top + plot_h - h << "\" width=\"" << bar_w << "\" height=\"" << h << "\" fill=\""
                    << kPalette[s % n_colors] << "\"/>\n";
            }
            svg << "<text x=\"" << gx + (group_w - group_gap) / 2 << "\" y=\"" << top + plot_h + 16
                << "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"10\">" << groups[g]
                << "</text>\n";
        }
        for (size_t s = 0; s < series.size(); ++s) {
            const int ly = top + static_cast<int>(s) * 16;
            svg << "<rect x=\"" << width - 130 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\""
                << kPalette[s % n_colors] << "\"/>\n";
            svg << "<text x=\"" << width - 116 << "\" y=\"" << ly + 9
                << "\" font-family=\"monospace\" font-size=\"10\">" << series[s] << "</text>\n";
        }
        svg << "</svg>\n";
        return svg.str();
    }
};

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace detail

inline std::vector<RouteRecord> telemetry_from_csv(const std::string& csv) {
    std::vector<RouteRecord> out;
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line)) throw IoError("telemetry csv: empty file");
    if (line != telemetry_csv_header()) throw IoError("telemetry csv: unexpected header: " + line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = detail::split(line, ',');
        if (fields.size() != 6) throw IoError("telemetry csv: malformed row: " + line);
        RouteRecord r;
        r.step = std::stoll(fields[0]);
        r.sequence_id = fields[1];
        r.missing_rate = std::stod(fields[2]);
        for (const auto& v : detail::split(fields[3], ';'))
            if (!v.empty()) r.selected.push_back(std::stoi(v));
        for (const auto& v : detail::split(fields[4], ';'))
            if (!v.empty()) r.widths.push_back(std::stoi(v));
        for (const auto& v : detail::split(fields[5], ';'))
            if (!v.empty()) r.gate_values.push_back(std::stod(v));
        if (r.selected.size() != r.widths.size() || r.selected.size() != r.gate_values.size())
            throw IoError("telemetry csv: list fields disagree in length: " + line);
        out.push_back(std::move(r));
    }
    return out;
}

struct RouteViz {
    RoutingTable table;
    std::string csv;
    std::string svg;
    nlohmann::json summary;
};

// Selection histogram per missing-rate bucket plus a full-vs-missing mean
// width comparison. The increase flag reports the observed direction; it is
// informational, not a guarantee.
inline RouteViz make_route_viz(const std::vector<RouteRecord>& telemetry, const std::vector<int>& widths) {
    RouteViz viz;
    viz.table = analyze_routing(telemetry, static_cast<int>(widths.size()));
    viz.csv = viz.table.csv();

    BarChart chart;
    chart.title = "expert selections by missing-rate bucket";
    chart.y_label = "selections";
    for (const auto& b : viz.table.buckets) chart.groups.push_back(b.label);
    for (int w : widths) chart.series.push_back("width " + std::to_string(w));
    for (const auto& b : viz.table.buckets) {
        std::vector<double> row;
        for (int64_t c : b.counts) row.push_back(static_cast<double>(c));
        chart.values.push_back(std::move(row));
    }
    viz.svg = chart.render();

    const RoutingBucket& full = viz.table.buckets[0];
    int64_t missing_selections = 0;
    double missing_width_sum = 0.0;
    nlohmann::json buckets = nlohmann::json::array();
    for (const auto& b : viz.table.buckets) {
        buckets.push_back({{"label", b.label},
                           {"records", b.records},
                           {"selections", b.selections},
                           {"mean_selected_width", b.mean_width},
                           {"counts", b.counts}});
        if (&b != &full) {
            missing_selections += b.selections;
            missing_width_sum += b.mean_width * static_cast<double>(b.selections);
        }
    }
    const bool comparable = full.selections > 0 && missing_selections > 0;
    const double mean_missing = missing_selections > 0 ? missing_width_sum / missing_selections : 0.0;
    viz.summary = {{"buckets", buckets},
                   {"mean_width_full", full.mean_width},
                   {"mean_width_missing", mean_missing},
                   {"comparable", comparable},
                   {"width_increases_under_missing", comparable && mean_missing > full.mean_width}};
    return viz;
}

struct AblationCell {
    std::string row_label;  // masking strategy or expert configuration
    std::string condition;  // "full" or "missing"
    double precision = 0.0;
    double auc = 0.0;
};

inline std::string ablation_csv(const std::vector<AblationCell>& cells, const std::string& row_key) {
    std::string out = row_key + ",condition,precision_at_20,success_auc\n";
    char buf[64];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof(buf), ",%s,%.6f,%.6f\n", c.condition.c_str(), c.precision, c.auc);
        out += c.row_label + buf;
    }
    return out;
}

inline std::string ablation_svg(const std::vector<AblationCell>& cells, const std::string& title) {
    BarChart chart;
    chart.title = title;
    chart.y_label = "precision@20px";
    std::vector<std::vector<double>> by_group;
    for (const auto& c : cells) {
        size_t g = 0;
        for (; g < chart.groups.size(); ++g)
            if (chart.groups[g] == c.row_label) break;
        if (g == chart.groups.size()) {
            chart.groups.push_back(c.row_label);
            by_group.emplace_back();
        }
        size_t s = 0;
        for (; s < chart.series.size(); ++s)
            if (chart.series[s] == c.condition) break;
        if (s == chart.series.size()) chart.series.push_back(c.condition);
        if (by_group[g].size() <= s) by_group[g].resize(s + 1, 0.0);
        by_group[g][s] = c.precision;
    }
    for (auto& row : by_group) row.resize(chart.series.size(), 0.0);
    chart.values = std::move(by_group);
    return chart.render();
}

}  // namespace moetrack
