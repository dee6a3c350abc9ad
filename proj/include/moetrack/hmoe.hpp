#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "moetrack/encoder.hpp"

namespace moetrack {

struct HmoeConfig {
    // Expert hidden widths in bank order. The heterogeneous default spans
    // 2^2..2^9; homogeneous banks repeat one width.
    std::vector<int> widths = {4, 8, 16, 32, 64, 128, 256, 512};
    int top_k = 2;
    bool renormalize = false;  // off: literal softmax-then-zero gates

    int n_experts() const { return static_cast<int>(widths.size()); }

    void validate() const {
        if (widths.empty()) throw ConfigError("expert bank is empty");
        for (size_t i = 0; i < widths.size(); ++i) {
            const int w = widths[i];
            if (w < 4 || (w & (w - 1)) != 0)
                throw ConfigError("expert width " + std::to_string(w) + " is not a power of two >= 4");
            if (i > 0 && w < widths[i - 1]) throw ConfigError("expert widths must be non-decreasing");
        }
        if (top_k < 1 || top_k > n_experts())
            throw ConfigError("top_k " + std::to_string(top_k) + " outside [1, " + std::to_string(n_experts()) + "]");
    }
};

inline std::vector<int> hetero_widths(int d_max) {
    if (d_max < 2) throw ConfigError("hetero_widths: need d_max >= 2");
    std::vector<int> out;
    for (int d = 2; d <= d_max; ++d) out.push_back(1 << d);
    return out;
}

inline std::vector<int> homo_widths(int n_experts, int width) {
    return std::vector<int>(static_cast<size_t>(n_experts), width);
}

// Widths plus per-expert evaluation counters; the counters exist so tests
// can assert that exactly the selected experts ran.
struct ExpertBank {
    HmoeConfig cfg;
    mutable std::vector<int64_t> eval_counts;

    explicit ExpertBank(HmoeConfig c) : cfg(std::move(c)), eval_counts(cfg.widths.size(), 0) { cfg.validate(); }

    void reset_counts() const { std::fill(eval_counts.begin(), eval_counts.end(), 0); }
    int64_t total_evals() const { return std::accumulate(eval_counts.begin(), eval_counts.end(), int64_t{0}); }
};

inline void init_hmoe_params(ParamStore& ps, const HmoeConfig& cfg, int channels, int total_tokens,
                             RngStream& rng) {
    cfg.validate();
    for (int n = 0; n < cfg.n_experts(); ++n) {
        const std::string base = "hmoe.expert" + std::to_string(n);
        detail::init_linear(ps, base + ".in", channels, cfg.widths[n], rng);
        detail::init_linear(ps, base + ".out", cfg.widths[n], channels, rng);
    }
    ps.create("hmoe.gate.w", detail::fan_in_normal({channels, cfg.n_experts()}, rng));
    ps.create("hmoe.w1", detail::fan_in_normal({channels, channels}, rng));
    ps.create("hmoe.w2", detail::fan_in_normal({channels, channels}, rng));
    ps.create("hmoe.w3", detail::fan_in_normal({channels, total_tokens}, rng));
    ps.create("hmoe.w4", detail::fan_in_normal({channels, channels}, rng));
}

// Indices of the k largest values, ties broken toward the lower index.
// Returned ascending.
inline std::vector<int> select_top_k(const std::vector<double>& values, int k) {
    if (k < 1 || k > static_cast<int>(values.size()))
        throw ConfigError("select_top_k: k " + std::to_string(k) + " outside [1, " +
                          std::to_string(values.size()) + "]");
    std::vector<int> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return values[a] > values[b]; });
    std::vector<int> picked(order.begin(), order.begin() + k);
    std::sort(picked.begin(), picked.end());
    return picked;
}

struct GateResult {
    Var logits;  // [1 x M]
    Var probs;   // [1 x M], full softmax
    Var gates;   // [1 x M], probs at selected indices, zero elsewhere
    std::vector<int> selected;  // ascending, |selected| = K
};

// Eq-1 style gating on raw logits: softmax, keep the top-K entries, zero the
// rest without renormalizing (unless the config flag asks for it).
inline GateResult gate_from_logits(Tape& t, Var logits, const HmoeConfig& cfg) {
    const Tensor& lv = t.value(logits);
    if (lv.rows() != 1 || lv.cols() != cfg.n_experts())
        throw ShapeError("gate_from_logits: want [1x" + std::to_string(cfg.n_experts()) + "], got " +
                         shape_str(lv.shape()));
    cfg.validate();
    GateResult r;
    r.logits = logits;
    r.probs = row_softmax(logits);
    r.selected = select_top_k(lv.data(), cfg.top_k);
    Tensor keep = Tensor::zeros({1, cfg.n_experts()});
    for (int idx : r.selected) keep[idx] = 1.0;
    r.gates = mul(r.probs, t.leaf(keep));
    if (cfg.renormalize) r.gates = div(r.gates, sum(r.gates));
    return r;
}

// One routing decision per sequence: mean over all L token rows (zeros from
// masked segments included; the zeros are the router's missingness signal).
inline GateResult gate(Tape& t, const TokenSequence& seq, ParamStore& ps, const HmoeConfig& cfg) {
    Var pooled = mean_axis0(seq.tokens);
    return gate_from_logits(t, matmul(pooled, use(t, ps.get("hmoe.gate.w"))), cfg);
}

inline Var expert_forward(Tape& t, ParamStore& ps, const ExpertBank& bank, int n, Var tv) {
    if (n < 0 || n >= bank.cfg.n_experts()) throw ContractError("expert index " + std::to_string(n) + " out of range");
    bank.eval_counts[n]++;
    const std::string base = "hmoe.expert" + std::to_string(n);
    Var h = gelu(linear(t, tv, ps.get(base + ".in.w"), ps.get(base + ".in.b")));
    return linear(t, h, ps.get(base + ".out.w"), ps.get(base + ".out.b"));
}

// T_y1 = sum over selected experts of g_n * E_n(T_v). Unselected experts are
// never evaluated.
inline Var hmoe_mix(Tape& t, ParamStore& ps, const ExpertBank& bank, const GateResult& g, Var tv) {
    Var acc;
    for (int n : g.selected) {
        Var term = mul(expert_forward(t, ps, bank, n, tv), slice_cols(g.gates, n, 1));
        acc = acc.valid() ? add(acc, term) : term;
    }
    return acc;
}

// T_y2 = (T_v W1)(T_v W2)^T, attention without softmax.
inline Var linear_attention(Tape& t, Var tv, Var w1, Var w2) {
    return matmul(matmul(tv, w1), transpose(matmul(tv, w2)));
}

// T_y3 = (T_y2)^T T_y1; T_y4 = row_softmax(T_v W3) T_y3; T_y5 = T_y4 W4.
inline Var fuse_chain(Tape& t, Var tv, Var ty1, Var ty2, Var w3, Var w4) {
    const int l = t.value(tv).rows();
    if (t.value(w3).cols() != l)
        throw ConfigError("fuse_chain: W3 maps to " + std::to_string(t.value(w3).cols()) +
                          " columns but the sequence length is fixed at " + std::to_string(l));
    Var ty3 = matmul(transpose(ty2), ty1);
    Var attn = row_softmax(matmul(tv, w3));
    return matmul(matmul(attn, ty3), w4);
}

struct FusionResult {
    Var out;  // [L x C], residual added
    GateResult gating;
};

inline FusionResult hmoe_fuse_forward(Tape& t, const TokenSequence& seq, ParamStore& ps, const ExpertBank& bank) {
    GateResult g = gate(t, seq, ps, bank.cfg);
    Var ty1 = hmoe_mix(t, ps, bank, g, seq.tokens);
    Var ty2 = linear_attention(t, seq.tokens, use(t, ps.get("hmoe.w1")), use(t, ps.get("hmoe.w2")));
    Var ty5 = fuse_chain(t, seq.tokens, ty1, ty2, use(t, ps.get("hmoe.w3")), use(t, ps.get("hmoe.w4")));
    return FusionResult{add(seq.tokens, ty5), std::move(g)};
}

// One telemetry row per forward pass; list-valued cells are joined with ';'.
struct RouteRecord {
    int64_t step = 0;
    std::string sequence_id;
    double missing_rate = 0.0;
    std::vector<int> selected;
    std::vector<int> widths;
    std::vector<double> gate_values;
};

inline RouteRecord make_route_record(int64_t step, std::string sequence_id, const TokenSequence& seq,
                                     const ExpertBank& bank, const GateResult& g, const Tape& t) {
    RouteRecord r;
    r.step = step;
    r.sequence_id = std::move(sequence_id);
    r.missing_rate = seq.missing_rate();
    r.selected = g.selected;
    for (int n : g.selected) {
        r.widths.push_back(bank.cfg.widths[n]);
        r.gate_values.push_back(t.value(g.gates)[n]);
    }
    return r;
}

inline std::string telemetry_csv_header() {
    return "step,sequence_id,missing_rate,selected_expert_indices,selected_widths,gate_values";
}

inline std::string telemetry_csv_row(const RouteRecord& r) {
    auto join = [](const auto& xs, auto fmt) {
        std::string out;
        for (size_t i = 0; i < xs.size(); ++i) {
            if (i) out += ';';
            out += fmt(xs[i]);
        }
        return out;
    };
    char mr[32];
    std::snprintf(mr, sizeof(mr), "%.6f", r.missing_rate);
    return std::to_string(r.step) + "," + r.sequence_id + "," + mr + "," +
           join(r.selected, [](int v) { return std::to_string(v); }) + "," +
           join(r.widths, [](int v) { return std::to_string(v); }) + "," + join(r.gate_values, [](double v) {
               char buf[32];
               std::snprintf(buf, sizeof(buf), "%.9f", v);
               return std::string(buf);
           });
}

}  // namespace moetrack
