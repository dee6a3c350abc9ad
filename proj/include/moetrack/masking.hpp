#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "moetrack/encoder.hpp"
#include "moetrack/rng.hpp"

namespace moetrack {

// Pattern index convention follows the masking algorithm's literal order:
// element 0 gates the X modality, element 1 gates RGB.
struct MaskPattern {
    int keep_x = 1;
    int keep_rgb = 1;

    bool operator==(const MaskPattern&) const = default;
    int keep(Modality m) const { return m == Modality::X ? keep_x : keep_rgb; }
};

struct MaskDecision {
    MaskPattern search;
    bool clip_masking_applied = false;
    std::vector<MaskPattern> clips;  // one per clip, present iff applied

    static MaskDecision all_keep() { return MaskDecision{}; }
};

enum class MaskStrategy { VideoLevel, None, Random, Tube };

inline MaskStrategy parse_mask_strategy(const std::string& s) {
    if (s == "video_level") return MaskStrategy::VideoLevel;
    if (s == "none") return MaskStrategy::None;
    if (s == "random") return MaskStrategy::Random;
    if (s == "tube") return MaskStrategy::Tube;
    throw ConfigError("unknown masking strategy '" + s + "' (want video_level, none, random or tube)");
}

inline const char* mask_strategy_name(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::VideoLevel: return "video_level";
        case MaskStrategy::None: return "none";
        case MaskStrategy::Random: return "random";
        case MaskStrategy::Tube: return "tube";
    }
    return "?";
}

// Evaluation runs inside this scope; any masking call within it is a bug.
class InferenceScope {
  public:
    InferenceScope() { depth()++; }
    ~InferenceScope() { depth()--; }
    InferenceScope(const InferenceScope&) = delete;
    InferenceScope& operator=(const InferenceScope&) = delete;

    static bool active() { return depth() > 0; }

  private:
    static int& depth() {
        thread_local int d = 0;
        return d;
    }
};

inline int64_t& mask_application_count() {
    thread_local int64_t c = 0;
    return c;
}

namespace detail {

inline void require_masking_allowed(const char* who) {
    if (InferenceScope::active())
        throw ContractError(std::string(who) + " called during inference; masking is training-only");
}

}  // namespace detail

// Search pattern from the 5-element multiset {[1,1]x3, [1,0], [0,1]}; with
// probability alpha, per-clip patterns drawn uniformly from the 3-element
// set. [0,0] is outside both sets, so one modality always survives.
// Draws come from fixed purpose substreams of the caller's stream, so adding
// draws to one purpose never shifts the others.
inline MaskDecision sample_mask_decision(RngStream& rng, int n_clips, double alpha) {
    detail::require_masking_allowed("sample_mask_decision");
    if (n_clips <= 0) throw ContractError("sample_mask_decision: n_clips must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ContractError("sample_mask_decision: alpha " + std::to_string(alpha) + " outside [0,1]");
    RngStream search_rng = rng.substream("mask.search");
    RngStream p_rng = rng.substream("mask.p");
    RngStream clip_rng = rng.substream("mask.clips");

    static constexpr MaskPattern kSearchSet[5] = {{1, 1}, {1, 1}, {1, 1}, {1, 0}, {0, 1}};
    static constexpr MaskPattern kClipSet[3] = {{1, 1}, {1, 0}, {0, 1}};

    MaskDecision d;
    d.search = kSearchSet[search_rng.uniform_int(5)];
    d.clip_masking_applied = p_rng.uniform01() < alpha;
    if (d.clip_masking_applied) {
        d.clips.reserve(n_clips);
        for (int i = 0; i < n_clips; ++i) d.clips.push_back(kClipSet[clip_rng.uniform_int(3)]);
    }
    return d;
}

namespace detail {

inline int layout_n_clips(const SegmentLayout& layout) {
    int n = 0;
    for (const Segment& s : layout.segments) n = std::max(n, s.clip_index);
    return n;
}

}  // namespace detail

// Zeroes masked segments and clears their availability flags. Kept rows are
// bit-identical to the input.
inline TokenSequence apply_mask(Tape& t, const TokenSequence& seq, const MaskDecision& d) {
    detail::require_masking_allowed("apply_mask");
    const int n_clips = detail::layout_n_clips(seq.layout);
    if (d.clip_masking_applied && static_cast<int>(d.clips.size()) != n_clips)
        throw ContractError("apply_mask: decision has " + std::to_string(d.clips.size()) + " clip patterns, layout has " +
                            std::to_string(n_clips) + " clips");
    mask_application_count()++;

    TokenSequence out = seq;
    std::vector<double> keep(seq.layout.total, 1.0);
    bool any = false;
    auto drop_segment = [&](Modality m, int clip_index) {
        const Segment& s = out.layout.find(m, clip_index);
        for (int r = 0; r < s.count; ++r) keep[static_cast<size_t>(s.start) + r] = 0.0;
        out.availability[s.id] = 0;
        any = true;
    };
    if (!d.search.keep_x) drop_segment(Modality::X, -1);
    if (!d.search.keep_rgb) drop_segment(Modality::RGB, -1);
    if (d.clip_masking_applied)
        for (int i = 1; i <= n_clips; ++i) {
            if (!d.clips[i - 1].keep_x) drop_segment(Modality::X, i);
            if (!d.clips[i - 1].keep_rgb) drop_segment(Modality::RGB, i);
        }
    if (any) out.tokens = scale_rows(out.tokens, keep);
    return out;
}

// Ablation baseline: every token row zeroed independently with probability
// ratio, availability flags untouched (this strategy is availability-blind).
inline TokenSequence random_token_mask(Tape& t, const TokenSequence& seq, double ratio, RngStream& rng) {
    detail::require_masking_allowed("random_token_mask");
    if (!(ratio >= 0.0 && ratio <= 1.0))
        throw ContractError("random_token_mask: ratio " + std::to_string(ratio) + " outside [0,1]");
    mask_application_count()++;
    TokenSequence out = seq;
    if (ratio == 0.0) return out;
    std::vector<double> keep(seq.layout.total, 1.0);
    bool any = false;
    for (auto& k : keep)
        if (rng.bernoulli(ratio)) {
            k = 0.0;
            any = true;
        }
    if (any) out.tokens = scale_rows(out.tokens, keep);
    return out;
}

// Ablation baseline: one spatial hole set of floor(ratio * clip_tokens)
// positions per modality, replicated across that modality's clips. Search
// segments and availability flags untouched.
inline TokenSequence tube_mask(Tape& t, const TokenSequence& seq, double ratio, RngStream& rng) {
    detail::require_masking_allowed("tube_mask");
    if (!(ratio >= 0.0 && ratio <= 1.0))
        throw ContractError("tube_mask: ratio " + std::to_string(ratio) + " outside [0,1]");
    mask_application_count()++;
    int clip_tokens = -1;
    for (const Segment& s : seq.layout.segments) {
        if (s.is_search()) continue;
        if (clip_tokens < 0)
            clip_tokens = s.count;
        else if (s.count != clip_tokens)
            throw ContractError("tube_mask: clip segments disagree on token count (" + std::to_string(clip_tokens) +
                                " vs " + std::to_string(s.count) + ")");
    }
    TokenSequence out = seq;
    const int holes = static_cast<int>(ratio * clip_tokens);
    if (holes == 0) return out;
    std::vector<double> keep(seq.layout.total, 1.0);
    for (Modality m : {Modality::RGB, Modality::X}) {
        const auto positions = rng.sample_without_replacement(clip_tokens, holes);
        for (const Segment& s : seq.layout.segments) {
            if (s.is_search() || s.modality != m) continue;
            for (int p : positions) keep[static_cast<size_t>(s.start) + p] = 0.0;
        }
    }
    out.tokens = scale_rows(out.tokens, keep);
    return out;
}

inline nlohmann::json mask_decision_to_json(const MaskDecision& d, uint64_t seed) {
    nlohmann::json j;
    j["seed"] = seed;
    j["search"] = {d.search.keep_x, d.search.keep_rgb};
    j["applied"] = d.clip_masking_applied;
    j["clips"] = nlohmann::json::array();
    for (const auto& c : d.clips) j["clips"].push_back({c.keep_x, c.keep_rgb});
    return j;
}

inline MaskDecision mask_decision_from_json(const nlohmann::json& j) {
    MaskDecision d;
    d.search.keep_x = j.at("search").at(0).get<int>();
    d.search.keep_rgb = j.at("search").at(1).get<int>();
    d.clip_masking_applied = j.at("applied").get<bool>();
    for (const auto& c : j.at("clips")) d.clips.push_back(MaskPattern{c.at(0).get<int>(), c.at(1).get<int>()});
    if (d.clip_masking_applied != !d.clips.empty())
        throw IoError("mask decision JSON: applied flag disagrees with clips list");
    return d;
}

}  // namespace moetrack
