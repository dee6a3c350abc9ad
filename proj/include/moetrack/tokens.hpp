#pragma once

#include <string>
#include <vector>

#include "moetrack/tensor.hpp"

namespace moetrack {

enum class Modality { RGB, X };

inline const char* modality_name(Modality m) { return m == Modality::RGB ? "rgb" : "x"; }

// One single-channel frame of one modality, pixel values in [0,1].
struct Frame {
    Modality modality = Modality::RGB;
    Tensor pixels;  // [H x W]
    int timestamp = 0;
};

inline Frame zero_frame(Modality m, int h, int w, int timestamp = 0) {
    return Frame{m, Tensor::zeros({h, w}), timestamp};
}

// Non-overlapping patches in row-major scan order, each flattened row-major.
// Output is [(H/p * W/p) x (p*p)].
inline Tensor patchify(const Frame& frame, int patch) {
    const Tensor& px = frame.pixels;
    if (px.ndim() != 2) throw ShapeError("patchify: expected a 2-D frame, got " + shape_str(px.shape()));
    const int h = px.rows(), w = px.cols();
    if (patch <= 0 || h % patch != 0 || w % patch != 0)
        throw ShapeError("patchify: frame " + shape_str(px.shape()) + " not divisible by patch " +
                         std::to_string(patch));
    for (size_t i = 0; i < px.numel(); ++i)
        if (!(px[i] >= 0.0 && px[i] <= 1.0))
            throw ContractError("patchify: pixel value " + std::to_string(px[i]) + " outside [0,1]");
    const int gh = h / patch, gw = w / patch;
    Tensor out({gh * gw, patch * patch});
    for (int by = 0; by < gh; ++by)
        for (int bx = 0; bx < gw; ++bx) {
            const int token = by * gw + bx;
            for (int py = 0; py < patch; ++py)
                for (int qx = 0; qx < patch; ++qx)
                    out.at(token, py * patch + qx) = px.at(by * patch + py, bx * patch + qx);
        }
    return out;
}

// clip_index is 1-based; -1 marks the search segment.
struct Segment {
    int id = 0;
    Modality modality = Modality::RGB;
    int clip_index = -1;
    int start = 0;
    int count = 0;

    bool is_search() const { return clip_index < 0; }
};

struct SegmentLayout {
    std::vector<Segment> segments;
    int total = 0;  // L

    int num_segments() const { return static_cast<int>(segments.size()); }

    const Segment& find(Modality m, int clip_index) const {
        for (const auto& s : segments)
            if (s.modality == m && s.clip_index == clip_index) return s;
        throw ContractError(std::string("layout has no segment (") + modality_name(m) + ", clip " +
                            std::to_string(clip_index) + ")");
    }
};

// Segment order: RGB-search, X-search, then RGB/X pairs for clips 1..N.
inline SegmentLayout assemble_layout(int n_clips, int search_tokens, int clip_tokens) {
    if (n_clips <= 0 || search_tokens <= 0 || clip_tokens <= 0)
        throw ConfigError("assemble_layout: n_clips, search_tokens and clip_tokens must all be positive");
    SegmentLayout layout;
    int cursor = 0, id = 0;
    auto push = [&](Modality m, int clip, int count) {
        layout.segments.push_back(Segment{id++, m, clip, cursor, count});
        cursor += count;
    };
    push(Modality::RGB, -1, search_tokens);
    push(Modality::X, -1, search_tokens);
    for (int c = 1; c <= n_clips; ++c) {
        push(Modality::RGB, c, clip_tokens);
        push(Modality::X, c, clip_tokens);
    }
    layout.total = cursor;
    return layout;
}

}  // namespace moetrack
