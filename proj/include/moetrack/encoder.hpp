#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "moetrack/autodiff.hpp"
#include "moetrack/optim.hpp"
#include "moetrack/rng.hpp"
#include "moetrack/tokens.hpp"

namespace moetrack {

struct EncoderConfig {
    int patch = 8;
    int channels = 64;  // C, token embedding width
    int n_heads = 4;
    int n_blocks = 4;
    int mlp_ratio = 4;
    int search_size = 64;
    int clip_size = 32;
    int n_clips = 3;

    int patch_dim() const { return patch * patch; }
    int search_tokens() const { return (search_size / patch) * (search_size / patch); }
    int clip_tokens() const { return (clip_size / patch) * (clip_size / patch); }
    int total_tokens() const { return 2 * search_tokens() + 2 * n_clips * clip_tokens(); }

    SegmentLayout layout() const { return assemble_layout(n_clips, search_tokens(), clip_tokens()); }

    void validate() const {
        if (patch <= 0 || channels <= 0 || n_heads <= 0 || n_blocks <= 0 || mlp_ratio <= 0 || n_clips <= 0)
            throw ConfigError("encoder config: all sizes must be positive");
        if (search_size % patch != 0 || clip_size % patch != 0)
            throw ConfigError("encoder config: frame sizes must be divisible by the patch size");
        if (channels % n_heads != 0) throw ConfigError("encoder config: channels must be divisible by n_heads");
    }
};

// The encoded sequence plus the metadata masking and routing operate on.
// Rows of unavailable segments are exact zeros.
struct TokenSequence {
    Var tokens;  // [L x C]
    SegmentLayout layout;
    std::vector<uint8_t> availability;  // per segment, layout order

    double missing_rate() const {
        if (availability.empty()) return 0.0;
        int off = 0;
        for (uint8_t a : availability) off += a ? 0 : 1;
        return static_cast<double>(off) / static_cast<double>(availability.size());
    }
};

inline Var linear(Tape& t, Var x, Parameter& w, Parameter& b) {
    return add_rowvec(matmul(x, use(t, w)), use(t, b));
}

namespace detail {

inline Tensor fan_in_normal(std::vector<int> shape, RngStream& rng) {
    return Tensor::randn(shape, rng, 1.0 / std::sqrt(static_cast<double>(shape[0])));
}

inline void init_linear(ParamStore& ps, const std::string& name, int in, int out, RngStream& rng) {
    ps.create(name + ".w", fan_in_normal({in, out}, rng));
    ps.create(name + ".b", Tensor::zeros({1, out}));
}

inline void init_layer_norm(ParamStore& ps, const std::string& name, int dim) {
    ps.create(name + ".g", Tensor::ones({1, dim}));
    ps.create(name + ".b", Tensor::zeros({1, dim}));
}

}  // namespace detail

inline void init_encoder_params(ParamStore& ps, const EncoderConfig& cfg, RngStream& rng) {
    cfg.validate();
    const int c = cfg.channels;
    detail::init_linear(ps, "enc.embed", cfg.patch_dim(), c, rng);
    ps.create("enc.pos", Tensor::randn({cfg.total_tokens(), c}, rng, 0.02));
    for (int e = 0; e < cfg.n_blocks; ++e) {
        const std::string blk = "enc.blk" + std::to_string(e);
        detail::init_layer_norm(ps, blk + ".ln1", c);
        detail::init_linear(ps, blk + ".attn.q", c, c, rng);
        detail::init_linear(ps, blk + ".attn.k", c, c, rng);
        detail::init_linear(ps, blk + ".attn.v", c, c, rng);
        detail::init_linear(ps, blk + ".attn.o", c, c, rng);
        detail::init_layer_norm(ps, blk + ".ln2", c);
        detail::init_linear(ps, blk + ".mlp.fc1", c, c * cfg.mlp_ratio, rng);
        detail::init_linear(ps, blk + ".mlp.fc2", c * cfg.mlp_ratio, c, rng);
    }
    detail::init_layer_norm(ps, "enc.final", c);
}

inline Var multi_head_attention(Tape& t, Var x, ParamStore& ps, const std::string& prefix, int n_heads) {
    const int c = t.value(x).cols();
    const int dh = c / n_heads;
    Var q = linear(t, x, ps.get(prefix + ".q.w"), ps.get(prefix + ".q.b"));
    Var k = linear(t, x, ps.get(prefix + ".k.w"), ps.get(prefix + ".k.b"));
    Var v = linear(t, x, ps.get(prefix + ".v.w"), ps.get(prefix + ".v.b"));
    Var merged;
    for (int h = 0; h < n_heads; ++h) {
        Var qh = slice_cols(q, h * dh, dh);
        Var kh = slice_cols(k, h * dh, dh);
        Var vh = slice_cols(v, h * dh, dh);
        Var scores = mul_const(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
        Var oh = matmul(row_softmax(scores), vh);
        merged = h == 0 ? oh : concat_cols(merged, oh);
    }
    return linear(t, merged, ps.get(prefix + ".o.w"), ps.get(prefix + ".o.b"));
}

inline Var encoder_block(Tape& t, Var x, ParamStore& ps, const std::string& blk, int n_heads) {
    Var h = layer_norm(x, use(t, ps.get(blk + ".ln1.g")), use(t, ps.get(blk + ".ln1.b")));
    x = add(x, multi_head_attention(t, h, ps, blk + ".attn", n_heads));
    Var m = layer_norm(x, use(t, ps.get(blk + ".ln2.g")), use(t, ps.get(blk + ".ln2.b")));
    m = linear(t, m, ps.get(blk + ".mlp.fc1.w"), ps.get(blk + ".mlp.fc1.b"));
    m = linear(t, gelu(m), ps.get(blk + ".mlp.fc2.w"), ps.get(blk + ".mlp.fc2.b"));
    return add(x, m);
}

// Frames arrive in layout order, one per segment. Unavailable segments enter
// the encoder as zero tokens and their rows are re-zeroed after the blocks,
// so nothing of their content survives attention mixing.
inline TokenSequence encode(Tape& t, ParamStore& ps, const EncoderConfig& cfg, const std::vector<Frame>& frames,
                            const std::vector<uint8_t>& availability) {
    cfg.validate();
    SegmentLayout layout = cfg.layout();
    const size_t n_seg = layout.segments.size();
    if (frames.size() != n_seg)
        throw ContractError("encode: expected " + std::to_string(n_seg) + " frames, got " +
                            std::to_string(frames.size()));
    if (availability.size() != n_seg)
        throw ContractError("encode: expected " + std::to_string(n_seg) + " availability flags, got " +
                            std::to_string(availability.size()));

    Tensor x0({layout.total, cfg.patch_dim()});
    for (size_t i = 0; i < n_seg; ++i) {
        const Segment& seg = layout.segments[i];
        if (frames[i].modality != seg.modality)
            throw ContractError("encode: frame " + std::to_string(i) + " is " + modality_name(frames[i].modality) +
                                ", layout wants " + modality_name(seg.modality));
        if (!availability[i]) continue;  // rows stay zero
        Tensor tok = patchify(frames[i], cfg.patch);
        if (tok.rows() != seg.count)
            throw ContractError("encode: segment " + std::to_string(i) + " yields " + std::to_string(tok.rows()) +
                                " tokens, layout wants " + std::to_string(seg.count));
        std::copy(tok.data().begin(), tok.data().end(),
                  x0.data().begin() + static_cast<size_t>(seg.start) * cfg.patch_dim());
    }

    Var x = linear(t, t.leaf(std::move(x0)), ps.get("enc.embed.w"), ps.get("enc.embed.b"));
    x = add(x, use(t, ps.get("enc.pos")));
    for (int e = 0; e < cfg.n_blocks; ++e) x = encoder_block(t, x, ps, "enc.blk" + std::to_string(e), cfg.n_heads);
    x = layer_norm(x, use(t, ps.get("enc.final.g")), use(t, ps.get("enc.final.b")));

    std::vector<double> keep(layout.total, 1.0);
    bool any_missing = false;
    for (size_t i = 0; i < n_seg; ++i) {
        if (availability[i]) continue;
        any_missing = true;
        const Segment& seg = layout.segments[i];
        for (int r = 0; r < seg.count; ++r) keep[static_cast<size_t>(seg.start) + r] = 0.0;
    }
    if (any_missing) x = scale_rows(x, keep);

    return TokenSequence{x, std::move(layout), availability};
}

}  // namespace moetrack
