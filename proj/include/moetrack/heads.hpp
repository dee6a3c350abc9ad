#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "moetrack/hmoe.hpp"

namespace moetrack {

// Normalized center/size box relative to the search region.
struct BBox {
    double cx = 0, cy = 0, w = 0, h = 0;
};

inline void validate_gt_box(const BBox& b) {
    if (!(b.w >= 0.0 && b.h >= 0.0)) throw ContractError("box has negative extent");
    const double x1 = std::max(0.0, b.cx - b.w / 2), x2 = std::min(1.0, b.cx + b.w / 2);
    const double y1 = std::max(0.0, b.cy - b.h / 2), y2 = std::min(1.0, b.cy + b.h / 2);
    if (!(x2 > x1 && y2 > y1)) throw ContractError("ground-truth box degenerate within [0,1]^2");
}

struct GiouResult {
    double value = 0;
    bool degenerate = false;  // both boxes zero-area; value is -1 by convention
};

inline GiouResult giou(const BBox& a, const BBox& b) {
    if (!(a.w >= 0 && a.h >= 0 && b.w >= 0 && b.h >= 0)) throw ContractError("giou: negative box extent");
    const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2, ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
    const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2, by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
    const double area_a = a.w * a.h, area_b = b.w * b.h;
    if (area_a == 0.0 && area_b == 0.0) return {-1.0, true};
    const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    const double inter = iw * ih;
    const double uni = area_a + area_b - inter;
    const double cw = std::max(ax2, bx2) - std::min(ax1, bx1);
    const double ch = std::max(ay2, by2) - std::min(ay1, by1);
    const double c_area = cw * ch;
    const double iou = inter / uni;
    return {iou - (c_area - uni) / c_area, false};
}

inline double iou(const BBox& a, const BBox& b) {
    const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2, ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
    const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2, by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
    const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    const double inter = iw * ih;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

// Spatial maps over the S x S search grid, stored as S^2-row matrices in
// row-major cell order. Offsets and sizes are sigmoid-squashed into (0,1).
struct ScoreMap {
    int side = 0;  // S
    Var logits;    // [S^2 x 1]
    Var offset;    // [S^2 x 2], channel 0 = x, channel 1 = y
    Var size;      // [S^2 x 2], channel 0 = w, channel 1 = h
};

inline void init_heads_params(ParamStore& ps, int channels, RngStream& rng) {
    detail::init_linear(ps, "heads.cls", channels, 1, rng);
    detail::init_linear(ps, "heads.offset", channels, 2, rng);
    detail::init_linear(ps, "heads.size", channels, 2, rng);
}

// Averages the two search segments where both modalities survive, otherwise
// uses the surviving one. The benchmark never produces both-missing.
inline ScoreMap heads_forward(Tape& t, ParamStore& ps, Var fused, const SegmentLayout& layout,
                              const std::vector<uint8_t>& availability) {
    const Segment& rgb = layout.find(Modality::RGB, -1);
    const Segment& x = layout.find(Modality::X, -1);
    const bool rgb_ok = availability[rgb.id], x_ok = availability[x.id];
    if (!rgb_ok && !x_ok) throw ContractError("heads_forward: both search segments unavailable");
    if (rgb.count != x.count) throw ContractError("heads_forward: search segments differ in size");
    const int s2 = rgb.count;
    const int side = static_cast<int>(std::lround(std::sqrt(double(s2))));
    if (side * side != s2) throw ContractError("heads_forward: search token count is not a square");

    Var pooled;
    if (rgb_ok && x_ok)
        pooled = mul_const(add(slice_rows(fused, rgb.start, s2), slice_rows(fused, x.start, s2)), 0.5);
    else
        pooled = slice_rows(fused, rgb_ok ? rgb.start : x.start, s2);

    ScoreMap map;
    map.side = side;
    map.logits = linear(t, pooled, ps.get("heads.cls.w"), ps.get("heads.cls.b"));
    map.offset = sigmoid(linear(t, pooled, ps.get("heads.offset.w"), ps.get("heads.offset.b")));
    map.size = sigmoid(linear(t, pooled, ps.get("heads.size.w"), ps.get("heads.size.b")));
    return map;
}

inline int peak_cell(const Tensor& logits) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(logits.numel()); ++i)
        if (logits[i] > logits[best]) best = i;
    return best;
}

// Peak cell by argmax (ties toward the lower row-major index), center from
// cell + fractional offset, extent read at the peak.
inline BBox decode_box(const Tape& t, const ScoreMap& map) {
    const Tensor& logits = t.value(map.logits);
    logits.check_finite("decode_box logits");
    const int cell = peak_cell(logits);
    const int s = map.side;
    const int row = cell / s, col = cell % s;
    const Tensor& off = t.value(map.offset);
    const Tensor& size = t.value(map.size);
    BBox b;
    b.cx = (col + off.at(cell, 0)) / s;
    b.cy = (row + off.at(cell, 1)) / s;
    b.w = size.at(cell, 0);
    b.h = size.at(cell, 1);
    return b;
}

// Gaussian splat target, sigma = one cell, exact 1 at the ground-truth cell.
inline Tensor make_cls_target(int side, const BBox& gt) {
    validate_gt_box(gt);
    const int pc = std::min(side - 1, std::max(0, static_cast<int>(gt.cx * side)));
    const int pr = std::min(side - 1, std::max(0, static_cast<int>(gt.cy * side)));
    Tensor target({side * side, 1});
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
            const double d2 = double(r - pr) * (r - pr) + double(c - pc) * (c - pc);
            target[r * side + c] = std::exp(-d2 / 2.0);
        }
    return target;
}

// Penalty-reduced focal loss (alpha=2, beta=4) against the Gaussian target.
// Written in softplus form so no log ever sees a saturated sigmoid.
inline Var focal_cls_loss(Tape& t, Var logits, const Tensor& target) {
    if (t.value(logits).shape() != target.shape())
        throw ShapeError("focal_cls_loss: logits " + shape_str(t.value(logits).shape()) + " vs target " +
                         shape_str(target.shape()));
    Tensor pos_mask(target.shape());
    Tensor neg_weight(target.shape());
    for (size_t i = 0; i < target.numel(); ++i) {
        if (target[i] == 1.0) {
            pos_mask[i] = 1.0;
        } else {
            const double d = 1.0 - target[i];
            neg_weight[i] = d * d * d * d;
        }
    }
    Var neg_logits = mul_const(logits, -1.0);
    // -log p = softplus(-x), (1-p) = sigmoid(-x); mirrored for the negatives
    Var pos_term = mul(mul(pow_const(sigmoid(neg_logits), 2.0), softplus(neg_logits)), t.leaf(pos_mask));
    Var neg_term = mul(mul(pow_const(sigmoid(logits), 2.0), softplus(logits)), t.leaf(neg_weight));
    return sum(add(pos_term, neg_term));  // one object, so the 1/N factor is 1
}

inline Var cls_loss(Tape& t, const ScoreMap& map, const BBox& gt) {
    return focal_cls_loss(t, map.logits, make_cls_target(map.side, gt));
}

// Ground-truth cell index for reading box regressors during training.
inline int gt_cell(int side, const BBox& gt) {
    const int pc = std::min(side - 1, std::max(0, static_cast<int>(gt.cx * side)));
    const int pr = std::min(side - 1, std::max(0, static_cast<int>(gt.cy * side)));
    return pr * side + pc;
}

// Differentiable [1x4] (cx, cy, w, h) read out at one cell.
inline Var box_at_cell(const ScoreMap& map, int cell) {
    const int s = map.side;
    const int row = cell / s, col = cell % s;
    Var off = slice_rows(map.offset, cell, 1);
    Var size = slice_rows(map.size, cell, 1);
    Var cx = add_const(mul_const(slice_cols(off, 0, 1), 1.0 / s), double(col) / s);
    Var cy = add_const(mul_const(slice_cols(off, 1, 1), 1.0 / s), double(row) / s);
    return concat_cols(concat_cols(cx, cy), size);
}

// Mean absolute error over the four box coordinates.
inline Var l1_loss(Tape& t, Var pred_box, const BBox& gt) {
    Tensor g({1, 4}, {gt.cx, gt.cy, gt.w, gt.h});
    return mean(abs(sub(pred_box, t.leaf(g))));
}

// 1 - GIoU, built from tape ops so box gradients flow.
inline Var giou_loss(Tape& t, Var pred_box, const BBox& gt) {
    auto c = [&](double v) { return t.leaf(Tensor::scalar(v)); };
    Var half_w = mul_const(slice_cols(pred_box, 2, 1), 0.5);
    Var half_h = mul_const(slice_cols(pred_box, 3, 1), 0.5);
    Var ax1 = sub(slice_cols(pred_box, 0, 1), half_w);
    Var ax2 = add(slice_cols(pred_box, 0, 1), half_w);
    Var ay1 = sub(slice_cols(pred_box, 1, 1), half_h);
    Var ay2 = add(slice_cols(pred_box, 1, 1), half_h);
    Var bx1 = c(gt.cx - gt.w / 2), bx2 = c(gt.cx + gt.w / 2);
    Var by1 = c(gt.cy - gt.h / 2), by2 = c(gt.cy + gt.h / 2);

    Var iw = maximum(c(0.0), sub(minimum(ax2, bx2), maximum(ax1, bx1)));
    Var ih = maximum(c(0.0), sub(minimum(ay2, by2), maximum(ay1, by1)));
    Var inter = mul(iw, ih);
    Var area_a = mul(slice_cols(pred_box, 2, 1), slice_cols(pred_box, 3, 1));
    Var uni = maximum(sub(add_const(area_a, gt.w * gt.h), inter), c(1e-12));
    Var cw = sub(maximum(ax2, bx2), minimum(ax1, bx1));
    Var ch = sub(maximum(ay2, by2), minimum(ay1, by1));
    Var c_area = maximum(mul(cw, ch), c(1e-12));
    Var g = sub(div(inter, uni), div(sub(c_area, uni), c_area));
    return sub(c(1.0), g);
}

// importance_n = sum over the batch of the full softmax probabilities;
// loss is the squared coefficient of variation (population variance).
inline Var importance_loss(Tape& t, const std::vector<GateResult>& batch) {
    if (batch.empty()) throw ContractError("importance_loss: empty batch");
    Var imp = batch[0].probs;
    for (size_t i = 1; i < batch.size(); ++i) imp = add(imp, batch[i].probs);
    Var mu = mean(imp);
    Var d = sub(imp, mu);
    return div(mean(mul(d, d)), mul(mu, mu));
}

// f_n = fraction of (batch item, slot) selections landing on expert n (hard
// counts); P_n = mean probability; loss = M * sum f_n P_n.
inline Var balance_loss(Tape& t, const std::vector<GateResult>& batch) {
    if (batch.empty()) throw ContractError("balance_loss: empty batch");
    const int m = t.value(batch[0].probs).cols();
    Tensor f = Tensor::zeros({1, m});
    int slots = 0;
    for (const auto& g : batch)
        for (int n : g.selected) {
            f[n] += 1.0;
            slots++;
        }
    for (int n = 0; n < m; ++n) f[n] /= slots;
    Var p_mean = batch[0].probs;
    for (size_t i = 1; i < batch.size(); ++i) p_mean = add(p_mean, batch[i].probs);
    p_mean = mul_const(p_mean, 1.0 / static_cast<double>(batch.size()));
    return mul_const(sum(mul(p_mean, t.leaf(f))), static_cast<double>(m));
}

struct LossWeights {
    double aux = 1.0;   // lambda1
    double cls = 5.0;   // lambda2
    double l1 = 2.0;    // lambda3
    double giou = 1.0;  // lambda4
};

struct LossBreakdown {
    Var cls, l1, giou, balance, importance, aux, total;
};

inline LossBreakdown total_loss(Tape& t, Var cls, Var l1, Var giou, Var balance, Var importance,
                                const LossWeights& w = {}) {
    for (Var v : {cls, l1, giou, balance, importance})
        if (!t.value(v).is_scalar())
            throw ContractError("total_loss: all parts must be scalar, got " + shape_str(t.value(v).shape()));
    LossBreakdown out;
    out.cls = cls;
    out.l1 = l1;
    out.giou = giou;
    out.balance = balance;
    out.importance = importance;
    out.aux = add(balance, importance);
    out.total = add(add(mul_const(out.aux, w.aux), mul_const(cls, w.cls)),
                    add(mul_const(l1, w.l1), mul_const(giou, w.giou)));
    return out;
}

}  // namespace moetrack
