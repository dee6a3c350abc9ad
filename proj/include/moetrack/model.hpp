#pragma once

#include <functional>
#include <vector>

#include "moetrack/encoder.hpp"
#include "moetrack/heads.hpp"
#include "moetrack/hmoe.hpp"
#include "moetrack/masking.hpp"

namespace moetrack {

struct ModelConfig {
    EncoderConfig encoder;
    HmoeConfig hmoe;
    LossWeights loss;

    void validate() const {
        encoder.validate();
        hmoe.validate();
    }
};

// Full tracker: shared encoder over all segments, expert fusion, box heads.
// Parameter creation order is fixed so checkpoints are layout-compatible
// across runs with the same config.
struct TrackModel {
    ModelConfig cfg;
    ParamStore params;
    ExpertBank bank;

    TrackModel(ModelConfig c, uint64_t seed) : cfg(std::move(c)), bank(cfg.hmoe) {
        cfg.validate();
        RngStream root(seed);
        RngStream enc_rng = root.substream("init.encoder");
        init_encoder_params(params, cfg.encoder, enc_rng);
        RngStream hmoe_rng = root.substream("init.hmoe");
        init_hmoe_params(params, cfg.hmoe, cfg.encoder.channels, cfg.encoder.total_tokens(), hmoe_rng);
        RngStream heads_rng = root.substream("init.heads");
        init_heads_params(params, cfg.encoder.channels, heads_rng);
    }
};

struct ModelOutput {
    TokenSequence seq;  // post-mask tokens and availability
    FusionResult fusion;
    ScoreMap map;
};

// Rewrites the token sequence between the encoder and the fusion stage; all
// masking strategies plug in here, so the heads see the post-mask flags.
using TokenHook = std::function<TokenSequence(Tape&, TokenSequence)>;

inline ModelOutput model_forward(Tape& t, TrackModel& m, const std::vector<Frame>& frames,
                                 const std::vector<uint8_t>& availability, const TokenHook& hook = {}) {
    TokenSequence seq = encode(t, m.params, m.cfg.encoder, frames, availability);
    if (hook) seq = hook(t, std::move(seq));
    FusionResult fusion = hmoe_fuse_forward(t, seq, m.params, m.bank);
    ScoreMap map = heads_forward(t, m.params, fusion.out, seq.layout, seq.availability);
    return ModelOutput{std::move(seq), std::move(fusion), std::move(map)};
}

inline TokenHook mask_hook(MaskDecision decision) {
    return [d = std::move(decision)](Tape& t, TokenSequence seq) { return apply_mask(t, std::move(seq), d); };
}

// One training sample: frames in layout order, per-segment availability,
// optional token hook, ground truth in normalized search coordinates.
struct TrainingExample {
    std::vector<Frame> frames;
    std::vector<uint8_t> availability;
    TokenHook mask;
    BBox gt;
};

struct BatchResult {
    LossBreakdown loss;
    std::vector<ModelOutput> outputs;
};

// Task losses are batch means; balance and importance couple the whole batch
// through the shared gate, so everything lives on one tape.
inline BatchResult model_batch_loss(Tape& t, TrackModel& m, const std::vector<TrainingExample>& batch) {
    if (batch.empty()) throw ContractError("model_batch_loss: empty batch");
    BatchResult result;
    std::vector<GateResult> gatings;
    Var cls_sum, l1_sum, giou_sum;
    for (size_t i = 0; i < batch.size(); ++i) {
        const TrainingExample& ex = batch[i];
        ModelOutput out = model_forward(t, m, ex.frames, ex.availability, ex.mask);
        Var cls = cls_loss(t, out.map, ex.gt);
        Var box = box_at_cell(out.map, gt_cell(out.map.side, ex.gt));
        Var l1 = l1_loss(t, box, ex.gt);
        Var gi = giou_loss(t, box, ex.gt);
        if (i == 0) {
            cls_sum = cls;
            l1_sum = l1;
            giou_sum = gi;
        } else {
            cls_sum = add(cls_sum, cls);
            l1_sum = add(l1_sum, l1);
            giou_sum = add(giou_sum, gi);
        }
        gatings.push_back(out.fusion.gating);
        result.outputs.push_back(std::move(out));
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    result.loss = total_loss(t, mul_const(cls_sum, inv), mul_const(l1_sum, inv), mul_const(giou_sum, inv),
                             balance_loss(t, gatings), importance_loss(t, gatings), m.cfg.loss);
    return result;
}

}  // namespace moetrack
