#include <gtest/gtest.h>

#include "moetrack/masking.hpp"
#include "oracles.hpp"

using namespace moetrack;

namespace {

// L = 2*2 + 2*3*1 = 10 tokens, C = 4
TokenSequence make_seq(Tape& t, RngStream& s) {
    SegmentLayout layout = assemble_layout(3, 2, 1);
    return TokenSequence{t.leaf(Tensor::randn({layout.total, 4}, s)), layout,
                         std::vector<uint8_t>(layout.segments.size(), 1)};
}

int rows_zeroed(const Tensor& tokens, const Segment& seg) {
    int zeroed = 0;
    for (int r = 0; r < seg.count; ++r) {
        bool all_zero = true;
        for (int c = 0; c < tokens.cols(); ++c) all_zero = all_zero && tokens.at(seg.start + r, c) == 0.0;
        zeroed += all_zero ? 1 : 0;
    }
    return zeroed;
}

}  // namespace

TEST(MaskSampling, SearchPatternFrequencies) {
    RngStream s(1001);
    const int n = 50000;
    int keep_both = 0, keep_x_only = 0, keep_rgb_only = 0;
    for (int i = 0; i < n; ++i) {
        MaskDecision d = sample_mask_decision(s, 3, 0.5);
        if (d.search == MaskPattern{1, 1})
            keep_both++;
        else if (d.search == MaskPattern{1, 0})
            keep_x_only++;
        else if (d.search == MaskPattern{0, 1})
            keep_rgb_only++;
        else
            FAIL() << "search pattern outside the multiset";
    }
    EXPECT_NEAR(keep_both / double(n), 0.6, 0.01);
    EXPECT_NEAR(keep_x_only / double(n), 0.2, 0.01);
    EXPECT_NEAR(keep_rgb_only / double(n), 0.2, 0.01);
}

TEST(MaskSampling, ClipPatternFrequenciesAtAlphaOne) {
    RngStream s(1002);
    const int n = 30000;
    int counts[3] = {0, 0, 0};
    for (int i = 0; i < n; ++i) {
        MaskDecision d = sample_mask_decision(s, 3, 1.0);
        ASSERT_TRUE(d.clip_masking_applied);
        ASSERT_EQ(d.clips.size(), 3u);
        for (const auto& c : d.clips) {
            if (c == MaskPattern{1, 1})
                counts[0]++;
            else if (c == MaskPattern{1, 0})
                counts[1]++;
            else if (c == MaskPattern{0, 1})
                counts[2]++;
            else
                FAIL() << "clip pattern outside the set";
        }
    }
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(counts[k] / double(3 * n), 1.0 / 3.0, 0.01);
}

TEST(MaskSampling, AlphaZeroNeverMasksClips) {
    RngStream s(1003);
    for (int i = 0; i < 2000; ++i) {
        MaskDecision d = sample_mask_decision(s, 3, 0.0);
        EXPECT_FALSE(d.clip_masking_applied);
        EXPECT_TRUE(d.clips.empty());
    }
}

TEST(MaskSampling, AlphaFrequencyMatchesThreshold) {
    RngStream s(1004);
    int applied = 0;
    const int n = 50000;
    for (int i = 0; i < n; ++i) applied += sample_mask_decision(s, 3, 0.3).clip_masking_applied ? 1 : 0;
    EXPECT_NEAR(applied / double(n), 0.3, 0.01);
}

TEST(MaskSampling, CoverageNeverDropsBothModalities) {
    RngStream s(1005);
    for (int i = 0; i < 100000; ++i) {
        MaskDecision d = sample_mask_decision(s, 3, 0.7);
        ASSERT_TRUE(d.search.keep_x || d.search.keep_rgb);
        for (const auto& c : d.clips) ASSERT_TRUE(c.keep_x || c.keep_rgb);
    }
}

TEST(MaskSampling, DeterministicGivenSeed) {
    RngStream a(7), b(7);
    for (int i = 0; i < 200; ++i) {
        MaskDecision da = sample_mask_decision(a, 3, 0.5);
        MaskDecision db = sample_mask_decision(b, 3, 0.5);
        EXPECT_EQ(da.search, db.search);
        EXPECT_EQ(da.clip_masking_applied, db.clip_masking_applied);
        EXPECT_EQ(da.clips, db.clips);
    }
}

TEST(MaskSampling, SearchDrawUnaffectedByClipDraws) {
    // Same parent seed, different alpha: clip draws happen in one case only,
    // yet the search pattern sequence must be identical.
    RngStream a(99), b(99);
    for (int i = 0; i < 500; ++i) {
        MaskDecision da = sample_mask_decision(a, 3, 0.0);
        MaskDecision db = sample_mask_decision(b, 3, 1.0);
        ASSERT_EQ(da.search, db.search);
    }
}

TEST(MaskSampling, RejectsBadArguments) {
    RngStream s(1);
    EXPECT_THROW(sample_mask_decision(s, 0, 0.5), ContractError);
    EXPECT_THROW(sample_mask_decision(s, 3, -0.1), ContractError);
    EXPECT_THROW(sample_mask_decision(s, 3, 1.1), ContractError);
}

TEST(ApplyMask, AllKeepIsBitIdentical) {
    RngStream s(2001);
    Tape t(false);
    TokenSequence seq = make_seq(t, s);
    TokenSequence out = apply_mask(t, seq, MaskDecision::all_keep());
    const Tensor& a = t.value(seq.tokens);
    const Tensor& b = t.value(out.tokens);
    for (size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
    EXPECT_EQ(out.availability, seq.availability);
}

TEST(ApplyMask, SearchKeepXDropsRgbSearchOnly) {
    RngStream s(2002);
    Tape t(false);
    TokenSequence seq = make_seq(t, s);
    MaskDecision d;
    d.search = MaskPattern{1, 0};  // index 0 keeps X, index 1 drops RGB
    TokenSequence out = apply_mask(t, seq, d);
    const Tensor& y = t.value(out.tokens);
    const Tensor& x0 = t.value(seq.tokens);
    const Segment& rgb_s = out.layout.find(Modality::RGB, -1);
    const Segment& x_s = out.layout.find(Modality::X, -1);
    EXPECT_EQ(rows_zeroed(y, rgb_s), rgb_s.count);
    for (int r = 0; r < x_s.count; ++r)
        for (int c = 0; c < y.cols(); ++c) EXPECT_EQ(y.at(x_s.start + r, c), x0.at(x_s.start + r, c));
    EXPECT_EQ(out.availability[rgb_s.id], 0);
    EXPECT_EQ(out.availability[x_s.id], 1);
    EXPECT_DOUBLE_EQ(out.missing_rate(), 1.0 / 8.0);
}

TEST(ApplyMask, ClipPatternsZeroTheRightSegments) {
    RngStream s(2003);
    Tape t(false);
    TokenSequence seq = make_seq(t, s);
    MaskDecision d;
    d.clip_masking_applied = true;
    d.clips = {MaskPattern{1, 0}, MaskPattern{0, 1}, MaskPattern{1, 1}};
    TokenSequence out = apply_mask(t, seq, d);
    const Tensor& y = t.value(out.tokens);
    EXPECT_EQ(rows_zeroed(y, out.layout.find(Modality::RGB, 1)), 1);  // clip1 RGB dropped
    EXPECT_EQ(rows_zeroed(y, out.layout.find(Modality::X, 1)), 0);
    EXPECT_EQ(rows_zeroed(y, out.layout.find(Modality::X, 2)), 1);  // clip2 X dropped
    EXPECT_EQ(rows_zeroed(y, out.layout.find(Modality::RGB, 2)), 0);
    EXPECT_EQ(rows_zeroed(y, out.layout.find(Modality::RGB, 3)), 0);
    EXPECT_EQ(rows_zeroed(y, out.layout.find(Modality::X, 3)), 0);
    EXPECT_EQ(out.availability[out.layout.find(Modality::RGB, 1).id], 0);
    EXPECT_EQ(out.availability[out.layout.find(Modality::X, 2).id], 0);
}

TEST(ApplyMask, DoubleApplicationIsIdempotent) {
    RngStream s(2004);
    Tape t(false);
    TokenSequence seq = make_seq(t, s);
    MaskDecision d;
    d.search = MaskPattern{0, 1};
    d.clip_masking_applied = true;
    d.clips = {MaskPattern{1, 0}, MaskPattern{1, 1}, MaskPattern{0, 1}};
    TokenSequence once = apply_mask(t, seq, d);
    TokenSequence twice = apply_mask(t, once, d);
    const Tensor& a = t.value(once.tokens);
    const Tensor& b = t.value(twice.tokens);
    for (size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
    EXPECT_EQ(once.availability, twice.availability);
}

TEST(ApplyMask, ClipCountMismatchRejected) {
    RngStream s(2005);
    Tape t(false);
    TokenSequence seq = make_seq(t, s);
    MaskDecision d;
    d.clip_masking_applied = true;
    d.clips = {MaskPattern{1, 0}};  // layout has 3 clips
    EXPECT_THROW(apply_mask(t, seq, d), ContractError);
}

TEST(RandomTokenMask, RatioZeroIsIdentity) {
    RngStream s(3001), r(1);
    Tape t(false);
    TokenSequence seq = make_seq(t, s);
    TokenSequence out = random_token_mask(t, seq, 0.0, r);
    const Tensor& a = t.value(seq.tokens);
    const Tensor& b = t.value(out.tokens);
    for (size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(RandomTokenMask, RatioOneZeroesEverything) {
    RngStream s(3002), r(2);
    Tape t(false);
    TokenSequence out = random_token_mask(t, make_seq(t, s), 1.0, r);
    const Tensor& y = t.value(out.tokens);
    for (size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], 0.0);
    for (uint8_t a : out.availability) EXPECT_EQ(a, 1);  // flags untouched
}

TEST(RandomTokenMask, HalfRatioCountWithinBinomialBounds) {
    // L=224, p=0.5: mean 112, sd ~7.48; |count-112| <= 3.3 sd covers 99.9%
    SegmentLayout layout = assemble_layout(3, 64, 16);
    for (uint64_t seed = 0; seed < 20; ++seed) {
        RngStream s(4000 + seed), r(5000 + seed);
        Tape t(false);
        TokenSequence seq{t.leaf(Tensor::randn({layout.total, 2}, s)), layout, std::vector<uint8_t>(8, 1)};
        TokenSequence out = random_token_mask(t, seq, 0.5, r);
        const Tensor& y = t.value(out.tokens);
        int zeroed = 0;
        for (int row = 0; row < y.rows(); ++row) {
            bool z = true;
            for (int c = 0; c < y.cols(); ++c) z = z && y.at(row, c) == 0.0;
            zeroed += z ? 1 : 0;
        }
        EXPECT_GE(zeroed, 112 - 25) << "seed " << seed;
        EXPECT_LE(zeroed, 112 + 25) << "seed " << seed;
    }
}

TEST(TubeMask, RatioZeroIsIdentity) {
    RngStream s(5001), r(1);
    Tape t(false);
    TokenSequence seq = make_seq(t, s);
    TokenSequence out = tube_mask(t, seq, 0.0, r);
    const Tensor& a = t.value(seq.tokens);
    const Tensor& b = t.value(out.tokens);
    for (size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(TubeMask, HolesPersistAcrossClipsAndCountIsExact) {
    SegmentLayout layout = assemble_layout(3, 4, 16);
    RngStream s(5002), r(77);
    Tape t(false);
    TokenSequence seq{t.leaf(Tensor::randn({layout.total, 3}, s)), layout, std::vector<uint8_t>(8, 1)};
    TokenSequence out = tube_mask(t, seq, 0.25, r);
    const Tensor& y = t.value(out.tokens);
    for (Modality m : {Modality::RGB, Modality::X}) {
        std::vector<int> holes1;
        for (int clip = 1; clip <= 3; ++clip) {
            const Segment& seg = out.layout.find(m, clip);
            std::vector<int> holes;
            for (int p = 0; p < seg.count; ++p) {
                bool z = true;
                for (int c = 0; c < y.cols(); ++c) z = z && y.at(seg.start + p, c) == 0.0;
                if (z) holes.push_back(p);
            }
            EXPECT_EQ(holes.size(), 4u) << modality_name(m) << " clip " << clip;  // floor(0.25*16)
            if (clip == 1)
                holes1 = holes;
            else
                EXPECT_EQ(holes, holes1) << "holes moved between clips";
        }
        const Segment& search = out.layout.find(m, -1);
        EXPECT_EQ(rows_zeroed(y, search), 0);
    }
    for (uint8_t a : out.availability) EXPECT_EQ(a, 1);
}

TEST(InferencePurity, MaskingCallsInsideInferenceScopeThrow) {
    RngStream s(6001), r(1);
    Tape t(false);
    TokenSequence seq = make_seq(t, s);
    {
        InferenceScope guard;
        EXPECT_TRUE(InferenceScope::active());
        EXPECT_THROW(sample_mask_decision(r, 3, 0.5), ContractError);
        EXPECT_THROW(apply_mask(t, seq, MaskDecision::all_keep()), ContractError);
        EXPECT_THROW(random_token_mask(t, seq, 0.5, r), ContractError);
        EXPECT_THROW(tube_mask(t, seq, 0.5, r), ContractError);
        {
            InferenceScope nested;
            EXPECT_THROW(sample_mask_decision(r, 3, 0.5), ContractError);
        }
        EXPECT_TRUE(InferenceScope::active());
    }
    EXPECT_FALSE(InferenceScope::active());
    EXPECT_NO_THROW(sample_mask_decision(r, 3, 0.5));
}

TEST(MaskAudit, JsonRoundTrip) {
    MaskDecision d;
    d.search = MaskPattern{0, 1};
    d.clip_masking_applied = true;
    d.clips = {MaskPattern{1, 1}, MaskPattern{1, 0}};
    nlohmann::json j = mask_decision_to_json(d, 1234);
    EXPECT_EQ(j["seed"], 1234);
    EXPECT_EQ(j["search"][0], 0);
    EXPECT_EQ(j["search"][1], 1);
    MaskDecision back = mask_decision_from_json(j);
    EXPECT_EQ(back.search, d.search);
    EXPECT_EQ(back.clip_masking_applied, d.clip_masking_applied);
    EXPECT_EQ(back.clips, d.clips);

    nlohmann::json inconsistent = j;
    inconsistent["clips"] = nlohmann::json::array();
    EXPECT_THROW(mask_decision_from_json(inconsistent), IoError);
}

TEST(MaskAudit, ApplicationCounterAdvances) {
    RngStream s(7001), r(3);
    Tape t(false);
    TokenSequence seq = make_seq(t, s);
    const int64_t before = mask_application_count();
    apply_mask(t, seq, MaskDecision::all_keep());
    random_token_mask(t, seq, 0.1, r);
    tube_mask(t, seq, 0.1, r);
    EXPECT_EQ(mask_application_count(), before + 3);
}
