#include <filesystem>
#include <gtest/gtest.h>

#include "moetrack/checkpoint.hpp"
#include "moetrack/optim.hpp"
#include "moetrack/rng.hpp"

using namespace moetrack;

TEST(ParamStore, CreationOrderAndLookup) {
    ParamStore ps;
    ps.create("b", Tensor::zeros({2, 2}));
    ps.create("a", Tensor::zeros({1, 3}));
    EXPECT_EQ(ps.size(), 2u);
    EXPECT_EQ(ps.total_numel(), 7u);
    EXPECT_EQ(ps.entries()[0]->name, "b");
    EXPECT_EQ(ps.entries()[1]->name, "a");
    EXPECT_TRUE(ps.contains("a"));
    EXPECT_FALSE(ps.contains("c"));
    EXPECT_THROW(ps.get("c"), ContractError);
    EXPECT_THROW(ps.create("a", Tensor::zeros({1, 1})), ContractError);
}

TEST(AdamW, MissingGradientsListNames) {
    ParamStore ps;
    ps.create("w1", Tensor::ones({2, 2}));
    ps.create("w2", Tensor::ones({2, 2}));
    try {
        adamw_step(ps, AdamWConfig{});
        FAIL() << "expected ContractError";
    } catch (const ContractError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("w1"), std::string::npos) << msg;
        EXPECT_NE(msg.find("w2"), std::string::npos) << msg;
    }
}

TEST(AdamW, ZeroGradNoDecayLeavesParametersUnchanged) {
    ParamStore ps;
    Parameter& p = ps.create("w", Tensor::from_rows({{1.5, -2.5}}));
    ps.zero_grad();
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    adamw_step(ps, cfg);
    EXPECT_DOUBLE_EQ(p.value[0], 1.5);
    EXPECT_DOUBLE_EQ(p.value[1], -2.5);
    EXPECT_EQ(p.step, 1);
}

TEST(AdamW, SingleStepHandValue) {
    // p=1, g=1, lr=0.1, betas=(0.9,0.999), wd=0: bias-corrected update is
    // lr * 1 / (1 + eps), so p lands a hair above 0.9.
    ParamStore ps;
    Parameter& p = ps.create("w", Tensor::scalar(1.0));
    ps.zero_grad();
    p.grad[0] = 1.0;
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    adamw_step(ps, cfg);
    EXPECT_NEAR(p.value[0], 0.9, 1e-6);
    EXPECT_DOUBLE_EQ(p.grad[0], 1.0);  // grads untouched
}

TEST(AdamW, DecoupledDecayFormula) {
    ParamStore ps;
    Parameter& p = ps.create("w", Tensor::scalar(1.0));
    ps.zero_grad();
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.1;
    adamw_step(ps, cfg);
    EXPECT_NEAR(p.value[0], 0.99, 1e-12);
}

TEST(AdamW, NonFiniteGradientRejected) {
    ParamStore ps;
    Parameter& p = ps.create("w", Tensor::scalar(1.0));
    ps.zero_grad();
    p.grad[0] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(adamw_step(ps, AdamWConfig{}), NumericError);
}

TEST(AdamW, TrainsQuadraticTowardsMinimum) {
    ParamStore ps;
    Parameter& p = ps.create("w", Tensor::scalar(3.0));
    AdamWConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.0;
    for (int i = 0; i < 400; ++i) {
        ps.zero_grad();
        Tape t;
        Var w = use(t, p);
        Var loss = mul(sub(w, t.leaf(Tensor::scalar(1.0))), sub(w, t.leaf(Tensor::scalar(1.0))));
        t.backward(loss);
        adamw_step(ps, cfg);
    }
    EXPECT_NEAR(p.value[0], 1.0, 1e-2);
}

TEST(UseOnTape, RequiresZeroGradFirst) {
    ParamStore ps;
    Parameter& p = ps.create("w", Tensor::scalar(1.0));
    Tape t;
    EXPECT_THROW(use(t, p), ContractError);
    ps.zero_grad();
    EXPECT_NO_THROW(use(t, p));
}

TEST(Checkpoint, RoundTripBitIdentical) {
    RngStream s(4242);
    ParamStore a;
    a.create("enc.w", Tensor::randn({3, 5}, s));
    a.create("enc.b", Tensor::randn({1, 5}, s));
    a.create("head", Tensor::randn({2, 2}, s, 0.01));
    const auto dir = std::filesystem::temp_directory_path() / "moetrack_ckpt_test";
    std::filesystem::remove_all(dir);
    save_checkpoint(a, dir);

    ParamStore b;
    b.create("enc.w", Tensor::zeros({3, 5}));
    b.create("enc.b", Tensor::zeros({1, 5}));
    b.create("head", Tensor::zeros({2, 2}));
    load_checkpoint(b, dir);
    for (size_t i = 0; i < a.entries().size(); ++i) {
        const auto& pa = *a.entries()[i];
        const auto& pb = *b.entries()[i];
        ASSERT_EQ(pa.value.numel(), pb.value.numel());
        for (size_t j = 0; j < pa.value.numel(); ++j) EXPECT_EQ(pa.value[j], pb.value[j]);
    }
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, SaveIsDeterministic) {
    RngStream s(7);
    ParamStore a;
    a.create("w", Tensor::randn({4, 4}, s));
    const auto d1 = std::filesystem::temp_directory_path() / "moetrack_ckpt_d1";
    const auto d2 = std::filesystem::temp_directory_path() / "moetrack_ckpt_d2";
    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
    save_checkpoint(a, d1);
    save_checkpoint(a, d2);
    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    EXPECT_EQ(slurp(d1 / "params.bin"), slurp(d2 / "params.bin"));
    EXPECT_EQ(slurp(d1 / "manifest.json"), slurp(d2 / "manifest.json"));
    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
}

TEST(Checkpoint, MismatchIsDescriptive) {
    ParamStore a;
    a.create("w", Tensor::ones({2, 3}));
    const auto dir = std::filesystem::temp_directory_path() / "moetrack_ckpt_mismatch";
    std::filesystem::remove_all(dir);
    save_checkpoint(a, dir);

    ParamStore wrong_shape;
    wrong_shape.create("w", Tensor::ones({3, 2}));
    try {
        load_checkpoint(wrong_shape, dir);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[3x2]"), std::string::npos) << msg;
    }

    ParamStore wrong_name;
    wrong_name.create("v", Tensor::ones({2, 3}));
    EXPECT_THROW(load_checkpoint(wrong_name, dir), ConfigError);

    ParamStore empty;
    EXPECT_THROW(load_checkpoint(empty, std::filesystem::temp_directory_path() / "no_such_ckpt"), IoError);
    std::filesystem::remove_all(dir);
}
