#include <cstring>
#include <gtest/gtest.h>

#include "moetrack/autodiff.hpp"
#include "moetrack/rng.hpp"
#include "oracles.hpp"

using namespace moetrack;
using testing_util::expect_grads_match;
using testing_util::expect_tensor_near;
using testing_util::gradcheck;

TEST(Matmul, IdentityCase) {
    Tape t;
    Var a = t.leaf(Tensor::from_rows({{1, 2}, {3, 4}}));
    Var i = t.leaf(Tensor::from_rows({{1, 0}, {0, 1}}));
    expect_tensor_near(t.value(matmul(a, i)), t.value(a), 0.0);
}

TEST(Matmul, HandMultiplication) {
    Tape t;
    Var a = t.leaf(Tensor::from_rows({{1, 2}, {3, 4}}));
    Var b = t.leaf(Tensor::from_rows({{5}, {6}}));
    expect_tensor_near(t.value(matmul(a, b)), Tensor::from_rows({{17}, {39}}), 1e-15);
}

TEST(Matmul, OneByOne) {
    Tape t;
    Var c = matmul(t.leaf(Tensor::from_rows({{2}})), t.leaf(Tensor::from_rows({{3}})));
    EXPECT_DOUBLE_EQ(t.value(c)[0], 6.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tape t;
    Var a = t.leaf(Tensor::zeros({2, 3}));
    Var b = t.leaf(Tensor::zeros({2, 3}));
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    }
}

TEST(Matmul, NonFiniteInputRejected) {
    Tape t;
    Tensor bad({1, 1}, {std::numeric_limits<double>::infinity()});
    EXPECT_THROW(matmul(t.leaf(bad), t.leaf(Tensor::ones({1, 1}))), NumericError);
}

TEST(Matmul, AgreesWithLoopOracle) {
    RngStream s(314);
    for (int trial = 0; trial < 20; ++trial) {
        const int m = 1 + s.uniform_int(8), k = 1 + s.uniform_int(8), n = 1 + s.uniform_int(8);
        Tensor a = Tensor::randn({m, k}, s);
        Tensor b = Tensor::randn({k, n}, s);
        Tape t;
        expect_tensor_near(t.value(matmul(t.leaf(a), t.leaf(b))), oracle::matmul(a, b), 1e-12);
    }
}

TEST(RowSoftmax, Symmetry) {
    Tape t;
    const Tensor& y = t.value(row_softmax(t.leaf(Tensor::from_rows({{0, 0}}))));
    EXPECT_DOUBLE_EQ(y[0], 0.5);
    EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(RowSoftmax, HighPrecisionOracle) {
    Tape t;
    const Tensor& y = t.value(row_softmax(t.leaf(Tensor::from_rows({{2, 1, 0, -1}}))));
    const auto want = oracle::softmax({2, 1, 0, -1});
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(y[j], want[j], 1e-12);
    const double pinned[4] = {0.64391, 0.23688, 0.08714, 0.03206};
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(y[j], pinned[j], 1e-5);
}

TEST(RowSoftmax, LargeInputsDoNotOverflow) {
    Tape t;
    const Tensor& y = t.value(row_softmax(t.leaf(Tensor::from_rows({{1000, 1000}}))));
    EXPECT_DOUBLE_EQ(y[0], 0.5);
    EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(RowSoftmax, RowsSumToOne) {
    RngStream s(555);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::randn({5, 7}, s, 10.0);
        Tape t;
        const Tensor& y = t.value(row_softmax(t.leaf(x)));
        for (int i = 0; i < 5; ++i) {
            double row = 0;
            for (int j = 0; j < 7; ++j) row += y.at(i, j);
            EXPECT_NEAR(row, 1.0, 1e-12);
        }
    }
}

TEST(Backward, SumGivesOnes) {
    RngStream s(1);
    Tape t;
    Var x = t.leaf(Tensor::randn({3, 4}, s), true);
    t.backward(sum(x));
    const auto* g = t.grad_if(x.id);
    ASSERT_NE(g, nullptr);
    for (double v : *g) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Backward, SumOfSquares) {
    Tape t;
    Var x = t.leaf(Tensor({1, 3}, {1, 2, 3}), true);
    t.backward(sum(mul(x, x)));
    const auto& g = *t.grad_if(x.id);
    EXPECT_DOUBLE_EQ(g[0], 2.0);
    EXPECT_DOUBLE_EQ(g[1], 4.0);
    EXPECT_DOUBLE_EQ(g[2], 6.0);
}

TEST(Backward, NonScalarLossRejected) {
    Tape t;
    Var x = t.leaf(Tensor::zeros({2, 2}), true);
    EXPECT_THROW(t.backward(mul_const(x, 2.0)), ContractError);
}

TEST(Backward, UnreachedLeafGetsNoGradient) {
    Tape t;
    Var x = t.leaf(Tensor::ones({2, 2}), true);
    Var y = t.leaf(Tensor::ones({2, 2}), true);
    t.backward(sum(x));
    EXPECT_NE(t.grad_if(x.id), nullptr);
    EXPECT_EQ(t.grad_if(y.id), nullptr);
}

TEST(Backward, BoundSinkAccumulates) {
    Tensor p = Tensor::from_rows({{2, 3}});
    std::vector<double> sink(2, 0.0);
    {
        Tape t;
        Var x = t.leaf_bound(p, &sink);
        t.backward(sum(mul(x, x)));
    }
    EXPECT_DOUBLE_EQ(sink[0], 4.0);
    EXPECT_DOUBLE_EQ(sink[1], 6.0);
    {
        Tape t;
        Var x = t.leaf_bound(p, &sink);
        t.backward(sum(x));
    }
    EXPECT_DOUBLE_EQ(sink[0], 5.0);  // accumulated across tapes, caller zeroes
    EXPECT_DOUBLE_EQ(sink[1], 7.0);
}

TEST(Backward, UnboundParameterSinkStaysZero) {
    Tensor p = Tensor::ones({1, 2});
    std::vector<double> sink(2, 0.0);
    Tape t;
    (void)t.leaf_bound(p, &sink);
    Var other = t.leaf(Tensor::ones({1, 1}), true);
    t.backward(sum(other));
    EXPECT_DOUBLE_EQ(sink[0], 0.0);
    EXPECT_DOUBLE_EQ(sink[1], 0.0);
}

TEST(Backward, NoGradTapeRecordsNothing) {
    Tape t(false);
    Var x = t.leaf(Tensor::ones({2, 2}), true);
    Var y = sum(mul(x, x));
    EXPECT_EQ(t.num_nodes(), 0u);
    EXPECT_THROW(t.backward(y), ContractError);
}

TEST(FiniteDifference, SumOfSquares) {
    Tensor x({1, 2}, {1, 2});
    auto f = [](const Tensor& v) { return v[0] * v[0] + v[1] * v[1]; };
    Tensor g = finite_difference_gradient(f, x);
    EXPECT_NEAR(g[0], 2.0, 1e-6);
    EXPECT_NEAR(g[1], 4.0, 1e-6);
}

TEST(FiniteDifference, SoftmaxSumIsConserved) {
    RngStream s(8);
    Tensor x = Tensor::randn({2, 5}, s);
    auto f = [](const Tensor& v) {
        Tape t;
        const Tensor y = t.value(row_softmax(t.leaf(v)));
        double acc = 0.0;
        for (size_t i = 0; i < y.numel(); ++i) acc += y[i];
        return acc / 2.0;
    };
    Tensor g = finite_difference_gradient(f, x);
    for (size_t i = 0; i < g.numel(); ++i) EXPECT_NEAR(g[i], 0.0, 1e-6);
}

TEST(FiniteDifference, RejectsNonPositiveStep) {
    EXPECT_THROW(finite_difference_gradient([](const Tensor&) { return 0.0; }, Tensor::ones({1, 1}), 0.0),
                 ContractError);
}

TEST(Ties, MaximumRoutesGradientToFirstOperand) {
    Tape t;
    Var a = t.leaf(Tensor::scalar(1.0), true);
    Var b = t.leaf(Tensor::scalar(1.0), true);
    t.backward(sum(maximum(a, b)));
    EXPECT_DOUBLE_EQ((*t.grad_if(a.id))[0], 1.0);
    EXPECT_EQ(t.grad_if(b.id), nullptr);
}

TEST(Determinism, SameGraphSameGradientsBitwise) {
    auto run = [](std::vector<double>& out) {
        RngStream s(77);
        Tensor x = Tensor::randn({4, 4}, s);
        Tensor w = Tensor::randn({4, 4}, s);
        Tape t;
        Var xv = t.leaf(x, true);
        Var y = gelu(matmul(xv, t.leaf(w)));
        t.backward(mean(mul(y, y)));
        out = *t.grad_if(xv.id);
    };
    std::vector<double> g1, g2;
    run(g1);
    run(g2);
    ASSERT_EQ(g1.size(), g2.size());
    EXPECT_EQ(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)), 0);
}

// Every differentiable op against central finite differences, fresh random
// inputs per seed. Inputs live in [-1,1] except where an op's domain or a
// kink requires shifting them. All auxiliary tensors are drawn up front so
// the probed function is identical across finite-difference evaluations.
TEST(GradientSoundness, AllOpsTwentySeeds) {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        RngStream s(seed);
        auto uni = [&](std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
            Tensor t(shape);
            for (size_t i = 0; i < t.numel(); ++i) t[i] = s.uniform(lo, hi);
            return t;
        };
        // fixed weights so losses are not permutation-blind
        const Tensor w34 = uni({3, 4}), w25 = uni({2, 5}), w43 = uni({4, 3}), w14 = uni({1, 4});
        const Tensor w24 = uni({2, 4}), w32 = uni({3, 2}), w54 = uni({5, 4}), w35 = uni({3, 5});
        const Tensor w62 = uni({6, 2});
        const Tensor c34a = uni({3, 4}), c34b = uni({3, 4}), c34c = uni({3, 4}, 1.0, 3.0);
        const Tensor c45 = uni({4, 5}), c24a = uni({2, 4}), c24b = uni({2, 4}), c32 = uni({3, 2});
        const Tensor crow = uni({1, 4});
        const Tensor sc = Tensor::scalar(s.uniform(-1, 1)), scpos = Tensor::scalar(s.uniform(1.0, 3.0));

        auto weighted = [&](Tape& t, Var y, const Tensor& w) { return sum(mul(y, t.leaf(w))); };

        gradcheck([&](Tape& t, Var x) { return weighted(t, add(x, t.leaf(c34a)), w34); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, add(x, t.leaf(Tensor::scalar(0.7))), w34); },
                  uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return sum(add(t.leaf(w34), x)); }, sc);
        gradcheck([&](Tape& t, Var x) { return weighted(t, sub(x, t.leaf(c34a)), w34); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return sum(sub(t.leaf(w34), x)); }, sc);
        gradcheck([&](Tape& t, Var x) { return weighted(t, mul(x, t.leaf(c34a)), w34); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return sum(mul(t.leaf(w34), x)); }, sc);
        gradcheck([&](Tape& t, Var x) { return weighted(t, div(x, t.leaf(c34c)), w34); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, div(t.leaf(c34b), x), w34); }, uni({3, 4}, 1.0, 3.0));
        gradcheck([&](Tape& t, Var x) { return sum(div(t.leaf(w34), x)); }, scpos);
        gradcheck([&](Tape& t, Var x) { return weighted(t, add_const(x, 2.5), w34); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, mul_const(x, -1.7), w34); }, uni({3, 4}));

        gradcheck([&](Tape& t, Var x) { return weighted(t, matmul(x, t.leaf(c45)), w25); }, uni({2, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, matmul(t.leaf(c24a), x), w25); }, uni({4, 5}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, transpose(x), w43); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, row_softmax(x), w34); }, uni({3, 4}, -3.0, 3.0));

        gradcheck([&](Tape& t, Var x) { return weighted(t, gelu(x), w34); }, uni({3, 4}, -2.0, 2.0));
        {
            Tensor x = uni({3, 4});
            for (size_t i = 0; i < x.numel(); ++i) x[i] += x[i] >= 0 ? 0.1 : -0.1;  // keep off the kink
            gradcheck([&](Tape& t, Var v) { return weighted(t, relu(v), w34); }, x);
            gradcheck([&](Tape& t, Var v) { return weighted(t, moetrack::abs(v), w34); }, x);
        }
        gradcheck([&](Tape& t, Var x) { return weighted(t, sigmoid(x), w34); }, uni({3, 4}, -3.0, 3.0));
        gradcheck([&](Tape& t, Var x) { return weighted(t, softplus(x), w34); }, uni({3, 4}, -3.0, 3.0));
        gradcheck([&](Tape& t, Var x) { return weighted(t, moetrack::log(x), w34); }, uni({3, 4}, 0.5, 2.0));
        gradcheck([&](Tape& t, Var x) { return weighted(t, pow_const(x, 2.0), w34); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, pow_const(x, 3.0), w34); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, pow_const(x, 0.5), w34); }, uni({3, 4}, 0.5, 2.0));
        {
            Tensor a = uni({3, 4});
            Tensor b = a;
            for (size_t i = 0; i < b.numel(); ++i) b[i] += (s.uniform01() < 0.5 ? 1 : -1) * s.uniform(0.1, 0.5);
            gradcheck([&](Tape& t, Var v) { return weighted(t, maximum(v, t.leaf(b)), w34); }, a);
            gradcheck([&](Tape& t, Var v) { return weighted(t, minimum(v, t.leaf(b)), w34); }, a);
            gradcheck([&](Tape& t, Var v) { return weighted(t, maximum(t.leaf(a), v), w34); }, b);
        }

        gradcheck([&](Tape& t, Var x) { return sum(x); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return mean(x); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, sum_axis0(x), w14); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, mean_axis0(x), w14); }, uni({3, 4}));

        gradcheck([&](Tape& t, Var x) { return weighted(t, slice_rows(x, 1, 2), w24); }, uni({4, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, slice_cols(x, 1, 2), w32); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, concat_rows(x, t.leaf(c24a)), w54); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, concat_rows(t.leaf(c24b), x), w54); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, concat_cols(x, t.leaf(c32)), w35); }, uni({3, 3}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, concat_cols(t.leaf(c32), x), w35); }, uni({3, 3}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, reshape(x, {6, 2}), w62); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, scale_rows(x, {0.0, -1.5, 2.0}), w34); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, add_rowvec(x, t.leaf(crow)), w34); }, uni({3, 4}));
        gradcheck([&](Tape& t, Var x) { return weighted(t, add_rowvec(t.leaf(c34a), x), w34); }, uni({1, 4}));

        {
            const Tensor x0 = uni({3, 4});
            const Tensor g0 = uni({1, 4}, 0.5, 1.5);
            const Tensor b0 = uni({1, 4});
            gradcheck([&](Tape& t, Var v) { return weighted(t, layer_norm(v, t.leaf(g0), t.leaf(b0)), w34); }, x0);
            gradcheck([&](Tape& t, Var v) { return weighted(t, layer_norm(t.leaf(x0), v, t.leaf(b0)), w34); }, g0);
            gradcheck([&](Tape& t, Var v) { return weighted(t, layer_norm(t.leaf(x0), t.leaf(g0), v), w34); }, b0);
        }
    }
}
