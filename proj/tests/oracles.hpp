#pragma once

// Independent reference implementations used to check the library. Everything
// here is written the slow, obvious way and shares no code with the headers
// under test.

#include <cmath>
#include <functional>
#include <vector>

#include <gtest/gtest.h>

#include "moetrack/autodiff.hpp"
#include "moetrack/tensor.hpp"

namespace oracle {

// Triple-loop matrix product in long double.
inline moetrack::Tensor matmul(const moetrack::Tensor& a, const moetrack::Tensor& b) {
    const int m = a.rows(), k = a.cols(), n = b.cols();
    moetrack::Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            long double acc = 0.0L;
            for (int p = 0; p < k; ++p) acc += static_cast<long double>(a.at(i, p)) * b.at(p, j);
            out.at(i, j) = static_cast<double>(acc);
        }
    return out;
}

// Softmax by direct exp/sum in long double, no stabilization tricks.
inline std::vector<double> softmax(const std::vector<double>& x) {
    long double sum = 0.0L;
    std::vector<long double> e(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp(static_cast<long double>(x[i]));
        sum += e[i];
    }
    std::vector<double> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(e[i] / sum);
    return out;
}

}  // namespace oracle

namespace testing_util {

inline void expect_tensor_near(const moetrack::Tensor& got, const moetrack::Tensor& want, double tol,
                               const char* what = "") {
    ASSERT_EQ(got.shape(), want.shape()) << what;
    for (size_t i = 0; i < got.numel(); ++i)
        EXPECT_NEAR(got[i], want[i], tol) << what << " element " << i;
}

// Gradient agreement rule used throughout: elementwise
// |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|).
inline void expect_grads_match(const std::vector<double>& analytic, const moetrack::Tensor& numeric,
                               double rtol = 1e-4, double atol = 1e-7) {
    ASSERT_EQ(analytic.size(), numeric.numel());
    for (size_t i = 0; i < analytic.size(); ++i) {
        const double scale = std::max(std::abs(analytic[i]), std::abs(numeric[i]));
        EXPECT_LE(std::abs(analytic[i] - numeric[i]), atol + rtol * scale)
            << "element " << i << ": analytic " << analytic[i] << " vs numeric " << numeric[i];
    }
}

// Runs f twice per input: once on a tape for the analytic gradient, once
// through central finite differences. f must build its whole graph from the
// single leaf it is given.
inline void gradcheck(const std::function<moetrack::Var(moetrack::Tape&, moetrack::Var)>& f,
                      const moetrack::Tensor& x, double rtol = 1e-4, double atol = 1e-7) {
    moetrack::Tape tape;
    moetrack::Var leaf = tape.leaf(x, true);
    moetrack::Var loss = f(tape, leaf);
    tape.backward(loss);
    const auto* g = tape.grad_if(leaf.id);
    ASSERT_NE(g, nullptr) << "input did not receive a gradient";

    auto scalar_f = [&](const moetrack::Tensor& probe) {
        moetrack::Tape t2;
        moetrack::Var l2 = t2.leaf(probe, false);
        return t2.value(f(t2, l2))[0];
    };
    const moetrack::Tensor numeric = moetrack::finite_difference_gradient(scalar_f, x);
    expect_grads_match(*g, numeric, rtol, atol);
}

}  // namespace testing_util
