#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <numbers>
#include <utility>
#include <vector>

#include "moetrack/tensor.hpp"

namespace moetrack {

class Tape;

// Lightweight handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& value() const;
    const std::vector<int>& shape() const;
    int rows() const { return value().rows(); }
    int cols() const { return value().cols(); }
};

// Reverse-mode tape. One tape per forward pass; operations append nodes in
// topological order, backward() sweeps them exactly once in reverse.
//
// Leaves may be bound to an external gradient sink (a parameter's grad
// buffer); backward() accumulates into every bound sink it reached, so
// unreached parameters keep whatever the caller zeroed them to.
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    Var leaf(Tensor t, bool needs_grad = false) {
        return push_slot(std::move(t), grad_enabled_ && needs_grad, nullptr);
    }

    // Leaf whose gradient is accumulated into *sink by backward().
    // sink must outlive the tape and have the tensor's length.
    Var leaf_bound(const Tensor& t, std::vector<double>* sink) {
        if (sink == nullptr || sink->size() != t.numel())
            throw ContractError("leaf_bound: gradient sink missing or wrong length");
        return push_slot(t, grad_enabled_, grad_enabled_ ? sink : nullptr);
    }

    Var record(std::vector<int> inputs, Tensor out, BackwardFn fn) {
        bool needs = false;
        if (grad_enabled_)
            for (int in : inputs) needs = needs || slots_[in].needs_grad;
        Var v = push_slot(std::move(out), needs, nullptr);
        if (needs) nodes_.push_back(Node{std::move(inputs), v.id, std::move(fn)});
        return v;
    }

    const Tensor& value(int id) const { return slots_[id].value; }
    const Tensor& value(Var v) const { return slots_[v.id].value; }

    bool needs_grad(int id) const { return slots_[id].needs_grad; }

    // Gradient buffer of a slot; allocated (zeroed) on first touch.
    std::vector<double>& grad_buf(int id) {
        auto& g = grads_[id];
        if (g.empty()) g.assign(slots_[id].value.numel(), 0.0);
        return g;
    }

    // Null if backward never reached this slot.
    const std::vector<double>* grad_if(int id) const {
        return grads_[id].empty() ? nullptr : &grads_[id];
    }

    size_t num_nodes() const { return nodes_.size(); }
    size_t num_slots() const { return slots_.size(); }

    void backward(Var loss) {
        if (!grad_enabled_) throw ContractError("backward on a no-grad tape");
        if (loss.tape != this) throw ContractError("backward: loss lives on a different tape");
        if (!value(loss).is_scalar())
            throw ContractError("backward requires a scalar loss, got shape " + shape_str(value(loss).shape()));
        grad_buf(loss.id)[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (grad_if(it->output) == nullptr) continue;  // not reachable from the loss
            it->backward(*this);
        }
        for (size_t i = 0; i < slots_.size(); ++i) {
            if (slots_[i].sink == nullptr) continue;
            const auto* g = grad_if(static_cast<int>(i));
            if (g == nullptr) continue;
            auto& sink = *slots_[i].sink;
            for (size_t k = 0; k < sink.size(); ++k) sink[k] += (*g)[k];
        }
    }

  private:
    struct Slot {
        Tensor value;
        bool needs_grad = false;
        std::vector<double>* sink = nullptr;
    };
    struct Node {
        std::vector<int> inputs;
        int output;
        BackwardFn backward;
    };

    Var push_slot(Tensor t, bool needs, std::vector<double>* sink) {
        slots_.push_back(Slot{std::move(t), needs, sink});
        grads_.emplace_back();
        return Var{this, static_cast<int>(slots_.size()) - 1};
    }

    bool grad_enabled_;
    std::deque<Slot> slots_;  // deque: value() references stay valid as the tape grows
    std::deque<std::vector<double>> grads_;
    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline const std::vector<int>& Var::shape() const { return value().shape(); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
    if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands live on different tapes");
    return *a.tape;
}

// Shape rule for the elementwise binary ops: identical shapes, or one side
// is a single element (scalar broadcast). Anything else is rejected.
enum class EwMode { Same, ScalarLhs, ScalarRhs };

inline EwMode ew_mode(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() == b.shape()) return EwMode::Same;
    if (a.is_scalar()) return EwMode::ScalarLhs;
    if (b.is_scalar()) return EwMode::ScalarRhs;
    throw ShapeError(std::string(who) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not match (only scalar broadcast is supported)");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(Var a, Var b) {
    Tape& tp = detail::same_tape(a, b);
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    const auto mode = detail::ew_mode(A, B, "add");
    Tensor out = mode == detail::EwMode::ScalarLhs ? B : A;
    if (mode == detail::EwMode::Same) {
        for (size_t i = 0; i < out.numel(); ++i) out[i] = A[i] + B[i];
    } else if (mode == detail::EwMode::ScalarRhs) {
        for (size_t i = 0; i < out.numel(); ++i) out[i] = A[i] + B[0];
    } else {
        for (size_t i = 0; i < out.numel(); ++i) out[i] = A[0] + B[i];
    }
    return tp.record({a.id, b.id}, std::move(out), [aid = a.id, bid = b.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        auto scatter = [&](int id) {
            if (!t.needs_grad(id)) return;
            auto& gi = t.grad_buf(id);
            if (gi.size() == g.size())
                for (size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
            else
                for (double v : g) gi[0] += v;
        };
        scatter(aid);
        scatter(bid);
    });
}

inline Var sub(Var a, Var b) {
    Tape& tp = detail::same_tape(a, b);
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    const auto mode = detail::ew_mode(A, B, "sub");
    Tensor out = mode == detail::EwMode::ScalarLhs ? B : A;
    if (mode == detail::EwMode::Same) {
        for (size_t i = 0; i < out.numel(); ++i) out[i] = A[i] - B[i];
    } else if (mode == detail::EwMode::ScalarRhs) {
        for (size_t i = 0; i < out.numel(); ++i) out[i] = A[i] - B[0];
    } else {
        for (size_t i = 0; i < out.numel(); ++i) out[i] = A[0] - B[i];
    }
    return tp.record({a.id, b.id}, std::move(out), [aid = a.id, bid = b.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        if (t.needs_grad(aid)) {
            auto& ga = t.grad_buf(aid);
            if (ga.size() == g.size())
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            else
                for (double v : g) ga[0] += v;
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.grad_buf(bid);
            if (gb.size() == g.size())
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            else
                for (double v : g) gb[0] -= v;
        }
    });
}

inline Var mul(Var a, Var b) {
    Tape& tp = detail::same_tape(a, b);
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    const auto mode = detail::ew_mode(A, B, "mul");
    Tensor out = mode == detail::EwMode::ScalarLhs ? B : A;
    if (mode == detail::EwMode::Same) {
        for (size_t i = 0; i < out.numel(); ++i) out[i] = A[i] * B[i];
    } else if (mode == detail::EwMode::ScalarRhs) {
        for (size_t i = 0; i < out.numel(); ++i) out[i] = A[i] * B[0];
    } else {
        for (size_t i = 0; i < out.numel(); ++i) out[i] = A[0] * B[i];
    }
    return tp.record({a.id, b.id}, std::move(out), [aid = a.id, bid = b.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const Tensor& A2 = t.value(aid);
        const Tensor& B2 = t.value(bid);
        if (t.needs_grad(aid)) {
            auto& ga = t.grad_buf(aid);
            if (A2.numel() == g.size()) {
                if (B2.numel() == g.size())
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B2[i];
                else
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B2[0];
            } else {
                for (size_t i = 0; i < g.size(); ++i) ga[0] += g[i] * B2[i];
            }
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.grad_buf(bid);
            if (B2.numel() == g.size()) {
                if (A2.numel() == g.size())
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A2[i];
                else
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A2[0];
            } else {
                for (size_t i = 0; i < g.size(); ++i) gb[0] += g[i] * A2[i];
            }
        }
    });
}

inline Var div(Var a, Var b) {
    Tape& tp = detail::same_tape(a, b);
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    const auto mode = detail::ew_mode(A, B, "div");
    Tensor out = mode == detail::EwMode::ScalarLhs ? B : A;
    if (mode == detail::EwMode::Same) {
        for (size_t i = 0; i < out.numel(); ++i) out[i] = A[i] / B[i];
    } else if (mode == detail::EwMode::ScalarRhs) {
        for (size_t i = 0; i < out.numel(); ++i) out[i] = A[i] / B[0];
    } else {
        for (size_t i = 0; i < out.numel(); ++i) out[i] = A[0] / B[i];
    }
    out.check_finite("div");
    return tp.record({a.id, b.id}, std::move(out), [aid = a.id, bid = b.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const Tensor& A2 = t.value(aid);
        const Tensor& B2 = t.value(bid);
        auto aval = [&](size_t i) { return A2.is_scalar() ? A2[0] : A2[i]; };
        auto bval = [&](size_t i) { return B2.is_scalar() ? B2[0] : B2[i]; };
        if (t.needs_grad(aid)) {
            auto& ga = t.grad_buf(aid);
            for (size_t i = 0; i < g.size(); ++i) {
                const double d = g[i] / bval(i);
                if (A2.is_scalar())
                    ga[0] += d;
                else
                    ga[i] += d;
            }
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.grad_buf(bid);
            for (size_t i = 0; i < g.size(); ++i) {
                const double bv = bval(i);
                const double d = -g[i] * aval(i) / (bv * bv);
                if (B2.is_scalar())
                    gb[0] += d;
                else
                    gb[i] += d;
            }
        }
    });
}

inline Var add_const(Var a, double c) {
    Tape& tp = *a.tape;
    Tensor out = tp.value(a);
    for (size_t i = 0; i < out.numel(); ++i) out[i] += c;
    return tp.record({a.id}, std::move(out), [aid = a.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

inline Var mul_const(Var a, double c) {
    Tape& tp = *a.tape;
    Tensor out = tp.value(a);
    for (size_t i = 0; i < out.numel(); ++i) out[i] *= c;
    return tp.record({a.id}, std::move(out), [aid = a.id, c, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
}

// ---------------------------------------------------------------------------
// Matrix operations

inline Var matmul(Var a, Var b) {
    Tape& tp = detail::same_tape(a, b);
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    if (A.ndim() != 2 || B.ndim() != 2)
        throw ShapeError("matmul requires 2-D tensors, got " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
    if (A.cols() != B.rows())
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    A.check_finite("matmul lhs");
    B.check_finite("matmul rhs");
    const int m = A.rows(), k = A.cols(), n = B.cols();
    Tensor out({m, n});
    detail::gemm(false, false, m, n, k, 1.0, A.data().data(), k, B.data().data(), n, 0.0, out.data().data(), n);
    return tp.record({a.id, b.id}, std::move(out), [aid = a.id, bid = b.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const Tensor& A2 = t.value(aid);
        const Tensor& B2 = t.value(bid);
        const int m2 = A2.rows(), k2 = A2.cols(), n2 = B2.cols();
        if (t.needs_grad(aid)) {
            auto& ga = t.grad_buf(aid);  // dA += dC * B^T
            detail::gemm(false, true, m2, k2, n2, 1.0, g.data(), n2, B2.data().data(), n2, 1.0, ga.data(), k2);
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.grad_buf(bid);  // dB += A^T * dC
            detail::gemm(true, false, k2, n2, m2, 1.0, A2.data().data(), k2, g.data(), n2, 1.0, gb.data(), n2);
        }
    });
}

inline Var transpose(Var a) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.value(a);
    const int m = A.rows(), n = A.cols();
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = A.at(i, j);
    return tp.record({a.id}, std::move(out), [aid = a.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const Tensor& A2 = t.value(aid);
        const int m2 = A2.rows(), n2 = A2.cols();
        auto& ga = t.grad_buf(aid);
        for (int i = 0; i < m2; ++i)
            for (int j = 0; j < n2; ++j) ga[static_cast<size_t>(i) * n2 + j] += g[static_cast<size_t>(j) * m2 + i];
    });
}

// Row-wise softmax with per-row max subtraction. Rows sum to 1 within 1e-12.
inline Var row_softmax(Var a) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.value(a);
    A.check_finite("row_softmax");
    const int m = A.rows(), n = A.cols();
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        double mx = A.at(i, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, A.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            const double e = std::exp(A.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    return tp.record({a.id}, std::move(out), [aid = a.id, oid = tp.num_slots()](Tape& t) {
        const int o = static_cast<int>(oid);
        const auto& g = *t.grad_if(o);
        const Tensor& Y = t.value(o);
        const int m2 = Y.rows(), n2 = Y.cols();
        auto& ga = t.grad_buf(aid);
        for (int i = 0; i < m2; ++i) {
            double dot = 0.0;
            for (int j = 0; j < n2; ++j) dot += g[static_cast<size_t>(i) * n2 + j] * Y.at(i, j);
            for (int j = 0; j < n2; ++j) {
                const size_t idx = static_cast<size_t>(i) * n2 + j;
                ga[idx] += Y.at(i, j) * (g[idx] - dot);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Unary nonlinearities

namespace detail {

inline double std_normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }
inline double std_normal_pdf(double x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}
inline double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

template <typename Fwd, typename Bwd>
Var unary_op(Var a, Fwd fwd, Bwd dfd) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.value(a);
    Tensor out = A;
    for (size_t i = 0; i < out.numel(); ++i) out[i] = fwd(A[i]);
    return tp.record({a.id}, std::move(out), [aid = a.id, dfd, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const Tensor& A2 = t.value(aid);
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfd(A2[i]);
    });
}

}  // namespace detail

inline Var gelu(Var a) {
    return detail::unary_op(
        a, [](double x) { return x * detail::std_normal_cdf(x); },
        [](double x) { return detail::std_normal_cdf(x) + x * detail::std_normal_pdf(x); });
}

inline Var relu(Var a) {
    return detail::unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var a) {
    return detail::unary_op(a, detail::sigmoid_scalar, [](double x) {
        const double s = detail::sigmoid_scalar(x);
        return s * (1.0 - s);
    });
}

// log(1 + e^x), evaluated stably; gradient is sigmoid(x).
inline Var softplus(Var a) {
    return detail::unary_op(
        a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }, detail::sigmoid_scalar);
}

inline Var log(Var a) {
    const Tensor& A = a.tape->value(a);
    for (size_t i = 0; i < A.numel(); ++i)
        if (!(A[i] > 0.0)) throw NumericError("log: non-positive input " + std::to_string(A[i]));
    return detail::unary_op(
        a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

inline Var pow_const(Var a, double p) {
    return detail::unary_op(
        a, [p](double x) { return std::pow(x, p); }, [p](double x) { return p * std::pow(x, p - 1.0); });
}

inline Var abs(Var a) {
    return detail::unary_op(
        a, [](double x) { return std::abs(x); }, [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// Ties route the gradient to the first operand.
inline Var maximum(Var a, Var b) {
    Tape& tp = detail::same_tape(a, b);
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    if (!A.same_shape(B)) throw ShapeError("maximum: shape mismatch");
    Tensor out = A;
    for (size_t i = 0; i < out.numel(); ++i) out[i] = std::max(A[i], B[i]);
    return tp.record({a.id, b.id}, std::move(out), [aid = a.id, bid = b.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const Tensor& A2 = t.value(aid);
        const Tensor& B2 = t.value(bid);
        for (size_t i = 0; i < g.size(); ++i) {
            if (A2[i] >= B2[i]) {
                if (t.needs_grad(aid)) t.grad_buf(aid)[i] += g[i];
            } else if (t.needs_grad(bid)) {
                t.grad_buf(bid)[i] += g[i];
            }
        }
    });
}

inline Var minimum(Var a, Var b) {
    Tape& tp = detail::same_tape(a, b);
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    if (!A.same_shape(B)) throw ShapeError("minimum: shape mismatch");
    Tensor out = A;
    for (size_t i = 0; i < out.numel(); ++i) out[i] = std::min(A[i], B[i]);
    return tp.record({a.id, b.id}, std::move(out), [aid = a.id, bid = b.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const Tensor& A2 = t.value(aid);
        const Tensor& B2 = t.value(bid);
        for (size_t i = 0; i < g.size(); ++i) {
            if (A2[i] <= B2[i]) {
                if (t.needs_grad(aid)) t.grad_buf(aid)[i] += g[i];
            } else if (t.needs_grad(bid)) {
                t.grad_buf(bid)[i] += g[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.value(a);
    double s = 0.0;
    for (size_t i = 0; i < A.numel(); ++i) s += A[i];
    return tp.record({a.id}, Tensor::scalar(s), [aid = a.id, oid = tp.num_slots()](Tape& t) {
        const double g = (*t.grad_if(static_cast<int>(oid)))[0];
        auto& ga = t.grad_buf(aid);
        for (double& v : ga) v += g;
    });
}

inline Var mean(Var a) {
    const size_t n = a.tape->value(a).numel();
    return mul_const(sum(a), 1.0 / static_cast<double>(n));
}

inline Var sum_axis0(Var a) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.value(a);
    const int m = A.rows(), n = A.cols();
    Tensor out({1, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[j] += A.at(i, j);
    return tp.record({a.id}, std::move(out), [aid = a.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const Tensor& A2 = t.value(aid);
        const int m2 = A2.rows(), n2 = A2.cols();
        auto& ga = t.grad_buf(aid);
        for (int i = 0; i < m2; ++i)
            for (int j = 0; j < n2; ++j) ga[static_cast<size_t>(i) * n2 + j] += g[j];
    });
}

inline Var mean_axis0(Var a) {
    const int m = a.tape->value(a).rows();
    return mul_const(sum_axis0(a), 1.0 / static_cast<double>(m));
}

// ---------------------------------------------------------------------------
// Structure: slicing, concatenation, reshaping

inline Var slice_rows(Var a, int start, int count) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.value(a);
    const int m = A.rows(), n = A.cols();
    if (start < 0 || count <= 0 || start + count > m)
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of bounds for " + std::to_string(m) + " rows");
    Tensor out({count, n});
    std::copy_n(A.data().begin() + static_cast<size_t>(start) * n, static_cast<size_t>(count) * n, out.data().begin());
    return tp.record({a.id}, std::move(out), [aid = a.id, start, count, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const int n2 = t.value(aid).cols();
        auto& ga = t.grad_buf(aid);
        for (int i = 0; i < count; ++i)
            for (int j = 0; j < n2; ++j)
                ga[static_cast<size_t>(start + i) * n2 + j] += g[static_cast<size_t>(i) * n2 + j];
    });
}

inline Var slice_cols(Var a, int start, int count) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.value(a);
    const int m = A.rows(), n = A.cols();
    if (start < 0 || count <= 0 || start + count > n)
        throw ShapeError("slice_cols: range out of bounds for " + std::to_string(n) + " cols");
    Tensor out({m, count});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < count; ++j) out.at(i, j) = A.at(i, start + j);
    return tp.record({a.id}, std::move(out), [aid = a.id, start, count, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const Tensor& A2 = t.value(aid);
        const int m2 = A2.rows(), n2 = A2.cols();
        auto& ga = t.grad_buf(aid);
        for (int i = 0; i < m2; ++i)
            for (int j = 0; j < count; ++j)
                ga[static_cast<size_t>(i) * n2 + start + j] += g[static_cast<size_t>(i) * count + j];
    });
}

inline Var concat_rows(Var a, Var b) {
    Tape& tp = detail::same_tape(a, b);
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    if (A.cols() != B.cols()) throw ShapeError("concat_rows: column counts differ");
    const int ma = A.rows(), mb = B.rows(), n = A.cols();
    Tensor out({ma + mb, n});
    std::copy(A.data().begin(), A.data().end(), out.data().begin());
    std::copy(B.data().begin(), B.data().end(), out.data().begin() + A.numel());
    return tp.record({a.id, b.id}, std::move(out), [aid = a.id, bid = b.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const size_t na = t.value(aid).numel();
        if (t.needs_grad(aid)) {
            auto& ga = t.grad_buf(aid);
            for (size_t i = 0; i < na; ++i) ga[i] += g[i];
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.grad_buf(bid);
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
        }
    });
}

inline Var concat_cols(Var a, Var b) {
    Tape& tp = detail::same_tape(a, b);
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    if (A.rows() != B.rows()) throw ShapeError("concat_cols: row counts differ");
    const int m = A.rows(), na = A.cols(), nb = B.cols();
    Tensor out({m, na + nb});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < na; ++j) out.at(i, j) = A.at(i, j);
        for (int j = 0; j < nb; ++j) out.at(i, na + j) = B.at(i, j);
    }
    return tp.record({a.id, b.id}, std::move(out), [aid = a.id, bid = b.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const Tensor& A2 = t.value(aid);
        const Tensor& B2 = t.value(bid);
        const int m2 = A2.rows(), na2 = A2.cols(), nb2 = B2.cols();
        const int n2 = na2 + nb2;
        for (int i = 0; i < m2; ++i) {
            if (t.needs_grad(aid)) {
                auto& ga = t.grad_buf(aid);
                for (int j = 0; j < na2; ++j) ga[static_cast<size_t>(i) * na2 + j] += g[static_cast<size_t>(i) * n2 + j];
            }
            if (t.needs_grad(bid)) {
                auto& gb = t.grad_buf(bid);
                for (int j = 0; j < nb2; ++j)
                    gb[static_cast<size_t>(i) * nb2 + j] += g[static_cast<size_t>(i) * n2 + na2 + j];
            }
        }
    });
}

inline Var reshape(Var a, std::vector<int> shape) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.value(a);
    Tensor out(shape, A.data());
    return tp.record({a.id}, std::move(out), [aid = a.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

// Multiply each row i by the constant factor scales[i]. The mask path for
// segment zeroing: factors are data, not tape values.
inline Var scale_rows(Var a, std::vector<double> scales) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.value(a);
    const int m = A.rows(), n = A.cols();
    if (static_cast<int>(scales.size()) != m) throw ShapeError("scale_rows: need one factor per row");
    Tensor out = A;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) *= scales[i];
    return tp.record({a.id}, std::move(out),
                     [aid = a.id, scales = std::move(scales), oid = tp.num_slots()](Tape& t) {
                         const auto& g = *t.grad_if(static_cast<int>(oid));
                         const int n2 = t.value(aid).cols();
                         auto& ga = t.grad_buf(aid);
                         for (size_t i = 0; i < scales.size(); ++i)
                             for (int j = 0; j < n2; ++j) ga[i * n2 + j] += g[i * n2 + j] * scales[i];
                     });
}

// a[m x n] + b[1 x n], b added to every row.
inline Var add_rowvec(Var a, Var b) {
    Tape& tp = detail::same_tape(a, b);
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    if (B.rows() != 1 || B.cols() != A.cols())
        throw ShapeError("add_rowvec: expected [1x" + std::to_string(A.cols()) + "], got " + shape_str(B.shape()));
    const int m = A.rows(), n = A.cols();
    Tensor out = A;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) += B[j];
    return tp.record({a.id, b.id}, std::move(out), [aid = a.id, bid = b.id, oid = tp.num_slots()](Tape& t) {
        const auto& g = *t.grad_if(static_cast<int>(oid));
        const Tensor& A2 = t.value(aid);
        const int m2 = A2.rows(), n2 = A2.cols();
        if (t.needs_grad(aid)) {
            auto& ga = t.grad_buf(aid);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.grad_buf(bid);
            for (int i = 0; i < m2; ++i)
                for (int j = 0; j < n2; ++j) gb[j] += g[static_cast<size_t>(i) * n2 + j];
        }
    });
}

// Per-row layer normalization with learned gain/bias (pre-norm blocks).
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    Tape& tp = detail::same_tape(x, gamma);
    detail::same_tape(x, beta);
    const Tensor& X = tp.value(x);
    const Tensor& G = tp.value(gamma);
    const Tensor& B = tp.value(beta);
    const int m = X.rows(), n = X.cols();
    if (G.rows() != 1 || G.cols() != n || B.rows() != 1 || B.cols() != n)
        throw ShapeError("layer_norm: gamma/beta must be [1x" + std::to_string(n) + "]");
    Tensor out({m, n});
    std::vector<double> inv_sigma(m);
    for (int i = 0; i < m; ++i) {
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += X.at(i, j);
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = X.at(i, j) - mu;
            var += d * d;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (int j = 0; j < n; ++j) out.at(i, j) = (X.at(i, j) - mu) * is * G[j] + B[j];
    }
    return tp.record(
        {x.id, gamma.id, beta.id}, std::move(out),
        [xid = x.id, gid = gamma.id, bid = beta.id, inv_sigma = std::move(inv_sigma), oid = tp.num_slots()](Tape& t) {
            const auto& g = *t.grad_if(static_cast<int>(oid));
            const Tensor& X2 = t.value(xid);
            const Tensor& G2 = t.value(gid);
            const int m2 = X2.rows(), n2 = X2.cols();
            for (int i = 0; i < m2; ++i) {
                const double is = inv_sigma[i];
                double mu = 0.0;
                for (int j = 0; j < n2; ++j) mu += X2.at(i, j);
                mu /= n2;
                // xhat, d = g*gamma, and the two row means the backward needs
                double mean_d = 0.0, mean_dx = 0.0;
                for (int j = 0; j < n2; ++j) {
                    const double xh = (X2.at(i, j) - mu) * is;
                    const double d = g[static_cast<size_t>(i) * n2 + j] * G2[j];
                    mean_d += d;
                    mean_dx += d * xh;
                }
                mean_d /= n2;
                mean_dx /= n2;
                for (int j = 0; j < n2; ++j) {
                    const size_t idx = static_cast<size_t>(i) * n2 + j;
                    const double xh = (X2.at(i, j) - mu) * is;
                    const double d = g[idx] * G2[j];
                    if (t.needs_grad(xid)) t.grad_buf(xid)[idx] += (d - mean_d - xh * mean_dx) * is;
                    if (t.needs_grad(gid)) t.grad_buf(gid)[j] += g[idx] * xh;
                    if (t.needs_grad(bid)) t.grad_buf(bid)[j] += g[idx];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Verification oracle: central finite differences, (f(x+h e_i) - f(x-h e_i)) / 2h.
inline Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                         double h = 1e-5) {
    if (!(h > 0.0)) throw ContractError("finite_difference_gradient: h must be positive");
    Tensor grad(x.shape());
    Tensor probe = x;
    for (size_t i = 0; i < x.numel(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = f(probe);
        probe[i] = orig - h;
        const double fm = f(probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

}  // namespace moetrack
