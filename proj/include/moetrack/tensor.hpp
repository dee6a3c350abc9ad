#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "moetrack/common.hpp"
#include "moetrack/rng.hpp"

namespace moetrack {

// Dense n-dimensional real array, 64-bit floats, row-major. Most operations
// are 2-D; higher ranks only carry raw pixel data through the pipeline.
// There is no broadcasting beyond scalar-tensor anywhere in the project.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(checked_numel(shape_), 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != data_.size())
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor ones(std::vector<int> shape) { return full(std::move(shape), 1.0); }

    static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }

    // 2-D constructor from nested braces, e.g. Tensor::from_rows({{1,2},{3,4}}).
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const int m = static_cast<int>(rows.size());
        const int n = m > 0 ? static_cast<int>(rows.begin()->size()) : 0;
        std::vector<double> data;
        data.reserve(static_cast<size_t>(m) * n);
        for (const auto& r : rows) {
            if (static_cast<int>(r.size()) != n) throw ShapeError("from_rows: ragged rows");
            data.insert(data.end(), r.begin(), r.end());
        }
        return Tensor({m, n}, std::move(data));
    }

    static Tensor randn(std::vector<int> shape, RngStream& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& v : t.data_) v = rng.normal(0.0, stddev);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    size_t numel() const { return data_.size(); }
    bool is_scalar() const { return data_.size() == 1; }

    int ndim() const { return static_cast<int>(shape_.size()); }

    int rows() const {
        require_2d("rows()");
        return shape_[0];
    }
    int cols() const {
        require_2d("cols()");
        return shape_[1];
    }

    double& at(int i, int j) {
        require_2d("at()");
        return data_[static_cast<size_t>(i) * shape_[1] + j];
    }
    double at(int i, int j) const {
        require_2d("at()");
        return data_[static_cast<size_t>(i) * shape_[1] + j];
    }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool b) { requires_grad_ = b; }

    bool has_grad() const { return grad_.has_value(); }
    std::vector<double>& grad() {
        if (!grad_) throw ContractError("tensor has no gradient");
        return *grad_;
    }
    const std::vector<double>& grad() const {
        if (!grad_) throw ContractError("tensor has no gradient");
        return *grad_;
    }
    void ensure_grad() {
        if (!grad_) grad_.emplace(data_.size(), 0.0);
    }
    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
    }
    void drop_grad() { grad_.reset(); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void check_finite(std::string_view context) const {
        if (!all_finite()) throw NumericError(std::string(context) + ": non-finite value in tensor " + shape_str(shape_));
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  private:
    void require_2d(const char* who) const {
        if (shape_.size() != 2) throw ShapeError(std::string(who) + " requires a 2-D tensor, got " + shape_str(shape_));
    }

    static size_t checked_numel(const std::vector<int>& shape) {
        if (shape.empty()) throw ShapeError("empty shape");
        size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
    std::optional<std::vector<double>> grad_;
};

namespace detail {

// C = alpha * op(A) * op(B) + beta * C, row-major. Backed by BLAS so the
// training loop is not bottlenecked by the matmul kernel; tests check it
// against a plain-loop oracle.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
                alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void force_single_thread_blas() {
#ifdef OPENBLAS_SEQUENTIAL
    (void)0;
#endif
    openblas_set_num_threads(1);
}

struct BlasInit {
    BlasInit() { force_single_thread_blas(); }
};
inline const BlasInit blas_init{};

}  // namespace detail

}  // namespace moetrack
