#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "moetrack/autodiff.hpp"
#include "moetrack/tensor.hpp"

namespace moetrack {

// A named trainable tensor with its gradient buffer and AdamW state.
// grad stays empty until zero_grad() sizes it; stepping with an unsized
// grad is the "backward never ran" error the optimizer checks for.
struct Parameter {
    std::string name;
    Tensor value;
    std::vector<double> grad;
    std::vector<double> m;
    std::vector<double> v;
    int64_t step = 0;

    void zero_grad() { grad.assign(value.numel(), 0.0); }
};

// Owns parameters in creation order; order defines the checkpoint layout.
class ParamStore {
  public:
    Parameter& create(const std::string& name, Tensor init) {
        if (by_name_.count(name)) throw ContractError("parameter already exists: " + name);
        auto p = std::make_unique<Parameter>();
        p->name = name;
        p->value = std::move(init);
        p->value.set_requires_grad(true);
        Parameter& ref = *p;
        by_name_.emplace(name, params_.size());
        params_.push_back(std::move(p));
        return ref;
    }

    bool contains(const std::string& name) const { return by_name_.count(name) != 0; }

    Parameter& get(const std::string& name) {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw ContractError("no such parameter: " + name);
        return *params_[it->second];
    }
    const Parameter& get(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw ContractError("no such parameter: " + name);
        return *params_[it->second];
    }

    const std::vector<std::unique_ptr<Parameter>>& entries() const { return params_; }
    std::vector<std::unique_ptr<Parameter>>& entries() { return params_; }

    size_t size() const { return params_.size(); }

    size_t total_numel() const {
        size_t n = 0;
        for (const auto& p : params_) n += p->value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

  private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, size_t> by_name_;
};

// Put a parameter on a tape; backward() accumulates into p.grad. A parameter
// may be bound several times on one tape, each binding adds its own share.
// No-grad tapes take the value only, so evaluation never needs zero_grad.
inline Var use(Tape& tape, Parameter& p) {
    if (!tape.grad_enabled()) return tape.leaf(p.value, false);
    if (p.grad.size() != p.value.numel())
        throw ContractError("parameter " + p.name + " has no gradient buffer (zero_grad not called)");
    return tape.leaf_bound(p.value, &p.grad);
}

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

// Decoupled weight decay: decay is applied directly to the value, not mixed
// into the moment estimates. Gradients are left untouched for the caller.
inline void adamw_step(ParamStore& store, const AdamWConfig& cfg) {
    if (!(cfg.lr >= 0.0) || !(cfg.eps > 0.0) || cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 ||
        cfg.beta2 >= 1.0)
        throw ConfigError("adamw_step: invalid hyperparameters");
    std::string missing;
    for (const auto& p : store.entries()) {
        if (p->grad.size() != p->value.numel()) {
            if (!missing.empty()) missing += ", ";
            missing += p->name;
        }
    }
    if (!missing.empty()) throw ContractError("adamw_step: gradients missing for: " + missing);

    for (auto& p : store.entries()) {
        const size_t n = p->value.numel();
        if (p->m.size() != n) p->m.assign(n, 0.0);
        if (p->v.size() != n) p->v.assign(n, 0.0);
        p->step += 1;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p->step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p->step));
        for (size_t i = 0; i < n; ++i) {
            const double g = p->grad[i];
            if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient in " + p->name);
            p->m[i] = cfg.beta1 * p->m[i] + (1.0 - cfg.beta1) * g;
            p->v[i] = cfg.beta2 * p->v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = p->m[i] / bc1;
            const double vhat = p->v[i] / bc2;
            p->value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps) + cfg.lr * cfg.weight_decay * p->value[i];
        }
    }
}

}  // namespace moetrack
