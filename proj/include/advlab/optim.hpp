#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "advlab/tensor.hpp"

namespace advlab {

// Named handle onto a module parameter. Modules expose their parameters as a
// flat list; trainability is driven through requires_grad on the tensor, so a
// frozen block neither accumulates grads nor receives optimizer updates.
template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* tensor;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

template <typename T>
void zero_grads(const ParamList<T>& params) {
    for (const auto& p : params)
        if (p.tensor->requires_grad()) p.tensor->zero_grad();
}

template <typename T>
uint64_t hash_params(const ParamList<T>& params) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : params) {
        h = fnv1a64(p.name, h);
        h = fnv1a64_bytes(p.tensor->data(), static_cast<size_t>(p.tensor->size()) * sizeof(T), h);
    }
    return h;
}

enum class OptimizerKind { plain_gd, sign_gd, adam, adamw };

inline const char* to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::plain_gd: return "plain_gd";
        case OptimizerKind::sign_gd: return "sign_gd";
        case OptimizerKind::adam: return "adam";
        case OptimizerKind::adamw: return "adamw";
    }
    return "?";
}

// One optimizer instance per training run; moment buffers are keyed by
// parameter name so the parameter list may be rebuilt between calls.
template <typename T>
class Optimizer {
public:
    Optimizer(OptimizerKind kind, T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8), T weight_decay = T(0))
        : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    OptimizerKind kind() const { return kind_; }
    T learning_rate() const { return lr_; }

    void step(const ParamList<T>& params) {
        ++t_;
        for (const auto& p : params) {
            if (!p.tensor->requires_grad()) continue;
            auto& val = p.tensor->values();
            const auto& g = p.tensor->grad();
            if (g.empty()) continue;
            switch (kind_) {
                case OptimizerKind::plain_gd:
                    for (size_t i = 0; i < val.size(); ++i) val[i] -= lr_ * g[i];
                    break;
                case OptimizerKind::sign_gd:
                    for (size_t i = 0; i < val.size(); ++i) val[i] -= lr_ * sign(g[i]);
                    break;
                case OptimizerKind::adam:
                case OptimizerKind::adamw: {
                    auto& st = state_[p.name];
                    if (st.m.size() != val.size()) {
                        st.m.assign(val.size(), T(0));
                        st.v.assign(val.size(), T(0));
                    }
                    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
                    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
                    for (size_t i = 0; i < val.size(); ++i) {
                        st.m[i] = beta1_ * st.m[i] + (T(1) - beta1_) * g[i];
                        st.v[i] = beta2_ * st.v[i] + (T(1) - beta2_) * g[i] * g[i];
                        const T mhat = st.m[i] / bc1;
                        const T vhat = st.v[i] / bc2;
                        if (kind_ == OptimizerKind::adamw && weight_decay_ != T(0)) val[i] -= lr_ * weight_decay_ * val[i];
                        val[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
                    }
                    break;
                }
            }
        }
    }

    static T sign(T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); }

private:
    struct Moments {
        std::vector<T> m, v;
    };
    OptimizerKind kind_;
    T lr_, beta1_, beta2_, eps_, weight_decay_;
    int64_t t_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace advlab
