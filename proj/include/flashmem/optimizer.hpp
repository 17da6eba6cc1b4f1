#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "flashmem/common.hpp"
#include "flashmem/tensor.hpp"

namespace flashmem {

template <typename T>
struct OptimizerConfig {
    T learning_rate = T(1e-5);  // conservative default; toy configs override to 1e-3
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0.01);
    T grad_clip = T(0.53);
    T warmup_ratio = T(0.1);
    std::size_t total_steps = 0;
};

/// Linear warmup to the base rate, then cosine decay to zero.
/// step_index is 1-based; lr(total_steps) == 0.
template <typename T>
T lr_at(const OptimizerConfig<T>& cfg, std::size_t step_index) {
    if (cfg.total_steps == 0) throw config_error("lr_at: total_steps must be positive");
    const std::size_t warmup =
        std::max<std::size_t>(1, static_cast<std::size_t>(cfg.warmup_ratio * static_cast<T>(cfg.total_steps)));
    if (step_index <= warmup) return cfg.learning_rate * static_cast<T>(step_index) / static_cast<T>(warmup);
    if (step_index >= cfg.total_steps) return T(0);
    const T progress = static_cast<T>(step_index - warmup) / static_cast<T>(cfg.total_steps - warmup);
    return cfg.learning_rate * T(0.5) * (T(1) + std::cos(T(M_PI) * progress));
}

/// Scales all gradients by c/g when the global L2 norm g exceeds c.
/// Returns the pre-clip norm. Idempotent.
template <typename T>
T clip_global_norm(const std::vector<Parameter<T>*>& params, T c) {
    if (!(c > T(0))) throw config_error("clip_global_norm: clip value must be positive");
    T ss = T(0);
    for (const Parameter<T>* p : params)
        for (T g : p->grad.data) ss += g * g;
    const T norm = std::sqrt(ss);
    if (norm > c) {
        const T s = c / norm;
        for (Parameter<T>* p : params)
            for (T& g : p->grad.data) g *= s;
    }
    return norm;
}

/// AdamW with decoupled weight decay. Holds first/second moment state
/// parallel to the registered parameter list.
template <typename T>
class AdamW {
public:
    explicit AdamW(const std::vector<Parameter<T>*>& params) {
        for (const Parameter<T>* p : params) {
            m_.emplace_back(p->value.size(), T(0));
            v_.emplace_back(p->value.size(), T(0));
        }
    }

    /// One update over the same parameter list the optimizer was built with.
    /// Returns the learning rate that was applied.
    T step(const std::vector<Parameter<T>*>& params, std::size_t step_index, const OptimizerConfig<T>& cfg) {
        if (params.size() != m_.size()) throw contract_error("AdamW::step: parameter list changed");
        if (step_index < 1) throw contract_error("AdamW::step: step_index is 1-based");
        const T lr = lr_at(cfg, step_index);
        const T bc1 = T(1) - std::pow(cfg.beta1, static_cast<T>(step_index));
        const T bc2 = T(1) - std::pow(cfg.beta2, static_cast<T>(step_index));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Parameter<T>& p = *params[i];
            if (!p.trainable) continue;
            for (std::size_t j = 0; j < p.value.size(); ++j) {
                const T g = p.grad.data[j];
                m_[i][j] = cfg.beta1 * m_[i][j] + (T(1) - cfg.beta1) * g;
                v_[i][j] = cfg.beta2 * v_[i][j] + (T(1) - cfg.beta2) * g * g;
                const T mhat = m_[i][j] / bc1;
                const T vhat = v_[i][j] / bc2;
                p.value.data[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.value.data[j]);
            }
        }
        return lr;
    }

private:
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
};

}  // namespace flashmem
