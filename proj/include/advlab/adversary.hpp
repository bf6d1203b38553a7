#pragma once

#include <optional>
#include <string>
#include <vector>

#include "advlab/objectives.hpp"

namespace advlab::adversary {

using diffusion::DiffusionModel;
using objectives::StateBatch;

enum class Strategy { prefix, add, replace };

inline const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::prefix: return "prefix";
        case Strategy::add: return "add";
        case Strategy::replace: return "replace";
    }
    return "?";
}

std::optional<Strategy> parse_strategy(const std::string& s);

// N adversarial token embeddings acting on the clean prompt embedding.
template <typename T>
struct Perturbation {
    Tensor<T> delta;  // [N, d]
    Strategy strategy = Strategy::prefix;
};

struct AttackConfig {
    Strategy strategy = Strategy::prefix;
    int token_budget = 3;   // N
    int steps = 30;         // K
    double step_size = 1e-3;
    OptimizerKind optimizer = OptimizerKind::plain_gd;
    int timestep_samples = 1;     // states per loss evaluation
    double init_scale = 1e-3;     // stddev of the Gaussian delta_0
    bool resample_states = true;  // false: one fixed pool for all steps

    void validate() const {
        if (steps < 1) throw std::invalid_argument("AttackConfig: K must be >= 1");
        if (step_size <= 0) throw std::invalid_argument("AttackConfig: step size must be > 0");
        if (token_budget < 1) throw std::invalid_argument("AttackConfig: token budget must be >= 1");
    }
};

// prefix: delta rows prepended; add: elementwise sum (N must equal the clean
// length); replace: the output is delta alone (N pinned to the clean length).
template <typename T>
Tensor<T> apply_strategy(const Tensor<T>& clean_emb, const Perturbation<T>& pert) {
    const int s = clean_emb.dim(0);
    const int n = pert.delta.dim(0);
    if (clean_emb.dim(1) != pert.delta.dim(1)) throw std::invalid_argument("apply_strategy: embedding dim mismatch");
    switch (pert.strategy) {
        case Strategy::prefix:
            return concat_rows(pert.delta, clean_emb);
        case Strategy::add:
            if (n != s) throw std::invalid_argument("apply_strategy: add needs N == clean token count");
            return add(clean_emb, pert.delta);
        case Strategy::replace:
            if (n != s) throw std::invalid_argument("apply_strategy: replace needs N == clean token count");
            return scale(pert.delta, T(1));
    }
    throw std::logic_error("apply_strategy: bad strategy");
}

// Eq.-(4) training-attack loss: || eps_theta(x_t|c') - eps_theta_o(x_t|c) ||^2
// with the frozen-model target detached.
template <typename T>
Tensor<T> attack_loss(const DiffusionModel<T>& model, const DiffusionModel<T>& frozen, const StateBatch<T>& st,
                      const Tensor<T>& perturbed_cond, const Tensor<T>& clean_cond_frozen) {
    Tensor<T> target;
    {
        NoGradGuard ng;
        target = detach(denoise_predict(frozen, st.x_t, st.ts, clean_cond_frozen));
    }
    auto pred = denoise_predict(model, st.x_t, st.ts, perturbed_cond);
    return mse(pred, target);
}

// delta = delta_0 - alpha * sign(grad), elementwise; sign(0) = 0.
template <typename T>
Perturbation<T> fgsm_step(const Perturbation<T>& delta0, const Tensor<T>& grad, double alpha) {
    if (grad.shape() != delta0.delta.shape()) throw std::invalid_argument("fgsm_step: shape mismatch");
    Perturbation<T> out{delta0.delta.clone_detached(), delta0.strategy};
    const T a = static_cast<T>(alpha);
    for (int64_t i = 0; i < grad.size(); ++i)
        out.delta.data()[i] -= a * Optimizer<T>::sign(grad.data()[i]);
    return out;
}

template <typename T>
struct AttackResult {
    Perturbation<T> pert;
    std::vector<double> loss_trajectory;  // one entry per attack step
};

// Scoped full freeze of the model parameters so attack backprop reaches only
// delta; restores the previous trainability mask on exit.
template <typename T>
class FreezeScope {
public:
    explicit FreezeScope(DiffusionModel<T>& model) : model_(model) {
        for (auto& p : model_.params()) {
            saved_.push_back(p.tensor->requires_grad());
            p.tensor->set_requires_grad(false);
        }
    }
    ~FreezeScope() {
        auto params = model_.params();
        for (size_t i = 0; i < params.size(); ++i) params[i].tensor->set_requires_grad(saved_[i]);
    }

private:
    DiffusionModel<T>& model_;
    std::vector<bool> saved_;
};

// Lower-level problem of the bi-level formulation: K optimizer steps on the
// Eq.-(4) loss over a Gaussian-initialized delta. States are forward-diffused
// bank images; trajectories and the final delta are returned.
template <typename T>
AttackResult<T> multi_step_attack(DiffusionModel<T>& model, const DiffusionModel<T>& frozen,
                                  const toy::TokenSequence& clean_prompt, const std::vector<toy::Image>& x0_bank,
                                  const AttackConfig& cfg, uint64_t seed) {
    cfg.validate();
    FreezeScope<T> freeze(model);

    const int d = model.encoder.config().d_model;
    Tensor<T> clean_emb;
    Tensor<T> clean_cond_frozen;
    {
        NoGradGuard ng;
        clean_emb = model.encoder.embed(clean_prompt);
        clean_cond_frozen = frozen.encoder.encode_tokens_pooled(clean_prompt);
    }
    const int n = cfg.strategy == Strategy::prefix ? cfg.token_budget : clean_emb.dim(0);

    RngStream init_rng(seed, "attack_init");
    Perturbation<T> pert{Tensor<T>::randn({n, d}, init_rng, static_cast<T>(cfg.init_scale)), cfg.strategy};

    RngStream pool_rng(seed, "attack_states");
    std::optional<StateBatch<T>> fixed_pool;
    if (!cfg.resample_states)
        fixed_pool = objectives::sample_states<T>(x0_bank, model.schedule, cfg.timestep_samples, pool_rng,
                                                  model.denoiser.config().image_size);

    Optimizer<T> adamw(OptimizerKind::adamw, static_cast<T>(cfg.step_size), T(0.9), T(0.999), T(1e-8), T(0.01));
    AttackResult<T> result;
    result.pert.strategy = cfg.strategy;

    for (int k = 0; k < cfg.steps; ++k) {
        StateBatch<T> st = fixed_pool ? *fixed_pool
                                      : objectives::sample_states<T>(x0_bank, model.schedule, cfg.timestep_samples,
                                                                     pool_rng, model.denoiser.config().image_size);
        pert.delta.set_requires_grad(true);
        pert.delta.zero_grad();
        auto emb = apply_strategy(clean_emb, pert);
        auto cond = model.encoder.encode_pooled(emb);
        auto loss = attack_loss(model, frozen, st, cond, clean_cond_frozen);
        const double lv = static_cast<double>(loss.data()[0]);
        if (!std::isfinite(lv))
            throw std::runtime_error("multi_step_attack: non-finite loss at step " + std::to_string(k));
        result.loss_trajectory.push_back(lv);
        backward(loss);

        auto grad = Tensor<T>::from_vector(pert.delta.shape(), pert.delta.grad());
        pert.delta.set_requires_grad(false);
        switch (cfg.optimizer) {
            case OptimizerKind::plain_gd: {
                const T a = static_cast<T>(cfg.step_size);
                for (int64_t i = 0; i < grad.size(); ++i) pert.delta.data()[i] -= a * grad.data()[i];
                break;
            }
            case OptimizerKind::sign_gd:
                pert = fgsm_step(pert, grad, cfg.step_size);
                break;
            case OptimizerKind::adam:
            case OptimizerKind::adamw: {
                pert.delta.set_requires_grad(true);
                ParamList<T> dp{{"delta", &pert.delta}};
                adamw.step(dp);
                pert.delta.set_requires_grad(false);
                break;
            }
        }
    }
    result.pert.delta = pert.delta.clone_detached();
    return result;
}

// ---- test-time attack (diffusion-classifier objective) ----

// States carrying their own noise draws: the test attack targets the true
// eps, not any model output, so it needs no auxiliary model.
template <typename T>
struct NoisyStates {
    Tensor<T> x_t;
    std::vector<int> ts;
    Tensor<T> eps;
};

template <typename T>
NoisyStates<T> diffuse_target_image(const toy::Image& x0, const diffusion::NoiseSchedule& sched, int count,
                                    RngStream& rng) {
    NoisyStates<T> st;
    st.x_t = Tensor<T>::zeros({count, 3, toy::kImageSize, toy::kImageSize});
    st.eps = Tensor<T>::randn({count, 3, toy::kImageSize, toy::kImageSize}, rng);
    st.ts.resize(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        const int t = rng.uniform_int(1, sched.T);
        st.ts[static_cast<size_t>(i)] = t;
        const T a = static_cast<T>(std::sqrt(sched.alpha_bar(t)));
        const T s = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(t)));
        for (int j = 0; j < toy::kImagePixels; ++j) {
            const size_t ix = static_cast<size_t>(i) * toy::kImagePixels + static_cast<size_t>(j);
            const T v = static_cast<T>(x0.chw[static_cast<size_t>(j)]) * T(2) - T(1);
            st.x_t.data()[ix] = a * v + s * st.eps.data()[ix];
        }
    }
    return st;
}

// Standard denoising loss on a held-out target image under the perturbed
// prompt. Shares no target-term code with attack_loss above by construction.
template <typename T>
Tensor<T> denoising_attack_loss(const DiffusionModel<T>& model, const NoisyStates<T>& st, const Tensor<T>& cond) {
    auto pred = denoise_predict(model, st.x_t, st.ts, cond);
    return mse(pred, st.eps);
}

struct TestAttackConfig {
    int token_budget = 3;
    int iterations = 40;
    double learning_rate = 0.01;
    int timestep_pool = 50;  // sampled once per attack
    double init_scale = 1e-3;
    int n_samples = 3;          // images sampled under the attacked prompt
    double guidance_weight = 3.0;
};

template <typename T>
struct TestAttackResult {
    Perturbation<T> pert;
    std::vector<double> loss_trajectory;
    std::vector<toy::Image> samples;
};

// Implemented for float in src/adversary.cpp (needs the sampler).
TestAttackResult<float> test_attack(diffusion::ModelF& model, const toy::Image& x0_target,
                                    const toy::TokenSequence& clean_prompt, const toy::PromptGrammar& grammar,
                                    const TestAttackConfig& cfg, uint64_t seed);

// Attack transcript rows exported as JSON lines for the evaluation module.
struct AttackTranscript {
    uint64_t seed = 0;
    std::string prompt;
    std::vector<double> loss_trajectory;
    double final_delta_norm = 0;
    bool success = false;
};

void save_transcripts(const std::vector<AttackTranscript>& rows, const std::filesystem::path& file);

}  // namespace advlab::adversary
