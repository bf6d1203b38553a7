#include "advlab/adversary.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace advlab::adversary {

std::optional<Strategy> parse_strategy(const std::string& s) {
    if (s == "prefix") return Strategy::prefix;
    if (s == "add") return Strategy::add;
    if (s == "replace") return Strategy::replace;
    return std::nullopt;
}

TestAttackResult<float> test_attack(diffusion::ModelF& model, const toy::Image& x0_target,
                                    const toy::TokenSequence& clean_prompt, const toy::PromptGrammar& grammar,
                                    const TestAttackConfig& cfg, uint64_t seed) {
    FreezeScope<float> freeze(model);

    Tensor<float> clean_emb;
    {
        NoGradGuard ng;
        clean_emb = model.encoder.embed(clean_prompt);
    }
    const int d = model.encoder.config().d_model;

    RngStream pool_rng(seed, "test_attack_pool");
    auto pool = diffuse_target_image<float>(x0_target, model.schedule, cfg.timestep_pool, pool_rng);

    RngStream init_rng(seed, "test_attack_init");
    Perturbation<float> pert{Tensor<float>::randn({cfg.token_budget, d}, init_rng, static_cast<float>(cfg.init_scale)),
                             Strategy::prefix};

    Optimizer<float> opt(OptimizerKind::adamw, static_cast<float>(cfg.learning_rate), 0.9f, 0.999f, 1e-8f, 0.01f);
    TestAttackResult<float> result;
    result.pert.strategy = Strategy::prefix;

    for (int k = 0; k < cfg.iterations; ++k) {
        pert.delta.set_requires_grad(true);
        pert.delta.zero_grad();
        auto cond = model.encoder.encode_pooled(apply_strategy(clean_emb, pert));
        auto loss = denoising_attack_loss(model, pool, cond);
        const double lv = static_cast<double>(loss.data()[0]);
        if (!std::isfinite(lv)) throw std::runtime_error("test_attack: non-finite loss at iteration " + std::to_string(k));
        result.loss_trajectory.push_back(lv);
        backward(loss);
        ParamList<float> dp{{"delta", &pert.delta}};
        opt.step(dp);
        pert.delta.set_requires_grad(false);
    }

    result.pert.delta = pert.delta.clone_detached();
    Tensor<float> final_cond;
    {
        NoGradGuard ng;
        final_cond = model.encoder.encode_pooled(apply_strategy(clean_emb, result.pert));
    }
    result.samples = diffusion::sample_cfg_with_cond(model, final_cond, grammar, cfg.guidance_weight,
                                                     splitmix64(seed ^ 0x7e57a77acull), cfg.n_samples);
    return result;
}

void save_transcripts(const std::vector<AttackTranscript>& rows, const std::filesystem::path& file) {
    std::ofstream out(file);
    if (!out) throw std::runtime_error("save_transcripts: cannot open " + file.string());
    for (const auto& r : rows) {
        nlohmann::json j;
        j["seed"] = r.seed;
        j["prompt"] = r.prompt;
        j["loss_trajectory"] = r.loss_trajectory;
        j["final_delta_norm"] = r.final_delta_norm;
        j["success"] = r.success;
        out << j.dump() << "\n";
    }
}

}  // namespace advlab::adversary
