#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "advlab/adversary.hpp"
#include "advlab/evaluation.hpp"
#include "advlab/objectives.hpp"
#include "json.hpp"

namespace advlab::trainer {

enum class Variant { vanilla_esd, at_esd, advunlearn, advunlearn_fast };

const char* to_string(Variant v);
std::optional<Variant> parse_variant(const std::string& s);

struct UnlearnConfig {
    Variant variant = Variant::advunlearn;
    int iterations = 400;        // I
    int retain_batch_size = 5;   // b
    double gamma = 0.3;
    double eta = 1.0;
    double learning_rate = 1e-4;  // defender step size (Adam)
    adversary::AttackConfig attack;
    diffusion::TrainableModule trainable = diffusion::TrainableModule::text_encoder;
    int encoder_first_n = 4;   // N when the text encoder is selected
    int erase_state_batch = 4;  // diffusion states per ESD evaluation
    int bank_size = 64;         // erased-concept images sampled from theta_o
    double bank_guidance_weight = 3.0;
    int checkpoint_every = 0;  // 0 = final only

    void validate() const;

    // Variant semantics folded into the fields: vanilla has no attack and no
    // regularizer, AT-ESD drops the regularizer, the fast variant runs
    // one-step FGSM.
    UnlearnConfig normalized() const;

    nlohmann::json to_json() const;
    static UnlearnConfig from_json(const nlohmann::json& j);
};

struct IterationLog {
    int iteration = 0;
    double unlearn_loss = 0;
    double retain_loss = 0;
    std::vector<double> attack_trajectory;
    double attack_seconds = 0;
    double defense_seconds = 0;
};

struct RunManifest {
    nlohmann::json config;
    uint64_t seed = 0;
    std::vector<IterationLog> iterations;
    uint64_t frozen_hash = 0;
    uint64_t final_model_hash = 0;
    std::vector<std::string> checkpoint_paths;

    double mean_attack_seconds() const;
    void write(const std::filesystem::path& dir) const;
};

struct UnlearnResult {
    diffusion::ModelF model;
    RunManifest manifest;
};

// Algorithm-1 loop: per iteration, adversarial prompt generation (skipped for
// vanilla ESD) followed by one defender step on the utility-regularized
// unlearning objective. run_dir, when set, receives config.json,
// manifest.jsonl and checkpoints.
UnlearnResult advunlearn(const diffusion::ModelF& base, const UnlearnConfig& cfg,
                         const objectives::ErasureConfig& erasure, const objectives::RetainSet& retain,
                         const toy::PromptGrammar& grammar, uint64_t seed,
                         const std::filesystem::path& run_dir = {},
                         const std::vector<toy::Image>* bank_override = nullptr);

// Pre-sampling of the erased-concept image bank from theta_o (exposed so the
// variant suite can share one bank across runs).
std::vector<toy::Image> sample_concept_bank(const diffusion::ModelF& base, const objectives::ErasureConfig& erasure,
                                            const toy::PromptGrammar& grammar, int bank_size, double guidance_weight,
                                            uint64_t seed);

struct SuiteEvalConfig {
    eval::AsrConfig asr;
    int fd_sample_count = 120;
    int alignment_samples = 1;
    double guidance_weight = 3.0;
};

struct SuiteRow {
    std::string name;  // variant or "no_unlearning"
    eval::MetricsReport report;
    double attack_seconds_per_iter = 0;
    uint64_t model_hash = 0;
};

struct SuiteResult {
    std::vector<SuiteRow> rows;
    const SuiteRow& row(const std::string& name) const;
    void write_csv(const std::filesystem::path& file) const;
};

// Tab.-3-shaped comparison: {no unlearning, vanilla ESD, AT-ESD, AdvUnlearn,
// AdvUnlearn-fast} under one seed and one shared config.
SuiteResult run_variant_suite(const diffusion::ModelF& base, const UnlearnConfig& shared_cfg,
                              const objectives::ErasureConfig& erasure, const objectives::RetainSet& retain,
                              const toy::PromptGrammar& grammar, const eval::OracleClassifier& oracle,
                              const SuiteEvalConfig& eval_cfg, uint64_t seed,
                              const std::filesystem::path& run_dir = {});

struct SweepRow {
    int first_n = 0;
    double asr = 0;
    double alignment = 0;
    uint64_t model_hash = 0;
};

// First-N trainable-layer ablation; reports ASR and alignment per N without
// asserting a direction.
std::vector<SweepRow> layer_sweep(const diffusion::ModelF& base, const UnlearnConfig& cfg,
                                  const objectives::ErasureConfig& erasure, const objectives::RetainSet& retain,
                                  const toy::PromptGrammar& grammar, const eval::OracleClassifier& oracle,
                                  const SuiteEvalConfig& eval_cfg, const std::vector<int>& n_values, uint64_t seed,
                                  const std::filesystem::path& run_dir = {});

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& file);

}  // namespace advlab::trainer
