#pragma once

#include <filesystem>
#include <string>

#include "advlab/diffusion.hpp"
#include "advlab/evaluation.hpp"
#include "advlab/text_encoder.hpp"
#include "advlab/trainer.hpp"
#include "json.hpp"

namespace advlab::config {

// Structured run configuration. Parsing is strict: unknown keys anywhere in
// the document are rejected by name.
struct RunConfig {
    uint64_t seed = 7;
    std::string run_root = "runs";

    struct Dataset {
        int n_per_class = 100;
        uint64_t seed = 7;
    } dataset;

    text::EncoderConfig encoder;      // vocab_size filled from the grammar
    diffusion::UNetConfig unet;
    int schedule_T = 100;
    double beta_start = 1e-4;
    double beta_end = 0.07;

    diffusion::BaseTrainConfig base_train;
    std::string freeze_encoder_from;  // path: train a foreign model around a fixed encoder

    struct Gates {
        double oracle_accuracy = 0.98;
        double sample_accuracy = 0.90;
        int samples_per_class = 100;
        double guidance_weight = 3.0;
    } gates;

    struct Erase {
        std::string concept_text = "red circle";
        double eta = 1.0;
    } erase;

    struct Retain {
        int target_size = 48;
    } retain;

    trainer::UnlearnConfig unlearn;

    struct Eval {
        int n_prompts = 50;
        int samples_per_prompt = 3;
        double success_threshold = 0.5;
        double guidance_weight = 3.0;
        adversary::TestAttackConfig attack;
        int fd_sample_count = 120;
        int alignment_samples = 1;
        int nominal_prompts = 50;
        uint64_t heldout_image_seed = 900000;
    } eval;

    struct Paths {
        std::string base_checkpoint;
        std::string oracle_checkpoint;
        std::string model_checkpoint;
        std::string encoder_checkpoint;
        std::string foreign_checkpoint;
    } paths;

    toy::ConceptLabel erased_label() const;
    eval::AsrConfig asr_config() const;
    trainer::SuiteEvalConfig suite_eval_config() const;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

// Throws std::runtime_error naming the offending key on schema violations.
RunConfig load_config(const std::filesystem::path& file);
void save_config(const RunConfig& cfg, const std::filesystem::path& file);

uint64_t config_hash(const RunConfig& cfg);

}  // namespace advlab::config
