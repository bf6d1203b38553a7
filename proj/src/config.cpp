#include "advlab/config.hpp"

#include <fstream>
#include <set>

namespace advlab::config {

using nlohmann::json;

namespace {

void require_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw std::runtime_error("config: '" + where + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw std::runtime_error("config: unknown key '" + where + (where.empty() ? "" : ".") + it.key() + "'");
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

toy::ConceptLabel RunConfig::erased_label() const {
    auto label = toy::ConceptLabel::parse(erase.concept_text);
    if (!label) throw std::runtime_error("config: erase.concept_text is not a known 'COLOR SHAPE' label: " + erase.concept_text);
    return *label;
}

eval::AsrConfig RunConfig::asr_config() const {
    eval::AsrConfig c;
    c.attack = eval.attack;
    c.attack.n_samples = eval.samples_per_prompt;
    c.attack.guidance_weight = eval.guidance_weight;
    c.n_prompts = eval.n_prompts;
    c.success_threshold = eval.success_threshold;
    c.heldout_image_seed = eval.heldout_image_seed;
    return c;
}

trainer::SuiteEvalConfig RunConfig::suite_eval_config() const {
    trainer::SuiteEvalConfig c;
    c.asr = asr_config();
    c.fd_sample_count = eval.fd_sample_count;
    c.alignment_samples = eval.alignment_samples;
    c.guidance_weight = eval.guidance_weight;
    return c;
}

json RunConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["run_root"] = run_root;
    j["dataset"] = {{"n_per_class", dataset.n_per_class}, {"seed", dataset.seed}};
    j["encoder"] = {{"d_model", encoder.d_model}, {"n_layers", encoder.n_layers}, {"n_heads", encoder.n_heads},
                    {"max_len", encoder.max_len}, {"ff_mult", encoder.ff_mult}};
    j["unet"] = {{"base_channels", unet.base_channels}, {"mid_channels", unet.mid_channels},
                 {"cond_dim", unet.cond_dim},         {"time_dim", unet.time_dim},
                 {"cond_hidden", unet.cond_hidden},   {"groups", unet.groups}};
    j["schedule"] = {{"T", schedule_T}, {"beta_start", beta_start}, {"beta_end", beta_end}};
    j["base_train"] = {{"steps", base_train.steps},
                       {"batch_size", base_train.batch_size},
                       {"learning_rate", base_train.learning_rate},
                       {"cond_dropout_rate", base_train.cond_dropout_rate},
                       {"freeze_encoder_from", freeze_encoder_from}};
    j["gates"] = {{"oracle_accuracy", gates.oracle_accuracy},
                  {"sample_accuracy", gates.sample_accuracy},
                  {"samples_per_class", gates.samples_per_class},
                  {"guidance_weight", gates.guidance_weight}};
    j["erase"] = {{"concept", erase.concept_text}, {"eta", erase.eta}};
    j["retain"] = {{"target_size", retain.target_size}};
    j["unlearn"] = unlearn.to_json();
    j["eval"] = {{"n_prompts", eval.n_prompts},
                 {"samples_per_prompt", eval.samples_per_prompt},
                 {"success_threshold", eval.success_threshold},
                 {"guidance_weight", eval.guidance_weight},
                 {"fd_sample_count", eval.fd_sample_count},
                 {"alignment_samples", eval.alignment_samples},
                 {"nominal_prompts", eval.nominal_prompts},
                 {"heldout_image_seed", eval.heldout_image_seed},
                 {"attack",
                  {{"token_budget", eval.attack.token_budget},
                   {"iterations", eval.attack.iterations},
                   {"learning_rate", eval.attack.learning_rate},
                   {"timestep_pool", eval.attack.timestep_pool},
                   {"init_scale", eval.attack.init_scale}}}};
    j["paths"] = {{"base_checkpoint", paths.base_checkpoint},
                  {"oracle_checkpoint", paths.oracle_checkpoint},
                  {"model_checkpoint", paths.model_checkpoint},
                  {"encoder_checkpoint", paths.encoder_checkpoint},
                  {"foreign_checkpoint", paths.foreign_checkpoint}};
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    require_keys(j, "", {"seed", "run_root", "dataset", "encoder", "unet", "schedule", "base_train", "gates", "erase",
                         "retain", "unlearn", "eval", "paths"});
    maybe(j, "seed", c.seed);
    maybe(j, "run_root", c.run_root);
    if (j.contains("dataset")) {
        require_keys(j["dataset"], "dataset", {"n_per_class", "seed"});
        maybe(j["dataset"], "n_per_class", c.dataset.n_per_class);
        maybe(j["dataset"], "seed", c.dataset.seed);
    }
    if (j.contains("encoder")) {
        require_keys(j["encoder"], "encoder", {"d_model", "n_layers", "n_heads", "max_len", "ff_mult"});
        maybe(j["encoder"], "d_model", c.encoder.d_model);
        maybe(j["encoder"], "n_layers", c.encoder.n_layers);
        maybe(j["encoder"], "n_heads", c.encoder.n_heads);
        maybe(j["encoder"], "max_len", c.encoder.max_len);
        maybe(j["encoder"], "ff_mult", c.encoder.ff_mult);
    }
    if (j.contains("unet")) {
        require_keys(j["unet"], "unet",
                     {"base_channels", "mid_channels", "cond_dim", "time_dim", "cond_hidden", "groups"});
        maybe(j["unet"], "base_channels", c.unet.base_channels);
        maybe(j["unet"], "mid_channels", c.unet.mid_channels);
        maybe(j["unet"], "cond_dim", c.unet.cond_dim);
        maybe(j["unet"], "time_dim", c.unet.time_dim);
        maybe(j["unet"], "cond_hidden", c.unet.cond_hidden);
        maybe(j["unet"], "groups", c.unet.groups);
    }
    if (j.contains("schedule")) {
        require_keys(j["schedule"], "schedule", {"T", "beta_start", "beta_end"});
        maybe(j["schedule"], "T", c.schedule_T);
        maybe(j["schedule"], "beta_start", c.beta_start);
        maybe(j["schedule"], "beta_end", c.beta_end);
    }
    if (j.contains("base_train")) {
        require_keys(j["base_train"], "base_train",
                     {"steps", "batch_size", "learning_rate", "cond_dropout_rate", "freeze_encoder_from"});
        maybe(j["base_train"], "steps", c.base_train.steps);
        maybe(j["base_train"], "batch_size", c.base_train.batch_size);
        maybe(j["base_train"], "learning_rate", c.base_train.learning_rate);
        maybe(j["base_train"], "cond_dropout_rate", c.base_train.cond_dropout_rate);
        maybe(j["base_train"], "freeze_encoder_from", c.freeze_encoder_from);
    }
    if (j.contains("gates")) {
        require_keys(j["gates"], "gates",
                     {"oracle_accuracy", "sample_accuracy", "samples_per_class", "guidance_weight"});
        maybe(j["gates"], "oracle_accuracy", c.gates.oracle_accuracy);
        maybe(j["gates"], "sample_accuracy", c.gates.sample_accuracy);
        maybe(j["gates"], "samples_per_class", c.gates.samples_per_class);
        maybe(j["gates"], "guidance_weight", c.gates.guidance_weight);
    }
    if (j.contains("erase")) {
        require_keys(j["erase"], "erase", {"concept", "eta"});
        maybe(j["erase"], "concept", c.erase.concept_text);
        maybe(j["erase"], "eta", c.erase.eta);
    }
    if (j.contains("retain")) {
        require_keys(j["retain"], "retain", {"target_size"});
        maybe(j["retain"], "target_size", c.retain.target_size);
    }
    if (j.contains("unlearn")) {
        // UnlearnConfig::from_json requires every field; fill over defaults.
        json u = c.unlearn.to_json();
        require_keys(j["unlearn"], "unlearn",
                     {"variant", "iterations", "retain_batch_size", "gamma", "eta", "learning_rate", "attack",
                      "trainable", "encoder_first_n", "erase_state_batch", "bank_size", "bank_guidance_weight",
                      "checkpoint_every"});
        for (auto it = j["unlearn"].begin(); it != j["unlearn"].end(); ++it) {
            if (it.key() == "attack") {
                require_keys(*it, "unlearn.attack",
                             {"strategy", "token_budget", "steps", "step_size", "optimizer", "timestep_samples",
                              "init_scale", "resample_states"});
                for (auto at = it->begin(); at != it->end(); ++at) u["attack"][at.key()] = at.value();
            } else {
                u[it.key()] = it.value();
            }
        }
        c.unlearn = trainer::UnlearnConfig::from_json(u);
    }
    if (j.contains("eval")) {
        require_keys(j["eval"], "eval",
                     {"n_prompts", "samples_per_prompt", "success_threshold", "guidance_weight", "fd_sample_count",
                      "alignment_samples", "nominal_prompts", "heldout_image_seed", "attack"});
        maybe(j["eval"], "n_prompts", c.eval.n_prompts);
        maybe(j["eval"], "samples_per_prompt", c.eval.samples_per_prompt);
        maybe(j["eval"], "success_threshold", c.eval.success_threshold);
        maybe(j["eval"], "guidance_weight", c.eval.guidance_weight);
        maybe(j["eval"], "fd_sample_count", c.eval.fd_sample_count);
        maybe(j["eval"], "alignment_samples", c.eval.alignment_samples);
        maybe(j["eval"], "nominal_prompts", c.eval.nominal_prompts);
        maybe(j["eval"], "heldout_image_seed", c.eval.heldout_image_seed);
        if (j["eval"].contains("attack")) {
            require_keys(j["eval"]["attack"], "eval.attack",
                         {"token_budget", "iterations", "learning_rate", "timestep_pool", "init_scale"});
            maybe(j["eval"]["attack"], "token_budget", c.eval.attack.token_budget);
            maybe(j["eval"]["attack"], "iterations", c.eval.attack.iterations);
            maybe(j["eval"]["attack"], "learning_rate", c.eval.attack.learning_rate);
            maybe(j["eval"]["attack"], "timestep_pool", c.eval.attack.timestep_pool);
            maybe(j["eval"]["attack"], "init_scale", c.eval.attack.init_scale);
        }
    }
    if (j.contains("paths")) {
        require_keys(j["paths"], "paths",
                     {"base_checkpoint", "oracle_checkpoint", "model_checkpoint", "encoder_checkpoint",
                      "foreign_checkpoint"});
        maybe(j["paths"], "base_checkpoint", c.paths.base_checkpoint);
        maybe(j["paths"], "oracle_checkpoint", c.paths.oracle_checkpoint);
        maybe(j["paths"], "model_checkpoint", c.paths.model_checkpoint);
        maybe(j["paths"], "encoder_checkpoint", c.paths.encoder_checkpoint);
        maybe(j["paths"], "foreign_checkpoint", c.paths.foreign_checkpoint);
    }
    c.erased_label();  // validates the concept string
    return c;
}

RunConfig load_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("config: cannot open " + file.string());
    json j = json::parse(in);
    return RunConfig::from_json(j);
}

void save_config(const RunConfig& cfg, const std::filesystem::path& file) {
    std::filesystem::create_directories(file.parent_path().empty() ? "." : file.parent_path());
    std::ofstream out(file);
    out << cfg.to_json().dump(2) << "\n";
}

uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(cfg.to_json().dump()); }

}  // namespace advlab::config
