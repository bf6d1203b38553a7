#include "advlab/trainer.hpp"

#include <chrono>
#include <fstream>

namespace advlab::trainer {

using Clock = std::chrono::steady_clock;

namespace {
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }
}  // namespace

const char* to_string(Variant v) {
    switch (v) {
        case Variant::vanilla_esd: return "vanilla_esd";
        case Variant::at_esd: return "at_esd";
        case Variant::advunlearn: return "advunlearn";
        case Variant::advunlearn_fast: return "advunlearn_fast";
    }
    return "?";
}

std::optional<Variant> parse_variant(const std::string& s) {
    if (s == "vanilla_esd") return Variant::vanilla_esd;
    if (s == "at_esd") return Variant::at_esd;
    if (s == "advunlearn") return Variant::advunlearn;
    if (s == "advunlearn_fast") return Variant::advunlearn_fast;
    return std::nullopt;
}

void UnlearnConfig::validate() const {
    if (iterations < 1) throw std::invalid_argument("UnlearnConfig: iterations must be >= 1");
    if (gamma < 0) throw std::invalid_argument("UnlearnConfig: gamma must be >= 0");
    if (eta < 0) throw std::invalid_argument("UnlearnConfig: eta must be >= 0");
    if (gamma > 0 && retain_batch_size < 1)
        throw std::invalid_argument("UnlearnConfig: retain batch size must be >= 1 when gamma > 0");
    if (variant != Variant::vanilla_esd) attack.validate();
    if (variant == Variant::at_esd && attack.steps < 2)
        throw std::invalid_argument("UnlearnConfig: at_esd requires K > 1");
}

UnlearnConfig UnlearnConfig::normalized() const {
    UnlearnConfig c = *this;
    switch (variant) {
        case Variant::vanilla_esd:
            c.gamma = 0.0;
            break;
        case Variant::at_esd:
            c.gamma = 0.0;
            break;
        case Variant::advunlearn:
            break;
        case Variant::advunlearn_fast:
            c.attack.steps = 1;
            c.attack.optimizer = OptimizerKind::sign_gd;
            break;
    }
    return c;
}

nlohmann::json UnlearnConfig::to_json() const {
    nlohmann::json a;
    a["strategy"] = adversary::to_string(attack.strategy);
    a["token_budget"] = attack.token_budget;
    a["steps"] = attack.steps;
    a["step_size"] = attack.step_size;
    a["optimizer"] = advlab::to_string(attack.optimizer);
    a["timestep_samples"] = attack.timestep_samples;
    a["init_scale"] = attack.init_scale;
    a["resample_states"] = attack.resample_states;
    nlohmann::json j;
    j["variant"] = to_string(variant);
    j["iterations"] = iterations;
    j["retain_batch_size"] = retain_batch_size;
    j["gamma"] = gamma;
    j["eta"] = eta;
    j["learning_rate"] = learning_rate;
    j["attack"] = a;
    j["trainable"] = diffusion::to_string(trainable);
    j["encoder_first_n"] = encoder_first_n;
    j["erase_state_batch"] = erase_state_batch;
    j["bank_size"] = bank_size;
    j["bank_guidance_weight"] = bank_guidance_weight;
    j["checkpoint_every"] = checkpoint_every;
    return j;
}

UnlearnConfig UnlearnConfig::from_json(const nlohmann::json& j) {
    UnlearnConfig c;
    auto v = parse_variant(j.at("variant").get<std::string>());
    if (!v) throw std::invalid_argument("UnlearnConfig: unknown variant");
    c.variant = *v;
    c.iterations = j.at("iterations").get<int>();
    c.retain_batch_size = j.at("retain_batch_size").get<int>();
    c.gamma = j.at("gamma").get<double>();
    c.eta = j.at("eta").get<double>();
    c.learning_rate = j.at("learning_rate").get<double>();
    const auto& a = j.at("attack");
    auto strat = adversary::parse_strategy(a.at("strategy").get<std::string>());
    if (!strat) throw std::invalid_argument("UnlearnConfig: unknown attack strategy");
    c.attack.strategy = *strat;
    c.attack.token_budget = a.at("token_budget").get<int>();
    c.attack.steps = a.at("steps").get<int>();
    c.attack.step_size = a.at("step_size").get<double>();
    const std::string opt = a.at("optimizer").get<std::string>();
    if (opt == "plain_gd") c.attack.optimizer = OptimizerKind::plain_gd;
    else if (opt == "sign_gd") c.attack.optimizer = OptimizerKind::sign_gd;
    else if (opt == "adam") c.attack.optimizer = OptimizerKind::adam;
    else if (opt == "adamw") c.attack.optimizer = OptimizerKind::adamw;
    else throw std::invalid_argument("UnlearnConfig: unknown attack optimizer");
    c.attack.timestep_samples = a.at("timestep_samples").get<int>();
    c.attack.init_scale = a.at("init_scale").get<double>();
    c.attack.resample_states = a.at("resample_states").get<bool>();
    c.trainable = j.at("trainable").get<std::string>() == "text_encoder" ? diffusion::TrainableModule::text_encoder
                                                                         : diffusion::TrainableModule::denoiser;
    c.encoder_first_n = j.at("encoder_first_n").get<int>();
    c.erase_state_batch = j.at("erase_state_batch").get<int>();
    c.bank_size = j.at("bank_size").get<int>();
    c.bank_guidance_weight = j.at("bank_guidance_weight").get<double>();
    c.checkpoint_every = j.at("checkpoint_every").get<int>();
    return c;
}

double RunManifest::mean_attack_seconds() const {
    if (iterations.empty()) return 0;
    double acc = 0;
    for (const auto& it : iterations) acc += it.attack_seconds;
    return acc / static_cast<double>(iterations.size());
}

void RunManifest::write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    {
        nlohmann::json meta;
        meta["config"] = config;
        meta["seed"] = seed;
        meta["frozen_hash"] = frozen_hash;
        meta["final_model_hash"] = final_model_hash;
        meta["checkpoints"] = checkpoint_paths;
        std::ofstream out(dir / "config.json");
        out << meta.dump(2) << "\n";
    }
    std::ofstream out(dir / "manifest.jsonl");
    for (const auto& it : iterations) {
        nlohmann::json j;
        j["iteration"] = it.iteration;
        j["unlearn_loss"] = it.unlearn_loss;
        j["retain_loss"] = it.retain_loss;
        j["attack_trajectory"] = it.attack_trajectory;
        j["attack_seconds"] = it.attack_seconds;
        j["defense_seconds"] = it.defense_seconds;
        out << j.dump() << "\n";
    }
}

std::vector<toy::Image> sample_concept_bank(const diffusion::ModelF& base, const objectives::ErasureConfig& erasure,
                                            const toy::PromptGrammar& grammar, int bank_size, double guidance_weight,
                                            uint64_t seed) {
    std::vector<toy::Image> bank;
    int i = 0;
    while (static_cast<int>(bank.size()) < bank_size) {
        const auto& prompt = erasure.erase_prompts[static_cast<size_t>(i) % erasure.erase_prompts.size()];
        auto imgs = diffusion::sample_cfg(base, prompt, grammar, guidance_weight,
                                          splitmix64(seed ^ (0xba9cULL + static_cast<uint64_t>(i))), 1);
        bank.push_back(imgs[0]);
        ++i;
    }
    return bank;
}

UnlearnResult advunlearn(const diffusion::ModelF& base, const UnlearnConfig& raw_cfg,
                         const objectives::ErasureConfig& erasure, const objectives::RetainSet& retain,
                         const toy::PromptGrammar& grammar, uint64_t seed, const std::filesystem::path& run_dir,
                         const std::vector<toy::Image>* bank_override) {
    const UnlearnConfig cfg = raw_cfg.normalized();
    cfg.validate();
    erasure.validate(grammar);
    if (cfg.gamma > 0 && retain.prompts.empty()) throw std::invalid_argument("advunlearn: empty retain set");

    UnlearnResult res;
    res.model = base.clone_weights();
    diffusion::snapshot_frozen(res.model);
    res.model.select_trainable(cfg.trainable, cfg.encoder_first_n);
    const auto& frozen = *res.model.frozen;

    res.manifest.config = cfg.to_json();
    res.manifest.seed = seed;
    res.manifest.frozen_hash = const_cast<diffusion::ModelF&>(frozen).state_hash();

    std::vector<toy::Image> bank = bank_override ? *bank_override
                                                 : sample_concept_bank(frozen, erasure, grammar, cfg.bank_size,
                                                                       cfg.bank_guidance_weight, seed);

    Tensor<float> cond_null_frozen, frozen_conds_by_prompt_dummy;
    {
        NoGradGuard ng;
        cond_null_frozen = frozen.encoder.encode_tokens_pooled(grammar.empty_prompt());
    }

    Optimizer<float> opt(OptimizerKind::adam, static_cast<float>(cfg.learning_rate));
    auto params = res.model.params();

    const bool with_attack = cfg.variant != Variant::vanilla_esd;
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        IterationLog log;
        log.iteration = iter;

        RngStream prompt_rng(seed, "unlearn_prompt", static_cast<uint64_t>(iter));
        const auto& erase_prompt = erasure.erase_prompts[prompt_rng.uniform_index(erasure.erase_prompts.size())];

        // Stage 1: adversarial prompt generation (delta re-randomized per
        // iteration, as in the per-iteration random init of Algorithm 1).
        adversary::AttackResult<float> attack;
        auto t_attack = Clock::now();
        if (with_attack) {
            attack = adversary::multi_step_attack(res.model, frozen, erase_prompt, bank, cfg.attack,
                                                  splitmix64(seed ^ splitmix64(0xa77ac4ULL + static_cast<uint64_t>(iter))));
            log.attack_trajectory = attack.loss_trajectory;
        }
        log.attack_seconds = seconds_since(t_attack);

        // Stage 2: defender step on the utility-regularized objective.
        auto t_def = Clock::now();
        RngStream state_rng(seed, "unlearn_states", static_cast<uint64_t>(iter));
        auto states = objectives::sample_states<float>(bank, res.model.schedule, cfg.erase_state_batch, state_rng);

        Tensor<float> cond_e_frozen;
        {
            NoGradGuard ng;
            cond_e_frozen = frozen.encoder.encode_tokens_pooled(erase_prompt);
        }
        Tensor<float> adv_cond;
        if (with_attack)
            adv_cond = res.model.encoder.encode_pooled(
                adversary::apply_strategy(res.model.encoder.embed(erase_prompt), attack.pert));
        else
            adv_cond = res.model.encoder.encode_tokens_pooled(erase_prompt);

        objectives::RetainBatch<float> retain_batch;
        if (cfg.gamma > 0) {
            RngStream retain_rng(seed, "unlearn_retain", static_cast<uint64_t>(iter));
            retain_batch = objectives::sample_retain_batch<float>(retain, res.model.schedule, cfg.retain_batch_size,
                                                                  retain_rng);
            auto rl = objectives::retain_loss(res.model, frozen, retain_batch);
            log.retain_loss = rl.data()[0];
        }

        auto loss = objectives::unlearn_objective(res.model, frozen, states, adv_cond, cond_e_frozen,
                                                  cond_null_frozen, retain_batch, cfg.eta, cfg.gamma);
        log.unlearn_loss = loss.data()[0];
        if (!std::isfinite(log.unlearn_loss))
            throw std::runtime_error("advunlearn: non-finite loss at iteration " + std::to_string(iter));

        zero_grads(params);
        backward(loss);
        opt.step(params);
        log.defense_seconds = seconds_since(t_def);
        res.manifest.iterations.push_back(std::move(log));

        if (!run_dir.empty() && cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0) {
            const auto path = run_dir / ("checkpoint_" + std::to_string(iter + 1) + ".ckpt");
            diffusion::save_model_checkpoint(res.model, path);
            res.manifest.checkpoint_paths.push_back(path.string());
        }
    }

    res.manifest.final_model_hash = res.model.state_hash();
    if (res.manifest.frozen_hash != const_cast<diffusion::ModelF&>(frozen).state_hash())
        throw std::logic_error("advunlearn: frozen snapshot mutated during the run");

    if (!run_dir.empty()) {
        const auto final_path = run_dir / "final.ckpt";
        diffusion::save_model_checkpoint(res.model, final_path);
        res.manifest.checkpoint_paths.push_back(final_path.string());
        const auto enc_path = run_dir / "encoder_final.ckpt";
        text::save_encoder_checkpoint(res.model.encoder, enc_path);
        res.manifest.checkpoint_paths.push_back(enc_path.string());
        res.manifest.write(run_dir);
    }
    return res;
}

const SuiteRow& SuiteResult::row(const std::string& name) const {
    for (const auto& r : rows)
        if (r.name == name) return r;
    throw std::out_of_range("suite: no row named " + name);
}

void SuiteResult::write_csv(const std::filesystem::path& file) const {
    std::ofstream out(file);
    out << "name,asr,fd,alignment,attack_seconds_per_iter,model_hash\n";
    for (const auto& r : rows)
        out << r.name << "," << r.report.asr << "," << r.report.fd << "," << r.report.alignment << ","
            << r.attack_seconds_per_iter << "," << r.model_hash << "\n";
}

SuiteResult run_variant_suite(const diffusion::ModelF& base, const UnlearnConfig& shared_cfg,
                              const objectives::ErasureConfig& erasure, const objectives::RetainSet& retain,
                              const toy::PromptGrammar& grammar, const eval::OracleClassifier& oracle,
                              const SuiteEvalConfig& eval_cfg, uint64_t seed, const std::filesystem::path& run_dir) {
    SuiteResult result;
    auto bank = sample_concept_bank(base, erasure, grammar, shared_cfg.bank_size, shared_cfg.bank_guidance_weight,
                                    seed);
    auto reference_set = eval::sample_benign_set(base, grammar, erasure.erase_concept, eval_cfg.fd_sample_count,
                                                 eval_cfg.guidance_weight, splitmix64(seed ^ 0x4ef5e7ULL));
    auto prompts = eval::benign_prompts(grammar, erasure.erase_concept);

    auto evaluate = [&](diffusion::ModelF& model, const std::string& name, double atk_secs) {
        SuiteRow row;
        row.name = name;
        auto t0 = Clock::now();
        row.report.asr = eval::evaluate_asr(model, oracle, erasure.erase_concept, grammar, eval_cfg.asr,
                                            splitmix64(seed ^ fnv1a64(name)));
        row.report.timing_seconds["asr_eval"] = seconds_since(t0);
        row.report.alignment = eval::alignment_score(model, oracle, prompts, grammar, eval_cfg.alignment_samples,
                                                     eval_cfg.guidance_weight, splitmix64(seed ^ fnv1a64(name + "_a")));
        auto set = eval::sample_benign_set(model, grammar, erasure.erase_concept, eval_cfg.fd_sample_count,
                                           eval_cfg.guidance_weight, splitmix64(seed ^ fnv1a64(name + "_s")));
        row.report.fd = eval::frechet_feature_distance(oracle, set, reference_set);
        row.report.provenance["variant"] = name;
        row.report.provenance["seed"] = seed;
        row.report.provenance["fd_feature_space"] = "oracle_v1";
        row.attack_seconds_per_iter = atk_secs;
        row.model_hash = model.state_hash();
        result.rows.push_back(row);
    };

    {
        auto copy = base.clone_weights();
        evaluate(copy, "no_unlearning", 0);
    }
    for (Variant v : {Variant::vanilla_esd, Variant::at_esd, Variant::advunlearn, Variant::advunlearn_fast}) {
        UnlearnConfig cfg = shared_cfg;
        cfg.variant = v;
        const auto dir = run_dir.empty() ? std::filesystem::path{} : run_dir / to_string(v);
        auto res = advunlearn(base, cfg, erasure, retain, grammar, seed, dir, &bank);
        evaluate(res.model, to_string(v), res.manifest.mean_attack_seconds());
    }
    if (!run_dir.empty()) {
        std::filesystem::create_directories(run_dir);
        result.write_csv(run_dir / "suite.csv");
    }
    return result;
}

std::vector<SweepRow> layer_sweep(const diffusion::ModelF& base, const UnlearnConfig& cfg,
                                  const objectives::ErasureConfig& erasure, const objectives::RetainSet& retain,
                                  const toy::PromptGrammar& grammar, const eval::OracleClassifier& oracle,
                                  const SuiteEvalConfig& eval_cfg, const std::vector<int>& n_values, uint64_t seed,
                                  const std::filesystem::path& run_dir) {
    std::vector<SweepRow> rows;
    auto bank = sample_concept_bank(base, erasure, grammar, cfg.bank_size, cfg.bank_guidance_weight, seed);
    auto prompts = eval::benign_prompts(grammar, erasure.erase_concept);
    for (int n : n_values) {
        UnlearnConfig c = cfg;
        c.trainable = diffusion::TrainableModule::text_encoder;
        c.encoder_first_n = n;
        auto res = advunlearn(base, c, erasure, retain, grammar, seed,
                              run_dir.empty() ? std::filesystem::path{} : run_dir / ("n" + std::to_string(n)), &bank);
        SweepRow row;
        row.first_n = n;
        row.asr = eval::evaluate_asr(res.model, oracle, erasure.erase_concept, grammar, eval_cfg.asr,
                                     splitmix64(seed ^ (0x1a7e5ULL + static_cast<uint64_t>(n))));
        row.alignment = eval::alignment_score(res.model, oracle, prompts, grammar, eval_cfg.alignment_samples,
                                              eval_cfg.guidance_weight,
                                              splitmix64(seed ^ (0xa119ULL + static_cast<uint64_t>(n))));
        row.model_hash = res.model.state_hash();
        rows.push_back(row);
    }
    if (!run_dir.empty()) write_sweep_csv(rows, run_dir / "sweep.csv");
    return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& file) {
    std::filesystem::create_directories(file.parent_path().empty() ? "." : file.parent_path());
    std::ofstream out(file);
    out << "first_n,asr,alignment,model_hash\n";
    for (const auto& r : rows) out << r.first_n << "," << r.asr << "," << r.alignment << "," << r.model_hash << "\n";
}

}  // namespace advlab::trainer
