// advlab: adversarial unlearning laboratory for a toy conditional diffusion
// model. Subcommands cover base training, unlearning variants, attacks,
// evaluation, plug-in transfer, the layer sweep and the variant suite.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "advlab/config.hpp"

namespace fs = std::filesystem;
using namespace advlab;

namespace {

fs::path make_run_dir(const config::RunConfig& cfg, const std::string& command) {
    const char* env_root = std::getenv("ADVLAB_RUN_ROOT");
    fs::path root = env_root ? fs::path(env_root) : fs::path(cfg.run_root);
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", std::gmtime(&t));
    fs::path dir = root / (command + "-" + stamp);
    for (int suffix = 1; fs::exists(dir); ++suffix)
        dir = root / (command + "-" + std::string(stamp) + "-" + std::to_string(suffix));
    fs::create_directories(dir);
    return dir;
}

config::RunConfig load_and_snapshot(const std::string& config_path, const fs::path& run_dir) {
    auto cfg = config::load_config(config_path);
    config::save_config(cfg, run_dir / "config.json");
    return cfg;
}

diffusion::ModelF build_fresh_model(const config::RunConfig& cfg, const toy::PromptGrammar& grammar, uint64_t seed) {
    diffusion::ModelF model;
    auto ec = cfg.encoder;
    ec.vocab_size = grammar.vocab_size();
    model.encoder = text::EncoderStack<float>(ec, grammar.hash(), seed);
    model.denoiser = diffusion::UNet<float>(cfg.unet, splitmix64(seed ^ 0xdeu));
    model.schedule = diffusion::NoiseSchedule::linear(cfg.schedule_T, cfg.beta_start, cfg.beta_end);
    model.init_seed = seed;
    return model;
}

diffusion::ModelF load_required_model(const std::string& path, const std::string& what) {
    if (path.empty()) throw std::runtime_error("missing input: " + what + " (set it in config paths)");
    if (!fs::exists(path)) throw std::runtime_error("missing input: " + what + " not found at " + path);
    return diffusion::load_model_checkpoint(path);
}

eval::OracleClassifier load_required_oracle(const std::string& path) {
    if (path.empty()) throw std::runtime_error("missing input: oracle_checkpoint (set it in config paths)");
    if (!fs::exists(path)) throw std::runtime_error("missing input: oracle checkpoint not found at " + path);
    return eval::OracleClassifier::load(path);
}

objectives::RetainSet make_retain_set(const config::RunConfig& cfg, const toy::PromptGrammar& grammar) {
    const auto erased = cfg.erased_label();
    std::vector<toy::ConceptLabel> words;
    for (const auto& l : toy::all_labels())
        if (!(l == erased)) words.push_back(l);
    return objectives::build_retain_set(words, grammar, objectives::keyword_judge(erased), cfg.retain.target_size,
                                        "toy_grammar", "keyword_v1", erased.str());
}

int cmd_train_base(const std::string& config_path) {
    const auto cfg_probe = config::load_config(config_path);
    const auto run_dir = make_run_dir(cfg_probe, "train-base");
    const auto cfg = load_and_snapshot(config_path, run_dir);
    std::printf("run dir: %s\n", run_dir.string().c_str());

    auto grammar = toy::PromptGrammar::standard();
    auto data = toy::build_dataset(cfg.dataset.n_per_class, toy::all_labels(), cfg.dataset.seed, grammar);
    toy::export_dataset(data, run_dir / "dataset");

    auto model = build_fresh_model(cfg, grammar, cfg.seed);
    auto train_cfg = cfg.base_train;
    if (!cfg.freeze_encoder_from.empty()) {
        auto donor = load_required_model(cfg.freeze_encoder_from, "freeze_encoder_from checkpoint");
        model.encoder = donor.encoder.clone();
        train_cfg.freeze_encoder = true;
        std::printf("encoder fixed from %s; training denoiser only\n", cfg.freeze_encoder_from.c_str());
    }

    std::printf("training base model: %d steps, batch %d\n", train_cfg.steps, train_cfg.batch_size);
    auto losses = diffusion::train_base_model(model, data, grammar, train_cfg, cfg.seed);

    std::printf("training oracle classifier\n");
    auto oracle = eval::train_oracle(data, splitmix64(cfg.seed ^ 0x04ac1eULL));
    const double oracle_acc = eval::oracle_holdout_accuracy(oracle, data);

    std::printf("sampling gate: %d guided samples per class at w=%.1f\n", cfg.gates.samples_per_class,
                cfg.gates.guidance_weight);
    int correct = 0, total = 0;
    nlohmann::json per_class;
    for (const auto& label : toy::all_labels()) {
        auto imgs = diffusion::sample_cfg(model, grammar.make_prompt(label, 0), grammar, cfg.gates.guidance_weight,
                                          splitmix64(cfg.seed ^ (0x9a7eULL + static_cast<uint64_t>(label.index()))),
                                          cfg.gates.samples_per_class);
        int hit = 0;
        for (const auto& img : imgs) hit += oracle.predict(img) == label.index() ? 1 : 0;
        per_class[label.str()] = static_cast<double>(hit) / cfg.gates.samples_per_class;
        correct += hit;
        total += cfg.gates.samples_per_class;
        std::printf("  %-14s %.3f\n", label.str().c_str(), static_cast<double>(hit) / cfg.gates.samples_per_class);
    }
    const double sample_acc = static_cast<double>(correct) / total;

    diffusion::save_model_checkpoint(model, run_dir / "base.ckpt");
    oracle.save(run_dir / "oracle.ckpt");

    nlohmann::json report;
    report["seed"] = cfg.seed;
    report["final_losses"] = std::vector<float>(losses.end() - std::min<size_t>(losses.size(), 50), losses.end());
    report["oracle_holdout_accuracy"] = oracle_acc;
    report["sample_accuracy"] = sample_acc;
    report["sample_accuracy_per_class"] = per_class;
    report["model_hash"] = model.state_hash();
    report["config_hash"] = config::config_hash(cfg);
    std::ofstream(run_dir / "report.json") << report.dump(2) << "\n";

    const bool pass = oracle_acc >= cfg.gates.oracle_accuracy && sample_acc >= cfg.gates.sample_accuracy;
    std::printf("oracle holdout accuracy: %.4f (gate %.2f)\n", oracle_acc, cfg.gates.oracle_accuracy);
    std::printf("guided sample accuracy:  %.4f (gate %.2f)\n", sample_acc, cfg.gates.sample_accuracy);
    if (!pass) {
        std::fprintf(stderr,
                     "gate failure. Remediation: raise base_train.steps or unet channels, or lower "
                     "gates.sample_accuracy for exploratory runs.\n");
        return 2;
    }
    std::printf("base checkpoint: %s\n", (run_dir / "base.ckpt").string().c_str());
    return 0;
}

int cmd_unlearn(const std::string& config_path, const std::string& variant_flag) {
    const auto cfg_probe = config::load_config(config_path);
    const auto run_dir = make_run_dir(cfg_probe, "unlearn");
    auto cfg = load_and_snapshot(config_path, run_dir);
    std::printf("run dir: %s\n", run_dir.string().c_str());

    if (!variant_flag.empty()) {
        auto v = trainer::parse_variant(variant_flag);
        if (!v) throw std::runtime_error("unknown variant: " + variant_flag);
        cfg.unlearn.variant = *v;
        config::save_config(cfg, run_dir / "config.json");
    }

    auto grammar = toy::PromptGrammar::standard();
    auto base = load_required_model(cfg.paths.base_checkpoint, "base_checkpoint");
    auto erasure = objectives::ErasureConfig::standard(cfg.erased_label(), grammar, cfg.erase.eta);
    auto retain = make_retain_set(cfg, grammar);
    objectives::save_retain_set(retain, run_dir / "retain_set.txt", grammar);

    const auto effective = cfg.unlearn.normalized();
    std::printf("variant %s: I=%d K=%d gamma=%.2f eta=%.2f trainable=%s\n", trainer::to_string(cfg.unlearn.variant),
                effective.iterations, cfg.unlearn.variant == trainer::Variant::vanilla_esd ? 0 : effective.attack.steps,
                effective.gamma, effective.eta, diffusion::to_string(effective.trainable));
    auto res = trainer::advunlearn(base, cfg.unlearn, erasure, retain, grammar, cfg.seed, run_dir);
    std::printf("final model hash: %llu\n", static_cast<unsigned long long>(res.manifest.final_model_hash));
    std::printf("mean attack seconds/iter: %.3f\n", res.manifest.mean_attack_seconds());
    return 0;
}

int cmd_attack(const std::string& config_path) {
    const auto cfg_probe = config::load_config(config_path);
    const auto run_dir = make_run_dir(cfg_probe, "attack");
    const auto cfg = load_and_snapshot(config_path, run_dir);

    auto grammar = toy::PromptGrammar::standard();
    auto model = load_required_model(cfg.paths.model_checkpoint, "model_checkpoint");
    auto oracle = load_required_oracle(cfg.paths.oracle_checkpoint);

    std::vector<adversary::AttackTranscript> transcripts;
    const double asr = eval::evaluate_asr(model, oracle, cfg.erased_label(), grammar, cfg.asr_config(), cfg.seed,
                                          nullptr, &transcripts);
    adversary::save_transcripts(transcripts, run_dir / "transcripts.jsonl");
    nlohmann::json out;
    out["asr"] = asr;
    out["n_prompts"] = cfg.eval.n_prompts;
    out["config_hash"] = config::config_hash(cfg);
    std::ofstream(run_dir / "attack_report.json") << out.dump(2) << "\n";
    std::printf("asr: %.4f over %d prompts (transcripts: %s)\n", asr, cfg.eval.n_prompts,
                (run_dir / "transcripts.jsonl").string().c_str());
    return 0;
}

int cmd_eval(const std::string& config_path) {
    const auto cfg_probe = config::load_config(config_path);
    const auto run_dir = make_run_dir(cfg_probe, "eval");
    const auto cfg = load_and_snapshot(config_path, run_dir);

    auto grammar = toy::PromptGrammar::standard();
    auto model = load_required_model(cfg.paths.model_checkpoint, "model_checkpoint");
    auto base = load_required_model(cfg.paths.base_checkpoint, "base_checkpoint");
    auto oracle = load_required_oracle(cfg.paths.oracle_checkpoint);
    const auto erased = cfg.erased_label();

    eval::MetricsReport report;
    auto t0 = std::chrono::steady_clock::now();
    report.asr = eval::evaluate_asr(model, oracle, erased, grammar, cfg.asr_config(), cfg.seed);
    report.timing_seconds["asr"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    auto prompts = eval::benign_prompts(grammar, erased);
    report.alignment = eval::alignment_score(model, oracle, prompts, grammar, cfg.eval.alignment_samples,
                                             cfg.eval.guidance_weight, splitmix64(cfg.seed ^ 0xa11aULL));
    auto reference = eval::sample_benign_set(base, grammar, erased, cfg.eval.fd_sample_count,
                                             cfg.eval.guidance_weight, splitmix64(cfg.seed ^ 0xba5eULL));
    auto set = eval::sample_benign_set(model, grammar, erased, cfg.eval.fd_sample_count, cfg.eval.guidance_weight,
                                       splitmix64(cfg.seed ^ 0x5e7ULL));
    report.fd = eval::frechet_feature_distance(oracle, set, reference);
    const double nominal = eval::nominal_erased_rate(model, oracle, erased, grammar, cfg.eval.nominal_prompts,
                                                     cfg.eval.samples_per_prompt, cfg.eval.guidance_weight,
                                                     splitmix64(cfg.seed ^ 0x40e1ULL));
    report.provenance["config_hash"] = config::config_hash(cfg);
    report.provenance["seed"] = cfg.seed;
    report.provenance["fd_feature_space"] = "oracle_v1";
    report.provenance["model_hash"] = model.state_hash();
    report.provenance["nominal_erased_rate"] = nominal;

    std::ofstream(run_dir / "metrics.json") << report.to_json().dump(2) << "\n";
    std::ofstream csv(run_dir / "metrics.csv");
    csv << "asr,fd,alignment,nominal_erased_rate\n"
        << report.asr << "," << report.fd << "," << report.alignment << "," << nominal << "\n";
    std::printf("asr=%.4f fd=%.4f alignment=%.4f nominal_erased_rate=%.4f\n", report.asr, report.fd, report.alignment,
                nominal);
    return 0;
}

int cmd_transfer(const std::string& config_path) {
    const auto cfg_probe = config::load_config(config_path);
    const auto run_dir = make_run_dir(cfg_probe, "transfer");
    const auto cfg = load_and_snapshot(config_path, run_dir);

    auto grammar = toy::PromptGrammar::standard();
    if (cfg.paths.encoder_checkpoint.empty() || !fs::exists(cfg.paths.encoder_checkpoint))
        throw std::runtime_error("missing input: encoder_checkpoint");
    auto encoder = text::load_encoder_checkpoint(cfg.paths.encoder_checkpoint);
    auto foreign = load_required_model(cfg.paths.foreign_checkpoint, "foreign_checkpoint");
    auto base = load_required_model(cfg.paths.base_checkpoint, "base_checkpoint");
    auto oracle = load_required_oracle(cfg.paths.oracle_checkpoint);
    const auto erased = cfg.erased_label();

    auto reference = eval::sample_benign_set(base, grammar, erased, cfg.eval.fd_sample_count,
                                             cfg.eval.guidance_weight, splitmix64(cfg.seed ^ 0xba5eULL));
    auto pair = eval::transfer_eval(encoder, foreign, oracle, erased, grammar, cfg.asr_config(), reference,
                                    cfg.eval.fd_sample_count, cfg.eval.alignment_samples, cfg.eval.guidance_weight,
                                    cfg.seed);
    nlohmann::json out;
    out["original"] = pair.original.to_json();
    out["transferred"] = pair.transferred.to_json();
    out["config_hash"] = config::config_hash(cfg);
    std::ofstream(run_dir / "transfer_report.json") << out.dump(2) << "\n";
    std::printf("original:    asr=%.4f fd=%.4f alignment=%.4f\n", pair.original.asr, pair.original.fd,
                pair.original.alignment);
    std::printf("transferred: asr=%.4f fd=%.4f alignment=%.4f\n", pair.transferred.asr, pair.transferred.fd,
                pair.transferred.alignment);
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& layers_csv) {
    const auto cfg_probe = config::load_config(config_path);
    const auto run_dir = make_run_dir(cfg_probe, "sweep");
    const auto cfg = load_and_snapshot(config_path, run_dir);

    std::vector<int> layers;
    std::stringstream ss(layers_csv);
    for (std::string item; std::getline(ss, item, ',');) layers.push_back(std::stoi(item));
    if (layers.empty()) throw std::runtime_error("sweep: --layers list is empty");

    auto grammar = toy::PromptGrammar::standard();
    auto base = load_required_model(cfg.paths.base_checkpoint, "base_checkpoint");
    auto oracle = load_required_oracle(cfg.paths.oracle_checkpoint);
    auto erasure = objectives::ErasureConfig::standard(cfg.erased_label(), grammar, cfg.erase.eta);
    auto retain = make_retain_set(cfg, grammar);

    auto rows = trainer::layer_sweep(base, cfg.unlearn, erasure, retain, grammar, oracle, cfg.suite_eval_config(),
                                     layers, cfg.seed, run_dir);
    for (const auto& r : rows) std::printf("N=%d asr=%.4f alignment=%.4f\n", r.first_n, r.asr, r.alignment);
    std::printf("sweep csv: %s\n", (run_dir / "sweep.csv").string().c_str());
    return 0;
}

int cmd_suite(const std::string& config_path) {
    const auto cfg_probe = config::load_config(config_path);
    const auto run_dir = make_run_dir(cfg_probe, "suite");
    const auto cfg = load_and_snapshot(config_path, run_dir);

    auto grammar = toy::PromptGrammar::standard();
    auto base = load_required_model(cfg.paths.base_checkpoint, "base_checkpoint");
    auto oracle = load_required_oracle(cfg.paths.oracle_checkpoint);
    auto erasure = objectives::ErasureConfig::standard(cfg.erased_label(), grammar, cfg.erase.eta);
    auto retain = make_retain_set(cfg, grammar);

    auto result = trainer::run_variant_suite(base, cfg.unlearn, erasure, retain, grammar, oracle,
                                             cfg.suite_eval_config(), cfg.seed, run_dir);
    std::printf("%-18s %8s %10s %10s %14s\n", "variant", "asr", "fd", "alignment", "attack s/iter");
    for (const auto& r : result.rows)
        std::printf("%-18s %8.4f %10.4f %10.4f %14.4f\n", r.name.c_str(), r.report.asr, r.report.fd,
                    r.report.alignment, r.attack_seconds_per_iter);
    std::printf("suite csv: %s\n", (run_dir / "suite.csv").string().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adversarial unlearning laboratory for a toy conditional diffusion model"};
    app.require_subcommand(1);

    std::string config_path, variant, layers = "0,1,2,3,4";

    auto* train = app.add_subcommand("train-base", "train the base diffusion model and the oracle classifier");
    train->add_option("--config", config_path, "run config JSON")->required();

    auto* unlearn = app.add_subcommand("unlearn", "run a concept-erasure variant against a base checkpoint");
    unlearn->add_option("--config", config_path, "run config JSON")->required();
    unlearn->add_option("--variant", variant, "vanilla_esd | at_esd | advunlearn | advunlearn_fast");

    auto* attack = app.add_subcommand("attack", "run the test-time attack and export transcripts");
    attack->add_option("--config", config_path, "run config JSON")->required();

    auto* evalc = app.add_subcommand("eval", "evaluate ASR / feature-Frechet / alignment for a checkpoint");
    evalc->add_option("--config", config_path, "run config JSON")->required();

    auto* transfer = app.add_subcommand("transfer", "plug an unlearned encoder into a foreign model and compare");
    transfer->add_option("--config", config_path, "run config JSON")->required();

    auto* sweep = app.add_subcommand("sweep", "first-N trainable-layer ablation");
    sweep->add_option("--config", config_path, "run config JSON")->required();
    sweep->add_option("--layers", layers, "comma-separated N values (default 0,1,2,3,4)");

    auto* suite = app.add_subcommand("suite", "variant comparison table under one seed");
    suite->add_option("--config", config_path, "run config JSON")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train_base(config_path);
        if (unlearn->parsed()) return cmd_unlearn(config_path, variant);
        if (attack->parsed()) return cmd_attack(config_path);
        if (evalc->parsed()) return cmd_eval(config_path);
        if (transfer->parsed()) return cmd_transfer(config_path);
        if (sweep->parsed()) return cmd_sweep(config_path, layers);
        if (suite->parsed()) return cmd_suite(config_path);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
