#include "advlab/diffusion.hpp"

#include <sstream>

#include "advlab/serialize.hpp"

namespace advlab::diffusion {

namespace {

// Map [0,1] image pixels into the [-1,1] space the denoiser works in.
Tensor<float> images_to_latent(const std::vector<const toy::Image*>& imgs) {
    const int b = static_cast<int>(imgs.size());
    auto x = Tensor<float>::zeros({b, 3, toy::kImageSize, toy::kImageSize});
    float* p = x.data();
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < toy::kImagePixels; ++j)
            p[static_cast<size_t>(i) * toy::kImagePixels + j] = imgs[static_cast<size_t>(i)]->chw[static_cast<size_t>(j)] * 2.f - 1.f;
    return x;
}

}  // namespace

float base_train_step(ModelF& model, const std::vector<const toy::DatasetItem*>& batch,
                      const toy::PromptGrammar& grammar, double cond_dropout_rate, Optimizer<float>& opt,
                      uint64_t seed, int64_t step_index) {
    if (batch.empty()) throw std::invalid_argument("base_train_step: empty batch");
    const int b = static_cast<int>(batch.size());
    RngStream trng(seed, "base_t", static_cast<uint64_t>(step_index));
    RngStream erng(seed, "base_eps", static_cast<uint64_t>(step_index));
    RngStream drng(seed, "base_drop", static_cast<uint64_t>(step_index));

    std::vector<const toy::Image*> imgs;
    for (const auto* it : batch) imgs.push_back(&it->image);
    auto x0 = images_to_latent(imgs);
    auto eps = Tensor<float>::randn(x0.shape(), erng);
    std::vector<int> ts(static_cast<size_t>(b));
    for (auto& t : ts) t = trng.uniform_int(1, model.schedule.T);

    // per-item closed-form forward marginal
    auto x_t = Tensor<float>::zeros(x0.shape());
    for (int i = 0; i < b; ++i) {
        const float a = static_cast<float>(std::sqrt(model.schedule.alpha_bar(ts[static_cast<size_t>(i)])));
        const float s = static_cast<float>(std::sqrt(1.0 - model.schedule.alpha_bar(ts[static_cast<size_t>(i)])));
        for (int j = 0; j < toy::kImagePixels; ++j) {
            const size_t ix = static_cast<size_t>(i) * toy::kImagePixels + static_cast<size_t>(j);
            x_t.data()[ix] = a * x0.data()[ix] + s * eps.data()[ix];
        }
    }

    Tensor<float> conds;
    const auto empty = grammar.empty_prompt();
    for (int i = 0; i < b; ++i) {
        const bool drop = drng.uniform() < cond_dropout_rate;
        auto c = model.encoder.encode_tokens_pooled(drop ? empty : batch[static_cast<size_t>(i)]->prompt);
        conds = i == 0 ? c : concat_rows(conds, c);
    }

    auto pred = model.denoiser.forward(x_t, ts, conds);
    auto loss = mse(pred, eps);

    auto params = model.params();
    zero_grads(params);
    backward(loss);
    opt.step(params);
    ++model.train_steps;
    return loss.data()[0];
}

std::vector<float> train_base_model(ModelF& model, const toy::Dataset& data, const toy::PromptGrammar& grammar,
                                    const BaseTrainConfig& cfg, uint64_t seed) {
    if (cfg.freeze_encoder)
        model.select_trainable(TrainableModule::denoiser, 0);
    else
        model.train_all();
    Optimizer<float> opt(OptimizerKind::adam, static_cast<float>(cfg.learning_rate));
    std::vector<float> losses;
    losses.reserve(static_cast<size_t>(cfg.steps));
    for (int step = 0; step < cfg.steps; ++step) {
        RngStream brng(seed, "base_batch", static_cast<uint64_t>(step));
        std::vector<const toy::DatasetItem*> batch;
        for (int i = 0; i < cfg.batch_size; ++i)
            batch.push_back(&data.items[brng.uniform_index(data.items.size())]);
        losses.push_back(base_train_step(model, batch, grammar, cfg.cond_dropout_rate, opt, seed, step));
        if (!std::isfinite(losses.back()))
            throw std::runtime_error("train_base_model: non-finite loss at step " + std::to_string(step));
    }
    return losses;
}

std::vector<toy::Image> sample_cfg(const ModelF& model, const toy::TokenSequence& prompt,
                                   const toy::PromptGrammar& grammar, double guidance_weight, uint64_t seed,
                                   int n_samples) {
    NoGradGuard ng;
    const bool is_empty = prompt.ids == grammar.empty_prompt().ids;
    Tensor<float> cond_prompt;
    if (!is_empty) cond_prompt = model.encoder.encode_tokens_pooled(prompt);
    return sample_cfg_with_cond(model, cond_prompt, grammar, guidance_weight, seed, n_samples);
}

std::vector<toy::Image> sample_cfg_with_cond(const ModelF& model, const Tensor<float>& cond,
                                             const toy::PromptGrammar& grammar, double guidance_weight, uint64_t seed,
                                             int n_samples) {
    NoGradGuard ng;
    const auto& sched = model.schedule;
    const int n = n_samples;
    RngStream rng(seed, "sample");

    auto cond_null = model.encoder.encode_tokens_pooled(grammar.empty_prompt());
    Tensor<float> cond_prompt;
    const bool use_guidance = guidance_weight != 0.0 && cond.defined();
    if (use_guidance) cond_prompt = cond.clone_detached();

    auto x = Tensor<float>::randn({n, 3, toy::kImageSize, toy::kImageSize}, rng);
    const float w = static_cast<float>(guidance_weight);
    std::vector<int> ts(static_cast<size_t>(n));
    for (int t = sched.T; t >= 1; --t) {
        std::fill(ts.begin(), ts.end(), t);
        auto eps_null = denoise_predict(model, x, ts, cond_null);
        Tensor<float> eps_hat = eps_null;
        if (use_guidance) {
            auto eps_c = denoise_predict(model, x, ts, cond_prompt);
            eps_hat = add(eps_null, scale(sub(eps_c, eps_null), w));
        }
        const double abar = sched.alpha_bar(t);
        const double abar_prev = sched.alpha_bar(t - 1);
        const double beta = sched.betas[static_cast<size_t>(t)];
        const double alpha = sched.alphas[static_cast<size_t>(t)];
        const float inv_sa = static_cast<float>(1.0 / std::sqrt(abar));
        const float s1m = static_cast<float>(std::sqrt(1.0 - abar));
        // x0_hat clipped to the [-1,1] data range, then the posterior mean
        const float c0 = static_cast<float>(std::sqrt(abar_prev) * beta / (1.0 - abar));
        const float c1 = static_cast<float>(std::sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar));
        const float sigma = static_cast<float>(std::sqrt((1.0 - abar_prev) / (1.0 - abar) * beta));

        auto nx = Tensor<float>::zeros(x.shape());
        for (int64_t i = 0; i < x.size(); ++i) {
            float x0h = (x.data()[i] - s1m * eps_hat.data()[i]) * inv_sa;
            x0h = std::clamp(x0h, -1.f, 1.f);
            nx.data()[i] = t > 1 ? c0 * x0h + c1 * x.data()[i] : x0h;
        }
        if (t > 1)
            for (int64_t i = 0; i < nx.size(); ++i) nx.data()[i] += sigma * static_cast<float>(rng.normal());
        x = nx;
    }

    std::vector<toy::Image> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < toy::kImagePixels; ++j)
            out[static_cast<size_t>(i)].chw[static_cast<size_t>(j)] =
                std::clamp((x.data()[static_cast<size_t>(i) * toy::kImagePixels + j] + 1.f) / 2.f, 0.f, 1.f);
    return out;
}

uint64_t architecture_hash(const ModelF& model) {
    std::ostringstream os;
    const auto& e = model.encoder.config();
    const auto& u = model.denoiser.config();
    os << "enc:" << e.vocab_size << "," << e.d_model << "," << e.n_layers << "," << e.n_heads << "," << e.max_len
       << "," << e.ff_mult << ";unet:" << u.image_size << "," << u.in_channels << "," << u.base_channels << ","
       << u.mid_channels << "," << u.cond_dim << "," << u.time_dim << "," << u.cond_hidden << "," << u.groups
       << ";T:" << model.schedule.T;
    return fnv1a64(os.str());
}

namespace {

nlohmann::json encoder_header(const text::EncoderStack<float>& enc) {
    const auto& c = enc.config();
    return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},       {"max_len", c.max_len},   {"ff_mult", c.ff_mult},
            {"vocab_hash", enc.vocab_hash()}, {"trainable_layers", enc.trainable_layers()}};
}

text::EncoderConfig encoder_config_from(const nlohmann::json& j) {
    text::EncoderConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.ff_mult = j.at("ff_mult").get<int>();
    return c;
}

void append_params(io::Container& c, ParamList<float> params, const std::string& prefix) {
    for (auto& p : params) c.arrays.push_back({prefix + p.name, p.tensor->shape(), p.tensor->values()});
}

void restore_params(const io::Container& c, ParamList<float> params, const std::string& prefix) {
    for (auto& p : params) {
        const auto& a = c.find(prefix + p.name);
        if (a.shape != p.tensor->shape()) throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
        p.tensor->values() = a.data;
    }
}

}  // namespace

void save_model_checkpoint(ModelF& model, const std::filesystem::path& file) {
    io::Container c;
    c.header["kind"] = "diffusion_model";
    c.header["encoder"] = encoder_header(model.encoder);
    const auto& u = model.denoiser.config();
    c.header["unet"] = {{"image_size", u.image_size},   {"in_channels", u.in_channels},
                        {"base_channels", u.base_channels}, {"mid_channels", u.mid_channels},
                        {"cond_dim", u.cond_dim},       {"time_dim", u.time_dim},
                        {"cond_hidden", u.cond_hidden}, {"groups", u.groups}};
    c.header["schedule"] = {{"T", model.schedule.T}, {"betas", model.schedule.betas}};
    c.header["train_steps"] = model.train_steps;
    c.header["rng_root_seed"] = model.init_seed;
    c.header["architecture_hash"] = architecture_hash(model);
    c.header["trainable"] = to_string(model.trainable);
    c.header["encoder_first_n"] = model.encoder_first_n;
    c.header["has_frozen"] = model.frozen != nullptr;

    append_params(c, model.params(), "");
    if (model.frozen) {
        auto fparams = const_cast<ModelF&>(*model.frozen).params();
        append_params(c, fparams, "frozen.");
    }
    save_container(c, file);
}

ModelF load_model_checkpoint(const std::filesystem::path& file) {
    auto c = io::load_container(file);
    if (c.header.at("kind") != "diffusion_model")
        throw std::runtime_error("load_model_checkpoint: wrong container kind in " + file.string());

    ModelF model;
    const auto& ej = c.header.at("encoder");
    model.encoder = text::EncoderStack<float>(encoder_config_from(ej), ej.at("vocab_hash").get<uint64_t>(), 0);
    const auto& uj = c.header.at("unet");
    UNetConfig uc;
    uc.image_size = uj.at("image_size").get<int>();
    uc.in_channels = uj.at("in_channels").get<int>();
    uc.base_channels = uj.at("base_channels").get<int>();
    uc.mid_channels = uj.at("mid_channels").get<int>();
    uc.cond_dim = uj.at("cond_dim").get<int>();
    uc.time_dim = uj.at("time_dim").get<int>();
    uc.cond_hidden = uj.at("cond_hidden").get<int>();
    uc.groups = uj.at("groups").get<int>();
    model.denoiser = UNet<float>(uc, 0);

    model.schedule.T = c.header.at("schedule").at("T").get<int>();
    model.schedule.betas = c.header.at("schedule").at("betas").get<std::vector<double>>();
    model.schedule.alphas.assign(model.schedule.betas.size(), 1.0);
    model.schedule.alpha_bars.assign(model.schedule.betas.size(), 1.0);
    for (int t = 1; t <= model.schedule.T; ++t) {
        model.schedule.alphas[static_cast<size_t>(t)] = 1.0 - model.schedule.betas[static_cast<size_t>(t)];
        model.schedule.alpha_bars[static_cast<size_t>(t)] =
            model.schedule.alpha_bars[static_cast<size_t>(t) - 1] * model.schedule.alphas[static_cast<size_t>(t)];
    }

    model.train_steps = c.header.at("train_steps").get<int64_t>();
    model.init_seed = c.header.at("rng_root_seed").get<uint64_t>();
    model.encoder_first_n = c.header.at("encoder_first_n").get<int>();
    const std::string tr = c.header.at("trainable").get<std::string>();
    model.trainable = tr == "text_encoder" ? TrainableModule::text_encoder : TrainableModule::denoiser;

    restore_params(c, model.params(), "");
    if (c.header.at("has_frozen").get<bool>()) {
        auto frozen = std::make_shared<ModelF>(model.clone_weights());
        restore_params(c, frozen->params(), "frozen.");
        model.frozen = frozen;
    }
    const int first_n = ej.at("trainable_layers").get<int>();
    model.encoder.set_trainable_layers(first_n);
    model.select_trainable(model.trainable, model.trainable == TrainableModule::text_encoder ? first_n : first_n);
    if (c.header.at("architecture_hash").get<uint64_t>() != architecture_hash(model))
        throw std::runtime_error("load_model_checkpoint: architecture hash mismatch");
    return model;
}

}  // namespace advlab::diffusion
