#pragma once

#include <cmath>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "advlab/optim.hpp"
#include "advlab/tensor.hpp"
#include "advlab/tensor_image.hpp"
#include "advlab/text_encoder.hpp"
#include "advlab/toy_world.hpp"

namespace advlab::diffusion {

// Discrete-time variance schedule. Index t runs 1..T; alpha_bar(0) == 1.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;       // betas[t], t in 1..T (betas[0] unused)
    std::vector<double> alphas;      // 1 - beta_t
    std::vector<double> alpha_bars;  // prod_{s<=t} alpha_s, alpha_bars[0] = 1

    static NoiseSchedule linear(int T, double beta_start, double beta_end) {
        NoiseSchedule s;
        s.T = T;
        s.betas.assign(static_cast<size_t>(T) + 1, 0.0);
        s.alphas.assign(static_cast<size_t>(T) + 1, 1.0);
        s.alpha_bars.assign(static_cast<size_t>(T) + 1, 1.0);
        for (int t = 1; t <= T; ++t) {
            const double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
            s.betas[static_cast<size_t>(t)] = b;
            s.alphas[static_cast<size_t>(t)] = 1.0 - b;
            s.alpha_bars[static_cast<size_t>(t)] = s.alpha_bars[static_cast<size_t>(t) - 1] * (1.0 - b);
        }
        return s;
    }

    // T=100 with betas up to 0.07 so alpha_bar(T) < 0.05 and the signal is
    // essentially destroyed at the last step.
    static NoiseSchedule standard() { return linear(100, 1e-4, 0.07); }

    double alpha_bar(int t) const { return alpha_bars[static_cast<size_t>(t)]; }
};

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps. t=0 is the no-noise convention.
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
    if (t < 0 || t > sched.T) throw std::out_of_range("forward_diffuse: t out of [0, T]");
    const T a = static_cast<T>(std::sqrt(sched.alpha_bar(t)));
    const T b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(t)));
    return add(scale(x0, a), scale(eps, b));
}

struct UNetConfig {
    int image_size = toy::kImageSize;
    int in_channels = 3;
    int base_channels = 16;  // 32x32 level
    int mid_channels = 32;   // 16x16 level
    int cond_dim = 32;
    int time_dim = 32;
    int cond_hidden = 64;
    int groups = 8;

    bool operator==(const UNetConfig&) const = default;
};

// Two-level U-Net epsilon predictor. Conditioning (pooled prompt vector plus
// sinusoidal timestep features) enters through FiLM heads on every block.
template <typename T>
class UNet {
public:
    UNet() = default;

    UNet(const UNetConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
        int pidx = 0;
        auto conv_init = [&](int co, int ci) {
            RngStream rng(init_seed, "unet_init", static_cast<uint64_t>(pidx++));
            const T std = static_cast<T>(std::sqrt(2.0 / (ci * 9)));
            return Tensor<T>::randn({co, ci, 3, 3}, rng, std);
        };
        auto lin_init = [&](int in, int out) {
            RngStream rng(init_seed, "unet_init", static_cast<uint64_t>(pidx++));
            const T std = static_cast<T>(std::sqrt(2.0 / (in + out)));
            return Tensor<T>::randn({in, out}, rng, std);
        };
        const int c1 = cfg.base_channels, c2 = cfg.mid_channels, ch = cfg.cond_hidden;

        conv_in_w_ = conv_init(c1, cfg.in_channels);
        conv_in_b_ = Tensor<T>::zeros({c1});
        cond_w0_ = lin_init(cfg.cond_dim + cfg.time_dim, ch);
        cond_b0_ = Tensor<T>::zeros({ch});

        auto make_block = [&](Block& blk, int cin, int cout) {
            blk.gn1_g = Tensor<T>::full({cin}, T(1));
            blk.gn1_b = Tensor<T>::zeros({cin});
            blk.conv1_w = conv_init(cout, cin);
            blk.conv1_b = Tensor<T>::zeros({cout});
            blk.film_w = Tensor<T>::zeros({ch, 2 * cout});  // identity modulation at init
            blk.film_b = Tensor<T>::zeros({2 * cout});
            blk.gn2_g = Tensor<T>::full({cout}, T(1));
            blk.gn2_b = Tensor<T>::zeros({cout});
            blk.conv2_w = conv_init(cout, cout);
            blk.conv2_b = Tensor<T>::zeros({cout});
        };
        make_block(enc_block_, c1, c1);
        down_w_ = conv_init(c2, c1);
        down_b_ = Tensor<T>::zeros({c2});
        make_block(mid_block1_, c2, c2);
        make_block(mid_block2_, c2, c2);
        up_w_ = conv_init(c1, c2);
        up_b_ = Tensor<T>::zeros({c1});
        make_block(dec_block_, 2 * c1, c1);
        out_gn_g_ = Tensor<T>::full({c1}, T(1));
        out_gn_b_ = Tensor<T>::zeros({c1});
        out_w_ = Tensor<T>::zeros({cfg.in_channels, c1, 3, 3});  // zero-init: eps_hat starts at 0
        out_b_ = Tensor<T>::zeros({cfg.in_channels});
        set_trainable(true);
    }

    const UNetConfig& config() const { return cfg_; }

    // x:[B,3,H,W] ts:[B] timesteps, cond:[B,cond_dim] pooled prompt vectors.
    Tensor<T> forward(const Tensor<T>& x, const std::vector<int>& ts, const Tensor<T>& cond) const {
        const int b = x.dim(0);
        if (static_cast<int>(ts.size()) != b || cond.dim(0) != b || cond.dim(1) != cfg_.cond_dim)
            throw std::invalid_argument("UNet::forward: shape mismatch");
        auto temb = timestep_embedding(ts);
        auto h0 = silu(linear(concat_cols(cond, temb), cond_w0_, cond_b0_));  // [B, cond_hidden]

        auto x1 = conv3x3(x, conv_in_w_, conv_in_b_);
        x1 = res_block(x1, enc_block_, h0, /*residual_from_input=*/true);
        auto x2 = conv3x3(avg_pool2(x1), down_w_, down_b_);
        x2 = res_block(x2, mid_block1_, h0, true);
        x2 = res_block(x2, mid_block2_, h0, true);
        auto up = upsample_nearest2(conv3x3(x2, up_w_, up_b_));
        auto cat = concat_channels(up, x1);
        auto x3 = add(up, res_core(cat, dec_block_, h0));
        return conv3x3(silu(group_norm(x3, out_gn_g_, out_gn_b_, cfg_.groups)), out_w_, out_b_);
    }

    void set_trainable(bool v) {
        for (auto& p : params()) p.tensor->set_requires_grad(v);
    }

    ParamList<T> params() {
        ParamList<T> out;
        auto blk = [&out](const std::string& prefix, Block& b) {
            out.push_back({prefix + ".gn1_g", &b.gn1_g});
            out.push_back({prefix + ".gn1_b", &b.gn1_b});
            out.push_back({prefix + ".conv1_w", &b.conv1_w});
            out.push_back({prefix + ".conv1_b", &b.conv1_b});
            out.push_back({prefix + ".film_w", &b.film_w});
            out.push_back({prefix + ".film_b", &b.film_b});
            out.push_back({prefix + ".gn2_g", &b.gn2_g});
            out.push_back({prefix + ".gn2_b", &b.gn2_b});
            out.push_back({prefix + ".conv2_w", &b.conv2_w});
            out.push_back({prefix + ".conv2_b", &b.conv2_b});
        };
        out.push_back({"denoiser.conv_in_w", &conv_in_w_});
        out.push_back({"denoiser.conv_in_b", &conv_in_b_});
        out.push_back({"denoiser.cond_w0", &cond_w0_});
        out.push_back({"denoiser.cond_b0", &cond_b0_});
        blk("denoiser.enc", enc_block_);
        out.push_back({"denoiser.down_w", &down_w_});
        out.push_back({"denoiser.down_b", &down_b_});
        blk("denoiser.mid1", mid_block1_);
        blk("denoiser.mid2", mid_block2_);
        out.push_back({"denoiser.up_w", &up_w_});
        out.push_back({"denoiser.up_b", &up_b_});
        blk("denoiser.dec", dec_block_);
        out.push_back({"denoiser.out_gn_g", &out_gn_g_});
        out.push_back({"denoiser.out_gn_b", &out_gn_b_});
        out.push_back({"denoiser.out_w", &out_w_});
        out.push_back({"denoiser.out_b", &out_b_});
        return out;
    }

    uint64_t state_hash() { return hash_params(params()); }

    UNet clone() const {
        UNet c;
        c.cfg_ = cfg_;
        auto src = const_cast<UNet*>(this)->params();
        c.conv_in_w_ = conv_in_w_.clone_detached();
        // clone via the param registry to avoid listing fields twice
        c.conv_in_b_ = conv_in_b_.clone_detached();
        c.cond_w0_ = cond_w0_.clone_detached();
        c.cond_b0_ = cond_b0_.clone_detached();
        auto cb = [](const Block& b) {
            Block n;
            n.gn1_g = b.gn1_g.clone_detached();
            n.gn1_b = b.gn1_b.clone_detached();
            n.conv1_w = b.conv1_w.clone_detached();
            n.conv1_b = b.conv1_b.clone_detached();
            n.film_w = b.film_w.clone_detached();
            n.film_b = b.film_b.clone_detached();
            n.gn2_g = b.gn2_g.clone_detached();
            n.gn2_b = b.gn2_b.clone_detached();
            n.conv2_w = b.conv2_w.clone_detached();
            n.conv2_b = b.conv2_b.clone_detached();
            return n;
        };
        c.enc_block_ = cb(enc_block_);
        c.down_w_ = down_w_.clone_detached();
        c.down_b_ = down_b_.clone_detached();
        c.mid_block1_ = cb(mid_block1_);
        c.mid_block2_ = cb(mid_block2_);
        c.up_w_ = up_w_.clone_detached();
        c.up_b_ = up_b_.clone_detached();
        c.dec_block_ = cb(dec_block_);
        c.out_gn_g_ = out_gn_g_.clone_detached();
        c.out_gn_b_ = out_gn_b_.clone_detached();
        c.out_w_ = out_w_.clone_detached();
        c.out_b_ = out_b_.clone_detached();
        (void)src;
        return c;
    }

    Tensor<T> timestep_embedding(const std::vector<int>& ts) const {
        const int b = static_cast<int>(ts.size());
        const int half = cfg_.time_dim / 2;
        auto emb = Tensor<T>::zeros({b, cfg_.time_dim});
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < half; ++j) {
                const double freq = std::exp(-std::log(10000.0) * j / std::max(1, half - 1));
                emb.at({i, j}) = static_cast<T>(std::sin(ts[static_cast<size_t>(i)] * freq));
                emb.at({i, half + j}) = static_cast<T>(std::cos(ts[static_cast<size_t>(i)] * freq));
            }
        return emb;
    }

private:
    struct Block {
        Tensor<T> gn1_g, gn1_b, conv1_w, conv1_b;
        Tensor<T> film_w, film_b;
        Tensor<T> gn2_g, gn2_b, conv2_w, conv2_b;
    };

    Tensor<T> res_core(const Tensor<T>& x, const Block& blk, const Tensor<T>& cond_hidden) const {
        auto h = conv3x3(silu(group_norm(x, blk.gn1_g, blk.gn1_b, gn_groups(x.dim(1)))), blk.conv1_w, blk.conv1_b);
        auto st = linear(cond_hidden, blk.film_w, blk.film_b);
        const int c = h.dim(1);
        h = film(h, slice_cols(st, 0, c), slice_cols(st, c, c));
        return conv3x3(silu(group_norm(h, blk.gn2_g, blk.gn2_b, gn_groups(c))), blk.conv2_w, blk.conv2_b);
    }

    Tensor<T> res_block(const Tensor<T>& x, const Block& blk, const Tensor<T>& cond_hidden, bool residual) const {
        auto h = res_core(x, blk, cond_hidden);
        return residual ? add(x, h) : h;
    }

    int gn_groups(int channels) const { return std::min(cfg_.groups, channels); }

    UNetConfig cfg_;
    Tensor<T> conv_in_w_, conv_in_b_;
    Tensor<T> cond_w0_, cond_b0_;
    Block enc_block_;
    Tensor<T> down_w_, down_b_;
    Block mid_block1_, mid_block2_;
    Tensor<T> up_w_, up_b_;
    Block dec_block_;
    Tensor<T> out_gn_g_, out_gn_b_;
    Tensor<T> out_w_, out_b_;
};

enum class TrainableModule { text_encoder, denoiser };

inline const char* to_string(TrainableModule m) {
    return m == TrainableModule::text_encoder ? "text_encoder" : "denoiser";
}

// The full conditional diffusion model: encoder + denoiser + schedule, with a
// per-module trainability selection and an optional frozen snapshot.
template <typename T>
struct DiffusionModel {
    text::EncoderStack<T> encoder;
    UNet<T> denoiser;
    NoiseSchedule schedule;
    TrainableModule trainable = TrainableModule::denoiser;
    int encoder_first_n = 0;  // meaningful when trainable == text_encoder
    int64_t train_steps = 0;
    uint64_t init_seed = 0;
    std::shared_ptr<const DiffusionModel<T>> frozen;  // theta_o; never mutated

    ParamList<T> params() {
        ParamList<T> out = encoder.params();
        auto d = denoiser.params();
        out.insert(out.end(), d.begin(), d.end());
        return out;
    }

    uint64_t state_hash() { return hash_params(params()); }
    uint64_t encoder_hash() { return encoder.state_hash(); }
    uint64_t denoiser_hash() { return denoiser.state_hash(); }

    // Select which module receives gradients; the other is fully frozen.
    void select_trainable(TrainableModule m, int first_n_layers) {
        trainable = m;
        encoder_first_n = first_n_layers;
        if (m == TrainableModule::text_encoder) {
            encoder.set_trainable_layers(first_n_layers);
            denoiser.set_trainable(false);
        } else {
            encoder.freeze_all();
            denoiser.set_trainable(true);
        }
    }

    void train_all() {
        encoder.set_trainable_layers(encoder.config().n_layers);
        denoiser.set_trainable(true);
    }

    DiffusionModel clone_weights() const {
        DiffusionModel c;
        c.encoder = encoder.clone();
        c.denoiser = denoiser.clone();
        c.schedule = schedule;
        c.trainable = trainable;
        c.encoder_first_n = encoder_first_n;
        c.train_steps = train_steps;
        c.init_seed = init_seed;
        return c;  // frozen intentionally not copied
    }
};

// Deep, immutable copy of the live weights stored as theta_o.
template <typename T>
void snapshot_frozen(DiffusionModel<T>& model) {
    auto snap = std::make_shared<DiffusionModel<T>>(model.clone_weights());
    snap->frozen = nullptr;
    model.frozen = std::move(snap);
}

// Pooled conditioning for a token sequence; [1, cond_dim].
template <typename T>
Tensor<T> prompt_cond(const DiffusionModel<T>& model, const toy::TokenSequence& seq) {
    return model.encoder.encode_tokens_pooled(seq);
}

// eps_theta(x_t | c). cond may be a [1,d] vector (broadcast over the batch)
// or a [B,d] row matrix.
template <typename T>
Tensor<T> denoise_predict(const DiffusionModel<T>& model, const Tensor<T>& x_t, const std::vector<int>& ts,
                          const Tensor<T>& cond) {
    auto rows = cond.dim(0) == x_t.dim(0) ? cond : repeat_row(cond, x_t.dim(0));
    return model.denoiser.forward(x_t, ts, rows);
}

// ---- float production helpers (implemented in src/diffusion.cpp) ----

using ModelF = DiffusionModel<float>;

struct BaseTrainConfig {
    int steps = 4000;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double cond_dropout_rate = 0.1;
    // Train only the denoiser around a fixed encoder (foreign-model setup).
    bool freeze_encoder = false;
};

// One Eq.-(1) step over a caller-chosen batch: uniform t, fresh eps, prompt
// dropout to the empty prompt, one optimizer step on trainable blocks.
float base_train_step(ModelF& model, const std::vector<const toy::DatasetItem*>& batch,
                      const toy::PromptGrammar& grammar, double cond_dropout_rate, Optimizer<float>& opt,
                      uint64_t seed, int64_t step_index);

// Full base training run; trains encoder + denoiser jointly from scratch.
std::vector<float> train_base_model(ModelF& model, const toy::Dataset& data, const toy::PromptGrammar& grammar,
                                    const BaseTrainConfig& cfg, uint64_t seed);

// Ancestral reverse diffusion with classifier-free guidance
// (eps_hat = eps_empty + w (eps_cond - eps_empty)); deterministic in seed.
// Returns n images sampled in one batch.
std::vector<toy::Image> sample_cfg(const ModelF& model, const toy::TokenSequence& prompt,
                                   const toy::PromptGrammar& grammar, double guidance_weight, uint64_t seed,
                                   int n_samples = 1);

// Same sampler driven by a precomputed [1,d] conditioning vector (soft
// prompts); an undefined cond samples unconditionally.
std::vector<toy::Image> sample_cfg_with_cond(const ModelF& model, const Tensor<float>& cond_prompt,
                                             const toy::PromptGrammar& grammar, double guidance_weight, uint64_t seed,
                                             int n_samples = 1);

// Checkpoint I/O: all named arrays plus a header carrying the architecture
// hash, schedule, step count and RNG root. Bit-exact round trip.
void save_model_checkpoint(ModelF& model, const std::filesystem::path& file);
ModelF load_model_checkpoint(const std::filesystem::path& file);

uint64_t architecture_hash(const ModelF& model);

}  // namespace advlab::diffusion
