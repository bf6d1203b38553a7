#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "advlab/optim.hpp"
#include "advlab/tensor.hpp"
#include "advlab/toy_world.hpp"

namespace advlab::text {

// Module surface for the word-level codec; the grammar owns the vocabulary.
inline toy::TokenSequence tokenize(const toy::PromptGrammar& g, const std::string& s) { return g.tokenize(s); }
inline std::string detokenize(const toy::PromptGrammar& g, const toy::TokenSequence& seq) { return g.detokenize(seq); }

struct EncoderConfig {
    int vocab_size = 0;
    int d_model = 32;
    int n_layers = 4;
    int n_heads = 2;
    int max_len = 32;
    int ff_mult = 4;

    bool operator==(const EncoderConfig&) const = default;
};

// Small pre-LN transformer over token embeddings. Conditioning handed to the
// denoiser is the mean pooled final-layer output. Trainability is controlled
// per layer: first-N trainable, the embedding tables tied to layer 1 and the
// final norm tied to layer L.
template <typename T>
class EncoderStack {
public:
    EncoderStack() = default;

    EncoderStack(const EncoderConfig& cfg, uint64_t vocab_hash, uint64_t init_seed)
        : cfg_(cfg), vocab_hash_(vocab_hash) {
        int pidx = 0;
        auto make = [&](std::vector<int> shape, T stddev) {
            RngStream rng(init_seed, "encoder_init", static_cast<uint64_t>(pidx++));
            return stddev == T(0) ? Tensor<T>::zeros(shape) : Tensor<T>::randn(shape, rng, stddev);
        };
        const int d = cfg.d_model, f = cfg.d_model * cfg.ff_mult;
        const T wstd = static_cast<T>(std::sqrt(2.0 / (d + d)));
        const T fstd1 = static_cast<T>(std::sqrt(2.0 / (d + f)));
        token_table_ = make({cfg.vocab_size, d}, T(0.05));
        pos_table_ = make({cfg.max_len, d}, T(0.02));
        layers_.resize(static_cast<size_t>(cfg.n_layers));
        for (auto& L : layers_) {
            L.ln1_g = Tensor<T>::full({d}, T(1));
            L.ln1_b = Tensor<T>::zeros({d});
            L.wq = make({d, d}, wstd);
            L.bq = Tensor<T>::zeros({d});
            L.wk = make({d, d}, wstd);
            L.bk = Tensor<T>::zeros({d});
            L.wv = make({d, d}, wstd);
            L.bv = Tensor<T>::zeros({d});
            L.wo = make({d, d}, wstd);
            L.bo = Tensor<T>::zeros({d});
            L.ln2_g = Tensor<T>::full({d}, T(1));
            L.ln2_b = Tensor<T>::zeros({d});
            L.w1 = make({d, f}, fstd1);
            L.b1 = Tensor<T>::zeros({f});
            L.w2 = make({f, d}, fstd1);
            L.b2 = Tensor<T>::zeros({d});
        }
        final_ln_g_ = Tensor<T>::full({d}, T(1));
        final_ln_b_ = Tensor<T>::zeros({d});
        set_trainable_layers(cfg.n_layers);
    }

    const EncoderConfig& config() const { return cfg_; }
    uint64_t vocab_hash() const { return vocab_hash_; }

    // Row i = token_table[ids[i]]. Positions are applied inside encode so that
    // soft-prompt perturbations act in the raw token embedding space.
    Tensor<T> embed(const toy::TokenSequence& seq) const {
        return gather_rows(token_table_, seq.ids);
    }

    Tensor<T> encode(const Tensor<T>& emb) const {
        const int s = emb.dim(0);
        if (s > cfg_.max_len) throw std::invalid_argument("encode: sequence longer than max_len");
        auto x = add(emb, slice_rows(pos_table_, 0, s));
        for (const auto& L : layers_) {
            auto h = layer_norm(x, L.ln1_g, L.ln1_b);
            x = add(x, attention(h, L));
            auto h2 = layer_norm(x, L.ln2_g, L.ln2_b);
            x = add(x, linear(silu(linear(h2, L.w1, L.b1)), L.w2, L.b2));
        }
        return layer_norm(x, final_ln_g_, final_ln_b_);
    }

    // [1, d] conditioning vector.
    Tensor<T> encode_pooled(const Tensor<T>& emb) const { return mean_rows(encode(emb)); }

    Tensor<T> encode_tokens_pooled(const toy::TokenSequence& seq) const { return encode_pooled(embed(seq)); }

    void set_trainable_layers(int n) {
        if (n < 0 || n > cfg_.n_layers) throw std::invalid_argument("set_trainable_layers: N out of [0, L]");
        trainable_layers_ = n;
        apply_trainability(true);
    }

    int trainable_layers() const { return trainable_layers_; }

    // Freeze everything regardless of the first-N setting (used when the
    // denoiser is the selected trainable module).
    void freeze_all() { apply_trainability(false); }
    void apply_layer_trainability() { apply_trainability(true); }

    ParamList<T> params() {
        ParamList<T> out;
        out.push_back({"encoder.embed.token_table", &token_table_});
        out.push_back({"encoder.embed.pos_table", &pos_table_});
        for (size_t i = 0; i < layers_.size(); ++i) {
            auto& L = layers_[i];
            const std::string p = "encoder.layer" + std::to_string(i) + ".";
            out.push_back({p + "ln1_g", &L.ln1_g});
            out.push_back({p + "ln1_b", &L.ln1_b});
            out.push_back({p + "wq", &L.wq});
            out.push_back({p + "bq", &L.bq});
            out.push_back({p + "wk", &L.wk});
            out.push_back({p + "bk", &L.bk});
            out.push_back({p + "wv", &L.wv});
            out.push_back({p + "bv", &L.bv});
            out.push_back({p + "wo", &L.wo});
            out.push_back({p + "bo", &L.bo});
            out.push_back({p + "ln2_g", &L.ln2_g});
            out.push_back({p + "ln2_b", &L.ln2_b});
            out.push_back({p + "w1", &L.w1});
            out.push_back({p + "b1", &L.b1});
            out.push_back({p + "w2", &L.w2});
            out.push_back({p + "b2", &L.b2});
        }
        out.push_back({"encoder.final_ln_g", &final_ln_g_});
        out.push_back({"encoder.final_ln_b", &final_ln_b_});
        return out;
    }

    ParamList<T> layer_params(int layer_index) {
        ParamList<T> all = params();
        ParamList<T> out;
        const std::string key = "encoder.layer" + std::to_string(layer_index) + ".";
        for (auto& p : all)
            if (p.name.rfind(key, 0) == 0) out.push_back(p);
        return out;
    }

    uint64_t state_hash() { return hash_params(params()); }

    EncoderStack clone() const {
        EncoderStack c;
        c.cfg_ = cfg_;
        c.vocab_hash_ = vocab_hash_;
        c.trainable_layers_ = trainable_layers_;
        c.token_table_ = token_table_.clone_detached();
        c.pos_table_ = pos_table_.clone_detached();
        c.layers_.resize(layers_.size());
        for (size_t i = 0; i < layers_.size(); ++i) {
            const auto& L = layers_[i];
            auto& M = c.layers_[i];
            M.ln1_g = L.ln1_g.clone_detached();
            M.ln1_b = L.ln1_b.clone_detached();
            M.wq = L.wq.clone_detached();
            M.bq = L.bq.clone_detached();
            M.wk = L.wk.clone_detached();
            M.bk = L.bk.clone_detached();
            M.wv = L.wv.clone_detached();
            M.bv = L.bv.clone_detached();
            M.wo = L.wo.clone_detached();
            M.bo = L.bo.clone_detached();
            M.ln2_g = L.ln2_g.clone_detached();
            M.ln2_b = L.ln2_b.clone_detached();
            M.w1 = L.w1.clone_detached();
            M.b1 = L.b1.clone_detached();
            M.w2 = L.w2.clone_detached();
            M.b2 = L.b2.clone_detached();
        }
        c.final_ln_g_ = final_ln_g_.clone_detached();
        c.final_ln_b_ = final_ln_b_.clone_detached();
        return c;
    }

private:
    struct Layer {
        Tensor<T> ln1_g, ln1_b;
        Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor<T> ln2_g, ln2_b;
        Tensor<T> w1, b1, w2, b2;
    };

    Tensor<T> attention(const Tensor<T>& h, const Layer& L) const {
        const int s = h.dim(0), d = cfg_.d_model, nh = cfg_.n_heads, dh = d / nh;
        auto q = linear(h, L.wq, L.bq);
        auto k = linear(h, L.wk, L.bk);
        auto v = linear(h, L.wv, L.bv);
        Tensor<T> merged;
        const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        for (int hd = 0; hd < nh; ++hd) {
            auto qh = slice_cols(q, hd * dh, dh);
            auto kh = slice_cols(k, hd * dh, dh);
            auto vh = slice_cols(v, hd * dh, dh);
            auto attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
            auto oh = matmul(attn, vh);
            merged = hd == 0 ? oh : concat_cols(merged, oh);
        }
        (void)s;
        return linear(merged, L.wo, L.bo);
    }

    void apply_trainability(bool respect_layer_mask) {
        auto set_list = [](ParamList<T> list, bool v) {
            for (auto& p : list) p.tensor->set_requires_grad(v);
        };
        for (int i = 0; i < cfg_.n_layers; ++i)
            set_list(layer_params(i), respect_layer_mask && i < trainable_layers_);
        const bool emb_on = respect_layer_mask && trainable_layers_ >= 1;
        token_table_.set_requires_grad(emb_on);
        pos_table_.set_requires_grad(emb_on);
        const bool final_on = respect_layer_mask && trainable_layers_ >= cfg_.n_layers;
        final_ln_g_.set_requires_grad(final_on);
        final_ln_b_.set_requires_grad(final_on);
    }

    EncoderConfig cfg_;
    uint64_t vocab_hash_ = 0;
    int trainable_layers_ = 0;
    Tensor<T> token_table_, pos_table_;
    std::vector<Layer> layers_;
    Tensor<T> final_ln_g_, final_ln_b_;
};

// Encoder-only checkpoint (plug-in distribution format).
void save_encoder_checkpoint(EncoderStack<float>& enc, const std::filesystem::path& file);
EncoderStack<float> load_encoder_checkpoint(const std::filesystem::path& file);

}  // namespace advlab::text
