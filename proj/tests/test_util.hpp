#pragma once

// Shared oracles for the test suites: central finite differences against
// reverse-mode gradients, and tiny double-precision model instances small
// enough to difference every trainable parameter.

#include <functional>
#include <vector>

#include "advlab/diffusion.hpp"
#include "advlab/objectives.hpp"
#include "advlab/text_encoder.hpp"

namespace advlab::testutil {

inline double max_rel_grad_error(Tensor<double>& leaf, const std::function<Tensor<double>()>& loss_fn,
                                 double h_primary = 1e-4) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
    auto loss = loss_fn();
    backward(loss);
    std::vector<double> analytic(leaf.grad());

    double worst = 0.0;
    for (int64_t i = 0; i < leaf.size(); ++i) {
        const double keep = leaf.data()[i];
        double best = 1e300;
        // two step sizes bracket the truncation/roundoff tradeoff
        for (double h : {h_primary, h_primary * 10}) {
            leaf.data()[i] = keep + h;
            const double up = loss_fn().data()[0];
            leaf.data()[i] = keep - h;
            const double dn = loss_fn().data()[0];
            leaf.data()[i] = keep;
            const double fd = (up - dn) / (2 * h);
            const double denom = std::max({std::abs(fd), std::abs(analytic[static_cast<size_t>(i)]), 1e-8});
            best = std::min(best, std::abs(fd - analytic[static_cast<size_t>(i)]) / denom);
        }
        worst = std::max(worst, best);
    }
    return worst;
}

// Worst relative error across every requires_grad parameter in the list.
inline double max_rel_grad_error_params(const ParamList<double>& params,
                                        const std::function<Tensor<double>()>& loss_fn, double h = 1e-5) {
    double worst = 0.0;
    for (const auto& p : params) {
        if (!p.tensor->requires_grad()) continue;
        worst = std::max(worst, max_rel_grad_error(*p.tensor, loss_fn, h));
    }
    return worst;
}

inline int64_t count_trainable(const ParamList<double>& params) {
    int64_t n = 0;
    for (const auto& p : params)
        if (p.tensor->requires_grad()) n += p.tensor->size();
    return n;
}

inline text::EncoderConfig tiny_encoder_config(int vocab_size) {
    text::EncoderConfig c;
    c.vocab_size = vocab_size;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.max_len = 16;
    c.ff_mult = 2;
    return c;
}

inline diffusion::UNetConfig tiny_unet_config() {
    diffusion::UNetConfig c;
    c.image_size = 8;
    c.base_channels = 2;
    c.mid_channels = 4;
    c.cond_dim = 8;
    c.time_dim = 4;
    c.cond_hidden = 4;
    c.groups = 1;
    return c;
}

// Tiny double-precision model over the standard grammar; every gradient
// contract in the exactness suite runs on this instance. The zero-initialized
// output conv and FiLM heads are randomized so predictions are nonzero and
// none of the exactness checks can pass vacuously on all-zero tensors.
inline diffusion::DiffusionModel<double> tiny_model(const toy::PromptGrammar& grammar, uint64_t seed) {
    diffusion::DiffusionModel<double> m;
    m.encoder = text::EncoderStack<double>(tiny_encoder_config(grammar.vocab_size()), grammar.hash(), seed);
    m.denoiser = diffusion::UNet<double>(tiny_unet_config(), splitmix64(seed ^ 0x111));
    m.schedule = diffusion::NoiseSchedule::linear(10, 1e-4, 0.05);
    m.init_seed = seed;
    RngStream rng(seed, "tiny_fill");
    for (auto& p : m.denoiser.params()) {
        const bool zero_init = p.name.ends_with("out_w") || p.name.ends_with("out_b") ||
                               p.name.ends_with("film_w") || p.name.ends_with("film_b");
        if (zero_init)
            for (auto& v : p.tensor->values()) v = rng.normal() * 0.2;
    }
    return m;
}

// Random diffusion states shaped for the tiny model.
inline objectives::StateBatch<double> tiny_states(int count, uint64_t seed, int image_size = 8) {
    objectives::StateBatch<double> st;
    RngStream rng(seed, "tiny_states");
    st.x_t = Tensor<double>::randn({count, 3, image_size, image_size}, rng);
    st.ts.resize(static_cast<size_t>(count));
    for (auto& t : st.ts) t = rng.uniform_int(1, 10);
    return st;
}

}  // namespace advlab::testutil
