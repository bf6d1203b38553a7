#pragma once

#include <functional>
#include <string>
#include <vector>

#include "advlab/diffusion.hpp"
#include "advlab/toy_world.hpp"

namespace advlab::objectives {

using diffusion::DiffusionModel;

// A batch of diffusion states (x_t, t) the losses are evaluated on.
template <typename T>
struct StateBatch {
    Tensor<T> x_t;        // [B,3,H,W]
    std::vector<int> ts;  // timestep per row
};

// Draw states by forward-diffusing bank images at uniform random t.
// Images are [0,1] toy images; states live in the [-1,1] model space.
template <typename T>
StateBatch<T> sample_states(const std::vector<toy::Image>& bank, const diffusion::NoiseSchedule& sched, int count,
                            RngStream& rng, int image_size = toy::kImageSize) {
    if (bank.empty()) throw std::invalid_argument("sample_states: empty image bank");
    StateBatch<T> st;
    st.x_t = Tensor<T>::zeros({count, 3, image_size, image_size});
    st.ts.resize(static_cast<size_t>(count));
    const int pixels = 3 * image_size * image_size;
    for (int i = 0; i < count; ++i) {
        const auto& img = bank[rng.uniform_index(bank.size())];
        const int t = rng.uniform_int(1, sched.T);
        st.ts[static_cast<size_t>(i)] = t;
        const T a = static_cast<T>(std::sqrt(sched.alpha_bar(t)));
        const T s = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(t)));
        for (int j = 0; j < pixels; ++j) {
            const T x0 = static_cast<T>(img.chw[static_cast<size_t>(j)]) * T(2) - T(1);
            st.x_t.data()[static_cast<size_t>(i) * pixels + j] = a * x0 + s * static_cast<T>(rng.normal());
        }
    }
    return st;
}

struct ErasureConfig {
    double eta = 1.0;
    toy::ConceptLabel erase_concept;
    std::vector<toy::TokenSequence> erase_prompts;

    static ErasureConfig standard(const toy::ConceptLabel& erased, const toy::PromptGrammar& grammar,
                                  double eta = 1.0) {
        ErasureConfig c;
        c.eta = eta;
        c.erase_concept = erased;
        for (int t = 0; t < static_cast<int>(grammar.templates().size()); ++t)
            c.erase_prompts.push_back(grammar.make_prompt(erased, t));
        return c;
    }

    void validate(const toy::PromptGrammar& grammar) const {
        if (eta < 0) throw std::invalid_argument("ErasureConfig: eta must be >= 0");
        if (erase_prompts.empty()) throw std::invalid_argument("ErasureConfig: no erase prompts");
        for (const auto& p : erase_prompts)
            if (grammar.detokenize(p).find(erase_concept.str()) == std::string::npos)
                throw std::invalid_argument("ErasureConfig: prompt does not mention the erased concept");
    }
};

// Eq.-(2) style target: (1+eta) * eps_frozen(x_t | empty) - eta * eps_frozen(x_t | c_e).
// Computed entirely through theta_o, so the result carries no gradient.
template <typename T>
Tensor<T> esd_target(const DiffusionModel<T>& frozen, const StateBatch<T>& st, const Tensor<T>& cond_e_frozen,
                     const Tensor<T>& cond_null_frozen, double eta) {
    NoGradGuard ng;
    auto eps_null = denoise_predict(frozen, st.x_t, st.ts, cond_null_frozen);
    auto eps_c = denoise_predict(frozen, st.x_t, st.ts, cond_e_frozen);
    return detach(add(scale(eps_null, static_cast<T>(1.0 + eta)), scale(eps_c, static_cast<T>(-eta))));
}

// || eps_theta(x_t | cond_for_theta) - esd_target ||^2 averaged over the batch.
// cond_for_theta carries the (possibly adversarial) prompt through the live
// encoder; the target always uses the clean concept through theta_o.
template <typename T>
Tensor<T> esd_loss(const DiffusionModel<T>& model, const DiffusionModel<T>& frozen, const StateBatch<T>& st,
                   const Tensor<T>& cond_for_theta, const Tensor<T>& cond_e_frozen, const Tensor<T>& cond_null_frozen,
                   double eta) {
    auto target = esd_target(frozen, st, cond_e_frozen, cond_null_frozen, eta);
    auto pred = denoise_predict(model, st.x_t, st.ts, cond_for_theta);
    return mse(pred, target);
}

// One retain item: a benign prompt with its own fresh (x0, t, eps) state.
template <typename T>
struct RetainBatch {
    std::vector<toy::TokenSequence> prompts;
    StateBatch<T> states;  // one row per prompt
};

// E_c || eps_theta(x_t|c) - eps_frozen(x_t|c) ||^2 with live-encoder
// conditioning on the theta side and frozen-encoder conditioning on the
// theta_o side.
template <typename T>
Tensor<T> retain_loss(const DiffusionModel<T>& model, const DiffusionModel<T>& frozen, const RetainBatch<T>& batch) {
    if (batch.prompts.empty()) throw std::invalid_argument("retain_loss: empty batch");
    Tensor<T> conds_live, conds_frozen;
    for (size_t i = 0; i < batch.prompts.size(); ++i) {
        auto cl = model.encoder.encode_tokens_pooled(batch.prompts[i]);
        Tensor<T> cf;
        {
            NoGradGuard ng;
            cf = frozen.encoder.encode_tokens_pooled(batch.prompts[i]);
        }
        conds_live = i == 0 ? cl : concat_rows(conds_live, cl);
        conds_frozen = i == 0 ? cf : concat_rows(conds_frozen, cf);
    }
    Tensor<T> target;
    {
        NoGradGuard ng;
        target = detach(denoise_predict(frozen, batch.states.x_t, batch.states.ts, conds_frozen));
    }
    auto pred = denoise_predict(model, batch.states.x_t, batch.states.ts, conds_live);
    return mse(pred, target);
}

// Upper-level objective: l_ESD(theta, c*) + gamma * retain term.
template <typename T>
Tensor<T> unlearn_objective(const DiffusionModel<T>& model, const DiffusionModel<T>& frozen, const StateBatch<T>& st,
                            const Tensor<T>& adv_cond, const Tensor<T>& cond_e_frozen,
                            const Tensor<T>& cond_null_frozen, const RetainBatch<T>& retain_batch, double eta,
                            double gamma) {
    if (gamma < 0) throw std::invalid_argument("unlearn_objective: gamma must be >= 0");
    auto erase = esd_loss(model, frozen, st, adv_cond, cond_e_frozen, cond_null_frozen, eta);
    if (gamma == 0.0) return erase;
    auto retain = retain_loss(model, frozen, retain_batch);
    return add(erase, scale(retain, static_cast<T>(gamma)));
}

// ---- retain set curation ----

// Pure predicate: true means the prompt is related to the erased concept and
// must be dropped.
using PromptJudge = std::function<bool(const std::string&)>;

// Deterministic keyword filter over the erased concept's color/shape words.
PromptJudge keyword_judge(const toy::ConceptLabel& erased);

struct RetainSet {
    std::vector<toy::TokenSequence> prompts;
    std::vector<toy::ConceptLabel> labels;  // x0 source per prompt
    std::string source_tag;
    std::string filter_tag;
    std::string erased_concept;
};

// Instantiates templates over the object words, drops judged prompts,
// deduplicates, and truncates to target_size balanced across surviving
// labels within +-1.
RetainSet build_retain_set(const std::vector<toy::ConceptLabel>& object_words, const toy::PromptGrammar& grammar,
                           const PromptJudge& judge, int target_size, const std::string& source_tag = "toy_grammar",
                           const std::string& filter_tag = "keyword_v1", const std::string& erased_concept = "");

// Newline-delimited prompts plus a JSON sidecar.
void save_retain_set(const RetainSet& rs, const std::filesystem::path& file, const toy::PromptGrammar& grammar);
RetainSet load_retain_set(const std::filesystem::path& file, const toy::PromptGrammar& grammar);

// Fresh (x0, t, eps) per retained prompt, drawn from the prompt's own label.
template <typename T>
RetainBatch<T> sample_retain_batch(const RetainSet& rs, const diffusion::NoiseSchedule& sched, int batch_size,
                                   RngStream& rng) {
    if (rs.prompts.empty()) throw std::invalid_argument("sample_retain_batch: empty retain set");
    RetainBatch<T> out;
    out.states.x_t = Tensor<T>::zeros({batch_size, 3, toy::kImageSize, toy::kImageSize});
    out.states.ts.resize(static_cast<size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
        const size_t pick = rng.uniform_index(rs.prompts.size());
        out.prompts.push_back(rs.prompts[pick]);
        const auto img = toy::generate_image(rs.labels[pick], rng.next_u64());
        const int t = rng.uniform_int(1, sched.T);
        out.states.ts[static_cast<size_t>(i)] = t;
        const T a = static_cast<T>(std::sqrt(sched.alpha_bar(t)));
        const T s = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(t)));
        for (int j = 0; j < toy::kImagePixels; ++j) {
            const T x0 = static_cast<T>(img.chw[static_cast<size_t>(j)]) * T(2) - T(1);
            out.states.x_t.data()[static_cast<size_t>(i) * toy::kImagePixels + j] = a * x0 + s * static_cast<T>(rng.normal());
        }
    }
    return out;
}

}  // namespace advlab::objectives
