#include "doctest.h"

#include <filesystem>
#include <map>
#include <set>

#include "advlab/objectives.hpp"
#include "test_util.hpp"

using namespace advlab;
using namespace advlab::testutil;
using namespace advlab::objectives;

namespace {
toy::PromptGrammar grammar = toy::PromptGrammar::standard();

struct Fixture {
    diffusion::DiffusionModel<double> model;
    StateBatch<double> st;
    Tensor<double> cond_e, cond_null;

    explicit Fixture(uint64_t seed) : model(tiny_model(grammar, seed)), st(tiny_states(2, seed + 1)) {
        diffusion::snapshot_frozen(model);
        NoGradGuard ng;
        cond_e = model.frozen->encoder.encode_tokens_pooled(grammar.tokenize("a red circle"));
        cond_null = model.frozen->encoder.encode_tokens_pooled(grammar.empty_prompt());
    }
};
}  // namespace

TEST_CASE("esd_target algebra") {
    Fixture f(101);
    const auto& frozen = *f.model.frozen;

    Tensor<double> eps_null, eps_c;
    {
        NoGradGuard ng;
        eps_null = diffusion::denoise_predict(frozen, f.st.x_t, f.st.ts, f.cond_null);
        eps_c = diffusion::denoise_predict(frozen, f.st.x_t, f.st.ts, f.cond_e);
    }

    SUBCASE("eta = 0 gives the unconditional prediction exactly") {
        auto t = esd_target(frozen, f.st, f.cond_e, f.cond_null, 0.0);
        CHECK(t.values() == eps_null.values());
    }
    SUBCASE("eps_c == eps_null collapses the target for any eta") {
        for (double eta : {0.0, 0.7, 2.5}) {
            auto t = esd_target(frozen, f.st, f.cond_null, f.cond_null, eta);
            for (int64_t i = 0; i < t.size(); ++i) CHECK(t.data()[i] == doctest::Approx(eps_null.data()[i]).epsilon(1e-12));
        }
    }
    SUBCASE("eta = 1 gives 2 eps_null - eps_c at machine precision") {
        auto t = esd_target(frozen, f.st, f.cond_e, f.cond_null, 1.0);
        for (int64_t i = 0; i < t.size(); ++i)
            CHECK(t.data()[i] == doctest::Approx(2 * eps_null.data()[i] - eps_c.data()[i]).epsilon(1e-14));
    }
    SUBCASE("linearity identity over eta in {0, 0.5, 1, 2}") {
        for (double eta : {0.0, 0.5, 1.0, 2.0}) {
            auto t = esd_target(frozen, f.st, f.cond_e, f.cond_null, eta);
            for (int64_t i = 0; i < t.size(); ++i)
                CHECK(t.data()[i] ==
                      doctest::Approx((1 + eta) * eps_null.data()[i] - eta * eps_c.data()[i]).epsilon(1e-14));
        }
    }
    SUBCASE("target carries no gradient tape") {
        f.model.encoder.set_trainable_layers(1);
        auto t = esd_target(frozen, f.st, f.cond_e, f.cond_null, 1.0);
        CHECK_FALSE(t.node()->needs_grad);
        CHECK(t.node()->parents.empty());
    }
}

TEST_CASE("esd_loss zeros and brute-force formula oracle") {
    Fixture f(103);
    const auto& frozen = *f.model.frozen;

    SUBCASE("theta = theta_o with eps_c == eps_null forces zero loss") {
        auto loss = esd_loss(f.model, frozen, f.st, f.cond_null, f.cond_null, f.cond_null, 1.0);
        CHECK(loss.data()[0] == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("loss is nonnegative on random instances") {
        for (uint64_t s = 0; s < 4; ++s) {
            Fixture g(200 + s * 13);
            auto loss = esd_loss(g.model, *g.model.frozen, g.st, g.cond_e, g.cond_e, g.cond_null, 1.0);
            CHECK(loss.data()[0] >= 0.0);
        }
    }
    SUBCASE("matches an elementwise arithmetic oracle on the live tensors") {
        const double eta = 0.8;
        Tensor<double> pred, eps_null, eps_c;
        {
            NoGradGuard ng;
            pred = diffusion::denoise_predict(f.model, f.st.x_t, f.st.ts, f.cond_e);
            eps_null = diffusion::denoise_predict(frozen, f.st.x_t, f.st.ts, f.cond_null);
            eps_c = diffusion::denoise_predict(frozen, f.st.x_t, f.st.ts, f.cond_e);
        }
        double expected = 0;
        for (int64_t i = 0; i < pred.size(); ++i) {
            const double target = (1 + eta) * eps_null.data()[i] - eta * eps_c.data()[i];
            expected += (pred.data()[i] - target) * (pred.data()[i] - target);
        }
        expected /= static_cast<double>(pred.size());
        auto loss = esd_loss(f.model, frozen, f.st, f.cond_e, f.cond_e, f.cond_null, eta);
        CHECK(loss.data()[0] == doctest::Approx(expected).epsilon(1e-12));
    }
    SUBCASE("gradient w.r.t. trainable encoder matches finite differences") {
        f.model.select_trainable(diffusion::TrainableModule::text_encoder, 1);
        auto params = f.model.params();
        CHECK(count_trainable(params) <= 2000);
        auto prompt = grammar.tokenize("a red circle");
        auto fn = [&] {
            auto cond = f.model.encoder.encode_tokens_pooled(prompt);
            return esd_loss(f.model, *f.model.frozen, f.st, cond, f.cond_e, f.cond_null, 1.0);
        };
        CHECK(max_rel_grad_error_params(params, fn) < 1e-4);
    }
}

TEST_CASE("retain_loss zeros and sensitivity") {
    Fixture f(107);
    const auto& frozen = *f.model.frozen;

    RetainBatch<double> batch;
    batch.prompts = {grammar.tokenize("a blue square"), grammar.tokenize("a green cross")};
    batch.states = tiny_states(2, 109);

    SUBCASE("theta = theta_o gives exactly zero") {
        auto loss = retain_loss(f.model, frozen, batch);
        CHECK(loss.data()[0] == 0.0);
    }
    SUBCASE("empty batch throws") {
        RetainBatch<double> empty;
        CHECK_THROWS_AS(retain_loss(f.model, frozen, empty), std::invalid_argument);
    }
    SUBCASE("single-weight perturbation makes it positive") {
        auto params = f.model.denoiser.params();
        params[4].tensor->data()[0] += 0.1;  // one denoiser conv weight
        auto loss = retain_loss(f.model, frozen, batch);
        CHECK(loss.data()[0] > 0.0);
    }
    SUBCASE("gradient w.r.t. trainable encoder matches finite differences") {
        // move theta off theta_o so the gradient is not checked at the
        // degenerate zero of the quadratic
        for (auto& p : f.model.encoder.params())
            for (size_t i = 0; i < p.tensor->values().size(); i += 3) p.tensor->values()[i] += 0.03;
        f.model.select_trainable(diffusion::TrainableModule::text_encoder, 1);
        auto fn = [&] { return retain_loss(f.model, *f.model.frozen, batch); };
        CHECK(max_rel_grad_error_params(f.model.params(), fn) < 1e-4);
    }
}

TEST_CASE("unlearn_objective composition") {
    Fixture f(113);
    const auto& frozen = *f.model.frozen;
    RetainBatch<double> batch;
    batch.prompts = {grammar.tokenize("a blue square"), grammar.tokenize("a green triangle")};
    batch.states = tiny_states(2, 115);

    // perturb the live model so both terms are nonzero
    f.model.denoiser.params()[6].tensor->data()[1] += 0.05;

    const double e = esd_loss(f.model, frozen, f.st, f.cond_e, f.cond_e, f.cond_null, 1.0).data()[0];
    const double r = retain_loss(f.model, frozen, batch).data()[0];
    CHECK(r > 0.0);

    SUBCASE("gamma = 0 equals esd_loss exactly") {
        auto u = unlearn_objective(f.model, frozen, f.st, f.cond_e, f.cond_e, f.cond_null, batch, 1.0, 0.0);
        CHECK(u.data()[0] == e);
    }
    SUBCASE("linearity at gamma = 0.3 and 0.5") {
        for (double gamma : {0.3, 0.5}) {
            auto u = unlearn_objective(f.model, frozen, f.st, f.cond_e, f.cond_e, f.cond_null, batch, 1.0, gamma);
            CHECK(u.data()[0] == doctest::Approx(e + gamma * r).epsilon(1e-12));
        }
    }
    SUBCASE("d objective / d gamma equals the retain value (two-point check)") {
        auto u1 = unlearn_objective(f.model, frozen, f.st, f.cond_e, f.cond_e, f.cond_null, batch, 1.0, 0.2);
        auto u2 = unlearn_objective(f.model, frozen, f.st, f.cond_e, f.cond_e, f.cond_null, batch, 1.0, 0.7);
        CHECK((u2.data()[0] - u1.data()[0]) / 0.5 == doctest::Approx(r).epsilon(1e-10));
    }
    SUBCASE("negative gamma rejected") {
        CHECK_THROWS_AS(unlearn_objective(f.model, frozen, f.st, f.cond_e, f.cond_e, f.cond_null, batch, 1.0, -0.1),
                        std::invalid_argument);
    }
    SUBCASE("gradient through the full objective matches finite differences") {
        f.model.select_trainable(diffusion::TrainableModule::text_encoder, 1);
        auto prompt = grammar.tokenize("a red circle");
        auto fn = [&] {
            auto cond = f.model.encoder.encode_tokens_pooled(prompt);
            return unlearn_objective(f.model, *f.model.frozen, f.st, cond, f.cond_e, f.cond_null, batch, 1.0, 0.3);
        };
        CHECK(max_rel_grad_error_params(f.model.params(), fn) < 1e-4);
    }
}

TEST_CASE("erasure config validation") {
    auto good = ErasureConfig::standard(toy::ConceptLabel{toy::Shape::circle, toy::Color::red}, grammar);
    CHECK_NOTHROW(good.validate(grammar));
    CHECK(good.erase_prompts.size() == grammar.templates().size());

    auto bad = good;
    bad.eta = -1;
    CHECK_THROWS_AS(bad.validate(grammar), std::invalid_argument);

    auto wrong = good;
    wrong.erase_prompts = {grammar.tokenize("a blue square")};
    CHECK_THROWS_AS(wrong.validate(grammar), std::invalid_argument);
}

TEST_CASE("build_retain_set") {
    const toy::ConceptLabel erased{toy::Shape::circle, toy::Color::red};
    std::vector<toy::ConceptLabel> words;
    for (const auto& l : toy::all_labels())
        if (!(l == erased)) words.push_back(l);

    SUBCASE("keyword judge removes every red/circle mention") {
        auto rs = build_retain_set(words, grammar, keyword_judge(erased), 48);
        CHECK(rs.prompts.size() == 48);
        std::set<std::string> texts;
        for (const auto& p : rs.prompts) {
            const auto text = grammar.detokenize(p);
            CHECK(text.find("red") == std::string::npos);
            CHECK(text.find("circle") == std::string::npos);
            texts.insert(text);
        }
        CHECK(texts.size() == 48);  // distinct

        // balanced within +-1 across surviving labels
        std::map<int, int> hist;
        for (const auto& l : rs.labels) hist[l.index()]++;
        int mn = 1 << 30, mx = 0;
        for (auto& [k, v] : hist) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        CHECK(mx - mn <= 1);
        CHECK(hist.size() == 6);  // 11 labels minus the 5 sharing a word with "red circle"
    }
    SUBCASE("accept-all judge keeps min(candidates, target_size)") {
        auto all = build_retain_set(words, grammar, [](const std::string&) { return false; }, 10000);
        CHECK(all.prompts.size() == words.size() * grammar.templates().size());
        auto truncated = build_retain_set(words, grammar, [](const std::string&) { return false; }, 13);
        CHECK(truncated.prompts.size() == 13);
    }
    SUBCASE("judge dropping everything throws") {
        CHECK_THROWS(build_retain_set(words, grammar, [](const std::string&) { return true; }, 10));
    }
}

TEST_CASE("retain set save/load round trip") {
    const toy::ConceptLabel erased{toy::Shape::square, toy::Color::blue};
    std::vector<toy::ConceptLabel> words;
    for (const auto& l : toy::all_labels())
        if (!(l == erased)) words.push_back(l);
    auto rs = build_retain_set(words, grammar, keyword_judge(erased), 24, "toy_grammar", "keyword_v1", erased.str());

    auto file = std::filesystem::temp_directory_path() / "advlab_retain_test.txt";
    save_retain_set(rs, file, grammar);
    auto back = load_retain_set(file, grammar);
    REQUIRE(back.prompts.size() == rs.prompts.size());
    for (size_t i = 0; i < rs.prompts.size(); ++i) {
        CHECK(back.prompts[i] == rs.prompts[i]);
        CHECK(back.labels[i] == rs.labels[i]);
    }
    CHECK(back.erased_concept == "blue square");
    std::filesystem::remove(file);
    std::filesystem::remove(file.string() + ".json");
}
