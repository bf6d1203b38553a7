#include "doctest.h"

#include "advlab/adversary.hpp"
#include "test_util.hpp"

using namespace advlab;
using namespace advlab::testutil;
using namespace advlab::adversary;

namespace {
toy::PromptGrammar grammar = toy::PromptGrammar::standard();
}

TEST_CASE("apply_strategy semantics") {
    RngStream rng(3, "strat");
    auto clean = Tensor<double>::randn({6, 8}, rng);

    SUBCASE("add with zero delta is the identity") {
        Perturbation<double> p{Tensor<double>::zeros({6, 8}), Strategy::add};
        auto out = apply_strategy(clean, p);
        CHECK(out.values() == clean.values());
    }
    SUBCASE("prefix with N=5 grows length by 5 and preserves the clean suffix bit-exactly") {
        Perturbation<double> p{Tensor<double>::randn({5, 8}, rng), Strategy::prefix};
        auto out = apply_strategy(clean, p);
        CHECK(out.dim(0) == 11);
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 8; ++j) CHECK(out.at({i, j}) == p.delta.at({i, j}));
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 8; ++j) CHECK(out.at({5 + i, j}) == clean.at({i, j}));
    }
    SUBCASE("replace returns exactly the delta rows") {
        Perturbation<double> p{Tensor<double>::randn({6, 8}, rng), Strategy::replace};
        auto out = apply_strategy(clean, p);
        CHECK(out.values() == p.delta.values());
    }
    SUBCASE("shape mismatches rejected for add/replace") {
        Perturbation<double> bad{Tensor<double>::zeros({3, 8}), Strategy::add};
        CHECK_THROWS_AS(apply_strategy(clean, bad), std::invalid_argument);
        bad.strategy = Strategy::replace;
        CHECK_THROWS_AS(apply_strategy(clean, bad), std::invalid_argument);
        Perturbation<double> wrong_d{Tensor<double>::zeros({6, 4}), Strategy::add};
        CHECK_THROWS_AS(apply_strategy(clean, wrong_d), std::invalid_argument);
    }
}

TEST_CASE("attack_loss zeros, oracle, gradient") {
    auto model = tiny_model(grammar, 301);
    diffusion::snapshot_frozen(model);
    const auto& frozen = *model.frozen;
    auto st = tiny_states(2, 303);
    Tensor<double> cond_clean;
    {
        NoGradGuard ng;
        cond_clean = frozen.encoder.encode_tokens_pooled(grammar.tokenize("a red circle"));
    }

    SUBCASE("theta = theta_o and c' = c force zero loss") {
        auto loss = attack_loss(model, frozen, st, cond_clean, cond_clean);
        CHECK(loss.data()[0] == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("elementwise arithmetic oracle") {
        Tensor<double> cond_pert;
        {
            NoGradGuard ng;
            cond_pert = frozen.encoder.encode_tokens_pooled(grammar.tokenize("a blue square"));
        }
        Tensor<double> pred, target;
        {
            NoGradGuard ng;
            pred = diffusion::denoise_predict(model, st.x_t, st.ts, cond_pert);
            target = diffusion::denoise_predict(frozen, st.x_t, st.ts, cond_clean);
        }
        double expected = 0;
        for (int64_t i = 0; i < pred.size(); ++i)
            expected += (pred.data()[i] - target.data()[i]) * (pred.data()[i] - target.data()[i]);
        expected /= static_cast<double>(pred.size());
        auto loss = attack_loss(model, frozen, st, cond_pert, cond_clean);
        CHECK(loss.data()[0] == doctest::Approx(expected).epsilon(1e-12));
        CHECK(loss.data()[0] >= 0.0);
    }
    SUBCASE("gradient w.r.t. delta matches finite differences") {
        model.encoder.freeze_all();
        model.denoiser.set_trainable(false);
        auto clean_emb = detach(model.encoder.embed(grammar.tokenize("a red circle")));
        auto delta = Tensor<double>::zeros({3, 8});
        RngStream rng(307, "init");
        for (auto& v : delta.values()) v = rng.normal() * 0.01;
        auto fn = [&] {
            Perturbation<double> p{delta, Strategy::prefix};
            auto cond = model.encoder.encode_pooled(apply_strategy(clean_emb, p));
            return attack_loss(model, frozen, st, cond, cond_clean);
        };
        CHECK(max_rel_grad_error(delta, fn) < 1e-4);
    }
}

TEST_CASE("fgsm_step elementwise oracle and bound") {
    RngStream rng(311, "fgsm");
    Perturbation<double> d0{Tensor<double>::randn({4, 8}, rng), Strategy::prefix};
    const double alpha = 0.25;

    SUBCASE("zero gradient leaves delta unchanged") {
        auto out = fgsm_step(d0, Tensor<double>::zeros({4, 8}), alpha);
        CHECK(out.delta.values() == d0.delta.values());
    }
    SUBCASE("all-positive gradient decreases every entry by exactly alpha") {
        auto out = fgsm_step(d0, Tensor<double>::full({4, 8}, 3.7), alpha);
        for (int64_t i = 0; i < out.delta.size(); ++i)
            CHECK(out.delta.data()[i] == doctest::Approx(d0.delta.data()[i] - alpha).epsilon(1e-15));
    }
    SUBCASE("mixed-sign gradient against an elementwise brute-force oracle") {
        auto g = Tensor<double>::randn({4, 8}, rng);
        g.data()[5] = 0.0;
        auto out = fgsm_step(d0, g, alpha);
        for (int64_t i = 0; i < g.size(); ++i) {
            const double sign = g.data()[i] > 0 ? 1.0 : (g.data()[i] < 0 ? -1.0 : 0.0);
            CHECK(out.delta.data()[i] == d0.delta.data()[i] - alpha * sign);
            CHECK(std::abs(out.delta.data()[i] - d0.delta.data()[i]) <= alpha + 1e-15);
        }
        CHECK(out.delta.data()[5] == d0.delta.data()[5]);
    }
    SUBCASE("shape mismatch throws") {
        CHECK_THROWS_AS(fgsm_step(d0, Tensor<double>::zeros({2, 8}), alpha), std::invalid_argument);
    }
}

TEST_CASE("multi_step_attack mechanics") {
    auto model = tiny_model(grammar, 401);
    diffusion::snapshot_frozen(model);
    const auto& frozen = *model.frozen;
    std::vector<toy::Image> bank;
    for (uint64_t s = 0; s < 4; ++s)
        bank.push_back(toy::generate_image(toy::ConceptLabel{toy::Shape::circle, toy::Color::red}, s));
    auto prompt = grammar.tokenize("a red circle");

    SUBCASE("trajectory length equals K; deterministic in seed") {
        AttackConfig cfg;
        cfg.steps = 5;
        cfg.timestep_samples = 2;
        auto r1 = multi_step_attack(model, frozen, prompt, bank, cfg, 99);
        auto r2 = multi_step_attack(model, frozen, prompt, bank, cfg, 99);
        CHECK(r1.loss_trajectory.size() == 5);
        CHECK(r1.loss_trajectory == r2.loss_trajectory);
        CHECK(r1.pert.delta.values() == r2.pert.delta.values());
        auto r3 = multi_step_attack(model, frozen, prompt, bank, cfg, 100);
        CHECK(r1.pert.delta.values() != r3.pert.delta.values());
    }
    SUBCASE("trainability mask restored after the attack") {
        model.select_trainable(diffusion::TrainableModule::text_encoder, 1);
        AttackConfig cfg;
        cfg.steps = 2;
        (void)multi_step_attack(model, frozen, prompt, bank, cfg, 7);
        int trainable = 0;
        for (auto& p : model.encoder.params()) trainable += p.tensor->requires_grad() ? 1 : 0;
        CHECK(trainable > 0);
        for (auto& p : model.denoiser.params()) CHECK_FALSE(p.tensor->requires_grad());
    }
    SUBCASE("degenerate constant model is a stationary point") {
        auto dead = tiny_model(grammar, 403);
        for (auto& p : dead.denoiser.params()) std::fill(p.tensor->values().begin(), p.tensor->values().end(), 0.0);
        diffusion::snapshot_frozen(dead);
        AttackConfig cfg;
        cfg.steps = 4;
        cfg.optimizer = OptimizerKind::plain_gd;
        auto r = multi_step_attack(dead, *dead.frozen, prompt, bank, cfg, 11);
        // delta_0 replay: same stream as inside the attack
        RngStream init(11, "attack_init");
        auto d0 = Tensor<double>::randn({cfg.token_budget, 8}, init, cfg.init_scale);
        CHECK(r.pert.delta.values() == d0.values());
        for (double l : r.loss_trajectory) CHECK(l == 0.0);
    }
    SUBCASE("K=1 with sign_gd equals an explicit fgsm_step of the step-0 gradient") {
        AttackConfig cfg;
        cfg.steps = 1;
        cfg.optimizer = OptimizerKind::sign_gd;
        cfg.timestep_samples = 2;
        auto r = multi_step_attack(model, frozen, prompt, bank, cfg, 55);
        RngStream init(55, "attack_init");
        auto d0 = Tensor<double>::randn({cfg.token_budget, 8}, init, cfg.init_scale);
        for (int64_t i = 0; i < d0.size(); ++i) {
            const double moved = std::abs(r.pert.delta.data()[i] - d0.data()[i]);
            CHECK((moved == doctest::Approx(0.0) || moved == doctest::Approx(cfg.step_size)));
        }
    }
    SUBCASE("attack loss decreases on average over seeds (descent sanity)") {
        // light training first so the landscape is not the random-init one
        auto trained = tiny_model(grammar, 405);
        trained.train_all();
        Optimizer<double> opt(OptimizerKind::adam, 1e-2);
        auto params = trained.params();
        auto st = tiny_states(4, 407);
        RngStream erng(409, "eps");
        auto eps = Tensor<double>::randn(st.x_t.shape(), erng);
        for (int i = 0; i < 150; ++i) {
            zero_grads(params);
            auto cond = trained.encoder.encode_tokens_pooled(prompt);
            auto loss = mse(diffusion::denoise_predict(trained, st.x_t, st.ts, cond), eps);
            backward(loss);
            opt.step(params);
        }
        diffusion::snapshot_frozen(trained);
        // push the live model away from theta_o so the attack has a target
        for (auto& p : trained.encoder.params())
            for (auto& v : p.tensor->values()) v += 0.02;

        AttackConfig cfg;
        cfg.steps = 12;
        cfg.step_size = 5e-2;
        cfg.timestep_samples = 2;
        cfg.resample_states = false;
        double first = 0, last = 0;
        const int runs = 10;
        for (int s = 0; s < runs; ++s) {
            auto r = multi_step_attack(trained, *trained.frozen, prompt, bank, cfg, 500 + static_cast<uint64_t>(s));
            first += r.loss_trajectory.front();
            last += r.loss_trajectory.back();
        }
        CHECK(last / runs < first / runs);
    }
    SUBCASE("K < 1 rejected") {
        AttackConfig cfg;
        cfg.steps = 0;
        CHECK_THROWS_AS(multi_step_attack(model, frozen, prompt, bank, cfg, 1), std::invalid_argument);
    }
}

TEST_CASE("test_attack mechanics (float path)") {
    diffusion::ModelF model;
    auto ec = tiny_encoder_config(grammar.vocab_size());
    model.encoder = text::EncoderStack<float>(ec, grammar.hash(), 501);
    auto uc = tiny_unet_config();
    uc.image_size = toy::kImageSize;
    model.denoiser = diffusion::UNet<float>(uc, 503);
    model.schedule = diffusion::NoiseSchedule::standard();

    auto x0 = toy::generate_image(toy::ConceptLabel{toy::Shape::circle, toy::Color::red}, 77);
    TestAttackConfig cfg;
    cfg.iterations = 6;
    cfg.timestep_pool = 8;
    cfg.n_samples = 2;

    auto r1 = test_attack(model, x0, grammar.tokenize("a red circle"), grammar, cfg, 9);
    CHECK(r1.loss_trajectory.size() == 6);
    CHECK(r1.samples.size() == 2);
    CHECK(r1.pert.delta.dim(0) == cfg.token_budget);

    auto r2 = test_attack(model, x0, grammar.tokenize("a red circle"), grammar, cfg, 9);
    CHECK(r1.pert.delta.values() == r2.pert.delta.values());
    CHECK(r1.loss_trajectory == r2.loss_trajectory);
    CHECK(r1.samples[0].chw == r2.samples[0].chw);
}
