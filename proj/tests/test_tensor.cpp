#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "advlab/optim.hpp"
#include "advlab/tensor.hpp"
#include "advlab/tensor_image.hpp"

using namespace advlab;

namespace {

// Central-difference check of d(loss)/d(leaf) against the reverse-mode grads.
// The loss builder must rebuild the graph from the leaf values on every call.
double max_rel_grad_error(Tensor<double>& leaf, const std::function<Tensor<double>()>& loss_fn, double h = 1e-5) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
    auto loss = loss_fn();
    backward(loss);
    std::vector<double> analytic(leaf.grad());

    double worst = 0.0;
    for (int64_t i = 0; i < leaf.size(); ++i) {
        const double keep = leaf.data()[i];
        leaf.data()[i] = keep + h;
        const double up = loss_fn().data()[0];
        leaf.data()[i] = keep - h;
        const double dn = loss_fn().data()[0];
        leaf.data()[i] = keep;
        const double fd = (up - dn) / (2 * h);
        const double denom = std::max({std::abs(fd), std::abs(analytic[static_cast<size_t>(i)]), 1e-8});
        worst = std::max(worst, std::abs(fd - analytic[static_cast<size_t>(i)]) / denom);
    }
    return worst;
}

}  // namespace

TEST_CASE("elementwise ops forward values") {
    auto a = Tensor<double>::from_vector({3}, {1.0, -2.0, 3.0});
    auto b = Tensor<double>::from_vector({3}, {0.5, 4.0, -1.0});
    CHECK(add(a, b).data()[1] == doctest::Approx(2.0));
    CHECK(sub(a, b).data()[0] == doctest::Approx(0.5));
    CHECK(mul(a, b).data()[2] == doctest::Approx(-3.0));
    CHECK(scale(a, 2.0).data()[0] == doctest::Approx(2.0));
    auto s = silu(a);
    CHECK(s.data()[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
}

TEST_CASE("matmul against hand computation") {
    auto a = Tensor<double>::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor<double>::from_vector({3, 2}, {7, 8, 9, 10, 11, 12});
    auto c = matmul(a, b);
    CHECK(c.at({0, 0}) == doctest::Approx(58));
    CHECK(c.at({0, 1}) == doctest::Approx(64));
    CHECK(c.at({1, 0}) == doctest::Approx(139));
    CHECK(c.at({1, 1}) == doctest::Approx(154));
}

TEST_CASE("gradients match finite differences across op zoo") {
    RngStream rng(7, "fd");

    SUBCASE("mse over chain of elementwise ops") {
        auto x = Tensor<double>::randn({4, 5}, rng);
        auto t = Tensor<double>::randn({4, 5}, rng);
        auto fn = [&] { return mse(silu(scale(x, 1.3)), t); };
        CHECK(max_rel_grad_error(x, fn) < 1e-6);
    }
    SUBCASE("matmul + linear") {
        auto x = Tensor<double>::randn({3, 4}, rng);
        auto w = Tensor<double>::randn({4, 6}, rng);
        auto b = Tensor<double>::randn({6}, rng);
        auto t = Tensor<double>::randn({3, 6}, rng);
        auto fn = [&] { return mse(linear(x, w, b), t); };
        CHECK(max_rel_grad_error(x, fn) < 1e-6);
        CHECK(max_rel_grad_error(w, fn) < 1e-6);
        CHECK(max_rel_grad_error(b, fn) < 1e-6);
    }
    SUBCASE("matmul_nt") {
        auto a = Tensor<double>::randn({3, 4}, rng);
        auto b = Tensor<double>::randn({5, 4}, rng);
        auto t = Tensor<double>::randn({3, 5}, rng);
        auto fn = [&] { return mse(matmul_nt(a, b), t); };
        CHECK(max_rel_grad_error(a, fn) < 1e-6);
        CHECK(max_rel_grad_error(b, fn) < 1e-6);
    }
    SUBCASE("softmax + layer_norm") {
        auto x = Tensor<double>::randn({4, 6}, rng);
        auto g = Tensor<double>::randn({6}, rng, 0.3);
        auto be = Tensor<double>::randn({6}, rng, 0.3);
        auto t = Tensor<double>::randn({4, 6}, rng);
        auto fn = [&] { return mse(softmax_rows(layer_norm(x, g, be)), t); };
        CHECK(max_rel_grad_error(x, fn) < 1e-5);
        CHECK(max_rel_grad_error(g, fn) < 1e-5);
        CHECK(max_rel_grad_error(be, fn) < 1e-5);
    }
    SUBCASE("conv3x3 + group_norm + film image path") {
        auto x = Tensor<double>::randn({2, 4, 6, 6}, rng);
        auto w = Tensor<double>::randn({4, 4, 3, 3}, rng, 0.4);
        auto b = Tensor<double>::randn({4}, rng, 0.2);
        auto gam = Tensor<double>::full({4}, 1.0);
        auto bet = Tensor<double>::zeros({4});
        auto s = Tensor<double>::randn({2, 4}, rng, 0.3);
        auto sh = Tensor<double>::randn({2, 4}, rng, 0.3);
        auto t = Tensor<double>::randn({2, 4, 6, 6}, rng);
        auto fn = [&] { return mse(film(group_norm(conv3x3(x, w, b), gam, bet, 2), s, sh), t); };
        CHECK(max_rel_grad_error(x, fn) < 1e-5);
        CHECK(max_rel_grad_error(w, fn) < 1e-5);
        CHECK(max_rel_grad_error(b, fn) < 1e-5);
        CHECK(max_rel_grad_error(gam, fn) < 1e-5);
        CHECK(max_rel_grad_error(s, fn) < 1e-5);
        CHECK(max_rel_grad_error(sh, fn) < 1e-5);
    }
    SUBCASE("pooling, upsample, concat") {
        auto x = Tensor<double>::randn({2, 3, 4, 4}, rng);
        auto y = Tensor<double>::randn({2, 2, 4, 4}, rng);
        auto t = Tensor<double>::randn({2, 5, 8, 8}, rng);
        auto fn = [&] { return mse(upsample_nearest2(concat_channels(avg_pool2(upsample_nearest2(x)), avg_pool2(upsample_nearest2(y)))), t); };
        CHECK(max_rel_grad_error(x, fn) < 1e-6);
        CHECK(max_rel_grad_error(y, fn) < 1e-6);
    }
    SUBCASE("gather + mean_rows + repeat_row") {
        auto table = Tensor<double>::randn({7, 5}, rng);
        std::vector<int> ids{1, 3, 3, 6};
        auto t = Tensor<double>::randn({4, 5}, rng);
        auto fn = [&] { return mse(repeat_row(mean_rows(gather_rows(table, ids)), 4), t); };
        CHECK(max_rel_grad_error(table, fn) < 1e-6);
    }
    SUBCASE("rows/cols slicing and concatenation") {
        auto a = Tensor<double>::randn({4, 6}, rng);
        auto t = Tensor<double>::randn({6, 3}, rng);
        auto fn = [&] {
            auto top = slice_rows(a, 0, 2);
            auto cat = concat_rows(concat_rows(top, slice_rows(a, 1, 2)), slice_rows(a, 2, 2));
            return mse(slice_cols(cat, 1, 3), t);
        };
        CHECK(max_rel_grad_error(a, fn) < 1e-6);
    }
    SUBCASE("cross entropy") {
        auto x = Tensor<double>::randn({5, 4}, rng);
        std::vector<int> labels{0, 2, 1, 3, 2};
        auto fn = [&] { return cross_entropy_logits(x, labels); };
        CHECK(max_rel_grad_error(x, fn) < 1e-6);
    }
    SUBCASE("global pooling") {
        auto x = Tensor<double>::randn({2, 3, 4, 4}, rng);
        auto t = Tensor<double>::randn({2, 3}, rng);
        auto fn = [&] { return mse(global_avg_pool(x), t); };
        CHECK(max_rel_grad_error(x, fn) < 1e-6);
    }
}

TEST_CASE("frozen inputs build no tape") {
    RngStream rng(3, "tape");
    auto x = Tensor<double>::randn({2, 2}, rng);
    auto w = Tensor<double>::randn({2, 2}, rng);
    auto y = matmul(x, w);
    CHECK_FALSE(y.node()->needs_grad);
    CHECK(y.node()->parents.empty());

    w.set_requires_grad(true);
    auto y2 = matmul(x, w);
    CHECK(y2.node()->needs_grad);
    auto d = detach(y2);
    CHECK_FALSE(d.node()->needs_grad);
}

TEST_CASE("grad accumulates across repeated use of one tensor") {
    auto x = Tensor<double>::from_vector({2}, {3.0, -1.0});
    x.set_requires_grad(true);
    auto loss = mean_all(mul(x, x));  // d/dx mean(x^2) = x
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(3.0));
    CHECK(x.grad()[1] == doctest::Approx(-1.0));
}

TEST_CASE("optimizers") {
    SUBCASE("sign_gd moves by exactly lr in -sign direction; sign(0)=0") {
        auto p = Tensor<double>::from_vector({3}, {1.0, 1.0, 1.0});
        p.set_requires_grad(true);
        p.zero_grad();
        auto loss = mean_all(mul(p, Tensor<double>::from_vector({3}, {3.0, -2.0, 0.0})));
        backward(loss);
        ParamList<double> params{{"p", &p}};
        Optimizer<double> opt(OptimizerKind::sign_gd, 0.25);
        opt.step(params);
        CHECK(p.data()[0] == doctest::Approx(0.75));
        CHECK(p.data()[1] == doctest::Approx(1.25));
        CHECK(p.data()[2] == doctest::Approx(1.0));
    }
    SUBCASE("adam converges on a quadratic") {
        auto p = Tensor<double>::from_vector({2}, {4.0, -3.0});
        p.set_requires_grad(true);
        ParamList<double> params{{"p", &p}};
        Optimizer<double> opt(OptimizerKind::adam, 0.1);
        for (int i = 0; i < 300; ++i) {
            zero_grads(params);
            auto loss = mse(p, Tensor<double>::zeros({2}));
            backward(loss);
            opt.step(params);
        }
        CHECK(std::abs(p.data()[0]) < 1e-3);
        CHECK(std::abs(p.data()[1]) < 1e-3);
    }
    SUBCASE("non-trainable params are bit-identical after steps") {
        auto p = Tensor<double>::from_vector({2}, {1.5, 2.5});
        auto q = Tensor<double>::from_vector({2}, {1.0, 1.0});
        q.set_requires_grad(true);
        ParamList<double> params{{"p", &p}, {"q", &q}};
        const uint64_t before = fnv1a64_bytes(p.data(), 2 * sizeof(double));
        Optimizer<double> opt(OptimizerKind::adam, 0.05);
        for (int i = 0; i < 10; ++i) {
            zero_grads(params);
            auto loss = mse(add(q, p), Tensor<double>::zeros({2}));
            backward(loss);
            opt.step(params);
        }
        CHECK(fnv1a64_bytes(p.data(), 2 * sizeof(double)) == before);
        CHECK(q.data()[0] != 1.0);
    }
}

TEST_CASE("rng streams are deterministic and tag-separated") {
    RngStream a(42, "x", 1), b(42, "x", 1), c(42, "y", 1);
    for (int i = 0; i < 16; ++i) CHECK(a.next_u64() == b.next_u64());
    bool differs = false;
    RngStream a2(42, "x", 1);
    for (int i = 0; i < 16; ++i) differs = differs || (a2.next_u64() != c.next_u64());
    CHECK(differs);

    RngStream g(1, "norm");
    double m = 0, v = 0;
    const int n = 20000;
    std::vector<double> xs(n);
    for (auto& x : xs) x = g.normal();
    for (double x : xs) m += x;
    m /= n;
    for (double x : xs) v += (x - m) * (x - m);
    v /= n;
    CHECK(std::abs(m) < 0.03);
    CHECK(std::abs(v - 1.0) < 0.05);
}
