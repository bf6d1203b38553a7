// Rough throughput probe for the hot ops; run manually, not part of ctest.
#include <chrono>
#include <cstdio>

#include "advlab/tensor.hpp"
#include "advlab/tensor_image.hpp"

using namespace advlab;

int main() {
    RngStream rng(0, "bench");
    const int n = 16, ci = 16, co = 16, h = 32, w = 32;
    auto x = Tensor<float>::randn({n, ci, h, w}, rng);
    auto wt = Tensor<float>::randn({co, ci, 3, 3}, rng, 0.1f);
    auto b = Tensor<float>::zeros({co});
    wt.set_requires_grad(true);
    b.set_requires_grad(true);
    x.set_requires_grad(true);

    const double macs = 1.0 * n * ci * co * h * w * 9;

    // forward only
    {
        auto x0 = x.clone_detached();
        auto w0 = wt.clone_detached();
        auto b0 = b.clone_detached();
        auto t0 = std::chrono::steady_clock::now();
        const int reps = 60;
        float sink = 0;
        for (int i = 0; i < reps; ++i) {
            auto y = conv3x3(x0, w0, b0);
            sink += y.data()[0];
        }
        auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("conv fwd: %.2f GFLOP/s (sink %.3f)\n", 2 * macs * reps / dt / 1e9, sink);
    }
    // forward+backward
    {
        auto t0 = std::chrono::steady_clock::now();
        const int reps = 30;
        for (int i = 0; i < reps; ++i) {
            auto y = conv3x3(x, wt, b);
            auto loss = mean_all(mul(y, y));
            backward(loss);
        }
        auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("conv fwd+bwd: %.2f GFLOP/s-equivalent (3x fwd flops assumed)\n", 3 * 2 * macs * reps / dt / 1e9);
    }
    return 0;
}
