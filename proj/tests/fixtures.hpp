// Shared random instances for tests.
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "cfu/network.hpp"

namespace fixture {

/// Small dense classifier: 2-6 inputs, one or two hidden relu layers with a
/// dropout layer after each (rate 0 by default), 2-4 classes.
inline cfu::Network random_net(std::uint64_t seed, double dropout = 0.0) {
    cfu::Rng rng(seed);
    auto pick = [&](std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); };
    const std::size_t in = pick(2, 6), classes = pick(2, 4), depth = pick(1, 2);
    std::vector<cfu::LayerSpec> layers;
    std::size_t width = in;
    for (std::size_t d = 0; d < depth; ++d) {
        const std::size_t h = pick(3, 8);
        layers.push_back(cfu::LayerSpec::dense(width, h));
        layers.push_back(cfu::LayerSpec::relu());
        layers.push_back(cfu::LayerSpec::dropout(dropout));
        width = h;
    }
    layers.push_back(cfu::LayerSpec::dense(width, classes));
    cfu::Network net({in}, layers, cfu::OutputHead::Softmax, seed ^ 0x5eedULL);
    // Non-zero biases so relu kinks do not line up with the origin.
    for (auto& p : net.parameters())
        if (p.shape.size() == 1)
            for (auto& v : p.values) v = 0.5 * (2.0 * cfu::uniform01(rng) - 1.0);
    return net;
}

inline std::vector<double> random_matrix(cfu::Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = scale * (2.0 * cfu::uniform01(rng) - 1.0);
    return v;
}

inline std::vector<int> random_labels(cfu::Rng& rng, std::size_t n, std::size_t classes) {
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng() % classes);
    return y;
}

}  // namespace fixture
