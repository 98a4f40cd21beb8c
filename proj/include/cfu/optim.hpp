#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "cfu/network.hpp"

namespace cfu {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adam over a fixed list of parameter blocks. State is created on the first step
/// and the block layout must not change afterwards.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(std::span<std::vector<double>* const> blocks, const ParamGrads& grads);
    void step(std::vector<double>& block, std::span<const double> grad);

    /// Advances the moments for a single block and returns the update that step()
    /// would subtract, without touching the parameters.
    std::vector<double> update(std::span<const double> grad);

    void reset();
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
    ParamGrads m_, v_;

    void ensure_state(const ParamGrads& grads);
};

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 256;
    AdamConfig adam{};
    std::uint64_t seed = 0;
};

struct TrainReport {
    double initial_loss = 0.0;        // eval-mode cross-entropy before the first update
    std::vector<double> loss_history;  // eval-mode cross-entropy after each epoch
};

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Minibatch Adam on mean softmax cross-entropy. Dropout is active during updates.
TrainReport train(Network& net, MatrixView features, std::span<const int> labels, const TrainConfig& cfg);

}  // namespace cfu
