#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cfu/neighbors.hpp"
#include "cfu/network.hpp"
#include "cfu/optim.hpp"

namespace cfu {

struct AutoencoderConfig {
    std::vector<std::size_t> hidden{32};  // encoder widths; the decoder mirrors them
    std::size_t latent_dim = 8;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    AdamConfig adam{};
    std::uint64_t seed = 0;
    double mse_ceiling = 0.05;  // training fails when final reconstruction MSE exceeds this
};

/// Dense encoder/decoder pair with identity output heads.
struct Autoencoder {
    Network encoder;
    Network decoder;

    std::size_t latent_dim() const { return encoder.output_size(); }
    std::vector<double> encode(std::span<const double> x) const { return encoder.forward(x); }
    std::vector<double> decode(std::span<const double> z) const { return decoder.forward(z); }
    std::vector<double> reconstruct(std::span<const double> x) const { return decode(encode(x)); }
    std::vector<const Network*> chain() const { return {&encoder, &decoder}; }
};

struct AutoencoderReport {
    double initial_mse = 0.0;
    std::vector<double> mse_history;  // after each epoch
};

Autoencoder make_autoencoder(std::size_t input_dim, const AutoencoderConfig& cfg);

/// Mean over rows of ||x - reconstruct(x)||^2 / dims.
double reconstruction_mse(const Autoencoder& ae, MatrixView data);

/// Minibatch Adam on reconstruction MSE. Throws DivergenceError on non-finite loss
/// and std::runtime_error when the final MSE is above cfg.mse_ceiling.
Autoencoder train_autoencoder(MatrixView data, const AutoencoderConfig& cfg, AutoencoderReport* report = nullptr);

struct ClassPrototype {
    int class_id = 0;
    std::vector<double> latent;
    std::size_t members = 0;  // encodings averaged
};

struct PrototypeSelection {
    int target_class = 0;
    std::vector<ClassPrototype> prototypes;  // one per class present, ascending class id
};

/// Encoded training set, indexed per class in latent space.
class PrototypeBank {
public:
    PrototypeBank(const Autoencoder& ae, MatrixView train, std::span<const int> labels, std::size_t leaf_size = 40);

    /// Prototype of class j: mean encoding of the k nearest class-j points to enc(x).
    /// Target: the class j != predicted_class with the nearest prototype, ties to the lower id.
    PrototypeSelection select(std::span<const double> x, int predicted_class, std::size_t k) const;

    const Autoencoder& autoencoder() const { return *ae_; }

private:
    const Autoencoder* ae_;
    std::vector<std::optional<PointIndex>> latent_;  // per class
};

}  // namespace cfu
