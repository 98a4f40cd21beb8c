#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cfu/network.hpp"

namespace cfu {

struct SoftmaxConfidence {
    std::size_t predicted_class = 0;
    double probability = 0.0;
};

/// Deterministic prediction and its softmax probability. Ties go to the lowest class id.
SoftmaxConfidence softmax_confidence(const Network& net, std::span<const double> x);

struct MCDropoutConfig {
    std::size_t passes = 100;
    std::uint64_t seed = 0;
};

/// Per-class Monte Carlo statistics of the class-probability output.
///
/// For the one-hot class indicator, epistemic (variance of the per-pass
/// probability) plus aleatoric (mean per-pass Bernoulli variance) equals
/// mean * (1 - mean).
struct PredictiveSummary {
    std::vector<double> softmax;  // deterministic forward
    std::vector<double> mean;
    std::vector<double> std;      // population std over passes
    std::vector<double> epistemic;
    std::vector<double> aleatoric;
    std::size_t predicted_class = 0;   // argmax of the deterministic softmax
    std::size_t designated_class = 0;  // class the scalar summaries below refer to
    double mc_mean = 0.0;
    double mc_std = 0.0;
};

/// Pass t draws its dropout masks from derive_rng(cfg.seed, t), so passes are
/// reproducible and independent of evaluation order.
PredictiveSummary mc_dropout(const Network& net, std::span<const double> x, const MCDropoutConfig& cfg,
                             std::optional<std::size_t> designated_class = std::nullopt);

}  // namespace cfu
