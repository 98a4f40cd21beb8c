#pragma once

#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

#include "cfu/network.hpp"

namespace cfu {

/// Term on the probability vector of a softmax classifier evaluated at x.
struct PredictionTerm {
    enum class Kind {
        SquaredToTarget,  // (p[target] - target_proba)^2
        Hinge,            // max(p[predicted] - p[target], -kappa)
        CrossEntropy,     // -log p[target]
    };
    Kind kind = Kind::SquaredToTarget;
    const Network* net = nullptr;
    int target_class = 0;
    int predicted_class = 0;
    double target_proba = 0.5;
    double kappa = 0.0;
    double weight = 1.0;
};

/// Distance from x to a fixed anchor. L0 can be evaluated but has no gradient.
struct DistanceTerm {
    enum class Kind { L1, SquaredL2, L0 };
    Kind kind = Kind::L1;
    std::vector<double> anchor;
    double weight = 1.0;
    double l0_tolerance = 1e-6;
};

/// ||x - chain(x)||^2, where chain feeds each network's output into the next.
struct ReconstructionTerm {
    std::vector<const Network*> chain;
    double weight = 1.0;
};

/// ||chain(x) - target||^2.
struct LatentTerm {
    std::vector<const Network*> chain;
    std::vector<double> target;
    double weight = 1.0;
};

using LossTerm = std::variant<PredictionTerm, DistanceTerm, ReconstructionTerm, LatentTerm>;

/// Scalar objective over an input x: a weighted sum of terms. All networks are run
/// in eval mode.
struct InputLoss {
    std::vector<LossTerm> terms;
};

struct LossValue {
    double total = 0.0;
    std::vector<double> terms;  // unweighted value of each term, in order
};

class NonDifferentiableError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

LossValue evaluate(const InputLoss& loss, std::span<const double> x);

/// Gradient of the total w.r.t. x. L1 uses sign(x - anchor) with 0 at exact ties.
std::vector<double> grad_input(const InputLoss& loss, std::span<const double> x, LossValue* value = nullptr);

/// Runs x through every network of a chain in eval mode.
std::vector<double> run_chain(std::span<const Network* const> chain, std::span<const double> x);

}  // namespace cfu
