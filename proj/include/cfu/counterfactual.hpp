#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfu/autoencoder.hpp"
#include "cfu/network.hpp"
#include "cfu/trust_score.hpp"
#include "cfu/uncertainty.hpp"

namespace cfu {

enum class CfMethod { Nun, Wachter, Proto };
std::string to_string(CfMethod m);

struct WachterConfig {
    double target_proba = 0.5;
    double tol = 0.01;
    double lambda_init = 0.1;
    std::size_t lambda_steps = 10;
    std::size_t max_iter = 1000;
    double learning_rate = 1e-2;
    std::optional<int> target_class;  // unset: runner-up class of the original prediction
};

struct ProtoCfConfig {
    double c_init = 1.0;
    std::size_t c_steps = 2;
    double beta = 0.1;
    double gamma = 100.0;        // reconstruction weight
    double theta_proto = 100.0;  // prototype weight
    double kappa = 0.0;
    std::size_t k_proto = 10;
    std::size_t max_iter = 1000;
    double learning_rate = 1e-2;
    std::optional<int> target_class;  // unset: nearest prototype (runner-up without a bank)
};

struct CfMetrics {
    std::size_t sparsity = 0;  // features changed by more than 1e-6
    double l1 = 0.0;
    double l2 = 0.0;
    double trust = 0.0;
    PredictiveSummary summary;  // designated class = counterfactual class
};

struct CounterfactualResult {
    CfMethod method = CfMethod::Nun;
    std::vector<double> x_cf;
    int original_class = 0;
    int target_class = 0;
    std::string target_policy;
    bool valid = false;
    std::size_t iterations = 0;
    std::map<std::string, double> loss_terms;
    std::vector<std::vector<double>> loss_traces;  // one per outer (lambda / c) step
    std::optional<std::size_t> source_row;         // training row returned by NUN
    std::optional<CfMetrics> metrics;
};

/// Nearest unlike neighbour retrieval over per-class L2 indexes.
class NunSearcher {
public:
    NunSearcher(MatrixView train, std::span<const int> labels, std::size_t leaf_size = 40);

    struct Hit {
        std::size_t row = 0;
        int label = 0;
        double distance = 0.0;
    };

    /// Closest training row outside `predicted_class` (or inside `target` when given);
    /// ties go to the lower row index.
    Hit find(std::span<const double> x, int predicted_class, std::optional<int> target = std::nullopt) const;

    std::span<const double> row(std::size_t r) const { return {data_.data() + r * dims_, dims_}; }

private:
    std::vector<double> data_;
    std::size_t dims_ = 0;
    std::vector<int> labels_;
    std::vector<std::optional<PointIndex>> per_class_;
    std::vector<std::vector<std::size_t>> rows_;  // class-local id -> training row
};

CounterfactualResult nun_cf(const NunSearcher& searcher, const Network& net, std::span<const double> x,
                            std::optional<int> target = std::nullopt);

/// Minimises (p_target - target_proba)^2 + lambda * ||x' - x||_1 with Adam and
/// step halving; lambda is bisected over lambda_steps outer rounds.
CounterfactualResult wachter_cf(const Network& net, std::span<const double> x, const WachterConfig& cfg,
                                std::optional<FeatureRange> range = std::nullopt);

/// True when p_target is within tol of target_proba or above it.
bool wachter_valid(double p_target, const WachterConfig& cfg);

/// Minimises c*L_pred + beta*L1 + L2 + gamma*L_AE + theta*L_proto. The bank may be
/// null only when gamma and theta_proto are both zero.
CounterfactualResult proto_cf(const Network& net, const PrototypeBank* bank, std::span<const double> x,
                              const ProtoCfConfig& cfg, std::optional<FeatureRange> range = std::nullopt);

CfMetrics evaluate_cf(std::span<const double> x, const CounterfactualResult& result, const Network& net,
                      const TrustScoreModel& trust, const MCDropoutConfig& mc);

nlohmann::json to_json(const CounterfactualResult& r, bool include_instance = false);

}  // namespace cfu
