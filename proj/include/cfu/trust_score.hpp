#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfu/neighbors.hpp"

namespace cfu {

enum class TrustDistance {
    Point,  // distance to the k-th nearest neighbour of the class
    Mean,   // mean distance to the k nearest neighbours of the class
};

struct TrustScoreConfig {
    std::size_t k = 10;
    double alpha = 0.0;  // fraction of each class dropped, least dense first
    TrustDistance dist_type = TrustDistance::Point;
    std::size_t leaf_size = 40;
    double epsilon = 1e-12;  // added to the predicted-class distance
};

/// Ratio of the distance to the nearest other class over the distance to the
/// predicted class, both measured against per-class neighbour indexes.
///
/// Each class's points are sorted by coordinates before indexing, which makes
/// every score independent of the order of the training rows.
class TrustScoreModel {
public:
    TrustScoreModel(MatrixView features, std::span<const int> labels, TrustScoreConfig cfg = {});

    double score(std::span<const double> x, int predicted_class) const;

    /// Distance from x to class c under the configured dist_type.
    double class_distance(std::span<const double> x, int c) const;

    bool has_class(int c) const;
    std::size_t class_count() const { return classes_.size(); }
    std::size_t effective_k(int c) const;
    /// Kept (post-filter) points of class c in canonical order, rows x dims.
    const PointIndex& class_index(int c) const;
    const TrustScoreConfig& config() const { return cfg_; }
    const std::vector<std::string>& warnings() const { return warnings_; }

private:
    struct ClassIndex {
        std::optional<PointIndex> index;
        std::size_t k = 0;
    };
    TrustScoreConfig cfg_;
    std::vector<ClassIndex> classes_;  // indexed by label
    std::vector<std::string> warnings_;
};

inline TrustScoreModel trust_fit(MatrixView features, std::span<const int> labels, TrustScoreConfig cfg = {}) {
    return TrustScoreModel(features, labels, cfg);
}

/// Row indices of `rows` (a rows x dims block) sorted lexicographically by coordinates, then by index.
std::vector<std::size_t> canonical_order(MatrixView rows);

}  // namespace cfu
