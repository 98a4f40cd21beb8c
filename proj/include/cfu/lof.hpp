#pragma once

#include <limits>
#include <span>
#include <vector>

#include "cfu/neighbors.hpp"

namespace cfu {

struct LofConfig {
    std::size_t k = 10;
    double threshold = 1.5;
    std::size_t leaf_size = 40;
    double epsilon = 1e-10;  // added to mean reachability distances
};

struct LofScore {
    double value = 0.0;
    bool is_outlier = false;
};

/// Local Outlier Factor used as a novelty detector: fitted on training points,
/// queries are scored against the training neighbourhoods only.
class LofModel {
public:
    LofModel(MatrixView train, LofConfig cfg = {});

    LofScore score(std::span<const double> x) const;

    /// Local reachability density of an arbitrary point against the training set.
    double query_lrd(std::span<const double> x) const;

    /// Cached statistics of the training point at canonical position i.
    double k_distance(std::size_t i) const { return k_distance_[i]; }
    double lrd(std::size_t i) const { return lrd_[i]; }
    std::span<const double> point(std::size_t i) const { return index_.point(i); }
    /// Canonical position of original training row r.
    std::size_t position_of_row(std::size_t r) const { return position_[r]; }
    std::size_t size() const { return index_.size(); }
    const LofConfig& config() const { return cfg_; }

private:
    LofConfig cfg_;
    std::vector<std::size_t> position_;  // filled while index_ is built
    PointIndex index_;
    std::vector<double> k_distance_;
    std::vector<double> lrd_;

    double lrd_from(const std::vector<Neighbor>& nn) const;
};

inline LofModel lof_fit(MatrixView train, LofConfig cfg = {}) { return LofModel(train, cfg); }

}  // namespace cfu
