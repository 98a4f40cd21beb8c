#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "cfu/tensor.hpp"

namespace cfu {

enum class Metric { L1, L2 };

double distance(Metric metric, std::span<const double> a, std::span<const double> b);

struct Neighbor {
    std::size_t id = 0;
    double distance = 0.0;

    bool operator==(const Neighbor&) const = default;
};

/// Orders by distance, then by point id.
inline bool neighbor_less(const Neighbor& a, const Neighbor& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.id < b.id);
}

/// Exact k-nearest-neighbour index over a fixed point set.
///
/// Median-split kd-tree on the widest-spread dimension; above kMaxTreeDims
/// dimensions the index answers by brute force. Either way results are exact,
/// sorted by (distance, id), and immutable after construction.
class PointIndex {
public:
    static constexpr std::size_t kMaxTreeDims = 64;

    PointIndex(std::vector<double> points, std::size_t dims, std::size_t leaf_size = 40, Metric metric = Metric::L2);
    PointIndex(MatrixView points, std::size_t leaf_size = 40, Metric metric = Metric::L2);

    /// min(k, N) nearest points (min(k, N-1) when `exclude` names an indexed point).
    std::vector<Neighbor> knn(std::span<const double> query, std::size_t k,
                              std::optional<std::size_t> exclude = std::nullopt) const;

    std::size_t size() const { return n_; }
    std::size_t dims() const { return dims_; }
    Metric metric() const { return metric_; }
    bool uses_tree() const { return !nodes_.empty(); }
    std::size_t node_count() const { return nodes_.size(); }
    std::span<const double> point(std::size_t i) const { return {points_.data() + i * dims_, dims_}; }

private:
    struct Node {
        std::size_t begin = 0, end = 0;  // range into order_
        std::size_t split_dim = 0;
        double split_value = 0.0;
        int left = -1, right = -1;  // -1 for leaves
    };

    std::vector<double> points_;
    std::size_t n_ = 0;
    std::size_t dims_ = 0;
    std::size_t leaf_size_ = 40;
    Metric metric_ = Metric::L2;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;
    std::vector<double> box_lo_, box_hi_;  // per node bounding boxes, node_count x dims

    int build(std::size_t begin, std::size_t end);
    double box_distance(std::size_t node, std::span<const double> q) const;
    struct Search;
    void search(int node, Search& s) const;
};

}  // namespace cfu
