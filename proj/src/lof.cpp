#include "cfu/lof.hpp"

#include <algorithm>
#include <stdexcept>

#include "cfu/trust_score.hpp"

namespace cfu {

namespace {

std::vector<double> canonical_points(MatrixView train, std::vector<std::size_t>& position) {
    const auto order = canonical_order(train);
    position.assign(train.rows, 0);
    std::vector<double> out;
    out.reserve(train.data.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        position[order[i]] = i;
        const auto r = train.row(order[i]);
        out.insert(out.end(), r.begin(), r.end());
    }
    return out;
}

std::vector<double> checked_points(MatrixView train, const LofConfig& cfg, std::vector<std::size_t>& position) {
    if (cfg.k == 0) throw std::invalid_argument("lof: k must be at least 1");
    if (train.rows <= cfg.k)
        throw std::invalid_argument("lof: need more than k=" + std::to_string(cfg.k) + " training points, got " +
                                    std::to_string(train.rows));
    return canonical_points(train, position);
}

}  // namespace

LofModel::LofModel(MatrixView train, LofConfig cfg)
    : cfg_(cfg), index_(checked_points(train, cfg, position_), train.cols, cfg.leaf_size) {
    const std::size_t n = index_.size();
    std::vector<std::vector<Neighbor>> nn(n);
    k_distance_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        nn[i] = index_.knn(index_.point(i), cfg_.k, i);
        k_distance_[i] = nn[i].back().distance;
    }
    lrd_.resize(n);
    for (std::size_t i = 0; i < n; ++i) lrd_[i] = lrd_from(nn[i]);
}

double LofModel::lrd_from(const std::vector<Neighbor>& nn) const {
    double reach = 0.0;
    for (const auto& o : nn) reach += std::max(k_distance_[o.id], o.distance);
    return 1.0 / (reach / static_cast<double>(nn.size()) + cfg_.epsilon);
}

double LofModel::query_lrd(std::span<const double> x) const { return lrd_from(index_.knn(x, cfg_.k)); }

LofScore LofModel::score(std::span<const double> x) const {
    const auto nn = index_.knn(x, cfg_.k);
    double neighbour_lrd = 0.0;
    for (const auto& o : nn) neighbour_lrd += lrd_[o.id];
    neighbour_lrd /= static_cast<double>(nn.size());
    const double value = neighbour_lrd / lrd_from(nn);
    return {value, value > cfg_.threshold};
}

}  // namespace cfu
