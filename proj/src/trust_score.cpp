#include "cfu/trust_score.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace cfu {

std::vector<std::size_t> canonical_order(MatrixView rows) {
    std::vector<std::size_t> order(rows.rows);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto ra = rows.row(a), rb = rows.row(b);
        for (std::size_t d = 0; d < rows.cols; ++d)
            if (ra[d] != rb[d]) return ra[d] < rb[d];
        return a < b;
    });
    return order;
}

TrustScoreModel::TrustScoreModel(MatrixView features, std::span<const int> labels, TrustScoreConfig cfg)
    : cfg_(cfg) {
    if (cfg_.k == 0) throw std::invalid_argument("trust score: k must be at least 1");
    if (!(cfg_.alpha >= 0.0 && cfg_.alpha < 1.0)) throw std::invalid_argument("trust score: alpha must lie in [0, 1)");
    if (labels.size() != features.rows) throw std::invalid_argument("trust score: label count mismatch");
    if (features.rows == 0) throw std::invalid_argument("trust score: empty training set");

    int max_label = -1;
    for (int y : labels) {
        if (y < 0) throw std::invalid_argument("trust score: negative label");
        max_label = std::max(max_label, y);
    }
    std::vector<std::vector<double>> per_class(static_cast<std::size_t>(max_label) + 1);
    for (std::size_t i = 0; i < features.rows; ++i) {
        const auto r = features.row(i);
        per_class[labels[i]].insert(per_class[labels[i]].end(), r.begin(), r.end());
    }
    const std::size_t present = static_cast<std::size_t>(
        std::count_if(per_class.begin(), per_class.end(), [](const auto& v) { return !v.empty(); }));
    if (present < 2) throw std::invalid_argument("trust score: need at least two distinct classes");

    const std::size_t D = features.cols;
    classes_.resize(per_class.size());
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        if (per_class[c].empty()) continue;
        const std::size_t n = per_class[c].size() / D;
        const MatrixView raw(per_class[c], n, D);
        std::vector<double> sorted;
        sorted.reserve(per_class[c].size());
        for (auto i : canonical_order(raw)) {
            const auto r = raw.row(i);
            sorted.insert(sorted.end(), r.begin(), r.end());
        }

        if (cfg_.alpha > 0.0 && n > 1) {
            const PointIndex full(sorted, D, cfg_.leaf_size);
            const std::size_t kf = std::min(cfg_.k, n - 1);
            std::vector<std::pair<double, std::size_t>> radius(n);
            for (std::size_t i = 0; i < n; ++i) radius[i] = {full.knn(full.point(i), kf, i).back().distance, i};
            std::sort(radius.begin(), radius.end());
            const auto drop = std::min<std::size_t>(
                n - 1, static_cast<std::size_t>(std::ceil(cfg_.alpha * static_cast<double>(n) - 1e-9)));
            std::vector<std::size_t> keep;
            for (std::size_t i = 0; i < n - drop; ++i) keep.push_back(radius[i].second);
            std::sort(keep.begin(), keep.end());
            std::vector<double> kept;
            for (auto i : keep) {
                const auto p = full.point(i);
                kept.insert(kept.end(), p.begin(), p.end());
            }
            sorted = std::move(kept);
        }

        const std::size_t kept_n = sorted.size() / D;
        auto& ci = classes_[c];
        ci.k = std::min(cfg_.k, kept_n);
        if (ci.k < cfg_.k)
            warnings_.push_back("class " + std::to_string(c) + " has " + std::to_string(kept_n) +
                                " points after filtering; k reduced to " + std::to_string(ci.k));
        ci.index.emplace(std::move(sorted), D, cfg_.leaf_size);
    }
}

bool TrustScoreModel::has_class(int c) const {
    return c >= 0 && static_cast<std::size_t>(c) < classes_.size() && classes_[c].index.has_value();
}

std::size_t TrustScoreModel::effective_k(int c) const {
    if (!has_class(c)) throw std::out_of_range("trust score: unknown class " + std::to_string(c));
    return classes_[c].k;
}

const PointIndex& TrustScoreModel::class_index(int c) const {
    if (!has_class(c)) throw std::out_of_range("trust score: unknown class " + std::to_string(c));
    return *classes_[c].index;
}

double TrustScoreModel::class_distance(std::span<const double> x, int c) const {
    if (!has_class(c)) throw std::out_of_range("trust score: unknown class " + std::to_string(c));
    const auto& ci = classes_[c];
    const auto nn = ci.index->knn(x, ci.k);
    if (cfg_.dist_type == TrustDistance::Point) return nn.back().distance;
    double sum = 0.0;
    for (const auto& n : nn) sum += n.distance;
    return sum / static_cast<double>(nn.size());
}

double TrustScoreModel::score(std::span<const double> x, int predicted_class) const {
    const double d_pred = class_distance(x, predicted_class);
    double d_other = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes_.size(); ++c) {
        if (static_cast<int>(c) == predicted_class || !classes_[c].index) continue;
        d_other = std::min(d_other, class_distance(x, static_cast<int>(c)));
    }
    return d_other / (d_pred + cfg_.epsilon);
}

}  // namespace cfu
