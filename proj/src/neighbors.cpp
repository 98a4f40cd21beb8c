#include "cfu/neighbors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <stdexcept>

namespace cfu {

double distance(Metric metric, std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    if (metric == Metric::L1) {
        for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
        return acc;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

PointIndex::PointIndex(MatrixView points, std::size_t leaf_size, Metric metric)
    : PointIndex(std::vector<double>(points.data.begin(), points.data.end()), points.cols, leaf_size, metric) {}

PointIndex::PointIndex(std::vector<double> points, std::size_t dims, std::size_t leaf_size, Metric metric)
    : points_(std::move(points)), dims_(dims), leaf_size_(std::max<std::size_t>(leaf_size, 1)), metric_(metric) {
    if (dims_ == 0) throw std::invalid_argument("point index: dimension must be positive");
    if (points_.empty()) throw std::invalid_argument("point index: empty point set");
    if (points_.size() % dims_ != 0) throw std::invalid_argument("point index: ragged point matrix");
    n_ = points_.size() / dims_;
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), 0);
    if (dims_ <= kMaxTreeDims) build(0, n_);
}

int PointIndex::build(std::size_t begin, std::size_t end) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{begin, end});
    box_lo_.resize(nodes_.size() * dims_);
    box_hi_.resize(nodes_.size() * dims_);
    double* lo = box_lo_.data() + id * dims_;
    double* hi = box_hi_.data() + id * dims_;
    for (std::size_t d = 0; d < dims_; ++d) lo[d] = hi[d] = points_[order_[begin] * dims_ + d];
    for (std::size_t i = begin + 1; i < end; ++i)
        for (std::size_t d = 0; d < dims_; ++d) {
            const double v = points_[order_[i] * dims_ + d];
            lo[d] = std::min(lo[d], v);
            hi[d] = std::max(hi[d], v);
        }

    std::size_t dim = 0;
    double spread = -1.0;
    for (std::size_t d = 0; d < dims_; ++d)
        if (hi[d] - lo[d] > spread) {
            spread = hi[d] - lo[d];
            dim = d;
        }
    if (end - begin <= leaf_size_ || spread <= 0.0) return id;

    const std::size_t mid = begin + (end - begin) / 2;
    auto less = [&](std::size_t a, std::size_t b) {
        const double va = points_[a * dims_ + dim], vb = points_[b * dims_ + dim];
        return va < vb || (va == vb && a < b);
    };
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end), less);
    nodes_[id].split_dim = dim;
    nodes_[id].split_value = points_[order_[mid] * dims_ + dim];
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
}

double PointIndex::box_distance(std::size_t node, std::span<const double> q) const {
    const double* lo = box_lo_.data() + node * dims_;
    const double* hi = box_hi_.data() + node * dims_;
    double acc = 0.0;
    for (std::size_t d = 0; d < dims_; ++d) {
        double gap = 0.0;
        if (q[d] < lo[d]) gap = lo[d] - q[d];
        else if (q[d] > hi[d]) gap = q[d] - hi[d];
        acc += metric_ == Metric::L1 ? gap : gap * gap;
    }
    return metric_ == Metric::L1 ? acc : std::sqrt(acc);
}

struct PointIndex::Search {
    std::span<const double> q;
    std::size_t k;
    std::optional<std::size_t> exclude;
    // max-heap on (distance, id): top is the current worst kept neighbour
    std::priority_queue<Neighbor, std::vector<Neighbor>, decltype(&neighbor_less)> heap{&neighbor_less};

    void offer(const Neighbor& n) {
        if (heap.size() < k) {
            heap.push(n);
        } else if (neighbor_less(n, heap.top())) {
            heap.pop();
            heap.push(n);
        }
    }
};

void PointIndex::search(int node_id, Search& s) const {
    const Node& node = nodes_[node_id];
    if (node.left < 0) {
        for (std::size_t i = node.begin; i < node.end; ++i) {
            const std::size_t id = order_[i];
            if (s.exclude && *s.exclude == id) continue;
            s.offer({id, distance(metric_, s.q, point(id))});
        }
        return;
    }
    const bool go_left = s.q[node.split_dim] < node.split_value;
    const int first = go_left ? node.left : node.right;
    const int second = go_left ? node.right : node.left;
    for (int child : {first, second}) {
        // Equal bounds are still visited so id tie-breaks stay exact; the slack
        // absorbs rounding differences between the box bound and the point distance.
        if (s.heap.size() == s.k && box_distance(child, s.q) > s.heap.top().distance * (1.0 + 1e-12) + 1e-300)
            continue;
        search(child, s);
    }
}

std::vector<Neighbor> PointIndex::knn(std::span<const double> query, std::size_t k,
                                      std::optional<std::size_t> exclude) const {
    if (query.size() != dims_) throw std::invalid_argument("knn: query dimension mismatch");
    if (k == 0) throw std::invalid_argument("knn: k must be at least 1");
    if (exclude && *exclude >= n_) exclude.reset();
    const std::size_t available = n_ - (exclude ? 1 : 0);
    Search s{query, std::min(k, available), exclude};
    if (s.k == 0) return {};
    if (uses_tree()) {
        search(0, s);
    } else {
        for (std::size_t id = 0; id < n_; ++id) {
            if (exclude && *exclude == id) continue;
            s.offer({id, distance(metric_, query, point(id))});
        }
    }
    std::vector<Neighbor> out(s.heap.size());
    for (std::size_t i = out.size(); i-- > 0;) {
        out[i] = s.heap.top();
        s.heap.pop();
    }
    return out;
}

}  // namespace cfu
