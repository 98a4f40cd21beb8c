#include "cfu/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace cfu {

void Adam::reset() {
    t_ = 0;
    m_.clear();
    v_.clear();
}

void Adam::ensure_state(const ParamGrads& grads) {
    if (m_.empty()) {
        for (const auto& g : grads) {
            m_.emplace_back(g.size(), 0.0);
            v_.emplace_back(g.size(), 0.0);
        }
        return;
    }
    if (m_.size() != grads.size()) throw std::invalid_argument("adam: block layout changed");
    for (std::size_t b = 0; b < grads.size(); ++b)
        if (m_[b].size() != grads[b].size()) throw std::invalid_argument("adam: block size changed");
}

void Adam::step(std::span<std::vector<double>* const> blocks, const ParamGrads& grads) {
    if (blocks.size() != grads.size()) throw std::invalid_argument("adam: block/gradient count mismatch");
    ensure_state(grads);
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        auto& p = *blocks[b];
        const auto& g = grads[b];
        auto& m = m_[b];
        auto& v = v_[b];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            p[i] -= cfg_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
        }
    }
}

std::vector<double> Adam::update(std::span<const double> grad) {
    ParamGrads g{std::vector<double>(grad.begin(), grad.end())};
    ensure_state(g);
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::vector<double> delta(grad.size());
    auto& m = m_[0];
    auto& v = v_[0];
    for (std::size_t i = 0; i < grad.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
        delta[i] = cfg_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
    }
    return delta;
}

void Adam::step(std::vector<double>& block, std::span<const double> grad) {
    if (block.size() != grad.size()) throw std::invalid_argument("adam: parameter/gradient size mismatch");
    const auto delta = update(grad);
    for (std::size_t i = 0; i < block.size(); ++i) block[i] -= delta[i];
}

TrainReport train(Network& net, MatrixView features, std::span<const int> labels, const TrainConfig& cfg) {
    if (cfg.batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
    if (features.rows == 0) throw std::invalid_argument("cannot train on an empty dataset");
    if (labels.size() != features.rows) throw std::invalid_argument("label count does not match feature rows");
    if (features.cols != net.input_size()) throw std::invalid_argument("feature width does not match network input");

    TrainReport report;
    report.initial_loss = cross_entropy(net, features, labels);
    if (!std::isfinite(report.initial_loss)) throw DivergenceError("initial loss is not finite");

    Rng rng(cfg.seed);
    Adam adam(cfg.adam);
    std::vector<std::vector<double>*> blocks;
    for (auto& p : net.parameters()) blocks.push_back(&p.values);

    std::vector<std::size_t> order(features.rows);
    std::vector<double> batch;
    std::vector<int> batch_labels;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        // Fisher-Yates with the raw stream keeps shuffles identical across standard libraries.
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            batch.clear();
            batch_labels.clear();
            for (std::size_t i = start; i < end; ++i) {
                const auto row = features.row(order[i]);
                batch.insert(batch.end(), row.begin(), row.end());
                batch_labels.push_back(labels[order[i]]);
            }
            LossAndGrads lg;
            try {
                lg = grad_params(net, MatrixView(batch, end - start, features.cols), batch_labels, Reduction::Mean,
                                 Mode::Train, &rng);
            } catch (const NumericError& e) {
                throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
            }
            if (!std::isfinite(lg.loss))
                throw DivergenceError("training loss became non-finite in epoch " + std::to_string(epoch));
            adam.step(blocks, lg.grads);
        }
        double loss = 0.0;
        try {
            loss = cross_entropy(net, features, labels);
        } catch (const NumericError& e) {
            throw DivergenceError("training diverged after epoch " + std::to_string(epoch) + ": " + e.what());
        }
        if (!std::isfinite(loss))
            throw DivergenceError("training loss became non-finite after epoch " + std::to_string(epoch));
        report.loss_history.push_back(loss);
    }
    return report;
}

}  // namespace cfu
