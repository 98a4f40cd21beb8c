#include "cfu/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace cfu {

Autoencoder make_autoencoder(std::size_t input_dim, const AutoencoderConfig& cfg) {
    if (cfg.latent_dim == 0) throw std::invalid_argument("autoencoder latent dim must be positive");
    std::vector<LayerSpec> enc, dec;
    std::size_t width = input_dim;
    for (auto h : cfg.hidden) {
        enc.push_back(LayerSpec::dense(width, h));
        enc.push_back(LayerSpec::relu());
        width = h;
    }
    enc.push_back(LayerSpec::dense(width, cfg.latent_dim));
    width = cfg.latent_dim;
    for (auto it = cfg.hidden.rbegin(); it != cfg.hidden.rend(); ++it) {
        dec.push_back(LayerSpec::dense(width, *it));
        dec.push_back(LayerSpec::relu());
        width = *it;
    }
    dec.push_back(LayerSpec::dense(width, input_dim));
    return {Network({input_dim}, std::move(enc), OutputHead::Identity, mix_seed(cfg.seed, 1)),
            Network({cfg.latent_dim}, std::move(dec), OutputHead::Identity, mix_seed(cfg.seed, 2))};
}

double reconstruction_mse(const Autoencoder& ae, MatrixView data) {
    double total = 0.0;
    for (std::size_t i = 0; i < data.rows; ++i) {
        const auto x = data.row(i);
        const auto r = ae.reconstruct(x);
        for (std::size_t j = 0; j < x.size(); ++j) total += (x[j] - r[j]) * (x[j] - r[j]);
    }
    return data.rows ? total / static_cast<double>(data.rows * data.cols) : 0.0;
}

Autoencoder train_autoencoder(MatrixView data, const AutoencoderConfig& cfg, AutoencoderReport* report) {
    if (data.rows == 0) throw std::invalid_argument("autoencoder: empty training set");
    if (cfg.batch_size == 0) throw std::invalid_argument("autoencoder: batch size must be at least 1");
    Autoencoder ae = make_autoencoder(data.cols, cfg);
    AutoencoderReport rep;
    rep.initial_mse = reconstruction_mse(ae, data);

    std::vector<std::vector<double>*> blocks;
    for (auto& p : ae.encoder.parameters()) blocks.push_back(&p.values);
    for (auto& p : ae.decoder.parameters()) blocks.push_back(&p.values);

    Adam adam(cfg.adam);
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(data.rows);
    ForwardTrace te, td;
    try {
        for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            std::iota(order.begin(), order.end(), 0);
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
            for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
                const std::size_t end = std::min(order.size(), start + cfg.batch_size);
                ParamGrads ge = ae.encoder.zero_grads(), gd = ae.decoder.zero_grads();
                const double inv = 1.0 / static_cast<double>((end - start) * data.cols);
                for (std::size_t i = start; i < end; ++i) {
                    const auto x = data.row(order[i]);
                    const auto z = ae.encoder.forward(x, Mode::Train, &rng, te);
                    const auto r = ae.decoder.forward(z, Mode::Train, &rng, td);
                    std::vector<double> g(x.size());
                    for (std::size_t j = 0; j < x.size(); ++j) g[j] = 2.0 * (r[j] - x[j]) * inv;
                    const auto gz = ae.decoder.backward(td, g, &gd);
                    ae.encoder.backward(te, gz, &ge);
                }
                ParamGrads all = std::move(ge);
                all.insert(all.end(), std::make_move_iterator(gd.begin()), std::make_move_iterator(gd.end()));
                adam.step(blocks, all);
            }
            const double mse = reconstruction_mse(ae, data);
            if (!std::isfinite(mse))
                throw DivergenceError("autoencoder training diverged in epoch " + std::to_string(epoch));
            rep.mse_history.push_back(mse);
        }
    } catch (const NumericError& e) {
        throw DivergenceError(std::string("autoencoder training diverged: ") + e.what());
    }
    const double final_mse = rep.mse_history.empty() ? rep.initial_mse : rep.mse_history.back();
    if (report) *report = rep;
    if (final_mse > cfg.mse_ceiling)
        throw std::runtime_error("autoencoder reconstruction MSE " + std::to_string(final_mse) +
                                 " above ceiling " + std::to_string(cfg.mse_ceiling));
    return ae;
}

PrototypeBank::PrototypeBank(const Autoencoder& ae, MatrixView train, std::span<const int> labels,
                             std::size_t leaf_size)
    : ae_(&ae) {
    if (labels.size() != train.rows) throw std::invalid_argument("prototype bank: label count mismatch");
    int max_label = -1;
    for (int y : labels) max_label = std::max(max_label, y);
    std::vector<std::vector<double>> enc(static_cast<std::size_t>(max_label + 1));
    for (std::size_t i = 0; i < train.rows; ++i) {
        if (labels[i] < 0) throw std::invalid_argument("prototype bank: negative label");
        const auto z = ae.encode(train.row(i));
        enc[labels[i]].insert(enc[labels[i]].end(), z.begin(), z.end());
    }
    std::size_t present = 0;
    latent_.resize(enc.size());
    for (std::size_t c = 0; c < enc.size(); ++c)
        if (!enc[c].empty()) {
            latent_[c].emplace(std::move(enc[c]), ae.latent_dim(), leaf_size);
            ++present;
        }
    if (present < 2) throw std::invalid_argument("prototype bank: need at least two classes");
}

PrototypeSelection PrototypeBank::select(std::span<const double> x, int predicted_class, std::size_t k) const {
    if (k == 0) throw std::invalid_argument("prototype bank: k must be at least 1");
    const auto z = ae_->encode(x);
    PrototypeSelection out;
    double best = std::numeric_limits<double>::infinity();
    out.target_class = -1;
    for (std::size_t c = 0; c < latent_.size(); ++c) {
        if (!latent_[c]) continue;
        const auto& index = *latent_[c];
        const auto nn = index.knn(z, k);
        ClassPrototype proto{static_cast<int>(c), std::vector<double>(z.size(), 0.0), nn.size()};
        for (const auto& n : nn) {
            const auto p = index.point(n.id);
            for (std::size_t j = 0; j < p.size(); ++j) proto.latent[j] += p[j];
        }
        for (auto& v : proto.latent) v /= static_cast<double>(nn.size());
        if (static_cast<int>(c) != predicted_class) {
            const double d = distance(Metric::L2, z, proto.latent);
            if (d < best) {
                best = d;
                out.target_class = static_cast<int>(c);
            }
        }
        out.prototypes.push_back(std::move(proto));
    }
    if (out.target_class < 0) throw std::invalid_argument("prototype bank: no class other than the prediction");
    return out;
}

}  // namespace cfu
