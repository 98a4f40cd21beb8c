#include "cfu/uncertainty.hpp"

#include <cmath>
#include <stdexcept>

namespace cfu {

SoftmaxConfidence softmax_confidence(const Network& net, std::span<const double> x) {
    const auto p = net.forward(x, Mode::Eval);
    const auto c = argmax(p);
    return {c, p[c]};
}

PredictiveSummary mc_dropout(const Network& net, std::span<const double> x, const MCDropoutConfig& cfg,
                             std::optional<std::size_t> designated_class) {
    if (cfg.passes < 2) throw std::invalid_argument("mc dropout needs at least two forward passes");
    if (net.head() != OutputHead::Softmax) throw std::invalid_argument("mc dropout needs a softmax classifier");

    PredictiveSummary s;
    s.softmax = net.forward(x, Mode::Eval);
    const std::size_t C = s.softmax.size();
    s.predicted_class = argmax(s.softmax);
    s.designated_class = designated_class.value_or(s.predicted_class);
    if (s.designated_class >= C) throw std::out_of_range("designated class outside classifier output");

    if (!net.has_active_dropout()) {
        // Every pass would repeat the deterministic forward.
        s.mean = s.softmax;
        s.std.assign(C, 0.0);
        s.epistemic.assign(C, 0.0);
        s.aleatoric.resize(C);
        for (std::size_t c = 0; c < C; ++c) s.aleatoric[c] = s.mean[c] * (1.0 - s.mean[c]);
        s.mc_mean = s.mean[s.designated_class];
        s.mc_std = 0.0;
        return s;
    }

    std::vector<std::vector<double>> samples(cfg.passes);
    for (std::size_t t = 0; t < cfg.passes; ++t) {
        Rng rng = derive_rng(cfg.seed, t);
        samples[t] = net.forward(x, Mode::McDropout, &rng);
    }

    const double T = static_cast<double>(cfg.passes);
    s.mean.assign(C, 0.0);
    s.std.assign(C, 0.0);
    s.epistemic.assign(C, 0.0);
    s.aleatoric.assign(C, 0.0);
    for (const auto& p : samples)
        for (std::size_t c = 0; c < C; ++c) s.mean[c] += p[c];
    for (auto& m : s.mean) m /= T;
    for (const auto& p : samples)
        for (std::size_t c = 0; c < C; ++c) {
            const double d = p[c] - s.mean[c];
            s.epistemic[c] += d * d;
            s.aleatoric[c] += p[c] * (1.0 - p[c]);
        }
    for (std::size_t c = 0; c < C; ++c) {
        s.epistemic[c] /= T;
        s.aleatoric[c] /= T;
        s.std[c] = std::sqrt(s.epistemic[c]);
    }
    s.mc_mean = s.mean[s.designated_class];
    s.mc_std = s.std[s.designated_class];
    return s;
}

}  // namespace cfu
