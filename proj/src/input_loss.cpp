#include "cfu/input_loss.hpp"

#include <cmath>
#include <limits>

namespace cfu {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

void check_anchor(std::span<const double> x, const std::vector<double>& anchor) {
    if (anchor.size() != x.size()) throw std::invalid_argument("distance anchor size does not match input");
}

void check_class(const PredictionTerm& t) {
    if (t.net == nullptr) throw std::invalid_argument("prediction term without a network");
    const auto c = static_cast<int>(t.net->output_size());
    if (t.target_class < 0 || t.target_class >= c || t.predicted_class < 0 || t.predicted_class >= c)
        throw std::out_of_range("prediction term class outside network output");
}

double prediction_value(const PredictionTerm& t, const std::vector<double>& p) {
    switch (t.kind) {
        case PredictionTerm::Kind::SquaredToTarget: {
            const double d = p[t.target_class] - t.target_proba;
            return d * d;
        }
        case PredictionTerm::Kind::Hinge:
            return std::max(p[t.predicted_class] - p[t.target_class], -t.kappa);
        case PredictionTerm::Kind::CrossEntropy:
            return -std::log(std::max(p[t.target_class], std::numeric_limits<double>::min()));
    }
    return 0.0;
}

// dL/dp for one prediction term.
std::vector<double> prediction_grad(const PredictionTerm& t, const std::vector<double>& p) {
    std::vector<double> g(p.size(), 0.0);
    switch (t.kind) {
        case PredictionTerm::Kind::SquaredToTarget:
            g[t.target_class] = 2.0 * (p[t.target_class] - t.target_proba);
            break;
        case PredictionTerm::Kind::Hinge:
            if (p[t.predicted_class] - p[t.target_class] > -t.kappa) {
                g[t.predicted_class] += 1.0;
                g[t.target_class] -= 1.0;
            }
            break;
        case PredictionTerm::Kind::CrossEntropy:
            g[t.target_class] = -1.0 / std::max(p[t.target_class], std::numeric_limits<double>::min());
            break;
    }
    return g;
}

}  // namespace

std::vector<double> run_chain(std::span<const Network* const> chain, std::span<const double> x) {
    std::vector<double> cur(x.begin(), x.end());
    for (const auto* net : chain) cur = net->forward(cur);
    return cur;
}

LossValue evaluate(const InputLoss& loss, std::span<const double> x) {
    LossValue out;
    for (const auto& term : loss.terms) {
        const auto [value, weight] = std::visit(
            overloaded{
                [&](const PredictionTerm& t) {
                    check_class(t);
                    return std::pair{prediction_value(t, t.net->forward(x)), t.weight};
                },
                [&](const DistanceTerm& t) {
                    check_anchor(x, t.anchor);
                    double v = 0.0;
                    for (std::size_t i = 0; i < x.size(); ++i) {
                        const double d = x[i] - t.anchor[i];
                        switch (t.kind) {
                            case DistanceTerm::Kind::L1: v += std::abs(d); break;
                            case DistanceTerm::Kind::SquaredL2: v += d * d; break;
                            case DistanceTerm::Kind::L0: v += std::abs(d) > t.l0_tolerance ? 1.0 : 0.0; break;
                        }
                    }
                    return std::pair{v, t.weight};
                },
                [&](const ReconstructionTerm& t) {
                    const auto r = run_chain(t.chain, x);
                    if (r.size() != x.size()) throw std::invalid_argument("reconstruction changes input size");
                    double v = 0.0;
                    for (std::size_t i = 0; i < x.size(); ++i) v += (x[i] - r[i]) * (x[i] - r[i]);
                    return std::pair{v, t.weight};
                },
                [&](const LatentTerm& t) {
                    const auto z = run_chain(t.chain, x);
                    if (z.size() != t.target.size()) throw std::invalid_argument("latent target size mismatch");
                    double v = 0.0;
                    for (std::size_t i = 0; i < z.size(); ++i) v += (z[i] - t.target[i]) * (z[i] - t.target[i]);
                    return std::pair{v, t.weight};
                },
            },
            term);
        out.terms.push_back(value);
        out.total += weight * value;
    }
    return out;
}

std::vector<double> grad_input(const InputLoss& loss, std::span<const double> x, LossValue* value) {
    std::vector<double> grad(x.size(), 0.0);
    LossValue lv;
    for (const auto& term : loss.terms) {
        double v = 0.0, w = 0.0;
        std::visit(overloaded{
                       [&](const PredictionTerm& t) {
                           check_class(t);
                           ForwardTrace trace;
                           const auto p = t.net->forward(x, Mode::Eval, nullptr, trace);
                           v = prediction_value(t, p);
                           w = t.weight;
                           const auto gx = t.net->backward(trace, prediction_grad(t, p), nullptr);
                           for (std::size_t i = 0; i < x.size(); ++i) grad[i] += w * gx[i];
                       },
                       [&](const DistanceTerm& t) {
                           check_anchor(x, t.anchor);
                           if (t.kind == DistanceTerm::Kind::L0)
                               throw NonDifferentiableError("L0 distance term has no gradient");
                           w = t.weight;
                           for (std::size_t i = 0; i < x.size(); ++i) {
                               const double d = x[i] - t.anchor[i];
                               if (t.kind == DistanceTerm::Kind::L1) {
                                   v += std::abs(d);
                                   grad[i] += w * static_cast<double>((d > 0.0) - (d < 0.0));
                               } else {
                                   v += d * d;
                                   grad[i] += w * 2.0 * d;
                               }
                           }
                       },
                       [&](const ReconstructionTerm& t) {
                           // d/dx ||x - r(x)||^2 = 2(x - r) - J_r^T 2(x - r)
                           std::vector<double> r;
                           std::vector<ForwardTrace> traces(t.chain.size());
                           std::vector<double> cur(x.begin(), x.end());
                           for (std::size_t i = 0; i < t.chain.size(); ++i)
                               cur = t.chain[i]->forward(cur, Mode::Eval, nullptr, traces[i]);
                           r = std::move(cur);
                           if (r.size() != x.size())
                               throw std::invalid_argument("reconstruction changes input size");
                           std::vector<double> diff(x.size());
                           for (std::size_t i = 0; i < x.size(); ++i) {
                               diff[i] = x[i] - r[i];
                               v += diff[i] * diff[i];
                           }
                           std::vector<double> g(x.size());
                           for (std::size_t i = 0; i < x.size(); ++i) g[i] = -2.0 * diff[i];
                           for (std::size_t i = t.chain.size(); i-- > 0;)
                               g = t.chain[i]->backward(traces[i], g, nullptr);
                           w = t.weight;
                           for (std::size_t i = 0; i < x.size(); ++i) grad[i] += w * (2.0 * diff[i] + g[i]);
                       },
                       [&](const LatentTerm& t) {
                           std::vector<double> z;
                           std::vector<ForwardTrace> traces(t.chain.size());
                           std::vector<double> cur(x.begin(), x.end());
                           for (std::size_t i = 0; i < t.chain.size(); ++i)
                               cur = t.chain[i]->forward(cur, Mode::Eval, nullptr, traces[i]);
                           z = std::move(cur);
                           if (z.size() != t.target.size()) throw std::invalid_argument("latent target size mismatch");
                           std::vector<double> g(z.size());
                           for (std::size_t i = 0; i < z.size(); ++i) {
                               const double d = z[i] - t.target[i];
                               v += d * d;
                               g[i] = 2.0 * d;
                           }
                           for (std::size_t i = t.chain.size(); i-- > 0;)
                               g = t.chain[i]->backward(traces[i], g, nullptr);
                           w = t.weight;
                           for (std::size_t i = 0; i < x.size(); ++i) grad[i] += w * g[i];
                       },
                   },
                   term);
        lv.terms.push_back(v);
        lv.total += w * v;
    }
    if (value) *value = std::move(lv);
    return grad;
}

}  // namespace cfu
