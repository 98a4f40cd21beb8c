#include "cfu/counterfactual.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "cfu/input_loss.hpp"
#include "cfu/optim.hpp"

namespace cfu {

std::string to_string(CfMethod m) {
    switch (m) {
        case CfMethod::Nun: return "NUN-CF";
        case CfMethod::Wachter: return "W-CF";
        case CfMethod::Proto: return "Proto-CF";
    }
    return "unknown";
}

namespace {

constexpr double kUnbounded = 1e10;

void clamp_to(std::vector<double>& x, const std::optional<FeatureRange>& range) {
    if (!range) return;
    for (auto& v : x) v = std::clamp(v, range->lo, range->hi);
}

int runner_up(std::span<const double> p) {
    const auto top = argmax(p);
    int second = -1;
    for (std::size_t c = 0; c < p.size(); ++c) {
        if (c == top) continue;
        if (second < 0 || p[c] > p[second]) second = static_cast<int>(c);
    }
    return second;
}

void check_target(const Network& net, int target) {
    if (target < 0 || static_cast<std::size_t>(target) >= net.output_size())
        throw std::out_of_range("target class " + std::to_string(target) + " outside classifier output");
}

double l1_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s;
}

double squared_l2(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// NUN-CF

NunSearcher::NunSearcher(MatrixView train, std::span<const int> labels, std::size_t leaf_size)
    : data_(train.data.begin(), train.data.end()), dims_(train.cols), labels_(labels.begin(), labels.end()) {
    if (labels.size() != train.rows) throw std::invalid_argument("nun: label count mismatch");
    int max_label = -1;
    for (int y : labels) {
        if (y < 0) throw std::invalid_argument("nun: negative label");
        max_label = std::max(max_label, y);
    }
    std::vector<std::vector<double>> pts(static_cast<std::size_t>(max_label + 1));
    rows_.resize(pts.size());
    for (std::size_t r = 0; r < train.rows; ++r) {
        const auto row = train.row(r);
        pts[labels[r]].insert(pts[labels[r]].end(), row.begin(), row.end());
        rows_[labels[r]].push_back(r);
    }
    per_class_.resize(pts.size());
    for (std::size_t c = 0; c < pts.size(); ++c)
        if (!pts[c].empty()) per_class_[c].emplace(std::move(pts[c]), dims_, leaf_size);
}

NunSearcher::Hit NunSearcher::find(std::span<const double> x, int predicted_class, std::optional<int> target) const {
    std::optional<Hit> best;
    for (std::size_t c = 0; c < per_class_.size(); ++c) {
        if (!per_class_[c]) continue;
        const int label = static_cast<int>(c);
        if (target ? label != *target : label == predicted_class) continue;
        const auto nn = per_class_[c]->knn(x, 1);
        const Hit h{rows_[c][nn[0].id], label, nn[0].distance};
        if (!best || h.distance < best->distance || (h.distance == best->distance && h.row < best->row)) best = h;
    }
    if (!best) throw std::invalid_argument("nun: no eligible training points for the requested class");
    return *best;
}

CounterfactualResult nun_cf(const NunSearcher& searcher, const Network& net, std::span<const double> x,
                            std::optional<int> target) {
    const int predicted = static_cast<int>(argmax(net.forward(x)));
    if (target) check_target(net, *target);
    const auto hit = searcher.find(x, predicted, target);
    CounterfactualResult r;
    r.method = CfMethod::Nun;
    const auto row = searcher.row(hit.row);
    r.x_cf.assign(row.begin(), row.end());
    r.original_class = predicted;
    r.target_class = target.value_or(hit.label);
    r.target_policy = target ? "fixed" : "other";
    const int cf_pred = static_cast<int>(argmax(net.forward(r.x_cf)));
    r.valid = target ? cf_pred == *target : cf_pred != predicted;
    r.source_row = hit.row;
    r.loss_terms["L_dist_l2"] = hit.distance;
    return r;
}

// ---------------------------------------------------------------------------
// W-CF

bool wachter_valid(double p_target, const WachterConfig& cfg) {
    return std::abs(p_target - cfg.target_proba) <= cfg.tol || p_target > cfg.target_proba;
}

CounterfactualResult wachter_cf(const Network& net, std::span<const double> x, const WachterConfig& cfg,
                                std::optional<FeatureRange> range) {
    if (!(cfg.target_proba > 0.0 && cfg.target_proba <= 1.0)) throw std::invalid_argument("w-cf: target_proba");
    if (!(cfg.tol > 0.0)) throw std::invalid_argument("w-cf: tol must be positive");
    if (net.head() != OutputHead::Softmax) throw std::invalid_argument("w-cf: classifier must end in softmax");

    const auto p0 = net.forward(x);
    CounterfactualResult r;
    r.method = CfMethod::Wachter;
    r.original_class = static_cast<int>(argmax(p0));
    r.target_class = cfg.target_class.value_or(runner_up(p0));
    r.target_policy = cfg.target_class ? "fixed" : "other:runner-up";
    check_target(net, r.target_class);

    const std::vector<double> anchor(x.begin(), x.end());
    std::optional<std::vector<double>> best;
    double best_dist = std::numeric_limits<double>::infinity();
    double best_lambda = 0.0;
    std::vector<double> last = anchor;

    double lambda = cfg.lambda_init, lb = 0.0, ub = kUnbounded;
    for (std::size_t step = 0; step < cfg.lambda_steps; ++step) {
        InputLoss loss;
        PredictionTerm pred;
        pred.kind = PredictionTerm::Kind::SquaredToTarget;
        pred.net = &net;
        pred.target_class = r.target_class;
        pred.predicted_class = r.original_class;
        pred.target_proba = cfg.target_proba;
        loss.terms.push_back(pred);
        loss.terms.push_back(DistanceTerm{DistanceTerm::Kind::L1, anchor, lambda});

        std::vector<double> cur = anchor;
        clamp_to(cur, range);
        bool found = false;
        auto consider = [&](const std::vector<double>& cand) {
            if (!wachter_valid(net.forward(cand)[r.target_class], cfg)) return;
            found = true;
            const double d = l1_distance(cand, anchor);
            if (d < best_dist) {
                best_dist = d;
                best = cand;
                best_lambda = lambda;
            }
        };
        consider(cur);

        Adam adam(AdamConfig{cfg.learning_rate});
        LossValue value;
        auto grad = grad_input(loss, cur, &value);
        double current = value.total;
        std::vector<double> trace{current};
        double scale = 1.0;
        for (std::size_t it = 0; it < cfg.max_iter && best_dist > 0.0; ++it) {
            ++r.iterations;
            const auto delta = adam.update(grad);
            std::vector<double> cand(cur.size());
            for (std::size_t i = 0; i < cur.size(); ++i) cand[i] = cur[i] - scale * delta[i];
            clamp_to(cand, range);
            LossValue cv;
            const auto cgrad = grad_input(loss, cand, &cv);
            if (cv.total <= current) {
                cur = std::move(cand);
                grad = cgrad;
                current = cv.total;
                trace.push_back(current);
                consider(cur);
                scale = std::min(1.0, scale * 1.25);
            } else {
                scale *= 0.5;
                if (scale < 1e-10) break;
            }
        }
        r.loss_traces.push_back(std::move(trace));
        last = cur;
        if (best_dist == 0.0) break;

        if (found) {
            lb = lambda;
            lambda = ub < kUnbounded ? 0.5 * (lb + ub) : lambda * 10.0;
        } else {
            ub = lambda;
            lambda = lb > 0.0 ? 0.5 * (lb + ub) : lambda / 10.0;
        }
    }

    r.valid = best.has_value();
    r.x_cf = best ? *best : last;
    const double p_t = net.forward(r.x_cf)[r.target_class];
    r.loss_terms["L_pred"] = (p_t - cfg.target_proba) * (p_t - cfg.target_proba);
    r.loss_terms["L_dist"] = l1_distance(r.x_cf, anchor);
    r.loss_terms["lambda"] = best ? best_lambda : lambda;
    r.loss_terms["p_target"] = p_t;
    return r;
}

// ---------------------------------------------------------------------------
// Proto-CF

CounterfactualResult proto_cf(const Network& net, const PrototypeBank* bank, std::span<const double> x,
                              const ProtoCfConfig& cfg, std::optional<FeatureRange> range) {
    if (cfg.c_steps == 0) throw std::invalid_argument("proto-cf: c_steps must be at least 1");
    if (cfg.c_init < 0 || cfg.beta < 0 || cfg.gamma < 0 || cfg.theta_proto < 0 || cfg.kappa < 0)
        throw std::invalid_argument("proto-cf: loss weights must be non-negative");
    if (!bank && (cfg.gamma > 0.0 || cfg.theta_proto > 0.0))
        throw std::invalid_argument("proto-cf: reconstruction and prototype terms need an autoencoder");
    if (net.head() != OutputHead::Softmax) throw std::invalid_argument("proto-cf: classifier must end in softmax");

    const auto p0 = net.forward(x);
    CounterfactualResult r;
    r.method = CfMethod::Proto;
    r.original_class = static_cast<int>(argmax(p0));

    std::vector<double> proto_latent;
    if (bank) {
        const auto sel = bank->select(x, r.original_class, cfg.k_proto);
        r.target_class = cfg.target_class.value_or(sel.target_class);
        r.target_policy = cfg.target_class ? "fixed" : "nearest-prototype";
        for (const auto& p : sel.prototypes)
            if (p.class_id == r.target_class) proto_latent = p.latent;
        if (proto_latent.empty())
            throw std::invalid_argument("proto-cf: no prototype for target class " + std::to_string(r.target_class));
    } else {
        r.target_class = cfg.target_class.value_or(runner_up(p0));
        r.target_policy = cfg.target_class ? "fixed" : "other:runner-up";
    }
    check_target(net, r.target_class);
    if (r.target_class == r.original_class) throw std::invalid_argument("proto-cf: target equals prediction");

    const std::vector<double> anchor(x.begin(), x.end());
    std::optional<std::vector<double>> best;
    double best_dist = std::numeric_limits<double>::infinity();
    double best_c = 0.0;
    std::vector<double> last = anchor;

    double c = cfg.c_init, lb = 0.0, ub = kUnbounded;
    for (std::size_t step = 0; step < cfg.c_steps; ++step) {
        InputLoss loss;
        PredictionTerm pred;
        pred.kind = PredictionTerm::Kind::Hinge;
        pred.net = &net;
        pred.target_class = r.target_class;
        pred.predicted_class = r.original_class;
        pred.kappa = cfg.kappa;
        pred.weight = c;
        loss.terms.push_back(pred);
        loss.terms.push_back(DistanceTerm{DistanceTerm::Kind::L1, anchor, cfg.beta});
        loss.terms.push_back(DistanceTerm{DistanceTerm::Kind::SquaredL2, anchor, 1.0});
        if (bank && cfg.gamma > 0.0)
            loss.terms.push_back(ReconstructionTerm{bank->autoencoder().chain(), cfg.gamma});
        if (bank && cfg.theta_proto > 0.0)
            loss.terms.push_back(LatentTerm{{&bank->autoencoder().encoder}, proto_latent, cfg.theta_proto});

        std::vector<double> cur = anchor;
        clamp_to(cur, range);
        bool found = false;
        Adam adam(AdamConfig{cfg.learning_rate});
        std::vector<double> trace;
        for (std::size_t it = 0; it < cfg.max_iter; ++it) {
            ++r.iterations;
            LossValue value;
            const auto grad = grad_input(loss, cur, &value);
            trace.push_back(value.total);
            adam.step(cur, grad);
            clamp_to(cur, range);
            if (static_cast<int>(argmax(net.forward(cur))) == r.target_class) {
                found = true;
                const double d = l1_distance(cur, anchor) + squared_l2(cur, anchor);
                if (d < best_dist) {
                    best_dist = d;
                    best = cur;
                    best_c = c;
                }
            }
        }
        r.loss_traces.push_back(std::move(trace));
        last = cur;

        if (found) {
            ub = std::min(ub, c);
            c = 0.5 * (lb + ub);
        } else {
            lb = std::max(lb, c);
            c = ub < kUnbounded ? 0.5 * (lb + ub) : c * 2.0;
        }
    }

    r.valid = best.has_value();
    r.x_cf = best ? *best : last;

    // Final loss terms at the returned point, unweighted.
    const auto p = net.forward(r.x_cf);
    r.loss_terms["L_pred"] = std::max(p[r.original_class] - p[r.target_class], -cfg.kappa);
    r.loss_terms["L1"] = l1_distance(r.x_cf, anchor);
    r.loss_terms["L2"] = squared_l2(r.x_cf, anchor);
    if (bank) {
        const auto& ae = bank->autoencoder();
        r.loss_terms["L_AE"] = squared_l2(r.x_cf, ae.reconstruct(r.x_cf));
        r.loss_terms["L_proto"] = squared_l2(ae.encode(r.x_cf), proto_latent);
    }
    r.loss_terms["c"] = best ? best_c : c;
    return r;
}

// ---------------------------------------------------------------------------
// Metrics

CfMetrics evaluate_cf(std::span<const double> x, const CounterfactualResult& result, const Network& net,
                      const TrustScoreModel& trust, const MCDropoutConfig& mc) {
    if (x.size() != result.x_cf.size()) throw std::invalid_argument("evaluate_cf: instance size mismatch");
    CfMetrics m;
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = result.x_cf[i] - x[i];
        if (std::abs(d) > 1e-6) ++m.sparsity;
        m.l1 += std::abs(d);
        sq += d * d;
    }
    m.l2 = std::sqrt(sq);
    m.trust = trust.score(result.x_cf, result.target_class);
    m.summary = mc_dropout(net, result.x_cf, mc, static_cast<std::size_t>(result.target_class));
    return m;
}

nlohmann::json to_json(const CounterfactualResult& r, bool include_instance) {
    nlohmann::json j;
    j["method"] = to_string(r.method);
    j["y"] = r.original_class;
    j["y_cf"] = r.target_class;
    j["target_policy"] = r.target_policy;
    j["valid"] = r.valid;
    j["iterations"] = r.iterations;
    j["loss_terms"] = r.loss_terms;
    if (r.source_row) j["source_row"] = *r.source_row;
    if (r.metrics) {
        const auto& m = *r.metrics;
        j["metrics"] = {{"sparsity", m.sparsity},
                        {"l1", m.l1},
                        {"l2", m.l2},
                        {"trust", m.trust},
                        {"mc_mean", m.summary.mc_mean},
                        {"mc_std", m.summary.mc_std},
                        {"epistemic", m.summary.epistemic[m.summary.designated_class]},
                        {"aleatoric", m.summary.aleatoric[m.summary.designated_class]},
                        {"softmax", m.summary.softmax[m.summary.designated_class]}};
    }
    if (include_instance) j["x_cf"] = r.x_cf;
    return j;
}

}  // namespace cfu
