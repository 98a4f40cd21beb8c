#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cfu/counterfactual.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cfu;

namespace {

/// Dense(D, C) softmax net with the given weights (row per class) and biases.
Network linear_net(std::size_t in, const std::vector<double>& w, const std::vector<double>& b) {
    const std::size_t out = b.size();
    Network net({in}, {LayerSpec::dense(in, out)}, OutputHead::Softmax, 1);
    net.parameters()[0].values = w;
    net.parameters()[1].values = b;
    return net;
}

/// p(class 1) = sigmoid(2x - 1); the decision boundary sits at x = 0.5.
Network logistic_1d() { return linear_net(1, {0.0, 2.0}, {0.0, -1.0}); }

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Blobs {
    std::vector<double> x;
    std::vector<int> y;
    std::size_t dims = 2;
    MatrixView view() const { return {x, y.size(), dims}; }
};

/// Two tight 2-D blobs around (-0.3, 0) and (0.3, 0), plus a third class at (0, 0.4).
Blobs three_blobs(std::uint64_t seed, std::size_t per_class) {
    Rng rng(seed);
    const double centers[3][2] = {{-0.3, 0.0}, {0.3, 0.0}, {0.0, 0.4}};
    Blobs b;
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < per_class; ++i) {
            b.x.push_back(centers[c][0] + 0.05 * (2.0 * uniform01(rng) - 1.0));
            b.x.push_back(centers[c][1] + 0.05 * (2.0 * uniform01(rng) - 1.0));
            b.y.push_back(c);
        }
    return b;
}

Network trained_on(const Blobs& b, std::uint64_t seed) {
    Network net({2}, {LayerSpec::dense(2, 16), LayerSpec::relu(), LayerSpec::dropout(0.2), LayerSpec::dense(16, 3)},
                OutputHead::Softmax, seed);
    TrainConfig tc;
    tc.epochs = 60;
    tc.batch_size = 16;
    tc.adam.learning_rate = 1e-2;
    tc.seed = seed;
    train(net, b.view(), b.y, tc);
    return net;
}

}  // namespace

TEST_CASE("nun: the only unlike point is returned") {
    // Class 1 iff x0 > 0.
    const auto net = linear_net(2, {-1, 0, 1, 0}, {0, 0});
    const std::vector<double> train{-1, 0, -2, 1, -1, -1, 1, 0.5};
    const std::vector<int> labels{0, 0, 0, 1};
    const NunSearcher s(MatrixView(train, 4, 2), labels);
    const std::vector<double> x{-1.5, 0.0};
    const auto r = nun_cf(s, net, x);
    CHECK(r.method == CfMethod::Nun);
    CHECK(r.original_class == 0);
    CHECK(r.target_class == 1);
    CHECK(r.target_policy == "other");
    REQUIRE(r.source_row);
    CHECK(*r.source_row == 3);
    CHECK(r.x_cf == std::vector<double>{1, 0.5});
    CHECK(r.valid);
    CHECK(r.loss_terms.at("L_dist_l2") == doctest::Approx(std::hypot(2.5, 0.5)));
}

TEST_CASE("nun: argmin over eligible rows matches brute force") {
    Rng rng(7);
    for (int t = 0; t < 10; ++t) {
        const auto net = fixture::random_net(100 + t);
        const std::size_t D = net.input_size(), C = net.output_size(), N = 150;
        const auto train = fixture::random_matrix(rng, N, D);
        const auto labels = fixture::random_labels(rng, N, C);
        const MatrixView v(train, N, D);
        const NunSearcher s(v, labels, 8);
        for (int q = 0; q < 5; ++q) {
            const auto x = fixture::random_matrix(rng, 1, D);
            const int pred = static_cast<int>(argmax(net.forward(x)));
            for (std::optional<int> target : {std::optional<int>{}, std::optional<int>{(pred + 1) % static_cast<int>(C)}}) {
                std::size_t want = N;
                double best = 1e300;
                for (std::size_t i = 0; i < N; ++i) {
                    const bool ok = target ? labels[i] == *target : labels[i] != pred;
                    const double d = oracle::dist(Metric::L2, v.row(i), x);
                    if (ok && d < best) {
                        best = d;
                        want = i;
                    }
                }
                const auto r = nun_cf(s, net, x, target);
                REQUIRE(r.source_row);
                CHECK(*r.source_row == want);
                CHECK(r.loss_terms.at("L_dist_l2") == doctest::Approx(best).epsilon(1e-12));
                CHECK(r.target_class == labels[want]);
                const int cf_pred = static_cast<int>(argmax(net.forward(r.x_cf)));
                CHECK(r.valid == (target ? cf_pred == *target : cf_pred != pred));
                if (target) CHECK(r.target_policy == "fixed");
            }
        }
    }
}

TEST_CASE("nun: no eligible class throws") {
    const auto net = linear_net(2, {-1, 0, 1, 0}, {0, 0});
    const std::vector<double> train{-1, 0, -2, 1};
    const std::vector<int> labels{0, 0};
    const NunSearcher s(MatrixView(train, 2, 2), labels);
    CHECK_THROWS(nun_cf(s, net, std::vector<double>{-1, 0}));
    CHECK_THROWS(nun_cf(s, net, std::vector<double>{-1, 0}, 5));
}

TEST_CASE("w-cf: an instance already meeting the target is returned unchanged") {
    const auto net = logistic_1d();
    const std::vector<double> x{2.0};
    WachterConfig cfg;
    cfg.target_class = 1;
    const auto r = wachter_cf(net, x, cfg);
    CHECK(r.valid);
    CHECK(r.x_cf == x);
    CHECK(r.loss_terms.at("L_dist") == 0.0);
    CHECK(r.iterations == 0);
    CHECK(r.target_policy == "fixed");
}

TEST_CASE("w-cf: 1-D logistic net lands at the tolerance band of the boundary") {
    const auto net = logistic_1d();
    const std::vector<double> x{-1.0};
    WachterConfig cfg;
    const auto r = wachter_cf(net, x, cfg);
    CHECK(r.original_class == 0);
    CHECK(r.target_class == 1);
    CHECK(r.target_policy == "other:runner-up");
    REQUIRE(r.valid);
    const double p = sigmoid(2.0 * r.x_cf[0] - 1.0);
    CHECK(wachter_valid(p, cfg));
    CHECK(p == doctest::Approx(r.loss_terms.at("p_target")).epsilon(1e-12));
    // Smallest valid move reaches p = 0.49; overshoot past 0.5 is bounded by the step size.
    const double x_band = 0.5 * (std::log(0.49 / 0.51) + 1.0);
    CHECK(r.x_cf[0] >= x_band - 1e-9);
    CHECK(r.x_cf[0] <= 0.5 + 0.05);
    CHECK(r.loss_terms.at("L_dist") == doctest::Approx(r.x_cf[0] + 1.0));
}

TEST_CASE("w-cf: accepted loss trace never increases") {
    for (int t = 0; t < 10; ++t) {
        const auto net = fixture::random_net(200 + t);
        Rng rng(t);
        const auto x = fixture::random_matrix(rng, 1, net.input_size());
        WachterConfig cfg;
        cfg.max_iter = 200;
        cfg.lambda_steps = 4;
        const auto r = wachter_cf(net, x, cfg);
        CHECK_FALSE(r.loss_traces.empty());
        for (const auto& trace : r.loss_traces)
            for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1]);
    }
}

TEST_CASE("w-cf: valid results honour the probability contract and range") {
    const FeatureRange range{-2.0, 2.0};
    int valid = 0, reachable = 0;
    for (int t = 0; t < 15; ++t) {
        const auto net = fixture::random_net(300 + t);
        Rng rng(50 + t);
        const auto x = fixture::random_matrix(rng, 1, net.input_size());
        WachterConfig cfg;
        cfg.max_iter = 300;
        cfg.lambda_steps = 5;
        const auto r = wachter_cf(net, x, cfg, range);
        for (double v : r.x_cf) {
            CHECK(v >= range.lo);
            CHECK(v <= range.hi);
        }
        const double p = net.forward(r.x_cf)[r.target_class];
        CHECK(r.valid == wachter_valid(p, cfg));
        CHECK(r.loss_terms.at("L_pred") == doctest::Approx((p - 0.5) * (p - 0.5)));
        // Reachability by random search over the box.
        double reach = 0.0;
        Rng probe(9);
        for (int i = 0; i < 20000; ++i)
            reach = std::max(reach, net.forward(fixture::random_matrix(probe, 1, net.input_size(), 2.0))[r.target_class]);
        if (r.valid) CHECK(reach >= 0.49 - 0.05);
        if (reach >= 0.5) {
            ++reachable;
            valid += r.valid;
        }
    }
    // Gradient search is local; it may miss an isolated region, but not most of them.
    CHECK(reachable >= 5);
    CHECK(valid >= reachable - 1);
}

TEST_CASE("w-cf: boundary outside the range yields an invalid, clamped result") {
    // Boundary at x = 0.8, range ends at 0.5.
    const auto net = linear_net(1, {0.0, 2.0}, {0.0, -1.6});
    WachterConfig cfg;
    cfg.max_iter = 200;
    cfg.lambda_steps = 3;
    const auto r = wachter_cf(net, std::vector<double>{-0.4}, cfg, FeatureRange{});
    CHECK_FALSE(r.valid);
    CHECK(r.x_cf[0] <= 0.5);
    CHECK(r.x_cf[0] >= -0.5);
}

TEST_CASE("w-cf: bad settings are rejected") {
    const auto net = logistic_1d();
    WachterConfig cfg;
    cfg.tol = 0.0;
    CHECK_THROWS(wachter_cf(net, std::vector<double>{0.0}, cfg));
    cfg = {};
    cfg.target_class = 4;
    CHECK_THROWS(wachter_cf(net, std::vector<double>{0.0}, cfg));
    CHECK(wachter_valid(0.495, {}));
    CHECK(wachter_valid(0.9, {}));
    CHECK_FALSE(wachter_valid(0.48, {}));
}

TEST_CASE("autoencoder: identity-capable net memorises ten points") {
    Rng rng(3);
    const auto data = fixture::random_matrix(rng, 10, 4, 0.5);
    AutoencoderConfig cfg;
    cfg.hidden = {16};
    cfg.latent_dim = 4;
    cfg.epochs = 1500;
    cfg.batch_size = 10;
    cfg.adam.learning_rate = 1e-2;
    cfg.seed = 9;
    cfg.mse_ceiling = 1e-3;
    AutoencoderReport rep;
    const auto ae = train_autoencoder(MatrixView(data, 10, 4), cfg, &rep);
    const double mse = reconstruction_mse(ae, MatrixView(data, 10, 4));
    CHECK(mse < 1e-3);
    CHECK(mse < rep.initial_mse);
    CHECK(rep.mse_history.size() == 1500);
    CHECK(rep.mse_history.back() == doctest::Approx(mse));

    // Direct recomputation of the mean per-feature squared error.
    double s = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        const auto r = ae.reconstruct(MatrixView(data, 10, 4).row(i));
        for (std::size_t j = 0; j < 4; ++j) s += std::pow(r[j] - data[i * 4 + j], 2);
    }
    CHECK(mse == doctest::Approx(s / 40.0).epsilon(1e-12));

    const auto again = train_autoencoder(MatrixView(data, 10, 4), cfg);
    CHECK(again.encoder.parameters()[0].values == ae.encoder.parameters()[0].values);
}

TEST_CASE("autoencoder: untrained output is finite; ceiling is enforced") {
    AutoencoderConfig cfg;
    const auto ae = make_autoencoder(6, cfg);
    CHECK(ae.latent_dim() == 8);
    Rng rng(1);
    const auto x = fixture::random_matrix(rng, 1, 6);
    CHECK(all_finite(ae.reconstruct(x)));
    CHECK(ae.reconstruct(x).size() == 6);
    const auto data = fixture::random_matrix(rng, 20, 6);
    cfg.epochs = 1;
    cfg.mse_ceiling = 1e-12;
    CHECK_THROWS_AS(train_autoencoder(MatrixView(data, 20, 6), cfg), std::runtime_error);
    cfg.latent_dim = 0;
    CHECK_THROWS(make_autoencoder(6, cfg));
}

TEST_CASE("prototypes: per-class k-NN latent means") {
    Rng rng(4);
    AutoencoderConfig cfg;
    cfg.latent_dim = 3;
    cfg.seed = 2;
    const auto ae = make_autoencoder(5, cfg);
    const std::size_t N = 60;
    const auto train = fixture::random_matrix(rng, N, 5);
    auto labels = fixture::random_labels(rng, N, 3);
    labels[17] = 3;  // lone member of class 3
    const MatrixView v(train, N, 5);
    const PrototypeBank bank(ae, v, labels, 4);
    for (int q = 0; q < 5; ++q) {
        const auto x = fixture::random_matrix(rng, 1, 5);
        const auto z = ae.encode(x);
        const int pred = q % 3;
        const std::size_t k = 1 + static_cast<std::size_t>(q) * 3;
        const auto sel = bank.select(x, pred, k);
        REQUIRE(sel.prototypes.size() == 4);
        double best = 1e300;
        int want = -1;
        for (int c = 0; c < 4; ++c) {
            std::vector<double> enc;
            for (std::size_t i = 0; i < N; ++i)
                if (labels[i] == c) {
                    const auto e = ae.encode(v.row(i));
                    enc.insert(enc.end(), e.begin(), e.end());
                }
            const std::size_t n = enc.size() / 3;
            const auto nn = oracle::knn(MatrixView(enc, n, 3), z, k);
            std::vector<double> mean(3, 0.0);
            for (const auto& e : nn)
                for (std::size_t j = 0; j < 3; ++j) mean[j] += enc[e.id * 3 + j] / static_cast<double>(nn.size());
            const auto& got = sel.prototypes[static_cast<std::size_t>(c)];
            CHECK(got.class_id == c);
            CHECK(got.members == nn.size());
            for (std::size_t j = 0; j < 3; ++j) CHECK(got.latent[j] == doctest::Approx(mean[j]).epsilon(1e-12));
            if (c == 3) CHECK(got.latent == ae.encode(v.row(17)));
            const double d = oracle::dist(Metric::L2, z, mean);
            if (c != pred && d < best) {
                best = d;
                want = c;
            }
        }
        CHECK(sel.target_class == want);
    }
    CHECK_THROWS(bank.select(train, 0, 0));
}

TEST_CASE("prototypes: the nearer unlike blob is chosen") {
    const auto b = three_blobs(5, 30);
    AutoencoderConfig cfg;
    cfg.hidden = {};
    cfg.latent_dim = 2;
    // Identity encoder, so latent distances are input distances.
    Autoencoder ae = make_autoencoder(2, cfg);
    ae.encoder.parameters()[0].values = {1, 0, 0, 1};
    ae.encoder.parameters()[1].values = {0, 0};
    const PrototypeBank bank(ae, b.view(), b.y);
    // A point of class 0 pushed toward class 1 along x.
    CHECK(bank.select(std::vector<double>{-0.05, 0.0}, 0, 5).target_class == 1);
    // A point of class 1 pushed upward, toward class 2.
    CHECK(bank.select(std::vector<double>{0.15, 0.3}, 1, 5).target_class == 2);
}

TEST_CASE("proto-cf: without a bank the loss reduces to hinge plus elastic net") {
    const auto net = logistic_1d();
    ProtoCfConfig cfg;
    cfg.gamma = 0;
    cfg.theta_proto = 0;
    cfg.max_iter = 300;
    cfg.c_steps = 3;
    const auto r = proto_cf(net, nullptr, std::vector<double>{-1.0}, cfg);
    CHECK(r.target_class == 1);
    CHECK(r.target_policy == "other:runner-up");
    REQUIRE(r.valid);
    CHECK(r.x_cf[0] > 0.5);
    CHECK(argmax(net.forward(r.x_cf)) == 1);
    CHECK(r.loss_terms.count("L_AE") == 0);
    CHECK(r.loss_terms.at("L1") == doctest::Approx(r.x_cf[0] + 1.0));
    CHECK(r.loss_terms.at("L2") == doctest::Approx(std::pow(r.x_cf[0] + 1.0, 2)));
    CHECK(r.loss_traces.size() == 3);

    cfg.gamma = 1.0;
    CHECK_THROWS(proto_cf(net, nullptr, std::vector<double>{-1.0}, cfg));
    cfg.gamma = 0;
    cfg.target_class = 0;
    CHECK_THROWS(proto_cf(net, nullptr, std::vector<double>{-1.0}, cfg));
}

TEST_CASE("proto-cf: kappa margin and reported terms") {
    const auto net = logistic_1d();
    ProtoCfConfig cfg;
    cfg.gamma = 0;
    cfg.theta_proto = 0;
    cfg.kappa = 0.2;
    cfg.c_init = 10.0;
    cfg.max_iter = 400;
    const auto r = proto_cf(net, nullptr, std::vector<double>{-1.0}, cfg);
    REQUIRE(r.valid);
    const auto p = net.forward(r.x_cf);
    CHECK(r.loss_terms.at("L_pred") == doctest::Approx(std::max(p[0] - p[1], -0.2)));
    CHECK(r.loss_terms.at("L_pred") >= -0.2);
}

TEST_CASE("proto-cf: with a bank every reported term is recomputable") {
    const auto b = three_blobs(6, 30);
    const auto net = trained_on(b, 3);
    CHECK(accuracy(net, b.view(), b.y) > 0.95);
    AutoencoderConfig acfg;
    acfg.hidden = {8};
    acfg.latent_dim = 2;
    acfg.epochs = 200;
    acfg.batch_size = 16;
    acfg.adam.learning_rate = 1e-2;
    acfg.seed = 2;
    acfg.mse_ceiling = 0.01;
    const auto ae = train_autoencoder(b.view(), acfg);
    const PrototypeBank bank(ae, b.view(), b.y);
    ProtoCfConfig cfg;
    cfg.max_iter = 300;
    cfg.k_proto = 5;
    cfg.gamma = 1.0;
    cfg.theta_proto = 1.0;
    const std::vector<double> x{-0.3, 0.0};
    const auto r = proto_cf(net, &bank, x, cfg, FeatureRange{});
    CHECK(r.target_policy == "nearest-prototype");
    CHECK(r.target_class == bank.select(x, r.original_class, 5).target_class);
    const auto rec = ae.reconstruct(r.x_cf);
    double l_ae = 0;
    for (std::size_t j = 0; j < 2; ++j) l_ae += std::pow(r.x_cf[j] - rec[j], 2);
    CHECK(r.loss_terms.at("L_AE") == doctest::Approx(l_ae).epsilon(1e-12));
    CHECK(r.loss_terms.count("L_proto") == 1);
    if (r.valid) CHECK(static_cast<int>(argmax(net.forward(r.x_cf))) == r.target_class);
}

TEST_CASE("evaluate_cf recomputes every metric") {
    const auto b = three_blobs(8, 40);
    const auto net = trained_on(b, 4);
    TrustScoreConfig tcfg;
    tcfg.k = 5;
    const TrustScoreModel trust(b.view(), b.y, tcfg);
    const NunSearcher s(b.view(), b.y);
    const MCDropoutConfig mc{50, 77};
    const std::vector<double> x{-0.3, 0.02};
    auto r = nun_cf(s, net, x);
    r.metrics = evaluate_cf(x, r, net, trust, mc);
    const auto& m = *r.metrics;
    std::size_t changed = 0;
    double l1 = 0, l2 = 0;
    for (std::size_t j = 0; j < 2; ++j) {
        const double d = r.x_cf[j] - x[j];
        changed += std::abs(d) > 1e-6;
        l1 += std::abs(d);
        l2 += d * d;
    }
    CHECK(m.sparsity == changed);
    CHECK(std::abs(m.l1 - l1) < 1e-9);
    CHECK(std::abs(m.l2 - std::sqrt(l2)) < 1e-9);
    CHECK(std::abs(m.trust - oracle::trust(b.view(), b.y, r.x_cf, r.target_class, 5)) < 1e-9);
    const auto direct = mc_dropout(net, r.x_cf, mc, static_cast<std::size_t>(r.target_class));
    CHECK(m.summary.designated_class == static_cast<std::size_t>(r.target_class));
    CHECK(std::abs(m.summary.mc_mean - direct.mc_mean) < 1e-9);
    CHECK(std::abs(m.summary.mc_std - direct.mc_std) < 1e-9);

    const auto j = to_json(r, true);
    CHECK(j["method"] == "NUN-CF");
    CHECK(j["y"] == r.original_class);
    CHECK(j["y_cf"] == r.target_class);
    CHECK(j["source_row"] == *r.source_row);
    CHECK(j["metrics"]["sparsity"] == m.sparsity);
    CHECK(j["metrics"]["mc_mean"].get<double>() == m.summary.mc_mean);
    CHECK(j["x_cf"].size() == 2);
    CHECK_FALSE(to_json(r).contains("x_cf"));
    CHECK_THROWS(evaluate_cf(std::vector<double>{1.0}, r, net, trust, mc));
}
