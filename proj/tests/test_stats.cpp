#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "cfu/stats.hpp"
#include "cfu/tensor.hpp"
#include "oracles.hpp"

using namespace cfu;

namespace {

std::vector<double> draw(Rng& rng, std::size_t n, double shift = 0.0, bool ties = false) {
    std::normal_distribution<double> g(shift, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = ties ? std::round(g(rng) * 2.0) / 2.0 : g(rng);
    return v;
}

}  // namespace

TEST_CASE("midranks average tied positions") {
    const std::vector<double> v{3.0, 1.0, 3.0, 2.0, 3.0};
    CHECK(midranks(v) == std::vector<double>{4.0, 1.0, 4.0, 2.0, 4.0});
    CHECK(midranks(v) == oracle::ranks(v));
}

TEST_CASE("rank-sum: three against three, disjoint") {
    const std::vector<double> a{1, 2, 3}, b{10, 11, 12};
    const auto r = wilcoxon_rank_sum(a, b);
    CHECK(r.exact);
    CHECK(r.u == 0.0);
    CHECK(r.n1 == 3);
    CHECK(r.n2 == 3);
    // One of the C(6,3) = 20 arrangements is this extreme, on each side.
    CHECK(std::abs(r.p - 0.1) < 1e-12);
    CHECK(std::abs(r.p - oracle::exact_rank_sum_p(a, b)) < 1e-12);
    const auto swapped = wilcoxon_rank_sum(b, a);
    CHECK(swapped.u == 9.0);
    CHECK(std::abs(swapped.p - 0.1) < 1e-12);
}

TEST_CASE("rank-sum: identical samples") {
    const std::vector<double> a{1, 4, 2, 8, 5, 7, 3, 9, 6, 10, 11, 12}, b = a;
    for (auto m : {RankSumMethod::Exact, RankSumMethod::Normal}) {
        const auto r = wilcoxon_rank_sum(a, b, m);
        CHECK(r.p == doctest::Approx(1.0));
        CHECK(std::abs(r.z) < 1e-12);
    }
    const std::vector<double> same(8, 2.5);
    CHECK(wilcoxon_rank_sum(same, same).p == 1.0);
    CHECK(wilcoxon_rank_sum(same, same, RankSumMethod::Normal).p == 1.0);
}

TEST_CASE("rank-sum: far-separated large samples") {
    Rng rng(1);
    const auto a = draw(rng, 100), b = draw(rng, 100, 5.0);
    const auto r = wilcoxon_rank_sum(a, b);
    CHECK_FALSE(r.exact);
    CHECK(r.p < 1e-10);
    CHECK(r.z < 0.0);
}

TEST_CASE("exact path matches enumeration, with and without ties") {
    Rng rng(2);
    for (int t = 0; t < 40; ++t) {
        const std::size_t n1 = 1 + rng() % 7, n2 = 1 + rng() % 7;
        const bool ties = t % 2 == 0;
        const auto a = draw(rng, n1, 0.0, ties), b = draw(rng, n2, 0.5, ties);
        const auto r = wilcoxon_rank_sum(a, b, RankSumMethod::Exact);
        CHECK(std::abs(r.p - oracle::exact_rank_sum_p(a, b)) < 1e-12);
        CHECK(r.p >= 0.0);
        CHECK(r.p <= 1.0);
        CHECK(r.u >= 0.0);
        CHECK(r.u <= static_cast<double>(n1 * n2));
    }
}

TEST_CASE("exact and normal paths agree at ten per group") {
    Rng rng(3);
    for (int t = 0; t < 30; ++t) {
        const auto a = draw(rng, 10), b = draw(rng, 10, 0.3 * (t % 4));
        const double pe = wilcoxon_rank_sum(a, b, RankSumMethod::Exact).p;
        const double pn = wilcoxon_rank_sum(a, b, RankSumMethod::Normal).p;
        CHECK(std::abs(pe - pn) <= 0.02);
    }
}

TEST_CASE("normal path recomputed from ranks") {
    Rng rng(4);
    const auto a = draw(rng, 30, 0.0, true), b = draw(rng, 25, 0.4, true);
    std::vector<double> pooled = a;
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto rk = oracle::ranks(pooled);
    double r1 = 0;
    for (std::size_t i = 0; i < a.size(); ++i) r1 += rk[i];
    const double n1 = 30, n2 = 25, n = 55;
    const double u = r1 - n1 * (n1 + 1) / 2;
    double tie = 0;
    std::map<double, double> counts;
    for (double v : pooled) counts[v] += 1;
    for (auto& [v, c] : counts) tie += c * c * c - c;
    const double var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1)));
    const double d = u - n1 * n2 / 2;
    const double z = (d - (d > 0 ? 0.5 : d < 0 ? -0.5 : 0.0)) / std::sqrt(var);
    const auto r = wilcoxon_rank_sum(a, b);
    CHECK(r.u == u);
    CHECK(std::abs(r.z - z) < 1e-12);
    CHECK(std::abs(r.p - std::erfc(std::abs(z) / std::sqrt(2.0))) < 1e-12);
}

TEST_CASE("rank-sum symmetry and monotone invariance") {
    Rng rng(5);
    for (int t = 0; t < 10; ++t) {
        const auto a = draw(rng, 15 + t), b = draw(rng, 12, 0.5);
        const auto ab = wilcoxon_rank_sum(a, b), ba = wilcoxon_rank_sum(b, a);
        CHECK(ab.z == doctest::Approx(-ba.z));
        CHECK(ab.p == doctest::Approx(ba.p).epsilon(1e-12));
        auto ea = a, eb = b;
        for (auto& v : ea) v = std::exp(v);
        for (auto& v : eb) v = std::exp(v);
        CHECK(wilcoxon_rank_sum(ea, eb).p == ab.p);
    }
}

TEST_CASE("rank-sum input checks") {
    const std::vector<double> a{1.0}, empty;
    CHECK_THROWS(wilcoxon_rank_sum(a, empty));
    CHECK_THROWS(wilcoxon_rank_sum(empty, a));
}

TEST_CASE("spearman on monotone data") {
    std::vector<double> a, up, down;
    for (int i = 0; i < 20; ++i) {
        a.push_back(i * 0.37 - 2.0);
        up.push_back(std::exp(a.back()));
        down.push_back(-a.back() * a.back() * a.back());
    }
    CHECK(spearman(a, up) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(spearman(a, down) == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("spearman matches recomputation on random data") {
    Rng rng(6);
    for (int t = 0; t < 20; ++t) {
        const bool ties = t % 2 == 1;
        const auto a = draw(rng, 30, 0.0, ties), b = draw(rng, 30, 0.0, ties);
        const double rho = spearman(a, b);
        CHECK(std::abs(rho - oracle::spearman(a, b)) < 1e-12);
        CHECK(rho >= -1.0);
        CHECK(rho <= 1.0);
        auto ta = a;
        for (auto& v : ta) v = 3.0 * v + 1.0;
        CHECK(std::abs(spearman(ta, b) - rho) < 1e-12);
    }
}

TEST_CASE("spearman undefined cases") {
    const std::vector<double> flat(5, 1.0), v{1, 2, 3, 4, 5};
    CHECK_THROWS_AS(spearman(flat, v), UndefinedStatistic);
    CHECK_THROWS(spearman(std::vector<double>{1.0}, std::vector<double>{2.0}));
    CHECK_THROWS(spearman(v, std::vector<double>{1, 2}));
}

TEST_CASE("mean and median") {
    CHECK(mean(std::vector<double>{1, 2, 3, 4}) == 2.5);
    CHECK(median(std::vector<double>{5, 1, 3}) == 3.0);
    CHECK(median(std::vector<double>{4, 1, 3, 2}) == 2.5);
}
