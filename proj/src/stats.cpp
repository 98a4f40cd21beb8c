#include "cfu/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cfu {

std::vector<double> midranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
        i = j + 1;
    }
    return ranks;
}

namespace {

// Two-sided p from the exact null distribution of the doubled rank sum of the
// first sample, enumerated over all C(n, n1) label assignments of the pooled ranks.
double exact_p(const std::vector<double>& ranks, std::size_t n1, double observed_sum) {
    std::vector<long> doubled(ranks.size());
    long total = 0;
    for (std::size_t i = 0; i < ranks.size(); ++i) total += doubled[i] = std::lround(2.0 * ranks[i]);
    const long observed = std::lround(2.0 * observed_sum);
    // ways[j][s]: number of j-subsets with doubled rank sum s
    std::vector<std::vector<double>> ways(n1 + 1, std::vector<double>(static_cast<std::size_t>(total) + 1, 0.0));
    ways[0][0] = 1.0;
    for (std::size_t i = 0; i < doubled.size(); ++i) {
        const auto r = static_cast<std::size_t>(doubled[i]);
        for (std::size_t j = std::min(n1, i + 1); j >= 1; --j)
            for (std::size_t s = static_cast<std::size_t>(total); s >= r; --s) {
                ways[j][s] += ways[j - 1][s - r];
                if (s == r) break;
            }
    }
    double all = 0.0, lower = 0.0, upper = 0.0;
    for (std::size_t s = 0; s <= static_cast<std::size_t>(total); ++s) {
        const double w = ways[n1][s];
        all += w;
        if (static_cast<long>(s) <= observed) lower += w;
        if (static_cast<long>(s) >= observed) upper += w;
    }
    return std::min(1.0, 2.0 * std::min(lower, upper) / all);
}

}  // namespace

RankTestResult wilcoxon_rank_sum(std::span<const double> a, std::span<const double> b, RankSumMethod method) {
    if (a.empty() || b.empty()) throw std::invalid_argument("wilcoxon: both samples must be non-empty");
    RankTestResult r;
    r.n1 = a.size();
    r.n2 = b.size();
    std::vector<double> pooled(a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto ranks = midranks(pooled);
    const double n1 = static_cast<double>(r.n1), n2 = static_cast<double>(r.n2), n = n1 + n2;
    const double rank_sum = std::accumulate(ranks.begin(), ranks.begin() + static_cast<std::ptrdiff_t>(r.n1), 0.0);
    r.u = rank_sum - n1 * (n1 + 1.0) / 2.0;

    // tie correction
    std::vector<double> sorted = pooled;
    std::sort(sorted.begin(), sorted.end());
    double ties = 0.0;
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i);
        ties += t * t * t - t;
        i = j;
    }
    const double mu = n1 * n2 / 2.0;
    const double var = n > 1.0 ? n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0))) : 0.0;
    const double diff = r.u - mu;
    if (var > 0.0) {
        const double num = std::max(0.0, std::abs(diff) - 0.5);
        r.z = std::copysign(num / std::sqrt(var), diff);
        if (num == 0.0) r.z = 0.0;
    }

    const bool use_exact = method == RankSumMethod::Exact || (method == RankSumMethod::Auto && n < 20.0);
    r.exact = use_exact;
    if (var <= 0.0) {
        r.p = 1.0;
    } else if (use_exact) {
        r.p = exact_p(ranks, r.n1, rank_sum);
    } else {
        r.p = std::min(1.0, std::erfc(std::abs(r.z) / std::sqrt(2.0)));
    }
    return r;
}

double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("pearson: need equal lengths >= 2");
    const double ma = mean(a), mb = mean(b);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) throw UndefinedStatistic("correlation undefined for a constant sample");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need equal lengths >= 2");
    const auto ra = midranks(a), rb = midranks(b);
    return pearson(ra, rb);
}

double mean(std::span<const double> v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double median(std::span<const double> v) {
    if (v.empty()) return 0.0;
    std::vector<double> s(v.begin(), v.end());
    std::sort(s.begin(), s.end());
    const std::size_t m = s.size() / 2;
    return s.size() % 2 ? s[m] : 0.5 * (s[m - 1] + s[m]);
}

}  // namespace cfu
