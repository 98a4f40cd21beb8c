#pragma once

#include <span>
#include <stdexcept>
#include <vector>

namespace cfu {

/// Ranks 1..n with tied values sharing their average rank.
std::vector<double> midranks(std::span<const double> values);

enum class RankSumMethod {
    Auto,    // exact below 20 pooled observations, normal approximation otherwise
    Exact,   // enumeration of the rank-sum distribution (ties included)
    Normal,  // tie-corrected normal approximation with continuity correction
};

struct RankTestResult {
    double u = 0.0;  // Mann-Whitney U of the first sample
    double z = 0.0;
    double p = 1.0;  // two-sided
    std::size_t n1 = 0;
    std::size_t n2 = 0;
    bool exact = false;
};

/// Two-sample Wilcoxon rank-sum (Mann-Whitney) test.
RankTestResult wilcoxon_rank_sum(std::span<const double> a, std::span<const double> b,
                                 RankSumMethod method = RankSumMethod::Auto);

class UndefinedStatistic : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Spearman rank correlation: Pearson correlation of the midranks.
/// Throws UndefinedStatistic when either sample has constant ranks.
double spearman(std::span<const double> a, std::span<const double> b);

double pearson(std::span<const double> a, std::span<const double> b);

double mean(std::span<const double> v);
double median(std::span<const double> v);

}  // namespace cfu
