#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfu {

using Shape = std::vector<std::size_t>;

/// Pseudo-random stream. Every stochastic operation takes one explicitly.
using Rng = std::mt19937_64;

std::size_t element_count(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles.
struct Tensor {
    Shape shape;
    std::vector<double> values;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> v);

    std::size_t size() const { return values.size(); }
};

/// Non-owning view over a row-major rows x cols matrix.
struct MatrixView {
    std::span<const double> data;
    std::size_t rows = 0;
    std::size_t cols = 0;

    MatrixView() = default;
    MatrixView(std::span<const double> d, std::size_t r, std::size_t c);

    std::span<const double> row(std::size_t i) const { return data.subspan(i * cols, cols); }
};

/// Closed interval every feature is declared to live in.
struct FeatureRange {
    double lo = -0.5;
    double hi = 0.5;

    bool operator==(const FeatureRange&) const = default;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Uniform double in [0, 1) from the top 53 bits of one draw.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// splitmix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Stream for (seed, index). Independent of call order, so fan-out stays schedule-free.
Rng derive_rng(std::uint64_t seed, std::uint64_t index);

bool all_finite(std::span<const double> v);

}  // namespace cfu
