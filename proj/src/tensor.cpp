#include "cfu/tensor.hpp"

#include <cmath>
#include <sstream>

namespace cfu {

std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), values(element_count(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != element_count(shape))
        throw std::invalid_argument("tensor value count " + std::to_string(values.size()) +
                                    " does not match shape " + shape_to_string(shape));
}

MatrixView::MatrixView(std::span<const double> d, std::size_t r, std::size_t c) : data(d), rows(r), cols(c) {
    if (d.size() != r * c) throw std::invalid_argument("matrix view size mismatch");
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Rng derive_rng(std::uint64_t seed, std::uint64_t index) { return Rng(mix_seed(seed, index)); }

bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace cfu
