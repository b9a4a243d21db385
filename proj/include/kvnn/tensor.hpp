#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace kvnn {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. Every image, feature map, coefficient
/// tensor and parameter block in the library is carried by one of these.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor vector(std::vector<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Multi-axis access; bounds-checked.
    double& at(std::initializer_list<std::size_t> index);
    double at(std::initializer_list<std::size_t> index) const;
    std::size_t offset(std::span<const std::size_t> index) const;

    Tensor reshaped(Shape shape) const;
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);

/// base^r by r successive multiplications starting from 1.
inline double ipow(double base, unsigned r) {
    double v = 1.0;
    for (unsigned i = 0; i < r; ++i) v *= base;
    return v;
}
double max_abs(std::span<const double> a);

/// |approx - exact| / max(|exact|, scale). scale = 0 gives the plain pointwise
/// relative error; a positive scale measures against a known term magnitude.
double relative_error(double approx, double exact, double scale = 0.0);

/// Exponent vector alpha of a monomial x^alpha; degree is the component sum.
struct MultiIndex {
    std::vector<unsigned> alpha;
    unsigned degree = 0;

    MultiIndex() = default;
    explicit MultiIndex(std::vector<unsigned> exponents);

    std::size_t dim() const noexcept { return alpha.size(); }
    friend bool operator==(const MultiIndex&, const MultiIndex&) = default;
};

/// All exponent vectors of length d summing to r, in lexicographically
/// descending order: (r,0,..,0) first, (0,..,0,r) last. C(d+r-1, r) entries.
std::vector<MultiIndex> enumerate_multi_indices(std::size_t d, unsigned r);

std::uint64_t binomial(std::uint64_t n, std::uint64_t k);

inline constexpr unsigned kMaxMultinomialDegree = 20;

/// r! / (alpha_1! ... alpha_d!) in exact integer arithmetic. Throws an
/// "overflow" Error when the degree exceeds kMaxMultinomialDegree.
std::uint64_t multinomial_coefficient(const MultiIndex& m);

/// x_1^alpha_1 ... x_d^alpha_d by repeated multiplication.
double monomial_eval(std::span<const double> x, const MultiIndex& m);

}  // namespace kvnn
