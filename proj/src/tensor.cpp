#include "kvnn/tensor.hpp"

#include "kvnn/error.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

namespace kvnn {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    for (auto e : shape_)
        if (e == 0) throw invalid_argument("tensor extents must be positive: " + shape_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto e : shape_)
        if (e == 0) throw invalid_argument("tensor extents must be positive: " + shape_string(shape_));
    if (data_.size() != shape_size(shape_))
        throw dimension_error("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_string(shape_));
}

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

std::size_t Tensor::offset(std::span<const std::size_t> index) const {
    if (index.size() != shape_.size())
        throw dimension_error("index rank " + std::to_string(index.size()) +
                              " for tensor of shape " + shape_string(shape_));
    std::size_t off = 0;
    for (std::size_t a = 0; a < index.size(); ++a) {
        if (index[a] >= shape_[a]) throw invalid_argument("tensor index out of range");
        off = off * shape_[a] + index[a];
    }
    return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) {
    return data_[offset(std::span(index.begin(), index.size()))];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    return data_[offset(std::span(index.begin(), index.size()))];
}

Tensor Tensor::reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw dimension_error("dot: lengths " + std::to_string(a.size()) + " and " +
                              std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double max_abs(std::span<const double> a) {
    double m = 0.0;
    for (double v : a) m = std::max(m, std::abs(v));
    return m;
}

double relative_error(double approx, double exact, double scale) {
    const double denom = std::max(std::abs(exact), scale);
    const double diff = std::abs(approx - exact);
    if (denom == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return diff / denom;
}

MultiIndex::MultiIndex(std::vector<unsigned> exponents)
    : alpha(std::move(exponents)),
      degree(std::accumulate(alpha.begin(), alpha.end(), 0u)) {}

namespace {

void enumerate_into(std::size_t pos, unsigned remaining, std::vector<unsigned>& cur,
                    std::vector<MultiIndex>& out) {
    if (pos + 1 == cur.size()) {
        cur[pos] = remaining;
        out.emplace_back(cur);
        return;
    }
    for (unsigned k = remaining + 1; k-- > 0;) {
        cur[pos] = k;
        enumerate_into(pos + 1, remaining - k, cur, out);
    }
}

}  // namespace

std::vector<MultiIndex> enumerate_multi_indices(std::size_t d, unsigned r) {
    if (d == 0) throw invalid_argument("enumerate_multi_indices: dimension must be >= 1");
    std::vector<MultiIndex> out;
    out.reserve(static_cast<std::size_t>(binomial(d + r - 1, r)));
    std::vector<unsigned> cur(d, 0);
    enumerate_into(0, r, cur, out);
    return out;
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    std::uint64_t c = 1;
    // c * (n-k+i) / i stays integral at every step.
    for (std::uint64_t i = 1; i <= k; ++i) c = c * (n - k + i) / i;
    return c;
}

std::uint64_t multinomial_coefficient(const MultiIndex& m) {
    if (m.degree > kMaxMultinomialDegree)
        throw Error("overflow", "multinomial_coefficient: degree " + std::to_string(m.degree) +
                                    " exceeds the exact-arithmetic guard of " +
                                    std::to_string(kMaxMultinomialDegree));
    // Product of binomials C(a_1, a_1) C(a_1+a_2, a_2) ...; each factor and
    // every partial product is bounded by r! <= 20!, which fits in 64 bits.
    std::uint64_t c = 1;
    unsigned partial = 0;
    for (unsigned a : m.alpha) {
        partial += a;
        c *= binomial(partial, a);
    }
    return c;
}

double monomial_eval(std::span<const double> x, const MultiIndex& m) {
    if (x.size() != m.alpha.size())
        throw dimension_error("monomial_eval: x has length " + std::to_string(x.size()) +
                              ", multi-index has length " + std::to_string(m.alpha.size()));
    double v = 1.0;
    for (std::size_t j = 0; j < x.size(); ++j)
        for (unsigned e = 0; e < m.alpha[j]; ++e) v *= x[j];
    return v;
}

}  // namespace kvnn
