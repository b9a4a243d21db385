#include "kvnn/volterra.hpp"

#include "kvnn/error.hpp"
#include "kvnn/tensor_io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

namespace kvnn {

namespace {

std::size_t cube_extent(const Tensor& h) {
    if (h.rank() == 0) throw invalid_argument("volterra kernel must have at least one axis");
    const std::size_t d = h.dim(0);
    for (auto e : h.shape())
        if (e != d) throw Error("not_cubical", "tensor " + shape_string(h.shape()) +
                                                   " does not have equal extents");
    return d;
}

template <class Term>
double sum_over_tuples(const Tensor& h, std::span<const double> x, Term term) {
    const std::size_t d = cube_extent(h);
    if (x.size() != d)
        throw dimension_error("volterra: input length " + std::to_string(x.size()) +
                              " for kernel extent " + std::to_string(d));
    const std::size_t r = h.rank();
    std::vector<std::size_t> idx(r, 0);
    double total = 0.0;
    for (std::size_t flat = 0; flat < h.size(); ++flat) {
        double prod = term(h[flat]);
        for (std::size_t a = 0; a < r; ++a) prod *= term(x[idx[a]]);
        total += prod;
        for (std::size_t a = r; a-- > 0;) {
            if (++idx[a] < d) break;
            idx[a] = 0;
        }
    }
    return total;
}

}  // namespace

void VolterraCoefficients::validate() const {
    if (tensors.empty()) throw invalid_argument("volterra: order p must be >= 1");
    for (std::size_t r = 1; r <= tensors.size(); ++r) {
        const Tensor& h = tensors[r - 1];
        if (h.rank() != r)
            throw dimension_error("volterra: h_" + std::to_string(r) + " has " +
                                  std::to_string(h.rank()) + " axes");
        if (cube_extent(h) != input_dim)
            throw dimension_error("volterra: h_" + std::to_string(r) + " extent differs from d");
    }
}

double eval_volterra_term(const Tensor& h, std::span<const double> x) {
    return sum_over_tuples(h, x, [](double v) { return v; });
}

double eval_volterra_term_abs(const Tensor& h, std::span<const double> x) {
    return sum_over_tuples(h, x, [](double v) { return std::abs(v); });
}

double eval_volterra(const VolterraCoefficients& coeffs, std::span<const double> x) {
    coeffs.validate();
    double total = 0.0;
    for (const auto& h : coeffs.tensors) total += eval_volterra_term(h, x);
    return total;
}

double eval_volterra_abs(const VolterraCoefficients& coeffs, std::span<const double> x) {
    coeffs.validate();
    double total = 0.0;
    for (const auto& h : coeffs.tensors) total += eval_volterra_term_abs(h, x);
    return total;
}

Tensor symmetrize(const Tensor& h) {
    const std::size_t d = cube_extent(h);
    const std::size_t r = h.rank();
    Tensor out(h.shape());
    std::vector<std::size_t> idx(r, 0);
    std::vector<std::size_t> perm(r);
    std::vector<std::size_t> permuted(r);
    // Each orbit is averaged once, from its sorted representative, and the
    // single value is written to every member so the output is exactly
    // symmetric.
    for (std::size_t flat = 0; flat < h.size(); ++flat) {
        if (std::is_sorted(idx.begin(), idx.end())) {
            for (std::size_t a = 0; a < r; ++a) perm[a] = a;
            double sum = 0.0;
            std::size_t count = 0;
            bool constant = true;
            const double first = h[flat];
            do {
                for (std::size_t a = 0; a < r; ++a) permuted[a] = idx[perm[a]];
                const double v = h[h.offset(permuted)];
                constant = constant && (v == first);
                sum += v;
                ++count;
            } while (std::next_permutation(perm.begin(), perm.end()));
            const double avg = constant ? first : sum / static_cast<double>(count);
            std::vector<std::size_t> member = idx;
            do {
                out[out.offset(member)] = avg;
            } while (std::next_permutation(member.begin(), member.end()));
        }
        for (std::size_t a = r; a-- > 0;) {
            if (++idx[a] < d) break;
            idx[a] = 0;
        }
    }
    return out;
}

VolterraCoefficients random_volterra(std::uint64_t seed, std::size_t d, std::size_t p,
                                     double scale) {
    if (d == 0 || p == 0) throw invalid_argument("random_volterra: d and p must be >= 1");
    if (d > kOracleMaxDim || p > kOracleMaxOrder)
        throw Error("guard", "random_volterra: oracle guard is d <= 8, p <= 3 (got d=" +
                                 std::to_string(d) + ", p=" + std::to_string(p) + ")");
    if (!(scale >= 0.0)) throw invalid_argument("random_volterra: scale must be >= 0");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(-scale, scale);
    VolterraCoefficients c;
    c.input_dim = d;
    for (std::size_t r = 1; r <= p; ++r) {
        Tensor h(Shape(r, d));
        for (auto& v : h.data()) v = uni(rng);
        c.tensors.push_back(symmetrize(h));
    }
    return c;
}

void save_volterra(const std::filesystem::path& dir, const VolterraCoefficients& coeffs) {
    coeffs.validate();
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["d"] = coeffs.input_dim;
    manifest["p"] = coeffs.order();
    manifest["files"] = nlohmann::json::array();
    for (std::size_t r = 1; r <= coeffs.order(); ++r) {
        const std::string name = "h" + std::to_string(r) + ".kvt";
        save_tensor(dir / name, coeffs.tensors[r - 1]);
        manifest["files"].push_back(name);
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

VolterraCoefficients load_volterra(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw Error("io", "missing " + (dir / "manifest.json").string());
    const auto manifest = nlohmann::json::parse(in);
    VolterraCoefficients c;
    c.input_dim = manifest.at("d").get<std::size_t>();
    for (const auto& f : manifest.at("files")) c.tensors.push_back(load_tensor(dir / f.get<std::string>()));
    if (c.order() != manifest.at("p").get<std::size_t>())
        throw Error("io", "volterra manifest: file count does not match p");
    c.validate();
    return c;
}

}  // namespace kvnn
