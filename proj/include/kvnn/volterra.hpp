#pragma once

#include "kvnn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace kvnn {

/// Explicit truncated Volterra kernels h_1..h_p. h_r has r axes of extent d.
/// The constant term is always zero and has no storage.
struct VolterraCoefficients {
    std::size_t input_dim = 0;
    std::vector<Tensor> tensors;  // tensors[r-1] == h_r

    std::size_t order() const noexcept { return tensors.size(); }
    void validate() const;
};

/// Sum over all d^r index tuples of h(i_1..i_r) x_{i_1}..x_{i_r}.
double eval_volterra_term(const Tensor& h, std::span<const double> x);
/// Same traversal with |h| and |x|; the magnitude against which rounding in
/// eval_volterra_term is measured.
double eval_volterra_term_abs(const Tensor& h, std::span<const double> x);

double eval_volterra(const VolterraCoefficients& coeffs, std::span<const double> x);
double eval_volterra_abs(const VolterraCoefficients& coeffs, std::span<const double> x);

/// Average over all index permutations. The result is exactly symmetric, and
/// entries whose permutation orbit is already constant are returned untouched.
Tensor symmetrize(const Tensor& h);

inline constexpr std::size_t kOracleMaxDim = 8;
inline constexpr std::size_t kOracleMaxOrder = 3;

/// Seeded coefficients uniform in [-scale, scale], then symmetrized.
/// Guarded to d <= 8, p <= 3.
VolterraCoefficients random_volterra(std::uint64_t seed, std::size_t d, std::size_t p,
                                     double scale);

// Directory layout: manifest.json {"d", "p", "files"} plus one KVT1 per order.
void save_volterra(const std::filesystem::path& dir, const VolterraCoefficients& coeffs);
VolterraCoefficients load_volterra(const std::filesystem::path& dir);

}  // namespace kvnn
