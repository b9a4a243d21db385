#pragma once

#include "kvnn/tensor.hpp"
#include "kvnn/volterra.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace kvnn {

/// One term gamma * (x . w)^r. The order is fixed at construction.
class KernelAtom {
public:
    KernelAtom(unsigned order, Tensor center, double coefficient);

    unsigned order() const noexcept { return order_; }
    std::size_t dim() const noexcept { return center.size(); }

    Tensor center;
    double coefficient = 0.0;

private:
    unsigned order_;
};

/// All atoms of one interaction order. An empty branch marks a skipped order.
class OrderBranch {
public:
    OrderBranch(unsigned order, std::size_t dim) : order_(order), dim_(dim) {}

    unsigned order() const noexcept { return order_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return atoms_.size(); }
    bool empty() const noexcept { return atoms_.empty(); }

    void add(KernelAtom atom);
    std::vector<KernelAtom>& atoms() noexcept { return atoms_; }
    const std::vector<KernelAtom>& atoms() const noexcept { return atoms_; }

private:
    unsigned order_;
    std::size_t dim_;
    std::vector<KernelAtom> atoms_;
};

/// f(x) = sum_r sum_i gamma_{r,i} (x . w_{r,i})^r with one branch per order 1..p.
class MKVolterraMap {
public:
    MKVolterraMap(std::size_t input_dim, unsigned max_order);

    std::size_t input_dim() const noexcept { return input_dim_; }
    unsigned max_order() const noexcept { return static_cast<unsigned>(branches_.size()); }

    OrderBranch& branch(unsigned r);
    const OrderBranch& branch(unsigned r) const;
    std::vector<OrderBranch>& branches() noexcept { return branches_; }
    const std::vector<OrderBranch>& branches() const noexcept { return branches_; }

    std::size_t atom_count() const noexcept;

private:
    std::size_t input_dim_;
    std::vector<OrderBranch> branches_;
};

double eval_atom(const KernelAtom& atom, std::span<const double> x);
double eval_branch(const OrderBranch& branch, std::span<const double> x);
double eval_order(const MKVolterraMap& map, unsigned r, std::span<const double> x);
double eval_mk(const MKVolterraMap& map, std::span<const double> x);

/// sum_i gamma_i w_i^{(x)r}; exactly symmetric. Guarded to d <= 8, r <= 3.
Tensor atoms_to_tensor(const OrderBranch& branch);

/// Dense coefficients of every branch (zero tensors for skipped orders).
VolterraCoefficients to_volterra(const MKVolterraMap& map);

struct FitResult {
    OrderBranch branch;
    double condition_number = 0.0;
    unsigned attempts = 0;
    std::uint64_t seed_used = 0;
};

inline constexpr double kFitMaxCondition = 1e10;
inline constexpr unsigned kFitMaxRetries = 16;
inline constexpr std::size_t kFitMaxDim = 6;

/// Exact atomic representation of a homogeneous degree-r target given as a
/// symmetric coefficient tensor. Uses C(d+r-1, r) unit-sphere centers and
/// solves the square system matching monomial coefficients. Resamples with
/// seed+1, seed+2, ... when the design matrix is ill-conditioned.
FitResult fit_exact(const Tensor& target, std::uint64_t seed);

/// Least-squares fit of `atoms` order-r atoms with unit-sphere centers to
/// sampled (x, y) pairs. Coefficients only; centers stay at their draws.
OrderBranch fit_branch_to_samples(const std::vector<Tensor>& samples,
                                  std::span<const double> targets, unsigned r,
                                  std::size_t atoms, std::uint64_t seed);

struct InitSpec {
    double gain = 1.0;
    // Optional per-order multiplier on the gain, indexed by r-1.
    std::vector<double> order_gain;
};

/// Centers ~ N(0, sigma_r^2) per entry with
///   sigma_r = gain_r / sqrt(d) / ((2r-1)!!)^(1/(2r)),
/// which gives (x . w)^r unit RMS for unit-variance x; coefficients
/// ~ N(0, 1/M_r). Orders with count 0 are left empty.
MKVolterraMap init_mk(std::uint64_t seed, std::size_t d, unsigned p,
                      std::span<const std::size_t> counts, const InitSpec& init = {});

// Directory layout: manifest.json plus, per non-empty branch, a centers
// (M_r x d) and a coefficients (M_r) KVT1 file.
void save_mk(const std::filesystem::path& dir, const MKVolterraMap& map);
MKVolterraMap load_mk(const std::filesystem::path& dir);

}  // namespace kvnn
