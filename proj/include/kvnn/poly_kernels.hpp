#pragma once

#include "kvnn/tensor.hpp"

#include <Eigen/Dense>

#include <span>
#include <string>
#include <variant>
#include <vector>

namespace kvnn {

/// (x . x')^r
double poly_kernel(unsigned r, std::span<const double> x, std::span<const double> xp);

/// Explicit feature map of the degree-r polynomial kernel. Component alpha is
/// sqrt(multinomial(alpha)) * x^alpha, in enumerate_multi_indices order, so
/// that <phi_r(x), phi_r(x')> == (x . x')^r.
Tensor feature_map(unsigned r, std::span<const double> x);

/// Non-negative per-order weights a_1..a_p of the multi-kernel
/// K(x, x') = sum_r a_r^2 (x . x')^r.
class MultiKernelWeights {
public:
    explicit MultiKernelWeights(std::vector<double> a);

    std::size_t max_order() const noexcept { return a_.size(); }
    double operator[](std::size_t r_minus_1) const { return a_[r_minus_1]; }
    const std::vector<double>& values() const noexcept { return a_; }

private:
    std::vector<double> a_;
};

double multi_kernel(const MultiKernelWeights& w, std::span<const double> x,
                    std::span<const double> xp);

/// (a_1 phi_1(x), ..., a_p phi_p(x)); its inner products reproduce multi_kernel.
Tensor concatenated_feature_map(const MultiKernelWeights& w, std::span<const double> x);

/// Either a single-order polynomial kernel or a weighted multi-kernel.
class KernelSpec {
public:
    static KernelSpec polynomial(unsigned r);
    static KernelSpec multi(MultiKernelWeights w);

    double operator()(std::span<const double> x, std::span<const double> xp) const;
    std::string describe() const;

private:
    explicit KernelSpec(std::variant<unsigned, MultiKernelWeights> k) : kernel_(std::move(k)) {}
    std::variant<unsigned, MultiKernelWeights> kernel_;
};

Eigen::MatrixXd gram_matrix(const KernelSpec& kernel, const std::vector<Tensor>& points);

struct PsdReport {
    double min_eig = 0.0;
    double max_eig = 0.0;
    bool converged = false;
    bool pass = false;
};

/// Eigenvalue range of a symmetric matrix. pass iff the solver converged and
/// min_eig >= -tol * max(1, max_eig).
PsdReport psd_check(const Eigen::MatrixXd& symmetric, double tol);
PsdReport gram_psd_check(const KernelSpec& kernel, const std::vector<Tensor>& points, double tol);

/// Sample-centred kernel expansion f(x) = sum_j gamma_j K(x, x_j). Storage
/// grows with the number of training samples.
struct KrrModel {
    KernelSpec kernel;
    std::vector<Tensor> centers;
    std::vector<double> coefficients;
    double ridge = 0.0;

    std::size_t stored_centers() const noexcept { return centers.size(); }
};

/// Solves (G + ridge I) gamma = y with a dense factorization. With ridge == 0
/// a numerically singular Gram matrix raises an Error with code
/// "singular_system".
KrrModel krr_fit(const std::vector<Tensor>& samples, std::span<const double> targets,
                 const KernelSpec& kernel, double ridge);
double krr_predict(const KrrModel& model, std::span<const double> x);

}  // namespace kvnn
