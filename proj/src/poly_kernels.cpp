#include "kvnn/poly_kernels.hpp"

#include "kvnn/error.hpp"

#include <cmath>
#include <sstream>

namespace kvnn {

double poly_kernel(unsigned r, std::span<const double> x, std::span<const double> xp) {
    if (r == 0) throw invalid_argument("poly_kernel: order must be >= 1");
    return ipow(dot(x, xp), r);
}

Tensor feature_map(unsigned r, std::span<const double> x) {
    if (r == 0) throw invalid_argument("feature_map: order must be >= 1");
    const auto indices = enumerate_multi_indices(x.size(), r);
    std::vector<double> phi;
    phi.reserve(indices.size());
    for (const auto& m : indices)
        phi.push_back(std::sqrt(static_cast<double>(multinomial_coefficient(m))) *
                      monomial_eval(x, m));
    return Tensor::vector(std::move(phi));
}

MultiKernelWeights::MultiKernelWeights(std::vector<double> a) : a_(std::move(a)) {
    if (a_.empty()) throw invalid_argument("multi-kernel needs at least one order");
    for (double v : a_)
        if (!(v >= 0.0) || !std::isfinite(v))
            throw invalid_argument("multi-kernel weights must be finite and non-negative");
}

double multi_kernel(const MultiKernelWeights& w, std::span<const double> x,
                    std::span<const double> xp) {
    const double s = dot(x, xp);
    double total = 0.0;
    double power = 1.0;
    for (std::size_t r = 1; r <= w.max_order(); ++r) {
        power *= s;
        total += w[r - 1] * w[r - 1] * power;
    }
    return total;
}

Tensor concatenated_feature_map(const MultiKernelWeights& w, std::span<const double> x) {
    std::vector<double> phi;
    for (std::size_t r = 1; r <= w.max_order(); ++r) {
        const Tensor part = feature_map(static_cast<unsigned>(r), x);
        for (double v : part.data()) phi.push_back(w[r - 1] * v);
    }
    return Tensor::vector(std::move(phi));
}

KernelSpec KernelSpec::polynomial(unsigned r) {
    if (r == 0) throw invalid_argument("polynomial kernel order must be >= 1");
    return KernelSpec(r);
}

KernelSpec KernelSpec::multi(MultiKernelWeights w) { return KernelSpec(std::move(w)); }

double KernelSpec::operator()(std::span<const double> x, std::span<const double> xp) const {
    if (const auto* r = std::get_if<unsigned>(&kernel_)) return poly_kernel(*r, x, xp);
    return multi_kernel(std::get<MultiKernelWeights>(kernel_), x, xp);
}

std::string KernelSpec::describe() const {
    std::ostringstream os;
    if (const auto* r = std::get_if<unsigned>(&kernel_)) {
        os << "poly(r=" << *r << ")";
    } else {
        os << "multi(a=";
        const auto& a = std::get<MultiKernelWeights>(kernel_).values();
        for (std::size_t i = 0; i < a.size(); ++i) os << (i ? "," : "") << a[i];
        os << ")";
    }
    return os.str();
}

Eigen::MatrixXd gram_matrix(const KernelSpec& kernel, const std::vector<Tensor>& points) {
    const auto n = static_cast<Eigen::Index>(points.size());
    Eigen::MatrixXd g(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j <= i; ++j) {
            const double k = kernel(points[i].data(), points[j].data());
            g(i, j) = k;
            g(j, i) = k;
        }
    return g;
}

PsdReport psd_check(const Eigen::MatrixXd& symmetric, double tol) {
    PsdReport report;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(symmetric, Eigen::EigenvaluesOnly);
    report.converged = solver.info() == Eigen::Success;
    if (!report.converged) return report;
    const auto& ev = solver.eigenvalues();
    report.min_eig = ev.minCoeff();
    report.max_eig = ev.maxCoeff();
    report.pass = report.min_eig >= -tol * std::max(1.0, report.max_eig);
    return report;
}

PsdReport gram_psd_check(const KernelSpec& kernel, const std::vector<Tensor>& points, double tol) {
    if (points.size() < 2) throw invalid_argument("gram_psd_check: need at least two points");
    return psd_check(gram_matrix(kernel, points), tol);
}

KrrModel krr_fit(const std::vector<Tensor>& samples, std::span<const double> targets,
                 const KernelSpec& kernel, double ridge) {
    if (samples.empty()) throw invalid_argument("krr_fit: need at least one sample");
    if (samples.size() != targets.size())
        throw dimension_error("krr_fit: sample and target counts differ");
    if (!(ridge >= 0.0)) throw invalid_argument("krr_fit: ridge must be >= 0");

    Eigen::MatrixXd g = gram_matrix(kernel, samples);
    g.diagonal().array() += ridge;
    const Eigen::Map<const Eigen::VectorXd> y(targets.data(),
                                              static_cast<Eigen::Index>(targets.size()));
    Eigen::LDLT<Eigen::MatrixXd> ldlt(g);
    if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-14)
        throw Error("singular_system",
                    "krr_fit: kernel system is numerically singular; use a ridge parameter > 0");
    const Eigen::VectorXd gamma = ldlt.solve(y);
    if (!gamma.allFinite())
        throw Error("singular_system", "krr_fit: solve produced non-finite coefficients");

    return KrrModel{kernel, samples, std::vector<double>(gamma.data(), gamma.data() + gamma.size()),
                    ridge};
}

double krr_predict(const KrrModel& model, std::span<const double> x) {
    double f = 0.0;
    for (std::size_t j = 0; j < model.centers.size(); ++j)
        f += model.coefficients[j] * model.kernel(x, model.centers[j].data());
    return f;
}

}  // namespace kvnn
