#include "kvnn/mk_volterra.hpp"

#include "kvnn/error.hpp"
#include "kvnn/tensor_io.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

namespace kvnn {

namespace {

double double_factorial_odd(unsigned r) {
    double v = 1.0;
    for (unsigned k = 2 * r - 1; k > 1; k -= 2) v *= k;
    return v;
}

Tensor unit_sphere_sample(std::mt19937_64& rng, std::size_t d) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor w({d});
    double norm2 = 0.0;
    while (norm2 == 0.0) {
        norm2 = 0.0;
        for (auto& v : w.data()) {
            v = normal(rng);
            norm2 += v * v;
        }
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& v : w.data()) v *= inv;
    return w;
}

// Coefficient of x^alpha in a symmetric tensor: the entry at the sorted index
// tuple with multiplicities alpha.
double symmetric_entry(const Tensor& h, const MultiIndex& alpha) {
    std::vector<std::size_t> idx;
    idx.reserve(alpha.degree);
    for (std::size_t j = 0; j < alpha.alpha.size(); ++j)
        for (unsigned e = 0; e < alpha.alpha[j]; ++e) idx.push_back(j);
    return h[h.offset(idx)];
}

}  // namespace

KernelAtom::KernelAtom(unsigned order, Tensor center, double coefficient_)
    : center(std::move(center)), coefficient(coefficient_), order_(order) {
    if (order_ == 0) throw invalid_argument("kernel atom order must be >= 1");
    if (this->center.rank() != 1) throw dimension_error("kernel atom center must be rank-1");
    if (!this->center.all_finite() || !std::isfinite(coefficient))
        throw Error("non_finite", "kernel atom parameters must be finite");
}

void OrderBranch::add(KernelAtom atom) {
    if (atom.order() != order_)
        throw invalid_argument("atom of order " + std::to_string(atom.order()) +
                               " added to branch of order " + std::to_string(order_));
    if (atom.dim() != dim_)
        throw dimension_error("atom center length " + std::to_string(atom.dim()) +
                              " for branch dimension " + std::to_string(dim_));
    atoms_.push_back(std::move(atom));
}

MKVolterraMap::MKVolterraMap(std::size_t input_dim, unsigned max_order) : input_dim_(input_dim) {
    if (input_dim == 0) throw invalid_argument("MKVolterraMap: input dimension must be >= 1");
    if (max_order == 0) throw invalid_argument("MKVolterraMap: max order must be >= 1");
    for (unsigned r = 1; r <= max_order; ++r) branches_.emplace_back(r, input_dim);
}

OrderBranch& MKVolterraMap::branch(unsigned r) {
    if (r == 0 || r > branches_.size())
        throw invalid_argument("order " + std::to_string(r) + " outside 1.." +
                               std::to_string(branches_.size()));
    return branches_[r - 1];
}

const OrderBranch& MKVolterraMap::branch(unsigned r) const {
    return const_cast<MKVolterraMap*>(this)->branch(r);
}

std::size_t MKVolterraMap::atom_count() const noexcept {
    std::size_t n = 0;
    for (const auto& b : branches_) n += b.size();
    return n;
}

double eval_atom(const KernelAtom& atom, std::span<const double> x) {
    return atom.coefficient * ipow(dot(x, atom.center.data()), atom.order());
}

double eval_branch(const OrderBranch& branch, std::span<const double> x) {
    if (x.size() != branch.dim())
        throw dimension_error("input length " + std::to_string(x.size()) +
                              " for branch dimension " + std::to_string(branch.dim()));
    double s = 0.0;
    for (const auto& atom : branch.atoms()) s += eval_atom(atom, x);
    return s;
}

double eval_order(const MKVolterraMap& map, unsigned r, std::span<const double> x) {
    return eval_branch(map.branch(r), x);
}

double eval_mk(const MKVolterraMap& map, std::span<const double> x) {
    double s = 0.0;
    for (const auto& b : map.branches()) s += eval_branch(b, x);
    return s;
}

Tensor atoms_to_tensor(const OrderBranch& branch) {
    const std::size_t d = branch.dim();
    const unsigned r = branch.order();
    if (d > kOracleMaxDim || r > kOracleMaxOrder)
        throw Error("guard", "atoms_to_tensor: oracle guard is d <= 8, r <= 3");
    Tensor h(Shape(r, d));
    std::vector<std::size_t> idx(r);
    for (const auto& atom : branch.atoms()) {
        const auto w = atom.center.data();
        std::fill(idx.begin(), idx.end(), 0);
        for (std::size_t flat = 0; flat < h.size(); ++flat) {
            // Factors multiplied in sorted index order so permuted entries
            // receive bit-identical contributions.
            std::vector<std::size_t> sorted = idx;
            std::sort(sorted.begin(), sorted.end());
            double prod = atom.coefficient;
            for (auto i : sorted) prod *= w[i];
            h[flat] += prod;
            for (std::size_t a = r; a-- > 0;) {
                if (++idx[a] < d) break;
                idx[a] = 0;
            }
        }
    }
    return h;
}

VolterraCoefficients to_volterra(const MKVolterraMap& map) {
    VolterraCoefficients c;
    c.input_dim = map.input_dim();
    for (const auto& b : map.branches()) {
        if (b.empty()) {
            if (map.input_dim() > kOracleMaxDim || b.order() > kOracleMaxOrder)
                throw Error("guard", "to_volterra: oracle guard is d <= 8, r <= 3");
            c.tensors.emplace_back(Shape(b.order(), map.input_dim()));
        } else {
            c.tensors.push_back(atoms_to_tensor(b));
        }
    }
    return c;
}

FitResult fit_exact(const Tensor& target, std::uint64_t seed) {
    if (target.rank() == 0) throw invalid_argument("fit_exact: empty target");
    const auto r = static_cast<unsigned>(target.rank());
    const std::size_t d = target.dim(0);
    for (auto e : target.shape())
        if (e != d) throw Error("not_cubical", "fit_exact: target is not cubical");
    if (d > kFitMaxDim || r > kOracleMaxOrder)
        throw Error("guard", "fit_exact: guard is d <= 6, r <= 3");
    const Tensor sym = symmetrize(target);
    double asym = 0.0;
    for (std::size_t i = 0; i < sym.size(); ++i) asym = std::max(asym, std::abs(sym[i] - target[i]));
    if (asym > 1e-12 * std::max(1.0, max_abs(target.data())))
        throw invalid_argument("fit_exact: target must be symmetric (symmetrize it first)");

    const auto basis = enumerate_multi_indices(d, r);
    const auto m = static_cast<Eigen::Index>(basis.size());
    Eigen::VectorXd rhs(m);
    std::vector<double> weight(basis.size());
    for (Eigen::Index a = 0; a < m; ++a) {
        weight[a] = static_cast<double>(multinomial_coefficient(basis[a]));
        rhs(a) = weight[a] * symmetric_entry(sym, basis[a]);
    }

    double last_condition = 0.0;
    for (unsigned attempt = 0; attempt <= kFitMaxRetries; ++attempt) {
        const std::uint64_t s = seed + attempt;
        std::mt19937_64 rng(s);
        std::vector<Tensor> centers;
        Eigen::MatrixXd design(m, m);
        for (Eigen::Index i = 0; i < m; ++i) {
            centers.push_back(unit_sphere_sample(rng, d));
            for (Eigen::Index a = 0; a < m; ++a)
                design(a, i) = weight[a] * monomial_eval(centers.back().data(), basis[a]);
        }
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(design, Eigen::ComputeFullU | Eigen::ComputeFullV);
        const auto& sv = svd.singularValues();
        last_condition = sv(sv.size() - 1) > 0.0 ? sv(0) / sv(sv.size() - 1)
                                                  : std::numeric_limits<double>::infinity();
        if (!(last_condition <= kFitMaxCondition)) continue;

        const Eigen::VectorXd gamma = svd.solve(rhs);
        OrderBranch branch(r, d);
        for (Eigen::Index i = 0; i < m; ++i) branch.add(KernelAtom(r, std::move(centers[i]), gamma(i)));
        return FitResult{std::move(branch), last_condition, attempt + 1, s};
    }
    throw Error("ill_conditioned",
                "fit_exact: design matrix condition number stayed above 1e10 after " +
                    std::to_string(kFitMaxRetries) + " retries (last " +
                    std::to_string(last_condition) + ", d=" + std::to_string(d) +
                    ", r=" + std::to_string(r) + ")");
}

OrderBranch fit_branch_to_samples(const std::vector<Tensor>& samples,
                                  std::span<const double> targets, unsigned r,
                                  std::size_t atoms, std::uint64_t seed) {
    if (samples.empty() || samples.size() != targets.size())
        throw dimension_error("fit_branch_to_samples: need matching non-empty samples/targets");
    if (atoms == 0 || r == 0) throw invalid_argument("fit_branch_to_samples: atoms and r must be >= 1");
    const std::size_t d = samples.front().size();
    std::mt19937_64 rng(seed);
    std::vector<Tensor> centers;
    for (std::size_t i = 0; i < atoms; ++i) centers.push_back(unit_sphere_sample(rng, d));

    const auto n = static_cast<Eigen::Index>(samples.size());
    Eigen::MatrixXd design(n, static_cast<Eigen::Index>(atoms));
    for (Eigen::Index j = 0; j < n; ++j)
        for (std::size_t i = 0; i < atoms; ++i)
            design(j, static_cast<Eigen::Index>(i)) =
                ipow(dot(samples[j].data(), centers[i].data()), r);
    const Eigen::Map<const Eigen::VectorXd> y(targets.data(), n);
    const Eigen::VectorXd gamma = design.colPivHouseholderQr().solve(y);

    OrderBranch branch(r, d);
    for (std::size_t i = 0; i < atoms; ++i)
        branch.add(KernelAtom(r, std::move(centers[i]), gamma(static_cast<Eigen::Index>(i))));
    return branch;
}

MKVolterraMap init_mk(std::uint64_t seed, std::size_t d, unsigned p,
                      std::span<const std::size_t> counts, const InitSpec& init) {
    if (counts.size() != p)
        throw invalid_argument("init_mk: expected " + std::to_string(p) + " atom counts");
    MKVolterraMap map(d, p);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (unsigned r = 1; r <= p; ++r) {
        const std::size_t count = counts[r - 1];
        if (count == 0) continue;
        const double order_gain = r <= init.order_gain.size() ? init.order_gain[r - 1] : 1.0;
        const double sigma = init.gain * order_gain / std::sqrt(static_cast<double>(d)) /
                             std::pow(double_factorial_odd(r), 1.0 / (2.0 * r));
        const double gamma_std = 1.0 / std::sqrt(static_cast<double>(count));
        for (std::size_t i = 0; i < count; ++i) {
            Tensor w({d});
            for (auto& v : w.data()) v = sigma * normal(rng);
            const double g = gamma_std * normal(rng);
            map.branch(r).add(KernelAtom(r, std::move(w), g));
        }
    }
    return map;
}

void save_mk(const std::filesystem::path& dir, const MKVolterraMap& map) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["d"] = map.input_dim();
    manifest["p"] = map.max_order();
    manifest["branches"] = nlohmann::json::array();
    for (const auto& b : map.branches()) {
        nlohmann::json entry{{"order", b.order()}, {"atoms", b.size()}};
        if (!b.empty()) {
            Tensor centers({b.size(), map.input_dim()});
            Tensor coeffs({b.size()});
            for (std::size_t i = 0; i < b.size(); ++i) {
                const auto w = b.atoms()[i].center.data();
                std::copy(w.begin(), w.end(), centers.data().begin() + i * map.input_dim());
                coeffs[i] = b.atoms()[i].coefficient;
            }
            const std::string stem = "order" + std::to_string(b.order());
            save_tensor(dir / (stem + "_centers.kvt"), centers);
            save_tensor(dir / (stem + "_coefficients.kvt"), coeffs);
            entry["centers"] = stem + "_centers.kvt";
            entry["coefficients"] = stem + "_coefficients.kvt";
        }
        manifest["branches"].push_back(entry);
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

MKVolterraMap load_mk(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw Error("io", "missing " + (dir / "manifest.json").string());
    const auto manifest = nlohmann::json::parse(in);
    const auto d = manifest.at("d").get<std::size_t>();
    MKVolterraMap map(d, manifest.at("p").get<unsigned>());
    for (const auto& entry : manifest.at("branches")) {
        const auto r = entry.at("order").get<unsigned>();
        const auto count = entry.at("atoms").get<std::size_t>();
        if (count == 0) continue;
        const Tensor centers = load_tensor(dir / entry.at("centers").get<std::string>());
        const Tensor coeffs = load_tensor(dir / entry.at("coefficients").get<std::string>());
        if (centers.shape() != Shape{count, d} || coeffs.shape() != Shape{count})
            throw Error("io", "mk manifest: branch payload shapes disagree with manifest");
        for (std::size_t i = 0; i < count; ++i) {
            std::vector<double> w(centers.data().begin() + i * d,
                                  centers.data().begin() + (i + 1) * d);
            map.branch(r).add(KernelAtom(r, Tensor::vector(std::move(w)), coeffs[i]));
        }
    }
    return map;
}

}  // namespace kvnn
