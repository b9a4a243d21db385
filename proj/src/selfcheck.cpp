#include "kvnn/selfcheck.hpp"

#include "kvnn/error.hpp"
#include "kvnn/experiments.hpp"
#include "kvnn/layer.hpp"
#include "kvnn/mk_volterra.hpp"
#include "kvnn/network.hpp"
#include "kvnn/poly_kernels.hpp"
#include "kvnn/rng.hpp"
#include "kvnn/training.hpp"
#include "kvnn/volterra.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace kvnn {

namespace {

using nlohmann::json;

std::vector<double> gaussian(std::mt19937_64& rng, std::size_t n) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = normal(rng);
    return v;
}

double norm(std::span<const double> x) { return std::sqrt(dot(x, x)); }

CheckResult multinomial_identity() {
    CheckResult c{"multinomial_identity", true, 0.0, 0.0, "sum of multinomial(alpha) == d^r, d <= 6, r <= 5"};
    for (std::size_t d = 1; d <= 6; ++d)
        for (unsigned r = 1; r <= 5; ++r) {
            std::uint64_t sum = 0;
            for (const auto& m : enumerate_multi_indices(d, r)) sum += multinomial_coefficient(m);
            std::uint64_t expected = 1;
            for (unsigned i = 0; i < r; ++i) expected *= d;
            if (sum != expected) {
                c.pass = false;
                c.value = 1.0;
            }
        }
    return c;
}

CheckResult feature_maps(std::uint64_t seed) {
    CheckResult c{"kernel_feature_map", true, 0.0, 1e-12,
                  "<phi(x), phi(x')> vs kernel, single order and multi-kernel, relative to (|x||x'|)^r"};
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> weight(0.0, 2.0);
    for (int t = 0; t < 200; ++t) {
        const std::size_t d = 1 + static_cast<std::size_t>(t % 5);
        const unsigned r = 1 + static_cast<unsigned>((t / 5) % 4);
        const auto x = gaussian(rng, d), y = gaussian(rng, d);
        const double scale = std::pow(norm(x) * norm(y), r);
        const double via_map = dot(feature_map(r, x).data(), feature_map(r, y).data());
        c.value = std::max(c.value, std::abs(via_map - poly_kernel(r, x, y)) / scale);

        std::vector<double> a(r);
        for (auto& v : a) v = weight(rng);
        const MultiKernelWeights w(a);
        double multi_scale = 0.0;
        for (unsigned q = 1; q <= r; ++q) multi_scale += a[q - 1] * a[q - 1] * std::pow(norm(x) * norm(y), q);
        const double multi_map = dot(concatenated_feature_map(w, x).data(), concatenated_feature_map(w, y).data());
        if (multi_scale > 0.0)
            c.value = std::max(c.value, std::abs(multi_map - multi_kernel(w, x, y)) / multi_scale);
    }
    c.pass = c.value <= c.tolerance;
    return c;
}

CheckResult gram_psd(std::uint64_t seed) {
    CheckResult c{"gram_psd", true, 0.0, 1e-8, "min eigenvalue >= -tol * max(1, max eigenvalue), N = 60, d = 4"};
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> weight(0.0, 1.0);
    std::vector<Tensor> points;
    for (int i = 0; i < 60; ++i) points.emplace_back(Shape{4}, gaussian(rng, 4));
    for (int t = 0; t < 4; ++t) {
        std::vector<double> a(3);
        for (auto& v : a) v = weight(rng);
        const auto report = gram_psd_check(KernelSpec::multi(MultiKernelWeights(a)), points, c.tolerance);
        c.value = std::max(c.value, std::max(0.0, -report.min_eig) / std::max(1.0, report.max_eig));
        c.pass = c.pass && report.pass;
    }
    return c;
}

CheckResult oracle_equivalence(std::uint64_t seed) {
    CheckResult c{"oracle_equivalence", true, 0.0, 1e-10, "eval_mk vs dense Volterra of atoms_to_tensor"};
    std::mt19937_64 rng(seed);
    for (int m = 0; m < 10; ++m) {
        const std::size_t d = 2 + static_cast<std::size_t>(m % 5);
        const unsigned p = 2 + static_cast<unsigned>(m % 2);
        const std::vector<std::size_t> counts(p, 1 + static_cast<std::size_t>(m % 6));
        const auto map = init_mk(mix_seed(seed, static_cast<std::uint64_t>(m)), d, p, counts);
        const auto dense = to_volterra(map);
        for (int i = 0; i < 100; ++i) {
            const auto x = gaussian(rng, d);
            c.value = std::max(c.value, relative_error(eval_mk(map, x), eval_volterra(dense, x)));
        }
    }
    c.pass = c.value <= c.tolerance;
    return c;
}

CheckResult exact_fit(std::uint64_t seed) {
    CheckResult c{"fit_exact", true, 0.0, 1e-8, "C(d+r-1, r) atoms reproduce random symmetric targets, d <= 4"};
    std::mt19937_64 rng(seed);
    for (std::size_t d = 2; d <= 4; ++d)
        for (unsigned r = 2; r <= 3; ++r) {
            const auto target = random_volterra(mix_seed(seed, d * 10 + r), d, r, 1.0).tensors[r - 1];
            const auto fit = fit_exact(target, mix_seed(seed, d * 100 + r));
            if (fit.branch.size() != binomial(d + r - 1, r)) c.pass = false;
            for (int i = 0; i < 100; ++i) {
                const auto x = gaussian(rng, d);
                c.value = std::max(c.value, relative_error(eval_branch(fit.branch, x), eval_volterra_term(target, x)));
            }
        }
    c.pass = c.pass && c.value <= c.tolerance;
    return c;
}

Network audit_network(std::uint64_t seed) {
    return Network::build(Topology::from_json(json::parse(R"({"input_channels":2,"blocks":[
        {"type":"kvnn","C_in":2,"C_out":3,"kernel":3,"pad":1,"p":3,"n":2,"m":1,"bias":true}]})")),
                          seed);
}

CheckResult gradient_audit(std::uint64_t seed) {
    CheckResult c{"gradient_audit", true, 0.0, 1e-6, "central differences, h = 1e-5, p = 3 layer, d = 18"};
    std::mt19937_64 rng(seed);
    const auto net = audit_network(seed);
    const std::vector<Tensor> batch{Tensor({2, 5, 5}, gaussian(rng, 50))};
    AuditOptions opt;
    opt.seed = seed;
    const auto report = grad_audit(net, batch, opt);
    c.value = report.max_rel_error;
    c.pass = report.pass;
    std::ostringstream detail;
    detail << c.detail << ", " << report.params_checked << " params + " << report.inputs_checked << " inputs";
    c.detail = detail.str();
    return c;
}

CheckResult gradient_negative_control(std::uint64_t seed) {
    CheckResult c{"gradient_audit_negative_control", true, 0.0, 1e-6, "audit must fail with one negated entry"};
    std::mt19937_64 rng(seed);
    const auto net = audit_network(seed);
    const std::vector<Tensor> batch{Tensor({2, 5, 5}, gaussian(rng, 50))};
    AuditOptions opt;
    opt.seed = seed;
    opt.corrupt_param = 3;
    const auto report = grad_audit(net, batch, opt);
    c.value = report.max_rel_error;
    c.pass = !report.pass;
    return c;
}

CheckResult linear_reduction(std::uint64_t seed) {
    CheckResult c{"linear_reduction", true, 0.0, 1e-12, "p = 1 kVNN layer vs convolution, forward and backward"};
    std::mt19937_64 rng(seed);
    const ConvGeometry g{2, 3, 3, 1, 1};
    const auto kv = KvnnLayer::random(g, 3, FilterConfig{1, 0, 0, false}, seed);
    Tensor weight({3, g.patch_dim()});
    for (std::size_t ch = 0; ch < 3; ++ch) {
        const auto& atom = kv.filters()[ch].map.branch(1).atoms()[0];
        for (std::size_t k = 0; k < g.patch_dim(); ++k) weight[ch * g.patch_dim() + k] = atom.coefficient * atom.center[k];
    }
    const ConvLayer conv(g, weight);
    const Tensor x({2, 6, 6}, gaussian(rng, 72));
    const Tensor yk = kv.forward(x), yc = conv.forward(x);
    for (std::size_t i = 0; i < yk.size(); ++i) c.value = std::max(c.value, relative_error(yk[i], yc[i], 1e-300));
    const Tensor u(yk.shape(), gaussian(rng, yk.size()));
    const auto gk = kv.backward(x, u), gc = conv.backward(x, u);
    for (std::size_t i = 0; i < x.size(); ++i)
        c.value = std::max(c.value, relative_error(gk.input[i], gc.input[i], 1e-300));
    c.pass = c.value <= c.tolerance;
    return c;
}

CheckResult dncnn_count() {
    CheckResult c{"dncnn17_param_count", true, 0.0, 0.0, "17 blocks, 64 channels, biases, batch-norm on 15 middle"};
    Topology t;
    t.residual = true;
    BlockSpec first;
    first.out_channels = 64;
    first.bias = true;
    first.activation = Activation::relu;
    BlockSpec middle = first;
    middle.in_channels = 64;
    middle.batchnorm = true;
    BlockSpec last;
    last.in_channels = 64;
    last.bias = true;
    t.blocks.push_back(first);
    t.blocks.insert(t.blocks.end(), 15, middle);
    t.blocks.push_back(last);
    const auto n = count_params(t);
    c.value = static_cast<double>(n);
    c.pass = n == 557057;
    c.detail += ": " + std::to_string(n);
    return c;
}

}  // namespace

std::vector<CheckResult> run_selfcheck(std::uint64_t seed) {
    std::vector<CheckResult> out;
    out.push_back(multinomial_identity());
    out.push_back(feature_maps(mix_seed(seed, 1)));
    out.push_back(gram_psd(mix_seed(seed, 2)));
    out.push_back(oracle_equivalence(mix_seed(seed, 3)));
    out.push_back(exact_fit(mix_seed(seed, 4)));
    out.push_back(gradient_audit(mix_seed(seed, 5)));
    out.push_back(gradient_negative_control(mix_seed(seed, 5)));
    out.push_back(linear_reduction(mix_seed(seed, 6)));
    out.push_back(dncnn_count());
    return out;
}

json selfcheck_to_json(const std::vector<CheckResult>& results, std::uint64_t seed) {
    json checks = json::array();
    bool all = true;
    for (const auto& r : results) {
        checks.push_back({{"name", r.name},
                          {"pass", r.pass},
                          {"value", json_real(r.value)},
                          {"tolerance", r.tolerance},
                          {"detail", r.detail}});
        all = all && r.pass;
    }
    return {{"tool", "kvnn"}, {"version", version_string()}, {"task", "selfcheck"}, {"seed", seed},
            {"pass", all}, {"checks", checks}};
}

}  // namespace kvnn
