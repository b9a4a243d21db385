// Acceptance gate: one PASS/FAIL line per criterion, tolerances pinned below.
// Usage: kvnn_acceptance [work_dir [criterion ids...]]

#include "kvnn/cli.hpp"
#include "kvnn/experiments.hpp"
#include "kvnn/layer.hpp"
#include "kvnn/mk_volterra.hpp"
#include "kvnn/network.hpp"
#include "kvnn/poly_kernels.hpp"
#include "kvnn/rng.hpp"
#include "kvnn/selfcheck.hpp"
#include "kvnn/volterra.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

using namespace kvnn;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances and sizes ----
constexpr std::uint64_t kDncnnParams = 557057;
constexpr double kOracleTol = 1e-10;
constexpr int kOracleMaps = 50;
constexpr int kOraclePoints = 1000;
constexpr double kFitTol = 1e-8;
constexpr int kFitTargets = 20;
constexpr int kFitPoints = 500;
constexpr double kKernelTol = 1e-12;
constexpr int kKernelPairs = 500;
constexpr double kPsdTol = 1e-8;
constexpr int kPsdPoints = 200;
constexpr int kPsdWeightSets = 10;
constexpr double kGradTol = 1e-6;
constexpr double kGradStep = 1e-5;
constexpr double kGradFloor = 1e-6;
constexpr std::size_t kGradMinParams = 200;
constexpr double kLinearTol = 1e-12;
constexpr double kMinGainDb = 3.0;
constexpr double kPsnrMarginDb = 0.3;
constexpr double kRunBudgetSeconds = 600.0;
constexpr double kXorHigh = 0.95;
constexpr double kXorLow = 0.60;
constexpr double kKrrMseRel = 0.10;

// Seeds of the paired reduced-kVNN / conv-baseline denoising runs; PSNR is
// averaged over them. Disjoint from the seeds the reduced width was chosen on.
const std::vector<std::uint64_t> kPairedSeeds{11, 12, 13};

const fs::path kData(KVNN_DATA_DIR);

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::vector<double> gaussian(std::mt19937_64& rng, std::size_t n) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = normal(rng);
    return v;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// Dense evaluation sum over all index tuples i_1..i_r of h[i] x_i1 ... x_ir.
double dense_term(const Tensor& h, std::span<const double> x) {
    const std::size_t d = x.size();
    const std::size_t r = h.rank();
    double total = 0.0;
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < h.size(); ++flat) {
        double prod = h[flat];
        for (std::size_t k = 0; k < r; ++k) prod *= x[idx[k]];
        total += prod;
        for (std::size_t k = r; k-- > 0;) {
            if (++idx[k] < d) break;
            idx[k] = 0;
        }
    }
    return total;
}

double dot_n(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// ---- criteria ----

Outcome c1_param_count() {
    const auto t = Topology::load(kData / "topologies" / "dncnn17.json");
    const auto n = count_params(t);
    std::ostringstream out, err;
    const int code = cli_main({"count", "--topology", (kData / "topologies" / "dncnn17.json").string()}, out, err);
    const bool printed = out.str().find("557,057") != std::string::npos;
    return {n == kDncnnParams && code == 0 && printed,
            "count=" + std::to_string(n) + " printed=" + (printed ? "557,057" : "missing")};
}

Outcome c2_oracle_equivalence() {
    std::mt19937_64 rng(20202);
    std::uniform_int_distribution<std::size_t> pick_d(2, 6), pick_m(1, 6);
    std::uniform_int_distribution<unsigned> pick_p(2, 3);
    double worst = 0.0;
    for (int m = 0; m < kOracleMaps; ++m) {
        const std::size_t d = pick_d(rng);
        const unsigned p = pick_p(rng);
        std::vector<std::size_t> counts(p);
        for (auto& c : counts) c = pick_m(rng);
        const auto map = init_mk(rng(), d, p, counts);
        const auto dense = to_volterra(map);
        for (int i = 0; i < kOraclePoints; ++i) {
            const auto x = gaussian(rng, d);
            const double a = eval_mk(map, x), e = eval_volterra(dense, x);
            worst = std::max(worst, std::abs(a - e) / std::abs(e));
        }
    }
    return {worst <= kOracleTol, "max_rel=" + fmt("%.3e", worst) + " tol=" + fmt("%.0e", kOracleTol)};
}

Outcome c3_exact_fit() {
    double worst = 0.0;
    bool counts_ok = true;
    std::mt19937_64 rng(30303);
    for (std::size_t d = 2; d <= 5; ++d)
        for (unsigned r = 2; r <= 3; ++r)
            for (int t = 0; t < kFitTargets; ++t) {
                const auto target = random_volterra(rng(), d, r, 1.0).tensors[r - 1];
                const auto fit = fit_exact(target, rng());
                counts_ok = counts_ok && fit.branch.size() == binomial(d + r - 1, r);
                for (int i = 0; i < kFitPoints; ++i) {
                    const auto x = gaussian(rng, d);
                    const double e = dense_term(target, x);
                    double a = 0.0;
                    for (const auto& atom : fit.branch.atoms())
                        a += atom.coefficient * std::pow(dot_n(atom.center.data(), x), r);
                    worst = std::max(worst, std::abs(a - e) / std::abs(e));
                }
            }
    return {counts_ok && worst <= kFitTol, std::string("atoms==C(d+r-1,r):") + (counts_ok ? "yes" : "no") +
                                               " max_rel=" + fmt("%.3e", worst) + " tol=" + fmt("%.0e", kFitTol)};
}

Outcome c4_kernel_identities() {
    std::mt19937_64 rng(40404);
    std::uniform_int_distribution<std::size_t> pick_d(1, 5);
    std::uniform_int_distribution<unsigned> pick_r(1, 4);
    std::uniform_real_distribution<double> weight(0.0, 2.0);
    double single = 0.0, multi = 0.0;
    for (int t = 0; t < kKernelPairs; ++t) {
        const std::size_t d = pick_d(rng);
        const unsigned r = pick_r(rng);
        const auto x = gaussian(rng, d), y = gaussian(rng, d);
        const double nx = std::sqrt(dot_n(x, x)), ny = std::sqrt(dot_n(y, y)), xy = dot_n(x, y);
        // Cauchy-Schwarz scale: (x.y)^r itself may sit near zero.
        single = std::max(single, std::abs(dot_n(feature_map(r, x).data(), feature_map(r, y).data()) -
                                           std::pow(xy, r)) / std::pow(nx * ny, r));
        std::vector<double> a(r);
        for (auto& v : a) v = weight(rng);
        double k = 0.0, scale = 0.0;
        for (unsigned q = 1; q <= r; ++q) {
            k += a[q - 1] * a[q - 1] * std::pow(xy, q);
            scale += a[q - 1] * a[q - 1] * std::pow(nx * ny, q);
        }
        const MultiKernelWeights w(a);
        const double via_map = dot_n(concatenated_feature_map(w, x).data(), concatenated_feature_map(w, y).data());
        if (scale > 0.0) multi = std::max(multi, std::abs(via_map - k) / scale);
    }
    // Gram PSD: library check plus a test-side Gram built from the closed form.
    bool psd = true;
    double worst_neg = 0.0;
    std::vector<Tensor> points;
    for (int i = 0; i < kPsdPoints; ++i) points.emplace_back(Shape{5}, gaussian(rng, 5));
    std::uniform_real_distribution<double> nonneg(0.0, 1.0);
    for (int s = 0; s < kPsdWeightSets; ++s) {
        std::vector<double> a(3);
        for (auto& v : a) v = nonneg(rng);
        const auto report = gram_psd_check(KernelSpec::multi(MultiKernelWeights(a)), points, kPsdTol);
        Eigen::MatrixXd g(kPsdPoints, kPsdPoints);
        for (int i = 0; i < kPsdPoints; ++i)
            for (int j = 0; j < kPsdPoints; ++j) {
                const double xy = dot_n(points[i].data(), points[j].data());
                g(i, j) = a[0] * a[0] * xy + a[1] * a[1] * xy * xy + a[2] * a[2] * xy * xy * xy;
            }
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g, Eigen::EigenvaluesOnly);
        const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
        const double neg = std::max(0.0, -lo) / std::max(1.0, hi);
        worst_neg = std::max(worst_neg, neg);
        psd = psd && report.pass && neg <= kPsdTol;
    }
    const bool pass = single <= kKernelTol && multi <= kKernelTol && psd;
    return {pass, "single=" + fmt("%.3e", single) + " multi=" + fmt("%.3e", multi) + " tol=" +
                      fmt("%.0e", kKernelTol) + " psd_neg=" + fmt("%.3e", worst_neg) + " tol=" + fmt("%.0e", kPsdTol)};
}

struct FdResult {
    double worst = 0.0;
    std::size_t params = 0;
    std::size_t inputs = 0;
};

// Central differences of L = <u, net(x)> over every parameter and input entry.
FdResult finite_difference(const Network& net, const Tensor& x, const Tensor& u, int corrupt = -1) {
    auto loss = [&](const Network& n, const Tensor& in) {
        const Tensor y = n.forward(in);
        return dot_n(y.data(), u.data());
    };
    auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), kGradFloor}); };
    auto analytic = net.backward(x, u);
    if (corrupt >= 0) analytic.params[static_cast<std::size_t>(corrupt)] *= -1.0;
    FdResult r;
    Network probe = net;
    auto theta = net.params();
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double keep = theta[i];
        theta[i] = keep + kGradStep;
        probe.set_params(theta);
        const double up = loss(probe, x);
        theta[i] = keep - kGradStep;
        probe.set_params(theta);
        const double down = loss(probe, x);
        theta[i] = keep;
        r.worst = std::max(r.worst, rel(analytic.params[i], (up - down) / (2 * kGradStep)));
        ++r.params;
    }
    probe.set_params(theta);
    Tensor xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        xp[i] = x[i] + kGradStep;
        const double up = loss(net, xp);
        xp[i] = x[i] - kGradStep;
        const double down = loss(net, xp);
        xp[i] = x[i];
        r.worst = std::max(r.worst, rel(analytic.input[i], (up - down) / (2 * kGradStep)));
        ++r.inputs;
    }
    return r;
}

Outcome c5_gradient_audit() {
    std::mt19937_64 rng(50505);
    std::ostringstream detail;
    bool pass = true;
    std::size_t total_params = 0;
    double worst = 0.0;
    for (unsigned p = 1; p <= 3; ++p) {
        json block{{"type", "kvnn"}, {"C_in", 3},        {"C_out", 4}, {"kernel", 3}, {"pad", 1},
                   {"p", p},         {"n", p >= 2 ? 2 : 0}, {"m", p == 3 ? 1 : 0}, {"bias", true}};
        const auto net = Network::build(Topology::from_json(json{{"input_channels", 3}, {"blocks", {block}}}),
                                        mix_seed(50505, p));
        const Tensor x({3, 6, 6}, gaussian(rng, 108));
        const Tensor u({4, 6, 6}, gaussian(rng, 144));
        const auto r = finite_difference(net, x, u);
        worst = std::max(worst, r.worst);
        total_params += r.params;
        detail << "p" << p << "=" << fmt("%.2e", r.worst) << "(" << r.params << "p+" << r.inputs << "x) ";
        if (p == 3) {
            // The audit itself must catch a single wrong entry.
            const auto bad = finite_difference(net, x, u, 17);
            const bool caught = bad.worst > kGradTol;
            detail << "negative_control=" << (caught ? "caught" : "MISSED") << " ";
            pass = pass && caught;
        }
    }
    pass = pass && worst <= kGradTol && total_params >= kGradMinParams;
    detail << "d=27 tol=" << fmt("%.0e", kGradTol);
    return {pass, detail.str()};
}

Outcome c6_linear_reduction() {
    std::mt19937_64 rng(60606);
    const ConvGeometry g{3, 3, 3, 1, 1};
    const std::size_t d = g.patch_dim(), out = 4, h = 7, w = 6;
    const auto kv = KvnnLayer::random(g, out, FilterConfig{1, 0, 0, true}, 60607);
    Tensor weight({out, d});
    std::vector<double> bias(out);
    for (std::size_t c = 0; c < out; ++c) {
        const auto& atom = kv.filters()[c].map.branch(1).atoms()[0];
        for (std::size_t k = 0; k < d; ++k) weight[c * d + k] = atom.coefficient * atom.center[k];
        bias[c] = kv.filters()[c].bias;
    }
    const ConvLayer conv(g, weight, bias);
    const Tensor x({3, h, w}, gaussian(rng, 3 * h * w));
    const Tensor yk = kv.forward(x), yc = conv.forward(x);
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); };
    double fwd = 0.0, naive = 0.0;
    for (std::size_t i = 0; i < yk.size(); ++i) fwd = std::max(fwd, rel(yk[i], yc[i]));
    // Direct zero-padded cross-correlation as the reference for both.
    for (std::size_t c = 0; c < out; ++c)
        for (std::size_t oy = 0; oy < h; ++oy)
            for (std::size_t ox = 0; ox < w; ++ox) {
                double s = bias[c];
                for (std::size_t ci = 0; ci < 3; ++ci)
                    for (std::size_t ky = 0; ky < 3; ++ky)
                        for (std::size_t kx = 0; kx < 3; ++kx) {
                            const long iy = static_cast<long>(oy + ky) - 1, ix = static_cast<long>(ox + kx) - 1;
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                            s += weight[c * d + (ci * 3 + ky) * 3 + kx] * x[(ci * h + iy) * w + ix];
                        }
                naive = std::max(naive, rel(yk[(c * h + oy) * w + ox], s));
            }
    const Tensor u(yk.shape(), gaussian(rng, yk.size()));
    const auto gk = kv.backward(x, u), gc = conv.backward(x, u);
    double bwd = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) bwd = std::max(bwd, rel(gk.input[i], gc.input[i]));
    // Parameter gradients by the chain rule through W = gamma * c.
    for (std::size_t c = 0; c < out; ++c) {
        const auto& atom = kv.filters()[c].map.branch(1).atoms()[0];
        const std::size_t base = c * (d + 2);
        double dgamma = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const double dw = gc.params[c * d + k];
            bwd = std::max(bwd, rel(gk.params[base + k], atom.coefficient * dw));
            dgamma += atom.center[k] * dw;
        }
        bwd = std::max(bwd, rel(gk.params[base + d], dgamma));
        bwd = std::max(bwd, rel(gk.params[base + d + 1], gc.params[out * d + c]));
    }
    const double worst = std::max({fwd, naive, bwd});
    return {worst <= kLinearTol, "forward=" + fmt("%.2e", fwd) + " vs_direct=" + fmt("%.2e", naive) +
                                     " backward=" + fmt("%.2e", bwd) + " tol=" + fmt("%.0e", kLinearTol)};
}

struct DenoiseRun {
    DenoiseReport report;
    double seconds = 0.0;
};

DenoiseRun run_denoise(const std::string& config_name, std::uint64_t seed, const fs::path& out) {
    auto j = read_json(kData / "configs" / (config_name + ".json"));
    j["seed"] = seed;
    const auto config = DenoiseConfig::from_json(j, kData / "configs");
    const auto t0 = Clock::now();
    DenoiseRun r;
    r.report = run_denoise_experiment(config, out);
    r.seconds = seconds_since(t0);
    return r;
}

Outcome c7_denoising(const fs::path& work) {
    std::ostringstream detail;
    double slowest = 0.0;
    const auto gain_run = run_denoise("denoise_kvnn5", 7, work / "c7_kvnn5");
    slowest = gain_run.seconds;
    const double gain = gain_run.report.eval.mean_denoised_psnr - gain_run.report.eval.mean_noisy_psnr;
    detail << "kvnn5 gain=" << fmt("%.2f", gain) << "dB (>=" << kMinGainDb << ")";

    double reduced_psnr = 0.0, baseline_psnr = 0.0;
    std::size_t reduced_params = 0, baseline_params = 0;
    for (auto seed : kPairedSeeds) {
        const auto a = run_denoise("denoise_reduced", seed, work / ("c7_reduced_s" + std::to_string(seed)));
        const auto b = run_denoise("denoise_cnn7", seed, work / ("c7_cnn7_s" + std::to_string(seed)));
        reduced_psnr += a.report.eval.mean_denoised_psnr / static_cast<double>(kPairedSeeds.size());
        baseline_psnr += b.report.eval.mean_denoised_psnr / static_cast<double>(kPairedSeeds.size());
        reduced_params = a.report.params;
        baseline_params = b.report.params;
        slowest = std::max({slowest, a.seconds, b.seconds});
    }
    const double gap = baseline_psnr - reduced_psnr;
    detail << " reduced kvnn " << with_thousands(reduced_params) << " params " << fmt("%.3f", reduced_psnr)
           << "dB vs conv " << with_thousands(baseline_params) << " params " << fmt("%.3f", baseline_psnr)
           << "dB (mean of " << kPairedSeeds.size() << " seeds), shortfall=" << fmt("%.3f", gap) << "dB (<="
           << kPsnrMarginDb << ") slowest_run=" << fmt("%.0f", slowest) << "s";
    const bool pass = gain >= kMinGainDb && reduced_params < baseline_params && gap <= kPsnrMarginDb &&
                      slowest <= kRunBudgetSeconds;
    return {pass, detail.str()};
}

Outcome c8_xor(const fs::path& work) {
    const auto config = ClassifyConfig::from_json(read_json(kData / "configs" / "classify_xor.json"));
    const auto report = run_toy_classification(config, work / "c8_xor");
    const double p1 = report.models[0].test_accuracy, p2 = report.models[1].test_accuracy;
    return {p2 >= kXorHigh && p1 <= kXorLow,
            "p2_test=" + fmt("%.4f", p2) + " (>=0.95) p1_test=" + fmt("%.4f", p1) + " (<=0.60)"};
}

Outcome c9_krr() {
    bool pass = true;
    std::ostringstream detail;
    for (std::size_t d = 2; d <= 5; ++d) {
        KrrContrastConfig config;
        config.d = d;
        config.seed = 900 + d;
        const auto r = run_krr_contrast(config);
        const bool ok = r.krr_centers == config.train_samples && r.kvnn_atoms <= binomial(d + 1, 2) &&
                        r.kvnn_test_mse <= (1.0 + kKrrMseRel) * r.krr_test_mse;
        pass = pass && ok;
        detail << "d" << d << ":centers=" << r.krr_centers << ",atoms=" << r.kvnn_atoms << "/" << binomial(d + 1, 2)
               << ",mse " << fmt("%.2e", r.kvnn_test_mse) << "/" << fmt("%.2e", r.krr_test_mse) << " ";
    }
    detail << "(kvnn mse <= 1.1 * krr mse)";
    return {pass, detail.str()};
}

Outcome c10_determinism(const fs::path& work) {
    std::vector<std::string> mismatches;
    const auto s1 = selfcheck_to_json(run_selfcheck(1), 1).dump();
    const auto s2 = selfcheck_to_json(run_selfcheck(1), 1).dump();
    if (s1 != s2) mismatches.push_back("selfcheck");

    run_denoise("denoise_kvnn5", 7, work / "c10_kvnn5_rerun");
    for (const char* f : {"manifest.json", "metrics.csv", "model/params.kvt"})
        if (slurp(work / "c7_kvnn5" / f) != slurp(work / "c10_kvnn5_rerun" / f))
            mismatches.push_back(std::string("denoise/") + f);

    const auto config = ClassifyConfig::from_json(read_json(kData / "configs" / "classify_xor.json"));
    run_toy_classification(config, work / "c10_xor_rerun");
    for (const char* f : {"manifest.json", "metrics_p1.csv", "metrics_p2.csv"})
        if (slurp(work / "c8_xor" / f) != slurp(work / "c10_xor_rerun" / f))
            mismatches.push_back(std::string("classify/") + f);

    KrrContrastConfig krr;
    const auto k1 = run_krr_contrast(krr), k2 = run_krr_contrast(krr);
    if (k1.krr_test_mse != k2.krr_test_mse || k1.kvnn_test_mse != k2.kvnn_test_mse) mismatches.push_back("krr");

    std::string detail = "compared selfcheck json, denoise manifest/metrics/params, classify manifest/metrics, krr";
    for (const auto& m : mismatches) detail += " MISMATCH:" + m;
    return {mismatches.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_runs");
    fs::remove_all(work);
    fs::create_directories(work);

    struct Criterion {
        int id;
        const char* name;
        double budget_seconds;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "dncnn17_param_count", 1.0, c1_param_count},
        {2, "oracle_equivalence", 60.0, c2_oracle_equivalence},
        {3, "exact_atomic_fit", 120.0, c3_exact_fit},
        {4, "kernel_identities_and_psd", 60.0, c4_kernel_identities},
        {5, "gradient_audit", 120.0, c5_gradient_audit},
        {6, "linear_reduction", 10.0, c6_linear_reduction},
        {7, "desk_scale_denoising", 0.0, [&] { return c7_denoising(work); }},
        {8, "xor_higher_order", 300.0, [&] { return c8_xor(work); }},
        {9, "krr_contrast", 60.0, c9_krr},
        {10, "determinism", 0.0, [&] { return c10_determinism(work); }},
    };

    std::vector<int> only;
    for (int i = 2; i < argc; ++i) only.push_back(std::stoi(argv[i]));

    int failed = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = seconds_since(t0);
        std::string timing = "time=" + fmt("%.2f", secs) + "s";
        if (c.budget_seconds > 0.0) {
            timing += " (budget " + fmt("%.0f", c.budget_seconds) + "s)";
            if (secs > c.budget_seconds) {
                o.pass = false;
                timing += " OVER BUDGET";
            }
        }
        if (!o.pass) ++failed;
        std::cout << (o.pass ? "PASS" : "FAIL") << " C" << c.id << " " << c.name << " " << o.detail << " " << timing
                  << std::endl;
    }
    std::cout << (failed ? "ACCEPTANCE FAILED: " + std::to_string(failed) + " criteria" : std::string("ACCEPTANCE PASSED"))
              << std::endl;
    return failed ? 1 : 0;
}
