#include "kvnn/cli.hpp"

#include "kvnn/data.hpp"
#include "kvnn/error.hpp"
#include "kvnn/experiments.hpp"
#include "kvnn/mk_volterra.hpp"
#include "kvnn/network.hpp"
#include "kvnn/rng.hpp"
#include "kvnn/selfcheck.hpp"
#include "kvnn/tensor_io.hpp"
#include "kvnn/volterra.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace kvnn {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;
constexpr int kRuntime = 3;

struct Options {
    bool json_errors = false;

    std::uint64_t seed = 1;
    std::size_t count = 16;
    std::size_t size = 32;
    double sigma = -1.0;
    std::string out;

    std::string config;
    std::size_t threads = 0;

    std::string model;
    std::string images;

    std::vector<std::string> topologies;
    std::size_t height = 256;
    std::size_t width = 256;
    bool json_output = false;

    std::size_t d = 3;
    unsigned r = 2;
    std::size_t points = 500;

    std::size_t n = 100;
    double noise = 0.1;
    double ridge = 1e-6;
};

std::string fixed(double v, int digits) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

std::string sci(double v) {
    std::ostringstream s;
    s << std::scientific << std::setprecision(3) << v;
    return s.str();
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("io", "cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw invalid_argument(path.string() + ": " + e.what());
    }
}

int cmd_gen_data(const Options& o, std::ostream& out) {
    const auto set = gen_synthetic_images(o.seed, o.count, o.size);
    const fs::path root(o.out);
    fs::create_directories(root / "clean");
    for (std::size_t i = 0; i < set.images.size(); ++i) {
        save_tensor(root / "clean" / (set.names[i] + ".kvt"), set.images[i]);
        write_pgm(root / "clean" / (set.names[i] + ".pgm"), set.images[i]);
    }
    json manifest{{"tool", "kvnn"}, {"version", version_string()}, {"task", "gen-data"},
                  {"seed", o.seed}, {"count", o.count}, {"size", o.size}};
    if (o.sigma >= 0.0) {
        NoiseSpec spec;
        spec.sigma = o.sigma;
        spec.seed = mix_seed(o.seed, 0x5eed);
        fs::create_directories(root / "noisy");
        for (std::size_t i = 0; i < set.images.size(); ++i) {
            const auto noisy = add_awgn(set.images[i], spec, i).noisy;
            save_tensor(root / "noisy" / (set.names[i] + ".kvt"), noisy);
            write_pgm(root / "noisy" / (set.names[i] + ".pgm"), noisy);
        }
        manifest["noise"] = spec.to_json();
    }
    write_json(root / "manifest.json", manifest);
    out << "wrote " << set.images.size() << " images of " << o.size << "x" << o.size << " to " << root.string()
        << "\n";
    return kOk;
}

int cmd_train(const Options& o, std::ostream& out) {
    const fs::path config_path(o.config);
    json j = read_json_file(config_path);
    const std::string task = j.value("task", std::string("denoise"));
    if (o.threads) {
        if (!j.contains("training")) j["training"] = json::object();
        j["training"]["threads"] = o.threads;
    }
    if (task == "classify") {
        const auto config = ClassifyConfig::from_json(j);
        const auto report = run_toy_classification(config, o.out);
        for (const auto& m : report.models)
            out << m.name << "  params " << m.params << "  train accuracy " << fixed(m.train_accuracy, 4)
                << "  test accuracy " << fixed(m.test_accuracy, 4) << "\n";
        out << "generating rule test accuracy " << fixed(report.bayes_test_accuracy, 4) << "\n";
        return kOk;
    }
    if (task != "denoise") throw invalid_argument("unknown task '" + task + "'");
    const auto config = DenoiseConfig::from_json(j, config_path.parent_path());
    const auto report = run_denoise_experiment(config, o.out);
    out << config.topology.name << "  params " << with_thousands(report.params) << "\n"
        << "noisy PSNR     " << fixed(report.eval.mean_noisy_psnr, 3) << " dB\n"
        << "denoised PSNR  " << fixed(report.eval.mean_denoised_psnr, 3) << " dB\n"
        << "gain           " << fixed(report.eval.mean_denoised_psnr - report.eval.mean_noisy_psnr, 3) << " dB\n";
    return kOk;
}

ImageSet load_image_dir(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".kvt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error("io", "no .kvt images in " + dir.string());
    ImageSet set;
    for (const auto& f : files) {
        set.images.push_back(load_tensor(f));
        set.names.push_back(f.stem().string());
    }
    return set;
}

int cmd_eval(const Options& o, std::ostream& out) {
    const Network net = load_network(o.model);
    const ImageSet set = o.images.empty() ? gen_synthetic_images(o.seed, o.count, o.size) : load_image_dir(o.images);
    NoiseSpec spec;
    spec.sigma = o.sigma >= 0.0 ? o.sigma : 25.0;
    spec.seed = mix_seed(o.seed, 0xe7a1);
    const fs::path root(o.out);
    const auto report = evaluate_denoiser(net, set, spec, root / "predictions",
                                          o.threads ? o.threads : thread_count_from_env());
    json per_image = json::array();
    for (std::size_t i = 0; i < report.names.size(); ++i)
        per_image.push_back({{"name", report.names[i]},
                             {"noisy_psnr", json_real(report.noisy_psnr[i])},
                             {"denoised_psnr", json_real(report.denoised_psnr[i])}});
    write_json(root / "eval.json", {{"tool", "kvnn"},
                                    {"version", version_string()},
                                    {"task", "eval"},
                                    {"model", o.model},
                                    {"images", o.images.empty() ? json("synthetic") : json(o.images)},
                                    {"seed", o.seed},
                                    {"noise", spec.to_json()},
                                    {"noisy_psnr", json_real(report.mean_noisy_psnr)},
                                    {"denoised_psnr", json_real(report.mean_denoised_psnr)},
                                    {"per_image", per_image}});
    out << "images         " << report.names.size() << "\n"
        << "noisy PSNR     " << fixed(report.mean_noisy_psnr, 3) << " dB\n"
        << "denoised PSNR  " << fixed(report.mean_denoised_psnr, 3) << " dB\n";
    return kOk;
}

int cmd_count(const Options& o, std::ostream& out) {
    json rows = json::array();
    std::ostringstream table;
    table << std::left << std::setw(20) << "model" << std::right << std::setw(16) << "Params (CNN)" << std::setw(16)
          << "Params (kVNN)" << std::setw(12) << "GFLOPs" << "\n";
    std::string convention;
    for (const auto& file : o.topologies) {
        const auto t = Topology::load(file);
        const bool is_kvnn = std::any_of(t.blocks.begin(), t.blocks.end(),
                                         [](const BlockSpec& b) { return b.type == BlockType::kvnn; });
        const auto params = count_params(t);
        const auto flops = count_flops(t, o.height, o.width);
        convention = flops.convention;
        const std::string name = t.name.empty() ? fs::path(file).stem().string() : t.name;
        table << std::left << std::setw(20) << name << std::right << std::setw(16)
              << (is_kvnn ? "-" : with_thousands(params)) << std::setw(16)
              << (is_kvnn ? with_thousands(params) : "-") << std::setw(12)
              << fixed(static_cast<double>(flops.total) / 1e9, 3) << "\n";
        rows.push_back({{"name", name},
                        {"kind", is_kvnn ? "kvnn" : "cnn"},
                        {"params", params},
                        {"flops", flops.total},
                        {"per_block_flops", flops.per_block}});
    }
    if (o.json_output) {
        out << json{{"height", o.height}, {"width", o.width}, {"flop_convention", convention}, {"models", rows}}.dump(2)
            << "\n";
    } else {
        out << table.str() << "input " << o.height << "x" << o.width << "; " << convention << "\n";
    }
    return kOk;
}

int cmd_fit_poly(const Options& o, std::ostream& out) {
    if (o.r < 1 || o.r > kOracleMaxOrder) throw invalid_argument("r must lie in 1.." + std::to_string(kOracleMaxOrder));
    const auto target = random_volterra(mix_seed(o.seed, 1), o.d, o.r, 1.0).tensors[o.r - 1];
    const auto fit = fit_exact(target, mix_seed(o.seed, 2));
    std::mt19937_64 rng(mix_seed(o.seed, 3));
    std::normal_distribution<double> normal(0.0, 1.0);
    double worst = 0.0;
    std::vector<double> x(o.d);
    for (std::size_t i = 0; i < o.points; ++i) {
        for (auto& v : x) v = normal(rng);
        worst = std::max(worst, relative_error(eval_branch(fit.branch, x), eval_volterra_term(target, x)));
    }
    constexpr double kTolerance = 1e-8;
    out << "d " << o.d << "  r " << o.r << "  seed " << o.seed << "\n"
        << "atoms                       " << fit.branch.size() << " (C(d+r-1, r) = " << binomial(o.d + o.r - 1, o.r)
        << ")\n"
        << "condition number            " << sci(fit.condition_number) << "\n"
        << "center draws                " << fit.attempts << "\n"
        << "max relative residual       " << sci(worst) << " over " << o.points << " points\n"
        << (worst <= kTolerance ? "PASS" : "FAIL") << " (tolerance " << sci(kTolerance) << ")\n";
    return worst <= kTolerance ? kOk : kCheckFailed;
}

int cmd_selfcheck(const Options& o, std::ostream& out) {
    const auto results = run_selfcheck(o.seed);
    bool all = true;
    for (const auto& r : results) {
        out << (r.pass ? "PASS " : "FAIL ") << std::left << std::setw(34) << r.name << std::right
            << " value " << sci(r.value) << "  tol " << sci(r.tolerance) << "  " << r.detail << "\n";
        all = all && r.pass;
    }
    if (!o.out.empty()) {
        fs::create_directories(o.out);
        write_json(fs::path(o.out) / "selfcheck.json", selfcheck_to_json(results, o.seed));
    }
    out << (all ? "selfcheck passed" : "selfcheck FAILED") << "\n";
    return all ? kOk : kCheckFailed;
}

int cmd_krr(const Options& o, std::ostream& out) {
    KrrContrastConfig c;
    c.seed = o.seed;
    c.d = o.d;
    c.train_samples = o.n;
    c.label_noise = o.noise;
    c.ridge = o.ridge;
    const auto r = run_krr_contrast(c);
    out << "stored KRR centers          " << r.krr_centers << " (one per training sample)\n"
        << "kVNN order-2 atoms          " << r.kvnn_atoms << " (bound C(d+1, 2) = " << r.atom_bound << ")\n"
        << "KRR test MSE                " << sci(r.krr_test_mse) << "\n"
        << "kVNN test MSE               " << sci(r.kvnn_test_mse) << "\n";
    return kOk;
}

void report_error(std::ostream& err, bool as_json, const std::string& code, const std::string& message) {
    if (as_json) err << json{{"error", {{"code", code}, {"message", message}}}}.dump() << "\n";
    else err << "error: " << message << "\n";
}

}  // namespace

std::string with_thousands(unsigned long long n) {
    std::string digits = std::to_string(n);
    std::string out;
    for (std::size_t i = 0; i < digits.size(); ++i) {
        if (i > 0 && (digits.size() - i) % 3 == 0) out.push_back(',');
        out.push_back(digits[i]);
    }
    return out;
}

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Options o;
    CLI::App app{"Kernelized Volterra network toolkit", "kvnn"};
    app.set_version_flag("--version", version_string());
    app.add_flag("--json-errors", o.json_errors, "Write failures as JSON error objects to stderr");
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "Generate synthetic grayscale images (KVT1 + PGM)");
    gen->add_option("--seed", o.seed);
    gen->add_option("--count", o.count)->check(CLI::PositiveNumber);
    gen->add_option("--size", o.size)->check(CLI::Range(16, 4096));
    gen->add_option("--sigma", o.sigma, "Also write AWGN copies at this 0-255 sigma");
    gen->add_option("--out", o.out)->required();

    auto* train_cmd = app.add_subcommand("train", "Run a denoising or classification experiment from a JSON config");
    train_cmd->add_option("--config", o.config)->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", o.out)->required();
    train_cmd->add_option("--threads", o.threads, "Worker threads (default: KVNN_THREADS or 1)");

    auto* eval = app.add_subcommand("eval", "Evaluate a saved denoiser");
    eval->add_option("--model", o.model)->required()->check(CLI::ExistingDirectory);
    eval->add_option("--images", o.images, "Directory of clean .kvt images (default: synthetic)");
    eval->add_option("--seed", o.seed);
    eval->add_option("--count", o.count)->check(CLI::PositiveNumber);
    eval->add_option("--size", o.size)->check(CLI::Range(16, 4096));
    eval->add_option("--sigma", o.sigma);
    eval->add_option("--threads", o.threads);
    eval->add_option("--out", o.out)->required();

    auto* count = app.add_subcommand("count", "Parameter and FLOP counts of topology files");
    count->add_option("--topology", o.topologies)->required()->check(CLI::ExistingFile);
    count->add_option("--height", o.height)->check(CLI::PositiveNumber);
    count->add_option("--width", o.width)->check(CLI::PositiveNumber);
    count->add_flag("--json", o.json_output);

    auto* fit = app.add_subcommand("fit-poly", "Fit a random symmetric tensor with C(d+r-1, r) atoms");
    fit->add_option("--d", o.d)->check(CLI::Range(1, 6));
    fit->add_option("--r", o.r)->check(CLI::Range(1, 3));
    fit->add_option("--seed", o.seed);
    fit->add_option("--points", o.points)->check(CLI::PositiveNumber);

    auto* self = app.add_subcommand("selfcheck", "Run the invariant suite");
    self->add_option("--seed", o.seed);
    self->add_option("--out", o.out, "Directory for selfcheck.json");

    auto* krr = app.add_subcommand("krr-baseline", "Kernel ridge regression vs kVNN atoms on a degree-2 target");
    krr->add_option("--d", o.d)->check(CLI::Range(1, 6));
    krr->add_option("--n", o.n)->check(CLI::PositiveNumber);
    krr->add_option("--seed", o.seed);
    krr->add_option("--noise", o.noise);
    krr->add_option("--ridge", o.ridge);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        const bool as_json = std::find(args.begin(), args.end(), "--json-errors") != args.end();
        report_error(err, as_json, "usage", e.what());
        if (!as_json) err << "run 'kvnn --help' for usage\n";
        return kUsage;
    }

    try {
        if (*gen) return cmd_gen_data(o, out);
        if (*train_cmd) return cmd_train(o, out);
        if (*eval) return cmd_eval(o, out);
        if (*count) return cmd_count(o, out);
        if (*fit) return cmd_fit_poly(o, out);
        if (*self) return cmd_selfcheck(o, out);
        if (*krr) return cmd_krr(o, out);
    } catch (const Error& e) {
        report_error(err, o.json_errors, e.code(), e.what());
        return kRuntime;
    } catch (const std::exception& e) {
        report_error(err, o.json_errors, "internal", e.what());
        return kRuntime;
    }
    return kUsage;
}

int cli_main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return cli_main(args, std::cout, std::cerr);
}

}  // namespace kvnn
