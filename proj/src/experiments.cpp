#include "kvnn/experiments.hpp"

#include "kvnn/error.hpp"
#include "kvnn/mk_volterra.hpp"
#include "kvnn/parallel.hpp"
#include "kvnn/poly_kernels.hpp"
#include "kvnn/rng.hpp"
#include "kvnn/tensor_io.hpp"
#include "kvnn/volterra.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <set>
#include <sstream>

namespace kvnn {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Independent seed streams derived from an experiment seed.
enum Stream : std::uint64_t {
    kTrainImages = 1,
    kTestImages = 2,
    kTrainNoise = 3,
    kEvalNoise = 4,
    kInit = 5,
    kBatches = 6,
    kDirections = 7,
    kSamples = 8,
};

void check_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw invalid_argument(where + " must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw invalid_argument("unknown " + where + " field '" + key + "'");
}

std::string fmt_real(double v) {
    std::ostringstream out;
    out << std::setprecision(17) << v;
    return out.str();
}

void write_metrics_header(std::ofstream& csv) { csv << "step,loss,psnr,lr\n"; }

void write_metrics_row(std::ofstream& csv, const StepRecord& r, bool with_psnr) {
    csv << r.step << ',' << fmt_real(r.loss) << ',' << (with_psnr ? fmt_real(psnr_from_mse(r.loss)) : "")
        << ',' << fmt_real(r.lr) << '\n';
}

json init_to_json(const InitSpec& init) {
    return {{"gain", init.gain}, {"order_gain", init.order_gain}};
}

json history_summary(const std::vector<StepRecord>& h) {
    if (h.empty()) return json{{"steps", 0}};
    return {{"steps", h.size()}, {"first_loss", h.front().loss}, {"final_loss", h.back().loss}};
}

Network classifier(unsigned p, std::size_t kernel, std::size_t quadratic_atoms, std::uint64_t seed) {
    json block{{"type", "kvnn"}, {"C_in", 1}, {"C_out", 1}, {"kernel", kernel}, {"pad", 0}, {"p", p},
               {"n", p >= 2 ? quadratic_atoms : 0}};
    return Network::build(Topology::from_json(json{{"name", "classifier_p" + std::to_string(p)},
                                                   {"input_channels", 1},
                                                   {"blocks", {block}}}),
                          seed);
}

}  // namespace

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << v;
    return out.str();
}

json json_real(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

std::string version_string() { return KVNN_VERSION; }

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw Error("io", "cannot write " + path.string());
    out << j.dump(2) << '\n';
}

void DenoiseConfig::validate() const {
    if (data.image_size < 16) throw invalid_argument("image_size must be >= 16");
    if (data.patch_size == 0 || data.patch_size > data.image_size)
        throw invalid_argument("patch_size must lie in [1, image_size]");
    if (data.train_images == 0 || data.test_images == 0) throw invalid_argument("image counts must be positive");
    if (!(eval_sigma >= 0.0)) throw invalid_argument("eval_sigma must be >= 0");
    train_noise.validate();
    training.validate();
}

json DenoiseConfig::to_json() const {
    auto noise = train_noise.to_json();
    noise.erase("seed");
    return {{"name", name},
            {"topology", topology.to_json()},
            {"topology_file", topology_file},
            {"seed", seed},
            {"data",
             {{"train_images", data.train_images},
              {"test_images", data.test_images},
              {"image_size", data.image_size},
              {"patch_size", data.patch_size}}},
            {"noise", noise},
            {"eval_sigma", eval_sigma},
            {"init", init_to_json(init)},
            {"training", training.to_json()},
            {"checkpoint_every", checkpoint_every}};
}

DenoiseConfig DenoiseConfig::from_json(const json& j, const fs::path& base_dir) {
    check_keys(j, {"name", "task", "topology", "topology_file", "seed", "data", "noise", "eval_sigma", "init",
                   "training", "checkpoint_every"},
               "denoise config");
    if (j.value("task", std::string("denoise")) != "denoise") throw invalid_argument("task must be denoise");
    DenoiseConfig c;
    c.name = j.value("name", std::string{});
    const auto& t = j.at("topology");
    if (t.is_string()) {
        c.topology_file = t.get<std::string>();
        const fs::path p = fs::path(c.topology_file).is_absolute() ? fs::path(c.topology_file) : base_dir / c.topology_file;
        c.topology = Topology::load(p);
    } else {
        c.topology = Topology::from_json(t);
        c.topology_file = j.value("topology_file", std::string{});
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d, {"train_images", "test_images", "image_size", "patch_size"}, "data");
        c.data.train_images = d.value("train_images", c.data.train_images);
        c.data.test_images = d.value("test_images", c.data.test_images);
        c.data.image_size = d.value("image_size", c.data.image_size);
        c.data.patch_size = d.value("patch_size", c.data.patch_size);
    }
    if (j.contains("noise")) {
        auto n = j.at("noise");
        n.erase("scale");
        n.erase("clamped");
        c.train_noise = NoiseSpec::from_json(n);
    }
    c.eval_sigma = j.value("eval_sigma", c.train_noise.mode == NoiseMode::fixed ? c.train_noise.sigma : 25.0);
    if (j.contains("init")) {
        const auto& i = j.at("init");
        check_keys(i, {"gain", "order_gain"}, "init");
        c.init.gain = i.value("gain", 1.0);
        c.init.order_gain = i.value("order_gain", std::vector<double>{});
    }
    if (j.contains("training")) c.training = TrainConfig::from_json(j.at("training"));
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

DenoiseConfig DenoiseConfig::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("io", "cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw invalid_argument(path.string() + ": " + e.what());
    }
    return from_json(j, path.parent_path());
}

EvalReport evaluate_denoiser(const Network& net, const ImageSet& clean, const NoiseSpec& eval_noise,
                             const fs::path& out_dir, std::size_t threads) {
    const std::size_t n = clean.images.size();
    if (n == 0) throw invalid_argument("evaluation set is empty");
    if (!out_dir.empty()) fs::create_directories(out_dir);
    EvalReport report;
    report.names = clean.names;
    report.noisy_psnr.resize(n);
    report.denoised_psnr.resize(n);
    parallel_for(n, threads, [&](std::size_t i) {
        const Tensor noisy = add_awgn(clean.images[i], eval_noise, i).noisy;
        const Tensor denoised = net.forward(noisy);
        report.noisy_psnr[i] = psnr(noisy, clean.images[i]);
        report.denoised_psnr[i] = psnr(denoised, clean.images[i]);
        if (!out_dir.empty()) {
            const auto& name = clean.names[i];
            save_tensor(out_dir / (name + "_clean.kvt"), clean.images[i]);
            save_tensor(out_dir / (name + "_noisy.kvt"), noisy);
            save_tensor(out_dir / (name + "_denoised.kvt"), denoised);
            write_pgm(out_dir / (name + "_denoised.pgm"), denoised);
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        report.mean_noisy_psnr += report.noisy_psnr[i];
        report.mean_denoised_psnr += report.denoised_psnr[i];
    }
    report.mean_noisy_psnr /= static_cast<double>(n);
    report.mean_denoised_psnr /= static_cast<double>(n);
    return report;
}

double recompute_psnr(const fs::path& dir, const std::vector<std::string>& names) {
    if (names.empty()) throw invalid_argument("no predictions named");
    double total = 0.0;
    for (const auto& name : names)
        total += psnr(load_tensor(dir / (name + "_denoised.kvt")), load_tensor(dir / (name + "_clean.kvt")));
    return total / static_cast<double>(names.size());
}

DenoiseReport run_denoise_experiment(const DenoiseConfig& config, const fs::path& out_dir) {
    config.validate();
    const std::size_t threads = config.training.threads ? config.training.threads : thread_count_from_env();
    const auto& d = config.data;
    const ImageSet train_set = gen_synthetic_images(mix_seed(config.seed, kTrainImages), d.train_images, d.image_size);
    const ImageSet test_set = gen_synthetic_images(mix_seed(config.seed, kTestImages), d.test_images, d.image_size);
    NoiseSpec train_noise = config.train_noise;
    train_noise.seed = mix_seed(config.seed, kTrainNoise);
    NoiseSpec eval_noise;
    eval_noise.sigma = config.eval_sigma;
    eval_noise.seed = mix_seed(config.seed, kEvalNoise);

    Network net = Network::build(config.topology, mix_seed(config.seed, kInit), config.init);
    const std::size_t batch = config.training.batch_size;
    const std::uint64_t batch_seed = mix_seed(config.seed, kBatches);
    auto batches = [&](std::size_t step) {
        std::mt19937_64 rng(mix_seed(batch_seed, step));
        std::uniform_int_distribution<std::size_t> pick(0, train_set.images.size() - 1);
        std::uniform_int_distribution<std::size_t> offset(0, d.image_size - d.patch_size);
        std::vector<Sample> out;
        out.reserve(batch);
        for (std::size_t i = 0; i < batch; ++i) {
            const Tensor& img = train_set.images[pick(rng)];
            const std::size_t oy = offset(rng), ox = offset(rng);
            const bool flip = rng() & 1u;
            Tensor patch({1, d.patch_size, d.patch_size});
            for (std::size_t y = 0; y < d.patch_size; ++y)
                for (std::size_t x = 0; x < d.patch_size; ++x)
                    patch.at({0, y, x}) = img.at({0, oy + y, ox + (flip ? d.patch_size - 1 - x : x)});
            Tensor noisy = add_awgn(patch, train_noise, step * batch + i).noisy;
            out.push_back(Sample{std::move(noisy), std::move(patch)});
        }
        return out;
    };

    const bool write = !out_dir.empty();
    std::ofstream csv;
    if (write) {
        fs::create_directories(out_dir);
        csv.open(out_dir / "metrics.csv");
        if (!csv) throw Error("io", "cannot write metrics.csv in " + out_dir.string());
        write_metrics_header(csv);
        if (config.checkpoint_every) save_network(net, out_dir / "checkpoint");
    }
    auto on_step = [&](const StepRecord& r, const Network& current) {
        if (!write) return;
        write_metrics_row(csv, r, true);
        if (config.checkpoint_every && (r.step + 1) % config.checkpoint_every == 0)
            save_network(current, out_dir / "checkpoint");
    };

    json manifest{{"tool", "kvnn"},
                  {"version", version_string()},
                  {"task", "denoise"},
                  {"config", config.to_json()},
                  {"config_hash", hex64(fnv1a64(config.to_json().dump()))},
                  {"seeds",
                   {{"experiment", config.seed},
                    {"train_images", mix_seed(config.seed, kTrainImages)},
                    {"test_images", mix_seed(config.seed, kTestImages)},
                    {"train_noise", train_noise.seed},
                    {"eval_noise", eval_noise.seed},
                    {"init", mix_seed(config.seed, kInit)},
                    {"batches", batch_seed}}},
                  {"noise_convention", "sigma on 0-255 scale, applied as sigma/255 to [0,1] data; noisy inputs not clamped"}};

    DenoiseReport report;
    try {
        report.history = train(net, config.training, batches, mse_loss, on_step);
    } catch (const Error& e) {
        if (write) {
            csv.flush();
            manifest["status"] = "failed";
            manifest["error"] = {{"code", e.code()}, {"message", e.what()}};
            write_json(out_dir / "manifest.json", manifest);
        }
        throw;
    }

    report.params = net.param_count();
    report.flops = count_flops(config.topology, d.image_size, d.image_size);
    report.eval = evaluate_denoiser(net, test_set, eval_noise, write ? out_dir / "predictions" : fs::path{}, threads);
    if (write) {
        csv.close();
        save_network(net, out_dir / "model");
        json per_image = json::array();
        for (std::size_t i = 0; i < report.eval.names.size(); ++i)
            per_image.push_back({{"name", report.eval.names[i]},
                                 {"noisy_psnr", json_real(report.eval.noisy_psnr[i])},
                                 {"denoised_psnr", json_real(report.eval.denoised_psnr[i])}});
        manifest["status"] = "ok";
        manifest["results"] = {{"eval_sigma", config.eval_sigma},
                               {"noisy_psnr", json_real(report.eval.mean_noisy_psnr)},
                               {"denoised_psnr", json_real(report.eval.mean_denoised_psnr)},
                               {"gain_db", json_real(report.eval.mean_denoised_psnr - report.eval.mean_noisy_psnr)},
                               {"per_image", per_image},
                               {"training", history_summary(report.history)}};
        manifest["params"] = report.params;
        manifest["flops"] = {{"total", report.flops.total},
                             {"height", report.flops.height},
                             {"width", report.flops.width},
                             {"convention", report.flops.convention}};
        write_json(out_dir / "manifest.json", manifest);
    }
    return report;
}

void ClassifyConfig::validate() const {
    if (problem != "xor" && problem != "linear") throw invalid_argument("classification problem must be xor or linear");
    if (kernel == 0 || kernel * kernel < 2) throw invalid_argument("classification inputs need at least 2 pixels");
    if (train_samples == 0 || test_samples == 0) throw invalid_argument("sample counts must be positive");
    if (quadratic_atoms == 0) throw invalid_argument("quadratic_atoms must be positive");
    training.validate();
}

json ClassifyConfig::to_json() const {
    return {{"problem", problem},
            {"seed", seed},
            {"kernel", kernel},
            {"train_samples", train_samples},
            {"test_samples", test_samples},
            {"quadratic_atoms", quadratic_atoms},
            {"training", training.to_json()}};
}

ClassifyConfig ClassifyConfig::from_json(const json& j) {
    check_keys(j, {"name", "task", "problem", "seed", "kernel", "train_samples", "test_samples", "quadratic_atoms", "training"},
               "classification config");
    ClassifyConfig c;
    if (j.value("task", std::string("classify")) != "classify") throw invalid_argument("task must be classify");
    c.problem = j.value("problem", c.problem);
    c.seed = j.value("seed", c.seed);
    c.kernel = j.value("kernel", c.kernel);
    c.train_samples = j.value("train_samples", c.train_samples);
    c.test_samples = j.value("test_samples", c.test_samples);
    c.quadratic_atoms = j.value("quadratic_atoms", c.quadratic_atoms);
    if (j.contains("training")) c.training = TrainConfig::from_json(j.at("training"));
    c.validate();
    return c;
}

ClassificationData make_classification_data(const ClassifyConfig& config) {
    config.validate();
    const std::size_t k = config.kernel;
    const std::size_t dim = k * k;
    std::mt19937_64 dir_rng(mix_seed(config.seed, kDirections));
    std::normal_distribution<double> normal(0.0, 1.0);
    ClassificationData data{{}, {}, Tensor({1, k, k}), Tensor({1, k, k})};
    // Gram-Schmidt on two Gaussian draws.
    for (auto& v : data.u.data()) v = normal(dir_rng);
    for (auto& v : data.v.data()) v = normal(dir_rng);
    const double nu = std::sqrt(dot(data.u.data(), data.u.data()));
    for (auto& v : data.u.data()) v /= nu;
    const double proj = dot(data.u.data(), data.v.data());
    for (std::size_t i = 0; i < dim; ++i) data.v[i] -= proj * data.u[i];
    const double nv = std::sqrt(dot(data.v.data(), data.v.data()));
    for (auto& v : data.v.data()) v /= nv;

    std::mt19937_64 rng(mix_seed(config.seed, kSamples));
    auto draw = [&](std::size_t count) {
        std::vector<Sample> out;
        for (std::size_t s = 0; s < count; ++s) {
            Tensor x({1, k, k});
            for (auto& v : x.data()) v = normal(rng);
            const double a = dot(x.data(), data.u.data());
            const double b = dot(x.data(), data.v.data());
            const double score = config.problem == "xor" ? a * b : a;
            out.push_back(Sample{std::move(x), Tensor({1, 1, 1}, score >= 0.0 ? 1.0 : -1.0)});
        }
        return out;
    };
    data.train = draw(config.train_samples);
    data.test = draw(config.test_samples);
    return data;
}

double accuracy(const Network& net, const std::vector<Sample>& data) {
    if (data.empty()) throw invalid_argument("accuracy of an empty set");
    std::size_t correct = 0;
    for (const auto& s : data) {
        const double f = net.forward(s.input)[0];
        if ((f >= 0.0 ? 1.0 : -1.0) == s.target[0]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

ClassifyReport run_toy_classification(const ClassifyConfig& config, const fs::path& out_dir) {
    const auto data = make_classification_data(config);
    const std::size_t batch = config.training.batch_size;
    auto batches = [&](std::size_t step) {
        std::mt19937_64 rng(mix_seed(mix_seed(config.seed, kBatches), step));
        std::uniform_int_distribution<std::size_t> pick(0, data.train.size() - 1);
        std::vector<Sample> out;
        for (std::size_t i = 0; i < batch; ++i) out.push_back(data.train[pick(rng)]);
        return out;
    };
    const bool write = !out_dir.empty();
    if (write) fs::create_directories(out_dir);

    ClassifyReport report;
    std::size_t correct = 0;
    for (const auto& s : data.test) {
        const double a = dot(s.input.data(), data.u.data()), b = dot(s.input.data(), data.v.data());
        const double score = config.problem == "xor" ? a * b : a;
        if ((score >= 0.0 ? 1.0 : -1.0) == s.target[0]) ++correct;
    }
    report.bayes_test_accuracy = static_cast<double>(correct) / static_cast<double>(data.test.size());

    json models = json::array();
    for (unsigned p : {1u, 2u}) {
        Network net = classifier(p, config.kernel, config.quadratic_atoms, mix_seed(config.seed, kInit + p));
        std::ofstream csv;
        if (write) {
            csv.open(out_dir / ("metrics_p" + std::to_string(p) + ".csv"));
            write_metrics_header(csv);
        }
        train(net, config.training, batches, logistic_loss, [&](const StepRecord& r, const Network&) {
            if (write) write_metrics_row(csv, r, false);
        });
        ModelAccuracy m{"kvnn_p" + std::to_string(p), p, net.param_count(), accuracy(net, data.train),
                        accuracy(net, data.test)};
        if (write) save_network(net, out_dir / ("model_p" + std::to_string(p)));
        models.push_back({{"name", m.name},
                          {"p", m.p},
                          {"params", m.params},
                          {"train_accuracy", m.train_accuracy},
                          {"test_accuracy", m.test_accuracy}});
        report.models.push_back(m);
    }
    if (write) {
        json manifest{{"tool", "kvnn"},
                      {"version", version_string()},
                      {"task", "classify"},
                      {"config", config.to_json()},
                      {"config_hash", hex64(fnv1a64(config.to_json().dump()))},
                      {"seeds",
                       {{"experiment", config.seed},
                        {"directions", mix_seed(config.seed, kDirections)},
                        {"samples", mix_seed(config.seed, kSamples)},
                        {"batches", mix_seed(config.seed, kBatches)}}},
                      {"status", "ok"},
                      {"results", {{"models", models}, {"bayes_test_accuracy", report.bayes_test_accuracy}}}};
        write_json(out_dir / "manifest.json", manifest);
    }
    return report;
}

void KrrContrastConfig::validate() const {
    if (d < 1 || d > kFitMaxDim) throw invalid_argument("krr contrast needs 1 <= d <= " + std::to_string(kFitMaxDim));
    if (train_samples == 0 || test_samples == 0) throw invalid_argument("sample counts must be positive");
    if (!(label_noise >= 0.0) || !(ridge >= 0.0)) throw invalid_argument("noise and ridge must be >= 0");
}

json KrrContrastConfig::to_json() const {
    return {{"seed", seed},
            {"d", d},
            {"train_samples", train_samples},
            {"test_samples", test_samples},
            {"label_noise", label_noise},
            {"ridge", ridge}};
}

KrrContrastReport run_krr_contrast(const KrrContrastConfig& config) {
    config.validate();
    VolterraCoefficients target = random_volterra(mix_seed(config.seed, 1), config.d, 2, 1.0);
    for (auto& v : target.tensors[0].data()) v = 0.0;

    std::mt19937_64 rng(mix_seed(config.seed, 2));
    std::normal_distribution<double> normal(0.0, 1.0);
    auto draw = [&](std::size_t count, double noise, std::vector<Tensor>& xs, std::vector<double>& ys) {
        for (std::size_t i = 0; i < count; ++i) {
            Tensor x({config.d});
            for (auto& v : x.data()) v = normal(rng);
            ys.push_back(eval_volterra(target, x.data()) + noise * normal(rng));
            xs.push_back(std::move(x));
        }
    };
    std::vector<Tensor> train_x, test_x;
    std::vector<double> train_y, test_y;
    draw(config.train_samples, config.label_noise, train_x, train_y);
    draw(config.test_samples, 0.0, test_x, test_y);

    const KrrModel krr = krr_fit(train_x, train_y, KernelSpec::polynomial(2), config.ridge);
    KrrContrastReport report;
    report.atom_bound = static_cast<std::size_t>(binomial(config.d + 1, 2));
    const OrderBranch branch = fit_branch_to_samples(train_x, train_y, 2, report.atom_bound, mix_seed(config.seed, 3));
    report.krr_centers = krr.stored_centers();
    report.kvnn_atoms = branch.size();
    for (std::size_t i = 0; i < test_x.size(); ++i) {
        const double ek = krr_predict(krr, test_x[i].data()) - test_y[i];
        const double ev = eval_branch(branch, test_x[i].data()) - test_y[i];
        report.krr_test_mse += ek * ek;
        report.kvnn_test_mse += ev * ev;
    }
    report.krr_test_mse /= static_cast<double>(test_x.size());
    report.kvnn_test_mse /= static_cast<double>(test_x.size());
    return report;
}

}  // namespace kvnn
