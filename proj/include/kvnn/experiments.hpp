#pragma once

#include "kvnn/data.hpp"
#include "kvnn/network.hpp"
#include "kvnn/training.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace kvnn {

/// 64-bit FNV-1a of a string; config hashes use it on the compact JSON dump.
std::uint64_t fnv1a64(const std::string& text);
std::string hex64(std::uint64_t v);

/// JSON value for a real that may be infinite ("inf" / "-inf" strings).
nlohmann::json json_real(double v);

std::string version_string();

struct DataSpec {
    std::size_t train_images = 64;
    std::size_t test_images = 16;
    std::size_t image_size = 32;
    std::size_t patch_size = 32;
};

struct DenoiseConfig {
    std::string name;
    Topology topology;
    std::string topology_file;  // as written in the config, empty when inline
    std::uint64_t seed = 1;
    DataSpec data;
    NoiseSpec train_noise;      // seed is overridden by a stream of `seed`
    double eval_sigma = 25.0;
    InitSpec init;
    TrainConfig training;
    std::size_t checkpoint_every = 0;  // 0: only the final model

    void validate() const;
    /// Fully resolved form (topology inlined); what the manifest records and hashes.
    nlohmann::json to_json() const;
    /// Relative topology paths are resolved against `base_dir`.
    static DenoiseConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
    static DenoiseConfig load(const std::filesystem::path& path);
};

struct EvalReport {
    std::vector<std::string> names;
    std::vector<double> noisy_psnr;
    std::vector<double> denoised_psnr;
    double mean_noisy_psnr = 0.0;
    double mean_denoised_psnr = 0.0;
};

/// Denoises every image of `clean` after AWGN at eval_noise; PSNR is per image
/// with peak 1, averaged over images. With a non-empty `out_dir` the clean,
/// noisy and denoised tensors are written as <name>_{clean,noisy,denoised}.kvt
/// plus a PGM of the denoised image.
EvalReport evaluate_denoiser(const Network& net, const ImageSet& clean, const NoiseSpec& eval_noise,
                             const std::filesystem::path& out_dir = {}, std::size_t threads = 1);

/// Mean PSNR recomputed from the KVT files evaluate_denoiser wrote.
double recompute_psnr(const std::filesystem::path& prediction_dir, const std::vector<std::string>& names);

struct DenoiseReport {
    EvalReport eval;
    std::size_t params = 0;
    FlopReport flops;
    std::vector<StepRecord> history;
};

/// Trains config.topology on noisy/clean patch pairs from synthetic images and
/// evaluates on a held-out set at eval_sigma. With a non-empty out_dir writes
/// manifest.json, metrics.csv, model/, predictions/ and checkpoint/ (every
/// checkpoint_every steps). On divergence the last checkpoint is kept and the
/// error is rethrown.
DenoiseReport run_denoise_experiment(const DenoiseConfig& config, const std::filesystem::path& out_dir = {});

struct ClassifyConfig {
    std::uint64_t seed = 1;
    std::string problem = "xor";  // xor: sign((x.u)(x.v)); linear: sign(x.u)
    std::size_t kernel = 3;    // inputs are 1 x kernel x kernel
    std::size_t train_samples = 2000;
    std::size_t test_samples = 2000;
    std::size_t quadratic_atoms = 4;
    TrainConfig training;

    void validate() const;
    nlohmann::json to_json() const;
    static ClassifyConfig from_json(const nlohmann::json& j);
};

struct ClassificationData {
    std::vector<Sample> train;
    std::vector<Sample> test;
    Tensor u;
    Tensor v;
};

/// Gaussian inputs with labels from projections on two random orthonormal directions.
ClassificationData make_classification_data(const ClassifyConfig& config);

struct ModelAccuracy {
    std::string name;
    unsigned p = 1;
    std::size_t params = 0;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
};

struct ClassifyReport {
    std::vector<ModelAccuracy> models;  // p = 1 then p = 2, one kVNN block each
    double bayes_test_accuracy = 0.0;   // the generating rule applied to the test set
};

double accuracy(const Network& net, const std::vector<Sample>& data);
ClassifyReport run_toy_classification(const ClassifyConfig& config, const std::filesystem::path& out_dir = {});

struct KrrContrastConfig {
    std::uint64_t seed = 1;
    std::size_t d = 5;
    std::size_t train_samples = 100;
    std::size_t test_samples = 500;
    double label_noise = 0.1;
    double ridge = 1e-6;

    void validate() const;
    nlohmann::json to_json() const;
};

struct KrrContrastReport {
    std::size_t krr_centers = 0;
    std::size_t kvnn_atoms = 0;
    std::size_t atom_bound = 0;  // C(d + 1, 2)
    double krr_test_mse = 0.0;
    double kvnn_test_mse = 0.0;
};

/// Homogeneous degree-2 target, noisy training labels, clean test targets.
/// KRR with the (x . x')^2 kernel stores every training sample; the kVNN
/// order-2 branch is fitted by least squares with C(d + 1, 2) atoms.
KrrContrastReport run_krr_contrast(const KrrContrastConfig& config);

/// Writes `j` as pretty JSON followed by a newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace kvnn
