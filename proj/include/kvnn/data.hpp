#pragma once

#include "kvnn/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace kvnn {

/// Single-channel images, each 1 x H x W with values in [0, 1].
struct ImageSet {
    std::vector<Tensor> images;
    std::vector<std::string> names;
};

/// Reproducible synthetic grayscale scenes: a linear intensity ramp, a
/// half-plane step edge, one to three opaque rectangles and a sinusoidal
/// texture disk, clamped to [0, 1]. Image i depends only on (seed, i, size).
///
/// Over 100 images of size 32 the average per-image mean lies in
/// [0.35, 0.55] and the average per-image standard deviation in [0.10, 0.20].
ImageSet gen_synthetic_images(std::uint64_t seed, std::size_t count, std::size_t size);

enum class NoiseMode { fixed, range };

/// Sigma is on the 0-255 intensity scale; noise applied to [0, 1] data has
/// standard deviation sigma / 255.
struct NoiseSpec {
    NoiseMode mode = NoiseMode::fixed;
    double sigma = 25.0;  // fixed mode
    double lo = 0.0;      // range mode: sigma ~ U(lo, hi) per patch
    double hi = 50.0;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static NoiseSpec from_json(const nlohmann::json& j);
};

struct NoisyItem {
    Tensor noisy;
    double sigma = 0.0;  // 0-255 scale
};

/// y = x + N(0, (sigma/255)^2) element-wise, no clamping. `index` selects an
/// independent noise stream so items can be noised in any order.
NoisyItem add_awgn(const Tensor& clean, const NoiseSpec& spec, std::uint64_t index);
std::vector<NoisyItem> add_awgn(const std::vector<Tensor>& clean, const NoiseSpec& spec);

/// 8-bit binary PGM (P5, maxval 255); values are clamped to [0, 1] and rounded.
void write_pgm(const std::filesystem::path& path, const Tensor& image);
/// Returns a 1 x H x W tensor with values v / maxval.
Tensor read_pgm(const std::filesystem::path& path);

}  // namespace kvnn
