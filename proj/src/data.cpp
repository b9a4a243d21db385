#include "kvnn/data.hpp"

#include "kvnn/error.hpp"
#include "kvnn/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace kvnn {

namespace {

Tensor synthetic_image(std::uint64_t seed, std::size_t size) {
    std::mt19937_64 rng(seed);
    auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    const double s = static_cast<double>(size);
    Tensor img({1, size, size});

    // Ramp.
    const double base = uniform(0.25, 0.6);
    const double slope = uniform(-0.3, 0.3);
    const double ramp_angle = uniform(0.0, 2.0 * std::numbers::pi);
    // Step edge through a random point.
    const double ex = uniform(0.2, 0.8) * s, ey = uniform(0.2, 0.8) * s;
    const double edge_angle = uniform(0.0, 2.0 * std::numbers::pi);
    const double step = uniform(-0.3, 0.3);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double fx = static_cast<double>(x), fy = static_cast<double>(y);
            double v = base + slope * (std::cos(ramp_angle) * fx + std::sin(ramp_angle) * fy) / s;
            if (std::cos(edge_angle) * (fx - ex) + std::sin(edge_angle) * (fy - ey) > 0.0) v += step;
            img.at({0, y, x}) = v;
        }

    const int rects = std::uniform_int_distribution<int>(1, 3)(rng);
    for (int r = 0; r < rects; ++r) {
        const auto w = static_cast<std::size_t>(uniform(s / 8.0, s / 2.0));
        const auto h = static_cast<std::size_t>(uniform(s / 8.0, s / 2.0));
        const auto x0 = static_cast<std::size_t>(uniform(0.0, s - static_cast<double>(w)));
        const auto y0 = static_cast<std::size_t>(uniform(0.0, s - static_cast<double>(h)));
        const double value = uniform(0.0, 1.0);
        for (std::size_t y = y0; y < std::min(size, y0 + h); ++y)
            for (std::size_t x = x0; x < std::min(size, x0 + w); ++x) img.at({0, y, x}) = value;
    }

    const double cx = uniform(0.0, s), cy = uniform(0.0, s);
    const double radius = uniform(s / 6.0, s / 3.0);
    const double amp = uniform(0.05, 0.2);
    const double freq = uniform(2.0, 6.0);
    const double orient = uniform(0.0, std::numbers::pi);
    const double phase = uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double fx = static_cast<double>(x), fy = static_cast<double>(y);
            if ((fx - cx) * (fx - cx) + (fy - cy) * (fy - cy) > radius * radius) continue;
            const double t = (std::cos(orient) * fx + std::sin(orient) * fy) / s;
            img.at({0, y, x}) += amp * std::sin(2.0 * std::numbers::pi * freq * t + phase);
        }

    for (auto& v : img.data()) v = std::clamp(v, 0.0, 1.0);
    return img;
}

}  // namespace

ImageSet gen_synthetic_images(std::uint64_t seed, std::size_t count, std::size_t size) {
    if (size < 16) throw invalid_argument("synthetic image size must be >= 16");
    ImageSet set;
    for (std::size_t i = 0; i < count; ++i) {
        set.images.push_back(synthetic_image(mix_seed(seed, i), size));
        std::ostringstream name;
        name << "img" << std::setw(4) << std::setfill('0') << i;
        set.names.push_back(name.str());
    }
    return set;
}

void NoiseSpec::validate() const {
    if (mode == NoiseMode::fixed) {
        if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw invalid_argument("noise sigma must be >= 0");
    } else if (!(lo >= 0.0 && lo < hi) || !std::isfinite(hi)) {
        throw invalid_argument("noise range needs 0 <= lo < hi");
    }
}

nlohmann::json NoiseSpec::to_json() const {
    nlohmann::json j{{"seed", seed}, {"scale", "sigma/255 on [0,1] data"}, {"clamped", false}};
    if (mode == NoiseMode::fixed) {
        j["mode"] = "fixed";
        j["sigma"] = sigma;
    } else {
        j["mode"] = "range";
        j["lo"] = lo;
        j["hi"] = hi;
    }
    return j;
}

NoiseSpec NoiseSpec::from_json(const nlohmann::json& j) {
    NoiseSpec s;
    const auto mode = j.value("mode", std::string("fixed"));
    if (mode == "fixed") s.mode = NoiseMode::fixed;
    else if (mode == "range") s.mode = NoiseMode::range;
    else throw invalid_argument("noise mode must be fixed or range");
    s.sigma = j.value("sigma", s.sigma);
    s.lo = j.value("lo", s.lo);
    s.hi = j.value("hi", s.hi);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
}

NoisyItem add_awgn(const Tensor& clean, const NoiseSpec& spec, std::uint64_t index) {
    spec.validate();
    std::mt19937_64 rng(mix_seed(spec.seed, index));
    NoisyItem out{clean, spec.sigma};
    if (spec.mode == NoiseMode::range) out.sigma = std::uniform_real_distribution<double>(spec.lo, spec.hi)(rng);
    if (out.sigma == 0.0) return out;
    std::normal_distribution<double> normal(0.0, out.sigma / 255.0);
    for (auto& v : out.noisy.data()) v += normal(rng);
    return out;
}

std::vector<NoisyItem> add_awgn(const std::vector<Tensor>& clean, const NoiseSpec& spec) {
    std::vector<NoisyItem> out;
    out.reserve(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) out.push_back(add_awgn(clean[i], spec, i));
    return out;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 1) throw dimension_error("PGM output needs a 1 x H x W tensor");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("io", "cannot write " + path.string());
    out << "P5\n" << image.dim(2) << ' ' << image.dim(1) << "\n255\n";
    for (double v : image.data()) {
        const auto byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        out.put(static_cast<char>(byte));
    }
    if (!out) throw Error("io", "failed writing " + path.string());
}

Tensor read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io", "cannot open " + path.string());
    auto next_token = [&]() {
        std::string token;
        char c = 0;
        while (in.get(c)) {
            if (c == '#') {
                std::string skip;
                std::getline(in, skip);
            } else if (!std::isspace(static_cast<unsigned char>(c))) {
                token.push_back(c);
                break;
            }
        }
        while (in.get(c) && !std::isspace(static_cast<unsigned char>(c))) token.push_back(c);
        return token;
    };
    if (next_token() != "P5") throw Error("io", path.string() + " is not a binary PGM");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(next_token());
        h = std::stoul(next_token());
        maxval = std::stoul(next_token());
    } catch (const std::exception&) {
        throw Error("io", path.string() + ": malformed PGM header");
    }
    if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw Error("io", path.string() + ": unsupported PGM header");
    Tensor img({1, h, w});
    for (auto& v : img.data()) {
        char c = 0;
        if (!in.get(c)) throw Error("io", path.string() + ": truncated PGM data");
        v = static_cast<double>(static_cast<unsigned char>(c)) / static_cast<double>(maxval);
    }
    return img;
}

}  // namespace kvnn
