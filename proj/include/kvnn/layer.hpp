#pragma once

#include "kvnn/mk_volterra.hpp"
#include "kvnn/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace kvnn {

/// 2-D sliding-window geometry over a C_in x H x W input with zero padding.
struct ConvGeometry {
    std::size_t in_channels = 1;
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t stride = 1;
    std::size_t pad = 0;

    std::size_t patch_dim() const noexcept { return in_channels * kernel_h * kernel_w; }
    std::size_t out_h(std::size_t h) const;
    std::size_t out_w(std::size_t w) const;
    void validate() const;
};

/// im2col: one row per output location (row-major over the output grid),
/// columns ordered (channel, ky, kx). Result shape [H_out*W_out, patch_dim].
Tensor extract_patches(const Tensor& input, const ConvGeometry& g);

/// Adjoint of extract_patches: scatter-adds patch rows back into a
/// C_in x H x W gradient.
Tensor accumulate_patches(const Tensor& patch_grads, const ConvGeometry& g, std::size_t height,
                          std::size_t width);

struct FilterConfig {
    unsigned p = 2;
    std::size_t n = 1;  // quadratic atoms
    std::size_t m = 0;  // cubic atoms
    bool include_bias = false;

    void validate() const;
    std::vector<std::size_t> atom_counts() const;  // (1, n, m) truncated to p
    std::size_t atoms() const;
};

/// One output channel: a linear atom plus n quadratic and m cubic atoms over a
/// flattened patch.
struct KvnnFilter {
    MKVolterraMap map;
    FilterConfig config;
    double bias = 0.0;

    static KvnnFilter random(std::uint64_t seed, std::size_t patch_dim, const FilterConfig& config,
                             const InitSpec& init = {});
    void validate() const;
    /// (1 + n + m)(d + 1) + bias flag.
    std::size_t param_count() const;
};

double filter_forward(const KvnnFilter& filter, std::span<const double> patch);

/// Gradients with the same flat layout as the layer's pack_params(), plus the
/// gradient with respect to the layer input.
struct GradientBundle {
    std::vector<double> params;
    Tensor input;
};

/// Intermediates a forward pass can leave behind for the matching backward.
struct LayerCache {
    Tensor patches;                   // [L, d]
    std::vector<double> projections;  // [L, J] patch . center for every atom
    std::size_t height = 0;
    std::size_t width = 0;
};

class KvnnLayer {
public:
    KvnnLayer(ConvGeometry geometry, std::vector<KvnnFilter> filters);

    static KvnnLayer random(const ConvGeometry& geometry, std::size_t out_channels,
                            const FilterConfig& config, std::uint64_t seed,
                            const InitSpec& init = {});

    const ConvGeometry& geometry() const noexcept { return geometry_; }
    std::size_t out_channels() const noexcept { return filters_.size(); }
    const std::vector<KvnnFilter>& filters() const noexcept { return filters_; }

    Tensor forward(const Tensor& input, LayerCache* cache = nullptr) const;
    GradientBundle backward(const Tensor& input, const Tensor& upstream,
                            const LayerCache* cache = nullptr) const;

    // Per filter: for r = 1..p, for each atom: center (d values) then gamma;
    // then the bias when enabled.
    std::size_t param_count() const;
    void pack_params(std::span<double> out) const;
    void unpack_params(std::span<const double> in);

private:
    void rebuild_atom_table();

    ConvGeometry geometry_;
    std::vector<KvnnFilter> filters_;
    // Flattened view of all atoms, rebuilt whenever parameters change.
    std::vector<double> centers_t_;  // [d, J]
    std::vector<double> gammas_;     // [J]
    std::vector<unsigned> orders_;   // [J]
    std::size_t atoms_per_filter_ = 0;
};

Tensor layer_forward(const KvnnLayer& layer, const Tensor& input);
GradientBundle layer_backward(const KvnnLayer& layer, const Tensor& input, const Tensor& upstream);

/// Plain cross-correlation layer: out[c] = W[c] . patch + b[c].
class ConvLayer {
public:
    ConvLayer(ConvGeometry geometry, Tensor weight, std::vector<double> bias = {});

    static ConvLayer random(const ConvGeometry& geometry, std::size_t out_channels, bool bias,
                            std::uint64_t seed);

    const ConvGeometry& geometry() const noexcept { return geometry_; }
    std::size_t out_channels() const noexcept { return weight_.dim(0); }
    const Tensor& weight() const noexcept { return weight_; }  // [C_out, d]
    const std::vector<double>& bias() const noexcept { return bias_; }
    bool has_bias() const noexcept { return !bias_.empty(); }

    Tensor forward(const Tensor& input, LayerCache* cache = nullptr) const;
    GradientBundle backward(const Tensor& input, const Tensor& upstream,
                            const LayerCache* cache = nullptr) const;

    // Weight rows, then bias.
    std::size_t param_count() const;
    void pack_params(std::span<double> out) const;
    void unpack_params(std::span<const double> in);

private:
    ConvGeometry geometry_;
    Tensor weight_;
    std::vector<double> bias_;
};

}  // namespace kvnn
