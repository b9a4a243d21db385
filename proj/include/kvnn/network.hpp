#pragma once

#include "kvnn/layer.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

namespace kvnn {

enum class BlockType { conv, kvnn };
enum class Activation { none, relu };

struct BlockSpec {
    BlockType type = BlockType::conv;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t pad = 1;
    // kVNN only.
    unsigned p = 2;
    std::size_t n = 1;
    std::size_t m = 0;
    bool bias = false;
    bool batchnorm = false;
    Activation activation = Activation::none;

    ConvGeometry geometry() const;
    FilterConfig filter_config() const;
    void validate() const;
};

/// Ordered block list. With `residual` set the network output is x - f(x),
/// the residual-learning form used by DnCNN-style denoisers.
struct Topology {
    std::string name;
    std::size_t input_channels = 1;
    bool residual = false;
    std::vector<BlockSpec> blocks;

    static Topology from_json(const nlohmann::json& j);
    static Topology load(const std::filesystem::path& path);
    nlohmann::json to_json() const;
};

/// Exact learnable scalars: conv weights and biases, kVNN atoms and biases,
/// and a (scale, shift) pair per channel for batch-norm blocks.
std::size_t count_params(const Topology& topology);
std::size_t count_params(const BlockSpec& block);

struct FlopReport {
    std::uint64_t total = 0;
    std::vector<std::uint64_t> per_block;
    std::size_t height = 0;
    std::size_t width = 0;
    std::string convention;
};

/// FLOPs for one forward pass at the given input resolution; the convention
/// is spelled out in FlopReport::convention.
FlopReport count_flops(const Topology& topology, std::size_t height, std::size_t width);

using AnyLayer = std::variant<ConvLayer, KvnnLayer>;

struct NetworkCache {
    std::vector<Tensor> inputs;         // input to each block
    std::vector<Tensor> pre_activation; // block output before the activation
    std::vector<LayerCache> layers;
};

class Network {
public:
    /// Fresh parameters: He-normal for conv blocks, init_mk for kVNN blocks.
    /// Batch-norm blocks are countable but not trainable and are rejected here.
    static Network build(const Topology& topology, std::uint64_t seed, const InitSpec& init = {});

    const Topology& topology() const noexcept { return topology_; }
    const std::vector<AnyLayer>& layers() const noexcept { return layers_; }

    Tensor forward(const Tensor& input, NetworkCache* cache = nullptr) const;
    /// Parameter gradient (flat, pack order) and input gradient of <upstream, forward(input)>.
    GradientBundle backward(const Tensor& input, const Tensor& upstream,
                            const NetworkCache* cache = nullptr) const;

    std::size_t param_count() const;
    std::vector<double> params() const;
    void set_params(std::span<const double> values);

    /// [begin, end) of each block's parameters in the flat vector.
    std::vector<std::pair<std::size_t, std::size_t>> param_ranges() const;

private:
    Topology topology_;
    std::vector<AnyLayer> layers_;
};

void save_network(const Network& net, const std::filesystem::path& dir);
Network load_network(const std::filesystem::path& dir);

}  // namespace kvnn
