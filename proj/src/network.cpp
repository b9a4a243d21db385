#include "kvnn/network.hpp"

#include "kvnn/error.hpp"
#include "kvnn/rng.hpp"
#include "kvnn/tensor_io.hpp"

#include <fstream>
#include <set>

namespace kvnn {

namespace {

using nlohmann::json;

template <class T>
T get_or(const json& j, const char* key, T fallback) {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
}

BlockSpec parse_block(const json& j) {
    static const std::set<std::string> known{"type", "C_in", "C_out", "kernel", "stride", "pad",
                                             "p", "n", "m", "bias", "batchnorm", "activation",
                                             "repeat"};
    if (!j.is_object()) throw Error("invalid_topology", "block entry must be an object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw Error("invalid_topology", "unknown block field '" + key + "'");
    BlockSpec b;
    const auto type = j.at("type").get<std::string>();
    if (type == "conv") b.type = BlockType::conv;
    else if (type == "kvnn") b.type = BlockType::kvnn;
    else throw Error("unknown_block", "unknown block type '" + type + "'");
    b.in_channels = j.at("C_in").get<std::size_t>();
    b.out_channels = j.at("C_out").get<std::size_t>();
    b.kernel = get_or<std::size_t>(j, "kernel", 3);
    b.stride = get_or<std::size_t>(j, "stride", 1);
    b.pad = get_or<std::size_t>(j, "pad", b.kernel / 2);
    b.p = get_or<unsigned>(j, "p", b.type == BlockType::kvnn ? 2u : 1u);
    b.n = get_or<std::size_t>(j, "n", b.p >= 2 ? 1 : 0);
    b.m = get_or<std::size_t>(j, "m", b.p == 3 ? 1 : 0);
    b.bias = get_or<bool>(j, "bias", false);
    b.batchnorm = get_or<bool>(j, "batchnorm", false);
    const auto act = get_or<std::string>(j, "activation", "none");
    if (act == "relu") b.activation = Activation::relu;
    else if (act == "none") b.activation = Activation::none;
    else throw Error("invalid_topology", "unknown activation '" + act + "'");
    b.validate();
    return b;
}

json block_to_json(const BlockSpec& b) {
    json j{{"type", b.type == BlockType::conv ? "conv" : "kvnn"},
           {"C_in", b.in_channels},
           {"C_out", b.out_channels},
           {"kernel", b.kernel},
           {"stride", b.stride},
           {"pad", b.pad},
           {"bias", b.bias},
           {"batchnorm", b.batchnorm},
           {"activation", b.activation == Activation::relu ? "relu" : "none"}};
    if (b.type == BlockType::kvnn) {
        j["p"] = b.p;
        j["n"] = b.n;
        j["m"] = b.m;
    }
    return j;
}

std::size_t layer_params(const AnyLayer& layer) {
    return std::visit([](const auto& l) { return l.param_count(); }, layer);
}

}  // namespace

ConvGeometry BlockSpec::geometry() const {
    return ConvGeometry{in_channels, kernel, kernel, stride, pad};
}

FilterConfig BlockSpec::filter_config() const {
    return FilterConfig{p, n, m, bias};
}

void BlockSpec::validate() const {
    if (in_channels == 0 || out_channels == 0) throw Error("invalid_topology", "channel counts must be positive");
    if (kernel == 0 || stride == 0) throw Error("invalid_topology", "kernel and stride must be positive");
    if (type == BlockType::kvnn) {
        filter_config().validate();
        if ((p < 2 && n != 0) || (p < 3 && m != 0))
            throw Error("invalid_topology", "atom counts given for orders above p");
    }
}

Topology Topology::from_json(const json& j) {
    Topology t;
    t.name = get_or<std::string>(j, "name", "");
    t.input_channels = get_or<std::size_t>(j, "input_channels", 1);
    t.residual = get_or<bool>(j, "residual", false);
    for (const auto& entry : j.at("blocks")) {
        const auto block = parse_block(entry);
        const auto repeat = get_or<std::size_t>(entry, "repeat", 1);
        if (repeat == 0) throw Error("invalid_topology", "repeat must be positive");
        t.blocks.insert(t.blocks.end(), repeat, block);
    }
    return t;
}

Topology Topology::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("io", "cannot open topology file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw Error("invalid_topology", path.string() + ": " + e.what());
    }
    return from_json(j);
}

json Topology::to_json() const {
    json blocks_json = json::array();
    for (const auto& b : blocks) blocks_json.push_back(block_to_json(b));
    return json{{"name", name}, {"input_channels", input_channels}, {"residual", residual},
                {"blocks", blocks_json}};
}

std::size_t count_params(const BlockSpec& b) {
    b.validate();
    const std::size_t d = b.geometry().patch_dim();
    std::size_t per_channel = 0;
    if (b.type == BlockType::conv) per_channel = d + (b.bias ? 1 : 0);
    else per_channel = b.filter_config().atoms() * (d + 1) + (b.bias ? 1 : 0);
    return b.out_channels * (per_channel + (b.batchnorm ? 2 : 0));
}

std::size_t count_params(const Topology& topology) {
    std::size_t total = 0;
    for (const auto& b : topology.blocks) total += count_params(b);
    return total;
}

FlopReport count_flops(const Topology& topology, std::size_t height, std::size_t width) {
    FlopReport report;
    report.height = height;
    report.width = width;
    report.convention =
        "1 MAC = 2 FLOPs; per output location and channel: conv 2d (+1 bias); "
        "kVNN 2d per atom + (r-1) per order-r atom for the power + 1 per atom for gamma + "
        "(atoms-1) additions (+1 bias); batch-norm 2 per element; ReLU 0; residual subtraction 1 per element";
    std::size_t h = height, w = width;
    for (const auto& b : topology.blocks) {
        b.validate();
        const auto g = b.geometry();
        const std::size_t oh = g.out_h(h), ow = g.out_w(w);
        const std::uint64_t locations = static_cast<std::uint64_t>(oh) * ow;
        const std::uint64_t d = g.patch_dim();
        std::uint64_t per_output = 0;
        if (b.type == BlockType::conv) {
            per_output = 2 * d;
        } else {
            const auto counts = b.filter_config().atom_counts();
            std::uint64_t atoms = 0;
            for (std::size_t r = 1; r <= counts.size(); ++r) {
                atoms += counts[r - 1];
                per_output += counts[r - 1] * (2 * d + (r - 1) + 1);
            }
            per_output += atoms - 1;
        }
        if (b.bias) per_output += 1;
        if (b.batchnorm) per_output += 2;
        const std::uint64_t flops = per_output * locations * b.out_channels;
        report.per_block.push_back(flops);
        report.total += flops;
        h = oh;
        w = ow;
    }
    if (topology.residual) report.total += static_cast<std::uint64_t>(topology.input_channels) * height * width;
    return report;
}

Network Network::build(const Topology& topology, std::uint64_t seed, const InitSpec& init) {
    Network net;
    net.topology_ = topology;
    std::size_t channels = topology.input_channels;
    for (std::size_t i = 0; i < topology.blocks.size(); ++i) {
        const auto& b = topology.blocks[i];
        b.validate();
        if (b.batchnorm) throw Error("unsupported", "batch-norm blocks are count-only");
        if (b.in_channels != channels)
            throw Error("invalid_topology", "block " + std::to_string(i) + " expects " +
                                                std::to_string(b.in_channels) + " input channels, got " +
                                                std::to_string(channels));
        const auto block_seed = mix_seed(seed, i);
        if (b.type == BlockType::conv)
            net.layers_.emplace_back(ConvLayer::random(b.geometry(), b.out_channels, b.bias, block_seed));
        else
            net.layers_.emplace_back(
                KvnnLayer::random(b.geometry(), b.out_channels, b.filter_config(), block_seed, init));
        channels = b.out_channels;
    }
    if (topology.residual && channels != topology.input_channels)
        throw Error("invalid_topology", "residual network must end with input_channels channels");
    return net;
}

Tensor Network::forward(const Tensor& input, NetworkCache* cache) const {
    if (input.rank() != 3 || input.dim(0) != topology_.input_channels)
        throw dimension_error("network input must be " + std::to_string(topology_.input_channels) +
                              " x H x W, got " + shape_string(input.shape()));
    if (cache) {
        cache->inputs.clear();
        cache->pre_activation.clear();
        cache->layers.assign(layers_.size(), LayerCache{});
    }
    Tensor x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        LayerCache* lc = cache ? &cache->layers[i] : nullptr;
        Tensor y = std::visit([&](const auto& l) { return l.forward(x, lc); }, layers_[i]);
        if (cache) cache->inputs.push_back(std::move(x));
        if (topology_.blocks[i].activation == Activation::relu) {
            if (cache) cache->pre_activation.push_back(y);
            for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
        } else if (cache) {
            cache->pre_activation.emplace_back();
        }
        x = std::move(y);
    }
    if (topology_.residual) {
        Tensor out = input;
        for (std::size_t k = 0; k < out.size(); ++k) out[k] -= x[k];
        return out;
    }
    return x;
}

GradientBundle Network::backward(const Tensor& input, const Tensor& upstream,
                                 const NetworkCache* cache) const {
    NetworkCache local;
    if (!cache) {
        forward(input, &local);
        cache = &local;
    }
    if (cache->inputs.size() != layers_.size()) throw invalid_argument("network cache does not match");

    GradientBundle out;
    out.params.assign(param_count(), 0.0);
    Tensor g = upstream;
    if (topology_.residual)
        for (auto& v : g.data()) v = -v;
    const auto ranges = param_ranges();
    for (std::size_t i = layers_.size(); i-- > 0;) {
        if (topology_.blocks[i].activation == Activation::relu) {
            const Tensor& pre = cache->pre_activation[i];
            if (pre.size() != g.size()) throw dimension_error("upstream gradient shape mismatch");
            for (std::size_t k = 0; k < g.size(); ++k)
                if (!(pre[k] > 0.0)) g[k] = 0.0;
        }
        auto grads = std::visit(
            [&](const auto& l) { return l.backward(cache->inputs[i], g, &cache->layers[i]); }, layers_[i]);
        std::copy(grads.params.begin(), grads.params.end(), out.params.begin() + ranges[i].first);
        g = std::move(grads.input);
    }
    if (topology_.residual) {
        if (upstream.size() != g.size()) throw dimension_error("upstream gradient shape mismatch");
        // g holds J_f^T(-u); the input gradient of x - f(x) is u - J_f^T u.
        for (std::size_t k = 0; k < g.size(); ++k) g[k] = upstream[k] + g[k];
    }
    out.input = std::move(g);
    return out;
}

std::size_t Network::param_count() const {
    std::size_t total = 0;
    for (const auto& l : layers_) total += layer_params(l);
    return total;
}

std::vector<std::pair<std::size_t, std::size_t>> Network::param_ranges() const {
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    std::size_t offset = 0;
    for (const auto& l : layers_) {
        const auto n = layer_params(l);
        ranges.emplace_back(offset, offset + n);
        offset += n;
    }
    return ranges;
}

std::vector<double> Network::params() const {
    std::vector<double> out(param_count());
    const auto ranges = param_ranges();
    for (std::size_t i = 0; i < layers_.size(); ++i)
        std::visit(
            [&](const auto& l) {
                l.pack_params(std::span<double>(out).subspan(ranges[i].first, ranges[i].second - ranges[i].first));
            },
            layers_[i]);
    return out;
}

void Network::set_params(std::span<const double> values) {
    if (values.size() != param_count())
        throw dimension_error("expected " + std::to_string(param_count()) + " parameters, got " +
                              std::to_string(values.size()));
    const auto ranges = param_ranges();
    for (std::size_t i = 0; i < layers_.size(); ++i)
        std::visit([&](auto& l) { l.unpack_params(values.subspan(ranges[i].first, ranges[i].second - ranges[i].first)); },
                   layers_[i]);
}

void save_network(const Network& net, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "topology.json");
        if (!out) throw Error("io", "cannot write " + (dir / "topology.json").string());
        out << net.topology().to_json().dump(2) << '\n';
    }
    const auto p = net.params();
    save_tensor(dir / "params.kvt", p.empty() ? Tensor({1}, 0.0) : Tensor({p.size()}, p));
}

Network load_network(const std::filesystem::path& dir) {
    Network net = Network::build(Topology::load(dir / "topology.json"), 0);
    const Tensor p = load_tensor(dir / "params.kvt");
    if (net.param_count() == 0) return net;
    net.set_params(p.data());
    return net;
}

}  // namespace kvnn
