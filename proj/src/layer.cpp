#include "kvnn/layer.hpp"

#include "kvnn/error.hpp"
#include "kvnn/rng.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <random>

namespace kvnn {

namespace {

void check_input(const Tensor& input, const ConvGeometry& g) {
    if (input.rank() != 3)
        throw dimension_error("layer input must be C x H x W, got " + shape_string(input.shape()));
    if (input.dim(0) != g.in_channels)
        throw dimension_error("layer expects " + std::to_string(g.in_channels) +
                              " input channels, got " + std::to_string(input.dim(0)));
}

// acc[l*J + j] = sum_k rows[l*d + k] * cols_t[k*J + j], summed in k order so
// each entry is bit-identical to dot(row_l, col_j).
void project(std::span<const double> rows, std::size_t n_rows, std::size_t d,
             std::span<const double> cols_t, std::size_t n_cols, std::span<double> acc) {
    for (std::size_t l = 0; l < n_rows; ++l) {
        double* out = acc.data() + l * n_cols;
        std::fill(out, out + n_cols, 0.0);
        const double* row = rows.data() + l * d;
        for (std::size_t k = 0; k < d; ++k) {
            const double x = row[k];
            const double* col = cols_t.data() + k * n_cols;
            for (std::size_t j = 0; j < n_cols; ++j) out[j] += x * col[j];
        }
    }
}

}  // namespace

std::size_t ConvGeometry::out_h(std::size_t h) const {
    validate();
    if (h + 2 * pad < kernel_h)
        throw dimension_error("kernel height " + std::to_string(kernel_h) +
                              " exceeds padded input height " + std::to_string(h + 2 * pad));
    return (h + 2 * pad - kernel_h) / stride + 1;
}

std::size_t ConvGeometry::out_w(std::size_t w) const {
    validate();
    if (w + 2 * pad < kernel_w)
        throw dimension_error("kernel width " + std::to_string(kernel_w) +
                              " exceeds padded input width " + std::to_string(w + 2 * pad));
    return (w + 2 * pad - kernel_w) / stride + 1;
}

void ConvGeometry::validate() const {
    if (in_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0)
        throw invalid_argument("conv geometry: channels, kernel and stride must be >= 1");
}

Tensor extract_patches(const Tensor& input, const ConvGeometry& g) {
    check_input(input, g);
    const std::size_t h = input.dim(1), w = input.dim(2);
    const std::size_t oh = g.out_h(h), ow = g.out_w(w);
    const std::size_t d = g.patch_dim();
    Tensor patches({oh * ow, d});
    auto out = patches.data();
    const auto in = input.data();
    for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
            double* row = out.data() + (oy * ow + ox) * d;
            std::size_t k = 0;
            for (std::size_t c = 0; c < g.in_channels; ++c)
                for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
                    for (std::size_t kx = 0; kx < g.kernel_w; ++kx, ++k) {
                        const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                       static_cast<std::ptrdiff_t>(g.pad);
                        const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                       static_cast<std::ptrdiff_t>(g.pad);
                        if (y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(h) &&
                            x < static_cast<std::ptrdiff_t>(w))
                            row[k] = in[(c * h + static_cast<std::size_t>(y)) * w +
                                        static_cast<std::size_t>(x)];
                    }
        }
    return patches;
}

Tensor accumulate_patches(const Tensor& patch_grads, const ConvGeometry& g, std::size_t height,
                          std::size_t width) {
    const std::size_t oh = g.out_h(height), ow = g.out_w(width);
    const std::size_t d = g.patch_dim();
    if (patch_grads.shape() != Shape{oh * ow, d})
        throw dimension_error("accumulate_patches: gradient shape " +
                              shape_string(patch_grads.shape()));
    Tensor grad({g.in_channels, height, width});
    auto out = grad.data();
    const auto in = patch_grads.data();
    for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const double* row = in.data() + (oy * ow + ox) * d;
            std::size_t k = 0;
            for (std::size_t c = 0; c < g.in_channels; ++c)
                for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
                    for (std::size_t kx = 0; kx < g.kernel_w; ++kx, ++k) {
                        const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                       static_cast<std::ptrdiff_t>(g.pad);
                        const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                       static_cast<std::ptrdiff_t>(g.pad);
                        if (y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(height) &&
                            x < static_cast<std::ptrdiff_t>(width))
                            out[(c * height + static_cast<std::size_t>(y)) * width +
                                static_cast<std::size_t>(x)] += row[k];
                    }
        }
    return grad;
}

void FilterConfig::validate() const {
    if (p < 1 || p > 3) throw invalid_argument("filter order p must be 1, 2 or 3");
    if (p >= 2 && n < 1) throw invalid_argument("filter with p >= 2 needs n >= 1 quadratic atoms");
    if (p == 3 && m < 1) throw invalid_argument("filter with p = 3 needs m >= 1 cubic atoms");
}

std::vector<std::size_t> FilterConfig::atom_counts() const {
    validate();
    std::vector<std::size_t> counts{1, n, m};
    counts.resize(p);
    return counts;
}

std::size_t FilterConfig::atoms() const {
    std::size_t a = 0;
    for (auto c : atom_counts()) a += c;
    return a;
}

KvnnFilter KvnnFilter::random(std::uint64_t seed, std::size_t patch_dim,
                              const FilterConfig& config, const InitSpec& init) {
    const auto counts = config.atom_counts();
    return KvnnFilter{init_mk(seed, patch_dim, config.p, counts, init), config, 0.0};
}

void KvnnFilter::validate() const {
    config.validate();
    if (map.max_order() != config.p)
        throw invalid_argument("kvnn filter: map order differs from config p");
    const auto counts = config.atom_counts();
    for (unsigned r = 1; r <= config.p; ++r)
        if (map.branch(r).size() != counts[r - 1])
            throw invalid_argument("kvnn filter: order-" + std::to_string(r) + " branch has " +
                                   std::to_string(map.branch(r).size()) + " atoms, expected " +
                                   std::to_string(counts[r - 1]));
    if (!config.include_bias && bias != 0.0)
        throw invalid_argument("kvnn filter: bias set while include_bias is off");
}

std::size_t KvnnFilter::param_count() const {
    return config.atoms() * (map.input_dim() + 1) + (config.include_bias ? 1 : 0);
}

double filter_forward(const KvnnFilter& filter, std::span<const double> patch) {
    const double y = eval_mk(filter.map, patch);
    return filter.config.include_bias ? y + filter.bias : y;
}

KvnnLayer::KvnnLayer(ConvGeometry geometry, std::vector<KvnnFilter> filters)
    : geometry_(geometry), filters_(std::move(filters)) {
    geometry_.validate();
    if (filters_.empty()) throw invalid_argument("kvnn layer needs at least one filter");
    for (const auto& f : filters_) {
        f.validate();
        if (f.map.input_dim() != geometry_.patch_dim())
            throw dimension_error("kvnn filter dimension " + std::to_string(f.map.input_dim()) +
                                  " differs from patch dimension " +
                                  std::to_string(geometry_.patch_dim()));
        if (f.config.p != filters_.front().config.p || f.config.n != filters_.front().config.n ||
            f.config.m != filters_.front().config.m ||
            f.config.include_bias != filters_.front().config.include_bias)
            throw invalid_argument("all filters of a kvnn layer must share one configuration");
    }
    rebuild_atom_table();
}

KvnnLayer KvnnLayer::random(const ConvGeometry& geometry, std::size_t out_channels,
                            const FilterConfig& config, std::uint64_t seed, const InitSpec& init) {
    std::vector<KvnnFilter> filters;
    for (std::size_t c = 0; c < out_channels; ++c)
        filters.push_back(KvnnFilter::random(mix_seed(seed, c), geometry.patch_dim(), config, init));
    return KvnnLayer(geometry, std::move(filters));
}

void KvnnLayer::rebuild_atom_table() {
    const std::size_t d = geometry_.patch_dim();
    atoms_per_filter_ = filters_.front().config.atoms();
    const std::size_t total = atoms_per_filter_ * filters_.size();
    centers_t_.assign(d * total, 0.0);
    gammas_.assign(total, 0.0);
    orders_.assign(total, 0);
    std::size_t j = 0;
    for (const auto& f : filters_)
        for (const auto& b : f.map.branches())
            for (const auto& atom : b.atoms()) {
                const auto w = atom.center.data();
                for (std::size_t k = 0; k < d; ++k) centers_t_[k * total + j] = w[k];
                gammas_[j] = atom.coefficient;
                orders_[j] = atom.order();
                ++j;
            }
}

Tensor KvnnLayer::forward(const Tensor& input, LayerCache* cache) const {
    Tensor patches = extract_patches(input, geometry_);
    const std::size_t h = input.dim(1), w = input.dim(2);
    const std::size_t oh = geometry_.out_h(h), ow = geometry_.out_w(w);
    const std::size_t locations = oh * ow;
    const std::size_t d = geometry_.patch_dim();
    const std::size_t total = gammas_.size();

    std::vector<double> proj(locations * total);
    project(patches.data(), locations, d, centers_t_, total, proj);

    // Same accumulation order as filter_forward: atoms within a branch, then
    // branches in order, then the bias.
    Tensor out({filters_.size(), oh, ow});
    auto o = out.data();
    for (std::size_t c = 0; c < filters_.size(); ++c) {
        const auto& f = filters_[c];
        for (std::size_t l = 0; l < locations; ++l) {
            const double* s = proj.data() + l * total + c * atoms_per_filter_;
            std::size_t j = 0;
            double y = 0.0;
            for (const auto& b : f.map.branches()) {
                double branch_sum = 0.0;
                for (std::size_t i = 0; i < b.size(); ++i, ++j)
                    branch_sum += gammas_[c * atoms_per_filter_ + j] * ipow(s[j], b.order());
                y += branch_sum;
            }
            o[c * locations + l] = f.config.include_bias ? y + f.bias : y;
        }
    }
    if (cache) {
        cache->patches = std::move(patches);
        cache->projections = std::move(proj);
        cache->height = h;
        cache->width = w;
    }
    return out;
}

GradientBundle KvnnLayer::backward(const Tensor& input, const Tensor& upstream,
                                   const LayerCache* cache) const {
    LayerCache local;
    if (!cache) {
        forward(input, &local);
        cache = &local;
    }
    check_input(input, geometry_);
    const std::size_t h = input.dim(1), w = input.dim(2);
    const std::size_t oh = geometry_.out_h(h), ow = geometry_.out_w(w);
    if (upstream.shape() != Shape{filters_.size(), oh, ow})
        throw dimension_error("kvnn backward: upstream gradient shape " +
                              shape_string(upstream.shape()) + " does not match output");
    const std::size_t locations = oh * ow;
    const std::size_t d = geometry_.patch_dim();
    const std::size_t total = gammas_.size();
    const std::size_t a = atoms_per_filter_;
    const bool bias = filters_.front().config.include_bias;
    const std::size_t per_filter = a * (d + 1) + (bias ? 1 : 0);

    GradientBundle grads;
    grads.params.assign(per_filter * filters_.size(), 0.0);
    const auto up = upstream.data();

    // ds[l, j] = dL/d(x_l . w_j); gamma and bias gradients are accumulated on the way.
    Eigen::MatrixXd ds(locations, total);
    for (std::size_t l = 0; l < locations; ++l)
        for (std::size_t c = 0; c < filters_.size(); ++c) {
            const double g = up[c * locations + l];
            double* fg = grads.params.data() + c * per_filter;
            for (std::size_t i = 0; i < a; ++i) {
                const std::size_t j = c * a + i;
                const unsigned r = orders_[j];
                const double s = cache->projections[l * total + j];
                const double s_pow = ipow(s, r - 1);
                fg[i * (d + 1) + d] += g * s_pow * s;
                ds(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(j)) =
                    g * gammas_[j] * static_cast<double>(r) * s_pow;
            }
            if (bias) fg[a * (d + 1)] += g;
        }

    using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const auto L = static_cast<Eigen::Index>(locations);
    const auto D = static_cast<Eigen::Index>(d);
    const auto J = static_cast<Eigen::Index>(total);
    const Eigen::Map<const RowMatrix> x(cache->patches.data().data(), L, D);
    const Eigen::Map<const RowMatrix> centers_t(centers_t_.data(), D, J);
    const RowMatrix dw = ds.transpose() * x;  // [J, d]
    for (std::size_t j = 0; j < total; ++j) {
        double* dst = grads.params.data() + (j / a) * per_filter + (j % a) * (d + 1);
        for (std::size_t k = 0; k < d; ++k) dst[k] = dw(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k));
    }
    Tensor patch_grads({locations, d});
    Eigen::Map<RowMatrix>(patch_grads.data().data(), L, D).noalias() = ds * centers_t.transpose();
    grads.input = accumulate_patches(patch_grads, geometry_, h, w);
    return grads;
}

std::size_t KvnnLayer::param_count() const {
    std::size_t n = 0;
    for (const auto& f : filters_) n += f.param_count();
    return n;
}

void KvnnLayer::pack_params(std::span<double> out) const {
    if (out.size() != param_count()) throw dimension_error("kvnn pack_params: buffer size");
    std::size_t pos = 0;
    for (const auto& f : filters_) {
        for (const auto& b : f.map.branches())
            for (const auto& atom : b.atoms()) {
                for (double v : atom.center.data()) out[pos++] = v;
                out[pos++] = atom.coefficient;
            }
        if (f.config.include_bias) out[pos++] = f.bias;
    }
}

void KvnnLayer::unpack_params(std::span<const double> in) {
    if (in.size() != param_count()) throw dimension_error("kvnn unpack_params: buffer size");
    std::size_t pos = 0;
    for (auto& f : filters_) {
        for (auto& b : f.map.branches())
            for (auto& atom : b.atoms()) {
                for (auto& v : atom.center.data()) v = in[pos++];
                atom.coefficient = in[pos++];
            }
        if (f.config.include_bias) f.bias = in[pos++];
    }
    rebuild_atom_table();
}

Tensor layer_forward(const KvnnLayer& layer, const Tensor& input) { return layer.forward(input); }

GradientBundle layer_backward(const KvnnLayer& layer, const Tensor& input, const Tensor& upstream) {
    return layer.backward(input, upstream);
}

ConvLayer::ConvLayer(ConvGeometry geometry, Tensor weight, std::vector<double> bias)
    : geometry_(geometry), weight_(std::move(weight)), bias_(std::move(bias)) {
    geometry_.validate();
    if (weight_.rank() != 2 || weight_.dim(1) != geometry_.patch_dim())
        throw dimension_error("conv weight must be [C_out, " + std::to_string(geometry_.patch_dim()) +
                              "], got " + shape_string(weight_.shape()));
    if (!bias_.empty() && bias_.size() != weight_.dim(0))
        throw dimension_error("conv bias length must equal C_out");
}

ConvLayer ConvLayer::random(const ConvGeometry& geometry, std::size_t out_channels, bool bias,
                            std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    // He-normal, matched to the ReLU blocks this layer usually feeds.
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(geometry.patch_dim())));
    Tensor w({out_channels, geometry.patch_dim()});
    for (auto& v : w.data()) v = normal(rng);
    return ConvLayer(geometry, std::move(w),
                     bias ? std::vector<double>(out_channels, 0.0) : std::vector<double>{});
}

Tensor ConvLayer::forward(const Tensor& input, LayerCache* cache) const {
    Tensor patches = extract_patches(input, geometry_);
    const std::size_t h = input.dim(1), w = input.dim(2);
    const std::size_t oh = geometry_.out_h(h), ow = geometry_.out_w(w);
    const std::size_t locations = oh * ow;
    const std::size_t d = geometry_.patch_dim();
    const std::size_t cout = out_channels();

    std::vector<double> wt(d * cout);
    for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t k = 0; k < d; ++k) wt[k * cout + c] = weight_[c * d + k];
    std::vector<double> proj(locations * cout);
    project(patches.data(), locations, d, wt, cout, proj);

    Tensor out({cout, oh, ow});
    auto o = out.data();
    for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t l = 0; l < locations; ++l)
            o[c * locations + l] = has_bias() ? proj[l * cout + c] + bias_[c] : proj[l * cout + c];
    if (cache) {
        cache->patches = std::move(patches);
        cache->height = h;
        cache->width = w;
    }
    return out;
}

GradientBundle ConvLayer::backward(const Tensor& input, const Tensor& upstream,
                                   const LayerCache* cache) const {
    check_input(input, geometry_);
    const std::size_t h = input.dim(1), w = input.dim(2);
    const std::size_t oh = geometry_.out_h(h), ow = geometry_.out_w(w);
    const std::size_t cout = out_channels();
    if (upstream.shape() != Shape{cout, oh, ow})
        throw dimension_error("conv backward: upstream gradient shape " +
                              shape_string(upstream.shape()) + " does not match output");
    Tensor local;
    const Tensor* patches = nullptr;
    if (cache) {
        patches = &cache->patches;
    } else {
        local = extract_patches(input, geometry_);
        patches = &local;
    }
    const std::size_t locations = oh * ow;
    const std::size_t d = geometry_.patch_dim();

    GradientBundle grads;
    grads.params.assign(param_count(), 0.0);
    using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const auto L = static_cast<Eigen::Index>(locations);
    const auto D = static_cast<Eigen::Index>(d);
    const auto C = static_cast<Eigen::Index>(cout);
    const Eigen::Map<const RowMatrix> x(patches->data().data(), L, D);
    const Eigen::Map<const RowMatrix> wm(weight_.data().data(), C, D);
    const Eigen::Map<const RowMatrix> g(upstream.data().data(), C, L);
    Eigen::Map<RowMatrix>(grads.params.data(), C, D).noalias() = g * x;
    if (has_bias())
        for (std::size_t c = 0; c < cout; ++c) grads.params[cout * d + c] = g.row(static_cast<Eigen::Index>(c)).sum();
    Tensor patch_grads({locations, d});
    Eigen::Map<RowMatrix>(patch_grads.data().data(), L, D).noalias() = g.transpose() * wm;
    grads.input = accumulate_patches(patch_grads, geometry_, h, w);
    return grads;
}

std::size_t ConvLayer::param_count() const { return weight_.size() + bias_.size(); }

void ConvLayer::pack_params(std::span<double> out) const {
    if (out.size() != param_count()) throw dimension_error("conv pack_params: buffer size");
    std::copy(weight_.data().begin(), weight_.data().end(), out.begin());
    std::copy(bias_.begin(), bias_.end(), out.begin() + static_cast<std::ptrdiff_t>(weight_.size()));
}

void ConvLayer::unpack_params(std::span<const double> in) {
    if (in.size() != param_count()) throw dimension_error("conv unpack_params: buffer size");
    std::copy(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(weight_.size()),
              weight_.data().begin());
    std::copy(in.begin() + static_cast<std::ptrdiff_t>(weight_.size()), in.end(), bias_.begin());
}

}  // namespace kvnn
