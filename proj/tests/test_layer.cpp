#include "kvnn/error.hpp"
#include "kvnn/layer.hpp"
#include "kvnn/volterra.hpp"

#include "doctest.h"

#include <cmath>
#include <random>

using namespace kvnn;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = normal(rng);
    return t;
}

// Straight per-location gather, written without the im2col row layout.
double naive_gather(const Tensor& in, const ConvGeometry& g, std::size_t oy, std::size_t ox,
                    std::size_t c, std::size_t ky, std::size_t kx) {
    const long y = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
    const long x = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
    if (y < 0 || x < 0 || y >= static_cast<long>(in.dim(1)) || x >= static_cast<long>(in.dim(2)))
        return 0.0;
    return in.at({c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)});
}

template <class Layer>
double projected_loss(const Layer& layer, const Tensor& input, const Tensor& u) {
    return dot(layer.forward(input).data(), u.data());
}

// Central differences of L = <u, layer(x)> against the analytic backward.
template <class Layer>
double finite_difference_error(Layer layer, const Tensor& input, const Tensor& u, double h) {
    const auto analytic = layer.backward(input, u);
    std::vector<double> params(layer.param_count());
    layer.pack_params(params);
    double worst = 0.0;
    auto rel = [](double a, double n) {
        return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double keep = params[i];
        params[i] = keep + h;
        layer.unpack_params(params);
        const double up = projected_loss(layer, input, u);
        params[i] = keep - h;
        layer.unpack_params(params);
        const double down = projected_loss(layer, input, u);
        params[i] = keep;
        layer.unpack_params(params);
        worst = std::max(worst, rel(analytic.params[i], (up - down) / (2 * h)));
    }
    Tensor x = input;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = projected_loss(layer, x, u);
        x[i] = keep - h;
        const double down = projected_loss(layer, x, u);
        x[i] = keep;
        worst = std::max(worst, rel(analytic.input[i], (up - down) / (2 * h)));
    }
    return worst;
}

}  // namespace

TEST_CASE("geometry") {
    ConvGeometry g{1, 3, 3, 1, 1};
    CHECK(g.out_h(5) == 5);
    CHECK(g.out_w(7) == 7);
    ConvGeometry s2{1, 3, 3, 2, 0};
    CHECK(s2.out_h(7) == 3);
    ConvGeometry big{1, 5, 5, 1, 0};
    CHECK_THROWS_AS(big.out_h(3), Error);
    ConvGeometry big_padded{1, 5, 5, 1, 1};
    CHECK(big_padded.out_h(3) == 1);
}

TEST_CASE("extract_patches") {
    std::mt19937_64 rng(1);
    const Tensor img = random_tensor(rng, {1, 4, 6});
    const Tensor id = extract_patches(img, ConvGeometry{1, 1, 1, 1, 0});
    CHECK(id.shape() == Shape{24, 1});
    CHECK(id.values() == img.values());

    const Tensor p = extract_patches(random_tensor(rng, {1, 5, 5}), ConvGeometry{1, 3, 3, 1, 1});
    CHECK(p.shape() == Shape{25, 9});

    Tensor checker({2, 5, 4});
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 5; ++y)
            for (std::size_t x = 0; x < 4; ++x)
                checker.at({c, y, x}) = ((x + y + c) % 2 ? 1.0 : -1.0) * (1.0 + 0.1 * static_cast<double>(x + 10 * y + 100 * c));
    for (const ConvGeometry g : {ConvGeometry{2, 3, 3, 1, 1}, ConvGeometry{2, 2, 3, 2, 1}, ConvGeometry{2, 3, 2, 1, 0}}) {
        const Tensor patches = extract_patches(checker, g);
        const std::size_t oh = g.out_h(5), ow = g.out_w(4);
        REQUIRE(patches.shape() == Shape{oh * ow, g.patch_dim()});
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox)
                for (std::size_t c = 0; c < 2; ++c)
                    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
                        for (std::size_t kx = 0; kx < g.kernel_w; ++kx)
                            CHECK(patches.at({oy * ow + ox, (c * g.kernel_h + ky) * g.kernel_w + kx}) ==
                                  naive_gather(checker, g, oy, ox, c, ky, kx));
    }
    CHECK_THROWS_AS(extract_patches(Tensor({2, 3, 3}), ConvGeometry{1, 3, 3, 1, 0}), Error);
}

TEST_CASE("accumulate_patches is the adjoint of extract_patches") {
    std::mt19937_64 rng(2);
    const ConvGeometry g{2, 3, 3, 2, 1};
    const Tensor x = random_tensor(rng, {2, 7, 6});
    const Tensor p = extract_patches(x, g);
    const Tensor q = random_tensor(rng, p.shape());
    const Tensor qt = accumulate_patches(q, g, 7, 6);
    CHECK(dot(p.data(), q.data()) == doctest::Approx(dot(x.data(), qt.data())).epsilon(1e-13));
}

TEST_CASE("filter_forward") {
    std::mt19937_64 rng(3);
    FilterConfig linear{1, 0, 0, false};
    auto f = KvnnFilter::random(4, 9, linear);
    const Tensor patch = random_tensor(rng, {9});
    const auto& atom = f.map.branch(1).atoms()[0];
    double conv = 0.0;
    for (std::size_t k = 0; k < 9; ++k) conv += atom.coefficient * atom.center[k] * patch[k];
    CHECK(filter_forward(f, patch.data()) == doctest::Approx(conv).epsilon(1e-14));
    CHECK(filter_forward(f, Tensor({9}).data()) == 0.0);

    FilterConfig cubic{3, 2, 2, false};
    const auto f3 = KvnnFilter::random(5, 8, cubic);
    const auto dense = to_volterra(f3.map);
    for (int i = 0; i < 50; ++i) {
        const Tensor x = random_tensor(rng, {8});
        CHECK(relative_error(filter_forward(f3, x.data()), eval_volterra(dense, x.data())) <= 1e-10);
    }
    CHECK_THROWS_AS(filter_forward(f3, Tensor({9}).data()), Error);

    FilterConfig bad{3, 1, 0, false};
    CHECK_THROWS_AS(bad.validate(), Error);
    FilterConfig bad2{4, 1, 1, false};
    CHECK_THROWS_AS(bad2.validate(), Error);
}

TEST_CASE("parameter count walks the parameter store") {
    for (const FilterConfig cfg : {FilterConfig{1, 0, 0, false}, FilterConfig{2, 1, 0, false},
                                   FilterConfig{2, 4, 0, true}, FilterConfig{3, 2, 3, true}}) {
        const ConvGeometry g{3, 3, 3, 1, 1};
        const auto layer = KvnnLayer::random(g, 4, cfg, 9);
        std::vector<double> packed(layer.param_count());
        layer.pack_params(packed);
        const std::size_t d = 27;
        const std::size_t per_filter = (1 + (cfg.p >= 2 ? cfg.n : 0) + (cfg.p == 3 ? cfg.m : 0)) * (d + 1) +
                                       (cfg.include_bias ? 1 : 0);
        CHECK(layer.param_count() == 4 * per_filter);
        CHECK(layer.filters()[0].param_count() == per_filter);
    }
    const auto single = KvnnFilter::random(1, 9, FilterConfig{2, 1, 0, false});
    CHECK(single.param_count() == 20);
}

TEST_CASE("layer_forward") {
    std::mt19937_64 rng(6);
    // p = 1 averaging filter is a box blur.
    MKVolterraMap avg(9, 1);
    avg.branch(1).add(KernelAtom(1, Tensor({9}, 1.0 / 9.0), 1.0));
    const KvnnLayer blur(ConvGeometry{1, 3, 3, 1, 0}, {KvnnFilter{avg, FilterConfig{1, 0, 0, false}, 0.0}});
    const Tensor img = random_tensor(rng, {1, 6, 7});
    const Tensor out = blur.forward(img);
    REQUIRE(out.shape() == Shape{1, 4, 5});
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 5; ++x) {
            double s = 0.0;
            for (std::size_t dy = 0; dy < 3; ++dy)
                for (std::size_t dx = 0; dx < 3; ++dx) s += img.at({0, y + dy, x + dx});
            CHECK(out.at({0, y, x}) == doctest::Approx(s / 9.0).epsilon(1e-14));
        }

    // Order-2 only (linear gamma zeroed): doubling the input quadruples the output.
    auto quad = KvnnLayer::random(ConvGeometry{2, 3, 3, 1, 1}, 3, FilterConfig{2, 2, 0, false}, 7);
    std::vector<double> params(quad.param_count());
    quad.pack_params(params);
    const std::size_t per_filter = 3 * 19;
    for (std::size_t c = 0; c < 3; ++c) params[c * per_filter + 18] = 0.0;
    quad.unpack_params(params);
    const Tensor x = random_tensor(rng, {2, 5, 5});
    Tensor x2 = x;
    for (auto& v : x2.data()) v *= 2.0;
    const Tensor y1 = quad.forward(x), y2 = quad.forward(x2);
    for (std::size_t i = 0; i < y1.size(); ++i) CHECK(y2[i] == doctest::Approx(4.0 * y1[i]).epsilon(1e-13));
}

TEST_CASE("layer_forward is bitwise equal to per-location filter_forward") {
    std::mt19937_64 rng(8);
    const ConvGeometry g{2, 3, 3, 2, 1};
    const auto layer = KvnnLayer::random(g, 4, FilterConfig{3, 2, 1, true}, 11);
    const Tensor x = random_tensor(rng, {2, 7, 8});
    const Tensor y = layer.forward(x);
    const Tensor patches = extract_patches(x, g);
    const std::size_t locations = patches.dim(0);
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t l = 0; l < locations; ++l) {
            const auto row = patches.data().subspan(l * g.patch_dim(), g.patch_dim());
            CHECK(y[c * locations + l] == filter_forward(layer.filters()[c], row));
        }
}

TEST_CASE("layer_forward equals the dense Volterra oracle per patch") {
    std::mt19937_64 rng(12);
    const ConvGeometry g{1, 2, 2, 1, 0};
    const auto layer = KvnnLayer::random(g, 2, FilterConfig{3, 3, 2, false}, 13);
    const Tensor x = random_tensor(rng, {1, 5, 5});
    const Tensor y = layer.forward(x);
    const Tensor patches = extract_patches(x, g);
    for (std::size_t c = 0; c < 2; ++c) {
        const auto dense = to_volterra(layer.filters()[c].map);
        for (std::size_t l = 0; l < 16; ++l)
            CHECK(relative_error(y[c * 16 + l], eval_volterra(dense, patches.data().subspan(l * 4, 4))) <= 1e-10);
    }
}

TEST_CASE("translation covariance") {
    std::mt19937_64 rng(14);
    const auto layer = KvnnLayer::random(ConvGeometry{1, 3, 3, 1, 0}, 2, FilterConfig{3, 1, 1, false}, 15);
    const Tensor x = random_tensor(rng, {1, 8, 8});
    Tensor shifted({1, 8, 8});
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t xx = 1; xx < 8; ++xx) shifted.at({0, y, xx}) = x.at({0, y, xx - 1});
    const Tensor a = layer.forward(x), b = layer.forward(shifted);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 6; ++y)
            for (std::size_t xx = 1; xx < 6; ++xx) CHECK(b.at({c, y, xx}) == a.at({c, y, xx - 1}));
}

TEST_CASE("layer_backward zero upstream") {
    std::mt19937_64 rng(16);
    const auto layer = KvnnLayer::random(ConvGeometry{2, 3, 3, 1, 1}, 3, FilterConfig{3, 1, 1, true}, 17);
    const Tensor x = random_tensor(rng, {2, 4, 4});
    const auto g = layer.backward(x, Tensor({3, 4, 4}));
    for (double v : g.params) CHECK(v == 0.0);
    for (double v : g.input.data()) CHECK(v == 0.0);
    CHECK_THROWS_AS(layer.backward(x, Tensor({3, 4, 5})), Error);
}

TEST_CASE("p = 1 kvnn layer reduces to a standard convolution") {
    std::mt19937_64 rng(18);
    const ConvGeometry g{3, 3, 3, 1, 1};
    const auto kv = KvnnLayer::random(g, 4, FilterConfig{1, 0, 0, false}, 19);
    Tensor weight({4, 27});
    for (std::size_t c = 0; c < 4; ++c) {
        const auto& atom = kv.filters()[c].map.branch(1).atoms()[0];
        for (std::size_t k = 0; k < 27; ++k) weight[c * 27 + k] = atom.coefficient * atom.center[k];
    }
    const ConvLayer conv(g, weight);
    const Tensor x = random_tensor(rng, {3, 6, 5});
    const Tensor yk = kv.forward(x), yc = conv.forward(x);
    for (std::size_t i = 0; i < yk.size(); ++i) CHECK(relative_error(yk[i], yc[i], 1e-300) <= 1e-12);

    const Tensor u = random_tensor(rng, yk.shape());
    const auto gk = kv.backward(x, u), gc = conv.backward(x, u);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(relative_error(gk.input[i], gc.input[i], 1e-300) <= 1e-12);
    // d/dw = gamma * dW_conv and d/dgamma = w . dW_conv.
    for (std::size_t c = 0; c < 4; ++c) {
        const auto& atom = kv.filters()[c].map.branch(1).atoms()[0];
        const double* kg = gk.params.data() + c * 28;
        const double* cg = gc.params.data() + c * 27;
        double dgamma = 0.0;
        for (std::size_t k = 0; k < 27; ++k) {
            CHECK(relative_error(kg[k], atom.coefficient * cg[k], 1e-300) <= 1e-12);
            dgamma += atom.center[k] * cg[k];
        }
        CHECK(relative_error(kg[27], dgamma) <= 1e-12);
    }
}

TEST_CASE("analytic gradients match central finite differences") {
    std::mt19937_64 rng(20);
    struct Case {
        ConvGeometry g;
        FilterConfig cfg;
        std::size_t h, w, cout;
    };
    const std::vector<Case> cases{
        {ConvGeometry{1, 3, 3, 1, 1}, FilterConfig{1, 0, 0, true}, 5, 5, 2},
        {ConvGeometry{2, 3, 3, 1, 1}, FilterConfig{2, 2, 0, false}, 5, 4, 3},
        {ConvGeometry{3, 3, 3, 2, 1}, FilterConfig{3, 1, 2, true}, 5, 5, 2},
        {ConvGeometry{3, 3, 3, 1, 0}, FilterConfig{3, 2, 2, false}, 4, 4, 2},
    };
    for (const auto& c : cases) {
        const auto layer = KvnnLayer::random(c.g, c.cout, c.cfg, 21);
        const Tensor x = random_tensor(rng, {c.g.in_channels, c.h, c.w}, 0.7);
        const Tensor u = random_tensor(rng, {c.cout, c.g.out_h(c.h), c.g.out_w(c.w)});
        const double err = finite_difference_error(layer, x, u, 1e-5);
        MESSAGE("p=" << c.cfg.p << " d=" << c.g.patch_dim() << " max rel err " << err);
        CHECK(err <= 1e-6);
    }
    const auto conv = ConvLayer::random(ConvGeometry{2, 3, 3, 1, 1}, 3, true, 22);
    const Tensor x = random_tensor(rng, {2, 4, 4});
    const Tensor u = random_tensor(rng, {3, 4, 4});
    CHECK(finite_difference_error(conv, x, u, 1e-5) <= 1e-6);
}
