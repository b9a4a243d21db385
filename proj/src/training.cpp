#include "kvnn/training.hpp"

#include "kvnn/error.hpp"
#include "kvnn/parallel.hpp"
#include "kvnn/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <random>
#include <set>

namespace kvnn {

namespace {

void check_step_args(std::span<double> params, std::span<const double> grads, std::span<const double> decay,
                     double lr) {
    if (grads.size() != params.size() || decay.size() != params.size())
        throw dimension_error("optimizer step: params, grads and decay must have equal length");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw invalid_argument("learning rate must be positive");
    for (std::size_t i = 0; i < grads.size(); ++i)
        if (!std::isfinite(grads[i]))
            throw Error("non_finite", "gradient entry " + std::to_string(i) + " is not finite; step aborted");
}

double loss_of(const Network& net, const std::vector<Tensor>& batch, const std::vector<Tensor>& weights) {
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) total += dot(net.forward(batch[b]).data(), weights[b].data());
    return total;
}

}  // namespace

void DecaySchedule::validate() const {
    if (!(lambda0 >= 0.0) || !std::isfinite(lambda0)) throw invalid_argument("decay lambda0 must be >= 0");
    if (!(rho >= 1.0) || !std::isfinite(rho)) throw invalid_argument("decay multiplier rho must be >= 1");
}

double DecaySchedule::at(std::size_t layer) const {
    return lambda0 * std::pow(rho, static_cast<double>(layer));
}

std::vector<double> per_parameter_decay(const Network& net, const DecaySchedule& schedule) {
    schedule.validate();
    std::vector<double> decay(net.param_count());
    const auto ranges = net.param_ranges();
    for (std::size_t l = 0; l < ranges.size(); ++l)
        std::fill(decay.begin() + ranges[l].first, decay.begin() + ranges[l].second, schedule.at(l));
    return decay;
}

void sgd_step(std::span<double> params, std::span<const double> grads, double lr, std::span<const double> decay) {
    check_step_args(params, grads, decay, lr);
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * (grads[i] + decay[i] * params[i]);
}

void sgd_step(std::span<double> params, std::span<const double> grads, double lr, double decay) {
    const std::vector<double> d(params.size(), decay);
    sgd_step(params, grads, lr, d);
}

void AdamConfig::validate() const {
    if (!(lr > 0.0)) throw invalid_argument("adam lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw invalid_argument("adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw invalid_argument("adam eps must be positive");
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamConfig& config, std::span<const double> decay) {
    config.validate();
    check_step_args(params, grads, decay, config.lr);
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw dimension_error("adam state does not match parameter count");
    ++state.step;
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grads[i];
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grads[i] * grads[i];
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= config.lr * (m_hat / (std::sqrt(v_hat) + config.eps) + decay[i] * params[i]);
    }
}

double clip_global_norm(std::span<double> grads, double max_norm) {
    double sq = 0.0;
    for (double g : grads) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (double& g : grads) g *= scale;
    }
    return norm;
}

double mean_squared_error(std::span<const double> pred, std::span<const double> target) {
    if (pred.size() != target.size()) throw dimension_error("mse: size mismatch");
    if (pred.empty()) throw invalid_argument("mse of empty data");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = pred[i] - target[i];
        s += e * e;
    }
    return s / static_cast<double>(pred.size());
}

LossValue mse_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw dimension_error("mse: shapes " + shape_string(pred.shape()) + " and " + shape_string(target.shape()));
    LossValue out{mean_squared_error(pred.data(), target.data()), Tensor(pred.shape())};
    const double scale = 2.0 / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) out.grad[i] = scale * (pred[i] - target[i]);
    return out;
}

LossValue logistic_loss(const Tensor& score, const Tensor& label) {
    if (score.size() != 1 || label.size() != 1) throw dimension_error("logistic loss takes a single score");
    const double y = label[0];
    if (y != 1.0 && y != -1.0) throw invalid_argument("logistic label must be -1 or +1");
    const double z = -y * score[0];
    // softplus(z) and its derivative sigmoid(z), both overflow-safe.
    const double value = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    const double sig = z > 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    LossValue out{value, Tensor(score.shape())};
    out.grad[0] = -y * sig;
    return out;
}

double psnr_from_mse(double mse, double peak) {
    if (!(peak > 0.0)) throw invalid_argument("psnr peak must be positive");
    if (mse < 0.0 || std::isnan(mse)) throw invalid_argument("mse must be non-negative");
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

double psnr(const Tensor& pred, const Tensor& target, double peak) {
    if (pred.shape() != target.shape()) throw dimension_error("psnr: shape mismatch");
    return psnr_from_mse(mean_squared_error(pred.data(), target.data()), peak);
}

AuditReport grad_audit(const Network& net_in, const std::vector<Tensor>& batch, const AuditOptions& opt) {
    if (batch.empty()) throw invalid_argument("grad_audit needs at least one input");
    if (!(opt.h > 0.0)) throw invalid_argument("grad_audit step h must be positive");
    Network net = net_in;
    std::mt19937_64 rng(mix_seed(opt.seed, 0xa0d17));
    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<Tensor> weights;
    for (const auto& x : batch) {
        Tensor u(net.forward(x).shape());
        for (auto& v : u.data()) v = normal(rng);
        weights.push_back(std::move(u));
    }

    std::vector<double> analytic(net.param_count(), 0.0);
    Tensor input_grad;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        auto g = net.backward(batch[b], weights[b]);
        for (std::size_t i = 0; i < analytic.size(); ++i) analytic[i] += g.params[i];
        if (b == 0) input_grad = std::move(g.input);
    }
    if (opt.corrupt_param) {
        if (*opt.corrupt_param >= analytic.size()) throw invalid_argument("corrupt_param out of range");
        analytic[*opt.corrupt_param] = -analytic[*opt.corrupt_param];
    }

    // Parameter indices: a random subsample plus one whole output channel.
    std::vector<std::size_t> indices(analytic.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    std::shuffle(indices.begin(), indices.end(), rng);
    if (indices.size() > opt.samples) indices.resize(opt.samples);
    const auto ranges = net.param_ranges();
    if (!ranges.empty() && !analytic.empty()) {
        std::size_t block = 0;
        do {
            block = std::uniform_int_distribution<std::size_t>(0, ranges.size() - 1)(rng);
        } while (ranges[block].first == ranges[block].second);
        std::visit(
            [&](const auto& layer) {
                const std::size_t channel =
                    std::uniform_int_distribution<std::size_t>(0, layer.out_channels() - 1)(rng);
                const std::size_t start = ranges[block].first;
                if constexpr (std::is_same_v<std::decay_t<decltype(layer)>, KvnnLayer>) {
                    const std::size_t per = layer.filters()[0].param_count();
                    for (std::size_t k = 0; k < per; ++k) indices.push_back(start + channel * per + k);
                } else {
                    const std::size_t d = layer.geometry().patch_dim();
                    for (std::size_t k = 0; k < d; ++k) indices.push_back(start + channel * d + k);
                    if (layer.has_bias()) indices.push_back(start + layer.out_channels() * d + channel);
                }
            },
            net.layers()[block]);
    }
    if (opt.corrupt_param) indices.push_back(*opt.corrupt_param);
    std::sort(indices.begin(), indices.end());
    indices.erase(std::unique(indices.begin(), indices.end()), indices.end());

    AuditReport report;
    auto rel = [&](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), opt.floor}); };
    auto params = net.params();
    for (std::size_t i : indices) {
        const double keep = params[i];
        params[i] = keep + opt.h;
        net.set_params(params);
        const double up = loss_of(net, batch, weights);
        params[i] = keep - opt.h;
        net.set_params(params);
        const double down = loss_of(net, batch, weights);
        params[i] = keep;
        const double e = rel(analytic[i], (up - down) / (2.0 * opt.h));
        if (e > report.max_rel_error || std::isnan(e)) {
            report.max_rel_error = std::isnan(e) ? std::numeric_limits<double>::infinity() : e;
            report.worst_param = i;
            report.worst_is_input = false;
        }
        ++report.params_checked;
    }
    net.set_params(params);
    if (opt.check_input) {
        Tensor x = batch[0];
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double keep = x[i];
            x[i] = keep + opt.h;
            const double up = dot(net.forward(x).data(), weights[0].data());
            x[i] = keep - opt.h;
            const double down = dot(net.forward(x).data(), weights[0].data());
            x[i] = keep;
            const double e = rel(input_grad[i], (up - down) / (2.0 * opt.h));
            if (e > report.max_rel_error || std::isnan(e)) {
                report.max_rel_error = std::isnan(e) ? std::numeric_limits<double>::infinity() : e;
                report.worst_param = i;
                report.worst_is_input = true;
            }
            ++report.inputs_checked;
        }
    }
    report.pass = report.max_rel_error <= opt.tolerance;
    return report;
}

void TrainConfig::validate() const {
    if (optimizer != "adam" && optimizer != "sgd") throw invalid_argument("optimizer must be adam or sgd");
    adam.validate();
    decay.validate();
    if (batch_size == 0) throw invalid_argument("batch_size must be positive");
    if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0))
        throw invalid_argument("final_lr_fraction must lie in (0, 1]");
    if (!(time_budget_seconds > 0.0)) throw invalid_argument("time budget must be positive");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"optimizer", optimizer},
            {"lr", adam.lr},
            {"beta1", adam.beta1},
            {"beta2", adam.beta2},
            {"eps", adam.eps},
            {"steps", steps},
            {"batch_size", batch_size},
            {"clip_norm", clip_norm},
            {"final_lr_fraction", final_lr_fraction},
            {"decay_lambda0", decay.lambda0},
            {"decay_rho", decay.rho},
            {"time_budget_seconds", time_budget_seconds}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"optimizer", "lr", "beta1", "beta2", "eps", "steps", "batch_size",
                                             "clip_norm", "final_lr_fraction", "decay_lambda0", "decay_rho",
                                             "time_budget_seconds", "threads"};
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw invalid_argument("unknown training field '" + key + "'");
    TrainConfig c;
    c.optimizer = j.value("optimizer", c.optimizer);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("eps", c.adam.eps);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
    c.decay.lambda0 = j.value("decay_lambda0", c.decay.lambda0);
    c.decay.rho = j.value("decay_rho", c.decay.rho);
    c.time_budget_seconds = j.value("time_budget_seconds", c.time_budget_seconds);
    c.threads = j.value("threads", c.threads);
    c.validate();
    return c;
}

std::size_t thread_count_from_env() {
    if (const char* env = std::getenv("KVNN_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && n > 0) return static_cast<std::size_t>(n);
    }
    return 1;
}

std::pair<double, std::vector<double>> batch_gradient(const Network& net, const std::vector<Sample>& batch,
                                                      const LossFn& loss, std::size_t threads) {
    if (batch.empty()) throw invalid_argument("empty batch");
    const std::size_t n = batch.size();
    std::vector<double> losses(n);
    std::vector<std::vector<double>> grads(n);
    parallel_for(n, threads, [&](std::size_t i) {
        NetworkCache cache;
        const Tensor pred = net.forward(batch[i].input, &cache);
        const LossValue l = loss(pred, batch[i].target);
        losses[i] = l.value;
        grads[i] = net.backward(batch[i].input, l.grad, &cache).params;
    });
    double total = 0.0;
    std::vector<double> mean(net.param_count(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        total += losses[i];
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += grads[i][k];
    }
    const double inv = 1.0 / static_cast<double>(n);
    for (double& g : mean) g *= inv;
    return {total * inv, std::move(mean)};
}

std::vector<StepRecord> train(Network& net, const TrainConfig& config, const BatchFn& batches, const LossFn& loss,
                              const StepFn& on_step) {
    config.validate();
    const std::size_t threads = config.threads ? config.threads : thread_count_from_env();
    const auto decay = per_parameter_decay(net, config.decay);
    auto params = net.params();
    AdamState state;
    std::vector<StepRecord> history;
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t step = 0; step < config.steps; ++step) {
        auto [value, grads] = batch_gradient(net, batches(step), loss, threads);
        if (!std::isfinite(value))
            throw Error("diverged", "non-finite loss at step " + std::to_string(step));
        const double norm = clip_global_norm(grads, config.clip_norm);
        const double progress = config.steps > 1 ? static_cast<double>(step) / static_cast<double>(config.steps - 1) : 0.0;
        const double floor = config.adam.lr * config.final_lr_fraction;
        const double lr = floor + 0.5 * (config.adam.lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
        if (config.optimizer == "sgd") {
            sgd_step(params, grads, lr, decay);
        } else {
            AdamConfig a = config.adam;
            a.lr = lr;
            adam_step(params, grads, state, a, decay);
        }
        net.set_params(params);
        history.push_back(StepRecord{step, value, lr, norm});
        if (on_step) on_step(history.back(), net);
        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (elapsed > config.time_budget_seconds && step + 1 < config.steps)
            throw Error("time_budget", "training exceeded " + std::to_string(config.time_budget_seconds) +
                                           " s after " + std::to_string(step + 1) + " steps");
    }
    return history;
}

}  // namespace kvnn
