#pragma once

#include "kvnn/network.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kvnn {

/// Layer-wise weight decay lambda_l = lambda0 * rho^l, l counting blocks from the input.
struct DecaySchedule {
    double lambda0 = 1e-5;
    double rho = 1.3;

    void validate() const;
    double at(std::size_t layer) const;
};

/// One decay value per flat parameter of `net`.
std::vector<double> per_parameter_decay(const Network& net, const DecaySchedule& schedule);

/// theta -= lr * (g + lambda * theta). Throws non_finite on NaN/inf gradients
/// before touching any parameter.
void sgd_step(std::span<double> params, std::span<const double> grads, double lr,
              std::span<const double> decay);
void sgd_step(std::span<double> params, std::span<const double> grads, double lr, double decay);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t step = 0;
};

/// Bias-corrected Adam with decoupled decay: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + lambda * theta).
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamConfig& config, std::span<const double> decay);

/// Rescales grads so their L2 norm is at most max_norm; returns the norm before clipping.
double clip_global_norm(std::span<double> grads, double max_norm);

struct LossValue {
    double value = 0.0;
    Tensor grad;
};

LossValue mse_loss(const Tensor& pred, const Tensor& target);
/// Logistic loss log(1 + exp(-y f)) for a single score f and label y in {-1, +1}.
LossValue logistic_loss(const Tensor& score, const Tensor& label);

double mean_squared_error(std::span<const double> pred, std::span<const double> target);
/// 10 log10(peak^2 / mse); +infinity when mse == 0.
double psnr_from_mse(double mse, double peak = 1.0);
double psnr(const Tensor& pred, const Tensor& target, double peak = 1.0);

struct AuditOptions {
    double h = 1e-5;
    double tolerance = 1e-6;
    std::size_t samples = 200;
    std::uint64_t seed = 0;
    // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
    double floor = 1e-6;
    bool check_input = true;
    // Negative control: negate this analytic parameter gradient entry.
    std::optional<std::size_t> corrupt_param;
};

struct AuditReport {
    std::size_t params_checked = 0;
    std::size_t inputs_checked = 0;
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    bool worst_is_input = false;
    bool pass = false;
};

/// Central-difference audit of Network::backward on L = sum_b <u_b, net(x_b)>
/// with seeded random u_b. Checks a random subsample of `samples` parameters
/// (all of them if fewer), every parameter of one random output channel and,
/// optionally, every input entry of the first batch item.
AuditReport grad_audit(const Network& net, const std::vector<Tensor>& batch, const AuditOptions& options);

struct Sample {
    Tensor input;
    Tensor target;
};

struct TrainConfig {
    std::string optimizer = "adam";  // adam | sgd
    AdamConfig adam;
    std::size_t steps = 1000;
    std::size_t batch_size = 16;
    double clip_norm = 5.0;  // <= 0 disables
    // Cosine anneal from adam.lr down to lr * final_lr_fraction.
    double final_lr_fraction = 1.0;
    DecaySchedule decay;
    std::size_t threads = 0;  // 0: KVNN_THREADS or 1
    double time_budget_seconds = 600.0;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct StepRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
};

using BatchFn = std::function<std::vector<Sample>(std::size_t step)>;
using LossFn = std::function<LossValue(const Tensor& pred, const Tensor& target)>;
using StepFn = std::function<void(const StepRecord&, const Network&)>;

/// KVNN_THREADS if set to a positive integer, else 1.
std::size_t thread_count_from_env();

/// Mean loss and mean parameter gradient over a batch. Items are spread over
/// `threads` workers and reduced in item order, so the result does not depend
/// on the thread count.
std::pair<double, std::vector<double>> batch_gradient(const Network& net, const std::vector<Sample>& batch,
                                                      const LossFn& loss, std::size_t threads);

/// Runs config.steps optimizer steps. Throws `diverged` on a non-finite loss
/// and `time_budget` when the wall-clock budget is exhausted; on_step sees the
/// network after every completed step.
std::vector<StepRecord> train(Network& net, const TrainConfig& config, const BatchFn& batches,
                              const LossFn& loss, const StepFn& on_step = {});

}  // namespace kvnn
