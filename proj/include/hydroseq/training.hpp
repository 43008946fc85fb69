#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hydroseq/checkpoint.hpp"
#include "hydroseq/data.hpp"
#include "hydroseq/metrics.hpp"
#include "hydroseq/models.hpp"

namespace hydroseq {

// Mean over masked elements of (yhat - y)^2 / (sigma_b + eps)^2, sigma_b being
// the sample's basin training-discharge std in the units of the targets.
inline Tensor basin_weighted_mse(Tape& tape, const Tensor& yhat, const Tensor& y,
                                 const Tensor& mask, const std::vector<double>& basin_std,
                                 double eps = 0.1) {
    if (yhat.shape() != y.shape() || mask.shape() != y.shape())
        throw ShapeError("basin_weighted_mse: yhat/y/mask shapes disagree");
    const std::size_t B = y.shape()[0];
    if (basin_std.size() != B) throw ShapeError("basin_weighted_mse: basin_std length != batch");
    const std::size_t per = y.numel() / B;

    Tensor w = Tensor::zeros(y.shape());
    double count = 0;
    for (std::size_t s = 0; s < B; ++s) {
        if (basin_std[s] < 0) throw ParameterError("basin_weighted_mse: negative basin_std");
        const double denom = (basin_std[s] + eps) * (basin_std[s] + eps);
        for (std::size_t t = 0; t < per; ++t) {
            const double m = mask.data()[s * per + t];
            w.data()[s * per + t] = m / denom;
            count += m;
        }
    }
    if (count == 0) throw TrainingError("basin_weighted_mse: batch is fully masked");
    Tensor diff = sub(tape, yhat, y);
    Tensor weighted = mul(tape, mul(tape, diff, diff), w);
    return scale(tape, sum_all(tape, weighted), 1.0 / count);
}

// Plain masked MSE (ablation switch).
inline Tensor masked_mse(Tape& tape, const Tensor& yhat, const Tensor& y, const Tensor& mask) {
    return basin_weighted_mse(tape, yhat, y, mask, std::vector<double>(y.shape()[0], 0.9), 0.1);
}

struct AdamState {
    struct Moments {
        std::vector<double> m, v;
    };
    std::map<std::string, Moments> moments;
    std::size_t t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// Bias-corrected Adam update in place; grads are left untouched (the caller
// zeroes them).
inline void adam_step(ModelWeights& weights, AdamState& state, double lr) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (auto& [name, param] : weights) {
        auto& mom = state.moments[name];
        const std::size_t n = param.numel();
        if (mom.m.empty()) {
            mom.m.assign(n, 0.0);
            mom.v.assign(n, 0.0);
        }
        const auto& g = param.grad();
        auto& d = param.data();
        for (std::size_t i = 0; i < n; ++i) {
            if (std::isnan(g[i]))
                throw TrainingError("adam_step: NaN gradient in parameter '" + name + "'");
            mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g[i];
            mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            d[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// Global L2 clipping across every parameter's gradient. Returns the pre-clip norm.
inline double clip_gradients(ModelWeights& weights, double max_norm) {
    if (!(max_norm > 0)) throw ParameterError("clip_gradients: max_norm must be > 0");
    double sq = 0;
    for (auto& [name, param] : weights)
        for (double g : param.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& [name, param] : weights)
            for (double& g : param.grad()) g *= s;
    }
    return norm;
}

inline void zero_grads(ModelWeights& weights) {
    for (auto& [name, param] : weights) param.zero_grad();
}

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<std::pair<std::size_t, double>> loss_trace;  // (iteration, loss)
};

// Seeded training run: init -> n_iterations of sample/forward/loss/backward/
// clip/adam. All randomness (init, sampling, dropout) flows from config.seed.
inline TrainResult train(const ModelSpec& spec, const std::vector<BasinRecord>& records,
                         const SplitSpec& split, const TrainConfig& config,
                         const std::string& product) {
    spec.validate();
    config.validate();
    split.validate();
    if (spec.variant == ModelVariant::transformer_vanilla && config.head_mode == HeadMode::seq2seq)
        throw ParameterError("train: vanilla transformer supports only seq2one supervision");

    RngStream root(config.seed);
    RngStream rng_init = root.split(1);
    RngStream rng_sample = root.split(2);
    RngStream rng_dropout = root.split(3);

    NormalizationStats stats = compute_norm_stats(records, split, product);
    ModelSpec s = spec;
    s.input_dim = stats.forcing.size() + stats.attributes.size();
    s.seq_len = config.seq_len;
    ModelWeights weights = init_weights(s, rng_init);

    AdamState adam;
    TrainResult result;
    for (std::size_t it = 1; it <= config.n_iterations; ++it) {
        Batch batch = make_batch(records, stats, split, config.seq_len, config.batch_size,
                                 rng_sample, config.head_mode);
        // fully-masked batches carry no signal; resample
        for (int attempt = 0; attempt < 100; ++attempt) {
            double msum = 0;
            for (double m : batch.mask.data()) msum += m;
            if (msum > 0) break;
            batch = make_batch(records, stats, split, config.seq_len, config.batch_size,
                               rng_sample, config.head_mode);
        }
        Tape tape;
        DropoutState ds{&rng_dropout, true, s.dropout_rate};
        Tensor yhat = model_forward(tape, batch.x, weights, s, ds);
        if (s.seq2seq() && config.head_mode == HeadMode::seq2one) {
            yhat = slice(tape, yhat, 1, config.seq_len - 1, config.seq_len);
        } else if (!s.seq2seq()) {
            yhat = reshape(tape, yhat, Shape{config.batch_size, 1, 1});
        }
        Tensor loss = config.plain_mse
                          ? basin_weighted_mse(tape, yhat, batch.y, batch.mask,
                                               std::vector<double>(config.batch_size, 0.9), 0.1)
                          : basin_weighted_mse(tape, yhat, batch.y, batch.mask, batch.basin_std);
        const double lval = loss.item();
        if (std::isnan(lval) || std::isinf(lval))
            throw TrainingError("train: loss diverged at iteration " + std::to_string(it));
        tape.backward(loss);
        clip_gradients(weights, config.clip_norm);
        adam_step(weights, adam, config.learning_rate);
        zero_grads(weights);
        if (it == 1 || it == config.n_iterations || it % config.eval_every == 0)
            result.loss_trace.emplace_back(it, lval);
    }

    result.checkpoint.spec = s;
    result.checkpoint.weights = std::move(weights);
    result.checkpoint.stats = std::move(stats);
    result.checkpoint.config = config;
    result.checkpoint.seed = config.seed;
    result.checkpoint.iteration = config.n_iterations;
    return result;
}

struct EnsembleResult {
    std::vector<std::optional<TrainResult>> members;      // index-aligned with seeds
    std::vector<std::pair<std::uint64_t, std::string>> failures;
};

// One independent run per seed; a failing member is reported without aborting
// its siblings.
inline EnsembleResult train_ensemble(const ModelSpec& spec,
                                     const std::vector<BasinRecord>& records,
                                     const SplitSpec& split, const TrainConfig& config,
                                     const std::vector<std::uint64_t>& seeds,
                                     const std::string& product) {
    if (seeds.empty()) throw ParameterError("train_ensemble: no seeds");
    for (std::size_t i = 0; i < seeds.size(); ++i)
        for (std::size_t j = i + 1; j < seeds.size(); ++j)
            if (seeds[i] == seeds[j]) throw ParameterError("train_ensemble: seeds must be distinct");
    EnsembleResult out;
    for (std::uint64_t seed : seeds) {
        TrainConfig c = config;
        c.seed = seed;
        try {
            out.members.emplace_back(train(spec, records, split, c, product));
        } catch (const Error& e) {
            out.members.emplace_back(std::nullopt);
            out.failures.emplace_back(seed, e.what());
        }
    }
    return out;
}

inline MetricReport evaluate_checkpoint(const Checkpoint& ckpt,
                                        const std::vector<BasinRecord>& records,
                                        const SplitSpec& split) {
    return evaluate_model(ckpt.spec, ckpt.weights, ckpt.stats, records, split);
}

}  // namespace hydroseq
