#pragma once

// Training: token-level cross entropy over teacher-forced decoder logits, a
// linear warmup/decay schedule, decoupled-weight-decay Adam, and a batch loop
// with periodic validation, JSONL metrics, and checkpointing.

#include "cdnpg/checkpoint.hpp"
#include "cdnpg/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cdnpg {

// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`
// ([positions, vocab]), skipping positions whose target is `pad_id`. With
// label smoothing the target distribution mixes (1-ls) on the label with ls
// spread uniformly over the vocabulary. Fused into a single tape op: the
// forward uses a max-shifted log-sum-exp and the backward is softmax minus the
// target distribution, scaled by the incoming gradient over the position count.
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<int>& targets,
                             int pad_id = kPadId, double label_smoothing = 0.0) {
    if (logits.rank() != 2)
        throw std::runtime_error("cross_entropy: logits must be [positions, vocab], got shape " +
                                 shape_str(logits.shape()));
    const std::size_t m = logits.dim(0);
    const std::size_t v = logits.dim(1);
    if (targets.size() != m)
        throw std::runtime_error("cross_entropy: " + std::to_string(targets.size()) +
                                 " targets for " + std::to_string(m) + " logit rows");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
        throw std::runtime_error("cross_entropy: label_smoothing must be in [0, 1)");

    std::size_t count = 0;
    for (int t : targets) {
        if (t == pad_id) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= v)
            throw std::runtime_error("cross_entropy: target id " + std::to_string(t) +
                                     " outside vocabulary of size " + std::to_string(v));
        ++count;
    }
    if (count == 0) throw std::runtime_error("cross_entropy: every target position is padding");

    const T ls = static_cast<T>(label_smoothing);
    const std::vector<T>& x = logits.data();
    T total = 0;
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i] == pad_id) continue;
        const T* row = x.data() + i * v;
        T mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        T se = 0, sx = 0;
        for (std::size_t j = 0; j < v; ++j) {
            se += std::exp(row[j] - mx);
            sx += row[j];
        }
        const T lse = mx + std::log(se);
        total += lse - (T(1) - ls) * row[static_cast<std::size_t>(targets[i])] - ls / T(v) * sx;
    }
    const T loss = total / T(count);

    return detail::make_op<T>(
        {1}, {loss}, {logits},
        [targets, m, v, pad_id, ls, count](TensorNode<T>& self) {
            TensorNode<T>& p = *self.parents[0];
            if (!p.requires_grad) return;
            const T g = self.grad[0] / T(count);
            const T uniform = ls / T(v);
            for (std::size_t i = 0; i < m; ++i) {
                if (targets[i] == pad_id) continue;
                const T* row = p.value.data() + i * v;
                T mx = row[0];
                for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                T se = 0;
                for (std::size_t j = 0; j < v; ++j) se += std::exp(row[j] - mx);
                const std::size_t y = static_cast<std::size_t>(targets[i]);
                for (std::size_t j = 0; j < v; ++j) {
                    const T prob = std::exp(row[j] - mx) / se;
                    const T q = (j == y ? T(1) - ls : T(0)) + uniform;
                    p.grad[i * v + j] += g * (prob - q);
                }
            }
        });
}

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t max_steps = 100000;
    std::size_t warmup_steps = 5000;
    double peak_lr = 5e-5;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    std::size_t validation_interval = 500;
    std::size_t patience = 0;       // validations without improvement; 0 disables
    double label_smoothing = 0.0;
    double grad_clip = 0.0;         // global-norm cap; 0 disables
    std::size_t start_step = 0;     // resume point: first executed step is start_step + 1
    std::string out_dir;            // when set: metrics.jsonl, best.ckpt, last.ckpt

    void validate() const {
        if (batch_size == 0) throw std::runtime_error("train config: batch_size must be positive");
        if (max_steps == 0) throw std::runtime_error("train config: max_steps must be positive");
        if (warmup_steps > max_steps)
            throw std::runtime_error("train config: warmup_steps exceeds max_steps");
        if (!(peak_lr > 0.0)) throw std::runtime_error("train config: peak_lr must be positive");
        if (!(weight_decay >= 0.0))
            throw std::runtime_error("train config: weight_decay must be non-negative");
        if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
            throw std::runtime_error("train config: label_smoothing must be in [0, 1)");
        if (!(grad_clip >= 0.0))
            throw std::runtime_error("train config: grad_clip must be non-negative");
        if (start_step >= max_steps)
            throw std::runtime_error("train config: start_step must be below max_steps");
    }
};

// Linear ramp from 0 to peak_lr over warmup_steps, then linear decay to 0 at
// max_steps. Steps past max_steps get 0; with no warmup the peak applies from
// step 0.
inline double lr_schedule(std::size_t step, const TrainConfig& cfg) {
    if (step >= cfg.max_steps) return 0.0;
    if (step <= cfg.warmup_steps) {
        if (cfg.warmup_steps == 0) return cfg.peak_lr;
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    return cfg.peak_lr * static_cast<double>(cfg.max_steps - step) /
           static_cast<double>(cfg.max_steps - cfg.warmup_steps);
}

// Adam with decoupled weight decay: the decay term multiplies the previous
// parameter value and is not part of the moment estimates. Moments are kept in
// double regardless of the parameter type.
template <typename T>
class AdamW {
public:
    struct Options {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
    };

    AdamW(std::vector<std::pair<std::string, Tensor<T>>> params, Options opts = {})
        : params_(std::move(params)), opts_(opts) {
        if (params_.empty()) throw std::runtime_error("adamw: no parameters");
        if (!(opts_.beta1 >= 0.0 && opts_.beta1 < 1.0) || !(opts_.beta2 >= 0.0 && opts_.beta2 < 1.0))
            throw std::runtime_error("adamw: betas must be in [0, 1)");
        if (!(opts_.eps > 0.0)) throw std::runtime_error("adamw: eps must be positive");
        if (!(opts_.weight_decay >= 0.0))
            throw std::runtime_error("adamw: weight_decay must be non-negative");
        std::size_t total = 0;
        for (const auto& [name, t] : params_) {
            if (!t.requires_grad())
                throw std::runtime_error("adamw: parameter '" + name +
                                         "' does not require gradients");
            total += t.numel();
        }
        m_.assign(total, 0.0);
        v_.assign(total, 0.0);
    }

    void step(double lr) {
        ++t_;
        beta1_pow_ *= opts_.beta1;
        beta2_pow_ *= opts_.beta2;
        const double c1 = 1.0 - beta1_pow_;
        const double c2 = 1.0 - beta2_pow_;
        std::size_t off = 0;
        for (auto& [name, p] : params_) {
            const std::vector<T>& g = p.grad();
            std::vector<T>& w = p.data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                double& m = m_[off + i];
                double& v = v_[off + i];
                m = opts_.beta1 * m + (1.0 - opts_.beta1) * gi;
                v = opts_.beta2 * v + (1.0 - opts_.beta2) * gi * gi;
                const double mhat = m / c1;
                const double vhat = v / c2;
                const double old = static_cast<double>(w[i]);
                w[i] = static_cast<T>(old - lr * (mhat / (std::sqrt(vhat) + opts_.eps) +
                                                  opts_.weight_decay * old));
            }
            off += w.size();
        }
    }

    std::size_t step_count() const { return t_; }
    const Options& options() const { return opts_; }

private:
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    Options opts_;
    std::vector<double> m_, v_;
    std::size_t t_ = 0;
    double beta1_pow_ = 1.0;
    double beta2_pow_ = 1.0;
};

// Scales every gradient by max_norm / norm when the global L2 norm across all
// parameters exceeds max_norm. Returns the pre-clip norm.
template <typename T>
double clip_gradients(std::vector<std::pair<std::string, Tensor<T>>>& params, double max_norm) {
    if (!(max_norm > 0.0)) throw std::runtime_error("clip_gradients: max_norm must be positive");
    double sq = 0.0;
    for (const auto& [name, p] : params)
        for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const T scale = static_cast<T>(max_norm / norm);
        for (auto& [name, p] : params)
            for (T& x : p.node()->grad) x *= scale;
    }
    return norm;
}

// Teacher-forced loss of one padded batch: each row's mean cross entropy,
// combined with weights proportional to the row's non-pad target count, so the
// result is the mean over every non-pad target position in the batch.
template <typename T>
Tensor<T> batch_loss(Model<T>& model, const Batch& batch, double label_smoothing = 0.0) {
    if (batch.src.empty()) throw std::runtime_error("batch_loss: empty batch");
    if (batch.src.size() != batch.tgt_in.size() || batch.src.size() != batch.tgt_out.size())
        throw std::runtime_error("batch_loss: ragged batch");
    std::size_t total = 0;
    for (const auto& row : batch.tgt_out)
        for (int id : row)
            if (id != kPadId) ++total;
    if (total == 0) throw std::runtime_error("batch_loss: every target position is padding");

    Tensor<T> acc;
    for (std::size_t r = 0; r < batch.src.size(); ++r) {
        std::size_t k = 0;
        for (int id : batch.tgt_out[r])
            if (id != kPadId) ++k;
        if (k == 0) continue;
        auto logits = model.forward(batch.src[r], batch.tgt_in[r]);
        auto row_loss = cross_entropy_loss(logits, batch.tgt_out[r], kPadId, label_smoothing);
        auto weighted = row_loss * (T(k) / T(total));
        acc = acc.defined() ? add(acc, weighted) : weighted;
    }
    return acc;
}

// Mean loss per non-pad target position over a batch list, in eval mode with
// the tape disabled. Restores the model's training flag before returning.
template <typename T>
double dataset_loss(Model<T>& model, const std::vector<Batch>& batches,
                    double label_smoothing = 0.0) {
    NoGradGuard ng;
    const bool was_training = model.training();
    model.set_training(false);
    double weighted_sum = 0.0;
    std::size_t total = 0;
    for (const Batch& b : batches) {
        std::size_t k = 0;
        for (const auto& row : b.tgt_out)
            for (int id : row)
                if (id != kPadId) ++k;
        if (k == 0) continue;
        weighted_sum += static_cast<double>(batch_loss(model, b, label_smoothing).item()) *
                        static_cast<double>(k);
        total += k;
    }
    model.set_training(was_training);
    if (total == 0) throw std::runtime_error("dataset_loss: no target tokens");
    return weighted_sum / static_cast<double>(total);
}

struct TrainResult {
    std::size_t steps_run = 0;
    double final_train_loss = std::numeric_limits<double>::quiet_NaN();
    double best_val_loss = std::numeric_limits<double>::infinity();
    bool stopped_early = false;
};

// Called after each optimizer step; returning true ends training.
template <typename T>
using StopHook = std::function<bool(Model<T>&, std::size_t step, double train_loss)>;

namespace detail {
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a + 0x9E3779B97F4A7C15ull * (b + 1);
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}
}  // namespace detail

// Runs steps start_step+1 .. max_steps over epoch-reshuffled padded batches.
// The step index alone determines the batch (epoch e is shuffled with
// seed + e) and the dropout stream (reseeded per step), so a run resumed from
// a weights-only checkpoint at start_step retraces the original trajectory:
// each step's loss is computed before its optimizer update.
//
// Per step: forward/backward on one batch, optional global-norm clipping,
// AdamW at the scheduled rate, then a metrics line
// {step, train_loss, val_loss, lr, seconds}. Every validation_interval steps
// the validation loss (plain cross entropy, eval mode) is computed; the best
// model is checkpointed and `patience` fruitless validations in a row stop
// the run. With out_dir set, the final weights land in last.ckpt.
template <typename T>
TrainResult train_loop(Model<T>& model, const std::vector<ParaphrasePair>& train_pairs,
                       const std::vector<ParaphrasePair>& valid_pairs, const Vocabulary& vocab,
                       const TrainConfig& cfg, std::type_identity_t<StopHook<T>> stop = {}) {
    cfg.validate();
    if (train_pairs.empty()) throw std::runtime_error("train: empty training set");
    const std::size_t max_len = model.config().max_len;

    auto epoch_batches = make_batches(train_pairs, vocab, cfg.batch_size, max_len, cfg.seed);
    if (epoch_batches.empty())
        throw std::runtime_error("train: empty training set after encoding");
    const std::size_t per_epoch = epoch_batches.size();
    std::size_t loaded_epoch = 0;

    const std::vector<Batch> val_batches =
        valid_pairs.empty()
            ? std::vector<Batch>{}
            : make_batches(valid_pairs, vocab, cfg.batch_size, max_len, cfg.seed);

    AdamW<T> opt(model.named_parameters(), {0.9, 0.999, 1e-8, cfg.weight_decay});

    std::ofstream metrics;
    std::filesystem::path out;
    if (!cfg.out_dir.empty()) {
        out = cfg.out_dir;
        std::filesystem::create_directories(out);
        metrics.open(out / "metrics.jsonl", std::ios::app);
        if (!metrics)
            throw std::runtime_error("train: cannot open metrics log in " + cfg.out_dir);
    }

    TrainResult result;
    std::size_t fruitless_validations = 0;
    const auto t0 = std::chrono::steady_clock::now();

    for (std::size_t step = cfg.start_step + 1; step <= cfg.max_steps; ++step) {
        const std::size_t epoch = (step - 1) / per_epoch;
        if (epoch != loaded_epoch) {
            epoch_batches = make_batches(train_pairs, vocab, cfg.batch_size, max_len,
                                         cfg.seed + static_cast<std::uint64_t>(epoch));
            loaded_epoch = epoch;
        }
        const Batch& batch = epoch_batches[(step - 1) % per_epoch];

        model.dropout_rng().seed(
            static_cast<std::uint32_t>(detail::mix_seed(cfg.seed, step)));
        model.set_training(true);
        model.zero_grad();
        auto loss = batch_loss(model, batch, cfg.label_smoothing);
        loss.backward();
        if (cfg.grad_clip > 0.0) {
            auto params = model.named_parameters();
            clip_gradients(params, cfg.grad_clip);
        }
        const double lr = lr_schedule(step, cfg);
        opt.step(lr);

        const double train_loss = static_cast<double>(loss.item());
        result.final_train_loss = train_loss;
        result.steps_run = step - cfg.start_step;

        std::optional<double> val_loss;
        bool plateau = false;
        if (cfg.validation_interval > 0 && !val_batches.empty() &&
            step % cfg.validation_interval == 0) {
            val_loss = dataset_loss(model, val_batches);
            if (*val_loss < result.best_val_loss) {
                result.best_val_loss = *val_loss;
                fruitless_validations = 0;
                if (!out.empty()) save_checkpoint((out / "best.ckpt").string(), model);
            } else if (cfg.patience > 0 && ++fruitless_validations >= cfg.patience) {
                plateau = true;
            }
        }

        if (metrics.is_open()) {
            nlohmann::json line;
            line["step"] = step;
            line["train_loss"] = train_loss;
            if (val_loss)
                line["val_loss"] = *val_loss;
            else
                line["val_loss"] = nullptr;
            line["lr"] = lr;
            line["seconds"] =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            metrics << line.dump() << '\n' << std::flush;
        }

        if (plateau || (stop && stop(model, step, train_loss))) {
            result.stopped_early = true;
            break;
        }
    }

    model.set_training(false);
    if (!out.empty()) save_checkpoint((out / "last.ckpt").string(), model);
    return result;
}

}  // namespace cdnpg
