#pragma once

// Overhead benchmark: times full training steps (forward, backward, optimizer
// update) of the granularity-aware model against an identically-sized and
// identically-initialized model with the granularity machinery disabled.

#include "cdnpg/training.hpp"

#include <algorithm>
#include <chrono>
#include <random>
#include <vector>

namespace cdnpg {

struct BenchOptions {
    std::size_t hidden = 450;
    std::size_t layers = 3;
    std::size_t heads = 9;
    std::size_t seq_len = 20;
    std::size_t batch = 32;
    std::size_t vocab = 8000;
    std::size_t repeats = 5;  // timed steps per model; the median is reported
    std::uint64_t seed = 1;
};

struct BenchResult {
    double ga_seconds = 0.0;       // median seconds per training step
    double vanilla_seconds = 0.0;  // same, granularity disabled
    double ratio = 0.0;            // ga / vanilla
};

namespace detail {

inline Batch synthetic_batch(const BenchOptions& o) {
    std::mt19937_64 rng(o.seed ^ 0xB5297A4D);
    std::uniform_int_distribution<int> tok(kReservedIds, static_cast<int>(o.vocab) - 1);
    Batch b;
    for (std::size_t r = 0; r < o.batch; ++r) {
        std::vector<int> src(o.seq_len), content(o.seq_len - 1);
        for (int& t : src) t = tok(rng);
        for (int& t : content) t = tok(rng);
        std::vector<int> tgt_in{kBosId}, tgt_out;
        tgt_in.insert(tgt_in.end(), content.begin(), content.end());
        tgt_out = content;
        tgt_out.push_back(kEosId);
        b.src.push_back(std::move(src));
        b.tgt_in.push_back(std::move(tgt_in));
        b.tgt_out.push_back(std::move(tgt_out));
    }
    return b;
}

template <typename T>
double median_step_seconds(Model<T>& model, const Batch& batch, std::size_t repeats) {
    AdamW<T> opt(model.named_parameters(), {});
    model.set_training(true);
    auto one_step = [&] {
        model.zero_grad();
        auto loss = batch_loss(model, batch);
        loss.backward();
        opt.step(1e-4);
    };
    one_step();  // warmup: first touch of allocations
    std::vector<double> times;
    times.reserve(repeats);
    for (std::size_t i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        one_step();
        times.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(times.begin(), times.end());
    const std::size_t n = times.size();
    return n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
}

}  // namespace detail

inline BenchResult run_overhead_bench(const BenchOptions& opts) {
    if (opts.repeats == 0) throw std::runtime_error("bench: repeats must be positive");
    if (opts.seq_len < 2) throw std::runtime_error("bench: seq_len must be at least 2");
    ModelConfig cfg;
    cfg.vocab_size = opts.vocab;
    cfg.hidden = opts.hidden;
    cfg.layers = opts.layers;
    cfg.heads = opts.heads;
    cfg.max_len = opts.seq_len;
    cfg.dropout = 0.1;
    cfg.ga_enabled = true;
    cfg.validate();

    ModelConfig vanilla_cfg = cfg;
    vanilla_cfg.ga_enabled = false;

    const Batch batch = detail::synthetic_batch(opts);

    Model<float> ga(cfg, opts.seed);
    Model<float> vanilla(vanilla_cfg, opts.seed);

    BenchResult r;
    r.ga_seconds = detail::median_step_seconds(ga, batch, opts.repeats);
    r.vanilla_seconds = detail::median_step_seconds(vanilla, batch, opts.repeats);
    r.ratio = r.ga_seconds / r.vanilla_seconds;
    return r;
}

}  // namespace cdnpg
