#pragma once

// Decoding: greedy search and beam search over an abstract next-token
// distribution, plus adapters that wrap a model into that interface.
//
// Conventions shared by both searches:
//   - the step function receives BOS followed by the tokens emitted so far and
//     returns one log-probability per vocabulary entry;
//   - PAD and BOS are never emitted (their scores are forced to -infinity);
//   - emitting EOS finishes a hypothesis, and finished hypotheses keep the
//     EOS token;
//   - hypotheses are ranked by log_prob / length^alpha, ties broken by the
//     lexicographically smaller token sequence.

#include "cdnpg/tokens.hpp"
#include "cdnpg/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdnpg {

struct Hypothesis {
    std::vector<int> token_ids;  // excludes BOS; includes EOS when finished
    double log_prob = 0.0;
    bool finished = false;
};

struct DecodeOptions {
    std::size_t beam_size = 8;
    std::size_t max_len = 20;   // cap on emitted tokens, EOS included
    double length_alpha = 1.0;  // 0 ranks by raw log-prob

    void validate() const {
        if (beam_size == 0) throw std::runtime_error("decode: beam_size must be positive");
        if (max_len == 0) throw std::runtime_error("decode: max_len must be positive");
        if (!(length_alpha >= 0.0))
            throw std::runtime_error("decode: length_alpha must be non-negative");
    }
};

// Maps BOS + emitted tokens to log-probabilities over the next token.
using StepFn = std::function<std::vector<double>(const std::vector<int>& prefix)>;

inline double hypothesis_score(const Hypothesis& h, double length_alpha) {
    const auto len = static_cast<double>(std::max<std::size_t>(std::size_t{1}, h.token_ids.size()));
    return h.log_prob / std::pow(len, length_alpha);
}

namespace detail {

inline std::vector<double> next_log_probs(const StepFn& step, const std::vector<int>& tokens) {
    std::vector<int> prefix;
    prefix.reserve(tokens.size() + 1);
    prefix.push_back(kBosId);
    prefix.insert(prefix.end(), tokens.begin(), tokens.end());
    std::vector<double> lp = step(prefix);
    if (lp.size() <= static_cast<std::size_t>(kUnkId))
        throw std::runtime_error("decode: step function returned " + std::to_string(lp.size()) +
                                 " scores; need at least " + std::to_string(kUnkId + 1));
    lp[kPadId] = -std::numeric_limits<double>::infinity();
    lp[kBosId] = -std::numeric_limits<double>::infinity();
    return lp;
}

}  // namespace detail

// Follows the locally best token until EOS or the length cap. Exact score
// ties go to the lowest token id.
inline Hypothesis greedy_decode(const StepFn& step, const DecodeOptions& opts) {
    opts.validate();
    Hypothesis h;
    while (h.token_ids.size() < opts.max_len) {
        const auto lp = detail::next_log_probs(step, h.token_ids);
        std::size_t best = 0;
        double best_lp = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < lp.size(); ++v) {
            if (lp[v] > best_lp) {  // strict: first (lowest) id wins ties
                best_lp = lp[v];
                best = v;
            }
        }
        if (!std::isfinite(best_lp))
            throw std::runtime_error("decode: no viable next token");
        h.token_ids.push_back(static_cast<int>(best));
        h.log_prob += best_lp;
        if (static_cast<int>(best) == kEosId) {
            h.finished = true;
            break;
        }
    }
    return h;
}

// Width-limited best-first search. Each round extends every active hypothesis
// by every viable token, keeps the beam_size best extensions by raw log-prob
// (ties: lexicographically smaller sequence), and retires the ones that
// emitted EOS. Hypotheses still active at the length cap are returned
// unfinished. The final ranking applies the length-normalized score.
inline std::vector<Hypothesis> beam_search(const StepFn& step, const DecodeOptions& opts) {
    opts.validate();
    std::vector<Hypothesis> active{Hypothesis{}};
    std::vector<Hypothesis> pool;

    for (std::size_t depth = 0; depth < opts.max_len && !active.empty(); ++depth) {
        struct Cand {
            std::size_t beam;
            int token;
            double log_prob;
        };
        std::vector<Cand> cands;
        for (std::size_t b = 0; b < active.size(); ++b) {
            const auto lp = detail::next_log_probs(step, active[b].token_ids);
            for (std::size_t v = 0; v < lp.size(); ++v)
                if (std::isfinite(lp[v]))
                    cands.push_back({b, static_cast<int>(v), active[b].log_prob + lp[v]});
        }
        if (cands.empty()) break;

        // lexicographic comparison of (parent tokens + extension) without
        // materializing the extended sequences
        auto lex_less = [&](const Cand& a, const Cand& b) {
            const auto& ta = active[a.beam].token_ids;
            const auto& tb = active[b.beam].token_ids;
            const std::size_t na = ta.size(), nb = tb.size();
            for (std::size_t i = 0; i < std::min(na, nb); ++i)
                if (ta[i] != tb[i]) return ta[i] < tb[i];
            // same depth throughout a round, so prefixes have equal length
            return a.token < b.token;
        };
        std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
            if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
            return lex_less(a, b);
        });
        if (cands.size() > opts.beam_size) cands.resize(opts.beam_size);

        std::vector<Hypothesis> next;
        next.reserve(cands.size());
        for (const Cand& c : cands) {
            Hypothesis h = active[c.beam];
            h.token_ids.push_back(c.token);
            h.log_prob = c.log_prob;
            h.finished = (c.token == kEosId);
            (h.finished ? pool : next).push_back(std::move(h));
        }
        active = std::move(next);
    }
    for (auto& h : active) pool.push_back(std::move(h));

    const double alpha = opts.length_alpha;
    std::sort(pool.begin(), pool.end(), [alpha](const Hypothesis& a, const Hypothesis& b) {
        const double sa = hypothesis_score(a, alpha);
        const double sb = hypothesis_score(b, alpha);
        if (sa != sb) return sa > sb;
        return a.token_ids < b.token_ids;
    });
    if (pool.size() > opts.beam_size) pool.resize(opts.beam_size);
    return pool;
}

// Wraps a model into a StepFn for one source sequence: encodes it once, then
// answers each prefix with the log-softmax of the final decoder position.
// Runs in eval mode with the tape off, restoring the model's training flag
// around every call. The model must outlive the returned function.
template <typename T>
StepFn model_step_fn(Model<T>& model, const std::vector<int>& src) {
    auto enc = std::make_shared<EncoderOutput<T>>();
    {
        NoGradGuard ng;
        const bool was_training = model.training();
        model.set_training(false);
        *enc = model.encode(src);
        model.set_training(was_training);
    }
    return [&model, enc](const std::vector<int>& prefix) {
        NoGradGuard ng;
        const bool was_training = model.training();
        model.set_training(false);
        auto logits = model.logits(model.decode(prefix, *enc));
        model.set_training(was_training);

        const std::size_t v = logits.dim(1);
        const T* row = logits.data().data() + (logits.dim(0) - 1) * v;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double se = 0.0;
        for (std::size_t j = 0; j < v; ++j) se += std::exp(static_cast<double>(row[j]) - mx);
        const double lse = mx + std::log(se);
        std::vector<double> lp(v);
        for (std::size_t j = 0; j < v; ++j) lp[j] = static_cast<double>(row[j]) - lse;
        return lp;
    };
}

// Beam-searches paraphrases of one source sequence. The emitted length is
// capped so that BOS plus the output always fits the model's positional table.
template <typename T>
std::vector<Hypothesis> generate(Model<T>& model, const std::vector<int>& src,
                                 DecodeOptions opts) {
    opts.max_len = std::min(opts.max_len, model.config().max_len - 1);
    opts.validate();
    return beam_search(model_step_fn(model, src), opts);
}

template <typename T>
Hypothesis greedy_generate(Model<T>& model, const std::vector<int>& src, std::size_t max_len) {
    DecodeOptions opts{1, std::min(max_len, model.config().max_len - 1), 1.0};
    opts.validate();
    return greedy_decode(model_step_fn(model, src), opts);
}

}  // namespace cdnpg
