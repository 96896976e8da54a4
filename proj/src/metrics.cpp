#include "cdnpg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace cdnpg {

namespace {

// Collision-free flat key for an n-gram: each token length-prefixed.
std::string ngram_key(const Tokens& toks, std::size_t start, std::size_t n) {
    std::string key;
    for (std::size_t i = start; i < start + n; ++i) {
        key += std::to_string(toks[i].size());
        key += ':';
        key += toks[i];
        key += '\x1f';
    }
    return key;
}

std::unordered_map<std::string, std::size_t> ngram_counts(const Tokens& toks, std::size_t n) {
    std::unordered_map<std::string, std::size_t> counts;
    if (toks.size() >= n)
        for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[ngram_key(toks, i, n)];
    return counts;
}

struct BleuStats {
    std::vector<std::size_t> matched, total;  // one slot per order
    std::size_t cand_len = 0;
    std::size_t ref_len = 0;

    explicit BleuStats(std::size_t max_order) : matched(max_order, 0), total(max_order, 0) {}
};

void accumulate(BleuStats& stats, const Tokens& cand, const std::vector<Tokens>& refs) {
    if (refs.empty()) throw std::runtime_error("bleu: a candidate has no references");
    const std::size_t max_order = stats.matched.size();
    for (std::size_t n = 1; n <= max_order; ++n) {
        auto cg = ngram_counts(cand, n);
        std::unordered_map<std::string, std::size_t> best;
        for (const Tokens& r : refs)
            for (const auto& [g, c] : ngram_counts(r, n)) {
                auto& slot = best[g];
                slot = std::max(slot, c);
            }
        for (const auto& [g, c] : cg) {
            stats.total[n - 1] += c;
            auto it = best.find(g);
            if (it != best.end()) stats.matched[n - 1] += std::min(c, it->second);
        }
    }
    stats.cand_len += cand.size();
    std::size_t closest = refs[0].size();
    const auto dist = [&](std::size_t len) {
        return len > cand.size() ? len - cand.size() : cand.size() - len;
    };
    for (const Tokens& r : refs)
        if (dist(r.size()) < dist(closest) || (dist(r.size()) == dist(closest) && r.size() < closest))
            closest = r.size();
    stats.ref_len += closest;
}

double score_from(const BleuStats& stats, bool add_one) {
    if (stats.cand_len == 0) return 0.0;
    const std::size_t max_order = stats.matched.size();
    double log_precision = 0.0;
    for (std::size_t n = 1; n <= max_order; ++n) {
        double m = static_cast<double>(stats.matched[n - 1]);
        double t = static_cast<double>(stats.total[n - 1]);
        if (add_one && n >= 2) {
            m += 1.0;
            t += 1.0;
        }
        if (t == 0.0) continue;  // no n-grams of this order exist: vacuous
        if (m == 0.0) return 0.0;
        log_precision += std::log(m / t);
    }
    log_precision /= static_cast<double>(max_order);
    const double bp =
        stats.cand_len >= stats.ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(stats.ref_len) /
                                 static_cast<double>(stats.cand_len));
    return bp * std::exp(log_precision);
}

void check_aligned(std::size_t cands, std::size_t refs, const char* what) {
    if (cands == 0) throw std::runtime_error(std::string(what) + ": empty corpus");
    if (cands != refs)
        throw std::runtime_error(std::string(what) + ": " + std::to_string(cands) +
                                 " candidates but " + std::to_string(refs) + " reference sets");
}

}  // namespace

double corpus_bleu(const std::vector<Tokens>& candidates,
                   const std::vector<std::vector<Tokens>>& references, std::size_t max_order) {
    check_aligned(candidates.size(), references.size(), "bleu");
    if (max_order == 0) throw std::runtime_error("bleu: max_order must be positive");
    BleuStats stats(max_order);
    for (std::size_t i = 0; i < candidates.size(); ++i)
        accumulate(stats, candidates[i], references[i]);
    return score_from(stats, /*add_one=*/false);
}

double sentence_bleu(const Tokens& candidate, const std::vector<Tokens>& references,
                     std::size_t max_order) {
    if (max_order == 0) throw std::runtime_error("bleu: max_order must be positive");
    BleuStats stats(max_order);
    accumulate(stats, candidate, references);
    return score_from(stats, /*add_one=*/true);
}

double ibleu(const std::vector<Tokens>& candidates,
             const std::vector<std::vector<Tokens>>& references,
             const std::vector<Tokens>& sources, double alpha) {
    check_aligned(candidates.size(), references.size(), "paraphrase score");
    if (candidates.size() != sources.size())
        throw std::runtime_error("paraphrase score: " + std::to_string(candidates.size()) +
                                 " candidates but " + std::to_string(sources.size()) + " sources");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::runtime_error("paraphrase score: alpha must be in [0, 1]");
    std::vector<std::vector<Tokens>> source_refs;
    source_refs.reserve(sources.size());
    for (const Tokens& s : sources) source_refs.push_back({s});
    return alpha * corpus_bleu(candidates, references, 4) -
           (1.0 - alpha) * corpus_bleu(candidates, source_refs, 4);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references, double beta) {
    if (references.empty()) throw std::runtime_error("rouge: a candidate has no references");
    if (!(beta > 0.0)) throw std::runtime_error("rouge: beta must be positive");
    double best = 0.0;
    for (const Tokens& ref : references) {
        const std::size_t l = lcs_length(candidate, ref);
        if (l == 0) continue;
        const double recall = static_cast<double>(l) / static_cast<double>(ref.size());
        const double precision = static_cast<double>(l) / static_cast<double>(candidate.size());
        const double b2 = beta * beta;
        best = std::max(best, (1.0 + b2) * recall * precision / (recall + b2 * precision));
    }
    return best;
}

double corpus_rouge_l(const std::vector<Tokens>& candidates,
                      const std::vector<std::vector<Tokens>>& references, double beta) {
    check_aligned(candidates.size(), references.size(), "rouge");
    double sum = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        sum += rouge_l(candidates[i], references[i], beta);
    return sum / static_cast<double>(candidates.size());
}

}  // namespace cdnpg
