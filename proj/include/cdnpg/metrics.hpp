#pragma once

// Generation quality metrics over whitespace-level token sequences: clipped
// n-gram precision scores (corpus-aggregated and per-sentence smoothed), a
// paraphrase score that trades reference overlap against source copying, and
// longest-common-subsequence F scores.

#include <cstddef>
#include <string>
#include <vector>

namespace cdnpg {

using Tokens = std::vector<std::string>;

// Corpus-level geometric mean of clipped n-gram precisions up to max_order,
// unsmoothed, with a brevity penalty against the closest reference length
// (ties choose the shorter reference). Counts are pooled over the whole
// corpus before any ratio is taken. Orders with no candidate n-grams anywhere
// contribute a factor of one; any other order with zero matches gives zero.
double corpus_bleu(const std::vector<Tokens>& candidates,
                   const std::vector<std::vector<Tokens>>& references,
                   std::size_t max_order = 4);

// Single-sentence variant with add-one smoothing on every order above one,
// making short-sequence scores non-degenerate.
double sentence_bleu(const Tokens& candidate, const std::vector<Tokens>& references,
                     std::size_t max_order = 4);

// alpha * score(candidates, references) - (1 - alpha) * score(candidates,
// sources): high only when the output matches the references without copying
// its own input. Both terms are corpus-level order-4 scores.
double ibleu(const std::vector<Tokens>& candidates,
             const std::vector<std::vector<Tokens>>& references,
             const std::vector<Tokens>& sources, double alpha = 0.9);

std::size_t lcs_length(const Tokens& a, const Tokens& b);

// F score of the longest common subsequence with recall weighted by beta
// (F = (1+b^2)RP / (R + b^2 P)); the best score over the references.
double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references,
               double beta = 1.2);

// Mean of rouge_l over aligned candidate/reference-set pairs.
double corpus_rouge_l(const std::vector<Tokens>& candidates,
                      const std::vector<std::vector<Tokens>>& references, double beta = 1.2);

}  // namespace cdnpg
