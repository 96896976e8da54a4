#pragma once

// Corpus ingestion: rule-based tokenization, vocabulary construction and
// persistence, TSV/JSONL loading, seeded splitting, and padded batching.

#include "cdnpg/tokens.hpp"

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace cdnpg {

// Lowercases ASCII letters and splits on whitespace; every punctuation
// character becomes its own token. Bytes outside ASCII pass through unchanged
// inside their word. Deterministic; empty text gives an empty list.
std::vector<std::string> tokenize(const std::string& text);

// Joins tokens with single spaces (the inverse of tokenize up to whitespace).
std::string detokenize(const std::vector<std::string>& tokens);

class Vocabulary {
public:
    // Reserved entries only: <pad>, <bos>, <eos>, <unk>.
    Vocabulary();

    // Keeps the most frequent tokens (ties broken lexicographically), with
    // max_size capping the total size including the four reserved ids
    // (0 = unlimited) and min_freq dropping rare tokens.
    static Vocabulary build(const std::vector<std::vector<std::string>>& docs,
                            std::size_t max_size = 0, std::size_t min_freq = 1);

    // One token per line; line number = id - 4. Reserved ids are implicit.
    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;

    std::size_t size() const { return id_to_token_.size(); }
    bool contains(const std::string& token) const;
    int id(const std::string& token) const;  // <unk> id when absent
    const std::string& token(int id) const;  // throws when out of range

    std::vector<int> encode(const std::vector<std::string>& tokens) const;
    std::vector<std::string> decode(const std::vector<int>& ids) const;

private:
    void add(const std::string& token);
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

struct ParaphrasePair {
    std::string source;
    std::string target;
    std::string split;  // optional tag: train/valid/test
};

enum class DataFormat { Tsv, Jsonl };

struct LoadResult {
    std::vector<ParaphrasePair> pairs;
    std::size_t total = 0;    // data lines seen (blank lines ignored)
    std::size_t skipped = 0;  // malformed lines
};

// TSV: source<TAB>target, split at the first tab. JSONL: one object per line
// with string fields "source" and "target"; other fields are ignored. Lines
// that fail to parse or have an empty side are skipped and counted; more than
// 10% such lines is an error.
LoadResult load_dataset(const std::string& path, DataFormat format);

struct SplitResult {
    std::vector<ParaphrasePair> train, valid, test;
};

// Shuffles with the seed and partitions by fraction; the remainder after
// train_frac and valid_frac becomes the test split.
SplitResult seeded_split(std::vector<ParaphrasePair> pairs, double train_frac,
                         double valid_frac, std::uint64_t seed);

struct Batch {
    std::vector<std::vector<int>> src;      // truncated to max_len, padded
    std::vector<std::vector<int>> tgt_in;   // BOS + content (content capped at max_len-1)
    std::vector<std::vector<int>> tgt_out;  // content + EOS, aligned with tgt_in
};

// Tokenizes, encodes, truncates, wraps targets in BOS...EOS (truncating first
// so EOS always survives), pads each batch to its own maxima, and chunks the
// seeded shuffle into batch_size groups. Pairs whose either side tokenizes to
// nothing are dropped.
std::vector<Batch> make_batches(const std::vector<ParaphrasePair>& pairs, const Vocabulary& v,
                                std::size_t batch_size, std::size_t max_len,
                                std::uint64_t seed);

// Greedy longest-match-first subword splitting against a vocabulary whose
// entries use the "##" continuation convention. Runs after tokenize(); a word
// with no decomposition becomes a single <unk>.
std::vector<std::string> wordpiece_tokenize(const std::string& text, const Vocabulary& v);

}  // namespace cdnpg
