#include "cdnpg/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <stdexcept>

namespace cdnpg {

namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }
bool is_punct(unsigned char c) { return std::ispunct(c) != 0; }

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    for (unsigned char c : text) {
        if (c < 0x80 && is_space(c)) {
            flush();
        } else if (c < 0x80 && is_punct(c)) {
            flush();
            out.emplace_back(1, static_cast<char>(c));
        } else {
            word.push_back(c < 0x80 ? static_cast<char>(std::tolower(c))
                                    : static_cast<char>(c));
        }
    }
    flush();
    return out;
}

std::string detokenize(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

// ---- Vocabulary ---------------------------------------------------------------------

Vocabulary::Vocabulary() {
    add(kPadToken);
    add(kBosToken);
    add(kEosToken);
    add(kUnkToken);
}

void Vocabulary::add(const std::string& token) {
    if (!token_to_id_.emplace(token, static_cast<int>(id_to_token_.size())).second)
        throw std::runtime_error("vocabulary: duplicate token '" + token + "'");
    id_to_token_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& docs,
                             std::size_t max_size, std::size_t min_freq) {
    std::unordered_map<std::string, std::size_t> freq;
    for (const auto& doc : docs)
        for (const auto& tok : doc) ++freq[tok];
    if (freq.empty()) throw std::runtime_error("vocabulary: empty corpus");

    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocabulary v;
    for (const auto& [tok, count] : ranked) {
        if (count < min_freq) break;  // ranked by frequency; the rest are rarer
        if (max_size != 0 && v.size() >= max_size) break;
        v.add(tok);
    }
    return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("vocabulary: cannot open '" + path + "'");
    Vocabulary v;
    std::string line;
    while (std::getline(f, line)) {
        line = strip_cr(line);
        if (line.empty()) continue;
        v.add(line);
    }
    return v;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("vocabulary: cannot open '" + path + "' for writing");
    for (std::size_t i = kReservedIds; i < id_to_token_.size(); ++i)
        f << id_to_token_[i] << '\n';
    if (!f) throw std::runtime_error("vocabulary: write to '" + path + "' failed");
}

bool Vocabulary::contains(const std::string& token) const {
    return token_to_id_.count(token) != 0;
}

int Vocabulary::id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
        throw std::runtime_error("vocabulary: id " + std::to_string(id) +
                                 " out of range [0, " + std::to_string(id_to_token_.size()) +
                                 ")");
    return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
}

// ---- dataset loading ------------------------------------------------------------------

LoadResult load_dataset(const std::string& path, DataFormat format) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load: cannot open '" + path + "'");

    LoadResult r;
    std::string line;
    while (std::getline(f, line)) {
        line = strip_cr(line);
        if (trim(line).empty()) continue;
        ++r.total;

        std::string source, target;
        bool ok = false;
        if (format == DataFormat::Tsv) {
            const auto tab = line.find('\t');
            if (tab != std::string::npos) {
                source = trim(line.substr(0, tab));
                target = trim(line.substr(tab + 1));
                ok = !source.empty() && !target.empty();
            }
        } else {
            const auto j = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
            if (j.is_object() && j.contains("source") && j.contains("target") &&
                j["source"].is_string() && j["target"].is_string()) {
                source = trim(j["source"].get<std::string>());
                target = trim(j["target"].get<std::string>());
                ok = !source.empty() && !target.empty();
            }
        }
        if (ok)
            r.pairs.push_back({std::move(source), std::move(target), ""});
        else
            ++r.skipped;
    }
    if (r.total > 0 && r.skipped * 10 > r.total)
        throw std::runtime_error("load: " + std::to_string(r.skipped) + " of " +
                                 std::to_string(r.total) + " lines malformed in '" + path +
                                 "'");
    return r;
}

SplitResult seeded_split(std::vector<ParaphrasePair> pairs, double train_frac,
                         double valid_frac, std::uint64_t seed) {
    if (train_frac < 0 || valid_frac < 0 || train_frac + valid_frac > 1.0)
        throw std::runtime_error("split: fractions must be non-negative and sum to at most 1");
    std::mt19937_64 rng(seed);
    std::shuffle(pairs.begin(), pairs.end(), rng);

    const std::size_t n = pairs.size();
    const auto n_train = static_cast<std::size_t>(train_frac * static_cast<double>(n));
    const auto n_valid = static_cast<std::size_t>(valid_frac * static_cast<double>(n));

    SplitResult s;
    s.train.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.valid.assign(pairs.begin() + static_cast<std::ptrdiff_t>(n_train),
                   pairs.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
    s.test.assign(pairs.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), pairs.end());
    for (auto& p : s.train) p.split = "train";
    for (auto& p : s.valid) p.split = "valid";
    for (auto& p : s.test) p.split = "test";
    return s;
}

// ---- batching ---------------------------------------------------------------------------

std::vector<Batch> make_batches(const std::vector<ParaphrasePair>& pairs, const Vocabulary& v,
                                std::size_t batch_size, std::size_t max_len,
                                std::uint64_t seed) {
    if (batch_size == 0) throw std::runtime_error("batch: batch_size must be positive");
    if (max_len < 2) throw std::runtime_error("batch: max_len must be at least 2");

    struct Row {
        std::vector<int> src, tgt_in, tgt_out;
    };
    std::vector<Row> rows;
    rows.reserve(pairs.size());
    for (const auto& p : pairs) {
        auto src = v.encode(tokenize(p.source));
        auto tgt = v.encode(tokenize(p.target));
        if (src.empty() || tgt.empty()) continue;
        if (src.size() > max_len) src.resize(max_len);
        if (tgt.size() > max_len - 1) tgt.resize(max_len - 1);  // leave room for EOS

        Row r;
        r.src = std::move(src);
        r.tgt_in.reserve(tgt.size() + 1);
        r.tgt_in.push_back(kBosId);
        r.tgt_in.insert(r.tgt_in.end(), tgt.begin(), tgt.end());
        r.tgt_out = std::move(tgt);
        r.tgt_out.push_back(kEosId);
        rows.push_back(std::move(r));
    }

    std::mt19937_64 rng(seed);
    std::shuffle(rows.begin(), rows.end(), rng);

    auto pad_to = [](std::vector<std::vector<int>>& m) {
        std::size_t widest = 0;
        for (const auto& row : m) widest = std::max(widest, row.size());
        for (auto& row : m) row.resize(widest, kPadId);
    };

    std::vector<Batch> out;
    for (std::size_t at = 0; at < rows.size(); at += batch_size) {
        const std::size_t end = std::min(rows.size(), at + batch_size);
        Batch b;
        for (std::size_t i = at; i < end; ++i) {
            b.src.push_back(std::move(rows[i].src));
            b.tgt_in.push_back(std::move(rows[i].tgt_in));
            b.tgt_out.push_back(std::move(rows[i].tgt_out));
        }
        pad_to(b.src);
        pad_to(b.tgt_in);
        pad_to(b.tgt_out);
        out.push_back(std::move(b));
    }
    return out;
}

// ---- wordpiece --------------------------------------------------------------------------

std::vector<std::string> wordpiece_tokenize(const std::string& text, const Vocabulary& v) {
    std::vector<std::string> out;
    for (const auto& word : tokenize(text)) {
        std::vector<std::string> pieces;
        std::size_t at = 0;
        bool failed = false;
        while (at < word.size()) {
            const std::string prefix = at == 0 ? "" : "##";
            std::size_t take = word.size() - at;
            for (; take > 0; --take) {
                if (v.contains(prefix + word.substr(at, take))) break;
            }
            if (take == 0) {
                failed = true;
                break;
            }
            pieces.push_back(prefix + word.substr(at, take));
            at += take;
        }
        if (failed)
            out.emplace_back(kUnkToken);
        else
            out.insert(out.end(), pieces.begin(), pieces.end());
    }
    return out;
}

}  // namespace cdnpg
