#pragma once

// Post-norm encoder-decoder transformer whose self-attention carries the
// granularity masks from ga_attention.hpp. The model processes one sequence
// at a time ([N,d] activations); batching is done by the training loop, which
// combines per-sequence losses into one scalar graph.

#include "cdnpg/ga_attention.hpp"
#include "cdnpg/tokens.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cdnpg {

// ---- configuration ----------------------------------------------------------------

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t hidden = 450;
    std::size_t layers = 3;
    std::size_t heads = 9;
    std::size_t ffn_dim = 0;  // 0 selects 4 * hidden
    std::size_t max_len = 20;
    double dropout = 0.1;
    MaskMode mask_mode = MaskMode::RMulS;
    std::size_t epsilon = 2;
    bool renormalize = false;
    bool ga_enabled = true;

    std::size_t ffn() const { return ffn_dim == 0 ? 4 * hidden : ffn_dim; }

    void validate() const {
        if (vocab_size < static_cast<std::size_t>(kReservedIds) + 1)
            throw std::runtime_error("config: vocab_size must be at least " +
                                     std::to_string(kReservedIds + 1) + ", got " +
                                     std::to_string(vocab_size));
        if (hidden == 0 || layers == 0 || heads == 0 || max_len == 0)
            throw std::runtime_error(
                "config: hidden, layers, heads, and max_len must all be positive");
        if (hidden % heads != 0)
            throw std::runtime_error("config: hidden (" + std::to_string(hidden) +
                                     ") must be divisible by heads (" + std::to_string(heads) +
                                     ")");
        if (!(dropout >= 0.0) || dropout >= 1.0)
            throw std::runtime_error("config: dropout must be in [0, 1), got " +
                                     std::to_string(dropout));
    }
};

// ---- positional encoding ----------------------------------------------------------

// Fixed sinusoidal table: channel pairs (2k, 2k+1) hold sin/cos of
// pos / 10000^(2k/d). An odd final channel holds the unpaired sine.
template <typename T>
Tensor<T> sinusoidal_positions(std::size_t max_len, std::size_t d) {
    std::vector<T> v(max_len * d);
    for (std::size_t pos = 0; pos < max_len; ++pos)
        for (std::size_t i = 0; i < d; ++i) {
            const double angle = static_cast<double>(pos) /
                                 std::pow(10000.0, static_cast<double>(2 * (i / 2)) /
                                                       static_cast<double>(d));
            v[pos * d + i] =
                static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    return Tensor<T>::from_data({max_len, d}, std::move(v));
}

// ---- model ------------------------------------------------------------------------

template <typename T>
struct EncoderOutput {
    Tensor<T> hidden;                   // [n, d]
    std::vector<Tensor<T>> layer_z;     // per layer [n, 1]; empty when granularity is off
    std::optional<Tensor<T>> key_mask;  // [1, n] additive pad mask when pads are present
    std::size_t length = 0;
};

template <typename T>
class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        const std::size_t d = cfg_.hidden;
        const std::size_t f = cfg_.ffn();

        embedding_ = normal({cfg_.vocab_size, d}, rng);
        encoder_.reserve(cfg_.layers);
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            EncoderLayer L;
            init_self_attention(L.self, d, rng);
            L.ln1_g = Tensor<T>::ones({d}, true);
            L.ln1_b = Tensor<T>::zeros({d}, true);
            L.w1 = normal({d, f}, rng);
            L.b1 = Tensor<T>::zeros({f}, true);
            L.w2 = normal({f, d}, rng);
            L.b2 = Tensor<T>::zeros({d}, true);
            L.ln2_g = Tensor<T>::ones({d}, true);
            L.ln2_b = Tensor<T>::zeros({d}, true);
            encoder_.push_back(std::move(L));
        }
        decoder_.reserve(cfg_.layers);
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            DecoderLayer L;
            init_self_attention(L.self, d, rng);
            L.ln1_g = Tensor<T>::ones({d}, true);
            L.ln1_b = Tensor<T>::zeros({d}, true);
            L.cross.wq = normal({d, d}, rng);
            L.cross.wk = normal({d, d}, rng);
            L.cross.wv = normal({d, d}, rng);
            L.cross.wo = normal({d, d}, rng);
            L.cross.heads = cfg_.heads;
            L.ln2_g = Tensor<T>::ones({d}, true);
            L.ln2_b = Tensor<T>::zeros({d}, true);
            L.w1 = normal({d, f}, rng);
            L.b1 = Tensor<T>::zeros({f}, true);
            L.w2 = normal({f, d}, rng);
            L.b2 = Tensor<T>::zeros({d}, true);
            L.ln3_g = Tensor<T>::ones({d}, true);
            L.ln3_b = Tensor<T>::zeros({d}, true);
            decoder_.push_back(std::move(L));
        }
        out_w_ = normal({d, cfg_.vocab_size}, rng);
        out_b_ = Tensor<T>::zeros({cfg_.vocab_size}, true);

        positions_ = sinusoidal_positions<T>(cfg_.max_len, d);
        scale_ = static_cast<T>(std::sqrt(static_cast<double>(d)));
        dropout_rng_.seed(static_cast<std::uint32_t>(seed ^ (seed >> 32) ^ 0x9E3779B9u));
    }

    const ModelConfig& config() const { return cfg_; }
    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }

    // Diagnostic switch: run the granularity path but substitute all-ones masks.
    void set_force_identity_masks(bool on) { force_identity_ = on; }

    std::mt19937& dropout_rng() { return dropout_rng_; }

    // Token embedding scaled by sqrt(d) plus the positional table.
    Tensor<T> embed_sequence(const std::vector<int>& ids) const {
        if (ids.empty()) throw std::runtime_error("model: empty token sequence");
        if (ids.size() > cfg_.max_len)
            throw std::runtime_error("model: sequence length " + std::to_string(ids.size()) +
                                     " exceeds max_len " + std::to_string(cfg_.max_len));
        auto e = embedding_lookup(embedding_, ids) * scale_;
        const std::size_t d = cfg_.hidden;
        std::vector<T> pos(ids.size() * d);
        std::copy(positions_.data().begin(), positions_.data().begin() + pos.size(),
                  pos.begin());
        return e + Tensor<T>::from_data({ids.size(), d}, std::move(pos));
    }

    EncoderOutput<T> encode(const std::vector<int>& src) {
        EncoderOutput<T> out;
        out.length = src.size();
        auto x = embed_sequence(src);
        out.key_mask = pad_key_mask(src);
        const Tensor<T>* km = out.key_mask ? &*out.key_mask : nullptr;
        for (auto& L : encoder_) {
            auto res = ga_self_attention(x, L.self, attention_options(false), km);
            if (cfg_.ga_enabled) out.layer_z.push_back(res.z);
            x = layer_norm(add(x, res.output), L.ln1_g, L.ln1_b);
            x = layer_norm(add(x, ffn_forward(x, L.w1, L.b1, L.w2, L.b2)), L.ln2_g, L.ln2_b);
        }
        out.hidden = x;
        return out;
    }

    Tensor<T> decode(const std::vector<int>& tgt_in, const EncoderOutput<T>& enc) {
        if (!enc.hidden.defined())
            throw std::runtime_error("model: decode called with an empty encoder output");
        auto x = embed_sequence(tgt_in);
        const Tensor<T>* km = enc.key_mask ? &*enc.key_mask : nullptr;
        const double p = training_ ? cfg_.dropout : 0.0;
        for (auto& L : decoder_) {
            auto res = ga_self_attention(x, L.self, attention_options(true));
            x = layer_norm(add(x, res.output), L.ln1_g, L.ln1_b);
            auto cr = multi_head_cross_attention(x, enc.hidden, L.cross, km, p, &dropout_rng_);
            x = layer_norm(add(x, cr), L.ln2_g, L.ln2_b);
            x = layer_norm(add(x, ffn_forward(x, L.w1, L.b1, L.w2, L.b2)), L.ln3_g, L.ln3_b);
        }
        return x;
    }

    Tensor<T> logits(const Tensor<T>& dec_hidden) const {
        return add(matmul(dec_hidden, out_w_), out_b_);
    }

    Tensor<T> forward(const std::vector<int>& src, const std::vector<int>& tgt_in) {
        auto enc = encode(src);
        return logits(decode(tgt_in, enc));
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        out.emplace_back("embedding", embedding_);
        for (std::size_t l = 0; l < encoder_.size(); ++l) {
            const auto& L = encoder_[l];
            const std::string p = "encoder." + std::to_string(l) + ".";
            out.emplace_back(p + "self.wq", L.self.wq);
            out.emplace_back(p + "self.wk", L.self.wk);
            out.emplace_back(p + "self.wv", L.self.wv);
            out.emplace_back(p + "self.wo", L.self.wo);
            out.emplace_back(p + "self.wg", L.self.wg);
            out.emplace_back(p + "ln1.gain", L.ln1_g);
            out.emplace_back(p + "ln1.bias", L.ln1_b);
            out.emplace_back(p + "ffn.w1", L.w1);
            out.emplace_back(p + "ffn.b1", L.b1);
            out.emplace_back(p + "ffn.w2", L.w2);
            out.emplace_back(p + "ffn.b2", L.b2);
            out.emplace_back(p + "ln2.gain", L.ln2_g);
            out.emplace_back(p + "ln2.bias", L.ln2_b);
        }
        for (std::size_t l = 0; l < decoder_.size(); ++l) {
            const auto& L = decoder_[l];
            const std::string p = "decoder." + std::to_string(l) + ".";
            out.emplace_back(p + "self.wq", L.self.wq);
            out.emplace_back(p + "self.wk", L.self.wk);
            out.emplace_back(p + "self.wv", L.self.wv);
            out.emplace_back(p + "self.wo", L.self.wo);
            out.emplace_back(p + "self.wg", L.self.wg);
            out.emplace_back(p + "ln1.gain", L.ln1_g);
            out.emplace_back(p + "ln1.bias", L.ln1_b);
            out.emplace_back(p + "cross.wq", L.cross.wq);
            out.emplace_back(p + "cross.wk", L.cross.wk);
            out.emplace_back(p + "cross.wv", L.cross.wv);
            out.emplace_back(p + "cross.wo", L.cross.wo);
            out.emplace_back(p + "ln2.gain", L.ln2_g);
            out.emplace_back(p + "ln2.bias", L.ln2_b);
            out.emplace_back(p + "ffn.w1", L.w1);
            out.emplace_back(p + "ffn.b1", L.b1);
            out.emplace_back(p + "ffn.w2", L.w2);
            out.emplace_back(p + "ffn.b2", L.b2);
            out.emplace_back(p + "ln3.gain", L.ln3_g);
            out.emplace_back(p + "ln3.bias", L.ln3_b);
        }
        out.emplace_back("output.w", out_w_);
        out.emplace_back("output.b", out_b_);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_parameters()) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : named_parameters()) t.zero_grad();
    }

private:
    struct EncoderLayer {
        GaAttentionParams<T> self;
        Tensor<T> ln1_g, ln1_b;
        Tensor<T> w1, b1, w2, b2;
        Tensor<T> ln2_g, ln2_b;
    };
    struct DecoderLayer {
        GaAttentionParams<T> self;
        Tensor<T> ln1_g, ln1_b;
        CrossAttentionParams<T> cross;
        Tensor<T> ln2_g, ln2_b;
        Tensor<T> w1, b1, w2, b2;
        Tensor<T> ln3_g, ln3_b;
    };

    static Tensor<T> normal(Shape s, std::mt19937_64& rng) {
        std::normal_distribution<double> dist(0.0, 0.02);
        std::vector<T> v(shape_numel(s));
        for (auto& x : v) x = static_cast<T>(dist(rng));
        return Tensor<T>::from_data(std::move(s), std::move(v), /*requires_grad=*/true);
    }

    // The granularity projection is always allocated and drawn so that models
    // built from the same seed line up parameter-for-parameter whether or not
    // the masks are enabled.
    void init_self_attention(GaAttentionParams<T>& p, std::size_t d, std::mt19937_64& rng) {
        p.wq = normal({d, d}, rng);
        p.wk = normal({d, d}, rng);
        p.wv = normal({d, d}, rng);
        p.wo = normal({d, d}, rng);
        p.wg = normal({d, 1}, rng);
        p.heads = cfg_.heads;
        p.epsilon = cfg_.epsilon;
    }

    GaAttentionOptions attention_options(bool causal) {
        GaAttentionOptions o;
        o.mode = cfg_.mask_mode;
        o.causal = causal;
        o.renormalize = cfg_.renormalize;
        o.granularity_enabled = cfg_.ga_enabled;
        o.force_identity_masks = force_identity_;
        o.dropout = training_ ? cfg_.dropout : 0.0;
        o.rng = &dropout_rng_;
        return o;
    }

    Tensor<T> ffn_forward(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1,
                          const Tensor<T>& w2, const Tensor<T>& b2) {
        auto h = relu(add(matmul(x, w1), b1));
        if (training_ && cfg_.dropout > 0.0) h = dropout(h, cfg_.dropout, dropout_rng_);
        return add(matmul(h, w2), b2);
    }

    std::optional<Tensor<T>> pad_key_mask(const std::vector<int>& ids) const {
        bool any = false;
        for (int id : ids) any |= (id == kPadId);
        if (!any) return std::nullopt;
        std::vector<T> v(ids.size(), T(0));
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == kPadId) v[i] = T(-1e9);
        return Tensor<T>::from_data({1, ids.size()}, std::move(v));
    }

    ModelConfig cfg_;
    Tensor<T> embedding_;
    std::vector<EncoderLayer> encoder_;
    std::vector<DecoderLayer> decoder_;
    Tensor<T> out_w_, out_b_;
    Tensor<T> positions_;
    T scale_ = T(1);
    bool training_ = false;
    bool force_identity_ = false;
    std::mt19937 dropout_rng_;
};

}  // namespace cdnpg
