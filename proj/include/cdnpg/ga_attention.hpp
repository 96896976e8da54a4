#pragma once

// Granularity-aware multi-head self-attention.
//
// Each token gets a granularity level z in (0,1) from a learned projection of
// its hidden state (one z per token per layer, shared across heads). Two soft
// masks are derived from z and multiplied onto the post-softmax attention
// weights, so masking only ever attenuates:
//
//   resonance C_ij = (1-z_i) * max(0, 1-(z_i+z_j)) + z_i * min(1, 1-z_i+z_j)
//     -> tokens attend to tokens of similar granularity; soft equality test
//   scope     S_ij = clamp((max(1, N-eps)^(1-z_i) + eps) - |i-j|, 0, 1)
//     -> fine-grained tokens see a narrow window, coarse tokens see everything
//
// Both have exact binary corner cases that the discrete variants below encode
// directly; the continuous forms reduce to them when z is 0/1.

#include "cdnpg/tensor.hpp"

#include <algorithm>
#include <cctype>
#include <random>
#include <string>
#include <vector>

namespace cdnpg {

enum class MaskMode { R, S, RMulS, RPlusS };

inline std::string to_string(MaskMode m) {
    switch (m) {
        case MaskMode::R: return "R";
        case MaskMode::S: return "S";
        case MaskMode::RMulS: return "RxS";
        case MaskMode::RPlusS: return "R+S";
    }
    throw std::runtime_error("mask mode: invalid enum value");
}

inline MaskMode mask_mode_from_string(const std::string& s) {
    std::string k;
    for (char c : s)
        k.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (k == "r" || k == "resonance") return MaskMode::R;
    if (k == "s" || k == "scope") return MaskMode::S;
    if (k == "rxs" || k == "r*s" || k == "rs" || k == "rmuls") return MaskMode::RMulS;
    if (k == "r+s" || k == "rpluss" || k == "ravgs") return MaskMode::RPlusS;
    throw std::runtime_error("mask mode: unknown value '" + s +
                             "' (expected one of R, S, RxS, R+S)");
}

// ---- granularity head ---------------------------------------------------------

// z = sigmoid(H . wg), one scalar per token. h: [N,d], wg: [d,1] -> [N,1].
template <typename T>
Tensor<T> granularity_head(const Tensor<T>& h, const Tensor<T>& wg) {
    if (h.rank() != 2 || wg.rank() != 2 || wg.shape()[1] != 1 || wg.shape()[0] != h.shape()[1])
        throw std::runtime_error("granularity_head: expected h [N,d] and wg [d,1], got " +
                                 shape_str(h.shape()) + " and " + shape_str(wg.shape()));
    return sigmoid(matmul(h, wg));
}

// ---- masks ----------------------------------------------------------------------

// Continuous resonance mask from z [N,1] -> [N,N]; differentiable in z.
template <typename T>
Tensor<T> resonance_mask(const Tensor<T>& z) {
    if (z.rank() != 2 || z.shape()[1] != 1)
        throw std::runtime_error("resonance_mask: z must be [N,1], got " + shape_str(z.shape()));
    auto zi = z;                   // [N,1]
    auto zj = transpose_last(z);   // [1,N]
    auto low = maximum(T(1) - (zi + zj), T(0));
    auto high = minimum((T(1) - zi) + zj, T(1));
    return (T(1) - zi) * low + zi * high;
}

// Continuous scope mask from z [N,1] -> [N,N]; seq_len must equal N.
template <typename T>
Tensor<T> scope_mask(const Tensor<T>& z, std::size_t seq_len, std::size_t epsilon) {
    if (z.rank() != 2 || z.shape()[1] != 1)
        throw std::runtime_error("scope_mask: z must be [N,1], got " + shape_str(z.shape()));
    const std::size_t n = z.shape()[0];
    if (n != seq_len)
        throw std::runtime_error("scope_mask: z has " + std::to_string(n) +
                                 " rows but seq_len is " + std::to_string(seq_len));
    const T base = std::max(T(1), T(seq_len) - T(epsilon));
    auto threshold = pow_base(base, T(1) - z) + T(epsilon);  // [N,1]
    std::vector<T> dv(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            dv[i * n + j] = T(i > j ? i - j : j - i);
    auto dist = Tensor<T>::from_data({n, n}, std::move(dv));
    return minimum(maximum(threshold - dist, T(0)), T(1));
}

namespace detail {
inline void require_binary(const std::vector<double>& z, const char* op) {
    for (double v : z)
        if (v != 0.0 && v != 1.0)
            throw std::runtime_error(std::string(op) + ": z must be binary (0/1), got " +
                                     std::to_string(v));
}
}  // namespace detail

// Discrete corner-case oracle: C_ij = [z_i == z_j]. Binary z only.
inline std::vector<std::vector<double>> resonance_mask_discrete(const std::vector<double>& z) {
    detail::require_binary(z, "resonance_mask_discrete");
    const std::size_t n = z.size();
    std::vector<std::vector<double>> c(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) c[i][j] = z[i] == z[j] ? 1.0 : 0.0;
    return c;
}

// Discrete corner-case oracle: S_ij = [|i-j| < max(1, N-eps)^(1-z_i) + eps].
inline std::vector<std::vector<double>> scope_mask_discrete(const std::vector<double>& z,
                                                            std::size_t epsilon) {
    detail::require_binary(z, "scope_mask_discrete");
    const std::size_t n = z.size();
    const double base = std::max<double>(1.0, double(n) - double(epsilon));
    std::vector<std::vector<double>> s(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const double threshold = (z[i] == 1.0 ? 1.0 : base) + double(epsilon);
        for (std::size_t j = 0; j < n; ++j) {
            const double dist = i > j ? double(i - j) : double(j - i);
            s[i][j] = dist < threshold ? 1.0 : 0.0;
        }
    }
    return s;
}

template <typename T>
Tensor<T> combine_masks(const Tensor<T>& c, const Tensor<T>& s, MaskMode mode) {
    if (c.shape() != s.shape())
        throw std::runtime_error("combine_masks: shape mismatch " + shape_str(c.shape()) +
                                 " vs " + shape_str(s.shape()));
    switch (mode) {
        case MaskMode::R: return c;
        case MaskMode::S: return s;
        case MaskMode::RMulS: return mul(c, s);
        case MaskMode::RPlusS: return (c + s) * T(0.5);  // average of the two masks
    }
    throw std::runtime_error("combine_masks: invalid mode");
}

// Additive causal mask: 0 on and below the diagonal, -1e9 above (applied
// inside the softmax).
template <typename T>
Tensor<T> causal_additive_mask(std::size_t n) {
    std::vector<T> m(n * n, T(0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = T(-1e9);
    return Tensor<T>::from_data({n, n}, std::move(m));
}

// ---- multi-head attention --------------------------------------------------------

template <typename T>
struct GaAttentionParams {
    Tensor<T> wq, wk, wv, wo;  // [d,d], no biases
    Tensor<T> wg;              // [d,1] granularity projection
    std::size_t heads = 1;
    std::size_t epsilon = 2;
};

struct GaAttentionOptions {
    MaskMode mode = MaskMode::RMulS;
    bool causal = false;
    bool renormalize = false;           // divide masked rows by their sums
    bool granularity_enabled = true;    // false -> plain transformer attention
    bool force_identity_masks = false;  // substitute C = S = 1 (diagnostic)
    bool collect_diagnostics = false;   // keep per-head A and masked A
    double dropout = 0.0;               // on final attention weights
    std::mt19937* rng = nullptr;
};

template <typename T>
struct GaAttentionResult {
    Tensor<T> output;         // [N,d]
    Tensor<T> z;              // [N,1]; undefined when granularity disabled
    Tensor<T> combined_mask;  // [N,N] mask as applied; undefined when vanilla
    std::vector<Tensor<T>> attention;         // per-head softmax weights
    std::vector<Tensor<T>> masked_attention;  // per-head weights after masking
};

namespace detail {
template <typename T>
void check_attention_dims(const Tensor<T>& h, const Tensor<T>& wq, std::size_t heads,
                          const char* op) {
    if (h.rank() != 2)
        throw std::runtime_error(std::string(op) + ": input must be [N,d], got " +
                                 shape_str(h.shape()));
    const std::size_t d = h.shape()[1];
    if (wq.shape() != Shape{d, d})
        throw std::runtime_error(std::string(op) + ": projection shape " + shape_str(wq.shape()) +
                                 " does not match model dim " + std::to_string(d));
    if (heads == 0 || d % heads != 0)
        throw std::runtime_error(std::string(op) + ": model dim " + std::to_string(d) +
                                 " must be divisible by head count " + std::to_string(heads));
}
}  // namespace detail

// Self-attention with optional granularity masking. The combined mask is built
// once per call from z and multiplied onto every head's post-softmax weights.
// key_additive_mask ([1,N], 0 or -1e9) removes padded keys inside the softmax.
template <typename T>
GaAttentionResult<T> ga_self_attention(const Tensor<T>& h, const GaAttentionParams<T>& p,
                                       const GaAttentionOptions& opt,
                                       const Tensor<T>* key_additive_mask = nullptr) {
    detail::check_attention_dims(h, p.wq, p.heads, "ga_self_attention");
    const std::size_t n = h.shape()[0];
    const std::size_t d = h.shape()[1];
    const std::size_t dh = d / p.heads;

    GaAttentionResult<T> result;
    Tensor<T> mask;
    const bool apply_mask = opt.force_identity_masks || opt.granularity_enabled;
    if (opt.granularity_enabled) result.z = granularity_head(h, p.wg);
    if (opt.force_identity_masks) {
        mask = Tensor<T>::ones({n, n});
    } else if (opt.granularity_enabled) {
        switch (opt.mode) {
            case MaskMode::R: mask = resonance_mask(result.z); break;
            case MaskMode::S: mask = scope_mask(result.z, n, p.epsilon); break;
            case MaskMode::RMulS:
                mask = combine_masks(resonance_mask(result.z),
                                     scope_mask(result.z, n, p.epsilon), opt.mode);
                break;
            case MaskMode::RPlusS:
                mask = combine_masks(resonance_mask(result.z),
                                     scope_mask(result.z, n, p.epsilon), opt.mode);
                break;
        }
    }
    if (apply_mask) result.combined_mask = mask;

    auto q = matmul(h, p.wq);
    auto k = matmul(h, p.wk);
    auto v = matmul(h, p.wv);
    const T scale = T(1) / std::sqrt(T(dh));
    Tensor<T> causal;
    if (opt.causal) causal = causal_additive_mask<T>(n);

    std::vector<Tensor<T>> contexts;
    contexts.reserve(p.heads);
    for (std::size_t a = 0; a < p.heads; ++a) {
        auto qa = slice_cols(q, a * dh, dh);
        auto ka = slice_cols(k, a * dh, dh);
        auto va = slice_cols(v, a * dh, dh);
        auto scores = matmul(qa, transpose_last(ka)) * scale;
        if (opt.causal) scores = scores + causal;
        if (key_additive_mask) scores = scores + *key_additive_mask;
        auto attn = softmax(scores, -1);
        auto weights = apply_mask ? mul(attn, mask) : attn;
        if (opt.collect_diagnostics) {
            result.attention.push_back(attn);
            result.masked_attention.push_back(weights);
        }
        if (opt.renormalize) weights = div(weights, sum_axis(weights, -1, true));
        if (opt.dropout > 0.0) {
            if (!opt.rng)
                throw std::runtime_error("ga_self_attention: dropout requires an rng");
            weights = dropout(weights, opt.dropout, *opt.rng);
        }
        contexts.push_back(matmul(weights, va));
    }
    result.output = matmul(concat_cols(contexts), p.wo);
    return result;
}

// Plain multi-head cross-attention (queries from the decoder, keys/values from
// the encoder). Granularity masks are never applied here.
template <typename T>
struct CrossAttentionParams {
    Tensor<T> wq, wk, wv, wo;  // [d,d]
    std::size_t heads = 1;
};

template <typename T>
Tensor<T> multi_head_cross_attention(const Tensor<T>& q_in, const Tensor<T>& kv_in,
                                     const CrossAttentionParams<T>& p,
                                     const Tensor<T>* key_additive_mask = nullptr,
                                     double dropout_p = 0.0, std::mt19937* rng = nullptr) {
    detail::check_attention_dims(q_in, p.wq, p.heads, "cross_attention");
    if (kv_in.rank() != 2 || kv_in.shape()[1] != q_in.shape()[1])
        throw std::runtime_error("cross_attention: query dim " + shape_str(q_in.shape()) +
                                 " and key/value dim " + shape_str(kv_in.shape()) + " disagree");
    const std::size_t d = q_in.shape()[1];
    const std::size_t dh = d / p.heads;

    auto q = matmul(q_in, p.wq);
    auto k = matmul(kv_in, p.wk);
    auto v = matmul(kv_in, p.wv);
    const T scale = T(1) / std::sqrt(T(dh));

    std::vector<Tensor<T>> contexts;
    contexts.reserve(p.heads);
    for (std::size_t a = 0; a < p.heads; ++a) {
        auto qa = slice_cols(q, a * dh, dh);
        auto ka = slice_cols(k, a * dh, dh);
        auto va = slice_cols(v, a * dh, dh);
        auto scores = matmul(qa, transpose_last(ka)) * scale;
        if (key_additive_mask) scores = scores + *key_additive_mask;
        auto weights = softmax(scores, -1);
        if (dropout_p > 0.0) {
            if (!rng) throw std::runtime_error("cross_attention: dropout requires an rng");
            weights = dropout(weights, dropout_p, *rng);
        }
        contexts.push_back(matmul(weights, va));
    }
    return matmul(concat_cols(contexts), p.wo);
}

}  // namespace cdnpg
