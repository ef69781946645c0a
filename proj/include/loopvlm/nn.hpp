#pragma once

// Decoder block shared by the vision encoder and the language backbone:
// pre-rmsnorm -> multi-head attention -> residual -> pre-rmsnorm -> GELU MLP
// (4h) -> residual. Learned absolute position embeddings are added by the
// callers, never here.

#include <vector>

#include "loopvlm/tensor.hpp"

namespace loopvlm {

template <class S>
struct AffineParams {
    Tensor<S> w;
    Tensor<S> b;
};

template <class S>
AffineParams<S> make_affine(int in, int out, Rng& rng, double w_std) {
    AffineParams<S> p;
    p.w = Tensor<S>::randn({in, out}, rng, w_std);
    p.b = Tensor<S>::zeros({out});
    return p;
}

template <class S>
Tensor<S> apply_affine(const Tensor<S>& x, const AffineParams<S>& p) {
    return affine(x, p.w, p.b);
}

template <class S>
struct BlockParams {
    Tensor<S> attn_norm_gain;
    AffineParams<S> wq, wk, wv, wo;
    Tensor<S> mlp_norm_gain;
    AffineParams<S> mlp_in, mlp_out;
};

template <class S>
BlockParams<S> make_block(int h, Rng& rng, double w_std = 0.02) {
    BlockParams<S> p;
    p.attn_norm_gain = Tensor<S>::full({h}, S(1));
    p.wq = make_affine<S>(h, h, rng, w_std);
    p.wk = make_affine<S>(h, h, rng, w_std);
    p.wv = make_affine<S>(h, h, rng, w_std);
    p.wo = make_affine<S>(h, h, rng, w_std);
    p.mlp_norm_gain = Tensor<S>::full({h}, S(1));
    p.mlp_in = make_affine<S>(h, 4 * h, rng, w_std);
    p.mlp_out = make_affine<S>(4 * h, h, rng, w_std);
    return p;
}

// Optional capture of the full pre-head-split key/value matrices (n x h),
// used by prefill to populate the per-iteration cache.
template <class S>
struct KvCapture {
    std::vector<S> k;
    std::vector<S> v;
};

template <class S>
Tensor<S> transformer_block(const Tensor<S>& x, const BlockParams<S>& p, int heads, bool causal,
                            bool probe_attention_identity = false, KvCapture<S>* capture = nullptr) {
    Tensor<S> attn_out;
    Tensor<S> xn = rmsnorm(x, p.attn_norm_gain);
    if (probe_attention_identity) {
        // probe mode keeps the attention sublayer strictly per-token
        attn_out = xn;
    } else {
        Tensor<S> q = apply_affine(xn, p.wq);
        Tensor<S> k = apply_affine(xn, p.wk);
        Tensor<S> v = apply_affine(xn, p.wv);
        if (capture) {
            capture->k = k.values();
            capture->v = v.values();
        }
        attn_out = apply_affine(multi_head_attention(q, k, v, heads, causal), p.wo);
    }
    Tensor<S> a = add(x, attn_out);
    Tensor<S> an = rmsnorm(a, p.mlp_norm_gain);
    Tensor<S> m = apply_affine(gelu(apply_affine(an, p.mlp_in)), p.mlp_out);
    return add(a, m);
}

// Single-row decode step: the row attends over `n_ctx` gathered context
// key/value rows (flat n_ctx x h) plus its own fresh key/value. Returns the
// block output row; the row's own k/v land in *k_self / *v_self for caching.
template <class S>
Tensor<S> transformer_block_incremental(const Tensor<S>& x_row, const BlockParams<S>& p, int heads,
                                        const std::vector<S>& k_ctx, const std::vector<S>& v_ctx, int n_ctx,
                                        std::vector<S>* k_self = nullptr, std::vector<S>* v_self = nullptr) {
    const int h = x_row.cols();
    const int dh = h / heads;

    Tensor<S> xn = rmsnorm(x_row, p.attn_norm_gain);
    Tensor<S> q = apply_affine(xn, p.wq);
    Tensor<S> k = apply_affine(xn, p.wk);
    Tensor<S> v = apply_affine(xn, p.wv);
    if (k_self) *k_self = k.values();
    if (v_self) *v_self = v.values();

    std::vector<S> k_all(k_ctx.begin(), k_ctx.begin() + static_cast<size_t>(n_ctx) * h);
    k_all.insert(k_all.end(), k.values().begin(), k.values().end());
    std::vector<S> v_all(v_ctx.begin(), v_ctx.begin() + static_cast<size_t>(n_ctx) * h);
    v_all.insert(v_all.end(), v.values().begin(), v.values().end());
    Tensor<S> K({n_ctx + 1, h}, std::move(k_all));
    Tensor<S> V({n_ctx + 1, h}, std::move(v_all));

    const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor<S> merged;
    for (int hd = 0; hd < heads; ++hd) {
        auto qh = slice_cols(q, hd * dh, (hd + 1) * dh);
        auto kh = slice_cols(K, hd * dh, (hd + 1) * dh);
        auto vh = slice_cols(V, hd * dh, (hd + 1) * dh);
        auto scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
        auto oh = matmul(softmax_rows(scores), vh);
        merged = hd == 0 ? oh : concat_channels(merged, oh);
    }
    Tensor<S> a = add(x_row, apply_affine(merged, p.wo));
    Tensor<S> an = rmsnorm(a, p.mlp_norm_gain);
    Tensor<S> m = apply_affine(gelu(apply_affine(an, p.mlp_in)), p.mlp_out);
    return add(a, m);
}

}  // namespace loopvlm
