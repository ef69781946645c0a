#pragma once

// Tripartite looped transformer: prelude blocks project embeddings into the
// latent space, a shared recurrent block refines a random-initialized state,
// and head blocks decode it. Visual tiers are added onto the visual rows of
// the prelude output during the early recurrent steps, shallow tiers first.

#include <array>
#include <string>
#include <vector>

#include "loopvlm/nn.hpp"
#include "loopvlm/tensor.hpp"
#include "loopvlm/vision.hpp"
#include "loopvlm/vocab.hpp"

namespace loopvlm {

enum class InjectionMode { stride, prefix };

inline const char* injection_mode_name(InjectionMode m) { return m == InjectionMode::stride ? "stride" : "prefix"; }

struct ModelConfig {
    int h = 128;
    int heads = 4;
    int layers_E = 1;
    int layers_R = 2;
    int layers_H = 1;
    double sigma0 = 0.0;  // <= 0 means 1/sqrt(h)
    int r_bar = 8;        // mean recurrence target minus 1
    int r_max = 32;
    int k_grad = 4;
    InjectionMode injection_mode = InjectionMode::stride;
    int cache_period = 4;
    bool use_hierarchy = true;
    bool gated_injection = false;
    int max_seq = 96;

    double sigma0_value() const { return sigma0 > 0 ? sigma0 : 1.0 / std::sqrt(static_cast<double>(h)); }

    void validate() const {
        if (h < 1 || heads < 1 || h % heads != 0) throw NumericError("model: h must be a positive multiple of heads");
        if (layers_E < 1 || layers_R < 1 || layers_H < 1) throw NumericError("model: block counts must be >= 1");
        if (r_max < 1) throw NumericError("model: r_max must be >= 1");
        if (k_grad < 1 || k_grad > r_max) throw NumericError("model: k_grad must lie in [1, r_max]");
        if (cache_period < 1) throw NumericError("model: cache_period must be >= 1");
        if (r_bar < 1) throw NumericError("model: r_bar must be >= 1");
        if (max_seq < 1) throw NumericError("model: max_seq must be >= 1");
    }
};

// Number of tiers doubles as the injection cutoff K.
constexpr int kNumTiers = 4;

struct InjectionSchedule {
    int r_total = 0;
    int K = 0;
    std::vector<int> tier_for_step;  // index step-1; 0 = none, else tier 1..4

    int tier_at(int step) const {
        if (step < 1 || step > r_total) throw NumericError("schedule: step " + std::to_string(step) + " outside [1," +
                                                           std::to_string(r_total) + "]");
        return tier_for_step[static_cast<size_t>(step) - 1];
    }
};

// Case I (r >= 4): tiers 1..4 on the first four steps, none afterwards.
// Case II (r < 4): stride mode takes every floor(4/r)-th tier starting at
// v_1; prefix mode takes the first r tiers.
inline InjectionSchedule build_schedule(int r_total, InjectionMode mode, bool use_hierarchy = true) {
    if (r_total < 1) throw NumericError("build_schedule: r_total must be >= 1");
    InjectionSchedule s;
    s.r_total = r_total;
    s.K = std::min(kNumTiers, r_total);
    s.tier_for_step.assign(static_cast<size_t>(r_total), 0);
    if (!use_hierarchy) return s;
    if (r_total >= kNumTiers) {
        for (int step = 1; step <= kNumTiers; ++step) s.tier_for_step[step - 1] = step;
    } else if (mode == InjectionMode::prefix) {
        for (int step = 1; step <= r_total; ++step) s.tier_for_step[step - 1] = step;
    } else {
        const int stride = kNumTiers / r_total;  // floor(4/r)
        for (int step = 1; step <= r_total; ++step) s.tier_for_step[step - 1] = 1 + (step - 1) * stride;
    }
    return s;
}

template <class S>
struct BackboneParams {
    Tensor<S> tok_embed;  // |V| x h, tied with the unembedding
    Tensor<S> pos_embed;  // max_seq x h, added in the prelude only
    AffineParams<S> adapter;  // 2h -> h
    std::vector<BlockParams<S>> prelude;
    std::vector<BlockParams<S>> core;
    std::vector<BlockParams<S>> coda;
    Tensor<S> final_norm_gain;
    std::array<Tensor<S>, kNumTiers> gates;  // used only when gated injection is on
    bool gated = false;
};

template <class S>
BackboneParams<S> make_backbone_params(const ModelConfig& cfg, int vocab_size, Rng& rng) {
    cfg.validate();
    BackboneParams<S> p;
    p.tok_embed = Tensor<S>::randn({vocab_size, cfg.h}, rng, 0.02);
    p.pos_embed = Tensor<S>::randn({cfg.max_seq, cfg.h}, rng, 0.02);
    p.adapter = make_affine<S>(2 * cfg.h, cfg.h, rng, 1.0 / std::sqrt(2.0 * cfg.h));
    for (int i = 0; i < cfg.layers_E; ++i) p.prelude.push_back(make_block<S>(cfg.h, rng));
    for (int i = 0; i < cfg.layers_R; ++i) p.core.push_back(make_block<S>(cfg.h, rng));
    for (int i = 0; i < cfg.layers_H; ++i) p.coda.push_back(make_block<S>(cfg.h, rng));
    p.final_norm_gain = Tensor<S>::full({cfg.h}, S(1));
    p.gated = cfg.gated_injection;
    if (p.gated)
        for (auto& g : p.gates) g = Tensor<S>::full({1}, S(1));
    return p;
}

template <class S>
struct Embeddings {
    Tensor<S> e;  // n x h, visual rows already substituted
    int span_start = 0;
    int span_len = 0;
};

template <class S>
struct LatentState {
    Tensor<S> values;  // n x h
    int iteration = 0;
};

// Token-embedding rows with the image placeholders replaced by base visual
// embeddings, in order.
template <class S>
Embeddings<S> embed(const EncodedSample& sample, const Tensor<S>& visual_base, const BackboneParams<S>& p) {
    int placeholders = 0;
    for (int id : sample.token_ids)
        if (id == Vocabulary::image_id) ++placeholders;
    if (placeholders != visual_base.rows())
        throw NumericError("embed: sample has " + std::to_string(placeholders) + " image placeholders but e_v has " +
                           std::to_string(visual_base.rows()) + " rows");
    Embeddings<S> out;
    out.span_start = sample.span_start;
    out.span_len = sample.span_len;
    Tensor<S> tok = embedding_rows(p.tok_embed, sample.token_ids);
    out.e = placeholders > 0 ? set_rows(tok, visual_base, sample.span_start) : tok;
    return out;
}

template <class S>
Tensor<S> prelude_forward(const Embeddings<S>& emb, const BackboneParams<S>& p, const ModelConfig& cfg) {
    const int n = emb.e.rows();
    if (n > p.pos_embed.rows())
        throw NumericError("prelude: sequence length " + std::to_string(n) + " exceeds max_seq " +
                           std::to_string(p.pos_embed.rows()));
    Tensor<S> x = add(emb.e, slice_rows(p.pos_embed, 0, n));
    for (const auto& blk : p.prelude) x = transformer_block(x, blk, cfg.heads, /*causal=*/true);
    return x;
}

// Row i of s0 is seeded by (seed, i) so that batched and incremental paths
// draw identical states for the same position.
template <class S>
std::vector<S> state_row_values(uint64_t seed, int position, int h, double sigma) {
    Rng rng(mix_seed({seed, 0x57a7eull, static_cast<uint64_t>(position)}));
    std::vector<S> row(h);
    for (auto& v : row) v = static_cast<S>(sigma * rng.normal());
    return row;
}

template <class S>
LatentState<S> init_state(int n, const ModelConfig& cfg, uint64_t seed) {
    std::vector<S> vals(static_cast<size_t>(n) * cfg.h);
    for (int i = 0; i < n; ++i) {
        auto row = state_row_values<S>(seed, i, cfg.h, cfg.sigma0_value());
        std::copy(row.begin(), row.end(), vals.begin() + static_cast<size_t>(i) * cfg.h);
    }
    LatentState<S> s;
    s.values = Tensor<S>({n, cfg.h}, std::move(vals));
    s.iteration = 0;
    return s;
}

// Adds the scheduled tier onto the visual rows of x (the prelude output or
// raw embeddings); identity once the gate is closed. The returned tensor is
// the input itself when no tier applies, so the gate is bit-exact.
template <class S>
Tensor<S> inject(const Tensor<S>& x, int span_start, int span_len, const VisualHierarchy<S>& hier,
                 const InjectionSchedule& sched, int step, const BackboneParams<S>& p) {
    const int tier = sched.tier_at(step);
    if (tier == 0 || span_len == 0) return x;
    Tensor<S> v = hier.tiers[static_cast<size_t>(tier) - 1];
    if (v.rows() != span_len)
        throw NumericError("inject: tier has " + std::to_string(v.rows()) + " rows but visual span is " +
                           std::to_string(span_len));
    if (p.gated) v = scale_by(v, p.gates[static_cast<size_t>(tier) - 1]);
    return add_rows(x, v, span_start);
}

template <class S>
LatentState<S> recurrent_step(const LatentState<S>& state, const Tensor<S>& injected, const BackboneParams<S>& p,
                              const ModelConfig& cfg) {
    if (injected.shape() != state.values.shape())
        throw NumericError("recurrent_step: injected " + shape_str(injected.shape()) + " vs state " +
                           shape_str(state.values.shape()));
    Tensor<S> z = apply_affine(concat_channels(injected, state.values), p.adapter);
    for (const auto& blk : p.core) z = transformer_block(z, blk, cfg.heads, /*causal=*/true);
    if (!z.all_finite()) {
        double mx = 0;
        for (S v : injected.values()) mx = std::max(mx, std::fabs(static_cast<double>(v)));
        throw NumericError("recurrent_step: non-finite activations at iteration " +
                           std::to_string(state.iteration + 1) + " (max |input| " + std::to_string(mx) + ")");
    }
    LatentState<S> out;
    out.values = z;
    out.iteration = state.iteration + 1;
    return out;
}

template <class S>
Tensor<S> head_logits(const LatentState<S>& state, const BackboneParams<S>& p, const ModelConfig& cfg) {
    Tensor<S> x = state.values;
    for (const auto& blk : p.coda) x = transformer_block(x, blk, cfg.heads, /*causal=*/true);
    x = rmsnorm(x, p.final_norm_gain);
    return matmul_nt(x, p.tok_embed);  // unembedding is the embedding table transposed
}

}  // namespace loopvlm
