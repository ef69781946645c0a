#pragma once

// Toy vision tower: patchify -> affine patch embedding + learned positions
// -> full-attention transformer layers. Hidden states after the four tier
// layers are grouped 2x2 and mapped into the language width by per-tier
// mergers; the final tier additionally feeds the main projector that
// produces the base visual embedding.

#include <array>
#include <vector>

#include "loopvlm/nn.hpp"
#include "loopvlm/tensor.hpp"

namespace loopvlm {

struct VisionConfig {
    int channels = 3;
    int image_size = 32;
    int patch_size = 4;
    int depth = 8;
    int width = 64;  // d_v
    int heads = 4;
    std::array<int, 4> tier_layers{2, 4, 6, 8};
    bool merger_flatten = true;  // false: 2x2 mean pool + per-token affine (ablation)

    int patch_grid() const { return image_size / patch_size; }
    int n_patches() const { return patch_grid() * patch_grid(); }
    int patch_dim() const { return channels * patch_size * patch_size; }
    int n_tokens() const { return n_patches() / 4; }

    void validate() const {
        if (image_size % patch_size != 0)
            throw NumericError("vision: image size " + std::to_string(image_size) + " not divisible by patch size " +
                               std::to_string(patch_size));
        if (patch_grid() % 2 != 0) throw NumericError("vision: patch grid must be even for 2x2 merging");
        if (width % heads != 0) throw NumericError("vision: width not divisible by heads");
        int prev = 0;
        for (int l : tier_layers) {
            if (l <= prev || l > depth)
                throw NumericError("vision: tier_layers must be strictly increasing within [1, depth]");
            prev = l;
        }
        if (tier_layers[3] != depth) throw NumericError("vision: last tier layer must equal depth");
    }
};

template <class S>
struct VisionParams {
    AffineParams<S> patch_embed;
    Tensor<S> pos_embed;  // n_patches x width
    std::vector<BlockParams<S>> blocks;
    std::array<AffineParams<S>, 4> mergers;
    AffineParams<S> projector;
};

template <class S>
VisionParams<S> make_vision_params(const VisionConfig& cfg, int lang_width, Rng& rng) {
    cfg.validate();
    VisionParams<S> p;
    p.patch_embed = make_affine<S>(cfg.patch_dim(), cfg.width, rng, 0.02);
    p.pos_embed = Tensor<S>::randn({cfg.n_patches(), cfg.width}, rng, 0.02);
    for (int i = 0; i < cfg.depth; ++i) p.blocks.push_back(make_block<S>(cfg.width, rng));
    const int merge_in = cfg.merger_flatten ? 4 * cfg.width : cfg.width;
    const double merge_std = 1.0 / std::sqrt(static_cast<double>(merge_in));
    for (auto& m : p.mergers) m = make_affine<S>(merge_in, lang_width, rng, merge_std);
    p.projector = make_affine<S>(merge_in, lang_width, rng, merge_std);
    return p;
}

// image is C*H*W floats; output row p holds patch p in (channel, dy, dx) order
template <class S>
Tensor<S> patchify(const std::vector<float>& image, const VisionConfig& cfg) {
    if (cfg.image_size % cfg.patch_size != 0)
        throw NumericError("patchify: extents " + std::to_string(cfg.image_size) + " not divisible by patch size " +
                           std::to_string(cfg.patch_size));
    const size_t expect = static_cast<size_t>(cfg.channels) * cfg.image_size * cfg.image_size;
    if (image.size() != expect)
        throw NumericError("patchify: image has " + std::to_string(image.size()) + " values, expected " +
                           std::to_string(expect));
    const int g = cfg.patch_grid(), ps = cfg.patch_size, hw = cfg.image_size;
    std::vector<S> out(static_cast<size_t>(cfg.n_patches()) * cfg.patch_dim());
    size_t o = 0;
    for (int py = 0; py < g; ++py)
        for (int px = 0; px < g; ++px)
            for (int c = 0; c < cfg.channels; ++c)
                for (int dy = 0; dy < ps; ++dy)
                    for (int dx = 0; dx < ps; ++dx)
                        out[o++] = static_cast<S>(
                            image[(static_cast<size_t>(c) * hw + py * ps + dy) * hw + px * ps + dx]);
    return Tensor<S>({cfg.n_patches(), cfg.patch_dim()}, std::move(out));
}

template <class S>
std::vector<float> unpatchify(const Tensor<S>& patches, const VisionConfig& cfg) {
    const int g = cfg.patch_grid(), ps = cfg.patch_size, hw = cfg.image_size;
    std::vector<float> image(static_cast<size_t>(cfg.channels) * hw * hw);
    const auto& v = patches.values();
    size_t o = 0;
    for (int py = 0; py < g; ++py)
        for (int px = 0; px < g; ++px)
            for (int c = 0; c < cfg.channels; ++c)
                for (int dy = 0; dy < ps; ++dy)
                    for (int dx = 0; dx < ps; ++dx)
                        image[(static_cast<size_t>(c) * hw + py * ps + dy) * hw + px * ps + dx] =
                            static_cast<float>(v[o++]);
    return image;
}

// residual-stream states after each tier layer, shallow to deep
template <class S>
std::array<Tensor<S>, 4> encode_with_tiers(const Tensor<S>& patches, const VisionParams<S>& p,
                                           const VisionConfig& cfg, bool probe_attention_identity = false) {
    Tensor<S> x = add(apply_affine(patches, p.patch_embed), p.pos_embed);
    std::array<Tensor<S>, 4> tiers;
    int next = 0;
    for (int layer = 1; layer <= cfg.depth; ++layer) {
        x = transformer_block(x, p.blocks[layer - 1], cfg.heads, /*causal=*/false, probe_attention_identity);
        if (next < 4 && cfg.tier_layers[next] == layer) tiers[next++] = x;
    }
    if (next != 4) throw NumericError("encode_with_tiers: tier layers not all reached");
    return tiers;
}

// row indices of each 2x2 patch group, row-major over the halved grid
inline std::vector<std::vector<int>> merge_groups(int grid) {
    std::vector<std::vector<int>> idx;
    for (int gy = 0; gy < grid / 2; ++gy)
        for (int gx = 0; gx < grid / 2; ++gx)
            idx.push_back({(2 * gy) * grid + 2 * gx, (2 * gy) * grid + 2 * gx + 1, (2 * gy + 1) * grid + 2 * gx,
                           (2 * gy + 1) * grid + 2 * gx + 1});
    return idx;
}

template <class S>
struct VisualHierarchy {
    Tensor<S> base;                  // e_v, from the final tier through the projector
    std::array<Tensor<S>, 4> tiers;  // v_1..v_4, shallow to deep
};

template <class S>
Tensor<S> merge_tokens(const Tensor<S>& state, const AffineParams<S>& map, const VisionConfig& cfg) {
    const int grid = cfg.patch_grid();
    if (state.rows() != cfg.n_patches() || state.rows() % 4 != 0)
        throw NumericError("merge_tokens: state rows " + shape_str(state.shape()) +
                           " do not group 2x2 over grid " + std::to_string(grid));
    auto groups = merge_groups(grid);
    if (cfg.merger_flatten) {
        return apply_affine(gather_concat_rows(state, groups), map);
    }
    // ablation: mean of the four grouped rows, then a per-token affine
    const int d = cfg.width;
    auto g4 = gather_concat_rows(state, groups);
    Tensor<S> pooled = slice_cols(g4, 0, d);
    for (int j = 1; j < 4; ++j) pooled = add(pooled, slice_cols(g4, j * d, (j + 1) * d));
    return apply_affine(scale(pooled, static_cast<S>(0.25)), map);
}

template <class S>
VisualHierarchy<S> merge_and_project(const std::array<Tensor<S>, 4>& raw, const VisionParams<S>& p,
                                     const VisionConfig& cfg) {
    VisualHierarchy<S> out;
    for (int l = 0; l < 4; ++l) out.tiers[l] = merge_tokens(raw[l], p.mergers[l], cfg);
    out.base = merge_tokens(raw[3], p.projector, cfg);
    for (int l = 0; l < 4; ++l)
        if (out.tiers[l].shape() != out.base.shape())
            throw NumericError("hierarchy: tier " + std::to_string(l + 1) + " shape " +
                               shape_str(out.tiers[l].shape()) + " differs from base " + shape_str(out.base.shape()));
    return out;
}

}  // namespace loopvlm
