#pragma once

// Full model: vision tower + recurrent language backbone, a fixed named
// parameter registry, and the sectioned binary checkpoint format.
//
// Checkpoint layout:
//   "LVLMCKPT" | u32 format version | length-prefixed JSON header
//   | u32 tensor count | { length-prefixed name | array payload }*
// Section = name prefix up to the first '.', one of: vision, tok_embed,
// prelude, core, coda, adapter ("opt" holds optimizer moments when present).

#include <json.hpp>

#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "loopvlm/backbone.hpp"
#include "loopvlm/serialize.hpp"
#include "loopvlm/vision.hpp"
#include "loopvlm/vocab.hpp"

namespace loopvlm {

inline constexpr char kCheckpointMagic[8] = {'L', 'V', 'L', 'M', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

template <class S>
struct Model {
    ModelConfig cfg;
    VisionConfig vcfg;
    Vocabulary vocab;
    BackboneParams<S> backbone;
    VisionParams<S> vision;

    void init(uint64_t seed) {
        cfg.validate();
        vcfg.validate();
        Rng rng(mix_seed({seed, 0x10de1ull}));
        backbone = make_backbone_params<S>(cfg, vocab.size(), rng);
        vision = make_vision_params<S>(vcfg, cfg.h, rng);
    }

    VisualHierarchy<S> encode_image(const std::vector<float>& image, bool probe = false) const {
        auto patches = patchify<S>(image, vcfg);
        auto raw = encode_with_tiers(patches, vision, vcfg, probe);
        return merge_and_project(raw, vision, vcfg);
    }

    Embeddings<S> embed_sample(const EncodedSample& sample, const VisualHierarchy<S>& hier) const {
        return embed(sample, hier.base, backbone);
    }

    // Fixed enumeration order; checkpoint files and the optimizer both key
    // off these names.
    std::vector<std::pair<std::string, Tensor<S>>> named_params() {
        std::vector<std::pair<std::string, Tensor<S>>> out;
        auto add = [&](const std::string& name, const Tensor<S>& t) { out.emplace_back(name, t); };
        auto add_affine = [&](const std::string& name, const AffineParams<S>& a) {
            add(name + ".w", a.w);
            add(name + ".b", a.b);
        };
        auto add_block = [&](const std::string& name, const BlockParams<S>& b) {
            add(name + ".attn_norm", b.attn_norm_gain);
            add_affine(name + ".wq", b.wq);
            add_affine(name + ".wk", b.wk);
            add_affine(name + ".wv", b.wv);
            add_affine(name + ".wo", b.wo);
            add(name + ".mlp_norm", b.mlp_norm_gain);
            add_affine(name + ".mlp_in", b.mlp_in);
            add_affine(name + ".mlp_out", b.mlp_out);
        };

        add("tok_embed.table", backbone.tok_embed);
        add("prelude.pos_embed", backbone.pos_embed);
        for (size_t i = 0; i < backbone.prelude.size(); ++i) add_block("prelude.block" + std::to_string(i), backbone.prelude[i]);
        add_affine("adapter.map", backbone.adapter);
        if (backbone.gated)
            for (int l = 0; l < kNumTiers; ++l) add("adapter.gate" + std::to_string(l + 1), backbone.gates[l]);
        for (size_t i = 0; i < backbone.core.size(); ++i) add_block("core.block" + std::to_string(i), backbone.core[i]);
        for (size_t i = 0; i < backbone.coda.size(); ++i) add_block("coda.block" + std::to_string(i), backbone.coda[i]);
        add("coda.final_norm", backbone.final_norm_gain);

        add_affine("vision.patch_embed", vision.patch_embed);
        add("vision.pos_embed", vision.pos_embed);
        for (size_t i = 0; i < vision.blocks.size(); ++i) add_block("vision.block" + std::to_string(i), vision.blocks[i]);
        for (int l = 0; l < kNumTiers; ++l) add_affine("vision.merger" + std::to_string(l + 1), vision.mergers[l]);
        add_affine("vision.projector", vision.projector);
        return out;
    }

    int64_t param_count() {
        int64_t n = 0;
        for (auto& [name, t] : named_params()) n += t.numel();
        return n;
    }

    void set_trainable(const std::function<bool(const std::string&)>& pred) {
        for (auto& [name, t] : named_params()) t.set_requires_grad(pred(name));
    }
};

inline std::string param_section(const std::string& name) { return name.substr(0, name.find('.')); }

// stage-1 trainable set: the modality bridges only
inline bool is_aligner_param(const std::string& name) {
    return name.rfind("vision.merger", 0) == 0 || name.rfind("vision.projector", 0) == 0;
}

// ---------------------------------------------------------------------------
// config <-> json (shared by checkpoints and run configs)

inline nlohmann::json model_config_json(const ModelConfig& c) {
    return {{"h", c.h},
            {"heads", c.heads},
            {"layers_E", c.layers_E},
            {"layers_R", c.layers_R},
            {"layers_H", c.layers_H},
            {"sigma0", c.sigma0},
            {"r_bar", c.r_bar},
            {"r_max", c.r_max},
            {"k_grad", c.k_grad},
            {"injection_mode", injection_mode_name(c.injection_mode)},
            {"cache_period", c.cache_period},
            {"use_hierarchy", c.use_hierarchy},
            {"gated_injection", c.gated_injection},
            {"max_seq", c.max_seq}};
}

ModelConfig model_config_from_json(const nlohmann::json& j);

inline nlohmann::json vision_config_json(const VisionConfig& c) {
    return {{"channels", c.channels},
            {"image_size", c.image_size},
            {"patch_size", c.patch_size},
            {"depth", c.depth},
            {"width", c.width},
            {"heads", c.heads},
            {"tier_layers", c.tier_layers},
            {"merger_flatten", c.merger_flatten}};
}

VisionConfig vision_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// checkpoints (float models only; training and inference run in 32-bit)

struct CheckpointMeta {
    int stage = 0;
    int64_t step = 0;
    uint64_t master_seed = 0;
    bool has_opt = false;
    int64_t opt_t = 0;
    int64_t opt_skipped = 0;
};

struct NamedArrays {
    std::vector<std::pair<std::string, Tensor<float>>> items;
};

void save_checkpoint(const std::string& path, Model<float>& model, const CheckpointMeta& meta,
                     const NamedArrays* opt_state = nullptr);

// Reconstructs the model from the stored configs; returns meta. Optimizer
// arrays, when present and requested, land in *opt_state.
CheckpointMeta load_checkpoint(const std::string& path, Model<float>& model, NamedArrays* opt_state = nullptr);

}  // namespace loopvlm
