#include <doctest.h>

#include <cstring>

#include "fd_check.hpp"
#include "loopvlm/scene.hpp"
#include "loopvlm/vision.hpp"

using namespace loopvlm;

namespace {

VisionConfig default_cfg() { return VisionConfig{}; }

std::vector<float> sample_image(uint32_t seed) {
    return image_to_float(generate_scene(seed, TaskKind::global_count).image);
}

}  // namespace

TEST_CASE("patchify shapes, constancy, and inversion") {
    auto cfg = default_cfg();
    auto img = sample_image(3);
    auto p = patchify<float>(img, cfg);
    CHECK(p.shape() == Shape{64, 48});

    std::vector<float> flat(3 * 32 * 32, 0.5f);
    auto pc = patchify<float>(flat, cfg);
    for (int r = 1; r < pc.rows(); ++r)
        CHECK(std::memcmp(pc.values().data(), pc.values().data() + static_cast<size_t>(r) * pc.cols(),
                          sizeof(float) * pc.cols()) == 0);

    auto back = unpatchify(p, cfg);
    CHECK(back == img);

    VisionConfig bad = cfg;
    bad.patch_size = 5;
    CHECK_THROWS_AS(patchify<float>(img, bad), NumericError);
}

TEST_CASE("encode_with_tiers shapes and final-tier boundary") {
    auto cfg = default_cfg();
    Rng rng(5);
    auto params = make_vision_params<float>(cfg, 128, rng);
    auto patches = patchify<float>(sample_image(1), cfg);
    auto tiers = encode_with_tiers(patches, params, cfg);
    for (const auto& t : tiers) CHECK(t.shape() == Shape{64, 64});

    // with tier_layers ending at depth, tier 4 equals the full encoder output
    Tensor<float> x = add(apply_affine(patches, params.patch_embed), params.pos_embed);
    for (int l = 0; l < cfg.depth; ++l) x = transformer_block(x, params.blocks[l], cfg.heads, false);
    CHECK(std::memcmp(x.values().data(), tiers[3].values().data(), sizeof(float) * x.numel()) == 0);
}

TEST_CASE("tier states are reproducible from the seed") {
    auto cfg = default_cfg();
    auto patches = patchify<float>(sample_image(9), cfg);
    auto run = [&] {
        Rng rng(42);
        auto params = make_vision_params<float>(cfg, 128, rng);
        auto tiers = encode_with_tiers(patches, params, cfg);
        double sum = 0;
        for (const auto& t : tiers)
            for (float v : t.values()) sum += static_cast<double>(v);
        return sum;
    };
    CHECK(run() == run());
}

TEST_CASE("merge_and_project produces the 4-tier hierarchy") {
    auto cfg = default_cfg();
    Rng rng(6);
    auto params = make_vision_params<float>(cfg, 128, rng);
    auto patches = patchify<float>(sample_image(2), cfg);
    auto hier = merge_and_project(encode_with_tiers(patches, params, cfg), params, cfg);
    CHECK(hier.base.shape() == Shape{16, 128});
    for (const auto& t : hier.tiers) CHECK(t.shape() == hier.base.shape());
}

TEST_CASE("zero states map to repeated merger bias rows") {
    auto cfg = default_cfg();
    Rng rng(7);
    auto params = make_vision_params<float>(cfg, 128, rng);
    std::array<Tensor<float>, 4> zeros;
    for (auto& z : zeros) z = Tensor<float>::zeros({cfg.n_patches(), cfg.width});
    // nonzero bias so the check is meaningful
    for (auto& m : params.mergers) m.b = Tensor<float>::randn({128}, rng, 1.0);
    auto hier = merge_and_project(zeros, params, cfg);
    for (int l = 0; l < 4; ++l)
        for (int r = 0; r < hier.tiers[l].rows(); ++r)
            for (int c = 0; c < 128; ++c)
                CHECK(hier.tiers[l].at(r, c) == params.mergers[l].b.values()[static_cast<size_t>(c)]);
}

TEST_CASE("merger gradients are isolated per tier") {
    VisionConfig cfg;
    cfg.image_size = 16;  // 4x4 patch grid, 4 merged tokens
    cfg.depth = 4;
    cfg.tier_layers = {1, 2, 3, 4};
    cfg.width = 8;
    cfg.heads = 2;
    Rng rng(8);
    auto params = make_vision_params<double>(cfg, 12, rng);
    std::vector<float> img(static_cast<size_t>(cfg.channels) * 16 * 16);
    Rng prng(3);
    for (auto& v : img) v = static_cast<float>(prng.uniform());

    for (auto& m : params.mergers) {
        m.w.set_requires_grad();
        m.b.set_requires_grad();
    }
    auto patches = patchify<double>(img, cfg);
    auto tiers = encode_with_tiers(patches, params, cfg);
    auto hier = merge_and_project(tiers, params, cfg);
    // consume only v_2
    auto res = backward(mean_all(mul(hier.tiers[1], hier.tiers[1])), false);
    CHECK(res.find(params.mergers[1].w) != nullptr);
    CHECK(res.find(params.mergers[0].w) == nullptr);
    CHECK(res.find(params.mergers[2].w) == nullptr);
    CHECK(res.find(params.mergers[3].w) == nullptr);

    // perturbing merger l changes v_l only
    auto base = merge_and_project(tiers, params, cfg);
    params.mergers[2].b.mutable_values()[0] += 1.0;
    auto moved = merge_and_project(tiers, params, cfg);
    CHECK(moved.tiers[2].values() != base.tiers[2].values());
    CHECK(moved.tiers[0].values() == base.tiers[0].values());
    CHECK(moved.tiers[1].values() == base.tiers[1].values());
    CHECK(moved.tiers[3].values() == base.tiers[3].values());
    CHECK(moved.base.values() == base.base.values());
}

TEST_CASE("spatial locality probe: one 8x8 region moves one tier-1 token") {
    auto cfg = default_cfg();
    Rng rng(11);
    auto params = make_vision_params<float>(cfg, 128, rng);

    auto scene = generate_scene(17, TaskKind::local_attribute);
    auto img_a = image_to_float(scene.image);
    auto img_b = img_a;
    // recolor the cell (2,1): pixels rows 16..23, cols 8..15
    for (int c = 0; c < 3; ++c)
        for (int y = 16; y < 24; ++y)
            for (int x = 8; x < 16; ++x) img_b[(static_cast<size_t>(c) * 32 + y) * 32 + x] += 0.25f;

    auto run_tier1 = [&](const std::vector<float>& img) {
        auto t = encode_with_tiers(patchify<float>(img, cfg), params, cfg, /*probe_attention_identity=*/true);
        return merge_and_project(t, params, cfg).tiers[0];
    };
    auto ta = run_tier1(img_a);
    auto tb = run_tier1(img_b);
    // merged grid is 4x4; cell (2,1) is merged token 2*4+1 = 9
    for (int tok = 0; tok < 16; ++tok) {
        bool differs = false;
        for (int c = 0; c < 128; ++c)
            if (ta.at(tok, c) != tb.at(tok, c)) differs = true;
        CHECK(differs == (tok == 9));
    }
}

TEST_CASE("vision gradients agree with finite differences") {
    VisionConfig cfg;
    cfg.image_size = 16;
    cfg.depth = 4;
    cfg.tier_layers = {1, 2, 3, 4};
    cfg.width = 8;
    cfg.heads = 2;
    Rng rng(13);
    auto params = make_vision_params<double>(cfg, 12, rng);
    std::vector<float> img(static_cast<size_t>(cfg.channels) * 16 * 16);
    Rng prng(5);
    for (auto& v : img) v = static_cast<float>(prng.uniform());

    params.patch_embed.w.set_requires_grad();
    params.mergers[0].w.set_requires_grad();
    params.projector.w.set_requires_grad();
    params.blocks[0].wq.w.set_requires_grad();

    auto forward = [&] {
        auto tiers = encode_with_tiers(patchify<double>(img, cfg), params, cfg);
        auto hier = merge_and_project(tiers, params, cfg);
        Tensor<double> acc = mean_all(mul(hier.base, hier.base));
        for (const auto& t : hier.tiers) acc = add(acc, mean_all(mul(t, t)));
        return acc;
    };
    auto rep = fd::check_all(forward,
                             {params.patch_embed.w, params.mergers[0].w, params.projector.w, params.blocks[0].wq.w},
                             1e-4, 7);
    CHECK(rep.max_rel_err < 1e-4);
}
