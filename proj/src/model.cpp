#include "loopvlm/model.hpp"

#include <cstring>
#include <unordered_map>

namespace loopvlm {

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.h = j.at("h").get<int>();
    c.heads = j.at("heads").get<int>();
    c.layers_E = j.at("layers_E").get<int>();
    c.layers_R = j.at("layers_R").get<int>();
    c.layers_H = j.at("layers_H").get<int>();
    c.sigma0 = j.at("sigma0").get<double>();
    c.r_bar = j.at("r_bar").get<int>();
    c.r_max = j.at("r_max").get<int>();
    c.k_grad = j.at("k_grad").get<int>();
    const std::string mode = j.at("injection_mode").get<std::string>();
    if (mode == "stride")
        c.injection_mode = InjectionMode::stride;
    else if (mode == "prefix")
        c.injection_mode = InjectionMode::prefix;
    else
        throw ConfigError("injection_mode must be 'stride' or 'prefix', got '" + mode + "'");
    c.cache_period = j.at("cache_period").get<int>();
    c.use_hierarchy = j.at("use_hierarchy").get<bool>();
    c.gated_injection = j.at("gated_injection").get<bool>();
    c.max_seq = j.at("max_seq").get<int>();
    c.validate();
    return c;
}

VisionConfig vision_config_from_json(const nlohmann::json& j) {
    VisionConfig c;
    c.channels = j.at("channels").get<int>();
    c.image_size = j.at("image_size").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.depth = j.at("depth").get<int>();
    c.width = j.at("width").get<int>();
    c.heads = j.at("heads").get<int>();
    auto tl = j.at("tier_layers");
    if (!tl.is_array() || tl.size() != 4) throw ConfigError("vision.tier_layers must be an array of 4 layers");
    for (int i = 0; i < 4; ++i) c.tier_layers[i] = tl[i].get<int>();
    c.merger_flatten = j.at("merger_flatten").get<bool>();
    c.validate();
    return c;
}

void save_checkpoint(const std::string& path, Model<float>& model, const CheckpointMeta& meta,
                     const NamedArrays* opt_state) {
    if (!host_little_endian()) throw DataError("checkpoint: big-endian hosts are not supported");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 8);
    write_u32(os, kCheckpointVersion);

    nlohmann::json header;
    header["model"] = model_config_json(model.cfg);
    header["vision"] = vision_config_json(model.vcfg);
    header["stage"] = meta.stage;
    header["step"] = meta.step;
    header["rng_state"] = {{"master_seed", meta.master_seed}};
    header["has_opt"] = opt_state != nullptr;
    header["opt_t"] = meta.opt_t;
    header["opt_skipped"] = meta.opt_skipped;
    write_string(os, header.dump());

    auto params = model.named_params();
    uint32_t count = static_cast<uint32_t>(params.size() + (opt_state ? opt_state->items.size() : 0));
    write_u32(os, count);
    for (auto& [name, t] : params) {
        write_string(os, name);
        write_array(os, t);
    }
    if (opt_state) {
        for (auto& [name, t] : opt_state->items) {
            write_string(os, name);
            write_array(os, t);
        }
    }
    if (!os) throw DataError("checkpoint write failed: " + path);
}

CheckpointMeta load_checkpoint(const std::string& path, Model<float>& model, NamedArrays* opt_state) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError("not a checkpoint file: " + path);
    if (read_u32(is) != kCheckpointVersion) throw DataError("unsupported checkpoint version in " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(read_string(is));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint header: ") + e.what());
    }
    model.cfg = model_config_from_json(header.at("model"));
    model.vcfg = vision_config_from_json(header.at("vision"));
    model.init(0);  // shapes only; data overwritten below

    CheckpointMeta meta;
    meta.stage = header.at("stage").get<int>();
    meta.step = header.at("step").get<int64_t>();
    meta.master_seed = header.at("rng_state").at("master_seed").get<uint64_t>();
    meta.has_opt = header.at("has_opt").get<bool>();
    meta.opt_t = header.at("opt_t").get<int64_t>();
    meta.opt_skipped = header.at("opt_skipped").get<int64_t>();

    std::unordered_map<std::string, Tensor<float>> by_name;
    for (auto& [name, t] : model.named_params()) by_name.emplace(name, t);

    const uint32_t count = read_u32(is);
    size_t filled = 0;
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = read_string(is);
        Tensor<float> t = read_array(is);
        auto it = by_name.find(name);
        if (it != by_name.end()) {
            if (it->second.shape() != t.shape())
                throw DataError("checkpoint: '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                                shape_str(it->second.shape()));
            it->second.mutable_values() = t.values();
            ++filled;
        } else if (name.rfind("opt.", 0) == 0) {
            if (opt_state) opt_state->items.emplace_back(name, std::move(t));
        } else {
            throw DataError("checkpoint: unknown tensor '" + name + "'");
        }
    }
    if (filled != by_name.size())
        throw DataError("checkpoint: " + std::to_string(by_name.size() - filled) + " parameters missing from " + path);
    return meta;
}

}  // namespace loopvlm
