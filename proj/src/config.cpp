#include "loopvlm/config.hpp"

#include <fstream>
#include <set>

#include "loopvlm/errors.hpp"
#include "loopvlm/model.hpp"

namespace loopvlm {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
    for (auto& [key, _] : j.items())
        if (!allowed.count(key)) throw ConfigError("config: unknown key '" + where + "." + key + "'");
}

template <class T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
        }
    }
}

StageParams parse_stage(const nlohmann::json& j, const std::string& where, StageParams defaults) {
    reject_unknown(j, {"steps", "lr"}, where);
    StageParams sp = defaults;
    read_if(j, "steps", sp.steps);
    read_if(j, "lr", sp.lr);
    if (sp.steps < 0) throw ConfigError("config: " + where + ".steps must be >= 0");
    return sp;
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    vision.validate();
    if (train.batch_size < 1) throw ConfigError("config: train.batch_size must be >= 1");
    if (train.peak_lr <= 0) throw ConfigError("config: train.peak_lr must be positive");
    if (train.sigma_lambda < 0) throw ConfigError("config: train.sigma_lambda must be >= 0");
    if (train.fixed_r < 0 || train.fixed_r > model.r_max)
        throw ConfigError("config: train.fixed_r must lie in [0, r_max]");
    if (data.train_count < 0 || data.eval_count < 0 || data.calib_count < 0)
        throw ConfigError("config: data counts must be >= 0");
    if (data.global_count_frac < 0 || data.global_count_frac > 1)
        throw ConfigError("config: data.global_count_frac must lie in [0,1]");
    if (infer.min_steps < 1) throw ConfigError("config: infer.min_steps must be >= 1");
    if (infer.min_steps > model.r_max) throw ConfigError("config: infer.min_steps exceeds model.r_max");
    if (infer.epsilon < 0) throw ConfigError("config: infer.epsilon must be >= 0");
    if (infer.prefill_r < 0 || infer.prefill_r > model.r_max)
        throw ConfigError("config: infer.prefill_r must lie in [0, r_max]");
}

nlohmann::json run_config_json(const RunConfig& rc) {
    nlohmann::json j;
    j["model"] = model_config_json(rc.model);
    j["vision"] = vision_config_json(rc.vision);
    j["train"] = {{"peak_lr", rc.train.peak_lr},
                  {"stage_lr_ratios", {rc.train.stage_lr_ratios[0], rc.train.stage_lr_ratios[1], rc.train.stage_lr_ratios[2]}},
                  {"weight_decay", rc.train.weight_decay},
                  {"beta1", rc.train.beta1},
                  {"beta2", rc.train.beta2},
                  {"batch_size", rc.train.batch_size},
                  {"stage1", {{"steps", rc.train.stage1.steps}, {"lr", rc.train.stage1.lr}}},
                  {"stage2", {{"steps", rc.train.stage2.steps}, {"lr", rc.train.stage2.lr}}},
                  {"stage3", {{"steps", rc.train.stage3.steps}, {"lr", rc.train.stage3.lr}}},
                  {"sigma_lambda", rc.train.sigma_lambda},
                  {"fixed_r", rc.train.fixed_r},
                  {"loss_on_question", rc.train.loss_on_question},
                  {"save_every", rc.train.save_every},
                  {"log_every", rc.train.log_every},
                  {"workers", rc.train.workers}};
    j["data"] = {{"train_count", rc.data.train_count},
                 {"eval_count", rc.data.eval_count},
                 {"calib_count", rc.data.calib_count},
                 {"train_seed_start", rc.data.train_seed_start},
                 {"eval_seed_start", rc.data.eval_seed_start},
                 {"calib_seed_start", rc.data.calib_seed_start},
                 {"global_count_frac", rc.data.global_count_frac}};
    j["infer"] = {{"epsilon", rc.infer.epsilon}, {"min_steps", rc.infer.min_steps}, {"prefill_r", rc.infer.prefill_r}};
    j["out_dir"] = rc.out_dir;
    j["master_seed"] = rc.master_seed;
    return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig rc;
    reject_unknown(j, {"model", "vision", "train", "data", "infer", "out_dir", "master_seed"}, "<root>");

    if (j.contains("model")) {
        auto base = model_config_json(rc.model);
        reject_unknown(j.at("model"),
                       {"h", "heads", "layers_E", "layers_R", "layers_H", "sigma0", "r_bar", "r_max", "k_grad",
                        "injection_mode", "cache_period", "use_hierarchy", "gated_injection", "max_seq"},
                       "model");
        base.update(j.at("model"));
        rc.model = model_config_from_json(base);
    }
    if (j.contains("vision")) {
        auto base = vision_config_json(rc.vision);
        reject_unknown(j.at("vision"),
                       {"channels", "image_size", "patch_size", "depth", "width", "heads", "tier_layers",
                        "merger_flatten"},
                       "vision");
        base.update(j.at("vision"));
        rc.vision = vision_config_from_json(base);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        reject_unknown(t,
                       {"peak_lr", "stage_lr_ratios", "weight_decay", "beta1", "beta2", "batch_size", "stage1",
                        "stage2", "stage3", "sigma_lambda", "fixed_r", "loss_on_question", "save_every", "log_every",
                        "workers"},
                       "train");
        read_if(t, "peak_lr", rc.train.peak_lr);
        if (t.contains("stage_lr_ratios")) {
            auto arr = t.at("stage_lr_ratios");
            if (!arr.is_array() || arr.size() != 3) throw ConfigError("config: train.stage_lr_ratios must have 3 entries");
            for (int i = 0; i < 3; ++i) rc.train.stage_lr_ratios[i] = arr[i].get<double>();
        }
        read_if(t, "weight_decay", rc.train.weight_decay);
        read_if(t, "beta1", rc.train.beta1);
        read_if(t, "beta2", rc.train.beta2);
        read_if(t, "batch_size", rc.train.batch_size);
        if (t.contains("stage1")) rc.train.stage1 = parse_stage(t.at("stage1"), "train.stage1", rc.train.stage1);
        if (t.contains("stage2")) rc.train.stage2 = parse_stage(t.at("stage2"), "train.stage2", rc.train.stage2);
        if (t.contains("stage3")) rc.train.stage3 = parse_stage(t.at("stage3"), "train.stage3", rc.train.stage3);
        read_if(t, "sigma_lambda", rc.train.sigma_lambda);
        read_if(t, "fixed_r", rc.train.fixed_r);
        read_if(t, "loss_on_question", rc.train.loss_on_question);
        read_if(t, "save_every", rc.train.save_every);
        read_if(t, "log_every", rc.train.log_every);
        read_if(t, "workers", rc.train.workers);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        reject_unknown(d,
                       {"train_count", "eval_count", "calib_count", "train_seed_start", "eval_seed_start",
                        "calib_seed_start", "global_count_frac"},
                       "data");
        read_if(d, "train_count", rc.data.train_count);
        read_if(d, "eval_count", rc.data.eval_count);
        read_if(d, "calib_count", rc.data.calib_count);
        read_if(d, "train_seed_start", rc.data.train_seed_start);
        read_if(d, "eval_seed_start", rc.data.eval_seed_start);
        read_if(d, "calib_seed_start", rc.data.calib_seed_start);
        read_if(d, "global_count_frac", rc.data.global_count_frac);
    }
    if (j.contains("infer")) {
        const auto& f = j.at("infer");
        reject_unknown(f, {"epsilon", "min_steps", "prefill_r"}, "infer");
        read_if(f, "epsilon", rc.infer.epsilon);
        read_if(f, "min_steps", rc.infer.min_steps);
        read_if(f, "prefill_r", rc.infer.prefill_r);
    }
    read_if(j, "out_dir", rc.out_dir);
    read_if(j, "master_seed", rc.master_seed);
    rc.validate();
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace loopvlm
