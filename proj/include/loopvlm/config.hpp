#pragma once

// Declarative run configuration. A run is reproducible from this plus the
// code version alone; --print-config dumps every default so each knob is
// visible and overridable. Unknown keys are rejected before any compute.

#include <json.hpp>

#include <cstdint>
#include <string>

#include "loopvlm/backbone.hpp"
#include "loopvlm/vision.hpp"

namespace loopvlm {

struct StageParams {
    int steps = 0;
    double lr = -1.0;  // < 0: derived from peak_lr by the stage ratio
};

struct TrainConfig {
    double peak_lr = 0.1;
    // stage lr ratios relative to peak (mirrors the 1e-3/1e-5/1e-6 staging)
    double stage_lr_ratios[3] = {1.0, 0.01, 0.001};
    double weight_decay = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    int batch_size = 8;
    StageParams stage1{2000, -1.0};
    StageParams stage2{10000, -1.0};
    StageParams stage3{5000, -1.0};
    double sigma_lambda = 0.5;
    int fixed_r = 0;  // > 0: train at this exact depth instead of sampling
    bool loss_on_question = false;
    int save_every = 0;  // 0: checkpoint only at stage end
    int log_every = 100;
    int workers = 0;  // 0: hardware concurrency

    double stage_lr(int stage) const {
        const StageParams& sp = stage == 1 ? stage1 : stage == 2 ? stage2 : stage3;
        return sp.lr > 0 ? sp.lr : peak_lr * stage_lr_ratios[stage - 1];
    }
    const StageParams& stage_params(int stage) const {
        return stage == 1 ? stage1 : stage == 2 ? stage2 : stage3;
    }
};

struct DataConfig {
    int train_count = 4096;
    int eval_count = 512;
    int calib_count = 256;
    uint32_t train_seed_start = 0;
    uint32_t eval_seed_start = 1000000;
    uint32_t calib_seed_start = 2000000;
    double global_count_frac = 0.5;
};

struct InferConfig {
    double epsilon = 1e-2;
    int min_steps = 2;
    int prefill_r = 0;  // 0: use model r_max
};

struct RunConfig {
    ModelConfig model;
    VisionConfig vision;
    TrainConfig train;
    DataConfig data;
    InferConfig infer;
    std::string out_dir = "out";
    uint64_t master_seed = 1;

    void validate() const;
};

nlohmann::json run_config_json(const RunConfig& rc);
RunConfig run_config_from_json(const nlohmann::json& j);  // strict: unknown keys rejected
RunConfig load_run_config(const std::string& path);

}  // namespace loopvlm
