#pragma once

// Stochastic-depth training: per-batch depth drawn from the log-normal
// Poisson, the first n_no_grad recurrent steps run without graph recording,
// masked next-token cross-entropy on answer positions, AdamW with cosine
// decay to 10% of the stage peak. Batches fan out across worker threads
// (one graph per sample); gradients reduce in sample order so runs are
// deterministic for any worker count.

#include <chrono>
#include <fstream>
#include <thread>

#include "loopvlm/config.hpp"
#include "loopvlm/dataset.hpp"
#include "loopvlm/model.hpp"
#include "loopvlm/sampler.hpp"

namespace loopvlm {

template <class S>
struct StepRecord {
    Tensor<S> state;
    bool recorded;
};

// Runs the recurrent loop: n_no_grad detached steps, then n_grad recorded
// ones. The injection schedule is indexed by the absolute 1-based step
// across the whole loop.
template <class S>
LatentState<S> iterate_forward(const Tensor<S>& prelude_out, int span_start, int span_len,
                               const VisualHierarchy<S>& hier, const InjectionSchedule& sched,
                               const DepthSample& depth, LatentState<S> state, const BackboneParams<S>& params,
                               const ModelConfig& cfg, std::vector<StepRecord<S>>* steps = nullptr) {
    if (depth.r != sched.r_total)
        throw NumericError("iterate_forward: depth r=" + std::to_string(depth.r) + " but schedule covers " +
                           std::to_string(sched.r_total));
    for (int step = 1; step <= depth.r; ++step) {
        const bool recorded = step > depth.n_no_grad;
        if (recorded) {
            auto injected = inject(prelude_out, span_start, span_len, hier, sched, step, params);
            state = recurrent_step(state, injected, params, cfg);
        } else {
            NoGradGuard ng;
            auto injected = inject(prelude_out, span_start, span_len, hier, sched, step, params);
            state = recurrent_step(state, injected, params, cfg);
        }
        if (steps) steps->push_back({state.values, recorded});
    }
    return state;
}

template <class S>
Tensor<S> masked_ce_loss(const Tensor<S>& logits, const EncodedSample& sample) {
    return cross_entropy_next_token(logits, sample.token_ids, sample.target_mask);
}

// Whole-pipeline loss for one sample.
template <class S>
Tensor<S> sample_loss(Model<S>& model, const EncodedSample& enc, const std::vector<float>& image,
                      const DepthSample& depth, uint64_t state_seed,
                      std::vector<StepRecord<S>>* steps = nullptr) {
    auto hier = model.encode_image(image);
    auto emb = model.embed_sample(enc, hier);
    auto pre = prelude_forward(emb, model.backbone, model.cfg);
    auto sched = build_schedule(depth.r, model.cfg.injection_mode, model.cfg.use_hierarchy);
    auto st = init_state<S>(emb.e.rows(), model.cfg, state_seed);
    st = iterate_forward(pre, emb.span_start, emb.span_len, hier, sched, depth, st, model.backbone, model.cfg, steps);
    auto logits = head_logits(st, model.backbone, model.cfg);
    return masked_ce_loss(logits, enc);
}

// ---------------------------------------------------------------------------
// optimizer

inline double cosine_lr(double peak, int64_t step, int64_t total) {
    const double floor_lr = 0.1 * peak;
    if (total <= 1) return peak;
    double t = std::min<double>(1.0, static_cast<double>(step) / static_cast<double>(total - 1));
    return floor_lr + 0.5 * (peak - floor_lr) * (1.0 + std::cos(M_PI * t));
}

class AdamW {
public:
    struct Hyper {
        double beta1 = 0.9;
        double beta2 = 0.95;
        double eps = NumericConstants::adam_eps;
        double weight_decay = 1e-3;
    };

    AdamW(std::vector<std::pair<std::string, Tensor<float>>> params, Hyper hyper)
        : params_(std::move(params)), hyper_(hyper) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].second.numel(), 0.0f);
            v_[i].assign(params_[i].second.numel(), 0.0f);
        }
    }

    // Bias-corrected decoupled-weight-decay update on every trainable param
    // with a populated grad. Any non-finite gradient skips the whole step.
    bool step(double lr) {
        for (auto& [name, p] : params_) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            for (float g : p.grad())
                if (!std::isfinite(g)) {
                    ++skipped_;
                    return false;
                }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].second;
            if (!p.requires_grad() || !p.has_grad()) continue;
            auto& w = p.mutable_values();
            const auto& g = p.grad();
            for (size_t k = 0; k < w.size(); ++k) {
                m_[i][k] = static_cast<float>(hyper_.beta1 * m_[i][k] + (1.0 - hyper_.beta1) * g[k]);
                v_[i][k] = static_cast<float>(hyper_.beta2 * v_[i][k] + (1.0 - hyper_.beta2) * g[k] * g[k]);
                const double mhat = m_[i][k] / bc1;
                const double vhat = v_[i][k] / bc2;
                w[k] -= static_cast<float>(lr * (mhat / (std::sqrt(vhat) + hyper_.eps) + hyper_.weight_decay * w[k]));
            }
        }
        return true;
    }

    int64_t t() const { return t_; }
    int64_t skipped() const { return skipped_; }
    void set_t(int64_t t) { t_ = t; }
    void set_skipped(int64_t s) { skipped_ = s; }

    NamedArrays export_state() const {
        NamedArrays out;
        for (size_t i = 0; i < params_.size(); ++i) {
            if (!params_[i].second.requires_grad()) continue;
            out.items.emplace_back("opt.m." + params_[i].first,
                                   Tensor<float>(params_[i].second.shape(), m_[i]));
            out.items.emplace_back("opt.v." + params_[i].first,
                                   Tensor<float>(params_[i].second.shape(), v_[i]));
        }
        return out;
    }

    void import_state(const NamedArrays& state) {
        std::unordered_map<std::string, const Tensor<float>*> by_name;
        for (auto& [name, t] : state.items) by_name.emplace(name, &t);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto mi = by_name.find("opt.m." + params_[i].first);
            auto vi = by_name.find("opt.v." + params_[i].first);
            if (mi != by_name.end()) m_[i] = mi->second->values();
            if (vi != by_name.end()) v_[i] = vi->second->values();
        }
    }

private:
    std::vector<std::pair<std::string, Tensor<float>>> params_;
    Hyper hyper_;
    std::vector<std::vector<float>> m_, v_;
    int64_t t_ = 0;
    int64_t skipped_ = 0;
};

// ---------------------------------------------------------------------------
// stage runner

struct TrainSample {
    EncodedSample enc;
    std::vector<float> image;
};

// Tokenizes a split and checks the cross-module contract: every image span
// must match the vision pipeline's token count.
std::vector<TrainSample> prepare_samples(const std::vector<SyntheticScene>& scenes, const Vocabulary& vocab,
                                         int n_visual_tokens, bool loss_on_question);

struct StageResult {
    int64_t steps = 0;
    double final_loss = 0.0;
    int64_t skipped_steps = 0;
};

// Trains one stage. `resume_meta`/`resume_opt` continue an interrupted stage
// from its checkpoint. Metrics go to `metrics_path` as JSONL, one object per
// optimizer step; checkpoints to `ckpt_path`.
StageResult run_stage(Model<float>& model, int stage, const RunConfig& rc, const std::vector<TrainSample>& train,
                      const std::string& metrics_path, const std::string& ckpt_path,
                      const CheckpointMeta* resume_meta = nullptr, const NamedArrays* resume_opt = nullptr,
                      std::ostream* log = nullptr);

}  // namespace loopvlm
