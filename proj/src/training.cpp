#include "loopvlm/training.hpp"

#include <iomanip>

namespace loopvlm {

std::vector<TrainSample> prepare_samples(const std::vector<SyntheticScene>& scenes, const Vocabulary& vocab,
                                         int n_visual_tokens, bool loss_on_question) {
    std::vector<TrainSample> out;
    out.reserve(scenes.size());
    for (const auto& s : scenes) {
        TrainSample ts;
        ts.enc = encode_sample(vocab, s.question, s.answer, n_visual_tokens, loss_on_question);
        if (ts.enc.span_len != n_visual_tokens)
            throw DataError("sample seed " + std::to_string(s.seed) + ": image span " +
                            std::to_string(ts.enc.span_len) + " != visual token count " +
                            std::to_string(n_visual_tokens));
        ts.image = image_to_float(s.image);
        out.push_back(std::move(ts));
    }
    return out;
}

StageResult run_stage(Model<float>& model, int stage, const RunConfig& rc, const std::vector<TrainSample>& train,
                      const std::string& metrics_path, const std::string& ckpt_path,
                      const CheckpointMeta* resume_meta, const NamedArrays* resume_opt, std::ostream* log) {
    if (stage < 1 || stage > 3) throw ConfigError("run_stage: stage must be 1, 2 or 3");
    if (train.empty()) throw DataError("run_stage: empty training set");

    const StageParams& sp = rc.train.stage_params(stage);
    const double stage_peak = rc.train.stage_lr(stage);
    const int64_t total_steps = sp.steps;
    const int batch = rc.train.batch_size;
    const uint64_t seed = rc.master_seed;

    model.set_trainable(stage == 1 ? is_aligner_param
                                   : std::function<bool(const std::string&)>([](const std::string&) { return true; }));

    AdamW::Hyper hyper;
    hyper.beta1 = rc.train.beta1;
    hyper.beta2 = rc.train.beta2;
    hyper.weight_decay = rc.train.weight_decay;
    AdamW opt(model.named_params(), hyper);

    int64_t start_step = 0;
    if (resume_meta) {
        if (resume_meta->stage != stage)
            throw ConfigError("resume checkpoint is for stage " + std::to_string(resume_meta->stage) +
                              ", requested stage " + std::to_string(stage));
        start_step = resume_meta->step;
        opt.set_t(resume_meta->opt_t);
        opt.set_skipped(resume_meta->opt_skipped);
        if (resume_opt) opt.import_state(*resume_opt);
    }

    std::ofstream metrics(metrics_path, start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw DataError("cannot open metrics file: " + metrics_path);

    DepthDistribution dist;
    dist.r_bar = model.cfg.r_bar;
    dist.sigma_lambda = rc.train.sigma_lambda;
    dist.r_max = model.cfg.r_max;

    int workers = rc.train.workers > 0 ? rc.train.workers : static_cast<int>(std::thread::hardware_concurrency());
    if (workers < 1) workers = 1;
    workers = std::min(workers, batch);

    auto params = model.named_params();
    std::vector<Tensor<float>> trainable;
    for (auto& [name, p] : params)
        if (p.requires_grad()) trainable.push_back(p);

    StageResult result;
    double last_loss = 0.0;
    for (int64_t step = start_step; step < total_steps; ++step) {
        auto t0 = std::chrono::steady_clock::now();

        Rng depth_rng(mix_seed({seed, 0xdeull, static_cast<uint64_t>(stage), static_cast<uint64_t>(step)}));
        const DepthSample depth = rc.train.fixed_r > 0 ? fixed_depth(rc.train.fixed_r, model.cfg.k_grad)
                                                       : sample_depth(dist, model.cfg.k_grad, depth_rng);
        Rng batch_rng(mix_seed({seed, 0xbaull, static_cast<uint64_t>(stage), static_cast<uint64_t>(step)}));
        std::vector<int> idx(batch);
        for (auto& i : idx) i = batch_rng.uniform_int(0, static_cast<int>(train.size()) - 1);

        std::vector<double> losses(batch, 0.0);
        std::vector<GradResult<float>> grads(batch);
        std::exception_ptr first_error;
        std::mutex error_mu;
        auto worker = [&](int tid) {
            try {
                for (int b = tid; b < batch; b += workers) {
                    const TrainSample& ts = train[static_cast<size_t>(idx[b])];
                    const uint64_t s0_seed = mix_seed({seed, 0x50ull, static_cast<uint64_t>(stage),
                                                       static_cast<uint64_t>(step), static_cast<uint64_t>(b)});
                    auto loss = sample_loss(model, ts.enc, ts.image, depth, s0_seed);
                    losses[b] = loss.item();
                    grads[b] = backward(loss, /*write_leaf_grads=*/false);
                }
            } catch (...) {
                std::lock_guard<std::mutex> lk(error_mu);
                if (!first_error) first_error = std::current_exception();
            }
        };
        if (workers == 1) {
            worker(0);
        } else {
            std::vector<std::thread> pool;
            for (int w = 0; w < workers; ++w) pool.emplace_back(worker, w);
            for (auto& th : pool) th.join();
        }
        if (first_error) std::rethrow_exception(first_error);

        // deterministic reduce: params in fixed order, samples in batch order
        const float inv_b = 1.0f / static_cast<float>(batch);
        for (auto& p : trainable) {
            p.zero_grad();
            auto* node = const_cast<detail::Node<float>*>(p.raw());
            if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0f);
            for (int b = 0; b < batch; ++b) {
                const std::vector<float>* g = grads[b].find(p);
                if (!g) continue;
                for (size_t k = 0; k < node->grad.size(); ++k) node->grad[k] += inv_b * (*g)[k];
            }
        }

        const double lr = cosine_lr(stage_peak, step, total_steps);
        opt.step(lr);

        double loss_mean = 0.0;
        for (double l : losses) loss_mean += l;
        loss_mean /= batch;
        last_loss = loss_mean;

        auto t1 = std::chrono::steady_clock::now();
        const double wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();

        nlohmann::json line = {{"step", step},     {"loss", loss_mean},      {"lr", lr},
                               {"r", depth.r},     {"n_grad", depth.n_grad}, {"wall_ms", wall_ms}};
        metrics << line.dump() << "\n";

        if (log && rc.train.log_every > 0 && (step % rc.train.log_every == 0 || step + 1 == total_steps)) {
            (*log) << "stage " << stage << " step " << step << "/" << total_steps << "  loss " << std::fixed
                   << std::setprecision(4) << loss_mean << "  lr " << std::setprecision(6) << lr << "  r " << depth.r
                   << "\n";
            log->flush();
        }

        const bool last = step + 1 == total_steps;
        const bool periodic = rc.train.save_every > 0 && (step + 1) % rc.train.save_every == 0;
        if (!ckpt_path.empty() && (last || periodic)) {
            CheckpointMeta meta;
            meta.stage = stage;
            meta.step = step + 1;
            meta.master_seed = seed;
            meta.opt_t = opt.t();
            meta.opt_skipped = opt.skipped();
            NamedArrays opt_state = opt.export_state();
            // mid-run snapshots get their own path so the final file never
            // clobbers a resume point
            const std::string path = last ? ckpt_path : ckpt_path + ".step" + std::to_string(step + 1);
            save_checkpoint(path, model, meta, &opt_state);
        }
    }
    // a zero-step stage still emits its checkpoint so later stages can chain
    if (total_steps == 0 && !ckpt_path.empty()) {
        CheckpointMeta meta;
        meta.stage = stage;
        meta.step = 0;
        meta.master_seed = seed;
        save_checkpoint(ckpt_path, model, meta);
    }
    metrics.flush();
    result.steps = total_steps - start_step;
    result.final_loss = last_loss;
    result.skipped_steps = opt.skipped();
    return result;
}

}  // namespace loopvlm
