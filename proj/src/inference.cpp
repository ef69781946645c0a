#include "loopvlm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <mutex>
#include <thread>

#include "loopvlm/sampler.hpp"
#include "loopvlm/training.hpp"

namespace loopvlm {

double norm_diff(const std::vector<float>& h_t, const std::vector<float>& h_prev) {
    if (h_t.size() != h_prev.size())
        throw NumericError("norm_diff: shapes differ, " + std::to_string(h_t.size()) + " vs " +
                           std::to_string(h_prev.size()));
    double dd = 0, nn = 0;
    for (size_t i = 0; i < h_t.size(); ++i) {
        const double d = static_cast<double>(h_t[i]) - static_cast<double>(h_prev[i]);
        dd += d * d;
        nn += static_cast<double>(h_t[i]) * static_cast<double>(h_t[i]);
    }
    if (nn == 0.0) return std::numeric_limits<double>::infinity();
    return std::sqrt(dd) / std::sqrt(nn);
}

int latest_m4(int step, int cached_steps, int period) {
    if (step < 1) throw NumericError("latest_m4: step must be >= 1");
    if (period < 1) throw NumericError("latest_m4: period must be >= 1");
    if (step < 2) return step;
    if (cached_steps < 1) throw NumericError("latest_m4: empty validity column at step " + std::to_string(step));
    // newest valid entry in the congruence class of `step`
    for (int j = step; j >= 1; j -= period)
        if (j <= cached_steps) return j;
    return cached_steps;  // no congruent valid entry: newest valid
}

void CacheStore::append_step(int pos, std::vector<float> k, std::vector<float> v) {
    auto& col = cols_[static_cast<size_t>(pos)];
    if (k.size() != static_cast<size_t>(n_layers_) * h_ || v.size() != static_cast<size_t>(n_layers_) * h_)
        throw NumericError("cache: entry size mismatch");
    col.push_back({std::move(k), std::move(v)});
}

const float* CacheStore::k_at(int pos, int step_j, int layer) const {
    return cols_[static_cast<size_t>(pos)][static_cast<size_t>(step_j) - 1].k.data() +
           static_cast<size_t>(layer) * h_;
}

const float* CacheStore::v_at(int pos, int step_j, int layer) const {
    return cols_[static_cast<size_t>(pos)][static_cast<size_t>(step_j) - 1].v.data() +
           static_cast<size_t>(layer) * h_;
}

Session::Session(Model<float>& model, ExitPolicy policy, bool record_states)
    : model_(model), policy_(policy), record_states_(record_states) {
    policy_.validate();
    if (policy_.r_max > model.cfg.r_max)
        throw ConfigError("exit policy r_max " + std::to_string(policy_.r_max) + " exceeds model r_max " +
                          std::to_string(model.cfg.r_max));
    cache_ = CacheStore(model.cfg.layers_R, model.cfg.h, model.cfg.cache_period);
    prelude_k_.resize(model.cfg.layers_E);
    prelude_v_.resize(model.cfg.layers_E);
    coda_k_.resize(model.cfg.layers_H);
    coda_v_.resize(model.cfg.layers_H);
}

void Session::prefill(const std::vector<int>& prompt, int span_start, int span_len, const std::vector<float>& image,
                      int r_fixed, uint64_t seed) {
    if (n_positions_ != 0) throw NumericError("prefill: session already holds positions");
    if (r_fixed < 1 || r_fixed > model_.cfg.r_max)
        throw ConfigError("prefill: r_fixed " + std::to_string(r_fixed) + " outside [1, r_max]");
    if (span_start + span_len > static_cast<int>(prompt.size()))
        throw NumericError("prefill: visual span exceeds prompt length");
    NoGradGuard ng;
    session_seed_ = seed;
    prefill_r_ = r_fixed;
    const int n = static_cast<int>(prompt.size());
    const int h = model_.cfg.h;

    auto hier = model_.encode_image(image);
    EncodedSample stub;
    stub.token_ids = prompt;
    stub.span_start = span_start;
    stub.span_len = span_len;
    auto emb = model_.embed_sample(stub, hier);

    // prelude with per-layer kv capture
    Tensor<float> x = add(emb.e, slice_rows(model_.backbone.pos_embed, 0, n));
    for (size_t l = 0; l < model_.backbone.prelude.size(); ++l) {
        KvCapture<float> cap;
        x = transformer_block(x, model_.backbone.prelude[l], model_.cfg.heads, /*causal=*/true, false, &cap);
        prelude_k_[l] = std::move(cap.k);
        prelude_v_[l] = std::move(cap.v);
    }
    const Tensor<float> pre = x;

    for (int p = 0; p < n; ++p) cache_.add_position();
    auto sched = build_schedule(r_fixed, model_.cfg.injection_mode, model_.cfg.use_hierarchy);
    auto state = init_state<float>(n, model_.cfg, seed);
    const int n_core = model_.cfg.layers_R;
    for (int step = 1; step <= r_fixed; ++step) {
        auto injected = inject(pre, span_start, span_len, hier, sched, step, model_.backbone);
        Tensor<float> z = apply_affine(concat_channels(injected, state.values), model_.backbone.adapter);
        std::vector<KvCapture<float>> caps(n_core);
        for (int l = 0; l < n_core; ++l)
            z = transformer_block(z, model_.backbone.core[l], model_.cfg.heads, /*causal=*/true, false, &caps[l]);
        state.values = z;
        state.iteration = step;
        for (int p = 0; p < n; ++p) {
            std::vector<float> k(static_cast<size_t>(n_core) * h), v(static_cast<size_t>(n_core) * h);
            for (int l = 0; l < n_core; ++l) {
                std::memcpy(k.data() + static_cast<size_t>(l) * h, caps[l].k.data() + static_cast<size_t>(p) * h,
                            sizeof(float) * h);
                std::memcpy(v.data() + static_cast<size_t>(l) * h, caps[l].v.data() + static_cast<size_t>(p) * h,
                            sizeof(float) * h);
            }
            cache_.append_step(p, std::move(k), std::move(v));
        }
        if (record_states_) recorded_states_.push_back(state.values.values());
    }

    // head over the full prefilled state, capturing coda kv
    Tensor<float> hx = state.values;
    for (size_t l = 0; l < model_.backbone.coda.size(); ++l) {
        KvCapture<float> cap;
        hx = transformer_block(hx, model_.backbone.coda[l], model_.cfg.heads, /*causal=*/true, false, &cap);
        coda_k_[l] = std::move(cap.k);
        coda_v_[l] = std::move(cap.v);
    }
    hx = rmsnorm(hx, model_.backbone.final_norm_gain);
    auto logits = matmul_nt(hx, model_.backbone.tok_embed);
    prefill_logits_.assign(logits.values().end() - model_.vocab.size(), logits.values().end());
    n_positions_ = n;
}

std::vector<float> Session::gather_ctx_kv(int layer, int step, bool keys) const {
    const int h = model_.cfg.h;
    const int p = n_positions_;
    std::vector<float> out(static_cast<size_t>(p) * h);
    for (int q = 0; q < p; ++q) {
        const int j = latest_m4(step, cache_.cached_steps(q), cache_.period());
        const float* src = keys ? cache_.k_at(q, j, layer) : cache_.v_at(q, j, layer);
        std::memcpy(out.data() + static_cast<size_t>(q) * h, src, sizeof(float) * h);
    }
    return out;
}

Session::DecodeResult Session::decode_token(int token_id) {
    if (n_positions_ == 0) throw NumericError("decode_token: prefill the prompt first");
    NoGradGuard ng;
    const int p = n_positions_;
    const int h = model_.cfg.h;
    if (p >= model_.backbone.pos_embed.rows())
        throw NumericError("decode_token: position " + std::to_string(p) + " exceeds max_seq");
    if (token_id < 0 || token_id >= model_.vocab.size())
        throw NumericError("decode_token: token id " + std::to_string(token_id) + " outside vocabulary");

    // embed + incremental prelude
    Tensor<float> x = add(embedding_rows(model_.backbone.tok_embed, {token_id}),
                          slice_rows(model_.backbone.pos_embed, p, p + 1));
    for (size_t l = 0; l < model_.backbone.prelude.size(); ++l) {
        std::vector<float> k_self, v_self;
        x = transformer_block_incremental(x, model_.backbone.prelude[l], model_.cfg.heads, prelude_k_[l],
                                          prelude_v_[l], p, &k_self, &v_self);
        prelude_k_[l].insert(prelude_k_[l].end(), k_self.begin(), k_self.end());
        prelude_v_[l].insert(prelude_v_[l].end(), v_self.begin(), v_self.end());
    }
    const Tensor<float> pre_row = x;

    cache_.add_position();
    const int n_core = model_.cfg.layers_R;
    std::vector<float> s_prev = state_row_values<float>(session_seed_, p, h, model_.cfg.sigma0_value());
    Tensor<float> state({1, h}, s_prev);

    TokenTrace trace;
    trace.position = p;
    const int check_from = std::max(2, policy_.min_steps);
    int exit_step = policy_.r_max;
    for (int t = 1; t <= policy_.r_max; ++t) {
        Tensor<float> z = apply_affine(concat_channels(pre_row, state), model_.backbone.adapter);
        std::vector<float> k_entry(static_cast<size_t>(n_core) * h), v_entry(static_cast<size_t>(n_core) * h);
        for (int l = 0; l < n_core; ++l) {
            auto k_ctx = gather_ctx_kv(l, t, true);
            auto v_ctx = gather_ctx_kv(l, t, false);
            std::vector<float> k_self, v_self;
            z = transformer_block_incremental(z, model_.backbone.core[l], model_.cfg.heads, k_ctx, v_ctx, p, &k_self,
                                              &v_self);
            std::memcpy(k_entry.data() + static_cast<size_t>(l) * h, k_self.data(), sizeof(float) * h);
            std::memcpy(v_entry.data() + static_cast<size_t>(l) * h, v_self.data(), sizeof(float) * h);
        }
        cache_.append_step(p, std::move(k_entry), std::move(v_entry));
        if (!z.all_finite()) throw NumericError("decode_token: non-finite state at step " + std::to_string(t));

        if (t >= 2) trace.norm_diffs.push_back(norm_diff(z.values(), state.values()));
        state = z;
        if (t >= check_from && !trace.norm_diffs.empty() && trace.norm_diffs.back() < policy_.epsilon) {
            exit_step = t;
            break;
        }
        exit_step = t;
    }
    trace.exit_step = exit_step;

    // incremental head
    Tensor<float> hx = state;
    for (size_t l = 0; l < model_.backbone.coda.size(); ++l) {
        std::vector<float> k_self, v_self;
        hx = transformer_block_incremental(hx, model_.backbone.coda[l], model_.cfg.heads, coda_k_[l], coda_v_[l], p,
                                           &k_self, &v_self);
        coda_k_[l].insert(coda_k_[l].end(), k_self.begin(), k_self.end());
        coda_v_[l].insert(coda_v_[l].end(), v_self.begin(), v_self.end());
    }
    hx = rmsnorm(hx, model_.backbone.final_norm_gain);
    auto logits = matmul_nt(hx, model_.backbone.tok_embed);

    DecodeResult res;
    res.trace = std::move(trace);
    res.logits = logits.values();
    res.next_token = static_cast<int>(std::max_element(res.logits.begin(), res.logits.end()) - res.logits.begin());
    ++n_positions_;
    return res;
}

Tensor<float> full_forward_logits(Model<float>& model, const std::vector<int>& tokens, int span_start, int span_len,
                                  const std::vector<float>& image, int r_fixed, uint64_t seed) {
    NoGradGuard ng;
    auto hier = model.encode_image(image);
    EncodedSample stub;
    stub.token_ids = tokens;
    stub.span_start = span_start;
    stub.span_len = span_len;
    auto emb = model.embed_sample(stub, hier);
    auto pre = prelude_forward(emb, model.backbone, model.cfg);
    auto sched = build_schedule(r_fixed, model.cfg.injection_mode, model.cfg.use_hierarchy);
    auto state = init_state<float>(emb.e.rows(), model.cfg, seed);
    auto depth = fixed_depth(r_fixed, model.cfg.k_grad);
    state = iterate_forward(pre, span_start, span_len, hier, sched, depth, state, model.backbone, model.cfg);
    return head_logits(state, model.backbone, model.cfg);
}

// ---------------------------------------------------------------------------

double EvalOutcome::mean_first_exit() const {
    if (first_exit_steps.empty()) return 0.0;
    double s = 0;
    for (int e : first_exit_steps) s += e;
    return s / static_cast<double>(first_exit_steps.size());
}

std::vector<int> EvalOutcome::exit_histogram(int r_max) const {
    std::vector<int> hist(static_cast<size_t>(r_max) + 1, 0);
    for (int e : first_exit_steps)
        if (e >= 0 && e <= r_max) ++hist[static_cast<size_t>(e)];
    return hist;
}

namespace {

SampleOutcome run_one_sample(Model<float>& model, const SyntheticScene& scene, const Vocabulary& vocab,
                             const ExitPolicy& policy, int prefill_r, uint64_t seed, int r_bar) {
    const int n_v = model.vcfg.n_tokens();
    auto enc = encode_sample(vocab, scene.question, scene.answer, n_v);
    auto image = image_to_float(scene.image);

    std::vector<int> prompt(enc.token_ids.begin(), enc.token_ids.begin() + enc.answer_start - 1);
    Session session(model, policy);
    session.prefill(prompt, enc.span_start, enc.span_len, image, prefill_r, seed);

    SampleOutcome out;
    int token = enc.token_ids[static_cast<size_t>(enc.answer_start) - 1];
    std::string generated;
    const int max_new = 4;
    for (int i = 0; i < max_new; ++i) {
        auto res = session.decode_token(token);
        if (i == 0) {
            out.first_exit_step = res.trace.exit_step;
            const int probe = std::min(std::max(2, r_bar), policy.r_max);
            if (probe >= 2 && static_cast<int>(res.trace.norm_diffs.size()) >= probe - 1)
                out.first_norm_diff_at_rbar = res.trace.norm_diffs[static_cast<size_t>(probe) - 2];
        }
        if (res.next_token == Vocabulary::eos_id) break;
        if (!vocab.is_char_id(res.next_token)) break;  // structural token: no textual answer
        generated.push_back(vocab.id_to_char(res.next_token));
        token = res.next_token;
    }
    out.generated = generated;
    out.correct = generated == scene.answer;
    return out;
}

}  // namespace

EvalOutcome evaluate_split(Model<float>& model, const std::vector<SyntheticScene>& scenes, const Vocabulary& vocab,
                           const ExitPolicy& policy, int prefill_r, uint64_t seed, int workers) {
    policy.validate();
    const int n = static_cast<int>(scenes.size());
    std::vector<SampleOutcome> outcomes(static_cast<size_t>(n));
    if (workers < 1) workers = static_cast<int>(std::thread::hardware_concurrency());
    if (workers < 1) workers = 1;
    workers = std::min(workers, std::max(1, n));

    std::exception_ptr first_error;
    std::mutex error_mu;
    auto worker = [&](int tid) {
        try {
            for (int i = tid; i < n; i += workers) {
                const uint64_t s = mix_seed({seed, 0xe7a1ull, static_cast<uint64_t>(scenes[i].seed)});
                outcomes[static_cast<size_t>(i)] =
                    run_one_sample(model, scenes[static_cast<size_t>(i)], vocab, policy, prefill_r, s, model.cfg.r_bar);
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

    EvalOutcome out;
    out.n = n;
    for (const auto& oc : outcomes) {
        if (oc.correct) ++out.correct;
        out.first_exit_steps.push_back(oc.first_exit_step);
    }
    return out;
}

double calibrate_epsilon(Model<float>& model, const std::vector<SyntheticScene>& scenes, const Vocabulary& vocab,
                         uint64_t seed, int workers) {
    ExitPolicy full;
    full.epsilon = 0.0;  // never exit early while measuring
    full.min_steps = 2;
    full.r_max = model.cfg.r_max;
    const int prefill_r = model.cfg.r_max;

    const int n = static_cast<int>(scenes.size());
    std::vector<double> values(static_cast<size_t>(n), 0.0);
    if (workers < 1) workers = static_cast<int>(std::thread::hardware_concurrency());
    if (workers < 1) workers = 1;
    workers = std::min(workers, std::max(1, n));

    std::exception_ptr first_error;
    std::mutex error_mu;
    auto worker = [&](int tid) {
        try {
            for (int i = tid; i < n; i += workers) {
                const uint64_t s = mix_seed({seed, 0xca11ull, static_cast<uint64_t>(scenes[i].seed)});
                auto oc = run_one_sample(model, scenes[static_cast<size_t>(i)], vocab, full, prefill_r, s, model.cfg.r_bar);
                values[static_cast<size_t>(i)] = oc.first_norm_diff_at_rbar;
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

    std::sort(values.begin(), values.end());
    if (values.empty()) throw DataError("calibrate_epsilon: empty calibration set");
    return values[values.size() / 2];
}

void export_trace(const Session& session, int steady_step, std::ostream& dist_csv, std::ostream& norm_diff_csv) {
    const auto& states = session.recorded_states();
    if (states.empty()) throw ConfigError("export_trace: session was not run with state recording");
    const int r = static_cast<int>(states.size());
    if (steady_step < 1 || steady_step > r)
        throw ConfigError("export_trace: steady step " + std::to_string(steady_step) + " beyond recorded depth " +
                          std::to_string(r));
    const int n = session.positions();
    const int h = static_cast<int>(states[0].size()) / n;

    dist_csv << "pos";
    for (int t = 1; t <= r; ++t) dist_csv << ",iter" << t;
    dist_csv << "\n";
    const auto& steady = states[static_cast<size_t>(steady_step) - 1];
    for (int i = 0; i < n; ++i) {
        dist_csv << i;
        for (int t = 1; t <= r; ++t) {
            const float* st = states[static_cast<size_t>(t) - 1].data() + static_cast<size_t>(i) * h;
            const float* sT = steady.data() + static_cast<size_t>(i) * h;
            double dd = 0;
            for (int c = 0; c < h; ++c) {
                const double d = static_cast<double>(st[c]) - static_cast<double>(sT[c]);
                dd += d * d;
            }
            dist_csv << "," << std::sqrt(dd);
        }
        dist_csv << "\n";
    }

    norm_diff_csv << "pos";
    for (int t = 2; t <= r; ++t) norm_diff_csv << ",iter" << t;
    norm_diff_csv << "\n";
    for (int i = 0; i < n; ++i) {
        norm_diff_csv << i;
        for (int t = 2; t <= r; ++t) {
            const float* cur = states[static_cast<size_t>(t) - 1].data() + static_cast<size_t>(i) * h;
            const float* prev = states[static_cast<size_t>(t) - 2].data() + static_cast<size_t>(i) * h;
            std::vector<float> a(cur, cur + h), b(prev, prev + h);
            norm_diff_csv << "," << norm_diff(a, b);
        }
        norm_diff_csv << "\n";
    }
}

}  // namespace loopvlm
