#pragma once

// Autoregressive decoding with per-token adaptive early exit on the
// norm_diff criterion and the latest-m4 periodic KV lookup. A session owns
// one cache; prompt positions are prefilled together at a fixed depth,
// generated tokens run the recurrence adaptively, reading earlier tokens'
// caches at the newest valid step congruent to the current one mod P.

#include <array>
#include <ostream>
#include <string>
#include <vector>

#include "loopvlm/model.hpp"
#include "loopvlm/scene.hpp"
#include "loopvlm/vocab.hpp"

namespace loopvlm {

struct ExitPolicy {
    double epsilon = 1e-2;
    int min_steps = 2;
    int r_max = 32;

    void validate() const {
        if (min_steps < 1 || min_steps > r_max) throw ConfigError("exit policy: min_steps must lie in [1, r_max]");
        if (epsilon < 0) throw ConfigError("exit policy: epsilon must be >= 0");
    }
};

// Relative change of a token's state row; +inf on a zero state so a token
// never exits on one.
double norm_diff(const std::vector<float>& h_t, const std::vector<float>& h_prev);

// Newest valid cached step j <= step with j congruent to step mod period;
// falls back to the newest valid entry when no congruent one exists.
// Validity columns are monotone, so `cached_steps` (steps 1..cached valid)
// carries the whole column.
int latest_m4(int step, int cached_steps, int period);

struct TokenTrace {
    int position = 0;
    int exit_step = 0;
    std::vector<double> norm_diffs;  // values at steps 2..exit_step
};

// Per-token, per-iteration key/value entries for the recurrent block stack.
class CacheStore {
public:
    CacheStore() = default;
    CacheStore(int n_layers, int h, int period) : n_layers_(n_layers), h_(h), period_(period) {}

    int period() const { return period_; }
    int positions() const { return static_cast<int>(cols_.size()); }
    void add_position() { cols_.emplace_back(); }

    int cached_steps(int pos) const { return static_cast<int>(cols_[static_cast<size_t>(pos)].size()); }
    bool valid(int step_j, int pos) const { return step_j >= 1 && step_j <= cached_steps(pos); }

    // appends the entry for step cached_steps(pos)+1; k/v hold n_layers*h
    void append_step(int pos, std::vector<float> k, std::vector<float> v);

    const float* k_at(int pos, int step_j, int layer) const;
    const float* v_at(int pos, int step_j, int layer) const;

private:
    struct StepKv {
        std::vector<float> k, v;
    };
    int n_layers_ = 0;
    int h_ = 0;
    int period_ = 4;
    std::vector<std::vector<StepKv>> cols_;
};

class Session {
public:
    Session(Model<float>& model, ExitPolicy policy, bool record_states = false);

    // Prompt positions iterate together for r_fixed steps with the injection
    // schedule active; caches gain full validity up to r_fixed.
    void prefill(const std::vector<int>& prompt, int span_start, int span_len, const std::vector<float>& image,
                 int r_fixed, uint64_t seed);

    // Logits at the last prefilled position (head over the prefill state).
    const std::vector<float>& prefill_logits() const { return prefill_logits_; }

    struct DecodeResult {
        int next_token = 0;
        std::vector<float> logits;  // head output row for this position
        TokenTrace trace;
    };
    // Processes `token_id` at the next position with adaptive early exit and
    // returns the greedy next token. State rows are seeded from the session
    // seed and the absolute position, matching the batched path.
    DecodeResult decode_token(int token_id);

    CacheStore& cache() { return cache_; }
    const CacheStore& cache() const { return cache_; }
    int positions() const { return n_positions_; }
    int prefill_depth() const { return prefill_r_; }
    const ExitPolicy& policy() const { return policy_; }

    // per-step full state matrices (positions x h flattened), prefill only;
    // requires record_states
    const std::vector<std::vector<float>>& recorded_states() const { return recorded_states_; }

private:
    std::vector<float> gather_ctx_kv(int layer, int step, bool keys) const;

    Model<float>& model_;
    ExitPolicy policy_;
    bool record_states_ = false;
    CacheStore cache_;
    int n_positions_ = 0;
    int prefill_r_ = 0;
    uint64_t session_seed_ = 0;

    // single-shot caches for the non-recurrent blocks, one flat (pos x h)
    // buffer per layer
    std::vector<std::vector<float>> prelude_k_, prelude_v_;
    std::vector<std::vector<float>> coda_k_, coda_v_;

    std::vector<float> prefill_logits_;
    std::vector<std::vector<float>> recorded_states_;
};

// Uncached reference path: one full forward at fixed depth over the whole
// token sequence, logits for every position. Row states are seeded exactly
// as the session seeds them, so the two routes are comparable.
Tensor<float> full_forward_logits(Model<float>& model, const std::vector<int>& tokens, int span_start, int span_len,
                                  const std::vector<float>& image, int r_fixed, uint64_t seed);

// ---------------------------------------------------------------------------
// evaluation and traces

struct SampleOutcome {
    bool correct = false;
    int first_exit_step = 0;
    double first_norm_diff_at_rbar = 0.0;
    std::string generated;
};

struct EvalOutcome {
    int n = 0;
    int correct = 0;
    std::vector<int> first_exit_steps;
    double accuracy() const { return n ? static_cast<double>(correct) / n : 0.0; }
    double mean_first_exit() const;
    std::vector<int> exit_histogram(int r_max) const;
};

// Greedy exact-match evaluation; per-sample decode capped at 4 new tokens.
EvalOutcome evaluate_split(Model<float>& model, const std::vector<SyntheticScene>& scenes, const Vocabulary& vocab,
                           const ExitPolicy& policy, int prefill_r, uint64_t seed, int workers);

// One-off epsilon calibration: median first-token norm_diff at step r_bar
// over the calibration set, measured with early exit disabled.
double calibrate_epsilon(Model<float>& model, const std::vector<SyntheticScene>& scenes, const Vocabulary& vocab,
                         uint64_t seed, int workers);

// Distance-to-steady-state matrix (positions x iterations, steady state at
// step T) and the per-position norm_diff curves, both as CSV.
void export_trace(const Session& session, int steady_step, std::ostream& dist_csv, std::ostream& norm_diff_csv);

}  // namespace loopvlm
