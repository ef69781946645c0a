// loopvlm: depth-recurrent multimodal transformer on synthetic visual QA.
// One binary: gen-data | train | eval | infer | trace.
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "loopvlm/config.hpp"
#include "loopvlm/dataset.hpp"
#include "loopvlm/inference.hpp"
#include "loopvlm/model.hpp"
#include "loopvlm/training.hpp"

namespace fs = std::filesystem;
using namespace loopvlm;

namespace {

struct CliState {
    std::string config_path;
    uint64_t seed_override = 0;
    bool seed_set = false;
    std::string mode_override;
    bool print_config = false;
};

RunConfig resolve_config(const CliState& cli) {
    RunConfig rc;
    if (!cli.config_path.empty()) rc = load_run_config(cli.config_path);
    if (cli.seed_set) rc.master_seed = cli.seed_override;
    if (!cli.mode_override.empty()) {
        if (cli.mode_override == "stride")
            rc.model.injection_mode = InjectionMode::stride;
        else if (cli.mode_override == "prefix")
            rc.model.injection_mode = InjectionMode::prefix;
        else
            throw ConfigError("--mode must be 'stride' or 'prefix'");
    }
    const char* root = std::getenv("LOOPVLM_OUT");
    if (root && *root && fs::path(rc.out_dir).is_relative()) rc.out_dir = (fs::path(root) / rc.out_dir).string();
    rc.validate();
    return rc;
}

fs::path data_dir(const RunConfig& rc) { return fs::path(rc.out_dir) / "data"; }

std::vector<SplitSpec> split_specs(const RunConfig& rc) {
    return {
        {"train", rc.data.train_count, rc.data.train_seed_start, rc.data.global_count_frac},
        {"eval", rc.data.eval_count, rc.data.eval_seed_start, rc.data.global_count_frac},
        {"calib", rc.data.calib_count, rc.data.calib_seed_start, rc.data.global_count_frac},
    };
}

int cmd_gen_data(const RunConfig& rc, bool force) {
    auto dir = data_dir(rc);
    auto manifest_path = dir / "manifest.json";
    if (fs::exists(manifest_path) && !force)
        throw DataError("output already exists: " + manifest_path.string() + " (use --force to overwrite)");
    auto splits = split_specs(rc);
    validate_disjoint(splits);
    fs::create_directories(dir);
    for (const auto& spec : splits) {
        auto scenes = build_split(spec);
        write_split_file((dir / (spec.name + ".jsonl")).string(), scenes);
        std::cout << "wrote " << spec.name << ": " << scenes.size() << " samples (seeds " << spec.seed_start << ".."
                  << spec.seed_start + static_cast<uint32_t>(spec.count) - 1 << ")\n";
    }
    std::ofstream m(manifest_path);
    m << manifest_json(splits);
    std::cout << "wrote " << manifest_path.string() << "\n";
    return 0;
}

std::vector<SyntheticScene> load_split(const RunConfig& rc, const std::string& name) {
    auto dir = data_dir(rc);
    auto manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path))
        throw DataError("no dataset manifest at " + manifest_path.string() + " (run gen-data first)");
    std::ifstream is(manifest_path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    auto splits = parse_manifest(text);
    for (const auto& s : splits)
        if (s.name == name) return read_split_file((dir / (name + ".jsonl")).string());
    throw DataError("split '" + name + "' not in manifest");
}

fs::path stage_ckpt_path(const RunConfig& rc, int stage) {
    return fs::path(rc.out_dir) / ("ckpt_stage" + std::to_string(stage) + ".lvlm");
}

int cmd_train(const RunConfig& rc, int stage_select, const std::string& resume, const std::string& init_from) {
    fs::create_directories(rc.out_dir);
    auto scenes = load_split(rc, "train");
    Model<float> model;
    model.cfg = rc.model;
    model.vcfg = rc.vision;
    auto train_set = prepare_samples(scenes, model.vocab, rc.vision.n_tokens(), rc.train.loss_on_question);

    std::vector<int> stages;
    if (stage_select == 0)
        stages = {1, 2, 3};
    else
        stages = {stage_select};

    for (int stage : stages) {
        CheckpointMeta resume_meta;
        NamedArrays resume_opt;
        const CheckpointMeta* meta_ptr = nullptr;
        const NamedArrays* opt_ptr = nullptr;

        if (!resume.empty() && stage == stages.front()) {
            resume_meta = load_checkpoint(resume, model, &resume_opt);
            if (resume_meta.stage != stage)
                throw ConfigError("resume checkpoint holds stage " + std::to_string(resume_meta.stage) +
                                  ", requested stage " + std::to_string(stage));
            meta_ptr = &resume_meta;
            opt_ptr = &resume_opt;
            std::cout << "resuming stage " << stage << " at step " << resume_meta.step << "\n";
        } else if (stage == 1) {
            if (!init_from.empty())
                load_checkpoint(init_from, model);
            else
                model.init(rc.master_seed);
        } else if (stage == stages.front()) {
            auto prev = stage_ckpt_path(rc, stage - 1);
            if (!init_from.empty()) {
                load_checkpoint(init_from, model);
            } else if (fs::exists(prev)) {
                load_checkpoint(prev.string(), model);
            } else {
                throw ConfigError("stage " + std::to_string(stage) + " needs a prior checkpoint (" + prev.string() +
                                  " missing; pass --init-from)");
            }
        }
        // continuing within this invocation: model already holds the previous
        // stage's weights

        auto metrics_path = fs::path(rc.out_dir) / ("metrics_stage" + std::to_string(stage) + ".jsonl");
        auto result = run_stage(model, stage, rc, train_set, metrics_path.string(),
                                stage_ckpt_path(rc, stage).string(), meta_ptr, opt_ptr, &std::cout);
        std::cout << "stage " << stage << " done: " << result.steps << " steps, final loss " << std::fixed
                  << std::setprecision(4) << result.final_loss << ", skipped " << result.skipped_steps << "\n";
    }
    return 0;
}

int cmd_eval(const RunConfig& rc, const std::vector<std::string>& checkpoints, const std::vector<int>& r_list,
             const std::string& split) {
    auto scenes = load_split(rc, split);
    nlohmann::json table = nlohmann::json::array();

    std::cout << std::left << std::setw(28) << "checkpoint" << std::setw(8) << "r" << "accuracy\n";
    for (const auto& ckpt : checkpoints) {
        Model<float> model;
        load_checkpoint(ckpt, model);
        for (int r : r_list) {
            if (r < 1 || r > model.cfg.r_max)
                throw ConfigError("eval: r=" + std::to_string(r) + " outside [1, r_max=" +
                                  std::to_string(model.cfg.r_max) + "]");
            ExitPolicy policy;
            policy.epsilon = 0.0;  // fixed depth
            policy.min_steps = std::min(2, r);
            policy.r_max = r;
            auto outcome = evaluate_split(model, scenes, model.vocab, policy, r, rc.master_seed, rc.train.workers);
            nlohmann::json row = {{"checkpoint", ckpt}, {"r", r}, {"accuracy", outcome.accuracy()}, {"n", outcome.n}};
            table.push_back(row);
            std::cout << std::left << std::setw(28) << fs::path(ckpt).filename().string() << std::setw(8) << r
                      << std::fixed << std::setprecision(4) << outcome.accuracy() << "\n";
        }
    }
    fs::create_directories(rc.out_dir);
    std::ofstream os(fs::path(rc.out_dir) / "eval.json");
    os << table.dump(2) << "\n";
    return 0;
}

SyntheticScene scene_for_infer(const RunConfig& rc, long sample_seed, const std::string& task,
                               const std::string& record_path) {
    if (!record_path.empty()) {
        auto scenes = read_split_file(record_path);
        if (scenes.empty()) throw DataError("no records in " + record_path);
        return scenes.front();
    }
    if (sample_seed < 0) throw ConfigError("infer/trace: pass --sample-seed or --record");
    (void)rc;
    return generate_scene(static_cast<uint32_t>(sample_seed), task_from_name(task));
}

int cmd_infer(const RunConfig& rc, const std::string& ckpt, long sample_seed, const std::string& task,
              const std::string& record_path, double epsilon_override) {
    Model<float> model;
    load_checkpoint(ckpt, model);
    auto scene = scene_for_infer(rc, sample_seed, task, record_path);

    ExitPolicy policy;
    policy.epsilon = epsilon_override >= 0 ? epsilon_override : rc.infer.epsilon;
    policy.min_steps = rc.infer.min_steps;
    policy.r_max = model.cfg.r_max;
    const int prefill_r = rc.infer.prefill_r > 0 ? rc.infer.prefill_r : model.cfg.r_max;

    auto enc = encode_sample(model.vocab, scene.question, scene.answer, model.vcfg.n_tokens());
    auto image = image_to_float(scene.image);
    std::vector<int> prompt(enc.token_ids.begin(), enc.token_ids.begin() + enc.answer_start - 1);
    Session session(model, policy);
    session.prefill(prompt, enc.span_start, enc.span_len, image,
                    std::min(prefill_r, policy.r_max), mix_seed({rc.master_seed, scene.seed}));

    std::string generated;
    std::vector<int> exits;
    int token = enc.token_ids[static_cast<size_t>(enc.answer_start) - 1];
    for (int i = 0; i < 4; ++i) {
        auto res = session.decode_token(token);
        exits.push_back(res.trace.exit_step);
        if (res.next_token == Vocabulary::eos_id || !model.vocab.is_char_id(res.next_token)) break;
        generated.push_back(model.vocab.id_to_char(res.next_token));
        token = res.next_token;
    }
    double mean_steps = 0;
    for (int e : exits) mean_steps += e;
    mean_steps /= exits.empty() ? 1.0 : static_cast<double>(exits.size());

    std::cout << "question: " << scene.question << "\n";
    std::cout << "answer:   " << generated << "\n";
    std::cout << "exit steps:";
    for (int e : exits) std::cout << " " << e;
    std::cout << "\nmean steps: " << std::fixed << std::setprecision(2) << mean_steps << "\n";

    std::vector<int> hist(static_cast<size_t>(policy.r_max) + 1, 0);
    for (int e : exits) ++hist[static_cast<size_t>(e)];
    fs::create_directories(rc.out_dir);
    std::ofstream os(fs::path(rc.out_dir) / "exit_hist.jsonl", std::ios::app);
    nlohmann::json line = {{"benchmark", task_name(scene.task)}, {"mean_steps", mean_steps}, {"histogram", hist}};
    os << line.dump() << "\n";
    return 0;
}

void write_heatmap_ppm(const std::string& csv_path, const std::string& ppm_path) {
    std::ifstream is(csv_path);
    if (!is) throw DataError("cannot reopen " + csv_path);
    std::string line;
    std::getline(is, line);  // header
    std::vector<std::vector<double>> rows;
    double vmax = 0;
    while (std::getline(is, line)) {
        std::vector<double> row;
        size_t pos = line.find(',');  // skip pos column
        while (pos != std::string::npos) {
            size_t next = line.find(',', pos + 1);
            row.push_back(std::stod(line.substr(pos + 1, next - pos - 1)));
            vmax = std::max(vmax, row.back());
            pos = next;
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw DataError("empty trace CSV");
    const int cell = 6;
    const int w = static_cast<int>(rows[0].size()) * cell, h = static_cast<int>(rows.size()) * cell;
    std::ofstream os(ppm_path, std::ios::binary);
    os << "P6\n" << w << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double v = rows[static_cast<size_t>(y / cell)][static_cast<size_t>(x / cell)] / (vmax > 0 ? vmax : 1);
            // dark blue (converged) to warm red (far from steady state)
            uint8_t rgb[3] = {static_cast<uint8_t>(40 + 215 * v), static_cast<uint8_t>(40 + 60 * (1 - v)),
                              static_cast<uint8_t>(40 + 215 * (1 - v))};
            os.write(reinterpret_cast<const char*>(rgb), 3);
        }
}

int cmd_trace(const RunConfig& rc, const std::string& ckpt, long sample_seed, const std::string& task,
              const std::string& record_path, int steady, bool plot) {
    Model<float> model;
    load_checkpoint(ckpt, model);
    if (steady <= 0) steady = model.cfg.r_max;
    if (steady > model.cfg.r_max)
        throw ConfigError("trace: steady step " + std::to_string(steady) + " beyond r_max " +
                          std::to_string(model.cfg.r_max));
    auto scene = scene_for_infer(rc, sample_seed, task, record_path);
    auto enc = encode_sample(model.vocab, scene.question, scene.answer, model.vcfg.n_tokens());
    auto image = image_to_float(scene.image);

    ExitPolicy policy;
    policy.epsilon = 0.0;
    policy.r_max = model.cfg.r_max;
    Session session(model, policy, /*record_states=*/true);
    session.prefill(enc.token_ids, enc.span_start, enc.span_len, image, model.cfg.r_max,
                    mix_seed({rc.master_seed, scene.seed}));

    fs::create_directories(rc.out_dir);
    auto dist_path = fs::path(rc.out_dir) / "trace_dist.csv";
    auto nd_path = fs::path(rc.out_dir) / "trace_norm_diff.csv";
    std::ofstream dist_csv(dist_path), nd_csv(nd_path);
    export_trace(session, steady, dist_csv, nd_csv);
    dist_csv.close();
    nd_csv.close();
    std::cout << "wrote " << dist_path.string() << " and " << nd_path.string() << "\n";
    if (plot) {
        auto ppm = fs::path(rc.out_dir) / "trace_dist.ppm";
        write_heatmap_ppm(dist_path.string(), ppm.string());
        std::cout << "wrote " << ppm.string() << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"depth-recurrent multimodal transformer on synthetic visual QA"};
    app.require_subcommand(0, 1);

    CliState cli;
    app.add_option("--config", cli.config_path, "run configuration JSON");
    app.add_option("--seed", cli.seed_override, "master seed override")->each([&](const std::string&) {
        cli.seed_set = true;
    });
    app.add_option("--mode", cli.mode_override, "injection mode override (stride|prefix)");
    app.add_flag("--print-config", cli.print_config, "dump the resolved configuration and exit");

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic splits");
    bool force = false;
    gen->add_flag("--force", force, "overwrite existing output");

    auto* train = app.add_subcommand("train", "run the staged training pipeline");
    int stage = 0;
    std::string resume, init_from;
    train->add_option("--stage", stage, "train a single stage (default: 1 then 2 then 3)")
        ->check(CLI::Range(1, 3));
    train->add_option("--resume", resume, "continue an interrupted stage from its checkpoint");
    train->add_option("--init-from", init_from, "initialize from a checkpoint instead of the previous stage");

    auto* eval = app.add_subcommand("eval", "exact-match accuracy over a recurrence sweep");
    std::vector<std::string> checkpoints;
    std::string r_list_text = "1,8,16";
    std::string split = "eval";
    eval->add_option("--checkpoint", checkpoints, "checkpoint(s) to evaluate")->required();
    eval->add_option("--r-list", r_list_text, "comma-separated recurrence depths");
    eval->add_option("--split", split, "dataset split name");

    auto* infer = app.add_subcommand("infer", "adaptive-compute answer for one sample");
    std::string ckpt, task = "global_count", record_path;
    long sample_seed = -1;
    double epsilon_override = -1;
    infer->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    infer->add_option("--sample-seed", sample_seed, "scene seed");
    infer->add_option("--task", task, "task kind for --sample-seed");
    infer->add_option("--record", record_path, "JSONL record file instead of a generated scene");
    infer->add_option("--epsilon", epsilon_override, "early-exit threshold override");

    auto* trace = app.add_subcommand("trace", "latent-state trajectory export");
    std::string t_ckpt, t_task = "global_count", t_record;
    long t_sample_seed = -1;
    int steady = 0;
    bool plot = false;
    trace->add_option("--checkpoint", t_ckpt, "model checkpoint")->required();
    trace->add_option("--sample-seed", t_sample_seed, "scene seed");
    trace->add_option("--task", t_task, "task kind for --sample-seed");
    trace->add_option("--record", t_record, "JSONL record file");
    trace->add_option("--steady-T", steady, "steady-state reference step (default r_max)");
    trace->add_flag("--plot", plot, "also render a heatmap image");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig rc = resolve_config(cli);
        if (cli.print_config) {
            std::cout << run_config_json(rc).dump(2) << "\n";
            return 0;
        }
        if (gen->parsed()) return cmd_gen_data(rc, force);
        if (train->parsed()) return cmd_train(rc, stage, resume, init_from);
        if (eval->parsed()) {
            std::vector<int> r_list;
            for (size_t pos = 0; pos < r_list_text.size();) {
                size_t next = r_list_text.find(',', pos);
                if (next == std::string::npos) next = r_list_text.size();
                r_list.push_back(std::stoi(r_list_text.substr(pos, next - pos)));
                pos = next + 1;
            }
            return cmd_eval(rc, checkpoints, r_list, split);
        }
        if (infer->parsed()) return cmd_infer(rc, ckpt, sample_seed, task, record_path, epsilon_override);
        if (trace->parsed()) return cmd_trace(rc, t_ckpt, t_sample_seed, t_task, t_record, steady, plot);
        std::cout << app.help();
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
