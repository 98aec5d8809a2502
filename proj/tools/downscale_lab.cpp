// downscale_lab: synthetic climate downscaling experiments.
//
// Subcommands: gen-data, train, eval, matrix, render, check.
// Exit codes: 0 ok, 2 config error, 3 training divergence, 4 matrix cell
// failure, 5 self-check failure, 1 anything else.

#include <cstdlib>
#include <map>
#include <mutex>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "downscale/config.hpp"
#include "downscale/data.hpp"
#include "downscale/render.hpp"
#include "downscale/rng.hpp"
#include "downscale/selfcheck.hpp"
#include "downscale/train.hpp"
#include "downscale/unet.hpp"

namespace fs = std::filesystem;
using namespace downscale;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitMatrixCell = 4;
constexpr int kExitSelfCheck = 5;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool verbose = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "config file (key = value with [section] headers)");
    cmd->add_option("--set", args.overrides, "override, section.key=value (repeatable)");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "base seed (overrides data.seed and train.seed)")
        ->each([&args](const std::string&) { args.seed_given = true; });
    cmd->add_flag("-v,--verbose", args.verbose, "per-epoch / per-cell progress");
}

ResolvedConfig load_config(const CommonArgs& args) {
    ConfigFile file;
    if (!args.config_path.empty()) file = ConfigFile::from_file(args.config_path);
    for (const std::string& o : args.overrides) file.set(o);
    return ResolvedConfig(std::move(file));
}

int worker_cap() {
    if (const char* env = std::getenv("DOWNSCALE_LAB_THREADS")) {
        try {
            const int n = std::stoi(env);
            if (n >= 1) return n;
        } catch (const std::exception&) {
            throw ConfigError("DOWNSCALE_LAB_THREADS must be a positive integer");
        }
    }
    return 1 << 16;
}

std::function<void(const std::string&)> logger(const CommonArgs& args) {
    if (!args.verbose) return nullptr;
    return [](const std::string& line) { std::cout << "  " << line << std::endl; };
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << text;
}

std::string history_csv(const TrainHistory& h) {
    std::ostringstream os;
    os << "epoch,train_loss,val_abs_diff,val_mse,val_abs_diff_transformed,val_mse_transformed,gamma,"
          "wall_ms\n";
    for (std::size_t e = 0; e < h.train_loss.size(); ++e) {
        const MetricsReport& v = h.val_metrics[e];
        os << e << ',' << format_double(h.train_loss[e]) << ',' << format_double(v.avg_abs_diff) << ','
           << format_double(v.avg_mse) << ',' << format_double(v.avg_abs_diff_transformed) << ','
           << format_double(v.avg_mse_transformed) << ',' << format_double(h.gamma_values[e]) << ','
           << format_double(h.epoch_ms[e]) << "\n";
    }
    return os.str();
}

std::string metrics_csv(const std::string& method, const MetricsReport& m, double gamma_final,
                        std::uint64_t seed) {
    std::ostringstream os;
    os << "method,avg_abs_diff,avg_mse,avg_abs_diff_transformed,avg_mse_transformed,gamma_final,seed\n";
    os << method << ',' << format_double(m.avg_abs_diff) << ',' << format_double(m.avg_mse) << ','
       << format_double(m.avg_abs_diff_transformed) << ',' << format_double(m.avg_mse_transformed) << ','
       << format_double(gamma_final) << ',' << seed << "\n";
    return os.str();
}

// ---- subcommands ----

int cmd_gen_data(const CommonArgs& args) {
    ResolvedConfig cfg = load_config(args);
    DatasetSpec spec = dataset_from_config(cfg);
    if (args.seed_given) {
        spec.seed = args.seed;
        cfg.pin("data.seed", std::to_string(args.seed));
    }
    register_full_schema(cfg);
    cfg.finish();
    spec.validate();

    fs::create_directories(args.out_dir);
    write_manifest(args.out_dir, "gen-data", cfg);
    Dataset ds = generate_dataset(spec);
    const fs::path path = fs::path(args.out_dir) / "dataset.bin";
    save_dataset(ds, path);

    std::vector<SamplePair> all = ds.train;
    all.insert(all.end(), ds.val.begin(), ds.val.end());
    all.insert(all.end(), ds.test.begin(), ds.test.end());
    FieldStats st = predictand_stats(all);
    std::cout << "dataset: " << path.string() << "\n"
              << "variable: " << variable_name(spec.variable) << "\n"
              << "samples: " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size()
              << " train/val/test\n"
              << "zero_fraction: " << format_double(st.zero_fraction) << "\n"
              << "tail_ratio_p999_over_nonzero_mean: " << format_double(st.tail_ratio) << "\n"
              << "mean: " << format_double(st.mean) << "  std: " << format_double(st.stddev)
              << "  skewness: " << format_double(st.skewness) << "\n";
    return kExitOk;
}

int cmd_train(const CommonArgs& args, const std::string& data_path, bool gen) {
    ResolvedConfig cfg = load_config(args);
    DatasetSpec dspec = dataset_from_config(cfg);
    ExperimentSpec spec;
    spec.loss = loss_from_config(cfg);
    spec.preproc = preproc_from_config(cfg);
    spec.train = train_config_from_config(cfg);
    if (args.seed_given) {
        spec.train.seed = args.seed;
        cfg.pin("train.seed", std::to_string(args.seed));
    }

    Dataset data;
    if (!data_path.empty()) {
        data = load_dataset(data_path);
    } else if (gen) {
        if (args.seed_given) {
            dspec.seed = args.seed;
            cfg.pin("data.seed", std::to_string(args.seed));
        }
        dspec.validate();
        data = generate_dataset(dspec);
    } else {
        throw ConfigError("train: provide --data <dataset.bin> or --gen");
    }
    spec.variable = data.spec.variable;
    spec.model = model_from_config(cfg, data.spec.input_channels());
    register_full_schema(cfg);
    cfg.finish();
    spec.validate();

    fs::create_directories(args.out_dir);
    write_manifest(args.out_dir, "train", cfg);
    TrainResult res = train(spec, data, logger(args));

    const fs::path ck = fs::path(args.out_dir) / "checkpoint.bin";
    save_checkpoint(ck, res.model, pipeline_to_blobs(res.pipeline));
    write_text(fs::path(args.out_dir) / "history.csv", history_csv(res.history));
    write_text(fs::path(args.out_dir) / "metrics.csv",
               metrics_csv(method_label(spec.loss, spec.preproc), res.test_metrics, res.gamma_final,
                           spec.train.seed));
    std::cout << "checkpoint: " << ck.string() << "\n"
              << "best_epoch: " << res.history.best_epoch << "\n"
              << "test avg_abs_diff: " << format_double(res.test_metrics.avg_abs_diff) << "\n"
              << "test avg_mse: " << format_double(res.test_metrics.avg_mse) << "\n"
              << "gamma_final: " << format_double(res.gamma_final) << "\n";
    return kExitOk;
}

int cmd_eval(const CommonArgs& args, const std::string& data_path, const std::string& checkpoint_path) {
    ResolvedConfig cfg = load_config(args);
    register_full_schema(cfg);
    cfg.finish();
    Dataset data = load_dataset(data_path);
    auto [model, blobs] = load_checkpoint(checkpoint_path);
    PreprocPipeline pipe = pipeline_from_blobs(blobs);
    MetricsReport m = evaluate(model, pipe, data.test);

    fs::create_directories(args.out_dir);
    write_manifest(args.out_dir, "eval", cfg);
    write_text(fs::path(args.out_dir) / "metrics.csv", metrics_csv("eval", m, pipe.gamma.gamma(), 0));
    std::cout << "test avg_abs_diff: " << format_double(m.avg_abs_diff) << "\n"
              << "test avg_mse: " << format_double(m.avg_mse) << "\n"
              << "transformed avg_abs_diff: " << format_double(m.avg_abs_diff_transformed) << "\n"
              << "transformed avg_mse: " << format_double(m.avg_mse_transformed) << "\n";
    return kExitOk;
}

int cmd_matrix(const CommonArgs& args, int jobs) {
    ResolvedConfig cfg = load_config(args);
    MatrixConfig mc;
    mc.data = dataset_from_config(cfg);
    mc.train = train_config_from_config(cfg);
    mc.model = model_from_config(cfg, mc.data.input_channels());
    mc.seed_repeats = matrix_repeats_from_config(cfg);
    mc.base_seed = matrix_base_seed_from_config(cfg);
    if (args.seed_given) {
        mc.base_seed = args.seed;
        cfg.pin("matrix.base_seed", std::to_string(args.seed));
    }
    mc.jobs = std::min(jobs, worker_cap());
    register_full_schema(cfg);
    cfg.finish();

    fs::create_directories(args.out_dir);
    write_manifest(args.out_dir, "matrix", cfg);

    // keep the repeat-0 checkpoints for the comparison panel
    std::mutex sink_mutex;
    std::map<std::string, fs::path> first_checkpoints;
    auto sink = [&](const MatrixCell& cell, const TrainResult& res) {
        std::lock_guard<std::mutex> lock(sink_mutex);
        const fs::path dir =
            fs::path(args.out_dir) / ("cell_" + cell.method + "_seed" + std::to_string(cell.repeat));
        fs::create_directories(dir);
        save_checkpoint(dir / "checkpoint.bin", res.model, pipeline_to_blobs(res.pipeline));
        write_text(dir / "history.csv", history_csv(res.history));
        write_text(dir / "metrics.csv",
                   metrics_csv(cell.method, res.test_metrics, res.gamma_final, cell.seed));
        if (cell.repeat == 0) first_checkpoints[cell.method] = dir / "checkpoint.bin";
    };

    ResultsTable table = run_matrix_with_sink(mc, logger(args), sink);
    write_text(fs::path(args.out_dir) / "results.csv", table.csv());
    write_text(fs::path(args.out_dir) / "results.txt", table.text_table());
    std::cout << table.text_table();

    // comparison panel on the first test sample of the repeat-0 dataset
    DatasetSpec ds0 = mc.data;
    ds0.seed = Rng(mc.base_seed).split(1000).next_u64();
    Dataset data0 = generate_dataset(ds0);
    const SamplePair& sample = data0.test.front();
    std::vector<Panel> panels;
    panels.push_back({"truth", sample.target});
    Tensor input_pred = slice_channels(
        Tensor::from({1, sample.input.dim(0), sample.input.dim(1), sample.input.dim(2)},
                     sample.input.values()),
        0, 1);
    panels.push_back({"input", input_pred});
    for (const char* method : kMatrixMethodOrder) {
        auto it = first_checkpoints.find(method);
        if (it == first_checkpoints.end()) continue;
        auto [model, blobs] = load_checkpoint(it->second);
        PreprocPipeline pipe = pipeline_from_blobs(blobs);
        auto [physical, transformed] = predict(model, pipe, sample);
        panels.push_back({method, physical});
    }
    double lo = sample.target.values()[0], hi = lo;
    for (const Panel& p : panels)
        for (double v : p.field.values()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (!(lo < hi)) hi = lo + 1.0;
    const fs::path panel_path =
        fs::path(args.out_dir) / (variable_name(mc.data.variable) + "_matrix_panel.ppm");
    render_panel(panels, lo, hi, ColorMap::sequential(), panel_path);
    std::cout << "panel: " << panel_path.string() << " (" << panels.size() << " panels)\n";

    if (table.any_failed()) {
        for (const MatrixCell& c : table.cells)
            if (c.failed)
                std::cerr << "cell failed: " << c.method << " repeat " << c.repeat << ": " << c.error
                          << "\n";
        return kExitMatrixCell;
    }
    return kExitOk;
}

int cmd_render(const CommonArgs& args, const std::string& data_path, const std::string& checkpoint_path,
               int sample_index) {
    ResolvedConfig cfg = load_config(args);
    register_full_schema(cfg);
    cfg.finish();
    Dataset data = load_dataset(data_path);
    if (sample_index < 0 || sample_index >= static_cast<int>(data.test.size()))
        throw ConfigError("render: sample index out of range (test split has " +
                          std::to_string(data.test.size()) + " samples)");
    const SamplePair& sample = data.test[static_cast<std::size_t>(sample_index)];

    fs::create_directories(args.out_dir);
    write_manifest(args.out_dir, "render", cfg);

    const std::string var = variable_name(data.spec.variable);
    std::vector<Panel> panels;
    panels.push_back({"truth", sample.target});
    Tensor input_ch0 = slice_channels(
        Tensor::from({1, sample.input.dim(0), sample.input.dim(1), sample.input.dim(2)},
                     sample.input.values()),
        0, 1);
    panels.push_back({"input", input_ch0});

    Tensor diff;
    std::string method = "none";
    if (!checkpoint_path.empty()) {
        auto [model, blobs] = load_checkpoint(checkpoint_path);
        PreprocPipeline pipe = pipeline_from_blobs(blobs);
        auto [physical, transformed] = predict(model, pipe, sample);
        panels.push_back({"prediction", physical});
        diff = Tensor::zeros(physical.shape());
        for (std::size_t i = 0; i < diff.values().size(); ++i)
            diff.values()[i] = physical.values()[i] - sample.target.values()[i];
        method = "model";
    }

    double lo = sample.target.values()[0], hi = lo;
    for (const Panel& p : panels)
        for (double v : p.field.values()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (!(lo < hi)) hi = lo + 1.0;
    const fs::path panel_path = fs::path(args.out_dir) / (var + "_" + method + "_panel.ppm");
    render_panel(panels, lo, hi, ColorMap::sequential(), panel_path);
    std::cout << "panel: " << panel_path.string() << "\n";

    if (diff.defined()) {
        auto [dlo, dhi] = symmetric_range(diff);
        const fs::path diff_path = fs::path(args.out_dir) / (var + "_" + method + "_diff.ppm");
        render_heatmap(diff, dlo, dhi, ColorMap::diverging(), diff_path);
        std::cout << "diff: " << diff_path.string() << "\n";
    }
    return kExitOk;
}

int cmd_check(const CommonArgs& args) {
    ResolvedConfig cfg = load_config(args);
    register_full_schema(cfg);
    cfg.finish();
    std::vector<CheckResult> results = run_self_checks();
    bool all = true;
    for (const CheckResult& r : results) {
        std::printf("%-28s %s  (%.0f ms)  %s\n", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.ms,
                    r.detail.c_str());
        all = all && r.passed;
    }
    std::cout << (all ? "all checks passed" : "SELF-CHECK FAILURE") << "\n";
    return all ? kExitOk : kExitSelfCheck;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic climate downscaling lab"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args, matrix_args, render_args, check_args;
    std::string train_data, eval_data, eval_ck, render_data, render_ck;
    bool train_gen = false;
    int matrix_jobs = 1;
    int render_sample = 0;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset container");
    add_common(gen, gen_args);

    CLI::App* tr = app.add_subcommand("train", "train one experiment cell");
    add_common(tr, train_args);
    tr->add_option("--data", train_data, "dataset container path");
    tr->add_flag("--gen", train_gen, "generate the dataset from [data] config instead of loading");

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset's test split");
    add_common(ev, eval_args);
    ev->add_option("--data", eval_data, "dataset container path")->required();
    ev->add_option("--checkpoint", eval_ck, "checkpoint path")->required();

    CLI::App* mx = app.add_subcommand("matrix", "run the six-cell loss/preprocessing matrix");
    add_common(mx, matrix_args);
    mx->add_option("--jobs", matrix_jobs, "parallel cell workers (default 1 for serial logs)");

    CLI::App* rd = app.add_subcommand("render", "render truth/input/prediction heatmap panels");
    add_common(rd, render_args);
    rd->add_option("--data", render_data, "dataset container path")->required();
    rd->add_option("--checkpoint", render_ck, "checkpoint path (optional)");
    rd->add_option("--sample", render_sample, "test-split sample index");

    CLI::App* ck = app.add_subcommand("check", "run the fast invariant self-checks");
    add_common(ck, check_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_args);
        if (tr->parsed()) return cmd_train(train_args, train_data, train_gen);
        if (ev->parsed()) return cmd_eval(eval_args, eval_data, eval_ck);
        if (mx->parsed()) return cmd_matrix(matrix_args, matrix_jobs);
        if (rd->parsed()) return cmd_render(render_args, render_data, render_ck, render_sample);
        if (ck->parsed()) return cmd_check(check_args);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
