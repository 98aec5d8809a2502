#include "downscale/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <thread>

#include "downscale/rng.hpp"

namespace downscale {

std::string loss_name(LossKind k) { return k == LossKind::L1 ? "L1" : "L2"; }

LossKind loss_from_name(const std::string& name) {
    if (name == "L1" || name == "l1") return LossKind::L1;
    if (name == "L2" || name == "l2") return LossKind::L2;
    throw ConfigError("unknown loss '" + name + "' (expected L1 or L2)");
}

std::string preproc_name(PreprocMode m) {
    switch (m) {
        case PreprocMode::None: return "none";
        case PreprocMode::Fixed22: return "fixed_2.2";
        case PreprocMode::Learnable: return "learnable";
    }
    return "none";
}

PreprocMode preproc_from_name(const std::string& name) {
    if (name == "none") return PreprocMode::None;
    if (name == "fixed_2.2" || name == "fixed22" || name == "nl2.2") return PreprocMode::Fixed22;
    if (name == "learnable" || name == "learn") return PreprocMode::Learnable;
    throw ConfigError("unknown preprocessing mode '" + name + "' (expected none, fixed_2.2 or learnable)");
}

std::string method_label(LossKind loss, PreprocMode preproc) {
    std::string label = loss_name(loss);
    if (preproc == PreprocMode::Fixed22) label += "+NL2.2";
    if (preproc == PreprocMode::Learnable) label += "+Learn";
    return label;
}

void ExperimentSpec::validate() const {
    model.validate();
    if (train.epochs <= 0 || train.batch_size <= 0)
        throw ConfigError("ExperimentSpec: epochs and batch_size must be positive");
    if (train.learning_rate <= 0) throw ConfigError("ExperimentSpec: learning rate must be positive");
    if (train.beta1 < 0 || train.beta1 >= 1 || train.beta2 < 0 || train.beta2 >= 1)
        throw ConfigError("ExperimentSpec: beta parameters must be in [0, 1)");
}

// ---- Adam ----

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (Tensor& p : params) {
        Slot s;
        s.param = p;
        s.m.assign(static_cast<std::size_t>(p.numel()), 0.0);
        s.v.assign(static_cast<std::size_t>(p.numel()), 0.0);
        slots_.push_back(std::move(s));
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t si = 0; si < slots_.size(); ++si) {
        Slot& s = slots_[si];
        double* w = s.param.values().data();
        const std::vector<double>& g = s.param.grad(); // zero-filled if backward never touched it
        const std::size_t n = s.m.size();
        for (std::size_t i = 0; i < n; ++i) {
            const double gi = g[i];
            if (!std::isfinite(gi))
                throw DivergenceError("adam_step: non-finite gradient in parameter " + std::to_string(si) +
                                          " at element " + std::to_string(i),
                                      -1);
            s.m[i] = b1_ * s.m[i] + (1.0 - b1_) * gi;
            s.v[i] = b2_ * s.v[i] + (1.0 - b2_) * gi * gi;
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (Slot& s : slots_) s.param.zero_grad();
}

// ---- pipeline ----

PreprocPipeline build_pipeline(PreprocMode mode, const Dataset& data) {
    PreprocPipeline p;
    switch (mode) {
        case PreprocMode::None: p.gamma = GammaTransform::none(); break;
        case PreprocMode::Fixed22: p.gamma = GammaTransform::fixed(2.2, {0}); break;
        case PreprocMode::Learnable: p.gamma = GammaTransform::learnable({0}); break;
    }
    // normalization statistics describe what the network sees: fit on
    // gamma-transformed training data (identity at the learnable start)
    std::vector<Tensor> inputs, targets;
    inputs.reserve(data.train.size());
    targets.reserve(data.train.size());
    for (const SamplePair& s : data.train) {
        inputs.push_back(gamma_forward(s.input, p.gamma));
        targets.push_back(gamma_forward(s.target, p.gamma));
    }
    p.input_norm = fit_normalizer(inputs);
    p.target_norm = fit_normalizer(targets);
    return p;
}

std::vector<std::pair<std::string, std::vector<double>>> pipeline_to_blobs(const PreprocPipeline& p) {
    std::vector<std::pair<std::string, std::vector<double>>> blobs;
    double mode = 0.0;
    if (p.gamma.mode() == GammaMode::Fixed) mode = 1.0;
    if (p.gamma.mode() == GammaMode::Learnable) mode = 2.0;
    blobs.emplace_back("pipeline.gamma_mode", std::vector<double>{mode});
    blobs.emplace_back("pipeline.gamma_value", std::vector<double>{p.gamma.gamma()});
    std::vector<double> channels;
    for (int c : p.gamma.applies_to()) channels.push_back(static_cast<double>(c));
    blobs.emplace_back("pipeline.gamma_channels", channels);
    blobs.emplace_back("pipeline.input_norm.mean", p.input_norm.mean);
    blobs.emplace_back("pipeline.input_norm.std", p.input_norm.std);
    blobs.emplace_back("pipeline.target_norm.mean", p.target_norm.mean);
    blobs.emplace_back("pipeline.target_norm.std", p.target_norm.std);
    return blobs;
}

PreprocPipeline pipeline_from_blobs(const std::vector<std::pair<std::string, std::vector<double>>>& blobs) {
    auto get = [&](const std::string& name) -> const std::vector<double>& {
        for (const auto& [n, b] : blobs)
            if (n == name) return b;
        throw FormatError("checkpoint missing pipeline blob '" + name + "'");
    };
    PreprocPipeline p;
    const double mode = get("pipeline.gamma_mode").at(0);
    const double gamma = get("pipeline.gamma_value").at(0);
    std::vector<int> channels;
    for (double c : get("pipeline.gamma_channels")) channels.push_back(static_cast<int>(c));
    if (mode == 0.0) {
        p.gamma = GammaTransform::none();
    } else if (mode == 1.0) {
        p.gamma = GammaTransform::fixed(gamma, channels);
    } else {
        p.gamma = GammaTransform::learnable(channels);
        p.gamma.theta().values()[0] = std::log(gamma);
    }
    p.input_norm.mean = get("pipeline.input_norm.mean");
    p.input_norm.std = get("pipeline.input_norm.std");
    p.target_norm.mean = get("pipeline.target_norm.mean");
    p.target_norm.std = get("pipeline.target_norm.std");
    return p;
}

// ---- batching ----

namespace {

void fill_batch(const std::vector<SamplePair>& samples, const std::vector<int>& order, std::size_t begin,
                std::size_t end, Tensor& x, Tensor& t) {
    const int B = static_cast<int>(end - begin);
    const SamplePair& first = samples[static_cast<std::size_t>(order[begin])];
    const int C = first.input.dim(0), H = first.input.dim(1), W = first.input.dim(2);
    x = Tensor::zeros({B, C, H, W});
    t = Tensor::zeros({B, 1, H, W});
    const std::size_t in_sz = static_cast<std::size_t>(C) * H * W;
    const std::size_t tg_sz = static_cast<std::size_t>(H) * W;
    for (std::size_t i = begin; i < end; ++i) {
        const SamplePair& s = samples[static_cast<std::size_t>(order[i])];
        std::copy_n(s.input.data(), in_sz, x.data() + (i - begin) * in_sz);
        std::copy_n(s.target.data(), tg_sz, t.data() + (i - begin) * tg_sz);
    }
}

struct Snapshot {
    std::vector<std::vector<double>> tensors;
    double theta = 0.0;
};

Snapshot capture(const Model& m, const PreprocPipeline& p) {
    Snapshot s;
    for (const auto& [name, t] : m.named_tensors()) s.tensors.push_back(t.values());
    if (p.gamma.mode() == GammaMode::Learnable) s.theta = p.gamma.theta().value();
    return s;
}

void restore(Model& m, PreprocPipeline& p, const Snapshot& s) {
    auto named = m.named_tensors();
    for (std::size_t i = 0; i < named.size(); ++i) named[i].second.values() = s.tensors[i];
    if (p.gamma.mode() == GammaMode::Learnable) p.gamma.theta().values()[0] = s.theta;
}

} // namespace

// ---- evaluation ----

MetricsReport evaluate(Model& model, const PreprocPipeline& pipe, const std::vector<SamplePair>& testset,
                       int batch_size) {
    if (testset.empty()) throw DataError("evaluate: empty test set");
    MetricsAccumulator acc;
    std::vector<int> order(testset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (std::size_t begin = 0; begin < testset.size(); begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(testset.size(), begin + static_cast<std::size_t>(batch_size));
        Tensor x, t;
        fill_batch(testset, order, begin, end, x, t);
        Tensor x_n = normalize(gamma_forward(x, pipe.gamma), pipe.input_norm);
        Tensor pred_n = unet_forward(model, x_n, BatchNormMode::Eval);
        Tensor pred_transformed = denormalize(pred_n, pipe.target_norm);
        Tensor pred_physical = gamma_inverse(pred_transformed, pipe.gamma);
        Tensor gt_transformed = gamma_forward(t, pipe.gamma);
        acc.add(pred_physical, t, pred_transformed, gt_transformed);
    }
    return acc.report();
}

std::pair<Tensor, Tensor> predict(Model& model, const PreprocPipeline& pipe, const SamplePair& sample) {
    std::vector<SamplePair> one = {sample};
    std::vector<int> order = {0};
    Tensor x, t;
    fill_batch(one, order, 0, 1, x, t);
    Tensor x_n = normalize(gamma_forward(x, pipe.gamma), pipe.input_norm);
    Tensor pred_n = unet_forward(model, x_n, BatchNormMode::Eval);
    Tensor pred_transformed = denormalize(pred_n, pipe.target_norm);
    Tensor pred_physical = gamma_inverse(pred_transformed, pipe.gamma);
    return {pred_physical, pred_transformed};
}

// ---- training ----

TrainResult train(const ExperimentSpec& spec, const Dataset& data,
                  const std::function<void(const std::string&)>& log) {
    spec.validate();
    if (spec.variable != data.spec.variable)
        throw ConfigError("train: experiment variable does not match the dataset");
    if (spec.model.in_channels != data.spec.input_channels())
        throw ConfigError("train: model expects " + std::to_string(spec.model.in_channels) +
                          " input channels, dataset provides " + std::to_string(data.spec.input_channels()));
    if (data.train.empty() || data.val.empty() || data.test.empty())
        throw DataError("train: dataset must have nonempty train/val/test splits");

    Rng seeds(spec.train.seed);
    Model model = build_unet(spec.model, seeds.split(1).next_u64());
    PreprocPipeline pipe = build_pipeline(spec.preproc, data);

    std::vector<Tensor> params = model.parameters();
    if (spec.preproc == PreprocMode::Learnable) params.push_back(pipe.gamma.theta());
    Adam adam(params, spec.train.learning_rate, spec.train.beta1, spec.train.beta2, spec.train.epsilon);

    const bool select_on_abs = spec.loss == LossKind::L1;
    TrainResult result;
    result.history.best_epoch = -1;
    double best_score = std::numeric_limits<double>::infinity();
    Snapshot best;

    std::vector<int> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    Rng shuffle_rng = seeds.split(2);
    for (int epoch = 0; epoch < spec.train.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng epoch_rng = shuffle_rng.split(static_cast<std::uint64_t>(epoch));
        shuffle(order, epoch_rng);

        double loss_sum = 0.0;
        std::int64_t seen = 0;
        for (std::size_t begin = 0; begin < order.size();
             begin += static_cast<std::size_t>(spec.train.batch_size)) {
            const std::size_t end =
                std::min(order.size(), begin + static_cast<std::size_t>(spec.train.batch_size));
            Tensor xb, tb;
            fill_batch(data.train, order, begin, end, xb, tb);

            Tape tape;
            Tensor x_n = normalize(gamma_forward(xb, pipe.gamma), pipe.input_norm);
            Tensor pred_n = unet_forward(model, x_n, BatchNormMode::Train);
            Tensor t_n = normalize(gamma_forward(tb, pipe.gamma), pipe.target_norm);
            Tensor loss = spec.loss == LossKind::L1 ? l1_loss(pred_n, t_n) : l2_loss(pred_n, t_n);
            const double loss_v = loss.value();
            if (!std::isfinite(loss_v))
                throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch), epoch);
            adam.zero_grad();
            tape.backward(loss);
            adam.step();

            loss_sum += loss_v * static_cast<double>(end - begin);
            seen += static_cast<std::int64_t>(end - begin);
        }

        MetricsReport val = evaluate(model, pipe, data.val, spec.train.batch_size);
        const double score = select_on_abs ? val.avg_abs_diff : val.avg_mse;
        if (score < best_score) {
            best_score = score;
            best = capture(model, pipe);
            result.history.best_epoch = epoch;
        }

        const auto t1 = std::chrono::steady_clock::now();
        result.history.train_loss.push_back(loss_sum / static_cast<double>(seen));
        result.history.val_metrics.push_back(val);
        result.history.gamma_values.push_back(pipe.gamma.gamma());
        result.history.epoch_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        if (log) {
            std::ostringstream os;
            os << "epoch " << epoch << " train_loss " << format_double(result.history.train_loss.back())
               << " val_abs " << format_double(val.avg_abs_diff) << " val_mse "
               << format_double(val.avg_mse) << " gamma " << format_double(pipe.gamma.gamma());
            log(os.str());
        }
    }

    restore(model, pipe, best);
    result.model = std::move(model);
    result.pipeline = pipe;
    result.gamma_final = pipe.gamma.gamma();
    result.test_metrics = evaluate(result.model, result.pipeline, data.test, spec.train.batch_size);
    return result;
}

// ---- matrix ----

const char* const kMatrixMethodOrder[6] = {"L1", "L2", "L1+NL2.2", "L1+Learn", "L2+NL2.2", "L2+Learn"};

namespace {

std::pair<LossKind, PreprocMode> method_settings(int index) {
    switch (index) {
        case 0: return {LossKind::L1, PreprocMode::None};
        case 1: return {LossKind::L2, PreprocMode::None};
        case 2: return {LossKind::L1, PreprocMode::Fixed22};
        case 3: return {LossKind::L1, PreprocMode::Learnable};
        case 4: return {LossKind::L2, PreprocMode::Fixed22};
        default: return {LossKind::L2, PreprocMode::Learnable};
    }
}

} // namespace

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

bool ResultsTable::any_failed() const {
    for (const MatrixCell& c : cells)
        if (c.failed) return true;
    return false;
}

std::string ResultsTable::csv() const {
    std::ostringstream os;
    os << "method,avg_abs_diff,avg_mse,avg_abs_diff_transformed,avg_mse_transformed,gamma_final,seed\n";
    for (const MatrixCell& c : cells) {
        if (c.failed) {
            os << c.method << ",failed,failed,failed,failed,failed," << c.seed << "\n";
            continue;
        }
        os << c.method << ',' << format_double(c.metrics.avg_abs_diff) << ','
           << format_double(c.metrics.avg_mse) << ',' << format_double(c.metrics.avg_abs_diff_transformed)
           << ',' << format_double(c.metrics.avg_mse_transformed) << ',' << format_double(c.gamma_final)
           << ',' << c.seed << "\n";
    }
    return os.str();
}

double ResultsTable::mean_metric(const std::string& method, double MetricsReport::*field) const {
    double sum = 0.0;
    int n = 0;
    for (const MatrixCell& c : cells) {
        if (c.method != method || c.failed) continue;
        sum += c.metrics.*field;
        ++n;
    }
    if (n == 0) throw DataError("no successful cells for method " + method);
    return sum / n;
}

double ResultsTable::mean_gamma(const std::string& method) const {
    double sum = 0.0;
    int n = 0;
    for (const MatrixCell& c : cells) {
        if (c.method != method || c.failed) continue;
        sum += c.gamma_final;
        ++n;
    }
    if (n == 0) throw DataError("no successful cells for method " + method);
    return sum / n;
}

std::string ResultsTable::text_table() const {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof(line), "%-10s %-22s %-22s %-10s\n", "Method", "avg ABS diff.", "avg MSE",
                  "gamma");
    os << line;
    for (const char* method : kMatrixMethodOrder) {
        std::vector<const MatrixCell*> rows;
        for (const MatrixCell& c : cells)
            if (c.method == method) rows.push_back(&c);
        if (rows.empty()) continue;
        int ok = 0;
        double abs_sum = 0, abs_sq = 0, mse_sum = 0, mse_sq = 0, gamma_sum = 0;
        for (const MatrixCell* c : rows) {
            if (c->failed) continue;
            ++ok;
            abs_sum += c->metrics.avg_abs_diff;
            abs_sq += c->metrics.avg_abs_diff * c->metrics.avg_abs_diff;
            mse_sum += c->metrics.avg_mse;
            mse_sq += c->metrics.avg_mse * c->metrics.avg_mse;
            gamma_sum += c->gamma_final;
        }
        if (ok == 0) {
            std::snprintf(line, sizeof(line), "%-10s %-22s %-22s %-10s\n", method, "FAILED", "FAILED", "-");
            os << line;
            continue;
        }
        const double abs_mean = abs_sum / ok, mse_mean = mse_sum / ok;
        std::string abs_str, mse_str;
        if (ok > 1) {
            const double abs_std = std::sqrt(std::max(0.0, abs_sq / ok - abs_mean * abs_mean));
            const double mse_std = std::sqrt(std::max(0.0, mse_sq / ok - mse_mean * mse_mean));
            char tmp[64];
            std::snprintf(tmp, sizeof(tmp), "%.4g +- %.2g", abs_mean, abs_std);
            abs_str = tmp;
            std::snprintf(tmp, sizeof(tmp), "%.4g +- %.2g", mse_mean, mse_std);
            mse_str = tmp;
        } else {
            abs_str = format_double(abs_mean);
            mse_str = format_double(mse_mean);
        }
        char gtmp[32];
        std::snprintf(gtmp, sizeof(gtmp), "%.4g", gamma_sum / ok);
        std::string gamma_str = gtmp;
        if (ok != static_cast<int>(rows.size())) gamma_str += " (partial)";
        std::snprintf(line, sizeof(line), "%-10s %-22s %-22s %-10s\n", method, abs_str.c_str(),
                      mse_str.c_str(), gamma_str.c_str());
        os << line;
    }
    return os.str();
}

ResultsTable run_matrix(const MatrixConfig& cfg, const std::function<void(const std::string&)>& log) {
    return run_matrix_with_sink(cfg, log, nullptr);
}

ResultsTable run_matrix_with_sink(const MatrixConfig& cfg,
                                  const std::function<void(const std::string&)>& log,
                                  const CellSink& sink) {
    if (cfg.seed_repeats <= 0) throw ConfigError("run_matrix: seed_repeats must be positive");
    if (cfg.model.in_channels != cfg.data.input_channels())
        throw ConfigError("run_matrix: model channel count must match the variable");

    // one dataset per repeat, generated up front (deterministic, shared
    // read-only by the workers)
    std::vector<Dataset> datasets;
    datasets.reserve(static_cast<std::size_t>(cfg.seed_repeats));
    Rng base(cfg.base_seed);
    for (int r = 0; r < cfg.seed_repeats; ++r) {
        DatasetSpec ds = cfg.data;
        ds.seed = base.split(1000 + static_cast<std::uint64_t>(r)).next_u64();
        if (log) log("generating dataset for repeat " + std::to_string(r));
        datasets.push_back(generate_dataset(ds));
    }

    struct Task {
        int method_index;
        int repeat;
    };
    std::vector<Task> tasks;
    for (int mi = 0; mi < 6; ++mi)
        for (int r = 0; r < cfg.seed_repeats; ++r) tasks.push_back({mi, r});

    ResultsTable table;
    table.seed_repeats = cfg.seed_repeats;
    table.cells.resize(tasks.size());

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t ti = next.fetch_add(1);
            if (ti >= tasks.size()) return;
            const Task task = tasks[ti];
            const auto [loss, preproc] = method_settings(task.method_index);
            MatrixCell& cell = table.cells[ti];
            cell.method = method_label(loss, preproc);
            cell.repeat = task.repeat;
            cell.seed = Rng(cfg.base_seed)
                            .split(2000 + static_cast<std::uint64_t>(task.repeat) * 16 +
                                   static_cast<std::uint64_t>(task.method_index))
                            .next_u64();
            ExperimentSpec spec;
            spec.loss = loss;
            spec.preproc = preproc;
            spec.variable = cfg.data.variable;
            spec.train = cfg.train;
            spec.train.seed = cell.seed;
            spec.model = cfg.model;
            const auto t0 = std::chrono::steady_clock::now();
            try {
                TrainResult res = train(spec, datasets[static_cast<std::size_t>(task.repeat)]);
                cell.metrics = res.test_metrics;
                cell.gamma_final = res.gamma_final;
                if (sink) sink(cell, res);
            } catch (const std::exception& e) {
                cell.failed = true;
                cell.error = e.what();
            }
            const auto t1 = std::chrono::steady_clock::now();
            cell.train_seconds = std::chrono::duration<double>(t1 - t0).count();
            if (log) {
                std::ostringstream os;
                os << "cell " << cell.method << " repeat " << task.repeat;
                if (cell.failed)
                    os << " FAILED: " << cell.error;
                else
                    os << " abs " << format_double(cell.metrics.avg_abs_diff) << " mse "
                       << format_double(cell.metrics.avg_mse) << " gamma "
                       << format_double(cell.gamma_final) << " (" << static_cast<int>(cell.train_seconds)
                       << "s)";
                log(os.str());
            }
        }
    };

    const int jobs = std::max(1, cfg.jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return table;
}

} // namespace downscale
