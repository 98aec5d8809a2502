#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "downscale/data.hpp"
#include "downscale/losses.hpp"
#include "downscale/preprocess.hpp"
#include "downscale/unet.hpp"

namespace downscale {

enum class LossKind { L1, L2 };
enum class PreprocMode { None, Fixed22, Learnable };

std::string loss_name(LossKind k);
LossKind loss_from_name(const std::string& name);
std::string preproc_name(PreprocMode m);
PreprocMode preproc_from_name(const std::string& name);

/// Row label in the results tables: L1, L2, L1+NL2.2, L1+Learn, L2+NL2.2, L2+Learn.
std::string method_label(LossKind loss, PreprocMode preproc);

struct TrainConfig {
    int epochs = 60;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
};

/// One cell of the experiment matrix.
struct ExperimentSpec {
    LossKind loss = LossKind::L1;
    PreprocMode preproc = PreprocMode::None;
    Variable variable = Variable::PrecipitationLike;
    TrainConfig train;
    UNetConfig model;
    void validate() const;
};

/// Adaptive-moment optimizer with bias correction.
class Adam {
public:
    Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps);

    /// Applies one update from the parameters' current gradients.
    /// Non-finite gradients raise DivergenceError with the parameter index.
    void step();
    void zero_grad();
    std::int64_t step_count() const { return t_; }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    double lr_, b1_, b2_, eps_;
    std::int64_t t_ = 0;
};

/// Everything needed to map raw samples into network space and back: the
/// gamma transform on the predictand channel plus the per-channel linear
/// normalizers fitted on gamma-transformed training data.
struct PreprocPipeline {
    GammaTransform gamma;
    LinearNormalizer input_norm;
    LinearNormalizer target_norm;
};

PreprocPipeline build_pipeline(PreprocMode mode, const Dataset& data);

std::vector<std::pair<std::string, std::vector<double>>> pipeline_to_blobs(const PreprocPipeline& p);
PreprocPipeline pipeline_from_blobs(const std::vector<std::pair<std::string, std::vector<double>>>& blobs);

struct TrainHistory {
    std::vector<double> train_loss;        // per epoch, transformed space
    std::vector<MetricsReport> val_metrics;
    std::vector<double> gamma_values;      // per epoch
    std::vector<double> epoch_ms;
    int best_epoch = -1;
};

struct TrainResult {
    Model model; // best-validation checkpoint restored
    PreprocPipeline pipeline;
    TrainHistory history;
    MetricsReport test_metrics;
    double gamma_final = 1.0;
};

/// Full training run: deterministic under (spec, dataset); keeps the
/// best-validation checkpoint (avg abs diff for L1-trained, avg MSE for
/// L2-trained, physical units); evaluates it on the test split.
TrainResult train(const ExperimentSpec& spec, const Dataset& data,
                  const std::function<void(const std::string&)>& log = nullptr);

/// Eval-mode forward over a test split; metrics in physical units plus the
/// transformed-space variants.
MetricsReport evaluate(Model& model, const PreprocPipeline& pipe, const std::vector<SamplePair>& testset,
                       int batch_size = 8);

/// Eval-mode predictions for one sample: (physical, transformed) pair.
std::pair<Tensor, Tensor> predict(Model& model, const PreprocPipeline& pipe, const SamplePair& sample);

// ---- the 6-cell matrix ----

struct MatrixConfig {
    DatasetSpec data;     // seed is re-derived per repeat
    TrainConfig train;    // seed is re-derived per cell
    UNetConfig model;     // channel count fixed up from the variable
    int seed_repeats = 3;
    std::uint64_t base_seed = 0;
    int jobs = 1;
};

struct MatrixCell {
    std::string method;
    int repeat = 0;
    std::uint64_t seed = 0;
    MetricsReport metrics;
    double gamma_final = 1.0;
    bool failed = false;
    std::string error;
    double train_seconds = 0.0;
};

struct ResultsTable {
    std::vector<MatrixCell> cells; // method-major, repeats inner, fixed row order
    int seed_repeats = 1;

    bool any_failed() const;
    std::string csv() const;
    std::string text_table() const;

    /// Mean over repeats of a metric for a method label; throws if the method
    /// has no successful cells.
    double mean_metric(const std::string& method, double MetricsReport::*field) const;
    double mean_gamma(const std::string& method) const;
};

extern const char* const kMatrixMethodOrder[6];

/// Called once per successful cell, from worker threads (callee synchronizes).
using CellSink = std::function<void(const MatrixCell&, const TrainResult&)>;

ResultsTable run_matrix(const MatrixConfig& cfg,
                        const std::function<void(const std::string&)>& log = nullptr);
ResultsTable run_matrix_with_sink(const MatrixConfig& cfg,
                                  const std::function<void(const std::string&)>& log,
                                  const CellSink& sink);

/// Deterministic shortest-round-trip formatting used for all results files.
std::string format_double(double v);

} // namespace downscale
