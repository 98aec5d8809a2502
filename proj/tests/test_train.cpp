#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "downscale/train.hpp"
#include "testutil.hpp"

using namespace downscale;

namespace {

DatasetSpec tiny_data(Variable v, std::uint64_t seed) {
    DatasetSpec s;
    s.variable = v;
    s.n_train = 8;
    s.n_val = 2;
    s.n_test = 2;
    s.fine_h = 16;
    s.fine_w = 16;
    s.coarsen_factor = 8;
    s.seed = seed;
    return s;
}

ExperimentSpec tiny_experiment(Variable v, LossKind loss, PreprocMode pre, std::uint64_t seed) {
    ExperimentSpec e;
    e.loss = loss;
    e.preproc = pre;
    e.variable = v;
    e.train.epochs = 3;
    e.train.batch_size = 4;
    e.train.seed = seed;
    e.model = UNetConfig::desk(v == Variable::PrecipitationLike ? 6 : 3);
    e.model.base_width = 4;
    return e;
}

} // namespace

TEST_CASE("adam: constant gradient moves parameters against its sign") {
    Tensor w = Tensor::scalar(0.0, true);
    Adam opt({w}, 0.1, 0.9, 0.999, 1e-8);
    double prev = 0.0;
    for (int i = 0; i < 20; ++i) {
        w.zero_grad();
        w.grad()[0] = 2.5; // constant positive gradient
        opt.step();
        CHECK(w.value() < prev);
        prev = w.value();
    }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Tensor w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
    Adam opt({w}, 0.1, 0.9, 0.999, 1e-8);
    w.grad(); // allocate zeros
    opt.step();
    CHECK(w.values() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adam: scalar quadratic converges") {
    Tensor w = Tensor::scalar(0.0, true);
    Adam opt({w}, 0.01, 0.9, 0.999, 1e-8);
    for (int i = 0; i < 2000; ++i) {
        w.zero_grad();
        w.grad()[0] = 2.0 * (w.value() - 3.0); // d/dw (w-3)^2
        opt.step();
    }
    CHECK(std::fabs(w.value() - 3.0) < 1e-3);
}

TEST_CASE("adam: non-finite gradient aborts with diagnostics") {
    Tensor w = Tensor::scalar(0.0, true);
    Adam opt({w}, 0.1, 0.9, 0.999, 1e-8);
    w.grad()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(opt.step(), DivergenceError);
}

TEST_CASE("method labels match the table rows") {
    CHECK(method_label(LossKind::L1, PreprocMode::None) == "L1");
    CHECK(method_label(LossKind::L2, PreprocMode::None) == "L2");
    CHECK(method_label(LossKind::L1, PreprocMode::Fixed22) == "L1+NL2.2");
    CHECK(method_label(LossKind::L1, PreprocMode::Learnable) == "L1+Learn");
    CHECK(method_label(LossKind::L2, PreprocMode::Fixed22) == "L2+NL2.2");
    CHECK(method_label(LossKind::L2, PreprocMode::Learnable) == "L2+Learn");
    CHECK(std::string(kMatrixMethodOrder[0]) == "L1");
    CHECK(std::string(kMatrixMethodOrder[5]) == "L2+Learn");
}

TEST_CASE("training descends and records history") {
    Dataset data = generate_dataset(tiny_data(Variable::TemperatureLike, 3));
    ExperimentSpec spec = tiny_experiment(Variable::TemperatureLike, LossKind::L2, PreprocMode::None, 5);
    spec.train.epochs = 6;
    TrainResult res = train(spec, data);
    REQUIRE(res.history.train_loss.size() == 6);
    REQUIRE(res.history.val_metrics.size() == 6);
    REQUIRE(res.history.gamma_values.size() == 6);
    REQUIRE(res.history.epoch_ms.size() == 6);
    CHECK(res.history.train_loss.back() < res.history.train_loss.front());
    CHECK(res.history.best_epoch >= 0);
    CHECK(res.gamma_final == 1.0);
    CHECK(res.test_metrics.n_pixels == 2 * 16 * 16);
}

TEST_CASE("training is deterministic") {
    Dataset data = generate_dataset(tiny_data(Variable::PrecipitationLike, 7));
    ExperimentSpec spec = tiny_experiment(Variable::PrecipitationLike, LossKind::L1, PreprocMode::Learnable, 9);
    TrainResult a = train(spec, data);
    TrainResult b = train(spec, data);
    CHECK(a.test_metrics.avg_abs_diff == b.test_metrics.avg_abs_diff);
    CHECK(a.test_metrics.avg_mse == b.test_metrics.avg_mse);
    CHECK(a.gamma_final == b.gamma_final);
    CHECK(a.history.train_loss == b.history.train_loss);
}

TEST_CASE("gamma gradient flows at initialization") {
    Dataset data = generate_dataset(tiny_data(Variable::PrecipitationLike, 11));
    PreprocPipeline pipe = build_pipeline(PreprocMode::Learnable, data);
    UNetConfig mc = UNetConfig::desk(6);
    mc.base_width = 4;
    Model model = build_unet(mc, 13);

    std::vector<int> order = {0, 1, 2, 3};
    Tensor xb, tb;
    {
        Tape tape;
        // mirror one training step's forward wiring
        Tensor x = Tensor::zeros({4, 6, 16, 16});
        Tensor t = Tensor::zeros({4, 1, 16, 16});
        const std::size_t in_sz = 6 * 16 * 16, tg_sz = 16 * 16;
        for (int i = 0; i < 4; ++i) {
            std::copy_n(data.train[static_cast<std::size_t>(i)].input.data(), in_sz, x.data() + i * in_sz);
            std::copy_n(data.train[static_cast<std::size_t>(i)].target.data(), tg_sz, t.data() + i * tg_sz);
        }
        Tensor x_n = normalize(gamma_forward(x, pipe.gamma), pipe.input_norm);
        Tensor pred = unet_forward(model, x_n, BatchNormMode::Train);
        Tensor t_n = normalize(gamma_forward(t, pipe.gamma), pipe.target_norm);
        tape.backward(l2_loss(pred, t_n));
    }
    CHECK(pipe.gamma.theta().has_grad());
    CHECK(std::fabs(pipe.gamma.theta().grad()[0]) > 0.0);
}

TEST_CASE("divergent training aborts and reports the epoch") {
    Dataset data = generate_dataset(tiny_data(Variable::PrecipitationLike, 17));
    // poison one target pixel; the loss goes non-finite on the first pass
    data.train[0].target.values()[5] = std::numeric_limits<double>::quiet_NaN();
    ExperimentSpec spec = tiny_experiment(Variable::PrecipitationLike, LossKind::L2, PreprocMode::None, 19);
    spec.train.epochs = 10;
    try {
        train(spec, data);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.epoch == 0);
    }
}

TEST_CASE("checkpoint round-trip reproduces metrics bit-exactly") {
    Dataset data = generate_dataset(tiny_data(Variable::TemperatureLike, 23));
    ExperimentSpec spec = tiny_experiment(Variable::TemperatureLike, LossKind::L1, PreprocMode::Fixed22, 25);
    TrainResult res = train(spec, data);

    const auto path = std::filesystem::temp_directory_path() / "train_ck_roundtrip.bin";
    save_checkpoint(path, res.model, pipeline_to_blobs(res.pipeline));
    auto [model2, blobs] = load_checkpoint(path);
    PreprocPipeline pipe2 = pipeline_from_blobs(blobs);
    MetricsReport again = evaluate(model2, pipe2, data.test);
    CHECK(again.avg_abs_diff == res.test_metrics.avg_abs_diff);
    CHECK(again.avg_mse == res.test_metrics.avg_mse);
    CHECK(again.avg_abs_diff_transformed == res.test_metrics.avg_abs_diff_transformed);
    CHECK(again.avg_mse_transformed == res.test_metrics.avg_mse_transformed);
    std::filesystem::remove(path);
}

TEST_CASE("experiment validation catches mismatches") {
    Dataset data = generate_dataset(tiny_data(Variable::TemperatureLike, 29));
    ExperimentSpec spec = tiny_experiment(Variable::PrecipitationLike, LossKind::L1, PreprocMode::None, 31);
    CHECK_THROWS_AS(train(spec, data), ConfigError); // variable mismatch
    spec.variable = Variable::TemperatureLike;       // but model still has 6 channels
    CHECK_THROWS_AS(train(spec, data), ConfigError);
}

TEST_CASE("run_matrix produces the six fixed rows deterministically") {
    MatrixConfig cfg;
    cfg.data = tiny_data(Variable::PrecipitationLike, 0);
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.model = UNetConfig::desk(6);
    cfg.model.base_width = 4;
    cfg.seed_repeats = 2;
    cfg.base_seed = 77;
    cfg.jobs = 1;

    ResultsTable serial = run_matrix(cfg);
    REQUIRE(serial.cells.size() == 12);
    CHECK_FALSE(serial.any_failed());
    for (int mi = 0; mi < 6; ++mi)
        for (int r = 0; r < 2; ++r) {
            const MatrixCell& c = serial.cells[static_cast<std::size_t>(mi * 2 + r)];
            CHECK(c.method == kMatrixMethodOrder[mi]);
            CHECK(c.repeat == r);
        }

    cfg.jobs = 2;
    ResultsTable parallel = run_matrix(cfg);
    CHECK(serial.csv() == parallel.csv()); // same bytes regardless of scheduling

    // csv includes the schema header and one row per cell
    const std::string csv = serial.csv();
    CHECK(csv.find("method,avg_abs_diff,avg_mse,avg_abs_diff_transformed,avg_mse_transformed,gamma_final,"
                   "seed\n") == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);

    // aggregation helpers
    CHECK(serial.mean_metric("L1", &MetricsReport::avg_mse) > 0.0);
    CHECK(serial.mean_gamma("L1+Learn") > 0.0);
    const std::string txt = serial.text_table();
    CHECK(txt.find("L1+NL2.2") != std::string::npos);
    CHECK(txt.find("+-") != std::string::npos);
}
