#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "downscale/data.hpp"
#include "downscale/selfcheck.hpp"

using namespace downscale;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int exit_code;
    std::string output;
};

CliRun run_cli(const std::string& args, const fs::path& dir) {
    const fs::path log = dir / "cli_output.txt";
    const std::string cmd = std::string(DOWNSCALE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    return r;
}

fs::path fresh_dir(const char* name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_tiny_config(const fs::path& path, const char* variable = "precipitation_like") {
    std::ofstream out(path);
    out << "[data]\nvariable = " << variable
        << "\nn_train = 8\nn_val = 2\nn_test = 2\nfine_h = 16\nfine_w = 16\n"
        << "[model]\nbase_width = 4\n"
        << "[train]\nloss = L2\npreproc = learnable\nepochs = 2\nbatch_size = 4\n";
}

std::string file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), {});
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

} // namespace

TEST_CASE("check subcommand passes on a fresh build and names its checks") {
    const fs::path dir = fresh_dir("cli_check");
    CliRun r = run_cli("check", dir);
    CHECK(r.exit_code == 0);
    int named = 0;
    for (const char* name : {"conv_forward_oracle", "conv_gradient_check", "batchnorm_statistics",
                             "gamma_roundtrip", "gamma_exponent_gradient", "signed_pow_odd_symmetry",
                             "upsample_mass_conservation", "unet_end_to_end_gradient", "determinism"})
        if (r.output.find(name) != std::string::npos) ++named;
    CHECK(named >= 6);
    CHECK(r.output.find("FAIL") == std::string::npos);
}

TEST_CASE("perturbed conv backward makes the gradient check fail") {
    SelfCheckHooks hooks;
    hooks.conv_grad_weight_scale = 1.001;
    auto results = run_self_checks(hooks);
    bool conv_failed = false;
    for (const CheckResult& r : results) {
        if (r.name == "conv_gradient_check") conv_failed = !r.passed;
        if (r.name == "conv_forward_oracle") CHECK(r.passed); // forward untouched
    }
    CHECK(conv_failed);
    CHECK(run_self_checks({}).size() >= 6);
}

TEST_CASE("gen-data: summary, determinism, unknown keys") {
    const fs::path dir = fresh_dir("cli_gen");
    write_tiny_config(dir / "tiny.cfg");
    const std::string base = "gen-data --config " + (dir / "tiny.cfg").string();

    CliRun a = run_cli(base + " --out " + (dir / "a").string() + " --seed 5", dir);
    CHECK(a.exit_code == 0);
    CHECK(a.output.find("zero_fraction") != std::string::npos);
    CHECK(fs::exists(dir / "a" / "dataset.bin"));
    CHECK(fs::exists(dir / "a" / "manifest.txt"));

    CliRun b = run_cli(base + " --out " + (dir / "b").string() + " --seed 5", dir);
    CHECK(b.exit_code == 0);
    CHECK(file_bytes(dir / "a" / "dataset.bin") == file_bytes(dir / "b" / "dataset.bin"));

    CliRun c = run_cli(base + " --out " + (dir / "c").string() + " --seed 6", dir);
    CHECK(file_bytes(dir / "a" / "dataset.bin") != file_bytes(dir / "c" / "dataset.bin"));

    CliRun bad = run_cli(base + " --set data.n_trian=4 --out " + (dir / "bad").string(), dir);
    CHECK(bad.exit_code == 2);
    CHECK(bad.output.find("n_trian") != std::string::npos);
}

TEST_CASE("train: artifacts, history length, gamma in the metrics row") {
    const fs::path dir = fresh_dir("cli_train");
    write_tiny_config(dir / "tiny.cfg");
    CliRun gen = run_cli("gen-data --config " + (dir / "tiny.cfg").string() + " --out " +
                             (dir / "data").string() + " --seed 11",
                         dir);
    REQUIRE(gen.exit_code == 0);

    CliRun tr = run_cli("train --config " + (dir / "tiny.cfg").string() + " --data " +
                            (dir / "data" / "dataset.bin").string() + " --out " + (dir / "run").string() +
                            " --seed 13",
                        dir);
    CHECK(tr.exit_code == 0);
    CHECK(fs::exists(dir / "run" / "checkpoint.bin"));
    CHECK(fs::exists(dir / "run" / "manifest.txt"));

    const std::string history = file_bytes(dir / "run" / "history.csv");
    CHECK(count_lines(history) == 1 + 2); // header + one row per epoch

    const std::string metrics = file_bytes(dir / "run" / "metrics.csv");
    CHECK(metrics.find("gamma_final") != std::string::npos);
    CHECK(metrics.find("L2+Learn") != std::string::npos);

    // missing dataset argument is a config error
    CliRun miss = run_cli("train --config " + (dir / "tiny.cfg").string() + " --out " +
                              (dir / "run2").string(),
                          dir);
    CHECK(miss.exit_code == 2);
}

TEST_CASE("train: divergence exits with code 3") {
    const fs::path dir = fresh_dir("cli_diverge");
    write_tiny_config(dir / "tiny.cfg");
    DatasetSpec spec;
    spec.variable = Variable::PrecipitationLike;
    spec.n_train = 8;
    spec.n_val = 2;
    spec.n_test = 2;
    spec.fine_h = spec.fine_w = 16;
    spec.seed = 11;
    Dataset poisoned = generate_dataset(spec);
    poisoned.train[0].target.values()[3] = std::numeric_limits<double>::quiet_NaN();
    save_dataset(poisoned, dir / "poisoned.bin");

    CliRun tr = run_cli("train --config " + (dir / "tiny.cfg").string() + " --data " +
                            (dir / "poisoned.bin").string() + " --out " + (dir / "run").string(),
                        dir);
    CHECK(tr.exit_code == 3);
    CHECK(tr.output.find("diverged") != std::string::npos);
}

TEST_CASE("eval and render consume the train artifacts") {
    const fs::path dir = fresh_dir("cli_eval");
    write_tiny_config(dir / "tiny.cfg");
    REQUIRE(run_cli("gen-data --config " + (dir / "tiny.cfg").string() + " --out " + (dir / "d").string() +
                        " --seed 3",
                    dir)
                .exit_code == 0);
    REQUIRE(run_cli("train --config " + (dir / "tiny.cfg").string() + " --data " +
                        (dir / "d" / "dataset.bin").string() + " --out " + (dir / "r").string() +
                        " --seed 4",
                    dir)
                .exit_code == 0);

    CliRun ev = run_cli("eval --data " + (dir / "d" / "dataset.bin").string() + " --checkpoint " +
                            (dir / "r" / "checkpoint.bin").string() + " --out " + (dir / "e").string(),
                        dir);
    CHECK(ev.exit_code == 0);
    CHECK(ev.output.find("avg_mse") != std::string::npos);

    CliRun rd = run_cli("render --data " + (dir / "d" / "dataset.bin").string() + " --checkpoint " +
                            (dir / "r" / "checkpoint.bin").string() + " --out " + (dir / "img").string(),
                        dir);
    CHECK(rd.exit_code == 0);
    CHECK(fs::exists(dir / "img" / "precipitation_like_model_panel.ppm"));
    CHECK(fs::exists(dir / "img" / "precipitation_like_model_diff.ppm"));

    CliRun oob = run_cli("render --data " + (dir / "d" / "dataset.bin").string() + " --sample 99 --out " +
                             (dir / "img2").string(),
                         dir);
    CHECK(oob.exit_code == 2);
}

TEST_CASE("matrix: row labels, determinism, panel layout, cell artifacts") {
    const fs::path dir = fresh_dir("cli_matrix");
    write_tiny_config(dir / "tiny.cfg");
    const std::string base = "matrix --config " + (dir / "tiny.cfg").string() +
                             " --set matrix.seed_repeats=1 --seed 21";

    CliRun a = run_cli(base + " --out " + (dir / "a").string(), dir);
    CHECK(a.exit_code == 0);
    const std::string csv = file_bytes(dir / "a" / "results.csv");
    for (const char* label : {"L1,", "L2,", "L1+NL2.2,", "L1+Learn,", "L2+NL2.2,", "L2+Learn,"})
        CHECK(csv.find(label) != std::string::npos);
    CHECK(count_lines(csv) == 7); // header + 6 cells

    CliRun b = run_cli(base + " --out " + (dir / "b").string() + " --jobs 2", dir);
    CHECK(b.exit_code == 0);
    CHECK(file_bytes(dir / "a" / "results.csv") == file_bytes(dir / "b" / "results.csv"));

    // panel: 2 + 6 tiles of 16px wide with 2px separators -> 8*16 + 7*2 = 142
    const std::string ppm = file_bytes(dir / "a" / "precipitation_like_matrix_panel.ppm");
    CHECK(ppm.rfind("P6\n142 16\n255\n", 0) == 0);
    CHECK(fs::exists(dir / "a" / "cell_L1_seed0" / "checkpoint.bin"));
    CHECK(fs::exists(dir / "a" / "cell_L2+Learn_seed0" / "history.csv"));
}

TEST_CASE("DOWNSCALE_LAB_THREADS caps matrix workers") {
    const fs::path dir = fresh_dir("cli_threads");
    write_tiny_config(dir / "tiny.cfg");
    const std::string cmd = "env DOWNSCALE_LAB_THREADS=1 " + std::string(DOWNSCALE_CLI_PATH) +
                            " matrix --config " + (dir / "tiny.cfg").string() +
                            " --set matrix.seed_repeats=1 --seed 21 --jobs 4 --out " +
                            (dir / "capped").string() + " > " + (dir / "log.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(status) == 0);
    CHECK(fs::exists(dir / "capped" / "results.csv"));
}
