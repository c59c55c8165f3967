#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>
#include <sstream>

#include "mremq/cli.hpp"
#include "mremq/error.hpp"

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("mremq_cli_test_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

int cli(std::vector<std::string> args) { return mremq::run_cli(args); }

// tiny-but-real pipeline configuration
std::vector<std::string> tiny_flags() {
    return {"--layers", "2",      "--d-model",      "8",  "--heads",        "2",  "--d-ff",
            "16",       "--vocab", "16",            "--max-seq-len", "6",  "--train-size",
            "128",      "--heldout-size", "48",     "--calib-size",  "64", "--batch-size",
            "8",        "--seed",  "3"};
}

void append(std::vector<std::string>& v, const std::vector<std::string>& more) {
    v.insert(v.end(), more.begin(), more.end());
}

}  // namespace

TEST_CASE("cli pipeline: gen-data, train-fp, quantize, eval, report, simulate") {
    TempDir tmp;
    const std::string data_dir = tmp / "data";
    const std::string fp_dir = tmp / "fp";
    const std::string q_dir = tmp / "q";

    // gen-data
    std::vector<std::string> gen = {"gen-data", "--out", data_dir};
    append(gen, {"--layers", "2", "--d-model", "8", "--heads", "2", "--d-ff", "16", "--vocab",
                 "16", "--max-seq-len", "6", "--train-size", "128", "--heldout-size", "48",
                 "--seed", "3"});
    REQUIRE(cli(gen) == 0);
    CHECK(fs::exists(data_dir + "/data.mrmq"));
    CHECK(fs::exists(data_dir + "/config.echo"));

    // train-fp
    std::vector<std::string> tfp = {"train-fp", "--data", data_dir + "/data.mrmq", "--out", fp_dir,
                                    "--fp-steps", "80"};
    append(tfp, tiny_flags());
    REQUIRE(cli(tfp) == 0);
    CHECK(fs::exists(fp_dir + "/ckpt/fp.mrmq"));
    const std::string metrics = slurp(fp_dir + "/metrics.csv");
    CHECK(metrics.substr(0, metrics.find('\n')) == "tick,step,module,loss,lambda,lr,wall_ms");

    // quantize with mrem-s
    std::vector<std::string> q = {"quantize", "--method", "mrem-s", "--fp-ckpt",
                                  fp_dir + "/ckpt/fp.mrmq", "--data", data_dir + "/data.mrmq",
                                  "--out", q_dir, "--steps", "10", "--modules", "2", "--bits",
                                  "2,2,8"};
    append(q, tiny_flags());
    REQUIRE(cli(q) == 0);
    CHECK(fs::exists(q_dir + "/ckpt/quantized.mrmq"));
    const std::string summary = slurp(q_dir + "/summary.txt");
    CHECK(summary.find("method=mrem-s") != std::string::npos);
    CHECK(summary.find("final_total_reconstruction_loss=") != std::string::npos);
    CHECK(summary.find("heldout_accuracy=") != std::string::npos);

    // the echoed config reflects flag overrides
    const std::string echo = slurp(q_dir + "/config.echo");
    CHECK(echo.find("steps = 10") != std::string::npos);
    CHECK(echo.find("bits_w = 2") != std::string::npos);

    // eval both checkpoints
    REQUIRE(cli({"eval", "--ckpt", fp_dir + "/ckpt/fp.mrmq", "--data",
                 data_dir + "/data.mrmq"}) == 0);
    REQUIRE(cli({"eval", "--ckpt", q_dir + "/ckpt/quantized.mrmq", "--ref-ckpt",
                 fp_dir + "/ckpt/fp.mrmq", "--data", data_dir + "/data.mrmq"}) == 0);

    // error propagation report
    const std::string rep_dir = tmp / "rep";
    REQUIRE(cli({"report-error-propagation", "--fp-ckpt", fp_dir + "/ckpt/fp.mrmq", "--q-ckpt",
                 q_dir + "/ckpt/quantized.mrmq", "--data", data_dir + "/data.mrmq", "--out",
                 rep_dir, "--calib-size", "64", "--seed", "3"}) == 0);
    const std::string csv = slurp(rep_dir + "/error_propagation.csv");
    CHECK(csv.substr(0, 10) == "layer,mse\n");
    // 2 layers -> rows 0,1,2
    CHECK(csv.find("\n0,") != std::string::npos);
    CHECK(csv.find("\n2,") != std::string::npos);

    // simulate-speedup
    const std::string sim_dir = tmp / "sim";
    REQUIRE(cli({"simulate-speedup", "--modules", "4", "--steps", "2000", "--t0", "4",
                 "--micro-batches", "4", "--out", sim_dir}) == 0);
    const std::string sim_csv = slurp(sim_dir + "/speedup.csv");
    CHECK(sim_csv.find("2016") != std::string::npos);
    CHECK(sim_csv.find("14000") != std::string::npos);
}

TEST_CASE("cli failure paths return nonzero") {
    TempDir tmp;
    // missing subcommand
    CHECK(cli({}) != 0);
    // unknown method rejected by the option check
    CHECK(cli({"quantize", "--method", "bogus", "--fp-ckpt", "x", "--data", "y", "--out",
               tmp / "o"}) != 0);
    // missing checkpoint file
    CHECK(cli({"eval", "--ckpt", tmp / "missing.mrmq", "--data", tmp / "missing_data.mrmq"}) == 1);
    // config file with a bad key
    const std::string bad_cfg = tmp / "bad.cfg";
    {
        std::ofstream os(bad_cfg);
        os << "bogus_key = 1\n";
    }
    CHECK(cli({"gen-data", "--config", bad_cfg, "--out", tmp / "d"}) == 1);
}

TEST_CASE("cli config file is overridden by flags") {
    TempDir tmp;
    const std::string cfg_path = tmp / "run.cfg";
    {
        std::ofstream os(cfg_path);
        os << "layers = 2\nd_model = 8\nheads = 2\nd_ff = 16\nvocab = 16\nmax_seq_len = 6\n"
           << "train_size = 96\nheldout_size = 32\nseed = 9\n";
    }
    const std::string out = tmp / "gen";
    REQUIRE(cli({"gen-data", "--config", cfg_path, "--out", out, "--train-size", "64"}) == 0);
    const std::string echo = slurp(out + "/config.echo");
    CHECK(echo.find("train_size = 64") != std::string::npos);  // flag wins
    CHECK(echo.find("vocab = 16") != std::string::npos);       // file wins over default
}
