#include "mremq/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mremq/checkpoint.hpp"
#include "mremq/config.hpp"
#include "mremq/data.hpp"
#include "mremq/metrics.hpp"
#include "mremq/parallel.hpp"
#include "mremq/trainers.hpp"

namespace fs = std::filesystem;

namespace mremq {

namespace {

constexpr int kReconExamples = 256;  // fixed batch set for reconstruction reports

struct LoadedModel {
    bool quantized = false;
    Model fp;
    QuantizedModel qm;

    const ModelConfig& config() const { return quantized ? qm.latent.cfg : fp.cfg; }
    Tensor logits(const TokenBatch& tb) const {
        return quantized ? quantized_logits(qm, tb) : fp_logits(fp, tb);
    }
    double accuracy(const TokenSplit& split) const {
        return quantized ? accuracy_quantized(qm, split) : accuracy_fp(fp, split);
    }
};

LoadedModel load_any(const std::string& path) {
    const NamedTensors ts = load_tensors(path);
    LoadedModel m;
    if (checkpoint_is_quantized(ts)) {
        m.quantized = true;
        m.qm = quantized_from_tensors(ts);
    } else {
        m.fp = model_from_tensors(ts);
    }
    return m;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << content;
    if (!os) throw IoError("write failure: " + path);
}

void write_echo(const std::string& out_dir, const RunConfig& cfg) {
    write_text(out_dir + "/config.echo", echo_config(cfg));
}

void check_data_compat(const Dataset& ds, const ModelConfig& cfg) {
    if (ds.vocab != cfg.vocab || ds.train.len != cfg.max_seq_len ||
        ds.num_classes != cfg.num_classes)
        throw InputError("dataset (vocab " + std::to_string(ds.vocab) + ", len " +
                         std::to_string(ds.train.len) + ") does not match model config (vocab " +
                         std::to_string(cfg.vocab) + ", len " + std::to_string(cfg.max_seq_len) +
                         ")");
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

int cmd_gen_data(const RunConfig& cfg, const std::string& out) {
    ensure_dir(out);
    const Dataset ds = gen_synthetic_task(cfg.model, cfg.data, cfg.seed);
    save_dataset(out + "/data.mrmq", ds);
    write_echo(out, cfg);
    int64_t positives = 0;
    for (int32_t l : ds.train.labels) positives += l;
    std::cout << "wrote " << out << "/data.mrmq: train=" << ds.train.num
              << " heldout=" << ds.held_out.num << " len=" << ds.train.len
              << " vocab=" << ds.vocab << " positive_fraction="
              << fmt(static_cast<double>(positives) / ds.train.num) << "\n";
    return 0;
}

int cmd_train_fp(const RunConfig& cfg, const std::string& data_path, const std::string& out) {
    ensure_dir(out + "/ckpt");
    const Dataset ds = load_dataset(data_path);
    check_data_compat(ds, cfg.model);
    Model model;
    {
        CsvMetricsWriter metrics(out + "/metrics.csv");
        model = train_fp(cfg.model, ds, cfg.fp_config(), &metrics);
        metrics.close();
    }
    save_model(out + "/ckpt/fp.mrmq", model);
    write_echo(out, cfg);
    const double acc = accuracy_fp(model, ds.held_out);
    std::cout << "wrote " << out << "/ckpt/fp.mrmq heldout_accuracy=" << fmt(acc) << "\n";
    return 0;
}

int cmd_quantize(const RunConfig& cfg, const std::string& method, const std::string& fp_ckpt,
                 const std::string& data_path, const std::string& out) {
    ensure_dir(out + "/ckpt");
    const Model fp = load_model(fp_ckpt);
    const Dataset ds = load_dataset(data_path);
    check_data_compat(ds, fp.cfg);
    const TrainConfig tc = cfg.train_config();
    const CalibrationSet calib = sample_calibration(ds, cfg.calib_size, cfg.seed);

    QuantizedModel qm;
    {
        CsvMetricsWriter metrics(out + "/metrics.csv");
        if (method == "rem") qm = train_rem(fp, calib, tc, &metrics);
        else if (method == "mrem-s") qm = train_mrem_s(fp, calib, tc, &metrics);
        else if (method == "mrem-p") qm = train_mrem_p(fp, calib, tc, &metrics);
        else if (method == "qat") qm = train_qat(fp, ds, tc, &metrics);
        else throw UsageError("unknown method '" + method + "'");
        metrics.close();
    }
    save_quantized(out + "/ckpt/quantized.mrmq", qm);
    write_echo(out, cfg);

    const int recon_n = std::min(kReconExamples, calib.size);
    const ReconReport recon =
        reconstruction_report(fp, qm, calib.tokens, recon_n, calib.len);
    const double mse_heldout = logit_mse_between(fp, qm, ds.held_out, 512);
    const double acc = accuracy_quantized(qm, ds.held_out);
    const double fp_acc = accuracy_fp(fp, ds.held_out);
    std::ostringstream summary;
    summary << "method=" << method << "\n"
            << "bits=" << qm.bits.weights << "," << qm.bits.embedding << ","
            << qm.bits.activations << "\n"
            << "final_total_reconstruction_loss=" << fmt(recon.total) << "\n"
            << "final_logit_mse_calib=" << fmt(recon.logit_mse) << "\n"
            << "final_logit_mse_heldout=" << fmt(mse_heldout) << "\n"
            << "heldout_accuracy=" << fmt(acc) << "\n"
            << "fp_heldout_accuracy=" << fmt(fp_acc) << "\n";
    write_text(out + "/summary.txt", summary.str());
    std::cout << summary.str();
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& ref_ckpt, const std::string& data_path) {
    const LoadedModel m = load_any(ckpt);
    const Dataset ds = load_dataset(data_path);
    check_data_compat(ds, m.config());
    const double acc = m.accuracy(ds.held_out);

    const LoadedModel ref = ref_ckpt.empty() ? m : load_any(ref_ckpt);
    double sumsq = 0.0;
    int64_t count = 0;
    const int num = std::min(512, ds.held_out.num);
    for (int start = 0; start < num; start += 64) {
        const int n = std::min(64, num - start);
        TokenBatch tb;
        tb.batch = n;
        tb.len = ds.held_out.len;
        tb.tokens.assign(ds.held_out.tokens.begin() + static_cast<size_t>(start) * tb.len,
                         ds.held_out.tokens.begin() + static_cast<size_t>(start + n) * tb.len);
        const Tensor a = m.logits(tb);
        const Tensor b = ref.logits(tb);
        for (int64_t i = 0; i < a.numel(); ++i) {
            const double d = a.v[i] - b.v[i];
            sumsq += d * d;
        }
        count += a.numel();
    }
    std::cout << "heldout_accuracy=" << fmt(acc) << "\n"
              << "logit_mse=" << fmt(sumsq / static_cast<double>(count)) << "\n";
    return 0;
}

int cmd_report_error_propagation(const RunConfig& cfg, const std::string& fp_ckpt,
                                 const std::string& q_ckpt, const std::string& data_path,
                                 const std::string& out) {
    ensure_dir(out);
    const Model fp = load_model(fp_ckpt);
    const LoadedModel q = load_any(q_ckpt);
    if (!q.quantized) throw InputError("--q-ckpt must hold a quantized checkpoint");
    if (q.config().layers != fp.cfg.layers || q.config().d_model != fp.cfg.d_model)
        throw InputError("checkpoints are not architecture-compatible");
    const Dataset ds = load_dataset(data_path);
    check_data_compat(ds, fp.cfg);
    const CalibrationSet calib = sample_calibration(ds, cfg.calib_size, cfg.seed);
    const int recon_n = std::min(kReconExamples, calib.size);
    const ReconReport rep = reconstruction_report(fp, q.qm, calib.tokens, recon_n, calib.len);
    std::ostringstream csv;
    csv << "layer,mse\n";
    for (size_t l = 0; l < rep.per_layer.size(); ++l)
        csv << l << "," << fmt(rep.per_layer[l]) << "\n";
    write_text(out + "/error_propagation.csv", csv.str());
    std::cout << csv.str();
    return 0;
}

int cmd_simulate_speedup(int modules, int64_t steps, int t0, int micro_batches,
                         const std::string& out) {
    const SpeedupReport rep = simulate_speedup(modules, steps, t0, micro_batches);
    std::cout << speedup_table(rep);
    if (!out.empty()) {
        ensure_dir(out);
        write_text(out + "/speedup.csv", speedup_csv(rep));
    }
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"post-training quantization toolkit for a toy transformer encoder"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::pair<std::string, std::string>> flag_kvs;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "flat key = value config file");
        auto addk = [&flag_kvs, cmd](const std::string& flag, const std::string& key,
                                     const std::string& desc) {
            cmd->add_option_function<std::string>(
                flag, [&flag_kvs, key](const std::string& v) { flag_kvs.emplace_back(key, v); },
                desc);
        };
        addk("--seed", "seed", "master seed for all randomness");
        addk("--layers", "layers", "transformer layers");
        addk("--d-model", "d_model", "hidden width");
        addk("--heads", "heads", "attention heads");
        addk("--d-ff", "d_ff", "feed-forward width");
        addk("--vocab", "vocab", "vocabulary size");
        addk("--max-seq-len", "max_seq_len", "sequence length");
        addk("--train-size", "train_size", "training examples");
        addk("--heldout-size", "heldout_size", "held-out examples");
        addk("--calib-size", "calib_size", "calibration set size");
        addk("--batch-size", "batch_size", "batch size");
        addk("--steps", "steps", "steps per module (MREM)");
        addk("--rem-steps", "rem_steps", "steps per REM unit");
        addk("--qat-steps", "qat_steps", "QAT steps");
        addk("--lr", "lr", "initial learning rate for quantization training");
        addk("--t0-fraction", "t0_fraction", "teacher forcing fraction of T");
        addk("--t0", "queue_t0", "input queue capacity / staleness threshold");
        addk("--modules", "modules", "number of modules N");
        addk("--bits", "bits", "bit-widths w,e,a (e.g. 2,2,8)");
        addk("--mode", "mode", "mrem-p execution mode: lockstep|threads");
        addk("--fp-steps", "fp_steps", "full-precision fine-tuning steps");
        addk("--fp-lr", "fp_lr", "full-precision learning rate");
        cmd->add_flag_callback(
            "--pcq", [&flag_kvs] { flag_kvs.emplace_back("pcq", "true"); },
            "per-channel weight quantization");
        cmd->add_flag_callback(
            "--no-teacher-forcing",
            [&flag_kvs] { flag_kvs.emplace_back("teacher_forcing", "false"); },
            "disable annealed teacher forcing");
    };

    auto resolve = [&]() {
        RunConfig cfg;
        if (!config_path.empty()) load_config_file(cfg, config_path);
        for (const auto& [k, v] : flag_kvs) apply_kv(cfg, k, v);
        return cfg;
    };

    std::string out, data_path, fp_ckpt, q_ckpt, ckpt, ref_ckpt, method;

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic majority task");
    add_common(gen);
    gen->add_option("--out", out, "output directory")->required();

    CLI::App* tfp = app.add_subcommand("train-fp", "fine-tune the full-precision baseline");
    add_common(tfp);
    tfp->add_option("--data", data_path, "dataset file")->required();
    tfp->add_option("--out", out, "output directory")->required();

    CLI::App* quant = app.add_subcommand("quantize", "run a post-training quantization method");
    add_common(quant);
    quant->add_option("--method", method, "rem | mrem-s | mrem-p | qat")
        ->required()
        ->check(CLI::IsMember({"rem", "mrem-s", "mrem-p", "qat"}));
    quant->add_option("--fp-ckpt", fp_ckpt, "full-precision checkpoint")->required();
    quant->add_option("--data", data_path, "dataset file")->required();
    quant->add_option("--out", out, "output directory")->required();

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
    add_common(ev);
    ev->add_option("--ckpt", ckpt, "checkpoint to evaluate")->required();
    ev->add_option("--ref-ckpt", ref_ckpt, "reference checkpoint for logit MSE");
    ev->add_option("--data", data_path, "dataset file")->required();

    CLI::App* rep = app.add_subcommand("report-error-propagation",
                                       "per-layer reconstruction error of a quantized model");
    add_common(rep);
    rep->add_option("--fp-ckpt", fp_ckpt, "full-precision checkpoint")->required();
    rep->add_option("--q-ckpt", q_ckpt, "quantized checkpoint")->required();
    rep->add_option("--data", data_path, "dataset file")->required();
    rep->add_option("--out", out, "output directory")->required();

    int sim_modules = 4, sim_t0 = 4, sim_micro = 4;
    int64_t sim_steps = 2000;
    CLI::App* sim = app.add_subcommand("simulate-speedup", "closed-form pipeline tick accounting");
    sim->add_option("--modules", sim_modules, "number of modules N");
    sim->add_option("--steps", sim_steps, "steps per module T");
    sim->add_option("--t0", sim_t0, "staleness threshold t0");
    sim->add_option("--micro-batches", sim_micro, "GPipe micro-batches M");
    sim->add_option("--out", out, "optional output directory for speedup.csv");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (gen->parsed()) return cmd_gen_data(resolve(), out);
        if (tfp->parsed()) return cmd_train_fp(resolve(), data_path, out);
        if (quant->parsed()) return cmd_quantize(resolve(), method, fp_ckpt, data_path, out);
        if (ev->parsed()) return cmd_eval(ckpt, ref_ckpt, data_path);
        if (rep->parsed())
            return cmd_report_error_propagation(resolve(), fp_ckpt, q_ckpt, data_path, out);
        if (sim->parsed()) return cmd_simulate_speedup(sim_modules, sim_steps, sim_t0, sim_micro, out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace mremq
