// Acceptance suite: runs every criterion at its stated tolerance and prints
// one pass/fail line per criterion. Exits nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>
#include <vector>

#include "mremq/checkpoint.hpp"
#include "mremq/cli.hpp"
#include "mremq/config.hpp"
#include "mremq/data.hpp"
#include "mremq/parallel.hpp"
#include "mremq/partition.hpp"
#include "mremq/trainers.hpp"

using namespace mremq;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

int g_failures = 0;

void report(int id, const std::string& name, const Outcome& oc) {
    std::printf("[%s] criterion %2d: %s — %s\n", oc.pass ? "PASS" : "FAIL", id, name.c_str(),
                oc.detail.c_str());
    std::fflush(stdout);
    if (!oc.pass) ++g_failures;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

// ---------- criterion 1: quantizer laws ----------

Outcome criterion1() {
    const auto t0 = Clock::now();
    Rng rng(20260810);
    int violations = 0;
    const int cases = 10000;
    for (int rep = 0; rep < cases; ++rep) {
        const int bits = rng.next_int(2, 9);
        const QuantMode mode =
            rng.next_unit() < 0.5 ? QuantMode::symmetric : QuantMode::asymmetric;
        const double step = rng.next_real(1e-3, 2.0);
        QuantSpecT<double> spec;
        spec.bits = bits;
        spec.mode = mode;
        spec.step = DTensor({1}, step);
        const auto [qn, qp] = clip_range(bits, mode);
        auto quant = [&](double e) {
            DTensor t({1}, e);
            return (mode == QuantMode::symmetric ? quantize_symmetric(t, spec)
                                                 : quantize_asymmetric(t, spec))
                .v[0];
        };
        const double x = rng.next_real(-4, 4);
        const double y = rng.next_real(-4, 4);
        const double xq = quant(x), yq = quant(y);
        const double level = xq / step;
        const double nearest = std::round(level);
        bool ok = std::abs(level - nearest) < 1e-9 * std::max(1.0, std::abs(level));
        ok = ok && nearest >= qn && nearest <= qp;
        if (x >= step * qn && x <= step * qp) ok = ok && std::abs(xq - x) <= step / 2 + 1e-12;
        ok = ok && std::abs(quant(xq) - xq) <= 1e-12 * std::max(1.0, std::abs(xq));
        if (x <= y) ok = ok && xq <= yq + 1e-12;
        if (!ok) ++violations;
    }
    const double secs = seconds_since(t0);
    Outcome oc;
    oc.pass = violations == 0 && secs < 5.0;
    oc.detail = std::to_string(cases) + " random (x,s,b) cases: grid membership, bounded error, "
                "idempotence, monotonicity; " +
                std::to_string(violations) + " violations, " + fmt(secs) + "s";
    return oc;
}

// ---------- criterion 2: gradient oracle ----------

ModelConfig grad_config() {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.d_ff = 16;
    cfg.vocab = 12;
    cfg.max_seq_len = 5;
    cfg.num_classes = 2;
    return cfg;
}

double max_rel_err(const std::function<double(const std::vector<double>&)>& f,
                   std::vector<double> x, const std::vector<double>& analytic, double h) {
    double worst = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double fp = f(x);
        x[i] = keep - h;
        const double fm = f(x);
        x[i] = keep;
        const double fd = (fp - fm) / (2 * h);
        const double denom = std::max({1.0, std::abs(fd), std::abs(analytic[i])});
        worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
    }
    return worst;
}

double op_level_fd_worst() {
    Rng rng(321);
    double worst = 0;
    auto rand_tensor = [&](std::vector<int> shape, double lo = -1, double hi = 1) {
        DTensor t(std::move(shape));
        for (auto& e : t.v) e = rng.next_real(lo, hi);
        return t;
    };
    auto check = [&](auto build, std::vector<DTensor> inputs) {
        Tape<double> t;
        std::vector<int> ids;
        for (auto& in : inputs) ids.push_back(t.leaf(in, true));
        const int loss = build(t, ids);
        auto grads = t.backward(loss);
        std::vector<double> flat_x, flat_g;
        for (size_t i = 0; i < inputs.size(); ++i) {
            flat_x.insert(flat_x.end(), inputs[i].v.begin(), inputs[i].v.end());
            flat_g.insert(flat_g.end(), grads[ids[i]].v.begin(), grads[ids[i]].v.end());
        }
        auto f = [&](const std::vector<double>& xs) {
            Tape<double> tt;
            std::vector<int> lids;
            size_t off = 0;
            for (auto& in : inputs) {
                DTensor c = in;
                for (auto& e : c.v) e = xs[off++];
                lids.push_back(tt.leaf(c, false));
            }
            return tt.value(build(tt, lids)).v[0];
        };
        worst = std::max(worst, max_rel_err(f, flat_x, flat_g, 1e-4));
    };
    auto weighted = [&](Tape<double>& t, int id, uint64_t salt) {
        DTensor w(t.value(id).shape);
        Rng r(salt);
        for (auto& e : w.v) e = r.next_real(0.5, 1.5);
        return t.mse(id, t.leaf(w, false));
    };
    for (int rep = 0; rep < 3; ++rep) {
        check([&](Tape<double>& t, const std::vector<int>& i) { return weighted(t, t.matmul(i[0], i[1]), 1); },
              {rand_tensor({3, 4}), rand_tensor({4, 2})});
        check([&](Tape<double>& t, const std::vector<int>& i) { return weighted(t, t.matmul_nt(i[0], i[1]), 2); },
              {rand_tensor({2, 3, 4}), rand_tensor({2, 5, 4})});
        check([&](Tape<double>& t, const std::vector<int>& i) { return weighted(t, t.gelu(i[0]), 3); },
              {rand_tensor({3, 3})});
        check([&](Tape<double>& t, const std::vector<int>& i) { return weighted(t, t.softmax_rows(i[0]), 4); },
              {rand_tensor({3, 5})});
        check(
            [&](Tape<double>& t, const std::vector<int>& i) {
                return weighted(t, t.layer_norm(i[0], i[1], i[2], 1e-6), 5);
            },
            {rand_tensor({3, 6}), rand_tensor({6}, 0.5, 1.5), rand_tensor({6})});
        check([&](Tape<double>& t, const std::vector<int>& i) { return weighted(t, t.add(i[0], i[1]), 6); },
              {rand_tensor({2, 3}), rand_tensor({2, 3})});
        check([&](Tape<double>& t, const std::vector<int>& i) { return weighted(t, t.add_bias(i[0], i[1]), 7); },
              {rand_tensor({2, 3, 4}), rand_tensor({4})});
        check(
            [&](Tape<double>& t, const std::vector<int>& i) {
                return weighted(t, t.add_rows_broadcast(i[0], i[1]), 8);
            },
            {rand_tensor({2, 3, 4}), rand_tensor({5, 4})});
        check([&](Tape<double>& t, const std::vector<int>& i) { return weighted(t, t.scale(i[0], 1.7), 9); },
              {rand_tensor({3, 3})});
        check([&](Tape<double>& t, const std::vector<int>& i) { return weighted(t, t.mean_seq(i[0]), 10); },
              {rand_tensor({2, 4, 3})});
        check(
            [&](Tape<double>& t, const std::vector<int>& i) {
                return weighted(t, t.merge_heads(t.split_heads(i[0], 2)), 11);
            },
            {rand_tensor({2, 3, 4})});
        check(
            [&](Tape<double>& t, const std::vector<int>& i) {
                std::vector<int32_t> toks{0, 2, 1, 2, 0, 1};
                return weighted(t, t.embed_rows(i[0], toks, 2, 3), 12);
            },
            {rand_tensor({3, 4})});
        check(
            [&](Tape<double>& t, const std::vector<int>& i) {
                std::vector<int32_t> labels{1, 0};
                return t.softmax_cross_entropy(i[0], labels);
            },
            {rand_tensor({2, 3})});
        check([&](Tape<double>& t, const std::vector<int>& i) { return t.mse(i[0], i[1]); },
              {rand_tensor({3, 3}), rand_tensor({3, 3})});
    }
    return worst;
}

// FD over every parameter of the composed 2-layer model. The quantizers are
// disabled here: straight-through surrogates are not a.e. derivatives, so
// this leg checks the full differentiable composition.
double composed_model_fd_worst() {
    const ModelConfig cfg = grad_config();
    ModelT<double> model = make_model_random<double>(cfg, 424242, 0.25);
    Rng rng(515151);
    std::vector<int32_t> toks(2 * cfg.max_seq_len);
    for (auto& t : toks) t = rng.next_int(0, cfg.vocab);
    DTensor target({2, cfg.num_classes});
    for (auto& e : target.v) e = rng.next_real(-1, 1);

    auto loss_of = [&](ModelT<double>& m) {
        Tape<double> tape;
        ParamLeaves<double> leaves{&tape};
        GraphBuilder<double> gb(tape, m, leaves);
        int x = gb.embed(toks, 2, cfg.max_seq_len);
        for (int l = 0; l < cfg.layers; ++l) x = gb.layer(x, l);
        return tape.value(tape.mse(gb.head(x), tape.leaf(target, false))).v[0];
    };

    Tape<double> tape;
    ParamLeaves<double> leaves{&tape};
    leaves.trainable = [](const std::string&) { return true; };
    GraphBuilder<double> gb(tape, model, leaves);
    int x = gb.embed(toks, 2, cfg.max_seq_len);
    for (int l = 0; l < cfg.layers; ++l) x = gb.layer(x, l);
    const int loss_id = tape.mse(gb.head(x), tape.leaf(target, false));
    tape.backward(loss_id);

    double worst = 0;
    const double h = 1e-4;
    for_each_param(model, [&](const std::string& name, DTensor& param) {
        const int id = leaves.ids.at(name);
        const DTensor* grad = tape.grad(id);
        DTensor zero(param.shape);
        const DTensor& g = grad ? *grad : zero;
        for (int64_t i = 0; i < param.numel(); ++i) {
            const double keep = param.v[i];
            param.v[i] = keep + h;
            const double fp = loss_of(model);
            param.v[i] = keep - h;
            const double fm = loss_of(model);
            param.v[i] = keep;
            const double fd = (fp - fm) / (2 * h);
            const double denom = std::max({1.0, std::abs(fd), std::abs(g.v[i])});
            worst = std::max(worst, std::abs(fd - g.v[i]) / denom);
        }
    });
    return worst;
}

// Step-size gradients through the composed quantized model, verified two
// ways against the ste_backward contract. The final layer's FFN sites reach
// the loss without crossing another quantizer, so for s-perturbations that
// flip no rounding decision the true derivative of the loss splits exactly
// into the straight-through gradient plus sum(upstream * q) over in-range
// elements (the clipped branch contributes identically to both). The check
// asserts (a) the backward pass reproduces ste_backward's formula and (b) the
// central finite difference matches the split identity, both at 1e-5.
Outcome composed_step_grads() {
    const ModelConfig cfg = grad_config();
    int checked = 0;
    for (uint64_t seed = 1; seed <= 60 && checked < 6; ++seed) {
        ModelT<double> model = make_model_random<double>(cfg, 1000 + seed, 0.25);
        Rng rng(2000 + seed);
        std::vector<int32_t> toks(2 * cfg.max_seq_len);
        for (auto& t : toks) t = rng.next_int(0, cfg.vocab);
        QuantizedModelT<double> qm =
            make_quantized_model(model, QuantBits{4, 4, 8}, false, toks, 2, cfg.max_seq_len);
        DTensor target({2, cfg.num_classes});
        for (auto& e : target.v) e = rng.next_real(-1, 1);

        auto loss_of = [&]() {
            Tape<double> tape;
            ParamLeaves<double> leaves{&tape};
            GraphBuilder<double> gb(tape, qm.latent, leaves, &qm);
            int x = gb.embed(toks, 2, cfg.max_seq_len);
            for (int l = 0; l < cfg.layers; ++l) x = gb.layer(x, l);
            return tape.value(tape.mse(gb.head(x), tape.leaf(target, false))).v[0];
        };

        for (const std::string site : {"layer1/w_2", "layer1/a_gelu"}) {
            QuantSpecT<double>& spec = qm.specs.at(site);
            const double s = spec.step.v[0];
            const double h = 1e-5 * s;

            // capture the governed tensor (pre-quant input of the site)
            DTensor governed;
            {
                Tape<double> tape;
                ParamLeaves<double> leaves{&tape};
                std::map<std::string, DTensor> qcap;
                ForwardHooks<double> hooks;
                hooks.capture = &qcap;
                GraphBuilder<double> gb(tape, qm.latent, leaves, &qm, hooks);
                int x = gb.embed(toks, 2, cfg.max_seq_len);
                for (int l = 0; l < cfg.layers; ++l) x = gb.layer(x, l);
                governed = site == "layer1/w_2" ? qm.latent.layers[1].w_2 : qcap.at(site);
            }
            const auto [qn, qp] = clip_range(spec.bits, spec.mode);
            bool clean = true;
            for (double e : governed.v) {
                for (double sp : {s - h, s, s + h}) {
                    const double q = e / sp;
                    const double dist = std::abs(q - std::round(q));
                    if (dist < 1e-3 && dist > 1e-12) clean = false;
                    if (std::abs(q - qp) < 1e-3 && std::abs(q - qp) > 1e-12) clean = false;
                    if (std::abs(q - qn) < 1e-3 && std::abs(q - qn) > 1e-12) clean = false;
                }
            }
            if (!clean) continue;

            // backward pass with only this step trainable; record the
            // quantize node to read the upstream gradient at the site
            Tape<double> tape;
            ParamLeaves<double> leaves{&tape};
            leaves.trainable = [&](const std::string& n) { return n == "qspec/" + site; };
            std::map<std::string, int> qnodes;
            ForwardHooks<double> hooks;
            hooks.quant_nodes = &qnodes;
            GraphBuilder<double> gb(tape, qm.latent, leaves, &qm, hooks);
            int x = gb.embed(toks, 2, cfg.max_seq_len);
            for (int l = 0; l < cfg.layers; ++l) x = gb.layer(x, l);
            const int loss_id = tape.mse(gb.head(x), tape.leaf(target, false));
            tape.backward(loss_id);
            const DTensor* grad_s = tape.grad(leaves.ids.at("qspec/" + site));
            const DTensor* upstream = tape.grad(qnodes.at(site));
            if (!grad_s || !upstream) return {false, "no gradient reached the step of " + site};

            // (a) the graph's grad_s equals the ste_backward contract
            QuantSpecT<double> site_spec = spec;
            const auto contract = ste_backward(governed, site_spec, *upstream);
            const double wiring_err = std::abs(contract.grad_step.v[0] - grad_s->v[0]) /
                                      std::max(1.0, std::abs(grad_s->v[0]));
            if (wiring_err > 1e-5)
                return {false, site + " backward deviates from ste_backward by " + fmt(wiring_err)};

            // (b) finite difference vs the exact split identity
            double correction = 0.0;  // sum over in-range elements of upstream * q
            for (int64_t i = 0; i < governed.numel(); ++i) {
                const double q = governed.v[i] / s;
                if (q >= qn && q <= qp) correction += upstream->v[i] * q;
            }
            spec.step.v[0] = s + h;
            const double fp = loss_of();
            spec.step.v[0] = s - h;
            const double fm = loss_of();
            spec.step.v[0] = s;
            const double fd = (fp - fm) / (2 * h);
            const double expected = grad_s->v[0] + correction;
            const double err = std::abs(fd - expected) / std::max(1.0, std::abs(fd));
            if (err > 1e-5)
                return {false, site + " FD split-identity mismatch " + fmt(err) + " (fd " +
                                   fmt(fd) + " vs ste " + fmt(grad_s->v[0]) + " + corr " +
                                   fmt(correction) + ")"};
            ++checked;
        }
    }
    if (checked < 4) return {false, "too few boundary-clean step-gradient cases"};
    return {true, std::to_string(checked) +
                      " composed step grads match ste_backward and the FD split identity at 1e-5"};
}

Outcome criterion2() {
    const auto t0 = Clock::now();
    const double op_worst = op_level_fd_worst();
    const double model_worst = composed_model_fd_worst();
    const Outcome steps = composed_step_grads();
    const double secs = seconds_since(t0);
    Outcome oc;
    oc.pass = op_worst < 1e-4 && model_worst < 1e-4 && steps.pass && secs < 60.0;
    oc.detail = "op-level max rel err " + fmt(op_worst) + ", composed 2-layer model max rel err " +
                fmt(model_worst) + ", " + steps.detail + ", " + fmt(secs) + "s";
    return oc;
}

// ---------- criterion 3: identity reduction ----------

Outcome criterion3() {
    ModelConfig cfg = grad_config();
    DataConfig dc;
    dc.train_size = 96;
    dc.heldout_size = 32;
    const Dataset ds = gen_synthetic_task(cfg, dc, 77);
    const CalibrationSet calib = sample_calibration(ds, 48, 77);
    FpTrainConfig fpc;
    fpc.steps = 40;
    fpc.seed = 77;
    const Model fp = train_fp(cfg, ds, fpc);

    TrainConfig tc;
    tc.bits = QuantBits{0, 0, 0};
    tc.steps = 6;
    tc.rem_steps = 3;
    tc.batch_size = 8;
    tc.modules = 2;
    tc.seed = 77;

    Rng rng(12);
    std::vector<int32_t> toks(3 * cfg.max_seq_len);
    for (auto& t : toks) t = rng.next_int(0, cfg.vocab);
    const QuantizedModel idle = build_quantized_for(fp, tc, probe_batch(calib, tc));
    const auto f = forward_fp(fp, toks, 3, cfg.max_seq_len);
    const auto q = forward_quantized_full(idle, toks, 3, cfg.max_seq_len);
    bool bitwise = f.logits.v == q.logits.v;
    for (size_t l = 0; l < f.hidden.size(); ++l) bitwise = bitwise && f.hidden[l].v == q.hidden[l].v;

    const float loss = mrem_loss<float>(q.hidden, f.hidden);

    auto unchanged = [&](const QuantizedModel& qm) {
        const NamedTensors a = model_to_tensors(qm.latent), b = model_to_tensors(fp);
        for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib)
            if (ia->second.v != ib->second.v) return false;
        return true;
    };
    const bool rem_noop = unchanged(train_rem(fp, calib, tc));
    const bool mrems_noop = unchanged(train_mrem_s(fp, calib, tc));
    const bool mremp_noop = unchanged(train_mrem_p(fp, calib, tc));

    Outcome oc;
    oc.pass = bitwise && loss == 0.0f && rem_noop && mrems_noop && mremp_noop;
    oc.detail = std::string("forward bit-identical: ") + (bitwise ? "yes" : "NO") +
                ", mrem_loss = " + fmt(loss) + ", train loops are no-ops (rem/mrem-s/mrem-p): " +
                (rem_noop ? "y" : "N") + "/" + (mrems_noop ? "y" : "N") + "/" +
                (mremp_noop ? "y" : "N");
    return oc;
}

// ---------- criteria 4-10: the toy pipeline ----------

struct ToyWorld {
    ModelConfig cfg;
    Dataset data;
    Model fp;
};

ToyWorld g_toy;

Outcome criterion4() {
    const auto t0 = Clock::now();
    g_toy.cfg = ModelConfig{};  // toy default: 8 layers, d_model 32
    g_toy.data = gen_synthetic_task(g_toy.cfg, DataConfig{}, 1);
    FpTrainConfig fpc;  // defaults: 2000 steps, lr 1e-3, batch 32
    fpc.seed = 1;
    g_toy.fp = train_fp(g_toy.cfg, g_toy.data, fpc);
    const double acc = accuracy_fp(g_toy.fp, g_toy.data.held_out);
    const double secs = seconds_since(t0);
    Outcome oc;
    oc.pass = acc >= 0.95 && secs < 300.0;
    oc.detail = "held-out accuracy " + fmt(acc) + " in " + fmt(secs) +
                "s (gate: >= 0.95 in < 300s)";
    return oc;
}

struct DirectionalRun {
    double rem_logit_mse = 0.0;
    double mrems_logit_mse = 0.0;
    ReconReport rem_recon;
    ReconReport mrems_recon;
    ReconReport mremp_recon;
    bool has_mremp = false;
};

TrainConfig directional_config(QuantBits bits, uint64_t seed) {
    TrainConfig tc;
    tc.bits = bits;
    tc.seed = seed;
    tc.modules = 4;
    tc.batch_size = 32;
    tc.lr = 1e-4;
    // equal total budget: 65 REM units x 32 steps == 4 modules x 520 steps
    tc.steps = 520;
    tc.rem_steps = 32;
    return tc;
}

DirectionalRun run_directional(QuantBits bits, uint64_t seed, bool with_mremp) {
    const CalibrationSet calib = sample_calibration(g_toy.data, 1024, seed);
    const TrainConfig tc = directional_config(bits, seed);
    DirectionalRun out;
    const QuantizedModel rem = train_rem(g_toy.fp, calib, tc);
    const QuantizedModel mrems = train_mrem_s(g_toy.fp, calib, tc);
    out.rem_logit_mse = logit_mse_between(g_toy.fp, rem, g_toy.data.held_out, 512);
    out.mrems_logit_mse = logit_mse_between(g_toy.fp, mrems, g_toy.data.held_out, 512);
    out.rem_recon = reconstruction_report(g_toy.fp, rem, calib.tokens, 256, calib.len);
    out.mrems_recon = reconstruction_report(g_toy.fp, mrems, calib.tokens, 256, calib.len);
    if (with_mremp) {
        const QuantizedModel mremp = train_mrem_p(g_toy.fp, calib, tc);
        out.mremp_recon = reconstruction_report(g_toy.fp, mremp, calib.tokens, 256, calib.len);
        out.has_mremp = true;
    }
    return out;
}

std::vector<DirectionalRun> g_runs_228;  // shared by criteria 5, 6, 10
const std::vector<uint64_t> kSeeds{1, 2, 3, 4, 5};

Outcome criterion5() {
    int wins_228 = 0, wins_224 = 0;
    for (uint64_t seed : kSeeds) {
        g_runs_228.push_back(run_directional(QuantBits{2, 2, 8}, seed, true));
        if (g_runs_228.back().mrems_logit_mse < g_runs_228.back().rem_logit_mse) ++wins_228;
    }
    for (uint64_t seed : kSeeds) {
        const DirectionalRun run = run_directional(QuantBits{2, 2, 4}, seed, false);
        if (run.mrems_logit_mse < run.rem_logit_mse) ++wins_224;
    }
    Outcome oc;
    oc.pass = wins_228 >= 4 && wins_224 >= 4;
    oc.detail = "MREM-S < REM on held-out logit MSE under an equal 2080-step budget: " +
                std::to_string(wins_228) + "/5 seeds at 2-2-8, " + std::to_string(wins_224) +
                "/5 at 2-2-4 (seed 1 at 2-2-8: " + fmt(g_runs_228[0].mrems_logit_mse) + " vs " +
                fmt(g_runs_228[0].rem_logit_mse) + ")";
    return oc;
}

Outcome criterion6() {
    int ok = 0;
    double worst_ratio = 0;
    for (const DirectionalRun& run : g_runs_228) {
        const double ratio = run.mremp_recon.total / run.mrems_recon.total;
        worst_ratio = std::max(worst_ratio, ratio);
        if (ratio <= 1.25) ++ok;
    }
    Outcome oc;
    oc.pass = ok == static_cast<int>(g_runs_228.size());
    oc.detail = "lockstep MREM-P total reconstruction loss <= 1.25x MREM-S's in " +
                std::to_string(ok) + "/5 seeds at 2-2-8 (worst ratio " + fmt(worst_ratio) + ")";
    return oc;
}

Outcome criterion7() {
    int wins = 0;
    for (uint64_t seed : kSeeds) {
        const CalibrationSet calib = sample_calibration(g_toy.data, 1024, seed);
        TrainConfig tc;
        tc.bits = QuantBits{2, 2, 4};
        tc.seed = seed;
        tc.modules = 4;
        tc.steps = 250;
        tc.batch_size = 32;
        tc.lr = 1e-4;
        tc.t0_fraction = 0.4;
        const QuantizedModel with_tf = train_mrem_p(g_toy.fp, calib, tc);
        tc.t0_fraction = 0.0;
        const QuantizedModel without_tf = train_mrem_p(g_toy.fp, calib, tc);
        const double loss_tf =
            reconstruction_report(g_toy.fp, with_tf, calib.tokens, calib.size, calib.len).total;
        const double loss_no =
            reconstruction_report(g_toy.fp, without_tf, calib.tokens, calib.size, calib.len).total;
        if (loss_tf < loss_no) ++wins;
    }
    Outcome oc;
    oc.pass = wins >= 4;
    oc.detail = "MREM-P (250-step budget, 2-2-4): T0=0.4T beats T0=0 on final reconstruction "
                "loss in " +
                std::to_string(wins) + "/5 seeds";
    return oc;
}

Outcome criterion8() {
    const SpeedupReport rep = simulate_speedup(4, 2000, 4, 4);
    const bool closed_form = rep.mremp_ticks == 2016 && rep.sequential_ticks == 8000 &&
                             rep.gpipe_ticks == 14000 &&
                             std::abs(rep.bubble - 3.0 / 7.0) < 1e-12 &&
                             std::abs(rep.speedup_vs_sequential - 8000.0 / 2016.0) < 1e-9;

    // wall-clock leg: threads-mode MREM-P vs MREM-S on the same config
    const CalibrationSet calib = sample_calibration(g_toy.data, 256, 5);
    TrainConfig tc;
    tc.bits = QuantBits{2, 2, 8};
    tc.seed = 5;
    tc.steps = 120;
    tc.modules = 4;
    tc.batch_size = 32;
    const auto t0 = Clock::now();
    train_mrem_s(g_toy.fp, calib, tc);
    const double seq_secs = seconds_since(t0);
    tc.mode = TrainConfig::Mode::threads;
    const auto t1 = Clock::now();
    train_mrem_p(g_toy.fp, calib, tc);
    const double par_secs = seconds_since(t1);
    const double speedup = seq_secs / par_secs;
    const unsigned cores = std::thread::hardware_concurrency();

    Outcome oc;
    if (cores >= 4) {
        oc.pass = closed_form && speedup >= 2.5;
        oc.detail = "simulate_speedup(4,2000,4,4) = 2016/8000/14000 ticks, bubble 3/7, 3.97x " +
                    std::string(closed_form ? "(exact)" : "(WRONG)") + "; threads wall speed-up " +
                    fmt(speedup) + "x on " + std::to_string(cores) + " cores (gate >= 2.5x)";
    } else {
        oc.pass = closed_form;
        oc.detail = "simulate_speedup(4,2000,4,4) = 2016/8000/14000 ticks, bubble 3/7, 3.97x " +
                    std::string(closed_form ? "(exact)" : "(WRONG)") +
                    "; wall-clock gate needs a 4-core host, this host has " +
                    std::to_string(cores) + " (measured " + fmt(speedup) + "x, informational)";
    }
    return oc;
}

Outcome criterion9() {
    ModelConfig cfg;
    cfg.layers = 4;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.d_ff = 16;
    cfg.vocab = 16;
    cfg.max_seq_len = 6;
    DataConfig dc;
    dc.train_size = 96;
    dc.heldout_size = 16;
    const Dataset ds = gen_synthetic_task(cfg, dc, 9);
    const CalibrationSet calib = sample_calibration(ds, 48, 9);
    FpTrainConfig fpc;
    fpc.steps = 30;
    fpc.seed = 9;
    const Model fp = train_fp(cfg, ds, fpc);

    int64_t ticks_done = 0;
    bool ok_size = true, ok_staleness = true, ok_pairing = true, ok_hashes = true;
    Rng fuzz_rng(2468);
    int run_index = 0;
    while (ticks_done < 1000) {
        ++run_index;
        TrainConfig tc;
        tc.bits = QuantBits{2, 2, 8};
        tc.seed = 1000 + run_index;
        tc.modules = fuzz_rng.next_int(2, 5);
        tc.queue_t0 = fuzz_rng.next_int(1, 6);
        tc.steps = fuzz_rng.next_int(40, 120);
        tc.batch_size = 4;

        const Partition part = partition_layers(cfg.layers, tc.modules);
        std::vector<ModuleView> views;
        for (int n = 1; n <= tc.modules; ++n) views.push_back(module_view(cfg, part, n));

        const QuantizedModel* live = nullptr;
        auto module_hash = [&](int module) {
            const ModuleView& v = views[module - 1];
            uint64_t h = 1469598103934665603ull;
            auto mix = [&h](const Tensor& t) {
                const auto* bytes = reinterpret_cast<const unsigned char*>(t.v.data());
                for (size_t i = 0; i < t.v.size() * sizeof(float); ++i) {
                    h ^= bytes[i];
                    h *= 1099511628211ull;
                }
            };
            std::map<std::string, const Tensor*> params;
            for_each_param(live->latent,
                           [&](const std::string& n, const Tensor& t) { params[n] = &t; });
            for (const auto& name : v.param_names) mix(*params.at(name));
            for (const auto& site : v.site_ids) {
                const QuantSpec* s = live->spec_for(site);
                if (s && s->step.numel() > 0) mix(s->step);
            }
            return h;
        };

        std::map<int, uint64_t> before_hashes;
        std::map<int, int64_t> sampled_batch;
        ParallelProbe probe;
        probe.on_model = [&](const QuantizedModel& qm) { live = &qm; };
        probe.before_step = [&](int module, int) {
            for (int m = 1; m <= tc.modules; ++m)
                if (m != module) before_hashes[m] = module_hash(m);
        };
        probe.after_step = [&](int module, int) {
            for (int m = 1; m <= tc.modules; ++m)
                if (m != module) ok_hashes = ok_hashes && module_hash(m) == before_hashes[m];
        };
        probe.on_sample = [&](int boundary, const QueueEntry& e, int64_t staleness, int size) {
            sampled_batch[boundary + 1] = e.batch_id;
            ok_staleness = ok_staleness && staleness >= 1 && staleness <= tc.queue_t0;
            ok_size = ok_size && size >= 1 && size <= tc.queue_t0;
        };
        probe.on_push = [&](int boundary, const QueueEntry& e, int size) {
            ok_size = ok_size && size <= tc.queue_t0;
            auto it = sampled_batch.find(boundary);
            if (it != sampled_batch.end()) ok_pairing = ok_pairing && e.batch_id == it->second;
        };

        train_mrem_p(fp, calib, tc, nullptr, &probe);
        ticks_done += tc.steps;
    }

    Outcome oc;
    oc.pass = ok_size && ok_staleness && ok_pairing && ok_hashes;
    oc.detail = std::to_string(ticks_done) + " randomized lockstep ticks over " +
                std::to_string(run_index) + " configs: queue size <= t0 " +
                (ok_size ? "ok" : "VIOLATED") + ", staleness <= t0 " +
                (ok_staleness ? "ok" : "VIOLATED") + ", batch pairing " +
                (ok_pairing ? "ok" : "VIOLATED") + ", foreign-worker hashes " +
                (ok_hashes ? "ok" : "VIOLATED");
    return oc;
}

Outcome criterion10() {
    // reuses the 2-2-8 REM / MREM-S runs of criterion 5
    int seeds_ok = 0;
    int embed_row_wins = 0;
    for (const DirectionalRun& run : g_runs_228) {
        bool all_layers = true;
        // rows 1..L are the transformer layers; row 0 is the embedding output,
        // which REM trains as a dedicated unit (reported separately below)
        for (size_t l = 1; l < run.rem_recon.per_layer.size(); ++l)
            if (!(run.mrems_recon.per_layer[l] <= run.rem_recon.per_layer[l] * (1 + 1e-6)))
                all_layers = false;
        if (all_layers) ++seeds_ok;
        if (run.mrems_recon.per_layer[0] <= run.rem_recon.per_layer[0] * (1 + 1e-6))
            ++embed_row_wins;
    }
    Outcome oc;
    oc.pass = seeds_ok >= 4;
    oc.detail = "MREM-S per-layer error <= REM's at every transformer layer (rows 1..L) in " +
                std::to_string(seeds_ok) + "/5 seeds at 2-2-8; embedding row (l=0, trained as a "
                "dedicated REM unit) favors MREM in " +
                std::to_string(embed_row_wins) + "/5";
    return oc;
}

// ---------- criterion 11: pipeline determinism ----------

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) return "<missing:" + path + ">";
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

std::string strip_wall_column(const std::string& csv) {
    std::istringstream is(csv);
    std::ostringstream os;
    std::string line;
    while (std::getline(is, line)) {
        const auto last_comma = line.rfind(',');
        os << (last_comma == std::string::npos ? line : line.substr(0, last_comma)) << "\n";
    }
    return os.str();
}

Outcome criterion11() {
    const fs::path root = fs::temp_directory_path() / "mremq_acceptance_det";
    fs::remove_all(root);
    fs::create_directories(root);
    const std::string cfg_path = (root / "run.cfg").string();
    {
        std::ofstream os(cfg_path);
        os << "seed = 11\nlayers = 8\nd_model = 32\nheads = 2\nd_ff = 64\nvocab = 64\n"
           << "max_seq_len = 16\ntrain_size = 512\nheldout_size = 64\ncalib_size = 128\n"
           << "batch_size = 16\nsteps = 30\nmodules = 4\nbits = 2,2,8\nmode = lockstep\n"
           << "fp_steps = 120\n";
    }
    const std::string data_dir = (root / "data").string();
    const std::string fp_dir = (root / "fp").string();
    auto run = [&](std::vector<std::string> args) { return run_cli(args); };
    if (run({"gen-data", "--config", cfg_path, "--out", data_dir}) != 0)
        return {false, "gen-data failed"};
    if (run({"train-fp", "--config", cfg_path, "--data", data_dir + "/data.mrmq", "--out",
             fp_dir}) != 0)
        return {false, "train-fp failed"};

    auto quantize_into = [&](const std::string& out) {
        return run({"quantize", "--config", cfg_path, "--method", "mrem-p", "--fp-ckpt",
                    fp_dir + "/ckpt/fp.mrmq", "--data", data_dir + "/data.mrmq", "--out", out});
    };
    const std::string run_a = (root / "runA").string();
    const std::string run_b = (root / "runB").string();
    if (quantize_into(run_a) != 0 || quantize_into(run_b) != 0)
        return {false, "quantize run failed"};

    const bool ckpt_equal =
        slurp(run_a + "/ckpt/quantized.mrmq") == slurp(run_b + "/ckpt/quantized.mrmq");
    const bool metrics_equal = strip_wall_column(slurp(run_a + "/metrics.csv")) ==
                               strip_wall_column(slurp(run_b + "/metrics.csv"));
    const bool echo_equal = slurp(run_a + "/config.echo") == slurp(run_b + "/config.echo");
    const bool summary_equal = slurp(run_a + "/summary.txt") == slurp(run_b + "/summary.txt");
    fs::remove_all(root);

    Outcome oc;
    oc.pass = ckpt_equal && metrics_equal && echo_equal && summary_equal;
    oc.detail = std::string("two lockstep mrem-p runs from one config: checkpoints ") +
                (ckpt_equal ? "byte-identical" : "DIFFER") + ", metrics (wall_ms excluded) " +
                (metrics_equal ? "identical" : "DIFFER") + ", config echo " +
                (echo_equal ? "identical" : "DIFFER") + ", summary " +
                (summary_equal ? "identical" : "DIFFER");
    return oc;
}

}  // namespace

int main() {
    const auto t0 = Clock::now();
    std::printf("acceptance suite (toy transformer PTQ)\n");
    report(1, "quantizer laws", criterion1());
    report(2, "gradient oracle", criterion2());
    report(3, "identity reduction", criterion3());
    report(4, "FP baseline gate", criterion4());
    report(5, "directional REM vs MREM-S (Table 5)", criterion5());
    report(6, "directional MREM-P vs MREM-S (Table 1)", criterion6());
    report(7, "teacher forcing at short budget (Table 4)", criterion7());
    report(8, "speed-up accounting", criterion8());
    report(9, "runtime invariants under fuzzing", criterion9());
    report(10, "error-propagation report (Fig. 3)", criterion10());
    report(11, "pipeline determinism", criterion11());
    std::printf("%d/11 criteria passed in %.1fs\n", 11 - g_failures, seconds_since(t0));
    return g_failures == 0 ? 0 : 1;
}
