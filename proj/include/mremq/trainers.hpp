#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mremq/data.hpp"
#include "mremq/metrics.hpp"
#include "mremq/objectives.hpp"
#include "mremq/transformer.hpp"

namespace mremq {

struct TrainConfig {
    int steps = 2000;        // T: per-module budget for MREM-S / MREM-P
    int rem_steps = 200;     // per matmul unit for greedy REM
    int qat_steps = 2000;    // end-to-end QAT budget
    double lr = 1e-4;
    int batch_size = 32;
    QuantBits bits{4, 4, 8};
    int modules = 4;         // N
    int queue_t0 = 4;        // staleness threshold t0
    double t0_fraction = 0.4;  // T0 = round(t0_fraction * T)
    uint64_t seed = 1;
    bool pcq = false;
    bool teacher_forcing = true;
    enum class Mode { lockstep, threads } mode = Mode::lockstep;

    int teacher_forcing_horizon() const {
        return static_cast<int>(std::lround(t0_fraction * steps));
    }

    void validate() const {
        if (steps < 1 || rem_steps < 1 || qat_steps < 1 || batch_size < 1 || modules < 1 ||
            queue_t0 < 1)
            throw ContractError("train config: counts must be positive");
        if (!(lr > 0)) throw ContractError("train config: lr must be positive");
        if (t0_fraction < 0.0 || t0_fraction > 1.0)
            throw ContractError("train config: t0_fraction must lie in [0,1]");
        bits.validate();
    }
};

struct FpTrainConfig {
    int steps = 2000;
    double lr = 1e-3;
    int batch_size = 32;
    uint64_t seed = 1;
};

// Full-precision fine-tuning on the labeled train split (cross-entropy).
Model train_fp(const ModelConfig& cfg, const Dataset& data, const FpTrainConfig& tc,
               MetricsSink* sink = nullptr);

// Greedy per-matmul reconstruction error minimization: units are visited in
// placement order; each unit trains only its weight latent and the step sizes
// of its operands, with all predecessors quantized and frozen.
QuantizedModel train_rem(const Model& fp, const CalibrationSet& calib, const TrainConfig& cfg,
                         MetricsSink* sink = nullptr);

// Sequential module-wise reconstruction error minimization.
QuantizedModel train_mrem_s(const Model& fp, const CalibrationSet& calib, const TrainConfig& cfg,
                            MetricsSink* sink = nullptr);

// End-to-end QAT with logit-MSE distillation to the frozen FP model; consumes
// the full training split.
QuantizedModel train_qat(const Model& fp, const Dataset& data, const TrainConfig& cfg,
                         MetricsSink* sink = nullptr);

// Shared construction: latent copy + specs + LSQ step initialization from a
// deterministic probe batch.
QuantizedModel build_quantized_for(const Model& fp, const TrainConfig& cfg, const TokenBatch& probe);
TokenBatch probe_batch(const CalibrationSet& calib, const TrainConfig& cfg);

// The order in which greedy REM first touches each quantization site; equals
// the placement_sites order.
std::vector<std::string> rem_site_visit_order(const ModelConfig& cfg);

// ---- evaluation ----

Tensor fp_logits(const Model& model, const TokenBatch& batch);
Tensor quantized_logits(const QuantizedModel& qm, const TokenBatch& batch);

double accuracy_fp(const Model& model, const TokenSplit& split, int batch_size = 64);
double accuracy_quantized(const QuantizedModel& qm, const TokenSplit& split, int batch_size = 64);

// Mean squared error between quantized and FP logits over (up to) the first
// max_examples rows of a split.
double logit_mse_between(const Model& fp, const QuantizedModel& qm, const TokenSplit& split,
                         int max_examples = 0, int batch_size = 64);

// Per-layer reconstruction error f_hat_l vs f_l (l = 0..L), logit MSE, and
// their sum — the whole-network MREM objective value.
struct ReconReport {
    std::vector<double> per_layer;
    double logit_mse = 0.0;
    double total = 0.0;
};
ReconReport reconstruction_report(const Model& fp, const QuantizedModel& qm,
                                  const std::vector<int32_t>& tokens, int num, int len,
                                  int batch_size = 64);

}  // namespace mremq
