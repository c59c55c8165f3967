#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <string>

#include "mremq/metrics.hpp"
#include "mremq/trainers.hpp"

namespace mremq {

// One boundary entry: the paired full-precision / quantized activations of
// the same calibration batch, stamped with the producer's push counter.
struct QueueEntry {
    Tensor f, fhat;
    int64_t batch_id = 0;
    int64_t step_stamp = 0;
};

// Bounded FIFO of the most recent t0 boundary outputs. push evicts the
// oldest entry beyond capacity; sample draws uniformly with replacement.
// All operations lock, so threads-mode workers share queues safely.
class BoundaryQueue {
public:
    explicit BoundaryQueue(int capacity);

    void push(QueueEntry entry);
    QueueEntry sample(Rng& rng) const;  // copy-out snapshot

    int size() const;
    int capacity() const { return capacity_; }
    int64_t pushes() const;

    // pushes-so-far minus the entry's stamp, plus one: <= capacity under FIFO
    int64_t staleness_of(const QueueEntry& entry) const;

private:
    mutable std::mutex mu_;
    std::deque<QueueEntry> entries_;
    int capacity_;
    int64_t pushes_ = 0;
};

// Test instrumentation for the runtime invariants.
struct ParallelProbe {
    std::function<void(const QuantizedModel& live)> on_model;  // once, before warm-up
    std::function<void(int boundary, const QueueEntry& entry, int64_t staleness, int queue_size)>
        on_sample;
    std::function<void(int boundary, const QueueEntry& entry, int queue_size)> on_push;
    std::function<void(int module, int step)> before_step;  // lockstep only
    std::function<void(int module, int step)> after_step;   // lockstep only
};

// Parallel MREM (Alg. 1): warm-up fill, then N per-module workers sampling
// stale inputs from the boundary queues. Lockstep mode advances all workers
// one step per global tick against the previous tick's queue state and is
// bit-reproducible; threads mode runs real concurrent workers.
QuantizedModel train_mrem_p(const Model& fp, const CalibrationSet& calib, const TrainConfig& cfg,
                            MetricsSink* sink = nullptr, const ParallelProbe* probe = nullptr);

// ---- pipeline accounting ----

// GPipe bubble fraction (N-1)/(N+M-1) for N stages and M micro-batches.
double gpipe_bubble(int stages, int micro_batches);

struct SpeedupReport {
    int modules = 0;
    int64_t steps = 0;
    int stale_t0 = 0;
    int micro_batches = 0;
    int64_t mremp_ticks = 0;       // T + N*t0 (T when N == 1)
    int64_t sequential_ticks = 0;  // N*T
    int64_t gpipe_ticks = 0;       // N*T / (1 - bubble)
    double bubble = 0.0;
    double speedup_vs_sequential = 0.0;
};

// Closed-form tick accounting: one module-step per tick per device.
SpeedupReport simulate_speedup(int modules, int64_t steps, int stale_t0, int micro_batches);

std::string speedup_table(const SpeedupReport& rep);
std::string speedup_csv(const SpeedupReport& rep);

}  // namespace mremq
