#include "mremq/parallel.hpp"

#include <chrono>
#include <memory>
#include <cmath>
#include <cstdio>
#include <exception>
#include <sstream>
#include <thread>
#include <vector>

#include "mremq/partition.hpp"
#include "mremq/rng.hpp"

namespace mremq {

BoundaryQueue::BoundaryQueue(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw ContractError("boundary queue capacity must be >= 1");
}

void BoundaryQueue::push(QueueEntry entry) {
    std::lock_guard<std::mutex> lock(mu_);
    entries_.push_back(std::move(entry));
    ++pushes_;
    if (static_cast<int>(entries_.size()) > capacity_) entries_.pop_front();
}

QueueEntry BoundaryQueue::sample(Rng& rng) const {
    std::lock_guard<std::mutex> lock(mu_);
    if (entries_.empty())
        throw TrainingError("sample from empty boundary queue (warm-up not performed)");
    const int k = rng.next_int(0, static_cast<int>(entries_.size()));
    return entries_[k];
}

int BoundaryQueue::size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return static_cast<int>(entries_.size());
}

int64_t BoundaryQueue::pushes() const {
    std::lock_guard<std::mutex> lock(mu_);
    return pushes_;
}

int64_t BoundaryQueue::staleness_of(const QueueEntry& entry) const {
    std::lock_guard<std::mutex> lock(mu_);
    return pushes_ - entry.step_stamp + 1;
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

struct WorkerContext {
    ModuleTrainer trainer;
    Rng rng;        // queue sampling
    Rng batch_rng;  // worker 1 only: fresh calibration batches
};

struct PendingPush {
    int boundary;  // 1-based boundary index == producing module index
    QueueEntry entry;
};

}  // namespace

QuantizedModel train_mrem_p(const Model& fp, const CalibrationSet& calib, const TrainConfig& cfg,
                            MetricsSink* sink, const ParallelProbe* probe) {
    cfg.validate();
    if (cfg.modules < 2)
        throw ContractError("train_mrem_p requires N >= 2 modules (N = 1 is MREM-S)");
    QuantizedModel qm = build_quantized_for(fp, cfg, probe_batch(calib, cfg));
    if (probe && probe->on_model) probe->on_model(qm);
    const Partition part = partition_layers(fp.cfg.layers, cfg.modules);
    const int n_modules = part.modules();
    const Schedule sched{cfg.steps, cfg.teacher_forcing_horizon(), cfg.lr};
    const auto start = Clock::now();

    std::vector<ModuleView> views;
    for (int n = 1; n <= n_modules; ++n) views.push_back(module_view(fp.cfg, part, n));

    std::vector<std::unique_ptr<BoundaryQueue>> queue_store;
    for (int n = 1; n < n_modules; ++n)
        queue_store.push_back(std::make_unique<BoundaryQueue>(cfg.queue_t0));
    auto queues = [&](int boundary) -> BoundaryQueue& { return *queue_store[boundary]; };

    std::vector<WorkerContext> workers;
    workers.reserve(n_modules);
    for (int n = 0; n < n_modules; ++n)
        workers.push_back(WorkerContext{
            ModuleTrainer(fp, qm, views[n], sched, AdamWConfig{}, cfg.teacher_forcing),
            Rng(derive_seed(cfg.seed, "mrem-p-worker", static_cast<uint64_t>(n + 1))),
            Rng(derive_seed(cfg.seed, "mrem-p-batch", static_cast<uint64_t>(n + 1)))});

    // Warm-up: t0 sequential full passes, pushing paired outputs at every
    // boundary. No training, no teacher forcing.
    Rng warmup_rng(derive_seed(cfg.seed, "mrem-p-warmup"));
    for (int pass = 1; pass <= cfg.queue_t0; ++pass) {
        const TokenBatch tb = draw_batch(calib, cfg.batch_size, warmup_rng);
        const int64_t batch_id = pass;
        Tensor f_state, fhat_state;
        for (int n = 0; n < n_modules; ++n) {
            StepInputs in;
            if (n == 0) {
                in.tokens = &tb;
            } else {
                in.f_in = &f_state;
                in.fhat_in = &fhat_state;
            }
            const ModuleForward ffwd = run_module_fp(fp, views[n], in);
            const ModuleForward qfwd = run_module_quantized(qm, views[n], in);
            f_state = ffwd.outputs.back();
            fhat_state = qfwd.outputs.back();
            if (n + 1 < n_modules) {
                QueueEntry e{f_state, fhat_state, batch_id, pass};
                queues(n).push(e);
                if (probe && probe->on_push) probe->on_push(n + 1, e, queues(n).size());
            }
        }
    }

    const int64_t warmup_ticks = static_cast<int64_t>(n_modules) * cfg.queue_t0;

    auto worker_step = [&](int n, int t, std::vector<PendingPush>* staged) {
        // n is 0-based module index, t is 1-based training step
        WorkerContext& w = workers[n];
        StepInputs in;
        TokenBatch tb;
        QueueEntry entry;
        int64_t batch_id;
        if (n == 0) {
            tb = draw_batch(calib, cfg.batch_size, w.batch_rng);
            in.tokens = &tb;
            batch_id = cfg.queue_t0 + t;
        } else {
            entry = queues(n - 1).sample(w.rng);
            if (probe && probe->on_sample)
                probe->on_sample(n, entry, queues(n - 1).staleness_of(entry),
                                 queues(n - 1).size());
            in.f_in = &entry.f;
            in.fhat_in = &entry.fhat;
            batch_id = entry.batch_id;
        }
        const StepResult res = w.trainer.step(in, t - 1);
        if (n + 1 < n_modules) {
            QueueEntry out{res.f_out, res.fhat_out, batch_id, cfg.queue_t0 + t};
            if (staged)
                staged->push_back({n + 1, std::move(out)});
            else {
                queues(n).push(out);
                if (probe && probe->on_push) probe->on_push(n + 1, out, queues(n).size());
            }
        }
        if (sink) {
            const int64_t tick =
                cfg.mode == TrainConfig::Mode::lockstep ? warmup_ticks + t : static_cast<int64_t>(t);
            sink->push({tick, t, n + 1, res.loss, res.lambda, res.lr, ms_since(start)});
        }
    };

    if (cfg.mode == TrainConfig::Mode::lockstep) {
        for (int t = 1; t <= cfg.steps; ++t) {
            std::vector<PendingPush> staged;
            for (int n = 0; n < n_modules; ++n) {
                if (probe && probe->before_step) probe->before_step(n + 1, t);
                worker_step(n, t, &staged);
                if (probe && probe->after_step) probe->after_step(n + 1, t);
            }
            // queue updates become visible only at the end of the tick
            for (PendingPush& p : staged) {
                queues(p.boundary - 1).push(p.entry);
                if (probe && probe->on_push)
                    probe->on_push(p.boundary, p.entry, queues(p.boundary - 1).size());
            }
        }
    } else {
        std::vector<std::thread> threads;
        std::vector<std::exception_ptr> errors(n_modules);
        for (int n = 0; n < n_modules; ++n) {
            threads.emplace_back([&, n] {
                try {
                    for (int t = 1; t <= cfg.steps; ++t) worker_step(n, t, nullptr);
                } catch (...) {
                    errors[n] = std::current_exception();
                }
            });
        }
        for (auto& th : threads) th.join();
        for (auto& err : errors)
            if (err) std::rethrow_exception(err);
    }
    return qm;
}

double gpipe_bubble(int stages, int micro_batches) {
    if (stages < 1 || micro_batches < 1)
        throw ContractError("gpipe_bubble: need N >= 1 and M >= 1");
    return static_cast<double>(stages - 1) / static_cast<double>(stages + micro_batches - 1);
}

SpeedupReport simulate_speedup(int modules, int64_t steps, int stale_t0, int micro_batches) {
    if (modules < 1 || steps < 1 || stale_t0 < 1)
        throw ContractError("simulate_speedup: need N >= 1, T >= 1, t0 >= 1");
    SpeedupReport rep;
    rep.modules = modules;
    rep.steps = steps;
    rep.stale_t0 = stale_t0;
    rep.micro_batches = micro_batches;
    rep.sequential_ticks = static_cast<int64_t>(modules) * steps;
    rep.mremp_ticks = modules == 1 ? steps : steps + static_cast<int64_t>(modules) * stale_t0;
    rep.bubble = gpipe_bubble(modules, micro_batches);
    // N*T / (1 - bubble) == N*T*(N+M-1)/M, integral for these inputs
    rep.gpipe_ticks = rep.sequential_ticks * (modules + micro_batches - 1) / micro_batches;
    rep.speedup_vs_sequential =
        static_cast<double>(rep.sequential_ticks) / static_cast<double>(rep.mremp_ticks);
    return rep;
}

std::string speedup_table(const SpeedupReport& r) {
    std::ostringstream os;
    char line[160];
    os << "pipeline tick accounting (N=" << r.modules << ", T=" << r.steps << ", t0=" << r.stale_t0
       << ", M=" << r.micro_batches << ")\n";
    std::snprintf(line, sizeof(line), "  %-28s %12lld\n", "parallel (stale queues):",
                  static_cast<long long>(r.mremp_ticks));
    os << line;
    std::snprintf(line, sizeof(line), "  %-28s %12lld\n", "sequential:",
                  static_cast<long long>(r.sequential_ticks));
    os << line;
    std::snprintf(line, sizeof(line), "  %-28s %12lld  (bubble %.4f)\n", "gpipe:",
                  static_cast<long long>(r.gpipe_ticks), r.bubble);
    os << line;
    std::snprintf(line, sizeof(line), "  %-28s %11.2fx\n", "speed-up vs sequential:",
                  r.speedup_vs_sequential);
    os << line;
    return os.str();
}

std::string speedup_csv(const SpeedupReport& r) {
    std::ostringstream os;
    os << "modules,steps,t0,micro_batches,mremp_ticks,sequential_ticks,gpipe_ticks,bubble,speedup\n";
    char line[200];
    std::snprintf(line, sizeof(line), "%d,%lld,%d,%d,%lld,%lld,%lld,%.9g,%.9g\n", r.modules,
                  static_cast<long long>(r.steps), r.stale_t0, r.micro_batches,
                  static_cast<long long>(r.mremp_ticks), static_cast<long long>(r.sequential_ticks),
                  static_cast<long long>(r.gpipe_ticks), r.bubble, r.speedup_vs_sequential);
    os << line;
    return os.str();
}

}  // namespace mremq
