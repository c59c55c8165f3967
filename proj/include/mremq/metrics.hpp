#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace mremq {

struct MetricRow {
    int64_t tick = 0;
    int step = 0;
    int module = 0;
    double loss = 0.0;
    double lambda = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

// Where trainers report per-step records. The CLI plugs in a CSV writer;
// tests collect rows in memory.
class MetricsSink {
public:
    virtual ~MetricsSink() = default;
    virtual void push(const MetricRow& row) = 0;
};

class VectorSink : public MetricsSink {
public:
    void push(const MetricRow& row) override {
        std::lock_guard<std::mutex> lock(mu_);
        rows_.push_back(row);
    }
    std::vector<MetricRow> rows() const {
        std::lock_guard<std::mutex> lock(mu_);
        return rows_;
    }

private:
    mutable std::mutex mu_;
    std::vector<MetricRow> rows_;
};

// CSV writer: producers feed a bounded queue, one consumer thread drains it
// to disk with incremental flushes. close() (or destruction) joins the
// consumer after the queue empties.
class CsvMetricsWriter : public MetricsSink {
public:
    explicit CsvMetricsWriter(const std::string& path, size_t queue_capacity = 1024);
    ~CsvMetricsWriter() override;

    void push(const MetricRow& row) override;
    void close();

    static std::string format_row(const MetricRow& row);
    static const char* header();

private:
    void run();

    std::ofstream out_;
    std::mutex mu_;
    std::condition_variable not_full_, not_empty_;
    std::deque<MetricRow> queue_;
    size_t capacity_;
    bool done_ = false;
    std::thread consumer_;
};

}  // namespace mremq
