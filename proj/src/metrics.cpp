#include "mremq/metrics.hpp"

#include <cstdio>

#include "mremq/error.hpp"

namespace mremq {

const char* CsvMetricsWriter::header() { return "tick,step,module,loss,lambda,lr,wall_ms"; }

std::string CsvMetricsWriter::format_row(const MetricRow& r) {
    char buf[192];
    std::snprintf(buf, sizeof(buf), "%lld,%d,%d,%.9g,%.6g,%.9g,%.3f",
                  static_cast<long long>(r.tick), r.step, r.module, r.loss, r.lambda, r.lr,
                  r.wall_ms);
    return buf;
}

CsvMetricsWriter::CsvMetricsWriter(const std::string& path, size_t queue_capacity)
    : out_(path, std::ios::trunc), capacity_(queue_capacity) {
    if (!out_) throw IoError("cannot open metrics file for writing: " + path);
    out_ << header() << "\n";
    consumer_ = std::thread([this] { run(); });
}

CsvMetricsWriter::~CsvMetricsWriter() { close(); }

void CsvMetricsWriter::push(const MetricRow& row) {
    std::unique_lock<std::mutex> lock(mu_);
    not_full_.wait(lock, [this] { return queue_.size() < capacity_ || done_; });
    if (done_) throw IoError("metrics writer already closed");
    queue_.push_back(row);
    not_empty_.notify_one();
}

void CsvMetricsWriter::close() {
    {
        std::lock_guard<std::mutex> lock(mu_);
        if (done_) return;
        done_ = true;
    }
    not_empty_.notify_all();
    not_full_.notify_all();
    if (consumer_.joinable()) consumer_.join();
    out_.flush();
    if (!out_) throw IoError("write failure on metrics file");
}

void CsvMetricsWriter::run() {
    for (;;) {
        std::vector<MetricRow> batch;
        {
            std::unique_lock<std::mutex> lock(mu_);
            not_empty_.wait(lock, [this] { return !queue_.empty() || done_; });
            while (!queue_.empty()) {
                batch.push_back(queue_.front());
                queue_.pop_front();
            }
            if (batch.empty() && done_) return;
            not_full_.notify_all();
        }
        for (const MetricRow& r : batch) out_ << format_row(r) << "\n";
        out_.flush();
    }
}

}  // namespace mremq
