#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mremq/objectives.hpp"
#include "mremq/tensor.hpp"
#include "mremq/transformer.hpp"

namespace mremq {

struct TokenSplit {
    std::vector<int32_t> tokens;  // num * len, row-major
    std::vector<int32_t> labels;  // num
    int num = 0;
    int len = 0;
};

struct Dataset {
    TokenSplit train;
    TokenSplit held_out;
    int vocab = 0;
    int num_classes = 0;
};

struct DataConfig {
    int train_size = 8192;
    int heldout_size = 2048;
};

// Majority task: uniform random tokens in [0, V); label 1 iff more than half
// of the positions hold a token below V/2.
Dataset gen_synthetic_task(const ModelConfig& cfg, const DataConfig& data_cfg, uint64_t seed);

// Label-free view for the PTQ trainers.
struct CalibrationSet {
    std::vector<int32_t> tokens;  // size * len
    int size = 0;
    int len = 0;
};

// Uniform sample without replacement from the train split; labels stripped.
CalibrationSet sample_calibration(const Dataset& dataset, int size, uint64_t seed);

// Batch of rows (with replacement) drawn from a calibration set.
TokenBatch draw_batch(const CalibrationSet& calib, int batch_size, Rng& rng);
TokenBatch draw_batch(const TokenSplit& split, int batch_size, Rng& rng,
                      std::vector<int32_t>* labels_out = nullptr);

// Dataset container I/O (same MRMQ tensor format as checkpoints).
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

}  // namespace mremq
