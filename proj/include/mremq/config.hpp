#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "mremq/data.hpp"
#include "mremq/trainers.hpp"
#include "mremq/transformer.hpp"

namespace mremq {

// Effective run configuration. Precedence: command-line flag > config file >
// built-in default; both the file parser and the flag handler funnel through
// apply_kv so the three layers cannot drift.
struct RunConfig {
    uint64_t seed = 1;

    ModelConfig model;  // toy defaults: 8 layers, d_model 32, 2 heads, d_ff 64, V 64, len 16
    DataConfig data;

    int calib_size = 4096;
    int batch_size = 32;

    int steps = 2000;
    int rem_steps = 200;
    int qat_steps = 2000;
    double lr = 1e-4;
    double t0_fraction = 0.4;
    int queue_t0 = 4;
    int modules = 4;
    QuantBits bits{4, 4, 8};
    bool pcq = false;
    bool teacher_forcing = true;
    TrainConfig::Mode mode = TrainConfig::Mode::lockstep;

    int fp_steps = 2000;
    double fp_lr = 1e-3;

    TrainConfig train_config() const;
    FpTrainConfig fp_config() const;
};

// Applies one key=value assignment; throws UsageError for unknown keys or
// unparsable values.
void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value);

// Flat "key = value" file with '#' comments.
void load_config_file(RunConfig& cfg, const std::string& path);

// Sorted key=value lines describing the effective configuration.
std::string echo_config(const RunConfig& cfg);

// Parses "w,e,a" (e.g. "2,2,8") into bit-widths.
QuantBits parse_bits(const std::string& spec);

}  // namespace mremq
