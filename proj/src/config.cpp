#include "mremq/config.hpp"

#include "mremq/partition.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace mremq {

TrainConfig RunConfig::train_config() const {
    TrainConfig tc;
    tc.steps = steps;
    tc.rem_steps = rem_steps;
    tc.qat_steps = qat_steps;
    tc.lr = lr;
    tc.batch_size = batch_size;
    tc.bits = bits;
    tc.modules = modules;
    tc.queue_t0 = queue_t0;
    tc.t0_fraction = t0_fraction;
    tc.seed = seed;
    tc.pcq = pcq;
    tc.teacher_forcing = teacher_forcing;
    tc.mode = mode;
    return tc;
}

FpTrainConfig RunConfig::fp_config() const {
    FpTrainConfig fc;
    fc.steps = fp_steps;
    fc.lr = fp_lr;
    fc.batch_size = batch_size;
    fc.seed = seed;
    return fc;
}

namespace {

int parse_int(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': expected integer, got '" + value + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': expected unsigned integer, got '" + value + "'");
    }
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': expected number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw UsageError("config key '" + key + "': expected boolean, got '" + value + "'");
}

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

}  // namespace

QuantBits parse_bits(const std::string& spec) {
    QuantBits b;
    int vals[3];
    std::string rest = spec;
    for (int i = 0; i < 3; ++i) {
        const auto comma = rest.find(',');
        const std::string part = trim(i < 2 ? rest.substr(0, comma) : rest);
        if ((i < 2 && comma == std::string::npos) || part.empty())
            throw UsageError("bits must be 'w,e,a' (e.g. 2,2,8), got '" + spec + "'");
        vals[i] = parse_int("bits", part);
        if (i < 2) rest = rest.substr(comma + 1);
    }
    b.weights = vals[0];
    b.embedding = vals[1];
    b.activations = vals[2];
    b.validate();
    return b;
}

void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "layers") cfg.model.layers = parse_int(key, value);
    else if (key == "d_model") cfg.model.d_model = parse_int(key, value);
    else if (key == "heads") cfg.model.heads = parse_int(key, value);
    else if (key == "d_ff") cfg.model.d_ff = parse_int(key, value);
    else if (key == "vocab") cfg.model.vocab = parse_int(key, value);
    else if (key == "max_seq_len") cfg.model.max_seq_len = parse_int(key, value);
    else if (key == "num_classes") cfg.model.num_classes = parse_int(key, value);
    else if (key == "train_size") cfg.data.train_size = parse_int(key, value);
    else if (key == "heldout_size") cfg.data.heldout_size = parse_int(key, value);
    else if (key == "calib_size") cfg.calib_size = parse_int(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_int(key, value);
    else if (key == "steps") cfg.steps = parse_int(key, value);
    else if (key == "rem_steps") cfg.rem_steps = parse_int(key, value);
    else if (key == "qat_steps") cfg.qat_steps = parse_int(key, value);
    else if (key == "lr") cfg.lr = parse_double(key, value);
    else if (key == "t0_fraction") cfg.t0_fraction = parse_double(key, value);
    else if (key == "queue_t0") cfg.queue_t0 = parse_int(key, value);
    else if (key == "modules") cfg.modules = parse_int(key, value);
    else if (key == "bits") cfg.bits = parse_bits(value);
    else if (key == "bits_w") cfg.bits.weights = parse_int(key, value);
    else if (key == "bits_e") cfg.bits.embedding = parse_int(key, value);
    else if (key == "bits_a") cfg.bits.activations = parse_int(key, value);
    else if (key == "pcq") cfg.pcq = parse_bool(key, value);
    else if (key == "teacher_forcing") cfg.teacher_forcing = parse_bool(key, value);
    else if (key == "mode") {
        if (value == "lockstep") cfg.mode = TrainConfig::Mode::lockstep;
        else if (value == "threads") cfg.mode = TrainConfig::Mode::threads;
        else throw UsageError("config key 'mode': expected lockstep|threads, got '" + value + "'");
    }
    else if (key == "fp_steps") cfg.fp_steps = parse_int(key, value);
    else if (key == "fp_lr") cfg.fp_lr = parse_double(key, value);
    else throw UsageError("unknown config key '" + key + "'");
}

void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        apply_kv(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

std::string echo_config(const RunConfig& cfg) {
    std::map<std::string, std::string> kv;
    auto put_int = [&kv](const char* k, int64_t v) { kv[k] = std::to_string(v); };
    auto put_dbl = [&kv](const char* k, double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.9g", v);
        kv[k] = buf;
    };
    put_int("seed", static_cast<int64_t>(cfg.seed));
    put_int("layers", cfg.model.layers);
    put_int("d_model", cfg.model.d_model);
    put_int("heads", cfg.model.heads);
    put_int("d_ff", cfg.model.d_ff);
    put_int("vocab", cfg.model.vocab);
    put_int("max_seq_len", cfg.model.max_seq_len);
    put_int("num_classes", cfg.model.num_classes);
    put_int("train_size", cfg.data.train_size);
    put_int("heldout_size", cfg.data.heldout_size);
    put_int("calib_size", cfg.calib_size);
    put_int("batch_size", cfg.batch_size);
    put_int("steps", cfg.steps);
    put_int("rem_steps", cfg.rem_steps);
    put_int("qat_steps", cfg.qat_steps);
    put_dbl("lr", cfg.lr);
    put_dbl("t0_fraction", cfg.t0_fraction);
    put_int("queue_t0", cfg.queue_t0);
    put_int("modules", cfg.modules);
    put_int("bits_w", cfg.bits.weights);
    put_int("bits_e", cfg.bits.embedding);
    put_int("bits_a", cfg.bits.activations);
    kv["pcq"] = cfg.pcq ? "true" : "false";
    kv["teacher_forcing"] = cfg.teacher_forcing ? "true" : "false";
    kv["mode"] = cfg.mode == TrainConfig::Mode::lockstep ? "lockstep" : "threads";
    put_int("fp_steps", cfg.fp_steps);
    put_dbl("fp_lr", cfg.fp_lr);
    // the effective module partition, as the explicit boundary list
    if (cfg.modules >= 1 && cfg.modules <= cfg.model.layers) {
        const Partition part = partition_layers(cfg.model.layers, cfg.modules);
        std::string boundaries;
        for (size_t i = 0; i < part.boundaries.size(); ++i)
            boundaries += (i ? "," : "") + std::to_string(part.boundaries[i]);
        kv["partition"] = boundaries;
    }

    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
    return os.str();
}

}  // namespace mremq
