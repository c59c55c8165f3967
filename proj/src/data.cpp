#include "mremq/data.hpp"

#include "mremq/checkpoint.hpp"
#include "mremq/rng.hpp"

namespace mremq {

namespace {

TokenSplit gen_split(int num, int len, int vocab, Rng& rng) {
    TokenSplit s;
    s.num = num;
    s.len = len;
    s.tokens.resize(static_cast<size_t>(num) * len);
    s.labels.resize(num);
    const int half_vocab = vocab / 2;
    for (int i = 0; i < num; ++i) {
        int low_count = 0;
        for (int j = 0; j < len; ++j) {
            const int tok = rng.next_int(0, vocab);
            s.tokens[static_cast<size_t>(i) * len + j] = tok;
            if (tok < half_vocab) ++low_count;
        }
        s.labels[i] = low_count > len / 2 ? 1 : 0;
    }
    return s;
}

}  // namespace

Dataset gen_synthetic_task(const ModelConfig& cfg, const DataConfig& data_cfg, uint64_t seed) {
    Dataset ds;
    ds.vocab = cfg.vocab;
    ds.num_classes = cfg.num_classes;
    Rng train_rng(derive_seed(seed, "data-train"));
    Rng held_rng(derive_seed(seed, "data-heldout"));
    ds.train = gen_split(data_cfg.train_size, cfg.max_seq_len, cfg.vocab, train_rng);
    ds.held_out = gen_split(data_cfg.heldout_size, cfg.max_seq_len, cfg.vocab, held_rng);
    return ds;
}

CalibrationSet sample_calibration(const Dataset& dataset, int size, uint64_t seed) {
    if (size < 1 || size > dataset.train.num)
        throw ContractError("sample_calibration: size " + std::to_string(size) +
                            " exceeds train split of " + std::to_string(dataset.train.num));
    Rng rng(derive_seed(seed, "calibration"));
    // partial Fisher-Yates: the first `size` entries are a uniform sample
    // without replacement
    std::vector<int> idx(dataset.train.num);
    for (int i = 0; i < dataset.train.num; ++i) idx[i] = i;
    for (int i = 0; i < size; ++i) {
        const int j = i + rng.next_int(0, dataset.train.num - i);
        std::swap(idx[i], idx[j]);
    }
    CalibrationSet cs;
    cs.size = size;
    cs.len = dataset.train.len;
    cs.tokens.resize(static_cast<size_t>(size) * cs.len);
    for (int i = 0; i < size; ++i) {
        const int32_t* src = dataset.train.tokens.data() + static_cast<size_t>(idx[i]) * cs.len;
        std::copy(src, src + cs.len, cs.tokens.data() + static_cast<size_t>(i) * cs.len);
    }
    return cs;
}

TokenBatch draw_batch(const CalibrationSet& calib, int batch_size, Rng& rng) {
    TokenBatch b;
    b.batch = batch_size;
    b.len = calib.len;
    b.tokens.resize(static_cast<size_t>(batch_size) * calib.len);
    for (int i = 0; i < batch_size; ++i) {
        const int row = rng.next_int(0, calib.size);
        const int32_t* src = calib.tokens.data() + static_cast<size_t>(row) * calib.len;
        std::copy(src, src + calib.len, b.tokens.data() + static_cast<size_t>(i) * calib.len);
    }
    return b;
}

TokenBatch draw_batch(const TokenSplit& split, int batch_size, Rng& rng,
                      std::vector<int32_t>* labels_out) {
    TokenBatch b;
    b.batch = batch_size;
    b.len = split.len;
    b.tokens.resize(static_cast<size_t>(batch_size) * split.len);
    if (labels_out) labels_out->resize(batch_size);
    for (int i = 0; i < batch_size; ++i) {
        const int row = rng.next_int(0, split.num);
        const int32_t* src = split.tokens.data() + static_cast<size_t>(row) * split.len;
        std::copy(src, src + split.len, b.tokens.data() + static_cast<size_t>(i) * split.len);
        if (labels_out) (*labels_out)[i] = split.labels[row];
    }
    return b;
}

namespace {

Tensor to_f32(const std::vector<int32_t>& v, std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<float>(v[i]);
    return t;
}

std::vector<int32_t> to_i32(const Tensor& t) {
    std::vector<int32_t> v(t.v.size());
    for (size_t i = 0; i < t.v.size(); ++i) v[i] = static_cast<int32_t>(t.v[i]);
    return v;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
    NamedTensors out;
    Tensor meta({4});
    meta.v = {static_cast<float>(ds.vocab), static_cast<float>(ds.num_classes),
              static_cast<float>(ds.train.len), static_cast<float>(ds.held_out.len)};
    out.emplace("data/meta", meta);
    out.emplace("data/train_tokens", to_f32(ds.train.tokens, {ds.train.num, ds.train.len}));
    out.emplace("data/train_labels", to_f32(ds.train.labels, {ds.train.num}));
    out.emplace("data/heldout_tokens",
                to_f32(ds.held_out.tokens, {ds.held_out.num, ds.held_out.len}));
    out.emplace("data/heldout_labels", to_f32(ds.held_out.labels, {ds.held_out.num}));
    save_tensors(path, out);
}

Dataset load_dataset(const std::string& path) {
    const NamedTensors ts = load_tensors(path);
    auto need = [&](const char* name) -> const Tensor& {
        auto it = ts.find(name);
        if (it == ts.end()) throw IoError("dataset file is missing tensor '" + std::string(name) + "'");
        return it->second;
    };
    Dataset ds;
    const Tensor& meta = need("data/meta");
    if (meta.numel() != 4) throw IoError("malformed data/meta tensor");
    ds.vocab = static_cast<int>(meta.v[0]);
    ds.num_classes = static_cast<int>(meta.v[1]);
    const Tensor& tt = need("data/train_tokens");
    ds.train.num = tt.dim(0);
    ds.train.len = tt.dim(1);
    ds.train.tokens = to_i32(tt);
    ds.train.labels = to_i32(need("data/train_labels"));
    const Tensor& ht = need("data/heldout_tokens");
    ds.held_out.num = ht.dim(0);
    ds.held_out.len = ht.dim(1);
    ds.held_out.tokens = to_i32(ht);
    ds.held_out.labels = to_i32(need("data/heldout_labels"));
    return ds;
}

}  // namespace mremq
