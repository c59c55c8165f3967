#include "mremq/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace mremq {

namespace {

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t read_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated checkpoint: " + path);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t read_u64(std::istream& is, const std::string& path) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("truncated checkpoint: " + path);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

static_assert(sizeof(float) == 4, "f32 storage assumes 4-byte float");

}  // namespace

void save_tensors(const std::string& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write("MRMQ", 4);
    write_u32(os, kCheckpointVersion);
    write_u32(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, tensor] : tensors) {  // std::map iterates in sorted order
        write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<uint32_t>(tensor.rank()));
        for (int d : tensor.shape) write_u64(os, static_cast<uint64_t>(d));
        os.put(static_cast<char>(0));  // dtype tag: f32
        os.write(reinterpret_cast<const char*>(tensor.v.data()),
                 static_cast<std::streamsize>(tensor.v.size() * sizeof(float)));
    }
    if (!os) throw IoError("write failure on checkpoint: " + path);
}

NamedTensors load_tensors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MRMQ", 4) != 0)
        throw IoError("bad magic bytes in checkpoint: " + path);
    const uint32_t version = read_u32(is, path);
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    const uint32_t count = read_u32(is, path);
    NamedTensors out;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_u32(is, path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw IoError("truncated checkpoint: " + path);
        const uint32_t rank = read_u32(is, path);
        std::vector<int> shape(rank);
        for (uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<int>(read_u64(is, path));
        int dtype = is.get();
        if (dtype != 0) throw IoError("unsupported dtype tag in checkpoint: " + path);
        Tensor t(shape);
        if (!is.read(reinterpret_cast<char*>(t.v.data()),
                     static_cast<std::streamsize>(t.v.size() * sizeof(float))))
            throw IoError("truncated checkpoint: " + path);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

namespace {

Tensor config_tensor(const ModelConfig& cfg) {
    Tensor t({7});
    t.v = {static_cast<float>(cfg.layers),      static_cast<float>(cfg.d_model),
           static_cast<float>(cfg.heads),       static_cast<float>(cfg.d_ff),
           static_cast<float>(cfg.vocab),       static_cast<float>(cfg.max_seq_len),
           static_cast<float>(cfg.num_classes)};
    return t;
}

ModelConfig config_from_tensor(const Tensor& t) {
    if (t.numel() != 7) throw IoError("malformed meta/config tensor");
    ModelConfig cfg;
    cfg.layers = static_cast<int>(t.v[0]);
    cfg.d_model = static_cast<int>(t.v[1]);
    cfg.heads = static_cast<int>(t.v[2]);
    cfg.d_ff = static_cast<int>(t.v[3]);
    cfg.vocab = static_cast<int>(t.v[4]);
    cfg.max_seq_len = static_cast<int>(t.v[5]);
    cfg.num_classes = static_cast<int>(t.v[6]);
    return cfg;
}

const Tensor& require(const NamedTensors& ts, const std::string& name) {
    auto it = ts.find(name);
    if (it == ts.end()) throw IoError("checkpoint is missing tensor '" + name + "'");
    return it->second;
}

}  // namespace

NamedTensors model_to_tensors(const Model& model) {
    NamedTensors out;
    out.emplace("meta/config", config_tensor(model.cfg));
    for_each_param(model, [&out](const std::string& name, const Tensor& t) { out.emplace(name, t); });
    return out;
}

Model model_from_tensors(const NamedTensors& tensors) {
    Model m = make_model<float>(config_from_tensor(require(tensors, "meta/config")));
    for_each_param(m, [&tensors](const std::string& name, Tensor& t) {
        const Tensor& src = require(tensors, name);
        if (src.shape != t.shape)
            throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape) +
                          ", expected " + shape_str(t.shape));
        t = src;
    });
    return m;
}

NamedTensors quantized_to_tensors(const QuantizedModel& qm) {
    NamedTensors out = model_to_tensors(qm.latent);
    Tensor bits({3});
    bits.v = {static_cast<float>(qm.bits.weights), static_cast<float>(qm.bits.embedding),
              static_cast<float>(qm.bits.activations)};
    out.emplace("meta/bits", bits);
    out.emplace("meta/pcq", Tensor({1}, qm.per_channel ? 1.0f : 0.0f));
    for (const auto& [site, spec] : qm.specs)
        if (spec.enabled() && spec.mode != QuantMode::ternary) out.emplace("qspec/" + site, spec.step);
    return out;
}

QuantizedModel quantized_from_tensors(const NamedTensors& tensors) {
    QuantizedModel qm;
    qm.latent = model_from_tensors(tensors);
    const Tensor& bits = require(tensors, "meta/bits");
    if (bits.numel() != 3) throw IoError("malformed meta/bits tensor");
    qm.bits.weights = static_cast<int>(bits.v[0]);
    qm.bits.embedding = static_cast<int>(bits.v[1]);
    qm.bits.activations = static_cast<int>(bits.v[2]);
    qm.per_channel = require(tensors, "meta/pcq").v[0] != 0.0f;

    // Rebuild specs structurally, then overwrite steps with the stored ones.
    for (const Site& site : placement_sites(qm.latent.cfg).quantized) {
        const int b = site.kind == SiteKind::weight
                          ? (site.id == "embed/table" ? qm.bits.embedding : qm.bits.weights)
                          : qm.bits.activations;
        if (b == 0) continue;
        QuantSpec spec;
        spec.bits = b;
        if (site.kind == SiteKind::weight) {
            if (b == 2) {
                spec.mode = QuantMode::ternary;
                spec.learnable = false;
                spec.granularity =
                    qm.per_channel ? Granularity::per_channel : Granularity::per_tensor;
            } else {
                spec.mode = QuantMode::symmetric;
                spec.granularity =
                    qm.per_channel ? Granularity::per_channel : Granularity::per_tensor;
                spec.step = require(tensors, "qspec/" + site.id);
            }
        } else {
            spec.mode = site.kind == SiteKind::activation_asymmetric ? QuantMode::asymmetric
                                                                     : QuantMode::symmetric;
            spec.step = require(tensors, "qspec/" + site.id);
        }
        qm.specs.emplace(site.id, std::move(spec));
    }
    return qm;
}

bool checkpoint_is_quantized(const NamedTensors& tensors) {
    auto it = tensors.find("meta/bits");
    if (it == tensors.end()) return false;
    for (float b : it->second.v)
        if (b != 0.0f) return true;
    return false;
}

void save_model(const std::string& path, const Model& model) {
    save_tensors(path, model_to_tensors(model));
}

Model load_model(const std::string& path) { return model_from_tensors(load_tensors(path)); }

void save_quantized(const std::string& path, const QuantizedModel& qm) {
    save_tensors(path, quantized_to_tensors(qm));
}

QuantizedModel load_quantized(const std::string& path) {
    return quantized_from_tensors(load_tensors(path));
}

}  // namespace mremq
