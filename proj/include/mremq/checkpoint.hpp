#pragma once

#include <map>
#include <string>

#include "mremq/tensor.hpp"
#include "mremq/transformer.hpp"

namespace mremq {

// Container format (little-endian throughout):
//   magic "MRMQ" | u32 version | u32 tensor count |
//   per tensor: u32 name length | name bytes | u32 rank | u64 dims...
//                | u8 dtype (0 = f32) | raw f32 values
// Tensors are written in sorted name order so identical contents produce
// identical bytes.
inline constexpr uint32_t kCheckpointVersion = 1;

using NamedTensors = std::map<std::string, Tensor>;

void save_tensors(const std::string& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::string& path);

// Model <-> named-tensor mapping. Quantized models additionally carry their
// step sizes under "qspec/<site>" and a few small "meta/..." tensors so a
// checkpoint is self-describing.
NamedTensors model_to_tensors(const Model& model);
Model model_from_tensors(const NamedTensors& tensors);

NamedTensors quantized_to_tensors(const QuantizedModel& qm);
QuantizedModel quantized_from_tensors(const NamedTensors& tensors);

void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

void save_quantized(const std::string& path, const QuantizedModel& qm);
QuantizedModel load_quantized(const std::string& path);

// True when the file holds a quantized model (meta/bits present and nonzero).
bool checkpoint_is_quantized(const NamedTensors& tensors);

}  // namespace mremq
