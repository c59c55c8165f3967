#pragma once

#include <string>
#include <vector>

#include "mremq/error.hpp"
#include "mremq/transformer.hpp"

namespace mremq {

// Contiguous module boundaries l_1 .. l_{N+1}; module n owns layers
// [boundaries[n-1], boundaries[n]).
struct Partition {
    std::vector<int> boundaries;

    int modules() const { return static_cast<int>(boundaries.size()) - 1; }
    int layer_begin(int n) const { return boundaries[n - 1]; }  // n is 1-based
    int layer_end(int n) const { return boundaries[n]; }
};

// Balanced split, larger modules first: sizes differ by at most one.
Partition partition_layers(int layers, int modules);

// Static view of one module: its layer range, whether the embedding/head
// attach, and the exact parameter and quantization-site names it owns.
struct ModuleView {
    int index = 0;  // 1-based
    int layer_begin = 0;
    int layer_end = 0;
    bool has_embedding = false;
    bool has_head = false;
    std::vector<std::string> param_names;  // trainable latent parameters
    std::vector<std::string> site_ids;     // quantization sites (steps live here)
};

ModuleView module_view(const ModelConfig& cfg, const Partition& partition, int n);

}  // namespace mremq
