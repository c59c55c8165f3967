#include "mremq/partition.hpp"

namespace mremq {

Partition partition_layers(int layers, int modules) {
    if (modules < 1 || modules > layers)
        throw ContractError("partition_layers: need 1 <= N <= L, got N=" +
                            std::to_string(modules) + ", L=" + std::to_string(layers));
    Partition p;
    p.boundaries.push_back(0);
    const int base = layers / modules;
    const int remainder = layers % modules;
    for (int n = 0; n < modules; ++n) {
        const int size = base + (n < remainder ? 1 : 0);
        p.boundaries.push_back(p.boundaries.back() + size);
    }
    return p;
}

ModuleView module_view(const ModelConfig& cfg, const Partition& partition, int n) {
    if (n < 1 || n > partition.modules())
        throw ContractError("module_view: module index " + std::to_string(n) + " out of range [1," +
                            std::to_string(partition.modules()) + "]");
    ModuleView v;
    v.index = n;
    v.layer_begin = partition.layer_begin(n);
    v.layer_end = partition.layer_end(n);
    v.has_embedding = n == 1;
    v.has_head = n == partition.modules();

    if (v.has_embedding) {
        v.param_names.push_back("embed/table");
        v.param_names.push_back("embed/pos");
    }
    for (int l = v.layer_begin; l < v.layer_end; ++l) {
        const std::string p = "layer" + std::to_string(l) + "/";
        for (const char* leafname :
             {"w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "w_1", "b_1", "w_2", "b_2",
              "ln1_g", "ln1_b", "ln2_g", "ln2_b"})
            v.param_names.push_back(p + leafname);
    }
    if (v.has_head) {
        v.param_names.push_back("head/w");
        v.param_names.push_back("head/b");
    }

    for (const Site& s : placement_sites(cfg).quantized) {
        const bool in_module = s.layer < 0 ? v.has_embedding
                                           : (s.layer >= v.layer_begin && s.layer < v.layer_end);
        if (in_module) v.site_ids.push_back(s.id);
    }
    return v;
}

}  // namespace mremq
