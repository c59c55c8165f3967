#include <doctest.h>

#include <set>

#include "mremq/partition.hpp"

using namespace mremq;

TEST_CASE("partition_layers balanced splits") {
    CHECK(partition_layers(12, 4).boundaries == std::vector<int>{0, 3, 6, 9, 12});
    CHECK(partition_layers(8, 1).boundaries == std::vector<int>{0, 8});
    CHECK(partition_layers(8, 3).boundaries == std::vector<int>{0, 3, 6, 8});
    CHECK(partition_layers(8, 4).boundaries == std::vector<int>{0, 2, 4, 6, 8});
    CHECK_THROWS_AS(partition_layers(4, 5), ContractError);
    CHECK_THROWS_AS(partition_layers(4, 0), ContractError);
}

TEST_CASE("partition_layers deterministic and total over the precondition domain") {
    for (int layers = 1; layers <= 12; ++layers)
        for (int modules = 1; modules <= layers; ++modules) {
            const Partition a = partition_layers(layers, modules);
            const Partition b = partition_layers(layers, modules);
            CHECK(a.boundaries == b.boundaries);
            CHECK(a.modules() == modules);
            CHECK(a.boundaries.front() == 0);
            CHECK(a.boundaries.back() == layers);
            int max_size = 0, min_size = layers;
            for (int n = 1; n <= modules; ++n) {
                const int size = a.layer_end(n) - a.layer_begin(n);
                CHECK(size >= 1);
                max_size = std::max(max_size, size);
                min_size = std::min(min_size, size);
                if (n > 1) CHECK(size <= a.layer_end(n - 1) - a.layer_begin(n - 1));  // larger first
            }
            CHECK(max_size - min_size <= 1);
        }
}

TEST_CASE("module views partition the parameter names exactly") {
    ModelConfig cfg;
    cfg.layers = 8;
    const Partition part = partition_layers(cfg.layers, 4);

    // embedding only in module 1, head only in module N
    const ModuleView first = module_view(cfg, part, 1);
    const ModuleView last = module_view(cfg, part, 4);
    CHECK(first.has_embedding);
    CHECK(!first.has_head);
    CHECK(last.has_head);
    CHECK(!last.has_embedding);

    std::set<std::string> seen;
    size_t total = 0;
    for (int n = 1; n <= 4; ++n) {
        const ModuleView v = module_view(cfg, part, n);
        for (const auto& name : v.param_names) {
            CHECK(seen.insert(name).second);  // pairwise disjoint
            ++total;
        }
    }
    Model m = make_model<float>(cfg);
    std::set<std::string> all;
    for_each_param(m, [&all](const std::string& name, Tensor&) { all.insert(name); });
    CHECK(seen == all);
    CHECK(total == all.size());

    CHECK_THROWS_AS(module_view(cfg, part, 0), ContractError);
    CHECK_THROWS_AS(module_view(cfg, part, 5), ContractError);
}

TEST_CASE("module views carry their quantization sites") {
    ModelConfig cfg;
    cfg.layers = 4;
    const Partition part = partition_layers(cfg.layers, 2);
    const ModuleView v1 = module_view(cfg, part, 1);
    const ModuleView v2 = module_view(cfg, part, 2);
    // embedding site in module 1 only
    CHECK(std::count(v1.site_ids.begin(), v1.site_ids.end(), "embed/table") == 1);
    CHECK(std::count(v2.site_ids.begin(), v2.site_ids.end(), "embed/table") == 0);
    // all layer sites covered once
    std::set<std::string> sites(v1.site_ids.begin(), v1.site_ids.end());
    for (const auto& s : v2.site_ids) CHECK(sites.insert(s).second);
    CHECK(sites.size() == placement_sites(cfg).quantized.size());
}
