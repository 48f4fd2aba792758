#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "viewalign/diffusion.hpp"
#include "viewalign/memory_bank.hpp"
#include "viewalign/synthetic.hpp"

namespace viewalign {

// Fully resolved run configuration. Defaults are the end-to-end smoke preset:
// 5 views of 64x64, 40 train / 20 test samples, 10 epochs, sized for a laptop
// CPU. Every run artifact embeds the resolved tree verbatim.
struct RunConfig {
    uint64_t seed = 0;
    SceneConfig scene;
    DatasetCounts counts;
    Topology topology = Topology::kRing;
    std::vector<std::vector<int>> explicit_neighbors;  // only for explicit topology
    ModelConfig model;
    ScheduleKind schedule_kind = ScheduleKind::kLinearBeta;
    int schedule_steps = 1000;
    TrainConfig train;
    InversionConfig invert;
    ScoreConfig score;
    bool eval_export_maps = false;
    bool eval_export_features = false;

    ViewGraph graph() const;
    NoiseSchedule schedule() const { return make_schedule(schedule_steps, schedule_kind); }

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

// Loads a config file (or the defaults when path is empty), then applies
// "key.path=value" overrides and the optional seed override.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides,
                          const std::string& seed_override);

// Applies one dotted-path override onto a JSON tree.
void apply_override(nlohmann::json& tree, const std::string& assignment);

void write_run_config(const RunConfig& cfg, const std::string& out_dir);

}  // namespace viewalign
