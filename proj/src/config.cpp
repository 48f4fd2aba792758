#include "viewalign/config.hpp"

#include <filesystem>
#include <fstream>

#include "viewalign/json_util.hpp"

namespace fs = std::filesystem;

namespace viewalign {

using nlohmann::json;

ViewGraph RunConfig::graph() const {
    if (topology == Topology::kExplicit)
        return build_view_graph(scene.num_views, topology, explicit_neighbors);
    return build_view_graph(scene.num_views, topology);
}

json RunConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["scene"] = scene_to_json(scene);
    j["counts"] = {{"train_normal", counts.train_normal},
                   {"test_normal", counts.test_normal},
                   {"test_defective", counts.test_defective}};
    json graph_j;
    graph_j["topology"] = topology_to_string(topology);
    if (topology == Topology::kExplicit) graph_j["neighbors"] = explicit_neighbors;
    j["graph"] = graph_j;
    j["model"] = {{"base_width", model.base_width},
                  {"encoder_levels", model.encoder_levels},
                  {"decoder_levels", model.decoder_levels},
                  {"latent_factor", model.latent_factor},
                  {"temb_dim", model.temb_dim},
                  {"norm_groups", model.norm_groups},
                  {"attention_dim", model.attention_dim},
                  {"se_ratio", model.se_ratio},
                  {"radius", model.radius},
                  {"include_self", model.include_self},
                  {"align_enabled", model.align_enabled},
                  {"refine_enabled", model.refine_enabled}};
    j["schedule"] = {{"kind", schedule_kind_to_string(schedule_kind)},
                     {"timesteps", schedule_steps}};
    j["train"] = {{"epochs", train.epochs},
                  {"batch_size", train.batch_size},
                  {"learning_rate", train.learning_rate},
                  {"weight_decay", train.weight_decay},
                  {"lambda", train.lambda}};
    j["invert"] = {{"steps", invert.steps}, {"t_extract", invert.t_extract}};
    j["score"] = {{"levels", score.levels},
                  {"level_weights", score.level_weights},
                  {"coreset_fraction", score.coreset_fraction},
                  {"neighbor_count", score.neighbor_count},
                  {"coreset_seed", score.coreset_seed},
                  {"smooth_sigma", score.smooth_sigma}};
    j["eval"] = {{"export_maps", eval_export_maps}, {"export_features", eval_export_features}};
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig cfg;
    JsonReader r(j, "config");
    r.read("seed", cfg.seed);
    if (r.has("scene")) cfg.scene = scene_from_json(r.child("scene"), "config.scene");
    if (r.has("counts")) {
        JsonReader c(r.child("counts"), "config.counts");
        c.read("train_normal", cfg.counts.train_normal);
        c.read("test_normal", cfg.counts.test_normal);
        c.read("test_defective", cfg.counts.test_defective);
        c.finish();
    }
    if (r.has("graph")) {
        JsonReader g(r.child("graph"), "config.graph");
        std::string topo = topology_to_string(cfg.topology);
        g.read("topology", topo);
        cfg.topology = topology_from_string(topo);
        g.read("neighbors", cfg.explicit_neighbors);
        g.finish();
    }
    if (r.has("model")) {
        JsonReader m(r.child("model"), "config.model");
        m.read("base_width", cfg.model.base_width);
        m.read("encoder_levels", cfg.model.encoder_levels);
        m.read("decoder_levels", cfg.model.decoder_levels);
        m.read("latent_factor", cfg.model.latent_factor);
        m.read("temb_dim", cfg.model.temb_dim);
        m.read("norm_groups", cfg.model.norm_groups);
        m.read("attention_dim", cfg.model.attention_dim);
        m.read("se_ratio", cfg.model.se_ratio);
        m.read("radius", cfg.model.radius);
        m.read("include_self", cfg.model.include_self);
        m.read("align_enabled", cfg.model.align_enabled);
        m.read("refine_enabled", cfg.model.refine_enabled);
        m.finish();
    }
    if (r.has("schedule")) {
        JsonReader s(r.child("schedule"), "config.schedule");
        std::string kind = schedule_kind_to_string(cfg.schedule_kind);
        s.read("kind", kind);
        cfg.schedule_kind = schedule_kind_from_string(kind);
        s.read("timesteps", cfg.schedule_steps);
        s.finish();
    }
    if (r.has("train")) {
        JsonReader t(r.child("train"), "config.train");
        t.read("epochs", cfg.train.epochs);
        t.read("batch_size", cfg.train.batch_size);
        t.read("learning_rate", cfg.train.learning_rate);
        t.read("weight_decay", cfg.train.weight_decay);
        t.read("lambda", cfg.train.lambda);
        t.finish();
    }
    if (r.has("invert")) {
        JsonReader i(r.child("invert"), "config.invert");
        i.read("steps", cfg.invert.steps);
        i.read("t_extract", cfg.invert.t_extract);
        i.finish();
    }
    if (r.has("score")) {
        JsonReader s(r.child("score"), "config.score");
        s.read("levels", cfg.score.levels);
        s.read("level_weights", cfg.score.level_weights);
        s.read("coreset_fraction", cfg.score.coreset_fraction);
        s.read("neighbor_count", cfg.score.neighbor_count);
        s.read("coreset_seed", cfg.score.coreset_seed);
        s.read("smooth_sigma", cfg.score.smooth_sigma);
        s.finish();
    }
    if (r.has("eval")) {
        JsonReader e(r.child("eval"), "config.eval");
        e.read("export_maps", cfg.eval_export_maps);
        e.read("export_features", cfg.eval_export_features);
        e.finish();
    }
    r.finish();

    cfg.model.validate();
    cfg.scene.validate();
    // The sampler seed mirrors the top-level seed unless the scene pins one.
    return cfg;
}

void apply_override(json& tree, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigParseError("override must look like key.path=value: " + assignment);
    const std::string keypath = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);

    json* node = &tree;
    size_t start = 0;
    while (true) {
        const size_t dot = keypath.find('.', start);
        const std::string key = keypath.substr(start, dot - start);
        if (key.empty()) throw ConfigParseError("bad override key: " + keypath);
        if (dot == std::string::npos) {
            json parsed;
            try {
                parsed = json::parse(value);
            } catch (const json::parse_error&) {
                parsed = value;  // bare strings are allowed unquoted
            }
            (*node)[key] = parsed;
            return;
        }
        node = &((*node)[key]);
        start = dot + 1;
    }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides,
                          const std::string& seed_override) {
    json tree;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw MissingInput("cannot open config file: " + path);
        std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
        tree = parse_json_text(text, path);
    } else {
        tree = RunConfig().to_json();
    }
    for (const auto& o : overrides) apply_override(tree, o);
    if (!seed_override.empty()) tree["seed"] = std::stoull(seed_override);

    RunConfig cfg = RunConfig::from_json(tree);
    // One seed drives the whole pipeline; generation and training derive
    // their streams from it.
    cfg.scene.rng_seed = cfg.seed;
    cfg.train.rng_seed = cfg.seed;
    return cfg;
}

void write_run_config(const RunConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "config.json");
    if (!out) throw IoFailure("cannot write config echo in " + out_dir);
    out << cfg.to_json().dump(2) << "\n";
}

}  // namespace viewalign
