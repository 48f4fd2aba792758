#pragma once

#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "viewalign/data.hpp"
#include "viewalign/geometry.hpp"
#include "viewalign/rng.hpp"

namespace viewalign {

struct TextureConfig {
    int octaves = 2;
    uint64_t palette_seed = 7;
    double base_cell = 28.0;        // lattice cell of the coarsest octave, px
    double amp_decay = 0.25;        // amplitude falloff per octave
    double noise_amp = 0.02;        // per-sample canonical noise overlay
    double brightness_jitter = 0.03;
};

struct CameraConfig {
    double rotation_deg = 8.0;   // per-view in-plane rotation range
    double translation = 3.0;    // per-view shift range, px
    double scale_jitter = 0.04;  // relative zoom range
    double tilt = 0.001;         // projective row perturbation range
};

enum class DefectType { kScratch, kBlob, kMissingRegion };

DefectType defect_type_from_string(const std::string& s);
std::string defect_type_to_string(DefectType t);

struct DefectConfig {
    std::vector<DefectType> types = {DefectType::kScratch, DefectType::kBlob,
                                     DefectType::kMissingRegion};
    double size_min = 4.0;       // canonical-plane radius, px
    double size_max = 9.0;
    double contrast_min = 0.03;  // includes sub-10/255 "subtle" defects
    double contrast_max = 0.40;
};

struct SceneConfig {
    int num_views = 5;
    int image_size = 64;
    TextureConfig texture;
    CameraConfig camera;
    DefectConfig defect;
    uint64_t rng_seed = 0;

    void validate() const;
};

nlohmann::json scene_to_json(const SceneConfig& cfg);
SceneConfig scene_from_json(const nlohmann::json& j, const std::string& path);

// The fixed camera rig of one dataset: each view's map from the canonical
// texture plane to its pixel plane. Views are exact homography warps of one
// plane, so every pairwise H_ij = H_j . H_i^-1 is exact by construction and a
// single calibration file describes all samples.
struct CameraRig {
    std::vector<Homography> view_from_canonical;

    HomographySet pairwise() const;  // all ordered pairs i != j
};

CameraRig sample_rig(const SceneConfig& cfg);

// One procedural multi-view sample, deterministic in (cfg.rng_seed, index).
MultiViewSample generate_scene(const SceneConfig& cfg, const CameraRig& rig, int64_t index);

// Re-renders the same sample with a defect drawn on the canonical plane, so
// it lands consistently in every view that sees it. A zero-size defect range
// leaves the sample untouched.
MultiViewSample inject_defect(const MultiViewSample& sample, const SceneConfig& cfg,
                              const CameraRig& rig, int64_t index);

struct DatasetCounts {
    int train_normal = 40;
    int test_normal = 10;
    int test_defective = 10;
};

struct DatasetSpec {
    SceneConfig scene;
    Topology topology = Topology::kRing;
    DatasetCounts counts;
};

void generate_dataset(const DatasetSpec& spec, const std::string& out_path);

// On-disk dataset handle; samples load lazily and are validated on load.
class Dataset {
public:
    struct Entry {
        std::string id;
        bool defective = false;
        bool train_split = false;
    };

    static Dataset open(const std::string& root);

    const SceneConfig& scene() const { return scene_; }
    Topology topology() const { return topology_; }
    const ViewGraph& graph() const { return graph_; }
    const HomographySet& calibration() const { return calibration_; }
    uint64_t seed() const { return scene_.rng_seed; }

    const std::vector<Entry>& train_entries() const { return train_; }
    const std::vector<Entry>& test_entries() const { return test_; }

    MultiViewSample load(const Entry& entry) const;
    std::string sample_dir(const Entry& entry) const;

    // Loads the sample stored at an explicit directory (detect command).
    MultiViewSample load_dir(const std::string& dir, bool expect_defective) const;

private:
    std::string root_;
    SceneConfig scene_;
    Topology topology_ = Topology::kRing;
    ViewGraph graph_;
    HomographySet calibration_;
    std::vector<Entry> train_, test_;
};

Dataset load_dataset(const std::string& root);

}  // namespace viewalign
