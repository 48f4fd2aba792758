#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "viewalign/alignment.hpp"
#include "viewalign/tensor.hpp"

namespace viewalign {

struct ScoreConfig {
    std::vector<int> levels = {4, 3};    // decoder levels queried, finest first
    std::vector<double> level_weights;   // empty -> uniform 1/|levels|
    double coreset_fraction = 1.0;
    int neighbor_count = 1;              // retained for index validation hooks
    uint64_t coreset_seed = 0;
    double smooth_sigma = 0.0;           // optional Gaussian post-filter (off)

    std::vector<double> resolved_weights() const;
};

// Per-level store of normal feature vectors. Prototypes are held at float32
// precision so the on-disk payload round-trips bit-exactly.
struct MemoryBank {
    struct Level {
        int level_id = 0;
        int64_t dim = 0;
        std::vector<float> prototypes;  // row-major [count, dim]

        int64_t count() const { return dim == 0 ? 0 : static_cast<int64_t>(prototypes.size()) / dim; }
    };
    std::vector<Level> levels;
    std::string checkpoint_hash;  // model the features came from
    int invert_steps = 0;
    int t_extract = 0;
    int radius = 0;
};

// Flat collection of position vectors feeding one bank level.
struct LevelFeatureSet {
    int level_id = 0;
    int64_t dim = 0;
    std::vector<float> vectors;  // row-major [count, dim]

    int64_t count() const { return dim == 0 ? 0 : static_cast<int64_t>(vectors.size()) / dim; }
    // Appends every position vector of every view of one sample's map.
    void add(const FeatureMap& features);
};

// Stores all vectors per level; when coreset_fraction < 1 applies greedy
// farthest-point subsampling seeded by cfg.coreset_seed.
MemoryBank build_bank(const std::vector<LevelFeatureSet>& normal_features,
                      const ScoreConfig& cfg);

// Greedy farthest-point selection; returned indices are in selection order.
// Exposed so the selection can be checked against a brute-force oracle.
std::vector<int64_t> coreset_select(const float* vectors, int64_t count, int64_t dim,
                                    int64_t keep, uint64_t seed);

struct AnomalyScores {
    Tensor pixel_maps;                // [M, H, W] at image resolution
    std::vector<double> view_scores;  // max over each view's map
    double sample_score = 0.0;        // max over views
};

// Weighted multi-level nearest-prototype distance per position. Query maps
// must match the bank's level order and dimensions. Coarser levels are
// bilinearly upsampled onto the finest level grid, the fused map onto the
// image grid given by that level's resolution_scale.
Tensor pixel_score(const std::vector<FeatureMap>& query_features, const MemoryBank& bank,
                   const ScoreConfig& cfg);

double view_score(const Tensor& pixel_map);           // max element, [H,W]
double sample_score(const std::vector<double>& view_scores);

AnomalyScores score_sample(const std::vector<FeatureMap>& query_features,
                           const MemoryBank& bank, const ScoreConfig& cfg);

// Bilinear resize with corner alignment; shared with the evaluation pipeline.
Tensor bilinear_resize(const Tensor& map, int64_t out_h, int64_t out_w);

Tensor gaussian_blur(const Tensor& map, double sigma);

void save_bank(const MemoryBank& bank, const std::string& path);
MemoryBank load_bank(const std::string& path);

}  // namespace viewalign
