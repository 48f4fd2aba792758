#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "viewalign/checkpoint.hpp"
#include "viewalign/data.hpp"
#include "viewalign/diffusion.hpp"
#include "viewalign/memory_bank.hpp"
#include "viewalign/synthetic.hpp"

namespace viewalign {

// Mann-Whitney AUROC with midrank tie handling: the probability that a random
// positive outranks a random negative, ties counting one half.
double auroc(const std::vector<double>& scores, const std::vector<uint8_t>& labels);

// Scores and labels pooled across the whole test split, one entry per pixel /
// view / sample.
struct PooledScores {
    std::vector<double> pixel_scores;
    std::vector<uint8_t> pixel_labels;
    std::vector<double> view_scores;
    std::vector<uint8_t> view_labels;
    std::vector<double> sample_scores;
    std::vector<uint8_t> sample_labels;
};

// Appends one scored sample. The pixel maps must already live on the image
// grid so mask labels pair up one to one.
void pool_sample(PooledScores& pools, const AnomalyScores& scores,
                 const MultiViewSample& sample);

struct EvalReport {
    double p_auroc = 0.0, v_auroc = 0.0, s_auroc = 0.0;
    bool p_valid = false, v_valid = false, s_valid = false;
    int64_t pixel_count = 0;
    int view_count = 0;
    int sample_count = 0;
    std::vector<std::pair<std::string, std::string>> config_echo;
    std::vector<std::string> warnings;

    std::string to_text() const;
    std::string to_csv() const;
};

// Metrics over pooled scores; a single-class level downgrades that metric to
// n/a with a warning instead of failing the run.
EvalReport report_from_pools(const PooledScores& pools);

struct EvalOptions {
    int workers = 1;
    bool export_maps = false;
    bool export_features = false;
    int export_limit = 4;
    std::string out_dir;  // required when exporting
};

// Full pipeline over the dataset's test split: DDIM inversion, feature
// extraction, memory scoring, three-level AUROC.
EvalReport evaluate(const Dataset& dataset, const Denoiser& model,
                    const NoiseSchedule& schedule, const MemoryBank& bank,
                    const ScoreConfig& score_cfg, const InversionConfig& inv_cfg,
                    const EvalOptions& opts = {});

// Raw map as a portable float map plus an 8-bit heatmap overlay; the raw file
// round-trips losslessly.
void export_anomaly_map(const Tensor& map, const Tensor& image, const std::string& out_prefix);

// Flat per-position feature dump: sample, view, level, y, x, vector...
void export_features_csv(
    const std::string& path,
    const std::vector<std::pair<std::string, std::vector<FeatureMap>>>& samples,
    const std::vector<int>& level_ids);

}  // namespace viewalign
