#pragma once

#include <vector>

#include "viewalign/autodiff.hpp"
#include "viewalign/geometry.hpp"
#include "viewalign/rng.hpp"
#include "viewalign/tensor.hpp"

namespace viewalign {

// Dense multi-view feature stack plus its grid scale relative to the input
// image pixel grid.
struct FeatureMap {
    Tensor data;                    // [views, channels, rows, cols]
    double resolution_scale = 1.0;  // in (0, 1]

    int views() const { return static_cast<int>(data.dim(0)); }
    int channels() const { return static_cast<int>(data.dim(1)); }
    int height() const { return static_cast<int>(data.dim(2)); }
    int width() const { return static_cast<int>(data.dim(3)); }
};

// Learnable maps of the cross-view patch attention. The query/key/value maps
// take C-dim patch features to the attention space; the output map projects
// aggregated values back to C so they can be added residually.
struct AttentionParams {
    Tensor w_query;  // [d, C]
    Tensor w_key;    // [d, C]
    Tensor w_value;  // [d, C]
    Tensor w_out;    // [C, d], zero-initialized: the module starts as identity
    int attention_dim = 0;
    PosEncodingConfig pe;

    int channels() const { return static_cast<int>(w_query.dim(1)); }

    static AttentionParams init(int channels, int attention_dim, Rng& rng);
};

struct AlignConfig {
    int radius = 3;            // search window side length
    bool include_self = true;  // query view's own patch joins the candidate set
};

// ---- patch-level operations ----

// q = Wq.f_query, k = Wk.(f_cand + pe(delta)), v = Wv.(f_cand + pe(delta)).
void project_qkv(const std::vector<double>& query_feat, const std::vector<double>& cand_feat,
                 Vec2 delta, const AttentionParams& params, std::vector<double>& q,
                 std::vector<double>& k, std::vector<double>& v);

// Softmax over scaled dot products q.k_j / sqrt(d), max-subtracted.
std::vector<double> attention_weights(const std::vector<double>& q,
                                      const std::vector<std::vector<double>>& keys);

// Convex combination of values under attention_weights.
std::vector<double> align_patch(
    const std::vector<double>& q,
    const std::vector<std::pair<std::vector<double>, std::vector<double>>>& candidates);

// ---- map-level machinery ----

// Precomputed candidate gathering for one feature grid: per query view, the
// per-position candidate segments, their row indices into the stacked
// all-view patch matrix [M*H*W, C], and the displacement encodings. The plan
// depends only on geometry, so it is shared across samples and tape passes.
struct AlignPlan {
    struct PerView {
        std::vector<int64_t> seg;        // H*W + 1 offsets
        std::vector<int64_t> cand_rows;  // candidate row per slot
        Tensor encodings;                // [n_candidates, C]
    };
    int views = 0, channels = 0, height = 0, width = 0;
    std::vector<PerView> per_view;
};

// feature_homs must already live on this grid scale (see
// Homography rescaling in geometry).
AlignPlan build_align_plan(const ViewGraph& graph, const HomographySet& feature_homs, int height,
                           int width, const PosEncodingConfig& pe, const AlignConfig& cfg);

// Tape-level forward over per-view [C,H,W] vars; returns the residually
// aligned per-view features. Positions whose candidate set is empty pass
// through unchanged.
std::vector<Var> cross_view_align(Tape& tape, const std::vector<Var>& view_feats,
                                  const AlignPlan& plan, Var w_query, Var w_key, Var w_value,
                                  Var w_out);

// Whole-map contract: rescales image-resolution homographies to the map's
// grid, aligns every view, and returns a map of identical shape.
FeatureMap align_feature_map(const FeatureMap& x, const ViewGraph& graph,
                             const HomographySet& image_homs, const AttentionParams& params,
                             const AlignConfig& cfg);

}  // namespace viewalign
