#pragma once

#include <vector>

#include "viewalign/alignment.hpp"
#include "viewalign/autodiff.hpp"
#include "viewalign/geometry.hpp"
#include "viewalign/rng.hpp"
#include "viewalign/tensor.hpp"

namespace viewalign {

// Per-view feature refiner: a small channel-preserving convolutional branch
// gated by a squeeze-and-excitation block, added residually. The final
// convolution starts at zero, so a fresh refiner is exactly the identity.
struct RefinerParams {
    Tensor conv1_w, conv1_b;        // [C,C,3,3], [C]
    Tensor conv2_w, conv2_b;        // zero-initialized
    Tensor gate_fc1_w, gate_fc1_b;  // [C/r, C], [C/r]
    Tensor gate_fc2_w, gate_fc2_b;  // [C, C/r], [C]
    int bottleneck_ratio = 4;

    int channels() const { return static_cast<int>(conv1_w.dim(0)); }

    static RefinerParams init(int channels, int bottleneck_ratio, Rng& rng);
};

// Tape-level forward shared by the value wrapper and the denoiser decoder.
Var refiner_forward(Tape& tape, Var x, Var c1w, Var c1b, Var c2w, Var c2b, Var g1w, Var g1b,
                    Var g2w, Var g2b);

// Value-level refinement of one view's [C,H,W] features.
Tensor refine(const Tensor& features, const RefinerParams& params);

// Per-channel gate values in (0,1) for one view's features; exposed mainly so
// the gate range contract is directly testable.
std::vector<double> refiner_gate(const Tensor& features, const RefinerParams& params);

// Cross-view consistency loss: mean over levels of the mean over ordered
// neighbor pairs of the summed squared feature difference.
double refinement_loss(const std::vector<FeatureMap>& levels, const ViewGraph& graph);

// Tape-level version used during training; per level, one Var per view.
Var refinement_loss_var(Tape& tape, const std::vector<std::vector<Var>>& levels,
                        const ViewGraph& graph);

struct LossReport {
    double l_d = 0.0;
    double l_r = 0.0;
    double l_total = 0.0;
    double lambda = 0.0;
};

LossReport total_loss(double l_d, double l_r, double lambda);

}  // namespace viewalign
