#include "viewalign/refiner.hpp"

#include <cmath>

#include "viewalign/errors.hpp"
#include "viewalign/nn.hpp"

namespace viewalign {

RefinerParams RefinerParams::init(int channels, int bottleneck_ratio, Rng& rng) {
    if (bottleneck_ratio < 1) throw Error("RefinerParams: bottleneck ratio must be >= 1");
    const int hidden = std::max(1, channels / bottleneck_ratio);
    RefinerParams p;
    p.bottleneck_ratio = bottleneck_ratio;
    p.conv1_w = fan_in_uniform({channels, channels, 3, 3}, static_cast<int64_t>(channels) * 9,
                               rng);
    p.conv1_b = Tensor::zeros({channels});
    p.conv2_w = Tensor::zeros({channels, channels, 3, 3});
    p.conv2_b = Tensor::zeros({channels});
    p.gate_fc1_w = fan_in_uniform({hidden, channels}, channels, rng);
    p.gate_fc1_b = Tensor::zeros({hidden});
    p.gate_fc2_w = fan_in_uniform({channels, hidden}, hidden, rng);
    p.gate_fc2_b = Tensor::zeros({channels});
    return p;
}

Var refiner_forward(Tape& tape, Var x, Var c1w, Var c1b, Var c2w, Var c2b, Var g1w, Var g1b,
                    Var g2w, Var g2b) {
    Var h = tape.conv2d(x, c1w, c1b, 1, 1);
    h = tape.silu(h);
    h = tape.conv2d(h, c2w, c2b, 1, 1);
    // Channel gate from the branch's own global statistics.
    Var pooled = tape.global_avg_pool(h);
    const int64_t c = tape.val(pooled).dim(0);
    Var g = tape.reshape(pooled, {1, c});
    g = tape.linear(g, g1w, g1b);
    g = tape.silu(g);
    g = tape.linear(g, g2w, g2b);
    g = tape.sigmoid(g);
    g = tape.reshape(g, {c});
    const Var gated = tape.channel_mul(h, g);
    return tape.add(x, gated);
}

namespace {

Var refine_on_tape(Tape& tape, const Tensor& features, const RefinerParams& p) {
    if (features.rank() != 3 || features.dim(0) != p.channels())
        throw ShapeMismatch("refine: feature channel count does not match parameters");
    const Var x = tape.constant(features);
    return refiner_forward(tape, x, tape.constant(p.conv1_w), tape.constant(p.conv1_b),
                           tape.constant(p.conv2_w), tape.constant(p.conv2_b),
                           tape.constant(p.gate_fc1_w), tape.constant(p.gate_fc1_b),
                           tape.constant(p.gate_fc2_w), tape.constant(p.gate_fc2_b));
}

}  // namespace

Tensor refine(const Tensor& features, const RefinerParams& params) {
    Tape tape(false);
    const Var out = refine_on_tape(tape, features, params);
    return tape.val(out);
}

std::vector<double> refiner_gate(const Tensor& features, const RefinerParams& params) {
    if (features.rank() != 3 || features.dim(0) != params.channels())
        throw ShapeMismatch("refiner_gate: feature channel count does not match parameters");
    Tape tape(false);
    Var h = tape.conv2d(tape.constant(features), tape.constant(params.conv1_w),
                        tape.constant(params.conv1_b), 1, 1);
    h = tape.silu(h);
    h = tape.conv2d(h, tape.constant(params.conv2_w), tape.constant(params.conv2_b), 1, 1);
    Var pooled = tape.global_avg_pool(h);
    const int64_t c = tape.val(pooled).dim(0);
    Var g = tape.reshape(pooled, {1, c});
    g = tape.linear(g, tape.constant(params.gate_fc1_w), tape.constant(params.gate_fc1_b));
    g = tape.silu(g);
    g = tape.linear(g, tape.constant(params.gate_fc2_w), tape.constant(params.gate_fc2_b));
    g = tape.sigmoid(g);
    const Tensor& t = tape.val(g);
    return std::vector<double>(t.data(), t.data() + t.numel());
}

double refinement_loss(const std::vector<FeatureMap>& levels, const ViewGraph& graph) {
    if (levels.empty()) throw ShapeMismatch("refinement_loss: no levels");
    if (graph.pairs.empty()) throw ShapeMismatch("refinement_loss: graph has no pairs");
    double total = 0.0;
    for (const auto& level : levels) {
        if (level.views() != graph.num_views)
            throw ShapeMismatch("refinement_loss: view count mismatch");
        const int64_t stride = static_cast<int64_t>(level.channels()) * level.height() *
                               level.width();
        double level_sum = 0.0;
        for (const auto& [i, j] : graph.pairs) {
            const double* a = level.data.data() + i * stride;
            const double* b = level.data.data() + j * stride;
            double s = 0.0;
            for (int64_t k = 0; k < stride; ++k) {
                const double d = a[k] - b[k];
                s += d * d;
            }
            level_sum += s;
        }
        total += level_sum / static_cast<double>(graph.pairs.size());
    }
    return total / static_cast<double>(levels.size());
}

Var refinement_loss_var(Tape& tape, const std::vector<std::vector<Var>>& levels,
                        const ViewGraph& graph) {
    if (levels.empty()) throw ShapeMismatch("refinement_loss_var: no levels");
    Var total{};
    for (const auto& views : levels) {
        if (static_cast<int>(views.size()) != graph.num_views)
            throw ShapeMismatch("refinement_loss_var: view count mismatch");
        Var level_sum{};
        for (const auto& [i, j] : graph.pairs) {
            const Var diff = tape.sub(views[static_cast<size_t>(i)],
                                      views[static_cast<size_t>(j)]);
            const Var sq = tape.sum_sq(diff);
            level_sum = level_sum.valid() ? tape.add(level_sum, sq) : sq;
        }
        level_sum = tape.scale(level_sum, 1.0 / static_cast<double>(graph.pairs.size()));
        total = total.valid() ? tape.add(total, level_sum) : level_sum;
    }
    return tape.scale(total, 1.0 / static_cast<double>(levels.size()));
}

LossReport total_loss(double l_d, double l_r, double lambda) {
    if (!std::isfinite(l_d) || !std::isfinite(l_r) || !std::isfinite(lambda))
        throw NonFiniteInput("total_loss: non-finite input");
    LossReport r;
    r.l_d = l_d;
    r.l_r = l_r;
    r.lambda = lambda;
    r.l_total = l_d + lambda * l_r;
    return r;
}

}  // namespace viewalign
