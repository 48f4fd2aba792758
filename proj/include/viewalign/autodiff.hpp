#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "viewalign/tensor.hpp"

namespace viewalign {

// Handle to a node on a Tape.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape is a single-use forward recording: ops append nodes holding the
// computed value plus a closure that scatters the node's gradient back into
// its inputs. backward() seeds the loss gradient and replays the closures in
// reverse creation order, so accumulation order is fixed and runs are
// bit-reproducible. Construct with grad_enabled=false for inference-only
// forwards; values are computed but no closures are recorded.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Tracked input: gradients accumulate here.
    Var leaf(Tensor value);
    // Untracked input: data, noise, precomputed encodings.
    Var constant(Tensor value);

    const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    // Valid after backward(); zero tensor if the node never received gradient.
    Tensor grad_of(Var v) const;

    void backward(Var loss);

    bool grad_enabled() const { return grad_enabled_; }
    size_t num_nodes() const { return nodes_.size(); }

    // ---- elementwise / broadcast ----
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var bias_add(Var x, Var b);      // x[C,H,W] + b[C], broadcast over space
    Var channel_mul(Var x, Var g);   // x[C,H,W] * g[C], broadcast over space
    Var silu(Var x);
    Var sigmoid(Var x);

    // ---- linear algebra ----
    // y[m,n] = x[m,k] * w[n,k]^T (+ b[n]); pass an invalid Var to skip bias.
    Var linear(Var x, Var w, Var b);

    // ---- convolution (NCHW single image, square kernel) ----
    Var conv2d(Var x, Var w, Var b, int stride, int pad);

    // ---- normalization / activations over [C,H,W] ----
    Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);

    // ---- shape / spatial ----
    Var reshape(Var x, std::vector<int64_t> shape);
    Var chw_to_rows(Var x);                                // [C,H,W] -> [H*W, C]
    Var rows_to_chw(Var x, int64_t c, int64_t h, int64_t w);
    Var upsample_nearest2x(Var x);
    Var global_avg_pool(Var x);                            // [C,H,W] -> [C]
    Var concat_channels(Var a, Var b);                     // along dim 0 of [C,H,W]
    Var concat_rows(const std::vector<Var>& xs);           // along dim 0 of [n,d]
    Var gather_rows(Var x, std::vector<int64_t> idx);      // rows of [n,d]

    // ---- attention ----
    // Softmax attention over contiguous candidate segments. q is [P,d]; k and
    // v are [N,d]; seg has P+1 entries with segment p owning rows
    // [seg[p], seg[p+1]). Empty segments produce a zero output row. logits are
    // q_p . k_c * scale with per-segment max subtraction.
    Var patch_attention(Var q, Var k, Var v, std::vector<int64_t> seg, double scale);

    // ---- reductions ----
    Var sum(Var x);
    Var mean(Var x);
    Var sum_sq(Var x);  // sum of squared entries

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void()> backward;  // empty for untracked nodes
        bool tracked = false;
    };

    Var push(Tensor value, bool tracked, std::function<void()> bw);
    bool tracked(Var v) const { return nodes_[static_cast<size_t>(v.id)].tracked; }
    Tensor& grad_buf(Var v);

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;

    friend struct TapeOps;
};

}  // namespace viewalign
