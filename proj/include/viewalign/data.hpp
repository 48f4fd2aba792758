#pragma once

#include <string>
#include <vector>

#include "viewalign/errors.hpp"
#include "viewalign/tensor.hpp"

namespace viewalign {

// One multi-view observation of an object: M RGB views, and for defective
// samples a per-view binary defect mask. Label structure is redundant on
// purpose; validate() cross-checks it.
struct MultiViewSample {
    std::string sample_id;
    Tensor views;                  // [M, 3, H, W], values in [0, 1]
    std::vector<Tensor> masks;     // per view [H, W] in {0,1}; empty unless defective
    std::vector<bool> view_labels;
    bool sample_label = false;

    int num_views() const { return static_cast<int>(views.dim(0)); }
    int height() const { return static_cast<int>(views.dim(2)); }
    int width() const { return static_cast<int>(views.dim(3)); }

    void validate() const {
        const int m = num_views();
        if (static_cast<int>(view_labels.size()) != m)
            throw MaskLabelMismatch(sample_id + ": view label count mismatch");
        bool any = false;
        for (bool b : view_labels) any = any || b;
        if (any != sample_label)
            throw MaskLabelMismatch(sample_id + ": sample label must be the OR of view labels");
        if (sample_label) {
            if (static_cast<int>(masks.size()) != m)
                throw MaskLabelMismatch(sample_id + ": defective sample must carry all masks");
            for (int v = 0; v < m; ++v) {
                const Tensor& mask = masks[static_cast<size_t>(v)];
                if (mask.rank() != 2 || mask.dim(0) != height() || mask.dim(1) != width())
                    throw MaskLabelMismatch(sample_id + ": mask shape mismatch");
                bool positive = false;
                for (int64_t i = 0; i < mask.numel() && !positive; ++i)
                    positive = mask[i] > 0.5;
                if (positive != view_labels[static_cast<size_t>(v)])
                    throw MaskLabelMismatch(sample_id + ": view label disagrees with mask " +
                                            std::to_string(v));
            }
        } else if (!masks.empty()) {
            throw MaskLabelMismatch(sample_id + ": normal sample must not carry masks");
        }
    }
};

}  // namespace viewalign
