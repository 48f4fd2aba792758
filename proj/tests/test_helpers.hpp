#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "viewalign/geometry.hpp"
#include "viewalign/rng.hpp"
#include "viewalign/tensor.hpp"

namespace test_util {

// Well-conditioned random projective map: a bounded perturbation of identity
// with a mild projective row, as produced by a plausible camera rig.
inline viewalign::Homography random_homography(viewalign::Rng& rng, int src = 0, int dst = 1) {
    std::array<double, 9> m = {
        1.0 + rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),       rng.uniform(-5.0, 5.0),
        rng.uniform(-0.2, 0.2),       1.0 + rng.uniform(-0.2, 0.2), rng.uniform(-5.0, 5.0),
        rng.uniform(-0.002, 0.002),   rng.uniform(-0.002, 0.002),   1.0};
    return viewalign::make_homography(m, src, dst);
}

inline viewalign::Tensor random_tensor(std::vector<int64_t> shape, viewalign::Rng& rng,
                                       double lo = -1.0, double hi = 1.0) {
    viewalign::Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline double rel_err(double a, double b, double floor = 1e-10) {
    const double m = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / m;
}

// Central finite difference through an arbitrary recompute, perturbing one
// scalar slot in place.
template <typename F>
double central_diff(double& slot, double h, F&& f) {
    const double saved = slot;
    slot = saved + h;
    const double fp = f();
    slot = saved - h;
    const double fm = f();
    slot = saved;
    return (fp - fm) / (2.0 * h);
}

}  // namespace test_util
