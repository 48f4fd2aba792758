#pragma once

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "viewalign/errors.hpp"

namespace viewalign {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

// 3x3 projective map between the pixel planes of two views. Stored row-major
// and normalized so h[8] == 1, picking a canonical representative of the
// projective equivalence class.
struct Homography {
    std::array<double, 9> h{1, 0, 0, 0, 1, 0, 0, 0, 1};
    int src_view = 0;
    int dst_view = 0;
};

// Normalizes and validates a raw 3x3 matrix. Throws SingularMatrix when the
// determinant or the bottom-right entry is below tolerance.
Homography make_homography(const std::array<double, 9>& m, int src_view, int dst_view);

Homography identity_homography(int src_view, int dst_view);

// Inverse map (dst -> src).
Homography invert_homography(const Homography& h);

// Composition second ∘ first; requires first.dst_view == second.src_view.
Homography compose_homography(const Homography& second, const Homography& first);

// Applies h to p in homogeneous coordinates and dehomogenizes. Throws
// PointAtInfinity when |w| <= 1e-9.
Vec2 project_point(const Homography& h, Vec2 p);

// Conjugates h by the axis scalings S_dst · h · S_src^-1 with
// S = diag(scale, scale, 1). Used to move image-resolution calibration onto
// downsampled feature grids.
Homography rescale_homography(const Homography& h, double src_scale, double dst_scale);

// Round-to-nearest, ties to even. Window rasterization must not bias toward
// either side of a .5 projection.
double round_half_even(double v);

enum class Topology { kRing, kFull, kExplicit };

Topology topology_from_string(const std::string& s);
std::string topology_to_string(Topology t);

// Which views are "neighbors" for alignment and the consistency loss.
struct ViewGraph {
    int num_views = 0;
    std::vector<std::vector<int>> neighbors;      // per view, ordered adjacency
    std::vector<std::pair<int, int>> pairs;       // all ordered (i, j), j in neighbors[i]

    bool adjacent(int i, int j) const;
};

ViewGraph build_view_graph(int num_views, Topology topology,
                           const std::vector<std::vector<int>>& explicit_neighbors = {});

// One cell of a projected search window.
struct SearchCandidate {
    int view = 0;        // view the candidate lives in
    int x = 0, y = 0;    // integer grid position there
    double dx = 0.0;     // displacement from the projected query point,
    double dy = 0.0;     // in feature-grid cells
};

// Enumerates the radius x radius integer grid centered on the rounded
// projection of (px, py); candidates falling outside [0,width) x [0,height)
// are dropped. Returns an empty list when nothing is in bounds.
std::vector<SearchCandidate> search_window_or_empty(const Homography& h, int px, int py,
                                                    int radius, int height, int width);

// Same, but an entirely out-of-bounds window is an EmptyWindow error.
std::vector<SearchCandidate> search_window(const Homography& h, int px, int py, int radius,
                                           int height, int width);

struct PosEncodingConfig {
    int dim = 32;                    // divisible by 4: two axes x sin/cos pairs
    double base_frequency = 10000.0;
};

// Frequency-based 2D encoding of a displacement. Layout: x-axis features then
// y-axis features, each as [sin(v*f_0), cos(v*f_0), sin(v*f_1), ...] with
// f_k = base_frequency^(-4k/dim). Writes cfg.dim values to out.
void positional_encoding(Vec2 delta, const PosEncodingConfig& cfg, double* out);
std::vector<double> positional_encoding(Vec2 delta, const PosEncodingConfig& cfg);

// Homography collection keyed by ordered (src, dst) view pair.
class HomographySet {
public:
    void set(const Homography& h);
    bool has(int src, int dst) const;
    const Homography& get(int src, int dst) const;  // throws MissingHomography
    size_t size() const { return map_.size(); }

    // All pair maps conjugated to another grid scale.
    HomographySet rescaled(double scale) const;

    const std::map<std::pair<int, int>, Homography>& entries() const { return map_; }

private:
    std::map<std::pair<int, int>, Homography> map_;
};

// Plain-text calibration: one "i j h00 ... h22" line per ordered pair, '#'
// starts a comment. Pairs adjacent in `graph` must be present; absent
// non-adjacent pairs default to identity.
HomographySet load_calibration(const std::string& path, const ViewGraph& graph);
void save_calibration(const std::string& path, const HomographySet& set);

}  // namespace viewalign
