#include "viewalign/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace viewalign {

namespace {

using Mat3 = std::array<double, 9>;

double det3(const Mat3& m) {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Mat3 mul3(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
            r[i * 3 + j] = s;
        }
    return r;
}

Mat3 adjugate3(const Mat3& m) {
    Mat3 r{};
    r[0] = m[4] * m[8] - m[5] * m[7];
    r[1] = m[2] * m[7] - m[1] * m[8];
    r[2] = m[1] * m[5] - m[2] * m[4];
    r[3] = m[5] * m[6] - m[3] * m[8];
    r[4] = m[0] * m[8] - m[2] * m[6];
    r[5] = m[2] * m[3] - m[0] * m[5];
    r[6] = m[3] * m[7] - m[4] * m[6];
    r[7] = m[1] * m[6] - m[0] * m[7];
    r[8] = m[0] * m[4] - m[1] * m[3];
    return r;
}

constexpr double kDetTolerance = 1e-12;

}  // namespace

Homography make_homography(const std::array<double, 9>& m, int src_view, int dst_view) {
    const double d = det3(m);
    if (std::abs(d) <= kDetTolerance)
        throw SingularMatrix("homography matrix is singular (|det| <= 1e-12)");
    if (std::abs(m[8]) <= kDetTolerance)
        throw SingularMatrix("homography matrix has h[2][2] ~ 0; cannot normalize");
    Homography h;
    h.src_view = src_view;
    h.dst_view = dst_view;
    for (int i = 0; i < 9; ++i) h.h[i] = m[i] / m[8];
    return h;
}

Homography identity_homography(int src_view, int dst_view) {
    Homography h;
    h.src_view = src_view;
    h.dst_view = dst_view;
    return h;
}

Homography invert_homography(const Homography& h) {
    // The adjugate is the inverse up to the (nonzero) determinant, which the
    // projective normalization in make_homography divides away again.
    return make_homography(adjugate3(h.h), h.dst_view, h.src_view);
}

Homography compose_homography(const Homography& second, const Homography& first) {
    return make_homography(mul3(second.h, first.h), first.src_view, second.dst_view);
}

Vec2 project_point(const Homography& h, Vec2 p) {
    const double x = h.h[0] * p.x + h.h[1] * p.y + h.h[2];
    const double y = h.h[3] * p.x + h.h[4] * p.y + h.h[5];
    const double w = h.h[6] * p.x + h.h[7] * p.y + h.h[8];
    if (std::abs(w) <= 1e-9)
        throw PointAtInfinity("projected point has |w| <= 1e-9");
    return {x / w, y / w};
}

Homography rescale_homography(const Homography& h, double src_scale, double dst_scale) {
    if (src_scale <= 0.0 || dst_scale <= 0.0)
        throw Error("rescale_homography: scales must be positive");
    // S_dst * H * S_src^-1, with S = diag(s, s, 1). Written out to avoid two
    // full matrix products.
    Mat3 m = h.h;
    const double inv_src = 1.0 / src_scale;
    for (int col = 0; col < 2; ++col)
        for (int row = 0; row < 3; ++row) m[row * 3 + col] *= inv_src;
    for (int col = 0; col < 3; ++col) {
        m[0 * 3 + col] *= dst_scale;
        m[1 * 3 + col] *= dst_scale;
    }
    return make_homography(m, h.src_view, h.dst_view);
}

double round_half_even(double v) {
    const double f = std::floor(v);
    const double frac = v - f;
    if (frac > 0.5) return f + 1.0;
    if (frac < 0.5) return f;
    return (std::fmod(f, 2.0) == 0.0) ? f : f + 1.0;
}

Topology topology_from_string(const std::string& s) {
    if (s == "ring") return Topology::kRing;
    if (s == "full") return Topology::kFull;
    if (s == "explicit") return Topology::kExplicit;
    throw ConfigParseError("unknown view-graph topology: " + s);
}

std::string topology_to_string(Topology t) {
    switch (t) {
        case Topology::kRing: return "ring";
        case Topology::kFull: return "full";
        case Topology::kExplicit: return "explicit";
    }
    return "ring";
}

bool ViewGraph::adjacent(int i, int j) const {
    const auto& n = neighbors[static_cast<size_t>(i)];
    return std::find(n.begin(), n.end(), j) != n.end();
}

ViewGraph build_view_graph(int num_views, Topology topology,
                           const std::vector<std::vector<int>>& explicit_neighbors) {
    if (num_views < 2) throw Error("build_view_graph: need at least 2 views");
    ViewGraph g;
    g.num_views = num_views;
    g.neighbors.resize(static_cast<size_t>(num_views));

    switch (topology) {
        case Topology::kRing:
            for (int i = 0; i < num_views; ++i) {
                const int prev = (i + num_views - 1) % num_views;
                const int next = (i + 1) % num_views;
                g.neighbors[static_cast<size_t>(i)].push_back(prev);
                if (next != prev) g.neighbors[static_cast<size_t>(i)].push_back(next);
            }
            break;
        case Topology::kFull:
            for (int i = 0; i < num_views; ++i)
                for (int j = 0; j < num_views; ++j)
                    if (j != i) g.neighbors[static_cast<size_t>(i)].push_back(j);
            break;
        case Topology::kExplicit: {
            if (static_cast<int>(explicit_neighbors.size()) != num_views)
                throw AsymmetricAdjacency("explicit adjacency must list every view");
            for (int i = 0; i < num_views; ++i) {
                std::set<int> seen;
                for (int j : explicit_neighbors[static_cast<size_t>(i)]) {
                    if (j < 0 || j >= num_views)
                        throw AsymmetricAdjacency("neighbor index out of range");
                    if (j == i) throw AsymmetricAdjacency("view listed as its own neighbor");
                    if (!seen.insert(j).second)
                        throw AsymmetricAdjacency("duplicate neighbor entry");
                }
                g.neighbors[static_cast<size_t>(i)] = explicit_neighbors[static_cast<size_t>(i)];
            }
            for (int i = 0; i < num_views; ++i)
                for (int j : g.neighbors[static_cast<size_t>(i)])
                    if (!g.adjacent(j, i))
                        throw AsymmetricAdjacency("adjacency is not symmetric: " +
                                                  std::to_string(i) + " -> " + std::to_string(j));
            break;
        }
    }

    for (int i = 0; i < num_views; ++i)
        for (int j : g.neighbors[static_cast<size_t>(i)]) g.pairs.emplace_back(i, j);
    return g;
}

std::vector<SearchCandidate> search_window_or_empty(const Homography& h, int px, int py,
                                                    int radius, int height, int width) {
    if (radius < 1) throw Error("search_window: radius must be >= 1");
    const Vec2 proj = project_point(h, {static_cast<double>(px), static_cast<double>(py)});
    const int cx = static_cast<int>(round_half_even(proj.x));
    const int cy = static_cast<int>(round_half_even(proj.y));
    const int offset = (radius - 1) / 2;  // top-left of the window
    std::vector<SearchCandidate> out;
    out.reserve(static_cast<size_t>(radius) * static_cast<size_t>(radius));
    for (int wy = 0; wy < radius; ++wy) {
        const int y = cy - offset + wy;
        if (y < 0 || y >= height) continue;
        for (int wx = 0; wx < radius; ++wx) {
            const int x = cx - offset + wx;
            if (x < 0 || x >= width) continue;
            SearchCandidate c;
            c.view = h.dst_view;
            c.x = x;
            c.y = y;
            c.dx = static_cast<double>(x) - proj.x;
            c.dy = static_cast<double>(y) - proj.y;
            out.push_back(c);
        }
    }
    return out;
}

std::vector<SearchCandidate> search_window(const Homography& h, int px, int py, int radius,
                                           int height, int width) {
    auto out = search_window_or_empty(h, px, py, radius, height, width);
    if (out.empty())
        throw EmptyWindow("entire search window is outside the target feature map");
    return out;
}

void positional_encoding(Vec2 delta, const PosEncodingConfig& cfg, double* out) {
    if (cfg.dim <= 0 || cfg.dim % 4 != 0)
        throw Error("positional_encoding: dim must be a positive multiple of 4");
    if (cfg.base_frequency <= 0.0)
        throw Error("positional_encoding: base_frequency must be positive");
    const int pairs = cfg.dim / 4;  // (sin, cos) pairs per axis
    const double axis_val[2] = {delta.x, delta.y};
    for (int axis = 0; axis < 2; ++axis) {
        double* dst = out + axis * (cfg.dim / 2);
        for (int k = 0; k < pairs; ++k) {
            const double freq =
                std::pow(cfg.base_frequency, -4.0 * static_cast<double>(k) / cfg.dim);
            const double v = axis_val[axis] * freq;
            dst[2 * k] = std::sin(v);
            dst[2 * k + 1] = std::cos(v);
        }
    }
}

std::vector<double> positional_encoding(Vec2 delta, const PosEncodingConfig& cfg) {
    std::vector<double> out(static_cast<size_t>(cfg.dim));
    positional_encoding(delta, cfg, out.data());
    return out;
}

void HomographySet::set(const Homography& h) {
    map_[{h.src_view, h.dst_view}] = h;
}

bool HomographySet::has(int src, int dst) const {
    return map_.count({src, dst}) > 0;
}

const Homography& HomographySet::get(int src, int dst) const {
    auto it = map_.find({src, dst});
    if (it == map_.end())
        throw MissingHomography("no homography for view pair " + std::to_string(src) + " -> " +
                                std::to_string(dst));
    return it->second;
}

HomographySet HomographySet::rescaled(double scale) const {
    HomographySet out;
    for (const auto& [key, h] : map_) out.set(rescale_homography(h, scale, scale));
    return out;
}

HomographySet load_calibration(const std::string& path, const ViewGraph& graph) {
    std::ifstream in(path);
    if (!in) throw MissingCalibration("cannot open calibration file: " + path);
    HomographySet set;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream ss(line);
        int i = 0, j = 0;
        if (!(ss >> i >> j)) continue;  // blank or comment-only line
        std::array<double, 9> m{};
        for (int k = 0; k < 9; ++k)
            if (!(ss >> m[k]))
                throw MissingCalibration("calibration line " + std::to_string(lineno) +
                                         ": expected 9 matrix entries");
        if (i < 0 || i >= graph.num_views || j < 0 || j >= graph.num_views)
            throw MissingCalibration("calibration line " + std::to_string(lineno) +
                                     ": view index out of range");
        Homography h = make_homography(m, i, j);
        set.set(h);
    }
    for (const auto& [i, j] : graph.pairs)
        if (!set.has(i, j))
            throw MissingCalibration("calibration is missing adjacent view pair " +
                                     std::to_string(i) + " -> " + std::to_string(j));
    // Non-adjacent pairs are allowed to be absent; they default to identity.
    for (int i = 0; i < graph.num_views; ++i)
        for (int j = 0; j < graph.num_views; ++j)
            if (i != j && !set.has(i, j)) set.set(identity_homography(i, j));
    return set;
}

void save_calibration(const std::string& path, const HomographySet& set) {
    std::ofstream out(path);
    if (!out) throw IoFailure("cannot write calibration file: " + path);
    out << "# per ordered view pair: i j  h00 h01 h02 h10 h11 h12 h20 h21 h22\n";
    out.precision(17);
    for (const auto& [key, h] : set.entries()) {
        out << key.first << " " << key.second;
        for (double v : h.h) out << " " << v;
        out << "\n";
    }
    if (!out) throw IoFailure("failed writing calibration file: " + path);
}

}  // namespace viewalign
