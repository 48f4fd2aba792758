#include "viewalign/memory_bank.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "viewalign/errors.hpp"
#include "viewalign/rng.hpp"

namespace viewalign {

std::vector<double> ScoreConfig::resolved_weights() const {
    if (levels.empty()) throw Error("ScoreConfig: no levels configured");
    if (!level_weights.empty()) {
        if (level_weights.size() != levels.size())
            throw Error("ScoreConfig: weight count must match level count");
        double total = 0.0;
        for (double w : level_weights) {
            if (w < 0.0) throw Error("ScoreConfig: weights must be nonnegative");
            total += w;
        }
        if (total <= 0.0) throw Error("ScoreConfig: weights must not all be zero");
        return level_weights;
    }
    return std::vector<double>(levels.size(), 1.0 / static_cast<double>(levels.size()));
}

void LevelFeatureSet::add(const FeatureMap& features) {
    const int64_t c = features.channels();
    if (dim == 0) dim = c;
    if (dim != c) throw LevelMismatch("LevelFeatureSet: inconsistent feature dimension");
    const int64_t views = features.views();
    const int64_t plane = static_cast<int64_t>(features.height()) * features.width();
    vectors.reserve(vectors.size() + static_cast<size_t>(views * plane * c));
    for (int64_t v = 0; v < views; ++v) {
        const double* base = features.data.data() + v * c * plane;
        for (int64_t p = 0; p < plane; ++p)
            for (int64_t ch = 0; ch < c; ++ch)
                vectors.push_back(static_cast<float>(base[ch * plane + p]));
    }
}

std::vector<int64_t> coreset_select(const float* vectors, int64_t count, int64_t dim,
                                    int64_t keep, uint64_t seed) {
    keep = std::max<int64_t>(1, std::min(keep, count));
    Rng rng(seed);
    const int64_t start = rng.below(count);

    std::vector<int64_t> selected;
    selected.reserve(static_cast<size_t>(keep));
    selected.push_back(start);

    std::vector<double> min_d2(static_cast<size_t>(count));
    auto dist2 = [&](int64_t a, int64_t b) {
        const float* pa = vectors + a * dim;
        const float* pb = vectors + b * dim;
        double s = 0.0;
        for (int64_t j = 0; j < dim; ++j) {
            const double d = static_cast<double>(pa[j]) - static_cast<double>(pb[j]);
            s += d * d;
        }
        return s;
    };
    for (int64_t i = 0; i < count; ++i) min_d2[static_cast<size_t>(i)] = dist2(i, start);

    while (static_cast<int64_t>(selected.size()) < keep) {
        int64_t best = 0;
        double best_d = -1.0;
        for (int64_t i = 0; i < count; ++i) {
            if (min_d2[static_cast<size_t>(i)] > best_d) {
                best_d = min_d2[static_cast<size_t>(i)];
                best = i;
            }
        }
        selected.push_back(best);
        for (int64_t i = 0; i < count; ++i)
            min_d2[static_cast<size_t>(i)] =
                std::min(min_d2[static_cast<size_t>(i)], dist2(i, best));
    }
    return selected;
}

MemoryBank build_bank(const std::vector<LevelFeatureSet>& normal_features,
                      const ScoreConfig& cfg) {
    if (normal_features.empty()) throw EmptyFeatureSet("build_bank: no levels provided");
    if (cfg.coreset_fraction <= 0.0 || cfg.coreset_fraction > 1.0)
        throw Error("build_bank: coreset_fraction must lie in (0, 1]");
    MemoryBank bank;
    for (const auto& fs : normal_features) {
        if (fs.count() == 0)
            throw EmptyFeatureSet("build_bank: level " + std::to_string(fs.level_id) +
                                  " has no feature vectors");
        MemoryBank::Level level;
        level.level_id = fs.level_id;
        level.dim = fs.dim;
        if (cfg.coreset_fraction >= 1.0) {
            level.prototypes = fs.vectors;
        } else {
            const int64_t keep = std::max<int64_t>(
                1, static_cast<int64_t>(std::llround(cfg.coreset_fraction *
                                                     static_cast<double>(fs.count()))));
            const auto idx =
                coreset_select(fs.vectors.data(), fs.count(), fs.dim, keep, cfg.coreset_seed);
            level.prototypes.reserve(static_cast<size_t>(keep * fs.dim));
            for (int64_t i : idx)
                level.prototypes.insert(level.prototypes.end(),
                                        fs.vectors.begin() + static_cast<size_t>(i * fs.dim),
                                        fs.vectors.begin() +
                                            static_cast<size_t>((i + 1) * fs.dim));
        }
        bank.levels.push_back(std::move(level));
    }
    return bank;
}

namespace {

// Nearest-prototype Euclidean distance for a block of queries. The inner
// product matrix locates each argmin; the reported distance is recomputed
// directly against the winner to avoid the cancellation of the expanded form.
void nearest_distances(const double* queries, int64_t nq, const MemoryBank::Level& level,
                       double* out) {
    const int64_t np = level.count();
    const int64_t d = level.dim;
    Eigen::MatrixXd protos(d, np);
    for (int64_t p = 0; p < np; ++p)
        for (int64_t j = 0; j < d; ++j)
            protos(j, p) = static_cast<double>(level.prototypes[static_cast<size_t>(p * d + j)]);
    Eigen::VectorXd pnorm = protos.colwise().squaredNorm();

    constexpr int64_t kBlock = 256;
    Eigen::MatrixXd dots;
    for (int64_t q0 = 0; q0 < nq; q0 += kBlock) {
        const int64_t qn = std::min(kBlock, nq - q0);
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
            qm(queries + q0 * d, qn, d);
        dots.noalias() = protos.transpose() * qm.transpose();  // [np, qn]
        for (int64_t qi = 0; qi < qn; ++qi) {
            int64_t best = 0;
            double best_score = pnorm(0) - 2.0 * dots(0, qi);
            for (int64_t p = 1; p < np; ++p) {
                const double s = pnorm(p) - 2.0 * dots(p, qi);
                if (s < best_score) {
                    best_score = s;
                    best = p;
                }
            }
            const double* qv = queries + (q0 + qi) * d;
            const float* pv = level.prototypes.data() + best * d;
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                const double diff = qv[j] - static_cast<double>(pv[j]);
                s += diff * diff;
            }
            out[q0 + qi] = std::sqrt(s);
        }
    }
}

}  // namespace

Tensor bilinear_resize(const Tensor& map, int64_t out_h, int64_t out_w) {
    if (map.rank() != 2) throw ShapeMismatch("bilinear_resize: expected [H,W]");
    const int64_t h = map.dim(0), w = map.dim(1);
    Tensor out({out_h, out_w});
    const double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;
    for (int64_t y = 0; y < out_h; ++y) {
        const double fy = y * sy;
        const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(fy), h - 1);
        const int64_t y1 = std::min<int64_t>(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int64_t x = 0; x < out_w; ++x) {
            const double fx = x * sx;
            const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(fx), w - 1);
            const int64_t x1 = std::min<int64_t>(x0 + 1, w - 1);
            const double wx = fx - x0;
            const double v00 = map.at(y0, x0), v01 = map.at(y0, x1);
            const double v10 = map.at(y1, x0), v11 = map.at(y1, x1);
            out.at(y, x) = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                           wy * ((1 - wx) * v10 + wx * v11);
        }
    }
    return out;
}

Tensor gaussian_blur(const Tensor& map, double sigma) {
    if (sigma <= 0.0) return map;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        total += kernel[static_cast<size_t>(i + radius)];
    }
    for (double& k : kernel) k /= total;

    const int64_t h = map.dim(0), w = map.dim(1);
    Tensor tmp({h, w}), out({h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            double s = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int64_t xi = std::clamp<int64_t>(x + i, 0, w - 1);
                s += kernel[static_cast<size_t>(i + radius)] * map.at(y, xi);
            }
            tmp.at(y, x) = s;
        }
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            double s = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int64_t yi = std::clamp<int64_t>(y + i, 0, h - 1);
                s += kernel[static_cast<size_t>(i + radius)] * tmp.at(yi, x);
            }
            out.at(y, x) = s;
        }
    return out;
}

Tensor pixel_score(const std::vector<FeatureMap>& query_features, const MemoryBank& bank,
                   const ScoreConfig& cfg) {
    if (query_features.size() != bank.levels.size())
        throw LevelMismatch("pixel_score: query level count does not match bank");
    const auto weights = cfg.resolved_weights();
    if (weights.size() != bank.levels.size())
        throw LevelMismatch("pixel_score: weight count does not match bank levels");

    // The finest grid hosts the fused map before image upsampling.
    size_t finest = 0;
    for (size_t l = 1; l < query_features.size(); ++l)
        if (query_features[l].height() > query_features[finest].height()) finest = l;
    const int64_t fh = query_features[finest].height();
    const int64_t fw = query_features[finest].width();
    const int views = query_features[0].views();
    const double finest_scale = query_features[finest].resolution_scale;
    const int64_t img_h = static_cast<int64_t>(std::llround(fh / finest_scale));
    const int64_t img_w = static_cast<int64_t>(std::llround(fw / finest_scale));

    Tensor fused({views, fh, fw});
    for (size_t l = 0; l < bank.levels.size(); ++l) {
        const FeatureMap& fm = query_features[l];
        const MemoryBank::Level& level = bank.levels[l];
        if (fm.channels() != level.dim)
            throw LevelMismatch("pixel_score: feature dimension mismatch at level " +
                                std::to_string(level.level_id));
        if (fm.views() != views) throw LevelMismatch("pixel_score: view count mismatch");
        const int64_t h = fm.height(), w = fm.width(), plane = h * w, c = fm.channels();

        for (int v = 0; v < views; ++v) {
            // position-major query block for this view
            std::vector<double> queries(static_cast<size_t>(plane * c));
            const double* base = fm.data.data() + static_cast<int64_t>(v) * c * plane;
            for (int64_t p = 0; p < plane; ++p)
                for (int64_t ch = 0; ch < c; ++ch)
                    queries[static_cast<size_t>(p * c + ch)] = base[ch * plane + p];
            std::vector<double> dist(static_cast<size_t>(plane));
            nearest_distances(queries.data(), plane, level, dist.data());

            Tensor level_map({h, w}, std::move(dist));
            if (h != fh || w != fw) level_map = bilinear_resize(level_map, fh, fw);
            double* dst = fused.data() + static_cast<int64_t>(v) * fh * fw;
            for (int64_t i = 0; i < fh * fw; ++i) dst[i] += weights[l] * level_map[i];
        }
    }

    Tensor out({views, img_h, img_w});
    for (int v = 0; v < views; ++v) {
        Tensor view_map({fh, fw});
        std::copy(fused.data() + static_cast<int64_t>(v) * fh * fw,
                  fused.data() + static_cast<int64_t>(v + 1) * fh * fw, view_map.data());
        Tensor up = bilinear_resize(view_map, img_h, img_w);
        if (cfg.smooth_sigma > 0.0) up = gaussian_blur(up, cfg.smooth_sigma);
        std::copy(up.data(), up.data() + img_h * img_w,
                  out.data() + static_cast<int64_t>(v) * img_h * img_w);
    }
    return out;
}

double view_score(const Tensor& pixel_map) {
    if (pixel_map.numel() == 0) throw EmptyMap("view_score: empty map");
    double best = pixel_map[0];
    for (int64_t i = 1; i < pixel_map.numel(); ++i) best = std::max(best, pixel_map[i]);
    return best;
}

double sample_score(const std::vector<double>& view_scores) {
    if (view_scores.empty()) throw EmptyList("sample_score: empty view score list");
    double best = view_scores[0];
    for (double v : view_scores) best = std::max(best, v);
    return best;
}

AnomalyScores score_sample(const std::vector<FeatureMap>& query_features,
                           const MemoryBank& bank, const ScoreConfig& cfg) {
    AnomalyScores out;
    out.pixel_maps = pixel_score(query_features, bank, cfg);
    const int views = static_cast<int>(out.pixel_maps.dim(0));
    const int64_t plane = out.pixel_maps.dim(1) * out.pixel_maps.dim(2);
    out.view_scores.resize(static_cast<size_t>(views));
    for (int v = 0; v < views; ++v) {
        Tensor view_map({out.pixel_maps.dim(1), out.pixel_maps.dim(2)});
        std::copy(out.pixel_maps.data() + v * plane, out.pixel_maps.data() + (v + 1) * plane,
                  view_map.data());
        out.view_scores[static_cast<size_t>(v)] = view_score(view_map);
    }
    out.sample_score = sample_score(out.view_scores);
    return out;
}

// ---------------------------------------------------------------------------
// bank file
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'V', 'A', 'M', 'E', 'M', 'B', 'N', 'K'};
constexpr uint32_t kVersion = 1;

uint64_t fnv1a(const unsigned char* data, size_t n, uint64_t h = 1469598103934665603ull) {
    for (size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 1099511628211ull;
    }
    return h;
}

template <typename T>
void put(std::string& buf, const T& v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& buf, size_t& off) {
    if (off + sizeof(T) > buf.size()) throw CorruptBankFile("bank file truncated");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

void save_bank(const MemoryBank& bank, const std::string& path) {
    std::string buf;
    buf.append(kMagic, sizeof(kMagic));
    put<uint32_t>(buf, kVersion);
    put<uint32_t>(buf, static_cast<uint32_t>(bank.levels.size()));
    put<uint32_t>(buf, static_cast<uint32_t>(bank.checkpoint_hash.size()));
    buf.append(bank.checkpoint_hash);
    put<int32_t>(buf, bank.invert_steps);
    put<int32_t>(buf, bank.t_extract);
    put<int32_t>(buf, bank.radius);
    for (const auto& level : bank.levels) {
        put<int32_t>(buf, level.level_id);
        put<uint64_t>(buf, static_cast<uint64_t>(level.count()));
        put<uint64_t>(buf, static_cast<uint64_t>(level.dim));
    }
    for (const auto& level : bank.levels)
        buf.append(reinterpret_cast<const char*>(level.prototypes.data()),
                   level.prototypes.size() * sizeof(float));
    const uint64_t checksum =
        fnv1a(reinterpret_cast<const unsigned char*>(buf.data()), buf.size());
    put<uint64_t>(buf, checksum);

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoFailure("cannot write bank file: " + path);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoFailure("failed writing bank file: " + path);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoFailure("cannot finalize bank file: " + path);
}

MemoryBank load_bank(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open bank file: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < sizeof(kMagic) + sizeof(uint64_t))
        throw CorruptBankFile("bank file too short");

    const uint64_t stored_checksum =
        *reinterpret_cast<const uint64_t*>(buf.data() + buf.size() - sizeof(uint64_t));
    const uint64_t computed = fnv1a(reinterpret_cast<const unsigned char*>(buf.data()),
                                    buf.size() - sizeof(uint64_t));
    if (stored_checksum != computed) throw CorruptBankFile("bank checksum mismatch");

    size_t off = 0;
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
        throw CorruptBankFile("bad bank magic");
    off += sizeof(kMagic);
    const auto version = take<uint32_t>(buf, off);
    if (version != kVersion) throw CorruptBankFile("unsupported bank version");
    const auto num_levels = take<uint32_t>(buf, off);
    const auto hash_len = take<uint32_t>(buf, off);
    if (off + hash_len > buf.size()) throw CorruptBankFile("bank file truncated");
    MemoryBank bank;
    bank.checkpoint_hash = buf.substr(off, hash_len);
    off += hash_len;
    bank.invert_steps = take<int32_t>(buf, off);
    bank.t_extract = take<int32_t>(buf, off);
    bank.radius = take<int32_t>(buf, off);

    std::vector<std::pair<uint64_t, uint64_t>> dims;
    for (uint32_t l = 0; l < num_levels; ++l) {
        MemoryBank::Level level;
        level.level_id = take<int32_t>(buf, off);
        const auto count = take<uint64_t>(buf, off);
        const auto dim = take<uint64_t>(buf, off);
        level.dim = static_cast<int64_t>(dim);
        dims.emplace_back(count, dim);
        bank.levels.push_back(std::move(level));
    }
    for (uint32_t l = 0; l < num_levels; ++l) {
        const auto [count, dim] = dims[l];
        const size_t bytes = static_cast<size_t>(count * dim) * sizeof(float);
        if (off + bytes > buf.size() - sizeof(uint64_t))
            throw CorruptBankFile("bank payload truncated");
        auto& level = bank.levels[l];
        level.prototypes.resize(static_cast<size_t>(count * dim));
        std::memcpy(level.prototypes.data(), buf.data() + off, bytes);
        off += bytes;
    }
    return bank;
}

}  // namespace viewalign
