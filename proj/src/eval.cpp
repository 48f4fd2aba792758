#include "viewalign/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <thread>

#include "viewalign/image_io.hpp"

namespace fs = std::filesystem;

namespace viewalign {

double auroc(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
    if (scores.size() != labels.size()) throw ShapeMismatch("auroc: size mismatch");
    const size_t n = scores.size();
    size_t n1 = 0;
    for (uint8_t l : labels) n1 += l ? 1 : 0;
    const size_t n0 = n - n1;
    if (n1 == 0 || n0 == 0)
        throw SingleClass("auroc: both classes must be present");

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // midranks: tied scores share the average of their 1-based positions
    double positive_rank_sum = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t k = i; k <= j; ++k)
            if (labels[order[k]]) positive_rank_sum += midrank;
        i = j + 1;
    }
    const double u = positive_rank_sum -
                     static_cast<double>(n1) * (static_cast<double>(n1) + 1.0) / 2.0;
    return u / (static_cast<double>(n1) * static_cast<double>(n0));
}

void pool_sample(PooledScores& pools, const AnomalyScores& scores,
                 const MultiViewSample& sample) {
    const int views = sample.num_views();
    if (static_cast<int>(scores.pixel_maps.dim(0)) != views ||
        scores.pixel_maps.dim(1) != sample.height() ||
        scores.pixel_maps.dim(2) != sample.width())
        throw ShapeMismatch("pool_sample: score maps must match the image grid");

    const int64_t plane = static_cast<int64_t>(sample.height()) * sample.width();
    for (int v = 0; v < views; ++v) {
        const double* map = scores.pixel_maps.data() + v * plane;
        const Tensor* mask =
            sample.sample_label ? &sample.masks[static_cast<size_t>(v)] : nullptr;
        for (int64_t p = 0; p < plane; ++p) {
            pools.pixel_scores.push_back(map[p]);
            pools.pixel_labels.push_back(mask && (*mask)[p] > 0.5 ? 1 : 0);
        }
        pools.view_scores.push_back(scores.view_scores[static_cast<size_t>(v)]);
        pools.view_labels.push_back(sample.view_labels[static_cast<size_t>(v)] ? 1 : 0);
    }
    pools.sample_scores.push_back(scores.sample_score);
    pools.sample_labels.push_back(sample.sample_label ? 1 : 0);
}

EvalReport report_from_pools(const PooledScores& pools) {
    EvalReport rep;
    rep.pixel_count = static_cast<int64_t>(pools.pixel_scores.size());
    rep.view_count = static_cast<int>(pools.view_scores.size());
    rep.sample_count = static_cast<int>(pools.sample_scores.size());
    auto level = [&](const std::vector<double>& s, const std::vector<uint8_t>& l,
                     const char* name, double& out, bool& valid) {
        try {
            out = auroc(s, l);
            valid = true;
        } catch (const SingleClass&) {
            out = 0.0;
            valid = false;
            rep.warnings.push_back(std::string(name) +
                                   ": only one class present, metric reported as n/a");
        }
    };
    level(pools.pixel_scores, pools.pixel_labels, "pixel", rep.p_auroc, rep.p_valid);
    level(pools.view_scores, pools.view_labels, "view", rep.v_auroc, rep.v_valid);
    level(pools.sample_scores, pools.sample_labels, "sample", rep.s_auroc, rep.s_valid);
    return rep;
}

namespace {

std::string fmt_metric(double v, bool valid) {
    if (!valid) return "n/a";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9f", v);
    return buf;
}

void run_indexed(int workers, int count, const std::function<void(int)>& fn) {
    if (workers <= 1 || count <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    const int n = std::min(workers, count);
    for (int w = 0; w < n; ++w)
        pool.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
        });
    for (auto& t : pool) t.join();
}

}  // namespace

std::string EvalReport::to_text() const {
    std::ostringstream out;
    out << "pixel_auroc: " << fmt_metric(p_auroc, p_valid) << "\n";
    out << "view_auroc: " << fmt_metric(v_auroc, v_valid) << "\n";
    out << "sample_auroc: " << fmt_metric(s_auroc, s_valid) << "\n";
    out << "pixels_evaluated: " << pixel_count << "\n";
    out << "views_evaluated: " << view_count << "\n";
    out << "samples_evaluated: " << sample_count << "\n";
    for (const auto& w : warnings) out << "warning: " << w << "\n";
    out << "config:\n";
    for (const auto& [k, v] : config_echo) out << "  " << k << ": " << v << "\n";
    return out.str();
}

std::string EvalReport::to_csv() const {
    std::ostringstream out;
    out << "key,value\n";
    out << "p_auroc," << fmt_metric(p_auroc, p_valid) << "\n";
    out << "v_auroc," << fmt_metric(v_auroc, v_valid) << "\n";
    out << "s_auroc," << fmt_metric(s_auroc, s_valid) << "\n";
    out << "pixels_evaluated," << pixel_count << "\n";
    out << "views_evaluated," << view_count << "\n";
    out << "samples_evaluated," << sample_count << "\n";
    for (const auto& [k, v] : config_echo) out << k << "," << v << "\n";
    return out.str();
}

EvalReport evaluate(const Dataset& dataset, const Denoiser& model,
                    const NoiseSchedule& schedule, const MemoryBank& bank,
                    const ScoreConfig& score_cfg, const InversionConfig& inv_cfg,
                    const EvalOptions& opts) {
    const auto& entries = dataset.test_entries();
    if (entries.empty()) throw MissingInput("evaluate: dataset has no test split");

    const int latent_side = dataset.scene().image_size / model.config().latent_factor;
    const auto plans =
        model.build_plans(dataset.graph(), dataset.calibration(), latent_side, latent_side);

    // level ids -> indices into the per-level feature list
    std::vector<size_t> level_index;
    for (int id : score_cfg.levels) {
        if (id < 1 || id > model.config().decoder_levels)
            throw LevelMismatch("evaluate: level " + std::to_string(id) +
                                " outside decoder range");
        level_index.push_back(static_cast<size_t>(id - 1));
    }

    struct PerSample {
        MultiViewSample sample;
        AnomalyScores scores;
        std::vector<FeatureMap> query_levels;
    };
    std::vector<PerSample> results(entries.size());

    run_indexed(opts.workers, static_cast<int>(entries.size()), [&](int i) {
        const auto& entry = entries[static_cast<size_t>(i)];
        MultiViewSample sample = dataset.load(entry);
        const LatentState z0 = encode_latent(sample, model.config().latent_factor);
        const InversionResult inv =
            ddim_invert(z0, inv_cfg, schedule, model, dataset.graph(), plans);
        std::vector<FeatureMap> query;
        query.reserve(level_index.size());
        for (size_t idx : level_index) query.push_back(inv.level_features[idx]);
        PerSample r;
        r.scores = score_sample(query, bank, score_cfg);
        r.sample = std::move(sample);
        if (opts.export_features) r.query_levels = std::move(query);
        results[static_cast<size_t>(i)] = std::move(r);
    });

    PooledScores pools;
    int64_t expected_pixels = 0;
    for (auto& r : results) {
        pool_sample(pools, r.scores, r.sample);
        expected_pixels += static_cast<int64_t>(r.sample.num_views()) * r.sample.height() *
                           r.sample.width();
    }
    if (static_cast<int64_t>(pools.pixel_scores.size()) != expected_pixels)
        throw Error("evaluate: pooled pixel count mismatch");

    if ((opts.export_maps || opts.export_features) && !opts.out_dir.empty()) {
        fs::create_directories(fs::path(opts.out_dir) / "maps");
        std::vector<std::pair<std::string, std::vector<FeatureMap>>> feature_dump;
        const int limit = std::min<int>(opts.export_limit, static_cast<int>(results.size()));
        for (int i = 0; i < limit; ++i) {
            const auto& r = results[static_cast<size_t>(i)];
            if (opts.export_maps) {
                const int64_t plane =
                    static_cast<int64_t>(r.sample.height()) * r.sample.width();
                for (int v = 0; v < r.sample.num_views(); ++v) {
                    Tensor map({r.sample.height(), r.sample.width()});
                    std::copy(r.scores.pixel_maps.data() + v * plane,
                              r.scores.pixel_maps.data() + (v + 1) * plane, map.data());
                    Tensor image({3, r.sample.height(), r.sample.width()});
                    std::copy(r.sample.views.data() + v * 3 * plane,
                              r.sample.views.data() + (v + 1) * 3 * plane, image.data());
                    const std::string prefix =
                        (fs::path(opts.out_dir) / "maps" /
                         (r.sample.sample_id + "_view" + std::to_string(v)))
                            .string();
                    export_anomaly_map(map, image, prefix);
                }
            }
            if (opts.export_features)
                feature_dump.emplace_back(r.sample.sample_id, r.query_levels);
        }
        if (opts.export_features)
            export_features_csv((fs::path(opts.out_dir) / "features.csv").string(),
                                feature_dump, score_cfg.levels);
    }

    return report_from_pools(pools);
}

void export_anomaly_map(const Tensor& map, const Tensor& image, const std::string& out_prefix) {
    if (map.rank() != 2 || image.rank() != 3 || image.dim(1) != map.dim(0) ||
        image.dim(2) != map.dim(1))
        throw ShapeMismatch("export_anomaly_map: map and image grids must match");
    write_pfm(out_prefix + ".pfm", map);

    double lo = map[0], hi = map[0];
    for (int64_t i = 1; i < map.numel(); ++i) {
        lo = std::min(lo, map[i]);
        hi = std::max(hi, map[i]);
    }
    const double range = hi - lo;
    const int64_t h = map.dim(0), w = map.dim(1), plane = h * w;
    Tensor overlay({3, h, w});
    for (int64_t p = 0; p < plane; ++p) {
        const double v = range > 0.0 ? (map[p] - lo) / range : 0.0;
        const double gray =
            (image[0 * plane + p] + image[1 * plane + p] + image[2 * plane + p]) / 3.0;
        overlay[0 * plane + p] = 0.5 * gray + 0.5 * v;           // heat ramps red
        overlay[1 * plane + p] = 0.5 * gray + 0.5 * 0.15 * v;
        overlay[2 * plane + p] = 0.5 * gray + 0.5 * (1.0 - v);   // cold stays blue
    }
    write_png(out_prefix + "_overlay.png", tensor_to_image(overlay));
}

void export_features_csv(
    const std::string& path,
    const std::vector<std::pair<std::string, std::vector<FeatureMap>>>& samples,
    const std::vector<int>& level_ids) {
    std::ofstream out(path);
    if (!out) throw IoFailure("cannot write feature csv: " + path);
    int64_t dim = 0;
    for (const auto& [id, levels] : samples)
        for (const auto& fm : levels) dim = std::max<int64_t>(dim, fm.channels());
    out << "sample,view,level,y,x";
    for (int64_t i = 0; i < dim; ++i) out << ",f" << i;
    out << "\n";
    out.precision(9);
    for (const auto& [id, levels] : samples) {
        for (size_t li = 0; li < levels.size(); ++li) {
            const FeatureMap& fm = levels[li];
            const int64_t c = fm.channels(), plane =
                static_cast<int64_t>(fm.height()) * fm.width();
            for (int v = 0; v < fm.views(); ++v) {
                const double* base = fm.data.data() + v * c * plane;
                for (int64_t y = 0; y < fm.height(); ++y)
                    for (int64_t x = 0; x < fm.width(); ++x) {
                        out << id << "," << v << "," << level_ids[li] << "," << y << "," << x;
                        const int64_t p = y * fm.width() + x;
                        for (int64_t ch = 0; ch < c; ++ch) out << "," << base[ch * plane + p];
                        for (int64_t ch = c; ch < dim; ++ch) out << ",";
                        out << "\n";
                    }
            }
        }
    }
    if (!out) throw IoFailure("failed writing feature csv: " + path);
}

}  // namespace viewalign
