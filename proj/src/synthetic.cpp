#include "viewalign/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "viewalign/image_io.hpp"
#include "viewalign/json_util.hpp"

namespace fs = std::filesystem;

namespace viewalign {

using nlohmann::json;

void SceneConfig::validate() const {
    if (num_views < 2) throw Error("scene: need at least 2 views");
    if (image_size < 8) throw Error("scene: image_size too small");
    if (texture.octaves < 1) throw Error("scene: need at least one texture octave");
    if (defect.size_min < 0 || defect.size_max < defect.size_min)
        throw Error("scene: defect size range invalid");
    if (defect.contrast_min < 0 || defect.contrast_max < defect.contrast_min)
        throw Error("scene: defect contrast range invalid");
}

DefectType defect_type_from_string(const std::string& s) {
    if (s == "scratch") return DefectType::kScratch;
    if (s == "blob") return DefectType::kBlob;
    if (s == "missing_region") return DefectType::kMissingRegion;
    throw ConfigParseError("unknown defect type: " + s);
}

std::string defect_type_to_string(DefectType t) {
    switch (t) {
        case DefectType::kScratch: return "scratch";
        case DefectType::kBlob: return "blob";
        case DefectType::kMissingRegion: return "missing_region";
    }
    return "blob";
}

json scene_to_json(const SceneConfig& cfg) {
    json types = json::array();
    for (DefectType t : cfg.defect.types) types.push_back(defect_type_to_string(t));
    return json{
        {"num_views", cfg.num_views},
        {"image_size", cfg.image_size},
        {"rng_seed", cfg.rng_seed},
        {"texture",
         {{"octaves", cfg.texture.octaves},
          {"palette_seed", cfg.texture.palette_seed},
          {"base_cell", cfg.texture.base_cell},
          {"amp_decay", cfg.texture.amp_decay},
          {"noise_amp", cfg.texture.noise_amp},
          {"brightness_jitter", cfg.texture.brightness_jitter}}},
        {"camera",
         {{"rotation_deg", cfg.camera.rotation_deg},
          {"translation", cfg.camera.translation},
          {"scale_jitter", cfg.camera.scale_jitter},
          {"tilt", cfg.camera.tilt}}},
        {"defect",
         {{"types", types},
          {"size_min", cfg.defect.size_min},
          {"size_max", cfg.defect.size_max},
          {"contrast_min", cfg.defect.contrast_min},
          {"contrast_max", cfg.defect.contrast_max}}}};
}

SceneConfig scene_from_json(const json& j, const std::string& path) {
    SceneConfig cfg;
    JsonReader r(j, path);
    r.read("num_views", cfg.num_views);
    r.read("image_size", cfg.image_size);
    r.read("rng_seed", cfg.rng_seed);
    if (r.has("texture")) {
        JsonReader t(r.child("texture"), path + ".texture");
        t.read("octaves", cfg.texture.octaves);
        t.read("palette_seed", cfg.texture.palette_seed);
        t.read("base_cell", cfg.texture.base_cell);
        t.read("amp_decay", cfg.texture.amp_decay);
        t.read("noise_amp", cfg.texture.noise_amp);
        t.read("brightness_jitter", cfg.texture.brightness_jitter);
        t.finish();
    }
    if (r.has("camera")) {
        JsonReader c(r.child("camera"), path + ".camera");
        c.read("rotation_deg", cfg.camera.rotation_deg);
        c.read("translation", cfg.camera.translation);
        c.read("scale_jitter", cfg.camera.scale_jitter);
        c.read("tilt", cfg.camera.tilt);
        c.finish();
    }
    if (r.has("defect")) {
        JsonReader d(r.child("defect"), path + ".defect");
        std::vector<std::string> types;
        d.read("types", types);
        if (!types.empty()) {
            cfg.defect.types.clear();
            for (const auto& s : types) cfg.defect.types.push_back(defect_type_from_string(s));
        }
        d.read("size_min", cfg.defect.size_min);
        d.read("size_max", cfg.defect.size_max);
        d.read("contrast_min", cfg.defect.contrast_min);
        d.read("contrast_max", cfg.defect.contrast_max);
        d.finish();
    }
    r.finish();
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// rig
// ---------------------------------------------------------------------------

namespace {

using Mat3 = std::array<double, 9>;

Mat3 mat_mul(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
            r[i * 3 + j] = s;
        }
    return r;
}

Mat3 translation_mat(double tx, double ty) {
    return {1, 0, tx, 0, 1, ty, 0, 0, 1};
}

}  // namespace

CameraRig sample_rig(const SceneConfig& cfg) {
    Rng rng(Rng::mix(cfg.rng_seed, 0x726967));
    const double c = (cfg.image_size - 1) / 2.0;
    CameraRig rig;
    for (int v = 0; v < cfg.num_views; ++v) {
        const double rot = rng.uniform(-cfg.camera.rotation_deg, cfg.camera.rotation_deg) *
                           M_PI / 180.0;
        const double tx = rng.uniform(-cfg.camera.translation, cfg.camera.translation);
        const double ty = rng.uniform(-cfg.camera.translation, cfg.camera.translation);
        const double s = 1.0 + rng.uniform(-cfg.camera.scale_jitter, cfg.camera.scale_jitter);
        const double g = rng.uniform(-cfg.camera.tilt, cfg.camera.tilt);
        const double h = rng.uniform(-cfg.camera.tilt, cfg.camera.tilt);
        const Mat3 core = {s * std::cos(rot), -s * std::sin(rot), 0.0,
                           s * std::sin(rot), s * std::cos(rot),  0.0,
                           g,                 h,                  1.0};
        const Mat3 m = mat_mul(translation_mat(c + tx, c + ty),
                               mat_mul(core, translation_mat(-c, -c)));
        rig.view_from_canonical.push_back(make_homography(m, /*src=*/-1, /*dst=*/v));
    }
    return rig;
}

HomographySet CameraRig::pairwise() const {
    HomographySet set;
    const int m = static_cast<int>(view_from_canonical.size());
    for (int i = 0; i < m; ++i) {
        const Homography inv_i = invert_homography(view_from_canonical[static_cast<size_t>(i)]);
        for (int j = 0; j < m; ++j) {
            if (i == j) continue;
            Homography h = compose_homography(view_from_canonical[static_cast<size_t>(j)], inv_i);
            h.src_view = i;
            h.dst_view = j;
            set.set(h);
        }
    }
    return set;
}

// ---------------------------------------------------------------------------
// procedural texture
// ---------------------------------------------------------------------------

namespace {

double lattice_value(uint64_t seed, int64_t ix, int64_t iy, uint64_t salt) {
    const uint64_t h = Rng::mix(Rng::mix(seed ^ salt, static_cast<uint64_t>(ix)),
                                static_cast<uint64_t>(iy));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth01(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(uint64_t seed, uint64_t salt, Vec2 p, double cell) {
    const double gx = p.x / cell, gy = p.y / cell;
    const double fx = std::floor(gx), fy = std::floor(gy);
    const int64_t ix = static_cast<int64_t>(fx), iy = static_cast<int64_t>(fy);
    const double u = smooth01(gx - fx), v = smooth01(gy - fy);
    const double v00 = lattice_value(seed, ix, iy, salt);
    const double v01 = lattice_value(seed, ix + 1, iy, salt);
    const double v10 = lattice_value(seed, ix, iy + 1, salt);
    const double v11 = lattice_value(seed, ix + 1, iy + 1, salt);
    return (1 - v) * ((1 - u) * v00 + u * v01) + v * ((1 - u) * v10 + u * v11);
}

struct Rgb {
    double r = 0, g = 0, b = 0;
};

struct Palette {
    Rgb a0, a1, a2;

    Rgb at(double v) const {
        const double w0 = (1 - v) * (1 - v), w1 = 2 * v * (1 - v), w2 = v * v;
        return {w0 * a0.r + w1 * a1.r + w2 * a2.r, w0 * a0.g + w1 * a1.g + w2 * a2.g,
                w0 * a0.b + w1 * a1.b + w2 * a2.b};
    }
};

Palette make_palette(uint64_t palette_seed) {
    Rng rng(Rng::mix(palette_seed, 0x70616c));
    auto anchor = [&]() { return Rgb{rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75),
                                     rng.uniform(0.25, 0.75)}; };
    return Palette{anchor(), anchor(), anchor()};
}

struct DefectSpec {
    DefectType type = DefectType::kBlob;
    Vec2 center;
    double r1 = 0, r2 = 0, angle = 0;   // blob / missing region
    Vec2 dir{1, 0};
    double half_len = 0, width = 1;     // scratch
    double contrast = 0.1;
    double sign = 1.0;
    Rgb fill;
};

constexpr double kEdgeWidth = 1.4;  // soft-edge width, canonical px

// Support in [0,1]; the mask threshold sits at 0.5, i.e. on the shape border.
double defect_support(const DefectSpec& d, Vec2 q) {
    switch (d.type) {
        case DefectType::kBlob:
        case DefectType::kMissingRegion: {
            const double ca = std::cos(d.angle), sa = std::sin(d.angle);
            const double ux = ca * (q.x - d.center.x) + sa * (q.y - d.center.y);
            const double uy = -sa * (q.x - d.center.x) + ca * (q.y - d.center.y);
            const double dn = std::sqrt((ux / d.r1) * (ux / d.r1) + (uy / d.r2) * (uy / d.r2));
            const double dist = (dn - 1.0) * std::min(d.r1, d.r2);  // approx signed px
            return std::clamp(0.5 - dist / kEdgeWidth, 0.0, 1.0);
        }
        case DefectType::kScratch: {
            const Vec2 a{d.center.x - d.dir.x * d.half_len, d.center.y - d.dir.y * d.half_len};
            const Vec2 b{d.center.x + d.dir.x * d.half_len, d.center.y + d.dir.y * d.half_len};
            const double abx = b.x - a.x, aby = b.y - a.y;
            const double len2 = abx * abx + aby * aby;
            double t = len2 > 0 ? ((q.x - a.x) * abx + (q.y - a.y) * aby) / len2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            const double px = a.x + t * abx - q.x, py = a.y + t * aby - q.y;
            const double dist = std::sqrt(px * px + py * py) - d.width;
            return std::clamp(0.5 - dist / kEdgeWidth, 0.0, 1.0);
        }
    }
    return 0.0;
}

struct SampleContext {
    double brightness = 1.0;
    double noise_ox = 0.0, noise_oy = 0.0;
};

SampleContext make_sample_context(const SceneConfig& cfg, int64_t index) {
    Rng rng(Rng::mix(cfg.rng_seed, static_cast<uint64_t>(index) * 2 + 1));
    SampleContext ctx;
    ctx.brightness = 1.0 + rng.uniform(-cfg.texture.brightness_jitter,
                                       cfg.texture.brightness_jitter);
    ctx.noise_ox = rng.uniform(0.0, 4096.0);
    ctx.noise_oy = rng.uniform(0.0, 4096.0);
    return ctx;
}

Rgb canonical_color(const SceneConfig& cfg, const Palette& palette, const SampleContext& ctx,
                    Vec2 q, const DefectSpec* defect) {
    double field = 0.0, amp_total = 0.0, amp = 1.0;
    double cell = cfg.texture.base_cell;
    for (int o = 0; o < cfg.texture.octaves; ++o) {
        field += amp * value_noise(cfg.rng_seed, 0x746578 + static_cast<uint64_t>(o), q, cell);
        amp_total += amp;
        amp *= cfg.texture.amp_decay;
        cell *= 0.5;
    }
    field /= amp_total;
    Rgb c = palette.at(field);

    // low-amplitude per-sample variation, also canonical so it warps consistently
    const double n = value_noise(cfg.rng_seed, 0x736e, {q.x + ctx.noise_ox, q.y + ctx.noise_oy},
                                 6.0) *
                         2.0 -
                     1.0;
    const double b = ctx.brightness;
    c = {c.r * b + cfg.texture.noise_amp * n, c.g * b + cfg.texture.noise_amp * n,
         c.b * b + cfg.texture.noise_amp * n};

    if (defect) {
        const double s = defect_support(*defect, q);
        if (s > 0.0) {
            if (defect->type == DefectType::kMissingRegion) {
                c = {c.r + s * (defect->fill.r - c.r), c.g + s * (defect->fill.g - c.g),
                     c.b + s * (defect->fill.b - c.b)};
            } else {
                const double delta = defect->sign * defect->contrast * s;
                c = {c.r + delta, c.g + delta, c.b + delta};
            }
        }
    }
    c.r = std::clamp(c.r, 0.0, 1.0);
    c.g = std::clamp(c.g, 0.0, 1.0);
    c.b = std::clamp(c.b, 0.0, 1.0);
    return c;
}

std::string sample_name(int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "sample_%04lld", static_cast<long long>(index));
    return buf;
}

MultiViewSample render_sample(const SceneConfig& cfg, const CameraRig& rig, int64_t index,
                              const DefectSpec* defect) {
    const int m = cfg.num_views;
    const int s = cfg.image_size;
    const Palette palette = make_palette(cfg.texture.palette_seed);
    const SampleContext ctx = make_sample_context(cfg, index);

    MultiViewSample out;
    out.sample_id = sample_name(index);
    out.views = Tensor({m, 3, s, s});
    if (defect) out.masks.resize(static_cast<size_t>(m));
    out.view_labels.assign(static_cast<size_t>(m), false);

    const int64_t plane = static_cast<int64_t>(s) * s;
    for (int v = 0; v < m; ++v) {
        const Homography to_canonical =
            invert_homography(rig.view_from_canonical[static_cast<size_t>(v)]);
        Tensor mask = defect ? Tensor({s, s}) : Tensor();
        double* base = out.views.data() + static_cast<int64_t>(v) * 3 * plane;
        bool any = false;
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const Vec2 q = project_point(to_canonical,
                                             {static_cast<double>(x), static_cast<double>(y)});
                const Rgb c = canonical_color(cfg, palette, ctx, q, defect);
                // quantize exactly as the PNG writer will, so disk round-trips
                // reproduce in-memory pixels bit for bit
                const int64_t pos = static_cast<int64_t>(y) * s + x;
                base[0 * plane + pos] = std::lround(c.r * 255.0) / 255.0;
                base[1 * plane + pos] = std::lround(c.g * 255.0) / 255.0;
                base[2 * plane + pos] = std::lround(c.b * 255.0) / 255.0;
                if (defect) {
                    const bool hit = defect_support(*defect, q) >= 0.5;
                    mask.at(y, x) = hit ? 1.0 : 0.0;
                    any = any || hit;
                }
            }
        if (defect) {
            out.masks[static_cast<size_t>(v)] = std::move(mask);
            out.view_labels[static_cast<size_t>(v)] = any;
        }
    }
    out.sample_label = false;
    for (bool b : out.view_labels) out.sample_label = out.sample_label || b;
    if (defect && !out.sample_label) {
        // invisible everywhere; caller decides whether to retry
        out.masks.clear();
        out.view_labels.assign(static_cast<size_t>(m), false);
    }
    out.validate();
    return out;
}

}  // namespace

MultiViewSample generate_scene(const SceneConfig& cfg, const CameraRig& rig, int64_t index) {
    cfg.validate();
    return render_sample(cfg, rig, index, nullptr);
}

MultiViewSample inject_defect(const MultiViewSample& sample, const SceneConfig& cfg,
                              const CameraRig& rig, int64_t index) {
    if (sample.sample_label) throw Error("inject_defect: sample is already defective");
    if (cfg.defect.size_max <= 0.0 || cfg.defect.types.empty()) return sample;

    Rng rng(Rng::mix(cfg.rng_seed, static_cast<uint64_t>(index) * 2 + 2));
    const double s = cfg.image_size;
    for (int attempt = 0; attempt < 10; ++attempt) {
        DefectSpec d;
        d.type = cfg.defect.types[static_cast<size_t>(
            rng.below(static_cast<int64_t>(cfg.defect.types.size())))];
        d.center = {rng.uniform(0.30 * s, 0.70 * s), rng.uniform(0.30 * s, 0.70 * s)};
        d.r1 = rng.uniform(cfg.defect.size_min, cfg.defect.size_max);
        d.r2 = d.r1 * rng.uniform(0.6, 1.0);
        d.r1 = std::max(d.r1, 0.5);
        d.r2 = std::max(d.r2, 0.5);
        d.angle = rng.uniform(0.0, M_PI);
        const double theta = rng.uniform(0.0, M_PI);
        d.dir = {std::cos(theta), std::sin(theta)};
        d.half_len = rng.uniform(1.2, 2.2) * d.r1;
        d.width = rng.uniform(0.8, 1.6);
        d.contrast = rng.uniform(cfg.defect.contrast_min, cfg.defect.contrast_max);
        d.sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        const Palette palette = make_palette(cfg.texture.palette_seed ^ 0x66696c);
        d.fill = palette.at(rng.uniform());

        MultiViewSample out = render_sample(cfg, rig, index, &d);
        if (out.sample_label) return out;
    }
    throw DefectOutOfBounds("defect not visible in any view after 10 placements");
}

// ---------------------------------------------------------------------------
// dataset io
// ---------------------------------------------------------------------------

void generate_dataset(const DatasetSpec& spec, const std::string& out_path) {
    spec.scene.validate();
    if (spec.counts.train_normal < 1) throw Error("generate_dataset: need training samples");

    const CameraRig rig = sample_rig(spec.scene);
    const ViewGraph graph = build_view_graph(spec.scene.num_views, spec.topology);

    fs::create_directories(fs::path(out_path) / "train");
    fs::create_directories(fs::path(out_path) / "test");
    save_calibration((fs::path(out_path) / "calibration.txt").string(), rig.pairwise());

    json train_list = json::array(), test_list = json::array();
    int64_t index = 0;
    auto write_sample = [&](const MultiViewSample& sample, bool train_split) {
        const fs::path dir =
            fs::path(out_path) / (train_split ? "train" : "test") / sample.sample_id;
        fs::create_directories(dir);
        const int m = sample.num_views();
        const int64_t plane = static_cast<int64_t>(sample.height()) * sample.width();
        for (int v = 0; v < m; ++v) {
            Tensor view({3, sample.height(), sample.width()});
            std::copy(sample.views.data() + static_cast<int64_t>(v) * 3 * plane,
                      sample.views.data() + static_cast<int64_t>(v + 1) * 3 * plane,
                      view.data());
            write_png((dir / ("view_" + std::to_string(v) + ".png")).string(),
                      tensor_to_image(view));
            if (sample.sample_label)
                write_png((dir / ("mask_" + std::to_string(v) + ".png")).string(),
                          mask_to_image(sample.masks[static_cast<size_t>(v)]));
        }
        json entry{{"id", sample.sample_id}, {"defective", sample.sample_label}};
        (train_split ? train_list : test_list).push_back(entry);
    };

    for (int i = 0; i < spec.counts.train_normal; ++i, ++index)
        write_sample(generate_scene(spec.scene, rig, index), true);
    for (int i = 0; i < spec.counts.test_normal; ++i, ++index)
        write_sample(generate_scene(spec.scene, rig, index), false);
    for (int i = 0; i < spec.counts.test_defective; ++i, ++index) {
        MultiViewSample normal = generate_scene(spec.scene, rig, index);
        write_sample(inject_defect(normal, spec.scene, rig, index), false);
    }

    json manifest;
    manifest["format_version"] = 1;
    manifest["kind"] = "viewalign-dataset";
    manifest["topology"] = topology_to_string(spec.topology);
    manifest["scene"] = scene_to_json(spec.scene);
    manifest["counts"] = {{"train_normal", spec.counts.train_normal},
                          {"test_normal", spec.counts.test_normal},
                          {"test_defective", spec.counts.test_defective}};
    manifest["train"] = train_list;
    manifest["test"] = test_list;
    std::ofstream out(fs::path(out_path) / "manifest.json");
    if (!out) throw IoFailure("cannot write manifest in " + out_path);
    out << manifest.dump(2) << "\n";
    if (!out) throw IoFailure("failed writing manifest in " + out_path);
}

Dataset Dataset::open(const std::string& root) {
    const fs::path manifest_path = fs::path(root) / "manifest.json";
    if (!fs::exists(manifest_path))
        throw ManifestMissing("no manifest.json under " + root);
    std::ifstream in(manifest_path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const json manifest = parse_json_text(text, manifest_path.string());

    Dataset ds;
    ds.root_ = root;
    ds.scene_ = scene_from_json(manifest.at("scene"), "manifest.scene");
    ds.topology_ = topology_from_string(manifest.at("topology").get<std::string>());
    ds.graph_ = build_view_graph(ds.scene_.num_views, ds.topology_);
    ds.calibration_ =
        load_calibration((fs::path(root) / "calibration.txt").string(), ds.graph_);
    for (const auto& e : manifest.at("train"))
        ds.train_.push_back({e.at("id").get<std::string>(), e.at("defective").get<bool>(), true});
    for (const auto& e : manifest.at("test"))
        ds.test_.push_back({e.at("id").get<std::string>(), e.at("defective").get<bool>(), false});
    for (const auto& e : ds.train_)
        if (e.defective)
            throw MaskLabelMismatch("train split lists a defective sample: " + e.id);
    return ds;
}

Dataset load_dataset(const std::string& root) { return Dataset::open(root); }

std::string Dataset::sample_dir(const Entry& entry) const {
    return (fs::path(root_) / (entry.train_split ? "train" : "test") / entry.id).string();
}

MultiViewSample Dataset::load(const Entry& entry) const {
    const fs::path dir = sample_dir(entry);
    if (entry.train_split) {
        // the training contract: anomaly-free, so mask files are a corruption
        for (int v = 0; v < scene_.num_views; ++v)
            if (fs::exists(dir / ("mask_" + std::to_string(v) + ".png")))
                throw MaskLabelMismatch("train sample " + entry.id +
                                        " carries a mask; train split must be anomaly-free");
    }
    MultiViewSample sample = load_dir(dir.string(), entry.defective);
    if (sample.sample_label != entry.defective)
        throw MaskLabelMismatch("sample " + entry.id + ": manifest label disagrees with masks");
    return sample;
}

MultiViewSample Dataset::load_dir(const std::string& dir, bool expect_defective) const {
    const int m = scene_.num_views;
    MultiViewSample sample;
    sample.sample_id = fs::path(dir).filename().string();
    std::vector<Tensor> views;
    for (int v = 0; v < m; ++v) {
        const fs::path p = fs::path(dir) / ("view_" + std::to_string(v) + ".png");
        if (!fs::exists(p)) throw IoFailure("missing view image: " + p.string());
        views.push_back(image_to_tensor(read_png(p.string())));
    }
    const int64_t h = views[0].dim(1), w = views[0].dim(2);
    sample.views = Tensor({m, 3, h, w});
    for (int v = 0; v < m; ++v) {
        if (views[static_cast<size_t>(v)].dim(1) != h ||
            views[static_cast<size_t>(v)].dim(2) != w)
            throw IoFailure("inconsistent view sizes in " + dir);
        std::copy(views[static_cast<size_t>(v)].data(),
                  views[static_cast<size_t>(v)].data() + 3 * h * w,
                  sample.views.data() + static_cast<int64_t>(v) * 3 * h * w);
    }

    int masks_found = 0;
    for (int v = 0; v < m; ++v)
        if (fs::exists(fs::path(dir) / ("mask_" + std::to_string(v) + ".png"))) ++masks_found;
    if (expect_defective && masks_found != m)
        throw MaskLabelMismatch("sample " + sample.sample_id + ": expected " +
                                std::to_string(m) + " masks, found " +
                                std::to_string(masks_found));
    if (!expect_defective && masks_found != 0)
        throw MaskLabelMismatch("sample " + sample.sample_id +
                                ": normal sample must not carry masks");

    sample.view_labels.assign(static_cast<size_t>(m), false);
    if (masks_found == m) {
        sample.masks.resize(static_cast<size_t>(m));
        for (int v = 0; v < m; ++v) {
            const fs::path p = fs::path(dir) / ("mask_" + std::to_string(v) + ".png");
            Tensor mask = mask_from_image(read_png(p.string()));
            bool any = false;
            for (int64_t i = 0; i < mask.numel() && !any; ++i) any = mask[i] > 0.5;
            sample.view_labels[static_cast<size_t>(v)] = any;
            sample.masks[static_cast<size_t>(v)] = std::move(mask);
        }
    }
    sample.sample_label = false;
    for (bool b : sample.view_labels) sample.sample_label = sample.sample_label || b;
    sample.validate();
    return sample;
}

}  // namespace viewalign
