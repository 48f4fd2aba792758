#include "viewalign/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "viewalign/errors.hpp"

namespace viewalign {

// ---------------------------------------------------------------------------
// noise schedule
// ---------------------------------------------------------------------------

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear_beta") return ScheduleKind::kLinearBeta;
    if (s == "cosine") return ScheduleKind::kCosine;
    throw ConfigParseError("unknown schedule kind: " + s);
}

std::string schedule_kind_to_string(ScheduleKind k) {
    return k == ScheduleKind::kLinearBeta ? "linear_beta" : "cosine";
}

double NoiseSchedule::abar(int t) const {
    if (t == 0) return 1.0;
    if (t < 0 || t > total_steps)
        throw InvalidTimestepPair("timestep " + std::to_string(t) + " outside [0, T]");
    return alpha_bar[static_cast<size_t>(t - 1)];
}

NoiseSchedule make_schedule(int total_steps, ScheduleKind kind) {
    if (total_steps < 2) throw Error("make_schedule: need T >= 2");
    NoiseSchedule s;
    s.total_steps = total_steps;
    s.kind = kind;
    s.alpha_bar.resize(static_cast<size_t>(total_steps));
    if (kind == ScheduleKind::kLinearBeta) {
        const double beta_lo = 1e-4, beta_hi = 2e-2;
        double prod = 1.0;
        for (int t = 1; t <= total_steps; ++t) {
            const double beta =
                beta_lo + (beta_hi - beta_lo) * static_cast<double>(t - 1) / (total_steps - 1);
            prod *= 1.0 - beta;
            s.alpha_bar[static_cast<size_t>(t - 1)] = prod;
        }
    } else {
        // Squared-cosine profile, clipped; the clip can flatten the first few
        // entries, so strict decrease is restored afterwards.
        const double offs = 0.008;
        auto f = [&](double t) {
            const double v = std::cos((t + offs) / (1.0 + offs) * M_PI / 2.0);
            return v * v;
        };
        const double f0 = f(0.0);
        double prev = 1.0;
        for (int t = 1; t <= total_steps; ++t) {
            double v = f(static_cast<double>(t) / total_steps) / f0;
            v = std::clamp(v, 1e-5, 0.9999);
            if (v >= prev) v = prev * (1.0 - 1e-9);
            s.alpha_bar[static_cast<size_t>(t - 1)] = v;
            prev = v;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// latent codec
// ---------------------------------------------------------------------------

LatentState encode_latent(const Tensor& images, int factor) {
    if (images.rank() != 4) throw ShapeMismatch("encode_latent: expected [M,C,H,W]");
    const int64_t m = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    if (h % factor != 0 || w % factor != 0)
        throw IndivisibleDimensions("encode_latent: image sides must be divisible by " +
                                    std::to_string(factor));
    const int64_t f = factor, lh = h / f, lw = w / f, lc = c * f * f;
    LatentState out;
    out.timestep = 0;
    out.z.resolution_scale = 1.0 / factor;
    out.z.data = Tensor({m, lc, lh, lw});
    for (int64_t v = 0; v < m; ++v)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t dy = 0; dy < f; ++dy)
                for (int64_t dx = 0; dx < f; ++dx) {
                    const int64_t lci = (ci * f + dy) * f + dx;
                    for (int64_t y = 0; y < lh; ++y) {
                        const double* src =
                            images.data() + ((v * c + ci) * h + y * f + dy) * w + dx;
                        double* dst = out.z.data.data() + ((v * lc + lci) * lh + y) * lw;
                        for (int64_t x = 0; x < lw; ++x) dst[x] = src[x * f];
                    }
                }
    return out;
}

LatentState encode_latent(const MultiViewSample& sample, int factor) {
    return encode_latent(sample.views, factor);
}

Tensor decode_latent(const LatentState& state, int factor) {
    const Tensor& z = state.z.data;
    if (z.rank() != 4) throw ShapeMismatch("decode_latent: expected [M,C,H,W]");
    const int64_t m = z.dim(0), lc = z.dim(1), lh = z.dim(2), lw = z.dim(3);
    const int64_t f = factor;
    if (lc % (f * f) != 0)
        throw IndivisibleDimensions("decode_latent: channel count not divisible by factor^2");
    const int64_t c = lc / (f * f), h = lh * f, w = lw * f;
    Tensor out({m, c, h, w});
    for (int64_t v = 0; v < m; ++v)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t dy = 0; dy < f; ++dy)
                for (int64_t dx = 0; dx < f; ++dx) {
                    const int64_t lci = (ci * f + dy) * f + dx;
                    for (int64_t y = 0; y < lh; ++y) {
                        const double* src = z.data() + ((v * lc + lci) * lh + y) * lw;
                        double* dst = out.data() + ((v * c + ci) * h + y * f + dy) * w + dx;
                        for (int64_t x = 0; x < lw; ++x) dst[x * f] = src[x];
                    }
                }
    return out;
}

// ---------------------------------------------------------------------------
// diffusion math
// ---------------------------------------------------------------------------

LatentState forward_noise(const LatentState& z0, int t, const Tensor& eps,
                          const NoiseSchedule& schedule) {
    if (!z0.z.data.same_shape(eps)) throw ShapeMismatch("forward_noise: eps shape mismatch");
    if (t < 1 || t > schedule.total_steps)
        throw InvalidTimestepPair("forward_noise: t must lie in [1, T]");
    const double a = schedule.abar(t);
    const double sa = std::sqrt(a), sn = std::sqrt(1.0 - a);
    LatentState out = z0;
    out.timestep = t;
    const int64_t n = eps.numel();
    for (int64_t i = 0; i < n; ++i) out.z.data[i] = sa * z0.z.data[i] + sn * eps[i];
    return out;
}

double denoising_loss(const Tensor& eps, const Tensor& eps_hat) {
    if (!eps.same_shape(eps_hat)) throw ShapeMismatch("denoising_loss: shape mismatch");
    const int64_t n = eps.numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = eps[i] - eps_hat[i];
        s += d * d;
    }
    return s / static_cast<double>(n);
}

template <typename S>
void ddim_step_values(const S* z_t, const S* eps_hat, int64_t n, double abar_t,
                      double abar_next, S* out) {
    const S sa_t = static_cast<S>(std::sqrt(abar_t));
    const S sn_t = static_cast<S>(std::sqrt(1.0 - abar_t));
    const S sa_n = static_cast<S>(std::sqrt(abar_next));
    const S sn_n = static_cast<S>(std::sqrt(1.0 - abar_next));
    for (int64_t i = 0; i < n; ++i) {
        const S z0 = (z_t[i] - sn_t * eps_hat[i]) / sa_t;
        out[i] = sa_n * z0 + sn_n * eps_hat[i];
    }
}

template void ddim_step_values<double>(const double*, const double*, int64_t, double, double,
                                       double*);
template void ddim_step_values<float>(const float*, const float*, int64_t, double, double,
                                      float*);

LatentState ddim_step(const LatentState& z_t, const Tensor& eps_hat, int t, int t_next,
                      const NoiseSchedule& schedule) {
    if (t == t_next) throw InvalidTimestepPair("ddim_step: t_next must differ from t");
    if (t < 0 || t > schedule.total_steps || t_next < 0 || t_next > schedule.total_steps)
        throw InvalidTimestepPair("ddim_step: timesteps outside [0, T]");
    if (!z_t.z.data.same_shape(eps_hat)) throw ShapeMismatch("ddim_step: eps shape mismatch");
    LatentState out = z_t;
    out.timestep = t_next;
    ddim_step_values<double>(z_t.z.data.data(), eps_hat.data(), eps_hat.numel(),
                             schedule.abar(t), schedule.abar(t_next), out.z.data.data());
    return out;
}

// ---------------------------------------------------------------------------
// denoiser
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (decoder_levels < 2) throw Error("ModelConfig: need at least 2 decoder levels");
    if (encoder_levels != decoder_levels - 2)
        throw Error("ModelConfig: encoder_levels must equal decoder_levels - 2");
    if (base_width % norm_groups != 0)
        throw Error("ModelConfig: base_width must be divisible by norm_groups");
    if (base_width % 4 != 0)
        throw Error("ModelConfig: base_width must be divisible by 4 for the encoding");
    if (attention_dim <= 0 || temb_dim <= 0 || radius < 1 || se_ratio < 1 || latent_factor < 1)
        throw Error("ModelConfig: invalid hyperparameters");
}

namespace {

Tensor sinusoidal_embedding(int timestep, int dim) {
    Tensor out({1, dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        const double v = static_cast<double>(timestep) * freq;
        out[i] = std::sin(v);
        out[half + i] = std::cos(v);
    }
    return out;
}

}  // namespace

Denoiser::Denoiser(const ModelConfig& cfg, int latent_channels, uint64_t init_seed)
    : cfg_(cfg), latent_channels_(latent_channels) {
    cfg_.validate();
    Rng rng(init_seed);
    const int w = cfg_.base_width;
    const int l = cfg_.decoder_levels;

    temb_fc_ = LinearLayer::make(store_, "temb.fc", cfg_.temb_dim, cfg_.temb_dim, rng);
    stem_ = Conv2dLayer::make(store_, "stem", latent_channels, w, 3, rng);

    for (int k = 0; k < l - 1; ++k) {
        down_.push_back(Conv2dLayer::make(store_, "enc.down" + std::to_string(k), w, w, 3, rng,
                                          false, /*stride=*/2, /*pad=*/1));
        enc_blocks_.push_back(make_resblock("enc.block" + std::to_string(k), w, w, rng));
    }

    for (int li = 0; li < l; ++li) {
        const std::string base = "dec." + std::to_string(li + 1);
        if (li == 0) {
            dec_blocks_.push_back(make_resblock(base + ".block", w, w, rng));
        } else {
            up_conv_.push_back(Conv2dLayer::make(store_, base + ".up", w, w, 3, rng));
            dec_blocks_.push_back(make_resblock(base + ".block", 2 * w, w, rng));
        }
        AlignIds a;
        const double bound = 1.0 / std::sqrt(static_cast<double>(w));
        auto proj = [&](const std::string& nm) {
            Tensor t({cfg_.attention_dim, w});
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
            return store_.add(nm, std::move(t));
        };
        a.wq = proj(base + ".align.query");
        a.wk = proj(base + ".align.key");
        a.wv = proj(base + ".align.value");
        a.wo = store_.add(base + ".align.out", Tensor::zeros({w, cfg_.attention_dim}));
        align_.push_back(a);

        RefineIds r;
        r.conv1 = Conv2dLayer::make(store_, base + ".refine.conv1", w, w, 3, rng);
        r.conv2 = Conv2dLayer::make(store_, base + ".refine.conv2", w, w, 3, rng,
                                    /*zero_init=*/true);
        const int hidden = std::max(1, w / cfg_.se_ratio);
        r.fc1 = LinearLayer::make(store_, base + ".refine.fc1", w, hidden, rng);
        r.fc2 = LinearLayer::make(store_, base + ".refine.fc2", hidden, w, rng);
        refine_.push_back(r);
    }

    head_norm_ = GroupNormLayer::make(store_, "head.norm", w, cfg_.norm_groups);
    head_conv_ = Conv2dLayer::make(store_, "head.conv", w, latent_channels, 3, rng,
                                   /*zero_init=*/true);
}

Denoiser::ResBlockIds Denoiser::make_resblock(const std::string& name, int cin, int cout,
                                              Rng& rng) {
    ResBlockIds rb;
    rb.out_channels = cout;
    rb.gn1 = GroupNormLayer::make(store_, name + ".norm1", cin, cfg_.norm_groups);
    rb.conv1 = Conv2dLayer::make(store_, name + ".conv1", cin, cout, 3, rng);
    rb.temb = LinearLayer::make(store_, name + ".temb", cfg_.temb_dim, cout, rng);
    rb.gn2 = GroupNormLayer::make(store_, name + ".norm2", cout, cfg_.norm_groups);
    rb.conv2 = Conv2dLayer::make(store_, name + ".conv2", cout, cout, 3, rng);
    if (cin != cout) {
        rb.skip = Conv2dLayer::make(store_, name + ".skip", cin, cout, 1, rng, false, 1, 0);
        rb.has_skip = true;
    }
    return rb;
}

Var Denoiser::resblock_forward(Tape& tape, const std::vector<Var>& p, const ResBlockIds& rb,
                               Var x, Var temb) const {
    Var h = rb.gn1.forward(tape, p, x);
    h = tape.silu(h);
    h = rb.conv1.forward(tape, p, h);
    Var tb = rb.temb.forward(tape, p, temb);                 // [1, cout]
    tb = tape.reshape(tb, {static_cast<int64_t>(rb.out_channels)});
    h = tape.bias_add(h, tb);
    h = rb.gn2.forward(tape, p, h);
    h = tape.silu(h);
    h = rb.conv2.forward(tape, p, h);
    const Var skip = rb.has_skip ? rb.skip.forward(tape, p, x) : x;
    return tape.add(skip, h);
}

int Denoiser::level_grid(int level, int latent_side) const {
    return latent_side >> (cfg_.decoder_levels - level);
}

double Denoiser::level_scale(int level) const {
    return std::pow(2.0, level - cfg_.decoder_levels) / cfg_.latent_factor;
}

std::vector<AlignPlan> Denoiser::build_plans(const ViewGraph& graph,
                                             const HomographySet& image_homs, int latent_h,
                                             int latent_w) const {
    std::vector<AlignPlan> plans;
    plans.reserve(static_cast<size_t>(cfg_.decoder_levels));
    AlignConfig acfg;
    acfg.radius = cfg_.radius;
    acfg.include_self = cfg_.include_self;
    PosEncodingConfig pe;
    pe.dim = cfg_.base_width;
    for (int level = 1; level <= cfg_.decoder_levels; ++level) {
        const int gh = level_grid(level, latent_h);
        const int gw = level_grid(level, latent_w);
        if (gh < 1 || gw < 1)
            throw ShapeMismatch("latent grid too small for the configured decoder depth");
        const HomographySet scaled = image_homs.rescaled(level_scale(level));
        plans.push_back(build_align_plan(graph, scaled, gh, gw, pe, acfg));
    }
    return plans;
}

Denoiser::Forward Denoiser::forward(Tape& tape, const std::vector<Var>& p, const Tensor& z,
                                    int timestep, const std::vector<AlignPlan>& plans) const {
    if (z.rank() != 4 || z.dim(1) != latent_channels_)
        throw ShapeMismatch("denoiser forward: expected [M, Cz, h, w] latents");
    if (static_cast<int>(plans.size()) != cfg_.decoder_levels)
        throw ShapeMismatch("denoiser forward: one alignment plan per decoder level required");
    const int views = static_cast<int>(z.dim(0));
    const int64_t cz = z.dim(1), h = z.dim(2), w = z.dim(3);
    const int64_t stride = cz * h * w;
    const int l = cfg_.decoder_levels;

    Var temb = tape.constant(sinusoidal_embedding(timestep, cfg_.temb_dim));
    temb = temb_fc_.forward(tape, p, temb);
    temb = tape.silu(temb);

    // Per-view encoder; skip features are kept per grid for the decoder.
    std::vector<Var> xs(static_cast<size_t>(views));
    std::vector<std::vector<Var>> skips(static_cast<size_t>(views));
    for (int v = 0; v < views; ++v) {
        Tensor zi({cz, h, w});
        std::copy(z.data() + v * stride, z.data() + (v + 1) * stride, zi.data());
        Var x = stem_.forward(tape, p, tape.constant(std::move(zi)));
        skips[static_cast<size_t>(v)].push_back(x);
        for (int k = 0; k < l - 1; ++k) {
            x = down_[static_cast<size_t>(k)].forward(tape, p, x);
            x = resblock_forward(tape, p, enc_blocks_[static_cast<size_t>(k)], x, temb);
            if (k < l - 2) skips[static_cast<size_t>(v)].push_back(x);
        }
        xs[static_cast<size_t>(v)] = x;
    }

    Forward out;
    out.level_features.resize(static_cast<size_t>(l));
    for (int level = 1; level <= l; ++level) {
        std::vector<Var> ys(static_cast<size_t>(views));
        for (int v = 0; v < views; ++v) {
            Var y;
            if (level == 1) {
                y = xs[static_cast<size_t>(v)];
            } else {
                y = tape.upsample_nearest2x(xs[static_cast<size_t>(v)]);
                y = up_conv_[static_cast<size_t>(level - 2)].forward(tape, p, y);
                const Var skip = skips[static_cast<size_t>(v)][static_cast<size_t>(l - level)];
                y = tape.concat_channels(y, skip);
            }
            ys[static_cast<size_t>(v)] =
                resblock_forward(tape, p, dec_blocks_[static_cast<size_t>(level - 1)], y, temb);
        }
        if (cfg_.align_enabled) {
            const AlignIds& a = align_[static_cast<size_t>(level - 1)];
            ys = cross_view_align(tape, ys, plans[static_cast<size_t>(level - 1)],
                                  p[static_cast<size_t>(a.wq)], p[static_cast<size_t>(a.wk)],
                                  p[static_cast<size_t>(a.wv)], p[static_cast<size_t>(a.wo)]);
        }
        if (cfg_.refine_enabled) {
            const RefineIds& r = refine_[static_cast<size_t>(level - 1)];
            for (int v = 0; v < views; ++v) {
                ys[static_cast<size_t>(v)] = refiner_forward(
                    tape, ys[static_cast<size_t>(v)], p[static_cast<size_t>(r.conv1.w)],
                    p[static_cast<size_t>(r.conv1.b)], p[static_cast<size_t>(r.conv2.w)],
                    p[static_cast<size_t>(r.conv2.b)], p[static_cast<size_t>(r.fc1.w)],
                    p[static_cast<size_t>(r.fc1.b)], p[static_cast<size_t>(r.fc2.w)],
                    p[static_cast<size_t>(r.fc2.b)]);
            }
        }
        out.level_features[static_cast<size_t>(level - 1)] = ys;
        xs = ys;
    }

    out.eps_views.resize(static_cast<size_t>(views));
    for (int v = 0; v < views; ++v) {
        Var y = head_norm_.forward(tape, p, xs[static_cast<size_t>(v)]);
        y = tape.silu(y);
        out.eps_views[static_cast<size_t>(v)] = head_conv_.forward(tape, p, y);
    }
    return out;
}

PredictResult predict_noise(const LatentState& z_t, int timestep, const ViewGraph& graph,
                            const HomographySet& image_homs, const Denoiser& model) {
    const Tensor& z = z_t.z.data;
    const int latent_h = static_cast<int>(z.dim(2));
    const int latent_w = static_cast<int>(z.dim(3));
    const auto plans = model.build_plans(graph, image_homs, latent_h, latent_w);

    Tape tape(/*grad_enabled=*/false);
    const auto bound = model.params().bind(tape);
    const auto fwd = model.forward(tape, bound, z, timestep, plans);

    PredictResult out;
    out.eps_hat = Tensor(z.shape());
    const int64_t stride = z.dim(1) * z.dim(2) * z.dim(3);
    for (int v = 0; v < static_cast<int>(z.dim(0)); ++v) {
        const Tensor& ev = tape.val(fwd.eps_views[static_cast<size_t>(v)]);
        std::copy(ev.data(), ev.data() + stride, out.eps_hat.data() + v * stride);
    }
    out.level_features.resize(fwd.level_features.size());
    for (size_t level = 0; level < fwd.level_features.size(); ++level) {
        const auto& views = fwd.level_features[level];
        const Tensor& first = tape.val(views[0]);
        FeatureMap fm;
        fm.resolution_scale = model.level_scale(static_cast<int>(level) + 1);
        fm.data = Tensor({static_cast<int64_t>(views.size()), first.dim(0), first.dim(1),
                          first.dim(2)});
        const int64_t fstride = first.numel();
        for (size_t v = 0; v < views.size(); ++v) {
            const Tensor& t = tape.val(views[v]);
            std::copy(t.data(), t.data() + fstride,
                      fm.data.data() + static_cast<int64_t>(v) * fstride);
        }
        out.level_features[level] = std::move(fm);
    }
    return out;
}

// ---------------------------------------------------------------------------
// inversion
// ---------------------------------------------------------------------------

InversionResult ddim_invert(const LatentState& z0, const InversionConfig& inv,
                            const NoiseSchedule& schedule, const Denoiser& model,
                            const ViewGraph& graph, const std::vector<AlignPlan>& plans) {
    if (inv.steps < 1) throw Error("ddim_invert: need at least one step");
    if (inv.t_extract < inv.steps || inv.t_extract > schedule.total_steps)
        throw Error("ddim_invert: t_extract must lie in [steps, T]");

    std::vector<int> grid(static_cast<size_t>(inv.steps) + 1);
    for (int k = 0; k <= inv.steps; ++k)
        grid[static_cast<size_t>(k)] = static_cast<int>(
            std::llround(static_cast<double>(k) * inv.t_extract / inv.steps));

    InversionResult out;
    out.trajectory.push_back(z0);
    LatentState z = z0;
    for (int k = 0; k < inv.steps; ++k) {
        Tape tape(/*grad_enabled=*/false);
        const auto bound = model.params().bind(tape);
        const auto fwd = model.forward(tape, bound, z.z.data, grid[static_cast<size_t>(k)],
                                       plans);
        Tensor eps_hat(z.z.data.shape());
        const int64_t stride = z.z.data.dim(1) * z.z.data.dim(2) * z.z.data.dim(3);
        for (int v = 0; v < static_cast<int>(z.z.data.dim(0)); ++v) {
            const Tensor& ev = tape.val(fwd.eps_views[static_cast<size_t>(v)]);
            std::copy(ev.data(), ev.data() + stride, eps_hat.data() + v * stride);
        }
        if (k == inv.steps - 1) {
            // Features for detection come from the final prediction on the way up.
            out.level_features.resize(fwd.level_features.size());
            for (size_t level = 0; level < fwd.level_features.size(); ++level) {
                const auto& views = fwd.level_features[level];
                const Tensor& first = tape.val(views[0]);
                FeatureMap fm;
                fm.resolution_scale = model.level_scale(static_cast<int>(level) + 1);
                fm.data = Tensor({static_cast<int64_t>(views.size()), first.dim(0),
                                  first.dim(1), first.dim(2)});
                const int64_t fstride = first.numel();
                for (size_t v = 0; v < views.size(); ++v) {
                    const Tensor& t = tape.val(views[v]);
                    std::copy(t.data(), t.data() + fstride,
                              fm.data.data() + static_cast<int64_t>(v) * fstride);
                }
                out.level_features[level] = std::move(fm);
            }
        }
        z = ddim_step(z, eps_hat, grid[static_cast<size_t>(k)], grid[static_cast<size_t>(k) + 1],
                      schedule);
        out.trajectory.push_back(z);
    }
    return out;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

struct AdamW {
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay;
    std::vector<Tensor> m, v;
    int64_t t = 0;

    AdamW(ParamStore& store, double lr_, double wd) : lr(lr_), weight_decay(wd) {
        m.reserve(store.count());
        v.reserve(store.count());
        for (size_t i = 0; i < store.count(); ++i) {
            m.push_back(Tensor::zeros(store.value(static_cast<ParamId>(i)).shape()));
            v.push_back(Tensor::zeros(store.value(static_cast<ParamId>(i)).shape()));
        }
    }

    void step(ParamStore& store, const std::vector<Tensor>& grads) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < store.count(); ++i) {
            Tensor& p = store.value(static_cast<ParamId>(i));
            const Tensor& g = grads[i];
            Tensor& mi = m[i];
            Tensor& vi = v[i];
            const int64_t n = p.numel();
            for (int64_t j = 0; j < n; ++j) {
                mi[j] = beta1 * mi[j] + (1.0 - beta1) * g[j];
                vi[j] = beta2 * vi[j] + (1.0 - beta2) * g[j] * g[j];
                const double mhat = mi[j] / bc1;
                const double vhat = vi[j] / bc2;
                p[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[j]);
            }
        }
    }
};

}  // namespace

TrainResult train(const std::vector<MultiViewSample>& samples, const ViewGraph& graph,
                  const HomographySet& image_homs, const NoiseSchedule& schedule,
                  const TrainConfig& cfg, Denoiser& model,
                  const std::function<void(const LossRecord&)>& on_step) {
    if (samples.empty()) throw Error("train: empty dataset");
    if (cfg.lambda < 0.0 || cfg.learning_rate <= 0.0)
        throw Error("train: invalid lambda or learning rate");
    for (const auto& s : samples)
        if (s.sample_label)
            throw Error("train: training set must contain only anomaly-free samples");

    const int factor = model.config().latent_factor;
    std::vector<Tensor> latents;
    latents.reserve(samples.size());
    for (const auto& s : samples) latents.push_back(encode_latent(s, factor).z.data);
    const int latent_h = static_cast<int>(latents[0].dim(2));
    const int latent_w = static_cast<int>(latents[0].dim(3));
    const int64_t sample_numel = latents[0].numel();
    for (const auto& l : latents)
        if (l.numel() != sample_numel) throw ShapeMismatch("train: inconsistent sample shapes");

    const auto plans = model.build_plans(graph, image_homs, latent_h, latent_w);

    Rng rng(cfg.rng_seed);
    AdamW opt(model.params(), cfg.learning_rate, cfg.weight_decay);
    TrainResult result;

    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    int global_step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        // Fisher-Yates with the training stream.
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(rng.below(static_cast<int64_t>(i)));
            std::swap(order[i - 1], order[j]);
        }
        double ep_ld = 0.0, ep_lr = 0.0;
        int ep_steps = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            const size_t bsz = end - start;

            // Draw every sample's timestep and noise before any compute so the
            // stream does not depend on evaluation order.
            std::vector<int> ts(bsz);
            std::vector<Tensor> noises(bsz);
            for (size_t b = 0; b < bsz; ++b) {
                ts[b] = 1 + static_cast<int>(rng.below(schedule.total_steps));
                Tensor eps(latents[order[start + b]].shape());
                for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = rng.normal();
                noises[b] = std::move(eps);
            }

            std::vector<Tensor> grad_acc;
            grad_acc.reserve(model.params().count());
            for (size_t i = 0; i < model.params().count(); ++i)
                grad_acc.push_back(Tensor::zeros(
                    model.params().value(static_cast<ParamId>(i)).shape()));

            double ld_sum = 0.0, lr_sum = 0.0;
            for (size_t b = 0; b < bsz; ++b) {
                const Tensor& z0 = latents[order[start + b]];
                const int t = ts[b];
                Tensor z_t(z0.shape());
                const double a = schedule.abar(t);
                const double sa = std::sqrt(a), sn = std::sqrt(1.0 - a);
                for (int64_t i = 0; i < z0.numel(); ++i)
                    z_t[i] = sa * z0[i] + sn * noises[b][i];

                Tape tape(/*grad_enabled=*/true);
                const auto bound = model.params().bind(tape);
                const auto fwd = model.forward(tape, bound, z_t, t, plans);

                // L_d: mean squared error over every element of the sample.
                const int views = static_cast<int>(z0.dim(0));
                const int64_t vstride = z0.dim(1) * z0.dim(2) * z0.dim(3);
                Var ld{};
                for (int v = 0; v < views; ++v) {
                    Tensor ev({z0.dim(1), z0.dim(2), z0.dim(3)});
                    std::copy(noises[b].data() + v * vstride,
                              noises[b].data() + (v + 1) * vstride, ev.data());
                    const Var diff = tape.sub(fwd.eps_views[static_cast<size_t>(v)],
                                              tape.constant(std::move(ev)));
                    const Var ss = tape.sum_sq(diff);
                    ld = ld.valid() ? tape.add(ld, ss) : ss;
                }
                ld = tape.scale(ld, 1.0 / static_cast<double>(sample_numel));
                const Var lr_var = refinement_loss_var(tape, fwd.level_features, graph);
                const Var loss = tape.add(ld, tape.scale(lr_var, cfg.lambda));
                tape.backward(loss);

                ld_sum += tape.val(ld)[0];
                lr_sum += tape.val(lr_var)[0];
                for (size_t i = 0; i < bound.size(); ++i) {
                    const Tensor g = tape.grad_of(bound[i]);
                    Tensor& acc = grad_acc[i];
                    for (int64_t j = 0; j < g.numel(); ++j) acc[j] += g[j];
                }
            }

            const double inv_b = 1.0 / static_cast<double>(bsz);
            for (auto& g : grad_acc)
                for (int64_t j = 0; j < g.numel(); ++j) g[j] *= inv_b;
            const double ld_mean = ld_sum * inv_b;
            const double lr_mean = lr_sum * inv_b;
            const double total = ld_mean + cfg.lambda * lr_mean;
            if (!std::isfinite(total)) {
                std::ostringstream oss;
                oss << "non-finite loss at step " << global_step << " (t =";
                for (int t : ts) oss << " " << t;
                oss << "): l_d = " << ld_mean << ", l_r = " << lr_mean;
                throw NonFiniteLoss(oss.str());
            }

            opt.step(model.params(), grad_acc);

            ++global_step;
            LossRecord rec{epoch, global_step, ld_mean, lr_mean, total};
            result.steps.push_back(rec);
            if (on_step) on_step(rec);
            ep_ld += ld_mean;
            ep_lr += lr_mean;
            ++ep_steps;
        }
        LossRecord mean_rec{epoch, ep_steps, ep_ld / ep_steps, ep_lr / ep_steps,
                            ep_ld / ep_steps + cfg.lambda * ep_lr / ep_steps};
        result.epoch_means.push_back(mean_rec);
    }
    return result;
}

}  // namespace viewalign
