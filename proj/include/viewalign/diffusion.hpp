#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "viewalign/alignment.hpp"
#include "viewalign/data.hpp"
#include "viewalign/geometry.hpp"
#include "viewalign/nn.hpp"
#include "viewalign/refiner.hpp"
#include "viewalign/rng.hpp"

namespace viewalign {

// ---------------------------------------------------------------------------
// noise schedule
// ---------------------------------------------------------------------------

enum class ScheduleKind { kLinearBeta, kCosine };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string schedule_kind_to_string(ScheduleKind k);

struct NoiseSchedule {
    int total_steps = 0;            // T
    ScheduleKind kind = ScheduleKind::kLinearBeta;
    std::vector<double> alpha_bar;  // index t-1 holds the coefficient for step t

    // Signal coefficient at step t, with step 0 defined as fully clean.
    double abar(int t) const;
};

NoiseSchedule make_schedule(int total_steps, ScheduleKind kind);

// ---------------------------------------------------------------------------
// latent codec
// ---------------------------------------------------------------------------

// Multi-view latent stack plus the diffusion step it sits at (0 = clean).
struct LatentState {
    FeatureMap z;      // [M, C*f*f, H/f, W/f], resolution_scale = 1/f
    int timestep = 0;
};

// Deterministic space-to-depth by `factor`: channels grow by factor^2, sides
// shrink by factor. Exactly invertible, and pixel (y, x) of the image maps to
// latent cell (y/f, x/f) so image-resolution homographies stay meaningful on
// the latent grid.
LatentState encode_latent(const Tensor& images, int factor = 4);  // [M,3,H,W]
LatentState encode_latent(const MultiViewSample& sample, int factor = 4);
Tensor decode_latent(const LatentState& state, int factor = 4);

// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps.
LatentState forward_noise(const LatentState& z0, int t, const Tensor& eps,
                          const NoiseSchedule& schedule);

// Mean squared error over all elements.
double denoising_loss(const Tensor& eps, const Tensor& eps_hat);

// Deterministic update between two arbitrary steps of the schedule; running
// t_next > t is inversion. Shapes follow z_t.
LatentState ddim_step(const LatentState& z_t, const Tensor& eps_hat, int t, int t_next,
                      const NoiseSchedule& schedule);

// Scalar-type version backing ddim_step; float instantiation exists so the
// single-precision inverse-pair contract is testable directly.
template <typename S>
void ddim_step_values(const S* z_t, const S* eps_hat, int64_t n, double abar_t,
                      double abar_next, S* out);

// ---------------------------------------------------------------------------
// denoiser
// ---------------------------------------------------------------------------

struct ModelConfig {
    int latent_factor = 4;
    int base_width = 32;
    int encoder_levels = 2;   // intermediate-resolution encoder stages
    int decoder_levels = 4;   // level l runs at 2^(l - decoder_levels) of latent
    int temb_dim = 64;
    int norm_groups = 8;
    int attention_dim = 32;
    int se_ratio = 4;
    int radius = 3;
    bool include_self = true;
    bool align_enabled = true;    // cross-view attention on/off (runtime switch)
    bool refine_enabled = true;   // refiner on/off (runtime switch)

    void validate() const;
};

// Encoder-decoder noise predictor with cross-view alignment and refinement
// embedded in every decoder level. One instance owns its parameters.
class Denoiser {
public:
    Denoiser(const ModelConfig& cfg, int latent_channels, uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    int latent_channels() const { return latent_channels_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    // Inference-time override of the candidate window size; parameters are
    // untouched, only plan building changes.
    void set_radius(int radius) { cfg_.radius = radius; }

    // Grid side length of decoder level l (1-based) for a given latent side.
    int level_grid(int level, int latent_side) const;
    // Feature-map scale of level l relative to the image pixel grid.
    double level_scale(int level) const;

    // Candidate plans for every decoder level; geometry-dependent only, so
    // callers cache this per dataset.
    std::vector<AlignPlan> build_plans(const ViewGraph& graph, const HomographySet& image_homs,
                                       int latent_h, int latent_w) const;

    struct Forward {
        std::vector<Var> eps_views;                    // per view [Cz, h, w]
        std::vector<std::vector<Var>> level_features;  // [decoder_levels][views]
    };

    // Joint forward over all views of one sample. `z` is [M, Cz, h, w].
    Forward forward(Tape& tape, const std::vector<Var>& bound, const Tensor& z, int timestep,
                    const std::vector<AlignPlan>& plans) const;

private:
    struct ResBlockIds {
        GroupNormLayer gn1, gn2;
        Conv2dLayer conv1, conv2;
        LinearLayer temb;
        Conv2dLayer skip;  // 1x1, only when channel counts differ
        bool has_skip = false;
        int out_channels = 0;
    };
    struct AlignIds {
        ParamId wq = -1, wk = -1, wv = -1, wo = -1;
    };
    struct RefineIds {
        Conv2dLayer conv1, conv2;
        LinearLayer fc1, fc2;
    };

    ResBlockIds make_resblock(const std::string& name, int cin, int cout, Rng& rng);
    Var resblock_forward(Tape& tape, const std::vector<Var>& p, const ResBlockIds& rb, Var x,
                         Var temb) const;

    ModelConfig cfg_;
    int latent_channels_ = 0;
    ParamStore store_;

    LinearLayer temb_fc_;
    Conv2dLayer stem_;
    std::vector<Conv2dLayer> down_;          // decoder_levels-1 stride-2 convs
    std::vector<ResBlockIds> enc_blocks_;    // encoder_levels + 1 (bottleneck)
    std::vector<ResBlockIds> dec_blocks_;    // per decoder level
    std::vector<Conv2dLayer> up_conv_;       // after nearest-2x, per level > 1
    std::vector<AlignIds> align_;            // per decoder level
    std::vector<RefineIds> refine_;          // per decoder level
    GroupNormLayer head_norm_;
    Conv2dLayer head_conv_;
};

// Value-level prediction for one latent state; plans built internally.
struct PredictResult {
    Tensor eps_hat;                          // [M, Cz, h, w]
    std::vector<FeatureMap> level_features;  // per decoder level
};

PredictResult predict_noise(const LatentState& z_t, int timestep, const ViewGraph& graph,
                            const HomographySet& image_homs, const Denoiser& model);

// ---------------------------------------------------------------------------
// inversion
// ---------------------------------------------------------------------------

struct InversionConfig {
    int steps = 10;
    int t_extract = 250;  // inversion target step; features come from the
                          // final prediction made on the way up
};

struct InversionResult {
    std::vector<LatentState> trajectory;     // z at every grid step, clean first
    std::vector<FeatureMap> level_features;  // recorded at the last prediction
};

InversionResult ddim_invert(const LatentState& z0, const InversionConfig& inv,
                            const NoiseSchedule& schedule, const Denoiser& model,
                            const ViewGraph& graph, const std::vector<AlignPlan>& plans);

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 10;
    int batch_size = 4;           // in samples; every sample carries all views
    double learning_rate = 1e-4;
    double weight_decay = 1e-2;
    double lambda = 0.1;          // refinement-loss weight
    uint64_t rng_seed = 0;
};

struct LossRecord {
    int epoch = 0;
    int step = 0;
    double l_d = 0.0;
    double l_r = 0.0;
    double l_total = 0.0;
};

struct TrainResult {
    std::vector<LossRecord> steps;
    std::vector<LossRecord> epoch_means;
};

// Denoising + consistency training over normal samples. Deterministic for a
// fixed seed; per-step records go to `on_step` when provided.
TrainResult train(const std::vector<MultiViewSample>& samples, const ViewGraph& graph,
                  const HomographySet& image_homs, const NoiseSchedule& schedule,
                  const TrainConfig& cfg, Denoiser& model,
                  const std::function<void(const LossRecord&)>& on_step = {});

}  // namespace viewalign
