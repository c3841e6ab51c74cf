#pragma once

// Conditional MeanFlow backbone: network, training objective and training loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <json.hpp>

#include "racmf/grid.hpp"
#include "racmf/nn.hpp"
#include "racmf/random.hpp"
#include "racmf/synth_data.hpp"

namespace racmf {

/// Interval endpoints with 0 <= r <= t <= 1.
struct TimePair {
    double r = 0.0;
    double t = 1.0;
    void validate() const;
};

struct BackboneConfig {
    int base_width = 32;
    int depth = 3;
    int embed_dim = 256;
    double lambda1 = 1.0;
    double r_equals_t_prob = 0.5;
    double learning_rate = 1e-4;
    int steps = 1000;
    int batch_size = 8;
    std::uint64_t seed = 0;
    /// Global gradient-norm clip; 0 disables.
    double grad_clip = 1.0;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static BackboneConfig from_json(const nlohmann::json& j);
};

struct JvpResult {
    Image u;
    Image du;  // directional derivative of u
};

/// u(x, x_A, r, t): a flow field with the image's shape.
class FlowModel {
public:
    virtual ~FlowModel() = default;
    virtual Image forward(const Image& x, const Image& x_A, double r, double t) const = 0;
    /// Derivative of u along the tangent (dx, dr = 0, dt).
    virtual JvpResult jvp(const Image& x, const Image& x_A, double r, double t, const Image& dx, double dt) const = 0;
};

/// Sinusoidal features of r and t (embed_dim/2 frequencies each, sin and cos)
/// followed by the scalar t - r. Frequencies are geometric from 1 to 1e-4
/// cycles per unit time.
std::vector<float> rt_features(double r, double t, int embed_dim);
/// d(rt_features)/dt at fixed r.
std::vector<float> rt_features_dt(double r, double t, int embed_dim);

/// U-Net over the channel stack [x_t, x_A] with residual blocks modulated by
/// the (r, t) embedding through per-channel scale and shift.
class ConditionalUNet final : public FlowModel {
public:
    explicit ConditionalUNet(const BackboneConfig& cfg);

    Image forward(const Image& x, const Image& x_A, double r, double t) const override;
    JvpResult jvp(const Image& x, const Image& x_A, double r, double t, const Image& dx, double dt) const override;

    /// c_emb for a valid time pair (length embed_dim).
    std::vector<float> rt_embed(double r, double t) const;

    /// Model body for any execution context: `input` is the 2-channel stack,
    /// `times` the rt_features vector. Returns the 1-channel flow field.
    template <class Ctx>
    typename Ctx::Value apply(Ctx& ctx, const typename Ctx::Value& input, const typename Ctx::Value& times) const;

    const BackboneConfig& config() const noexcept { return cfg_; }
    nn::ParamSet& params() noexcept { return params_; }
    const nn::ParamSet& params() const noexcept { return params_; }

private:
    struct ResBlock {
        nn::Conv2d conv1, conv2, skip;
        nn::Linear mod;
        bool has_skip = false;
    };
    ResBlock make_block(const std::string& name, int cin, int cout, Rng& rng);
    template <class Ctx>
    typename Ctx::Value block(Ctx& ctx, const ResBlock& b, const typename Ctx::Value& x,
                              const typename Ctx::Value& emb) const;
    void check_inputs(const Image& x, const Image& x_A, double r, double t) const;

    BackboneConfig cfg_;
    nn::ParamSet params_;
    nn::Linear emb1_, emb2_;
    nn::Conv2d in_conv_, out_conv_;
    std::vector<ResBlock> down_, up_;
    ResBlock mid_;
};

// ---- objective -------------------------------------------------------------

/// x_t = (1 - t) x_B + t e.
Image make_intermediate(const Image& x_B, const Image& e, double t);

struct TrainingSample {
    Image x_A, x_B, e, x_t, v;
    TimePair times;
};

TrainingSample make_training_sample(const Image& x_A, const Image& x_B, const Image& e, const TimePair& tp);

/// u* = v - (t - r) du/dt, with du/dt the JVP along (v, 0, 1). The result is
/// a constant w.r.t. the network parameters.
Image meanflow_target(const FlowModel& net, const Image& x_t, const Image& x_A, const TimePair& tp, const Image& v);

double mean_abs_diff(const Image& a, const Image& b, const char* what);
inline double meanflow_loss(const Image& u_pred, const Image& u_target) {
    return mean_abs_diff(u_pred, u_target, "meanflow_loss");
}
inline double image_loss(const Image& x0_hat, const Image& x_B) { return mean_abs_diff(x0_hat, x_B, "image_loss"); }

/// x0_hat = x_t - t u(x_t, x_A, 0, t).
Image reconstruct_one_step(const FlowModel& net, const Image& x_t, const Image& x_A, double t);

struct LossBreakdown {
    double total = 0.0;
    double mf = 0.0;
    double img = 0.0;
};

inline LossBreakdown combine_losses(double mf, double img, double lambda1) { return {mf + lambda1 * img, mf, img}; }

LossBreakdown base_loss(const TrainingSample& s, const FlowModel& net, const BackboneConfig& cfg);

/// Same value as base_loss for the U-Net, plus `weight * dL/dtheta` added into `grads`.
LossBreakdown base_loss_grad(const TrainingSample& s, const ConditionalUNet& net, const BackboneConfig& cfg,
                             std::vector<float>& grads, float weight);

TimePair sample_time_pair(Rng& rng, const BackboneConfig& cfg);

Image standard_normal_image(int rows, int cols, Rng& rng);

struct LossRecord {
    int step = 0;
    double total = 0.0;
    double mf = 0.0;
    double img = 0.0;
};

struct TrainBackboneResult {
    std::vector<LossRecord> history;
};

/// Adam on base_loss over the given pairs. Deterministic for a fixed seed.
/// `on_step` (optional) observes each record as it is produced.
TrainBackboneResult train_backbone(ConditionalUNet& net, const std::vector<const ImagePair*>& train,
                                   const BackboneConfig& cfg,
                                   const std::function<void(const LossRecord&)>& on_step = nullptr);

/// Mean one-step L_img of the network over pairs, at t = 1 from fixed noise.
double evaluate_image_loss(const FlowModel& net, const std::vector<const ImagePair*>& pairs, std::uint64_t seed);

void save_backbone(const ConditionalUNet& net, const std::filesystem::path& path, int step_count);
ConditionalUNet load_backbone(const std::filesystem::path& path);

}  // namespace racmf
