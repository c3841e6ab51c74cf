#pragma once

// Actor-critic refinement controller: state features, policy heads, action
// sampling and log-probabilities.

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "racmf/nn.hpp"
#include "racmf/random.hpp"
#include "racmf/rollout.hpp"

namespace racmf {

constexpr int kStateChannels = 7;
constexpr double kProbClamp = 1e-6;

/// Channels: x_A, x_k, x_k - x_A, u, body mask, k/K, |x_coarse - x_k|.
nn::Tensor extract_state_features(const Image& x_A, const Image& x_k, const Image& x_coarse, const Image& u,
                                  const Mask& body_mask, int k, int K);

struct ControllerConfig {
    int feature_width = 32;
    int b_max = 64;
    int m_max = 3;
    double entropy_coef = 0.01;
    double value_coef = 0.5;
    std::uint64_t seed = 0;
    /// Initial bias of the stop logit (negative: start out rarely stopping).
    double stop_bias = -3.0;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static ControllerConfig from_json(const nlohmann::json& j);
};

struct ActionDistribution {
    int n_rows = 0, n_cols = 0, m_max = 0, b_max = 0;
    std::vector<double> select_prob;    // per tile, clamped to [1e-6, 1 - 1e-6]
    std::vector<double> budget_logits;  // per tile, m_max + 1 each
    std::vector<double> global_logits;  // b_max + 1
    double stop_prob = 0.5;

    int n_tiles() const noexcept { return n_rows * n_cols; }
};

struct PolicyOutput {
    ActionDistribution dist;
    double value = 0.0;
};

struct SampledAction {
    RefinementAction action;
    double log_prob = 0.0;
    double entropy = 0.0;
};

enum class DecodeMode { Sample, Greedy };

class Controller {
public:
    explicit Controller(const ControllerConfig& cfg);

    /// Raw head outputs for any execution context.
    template <class Ctx>
    struct Heads {
        typename Ctx::Value spatial;  // (m_max + 2) x n_rows x n_cols: select logit, budget logits
        typename Ctx::Value global;   // b_max + 2: global-budget logits, stop logit
        typename Ctx::Value value;    // 1
    };
    template <class Ctx>
    Heads<Ctx> apply(Ctx& ctx, const typename Ctx::Value& features, int tile_size) const;

    const ControllerConfig& config() const noexcept { return cfg_; }
    nn::ParamSet& params() noexcept { return params_; }
    const nn::ParamSet& params() const noexcept { return params_; }

private:
    ControllerConfig cfg_;
    nn::ParamSet params_;
    nn::Conv2d c1_, c2_, c3_, spatial_;
    nn::Linear g1_, g2_, v1_, v2_;
};

/// Turns raw head outputs into a distribution (sigmoid + clamping).
ActionDistribution make_distribution(const nn::Tensor& spatial, const nn::Tensor& global, int m_max, int b_max);

PolicyOutput policy_forward(const Controller& ctrl, const nn::Tensor& features, int tile_size);

SampledAction sample_action(const ActionDistribution& dist, Rng& rng, DecodeMode mode);

/// log pi(action); budget terms count only on selected tiles.
double action_log_prob(const ActionDistribution& dist, const RefinementAction& action);

/// Entropy of the distribution: per tile H(select) + p * H(budget), plus global and stop terms.
double distribution_entropy(const ActionDistribution& dist);

/// Derivatives of `w_logp * log pi(action) + w_ent * entropy` w.r.t. the raw head outputs.
struct HeadGrads {
    nn::Tensor spatial;
    nn::Tensor global;
};
HeadGrads log_prob_entropy_grads(const ActionDistribution& dist, const RefinementAction& action, double w_logp,
                                 double w_ent);

/// Adapts a controller to the rollout's policy interface.
class ControllerPolicy final : public RefinementPolicy {
public:
    ControllerPolicy(const Controller& ctrl, DecodeMode mode) : ctrl_(ctrl), mode_(mode) {}
    PolicyDecision decide(const StepObservation& obs, Rng& rng) override;

    /// Features of every decision taken so far (for policy re-evaluation).
    std::vector<nn::Tensor> features;

private:
    const Controller& ctrl_;
    DecodeMode mode_;
};

void save_controller(const Controller& ctrl, const std::filesystem::path& path, int episodes);
Controller load_controller(const std::filesystem::path& path);

}  // namespace racmf
