#pragma once

// Reward, advantage estimation and PPO training of the refinement controller
// against a frozen backbone.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "racmf/cmf.hpp"
#include "racmf/controller.hpp"
#include "racmf/rollout.hpp"
#include "racmf/synth_data.hpp"

namespace racmf {

struct RewardConfig {
    double alpha = 0.01;
    double psnr_scale = 40.0;
    double ssim_weight = 1.0;
    double focus_weight = 0.1;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static RewardConfig from_json(const nlohmann::json& j);
};

/// Mean squared Sobel gradient magnitude over the mask.
double focus_measure(const Image& x, const Mask& mask);

/// PSNR/psnr_scale + beta SSIM - kappa |FG(x) - FG(x_B)| on normalized images.
double quality_score(const Image& x, const Image& x_B, const Mask& body_mask, const RewardConfig& cfg);

/// Q(x_next) - Q(x_k) - alpha * cost, where cost is the step's micro-step spend.
double step_reward(const Image& x_k, const Image& x_next, const Image& x_B, const Mask& body_mask, double cost,
                   const RewardConfig& cfg);

struct PPOConfig {
    double clip_epsilon = 0.2;
    double gae_lambda = 0.95;
    double discount_gamma = 0.99;
    int epochs_per_batch = 4;
    int minibatch_size = 32;
    double learning_rate = 3e-4;
    double entropy_coef = 0.01;
    double value_coef = 0.5;
    int n_episodes = 300;
    int episodes_per_batch = 10;
    double grad_clip = 0.5;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static PPOConfig from_json(const nlohmann::json& j);
};

struct Transition {
    nn::Tensor features;
    int tile_size = 4;
    RefinementAction action;
    double log_prob = 0.0;  // behaviour policy
    double value = 0.0;
    double reward = 0.0;
    bool terminal = false;
    double advantage = 0.0;
    double ret = 0.0;
};

struct Trajectory {
    std::vector<Transition> steps;
};

/// Plain GAE over one trajectory; fills advantage and ret.
void compute_gae(Trajectory& traj, const PPOConfig& cfg);

/// GAE for every trajectory, then advantages normalized to zero mean and unit
/// variance across the batch when it holds more than one trajectory.
void compute_advantages(std::vector<Trajectory>& batch, const PPOConfig& cfg);

/// min(rho A, clip(rho, 1 - eps, 1 + eps) A).
double ppo_surrogate(double ratio, double advantage, double clip_epsilon);

struct PPOStats {
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    double total = 0.0;
    double clip_fraction = 0.0;
    double approx_kl = 0.0;
};

/// Loss components of one minibatch at the current parameters. When `grads` is
/// non-null the gradient of the total is accumulated into it.
PPOStats ppo_loss(const Controller& ctrl, const std::vector<const Transition*>& minibatch, const PPOConfig& cfg,
                  std::vector<float>* grads);

/// epochs_per_batch passes over shuffled minibatches, one Adam step each.
/// Returns the loss components before the first step.
PPOStats ppo_update(Controller& ctrl, nn::Adam& opt, const std::vector<Trajectory>& batch, const PPOConfig& cfg,
                    Rng& rng);

/// Runs one episode, recording a transition per rollout step.
struct Episode {
    Trajectory traj;
    RolloutTrace trace;
    Image output;
    double total_reward = 0.0;
};
Episode run_episode(const FlowModel& net, RefinementPolicy& policy, std::vector<nn::Tensor>* features,
                    const ImagePair& pair, const RolloutConfig& rollout, const RewardConfig& reward,
                    std::uint64_t noise_seed);

struct RewardRecord {
    int episode = 0;  // episodes completed so far
    double mean_reward = 0.0;
    double mean_episode_length = 0.0;
    double mean_micro_steps = 0.0;
};

std::string reward_history_csv(const std::vector<RewardRecord>& history);

struct TrainControllerResult {
    Controller controller;
    std::vector<RewardRecord> history;
};

/// PPO against the frozen backbone. Throws ContractError if the backbone's
/// parameters change during training.
TrainControllerResult train_controller(const ConditionalUNet& net, const std::vector<const ImagePair*>& train,
                                       const RolloutConfig& rollout, const ControllerConfig& ctrl_cfg,
                                       const PPOConfig& ppo, const RewardConfig& reward,
                                       const std::function<void(const RewardRecord&)>& on_batch = nullptr);

struct PolicyEvaluation {
    double mean_reward = 0.0;
    double mean_micro_steps = 0.0;
    std::vector<double> rewards;  // per rollout
};

/// Mean episode reward of a policy over `n_rollouts` episodes cycling through `pairs`.
PolicyEvaluation evaluate_policy(const FlowModel& net, RefinementPolicy& policy,
                                 const std::vector<const ImagePair*>& pairs, const RolloutConfig& rollout,
                                 const RewardConfig& reward, int n_rollouts, std::uint64_t seed);

}  // namespace racmf
