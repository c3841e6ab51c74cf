#include "racmf/rl_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "racmf/json_util.hpp"
#include "racmf/metrics.hpp"

namespace racmf {

using nn::Tensor;

void RewardConfig::validate() const {
    if (!(alpha >= 0.0)) throw SpecError("reward.alpha", "must be >= 0");
    if (!(psnr_scale > 0.0)) throw SpecError("reward.psnr_scale", "must be > 0");
    if (!(ssim_weight >= 0.0)) throw SpecError("reward.ssim_weight", "must be >= 0");
    if (!(focus_weight >= 0.0)) throw SpecError("reward.focus_weight", "must be >= 0");
}

nlohmann::ordered_json RewardConfig::to_json() const {
    nlohmann::ordered_json j;
    j["alpha"] = alpha;
    j["psnr_scale"] = psnr_scale;
    j["ssim_weight"] = ssim_weight;
    j["focus_weight"] = focus_weight;
    return j;
}

RewardConfig RewardConfig::from_json(const nlohmann::json& j) {
    RewardConfig c;
    StrictObject o(j, "reward");
    o.get("alpha", c.alpha)
        .get("psnr_scale", c.psnr_scale)
        .get("ssim_weight", c.ssim_weight)
        .get("focus_weight", c.focus_weight);
    o.finish();
    c.validate();
    return c;
}

double focus_measure(const Image& x, const Mask& mask) {
    require_same_shape(x, mask, "focus_measure");
    auto at = [&](int r, int c) {
        r = std::clamp(r, 0, x.rows - 1);
        c = std::clamp(c, 0, x.cols - 1);
        return static_cast<double>(x(r, c));
    };
    double acc = 0.0;
    size_t n = 0;
    for (int r = 0; r < x.rows; ++r)
        for (int c = 0; c < x.cols; ++c) {
            if (!mask(r, c)) continue;
            const double gx = (at(r - 1, c + 1) + 2 * at(r, c + 1) + at(r + 1, c + 1)) -
                              (at(r - 1, c - 1) + 2 * at(r, c - 1) + at(r + 1, c - 1));
            const double gy = (at(r + 1, c - 1) + 2 * at(r + 1, c) + at(r + 1, c + 1)) -
                              (at(r - 1, c - 1) + 2 * at(r - 1, c) + at(r - 1, c + 1));
            acc += gx * gx + gy * gy;
            ++n;
        }
    return n ? acc / static_cast<double>(n) : 0.0;
}

double quality_score(const Image& x, const Image& x_B, const Mask& body_mask, const RewardConfig& cfg) {
    require_same_shape(x, x_B, "quality_score");
    require_same_shape(x, body_mask, "quality_score body_mask");
    double q = psnr(x, x_B, kNormalizedRange).db / cfg.psnr_scale;
    if (cfg.ssim_weight != 0.0) q += cfg.ssim_weight * ssim_normalized(x, x_B);
    if (cfg.focus_weight != 0.0)
        q -= cfg.focus_weight * std::abs(focus_measure(x, body_mask) - focus_measure(x_B, body_mask));
    return q;
}

double step_reward(const Image& x_k, const Image& x_next, const Image& x_B, const Mask& body_mask, double cost,
                   const RewardConfig& cfg) {
    return quality_score(x_next, x_B, body_mask, cfg) - quality_score(x_k, x_B, body_mask, cfg) - cfg.alpha * cost;
}

void PPOConfig::validate() const {
    if (!(clip_epsilon > 0.0)) throw SpecError("ppo.clip_epsilon", "must be > 0");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw SpecError("ppo.gae_lambda", "must be in [0, 1]");
    if (!(discount_gamma >= 0.0 && discount_gamma <= 1.0)) throw SpecError("ppo.discount_gamma", "must be in [0, 1]");
    if (epochs_per_batch < 1) throw SpecError("ppo.epochs_per_batch", "must be >= 1");
    if (minibatch_size < 1) throw SpecError("ppo.minibatch_size", "must be >= 1");
    if (!(learning_rate > 0.0)) throw SpecError("ppo.learning_rate", "must be > 0");
    if (!(entropy_coef >= 0.0)) throw SpecError("ppo.entropy_coef", "must be >= 0");
    if (!(value_coef >= 0.0)) throw SpecError("ppo.value_coef", "must be >= 0");
    if (n_episodes < 0) throw SpecError("ppo.n_episodes", "must be >= 0");
    if (episodes_per_batch < 1) throw SpecError("ppo.episodes_per_batch", "must be >= 1");
    if (!(grad_clip >= 0.0)) throw SpecError("ppo.grad_clip", "must be >= 0");
}

nlohmann::ordered_json PPOConfig::to_json() const {
    nlohmann::ordered_json j;
    j["clip_epsilon"] = clip_epsilon;
    j["gae_lambda"] = gae_lambda;
    j["discount_gamma"] = discount_gamma;
    j["epochs_per_batch"] = epochs_per_batch;
    j["minibatch_size"] = minibatch_size;
    j["learning_rate"] = learning_rate;
    j["entropy_coef"] = entropy_coef;
    j["value_coef"] = value_coef;
    j["n_episodes"] = n_episodes;
    j["episodes_per_batch"] = episodes_per_batch;
    j["grad_clip"] = grad_clip;
    j["seed"] = seed;
    return j;
}

PPOConfig PPOConfig::from_json(const nlohmann::json& j) {
    PPOConfig c;
    StrictObject o(j, "ppo");
    o.get("clip_epsilon", c.clip_epsilon)
        .get("gae_lambda", c.gae_lambda)
        .get("discount_gamma", c.discount_gamma)
        .get("epochs_per_batch", c.epochs_per_batch)
        .get("minibatch_size", c.minibatch_size)
        .get("learning_rate", c.learning_rate)
        .get("entropy_coef", c.entropy_coef)
        .get("value_coef", c.value_coef)
        .get("n_episodes", c.n_episodes)
        .get("episodes_per_batch", c.episodes_per_batch)
        .get("grad_clip", c.grad_clip)
        .get("seed", c.seed);
    o.finish();
    c.validate();
    return c;
}

// ---- advantages -------------------------------------------------------------------

void compute_gae(Trajectory& traj, const PPOConfig& cfg) {
    if (traj.steps.empty()) throw PreconditionError("compute_advantages: empty trajectory");
    double next_adv = 0.0;
    for (size_t i = traj.steps.size(); i-- > 0;) {
        auto& s = traj.steps[i];
        const double next_value = (s.terminal || i + 1 == traj.steps.size()) ? 0.0 : traj.steps[i + 1].value;
        const double carry = s.terminal ? 0.0 : 1.0;
        const double delta = s.reward + cfg.discount_gamma * next_value * carry - s.value;
        s.advantage = delta + cfg.discount_gamma * cfg.gae_lambda * next_adv * carry;
        s.ret = s.advantage + s.value;
        next_adv = s.advantage;
    }
}

void compute_advantages(std::vector<Trajectory>& batch, const PPOConfig& cfg) {
    if (batch.empty()) throw PreconditionError("compute_advantages: empty batch");
    for (auto& t : batch) compute_gae(t, cfg);
    if (batch.size() < 2) return;
    double sum = 0.0, sq = 0.0;
    size_t n = 0;
    for (const auto& t : batch)
        for (const auto& s : t.steps) {
            sum += s.advantage;
            ++n;
        }
    const double mean = sum / static_cast<double>(n);
    for (const auto& t : batch)
        for (const auto& s : t.steps) sq += (s.advantage - mean) * (s.advantage - mean);
    const double sd = std::sqrt(sq / static_cast<double>(n));
    for (auto& t : batch)
        for (auto& s : t.steps) s.advantage = sd > 1e-12 ? (s.advantage - mean) / sd : s.advantage - mean;
}

double ppo_surrogate(double ratio, double advantage, double clip_epsilon) {
    const double clipped = std::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
    return std::min(ratio * advantage, clipped * advantage);
}

// ---- PPO --------------------------------------------------------------------------

PPOStats ppo_loss(const Controller& ctrl, const std::vector<const Transition*>& minibatch, const PPOConfig& cfg,
                  std::vector<float>* grads) {
    if (minibatch.empty()) throw PreconditionError("ppo_loss: empty minibatch");
    if (grads && grads->size() != ctrl.params().size()) throw DimensionError("ppo_loss: gradient buffer size");
    const double inv = 1.0 / static_cast<double>(minibatch.size());
    const auto& cc = ctrl.config();
    PPOStats st;
    for (const Transition* tr : minibatch) {
        nn::TapeCtx tape(ctrl.params().data());
        const auto heads = ctrl.apply(tape, tape.input(tr->features), tr->tile_size);
        const auto dist = make_distribution(tape.value(heads.spatial), tape.value(heads.global), cc.m_max, cc.b_max);
        const double value = tape.value(heads.value).v[0];
        const double logp = action_log_prob(dist, tr->action);
        const double ratio = std::exp(logp - tr->log_prob);
        const double A = tr->advantage;
        const double surr = ppo_surrogate(ratio, A, cfg.clip_epsilon);
        const double ent = distribution_entropy(dist);
        const double verr = value - tr->ret;
        st.policy_loss -= surr * inv;
        st.value_loss += verr * verr * inv;
        st.entropy += ent * inv;
        st.approx_kl += (tr->log_prob - logp) * inv;
        const bool unclipped = ratio * A <= std::clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * A;
        if (!unclipped) st.clip_fraction += inv;
        if (!grads) continue;
        // d(-surr)/d(logp) = -A * ratio on the unclipped branch, 0 when clipped
        const double w_logp = unclipped ? -A * ratio * inv : 0.0;
        const double w_ent = -cfg.entropy_coef * inv;
        auto hg = log_prob_entropy_grads(dist, tr->action, w_logp, w_ent);
        Tensor gv = Tensor::vec({static_cast<float>(cfg.value_coef * 2.0 * verr * inv)});
        tape.backward({{heads.spatial, std::move(hg.spatial)}, {heads.global, std::move(hg.global)},
                       {heads.value, std::move(gv)}},
                      grads->data());
    }
    st.total = st.policy_loss + cfg.value_coef * st.value_loss - cfg.entropy_coef * st.entropy;
    if (!std::isfinite(st.total)) {
        std::ostringstream os;
        os << "ppo: non-finite loss (policy=" << st.policy_loss << ", value=" << st.value_loss
           << ", entropy=" << st.entropy << ")";
        throw NumericalError(os.str());
    }
    return st;
}

PPOStats ppo_update(Controller& ctrl, nn::Adam& opt, const std::vector<Trajectory>& batch, const PPOConfig& cfg,
                    Rng& rng) {
    std::vector<const Transition*> all;
    for (const auto& t : batch)
        for (const auto& s : t.steps) all.push_back(&s);
    if (all.empty()) throw PreconditionError("ppo_update: no transitions");
    opt.lr = cfg.learning_rate;
    PPOStats first;
    bool have_first = false;
    std::vector<float> grads(ctrl.params().size());
    for (int epoch = 0; epoch < cfg.epochs_per_batch; ++epoch) {
        std::vector<const Transition*> order = all;
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t start = 0; start < order.size(); start += cfg.minibatch_size) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.minibatch_size));
            std::vector<const Transition*> mb(order.begin() + start, order.begin() + end);
            std::fill(grads.begin(), grads.end(), 0.0f);
            const PPOStats st = ppo_loss(ctrl, mb, cfg, &grads);
            if (!have_first) {
                first = st;
                have_first = true;
            }
            nn::clip_grad_norm(grads, cfg.grad_clip);
            opt.step(ctrl.params().values(), grads);
        }
    }
    return first;
}

// ---- episodes -----------------------------------------------------------------------

Episode run_episode(const FlowModel& net, RefinementPolicy& policy, std::vector<Tensor>* features,
                    const ImagePair& pair, const RolloutConfig& rollout, const RewardConfig& reward,
                    std::uint64_t noise_seed) {
    if (features) features->clear();
    Rng rng(noise_seed);
    EnhanceResult res = enhance(net, &policy, pair.source, rollout, rng, &pair.body_mask);
    Episode ep;
    for (size_t i = 0; i < res.trace.steps.size(); ++i) {
        const auto& s = res.trace.steps[i];
        Transition tr;
        if (features && i < features->size()) tr.features = std::move((*features)[i]);
        tr.tile_size = rollout.tile_size;
        tr.action = s.action;
        tr.log_prob = s.log_prob;
        tr.value = s.value;
        tr.reward = step_reward(s.state_before, s.state_after, pair.target, pair.body_mask, s.compute_cost, reward);
        tr.terminal = i + 1 == res.trace.steps.size();
        ep.total_reward += tr.reward;
        ep.traj.steps.push_back(std::move(tr));
    }
    ep.output = std::move(res.image);
    ep.trace = std::move(res.trace);
    return ep;
}

std::string reward_history_csv(const std::vector<RewardRecord>& history) {
    std::ostringstream os;
    os << "episode,mean_reward,mean_episode_length,mean_micro_steps\n" << std::setprecision(10);
    for (const auto& r : history)
        os << r.episode << ',' << r.mean_reward << ',' << r.mean_episode_length << ',' << r.mean_micro_steps << '\n';
    return os.str();
}

TrainControllerResult train_controller(const ConditionalUNet& net, const std::vector<const ImagePair*>& train,
                                       const RolloutConfig& rollout, const ControllerConfig& ctrl_cfg,
                                       const PPOConfig& ppo, const RewardConfig& reward,
                                       const std::function<void(const RewardRecord&)>& on_batch) {
    if (train.empty()) throw PreconditionError("train_controller: empty training split");
    rollout.validate();
    ppo.validate();
    reward.validate();
    if (ctrl_cfg.m_max != rollout.m_max)
        throw SpecError("controller.m_max", "must equal rollout.m_max (" + std::to_string(rollout.m_max) + ")");
    const std::uint32_t checksum_before = net.params().checksum();

    TrainControllerResult res{Controller(ctrl_cfg), {}};
    nn::Adam opt;
    opt.lr = ppo.learning_rate;
    Rng rng(derive_seed(ppo.seed, 400));
    int episode = 0;
    while (episode < ppo.n_episodes) {
        const int n = std::min(ppo.episodes_per_batch, ppo.n_episodes - episode);
        std::vector<Trajectory> batch;
        RewardRecord rec;
        for (int e = 0; e < n; ++e, ++episode) {
            const ImagePair& pair = *train[std::uniform_int_distribution<size_t>(0, train.size() - 1)(rng)];
            ControllerPolicy policy(res.controller, DecodeMode::Sample);
            Episode ep = run_episode(net, policy, &policy.features, pair, rollout, reward,
                                     derive_seed(ppo.seed, 10000 + static_cast<std::uint64_t>(episode)));
            rec.mean_reward += ep.total_reward / n;
            rec.mean_episode_length += static_cast<double>(ep.traj.steps.size()) / n;
            rec.mean_micro_steps += static_cast<double>(ep.trace.executed_micro_steps()) / n;
            batch.push_back(std::move(ep.traj));
        }
        rec.episode = episode;
        compute_advantages(batch, ppo);
        ppo_update(res.controller, opt, batch, ppo, rng);
        res.history.push_back(rec);
        if (on_batch) on_batch(rec);
    }
    if (net.params().checksum() != checksum_before)
        throw ContractError("train_controller: backbone parameters changed during controller training");
    return res;
}

PolicyEvaluation evaluate_policy(const FlowModel& net, RefinementPolicy& policy,
                                 const std::vector<const ImagePair*>& pairs, const RolloutConfig& rollout,
                                 const RewardConfig& reward, int n_rollouts, std::uint64_t seed) {
    if (pairs.empty()) throw PreconditionError("evaluate_policy: no pairs");
    PolicyEvaluation ev;
    for (int i = 0; i < n_rollouts; ++i) {
        const ImagePair& pair = *pairs[static_cast<size_t>(i) % pairs.size()];
        const Episode ep = run_episode(net, policy, nullptr, pair, rollout, reward,
                                       derive_seed(seed, static_cast<std::uint64_t>(i)));
        ev.rewards.push_back(ep.total_reward);
        ev.mean_reward += ep.total_reward / n_rollouts;
        ev.mean_micro_steps += static_cast<double>(ep.trace.executed_micro_steps()) / n_rollouts;
    }
    return ev;
}

}  // namespace racmf
