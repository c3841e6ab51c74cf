#include <doctest.h>

#include <cmath>

#include "racmf/metrics.hpp"
#include "racmf/rl_trainer.hpp"

using namespace racmf;
using nn::Tensor;

namespace {

Image random_image(int n, Rng& rng, double scale = 0.3) {
    Image x(n, n);
    for (auto& v : x.data) v = static_cast<float>(scale * standard_normal(rng));
    return x;
}

Transition make_step(double reward, double value, bool terminal) {
    Transition t;
    t.reward = reward;
    t.value = value;
    t.terminal = terminal;
    return t;
}

ControllerConfig tiny_controller() {
    ControllerConfig c;
    c.feature_width = 4;
    c.b_max = 8;
    c.seed = 4;
    return c;
}

BackboneConfig tiny_backbone() {
    BackboneConfig c;
    c.base_width = 8;
    c.depth = 2;
    c.embed_dim = 16;
    c.seed = 3;
    return c;
}

/// Transitions whose stored log-probability and value are those of `ctrl`.
std::vector<Transition> on_policy_transitions(const Controller& ctrl, int n, Rng& rng) {
    std::vector<Transition> out;
    for (int i = 0; i < n; ++i) {
        const Image a = random_image(8, rng), b = random_image(8, rng), u = random_image(8, rng);
        Transition t;
        t.features = extract_state_features(a, b, b, u, Mask(8, 8, 1), i % 4, 4);
        t.tile_size = 4;
        const PolicyOutput po = policy_forward(ctrl, t.features, 4);
        const SampledAction s = sample_action(po.dist, rng, DecodeMode::Sample);
        t.action = s.action;
        t.log_prob = s.log_prob;
        t.value = po.value;
        t.advantage = standard_normal(rng);
        t.ret = po.value + standard_normal(rng);
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<const Transition*> pointers(const std::vector<Transition>& v) {
    std::vector<const Transition*> p;
    for (const auto& t : v) p.push_back(&t);
    return p;
}

/// Directional derivative of the total loss along the normalized gradient,
/// analytic vs central differences in double precision around float parameters.
std::pair<double, double> directional_check(Controller ctrl, const std::vector<Transition>& batch,
                                            const PPOConfig& cfg, double h) {
    std::vector<float> g(ctrl.params().size(), 0.0f);
    ppo_loss(ctrl, pointers(batch), cfg, &g);
    double norm = 0.0;
    for (float x : g) norm += static_cast<double>(x) * x;
    norm = std::sqrt(norm);
    REQUIRE(norm > 0.0);
    const std::vector<float> base = ctrl.params().values();
    auto at = [&](double s) {
        auto& p = ctrl.params().values();
        for (size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(base[i] + s * g[i] / norm);
        return ppo_loss(ctrl, pointers(batch), cfg, nullptr).total;
    };
    const double fd = (at(h) - at(-h)) / (2 * h);
    return {norm, fd};
}

}  // namespace

TEST_CASE("quality score and step reward examples") {
    Rng rng(1);
    const Image xb = random_image(16, rng);
    const Mask body(16, 16, 1);
    const RewardConfig cfg;
    CHECK(quality_score(xb, xb, body, cfg) == doctest::Approx(2.5).epsilon(1e-12));

    RewardConfig psnr_only;
    psnr_only.ssim_weight = 0.0;
    psnr_only.focus_weight = 0.0;
    Image x = xb;
    for (auto& v : x.data) v += 0.05f;
    CHECK(quality_score(x, xb, body, psnr_only) ==
          doctest::Approx(psnr(x, xb, kNormalizedRange).db / 40.0).epsilon(1e-12));
    Image closer = xb;
    for (auto& v : closer.data) v += 0.02f;
    CHECK(quality_score(closer, xb, body, psnr_only) > quality_score(x, xb, body, psnr_only));

    CHECK(step_reward(x, x, xb, body, 0.0, cfg) == 0.0);
    // the reward is the quality change minus alpha times the cost
    const double dq = quality_score(closer, xb, body, cfg) - quality_score(x, xb, body, cfg);
    CHECK(step_reward(x, closer, xb, body, 2.0, cfg) == doctest::Approx(dq - 0.02).epsilon(1e-12));
    CHECK(step_reward(x, x, xb, body, 5.0, cfg) == doctest::Approx(-0.05).epsilon(1e-12));
    RewardConfig shifted = psnr_only;
    shifted.alpha = 0.01;
    // a 4 dB PSNR gain is 0.10 of quality at scale 40
    Image far = xb, near = xb;
    for (auto& v : far.data) v += 0.1f;
    for (auto& v : near.data) v += static_cast<float>(0.1 * std::pow(10.0, -4.0 / 20.0));
    CHECK(step_reward(far, near, xb, body, 2.0, shifted) == doctest::Approx(0.08).epsilon(1e-4));

    CHECK_THROWS_AS(quality_score(x, random_image(8, rng), body, cfg), DimensionError);
    RewardConfig bad;
    bad.alpha = -1.0;
    CHECK_THROWS_AS(bad.validate(), SpecError);
}

TEST_CASE("focus measure") {
    Image flat(8, 8, 0.3f);
    const Mask body(8, 8, 1);
    CHECK(focus_measure(flat, body) == 0.0);
    Image ramp(8, 8);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) ramp(r, c) = static_cast<float>(c);
    // interior Sobel x response of a unit ramp is 8
    Mask interior(8, 8, 0);
    for (int r = 1; r < 7; ++r)
        for (int c = 1; c < 7; ++c) interior(r, c) = 1;
    CHECK(focus_measure(ramp, interior) == doctest::Approx(64.0));
    CHECK(focus_measure(ramp, Mask(8, 8, 0)) == 0.0);
}

TEST_CASE("GAE examples") {
    PPOConfig cfg;
    SUBCASE("single terminal step") {
        Trajectory t;
        t.steps.push_back(make_step(1.0, 0.0, true));
        compute_gae(t, cfg);
        CHECK(t.steps[0].advantage == 1.0);
        CHECK(t.steps[0].ret == 1.0);
    }
    SUBCASE("lambda zero gives TD(0)") {
        cfg.gae_lambda = 0.0;
        Trajectory t;
        t.steps = {make_step(0.3, 0.5, false), make_step(-0.2, 0.1, false), make_step(1.0, 0.4, true)};
        compute_gae(t, cfg);
        CHECK(t.steps[0].advantage == doctest::Approx(0.3 + 0.99 * 0.1 - 0.5).epsilon(1e-15));
        CHECK(t.steps[1].advantage == doctest::Approx(-0.2 + 0.99 * 0.4 - 0.1).epsilon(1e-15));
        CHECK(t.steps[2].advantage == doctest::Approx(1.0 - 0.4).epsilon(1e-15));
        for (const auto& s : t.steps) CHECK(s.ret == doctest::Approx(s.advantage + s.value).epsilon(1e-15));
    }
    SUBCASE("two steps, gamma = lambda = 1") {
        cfg.gae_lambda = 1.0;
        cfg.discount_gamma = 1.0;
        Trajectory t;
        t.steps = {make_step(0.0, 0.0, false), make_step(1.0, 0.0, true)};
        compute_gae(t, cfg);
        CHECK(t.steps[0].advantage == 1.0);
        CHECK(t.steps[1].advantage == 1.0);
    }
    SUBCASE("gamma = lambda = 1 gives Monte-Carlo return minus baseline") {
        cfg.gae_lambda = 1.0;
        cfg.discount_gamma = 1.0;
        Trajectory t;
        t.steps = {make_step(0.2, 0.7, false), make_step(-0.5, -0.1, false), make_step(0.4, 0.3, true)};
        compute_gae(t, cfg);
        CHECK(t.steps[0].advantage == doctest::Approx(0.1 - 0.7).epsilon(1e-14));
        CHECK(std::abs(t.steps[1].advantage) < 1e-14);
        CHECK(t.steps[2].advantage == doctest::Approx(0.4 - 0.3).epsilon(1e-14));
    }
    SUBCASE("empty trajectory") {
        Trajectory t;
        CHECK_THROWS_AS(compute_gae(t, cfg), PreconditionError);
    }
}

TEST_CASE("advantage normalization across a batch") {
    PPOConfig cfg;
    std::vector<Trajectory> one(1);
    one[0].steps = {make_step(1.0, 0.0, true)};
    compute_advantages(one, cfg);
    CHECK(one[0].steps[0].advantage == 1.0);

    std::vector<Trajectory> batch(3);
    batch[0].steps = {make_step(1.0, 0.0, false), make_step(2.0, 0.5, true)};
    batch[1].steps = {make_step(-1.0, 0.2, true)};
    batch[2].steps = {make_step(0.5, 0.1, false), make_step(0.0, 0.0, false), make_step(3.0, 1.0, true)};
    compute_advantages(batch, cfg);
    double sum = 0.0, sq = 0.0;
    int n = 0;
    for (const auto& t : batch)
        for (const auto& s : t.steps) {
            sum += s.advantage;
            sq += s.advantage * s.advantage;
            ++n;
        }
    CHECK(std::abs(sum / n) < 1e-12);
    CHECK(sq / n == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("clipped surrogate") {
    const double eps = 0.2;
    CHECK(ppo_surrogate(1.0, 0.7, eps) == 0.7);
    CHECK(ppo_surrogate(1.5, 1.0, eps) == doctest::Approx(1.2));
    CHECK(ppo_surrogate(0.5, 1.0, eps) == 0.5);
    CHECK(ppo_surrogate(0.5, -1.0, eps) == doctest::Approx(-0.8));
    CHECK(ppo_surrogate(1.5, -1.0, eps) == -1.5);
    // A > 0 and ratio = 1 + 2 eps: the clipped branch is flat in the ratio
    const double h = 1e-6, rho = 1.0 + 2 * eps;
    CHECK((ppo_surrogate(rho + h, 2.0, eps) - ppo_surrogate(rho - h, 2.0, eps)) / (2 * h) == 0.0);
    CHECK((ppo_surrogate(1.0 + h, 2.0, eps) - ppo_surrogate(1.0 - h, 2.0, eps)) / (2 * h) ==
          doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("PPO loss at the behaviour parameters") {
    const Controller ctrl(tiny_controller());
    Rng rng(2);
    const auto batch = on_policy_transitions(ctrl, 6, rng);
    PPOConfig cfg;
    const PPOStats st = ppo_loss(ctrl, pointers(batch), cfg, nullptr);
    double mean_adv = 0.0;
    for (const auto& t : batch) mean_adv += t.advantage / batch.size();
    CHECK(st.policy_loss == doctest::Approx(-mean_adv).epsilon(1e-12));
    CHECK(st.approx_kl == 0.0);
    CHECK(st.clip_fraction == 0.0);
    for (const auto& t : batch) {
        const PolicyOutput po = policy_forward(ctrl, t.features, 4);
        CHECK(std::exp(action_log_prob(po.dist, t.action) - t.log_prob) == 1.0);
    }
    PPOConfig bare = cfg;
    bare.entropy_coef = 0.0;
    bare.value_coef = 0.0;
    const PPOStats b = ppo_loss(ctrl, pointers(batch), bare, nullptr);
    CHECK(b.total == b.policy_loss);
    CHECK(st.total == doctest::Approx(st.policy_loss + 0.5 * st.value_loss - 0.01 * st.entropy).epsilon(1e-12));
    CHECK_THROWS_AS(ppo_loss(ctrl, {}, cfg, nullptr), PreconditionError);
    std::vector<float> wrong(3);
    CHECK_THROWS_AS(ppo_loss(ctrl, pointers(batch), cfg, &wrong), DimensionError);
}

TEST_CASE("clipped samples contribute no policy gradient") {
    const Controller ctrl(tiny_controller());
    Rng rng(3);
    auto batch = on_policy_transitions(ctrl, 4, rng);
    PPOConfig cfg;
    cfg.entropy_coef = 0.0;
    cfg.value_coef = 0.0;
    for (auto& t : batch) {
        t.advantage = 1.0 + std::abs(t.advantage);
        t.log_prob -= std::log(1.0 + 2 * cfg.clip_epsilon);
    }
    std::vector<float> g(ctrl.params().size(), 0.0f);
    const PPOStats st = ppo_loss(ctrl, pointers(batch), cfg, &g);
    CHECK(st.clip_fraction == doctest::Approx(1.0));
    for (float x : g) CHECK(x == 0.0f);
}

TEST_CASE("value-loss gradient matches finite differences") {
    const Controller ctrl(tiny_controller());
    Rng rng(4);
    auto batch = on_policy_transitions(ctrl, 4, rng);
    for (auto& t : batch) t.advantage = 0.0;
    PPOConfig cfg;
    cfg.entropy_coef = 0.0;
    cfg.value_coef = 1.0;
    const auto [norm, fd] = directional_check(ctrl, batch, cfg, 1e-3);
    CHECK(std::abs(fd - norm) / norm <= 1e-3);
}

TEST_CASE("full PPO gradient matches finite differences") {
    const Controller ctrl(tiny_controller());
    Rng rng(5);
    const auto batch = on_policy_transitions(ctrl, 4, rng);
    PPOConfig cfg;
    cfg.entropy_coef = 0.05;
    const auto [norm, fd] = directional_check(ctrl, batch, cfg, 1e-3);
    CHECK(std::abs(fd - norm) / norm <= 1e-2);
}

TEST_CASE("ppo update lowers the loss on a fixed batch") {
    Controller ctrl(tiny_controller());
    Rng rng(6);
    std::vector<Trajectory> batch(1);
    batch[0].steps = on_policy_transitions(ctrl, 8, rng);
    PPOConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.minibatch_size = 8;
    cfg.epochs_per_batch = 1;
    nn::Adam opt;
    const PPOStats before = ppo_loss(ctrl, pointers(batch[0].steps), cfg, nullptr);
    const PPOStats first = ppo_update(ctrl, opt, batch, cfg, rng);
    CHECK(first.total == doctest::Approx(before.total).epsilon(1e-12));
    const PPOStats after = ppo_loss(ctrl, pointers(batch[0].steps), cfg, nullptr);
    CHECK(after.total < before.total);
    CHECK(opt.step_count == 1);
}

TEST_CASE("episodes: telescoping rewards and evaluation") {
    const PhantomSpec ps;
    const DegradationTemplate dt;
    const InMemoryDataset ds = generate_dataset(4, ps, dt, 7);
    const ConditionalUNet net(tiny_backbone());
    RolloutConfig rc;
    RewardConfig rw;
    rw.alpha = 0.0;
    UniformBudgetPolicy pol(1);
    const ImagePair& pair = ds.pairs[0];
    const Episode ep = run_episode(net, pol, nullptr, pair, rc, rw, 99);
    REQUIRE(ep.traj.steps.size() == 4);
    double sum = 0.0;
    for (const auto& s : ep.traj.steps) sum += s.reward;
    const double want = quality_score(ep.output, pair.target, pair.body_mask, rw) -
                        quality_score(ep.trace.steps.front().state_before, pair.target, pair.body_mask, rw);
    CHECK(sum == doctest::Approx(want).epsilon(1e-12));
    CHECK(ep.total_reward == sum);
    CHECK(ep.traj.steps.back().terminal);
    CHECK_FALSE(ep.traj.steps.front().terminal);

    RewardConfig costly;
    const Episode ep2 = run_episode(net, pol, nullptr, pair, rc, costly, 99);
    for (size_t i = 0; i < ep2.traj.steps.size(); ++i) {
        const auto& s = ep2.trace.steps[i];
        CHECK(ep2.traj.steps[i].reward ==
              doctest::Approx(step_reward(s.state_before, s.state_after, pair.target, pair.body_mask,
                                          s.compute_cost, costly)));
    }

    ZeroBudgetPolicy zero;
    std::vector<const ImagePair*> pairs = {&ds.pairs[0], &ds.pairs[1]};
    const PolicyEvaluation ev = evaluate_policy(net, zero, pairs, rc, costly, 3, 5);
    CHECK(ev.rewards.size() == 3);
    CHECK(ev.mean_micro_steps == 0.0);
    CHECK(ev.mean_reward == doctest::Approx((ev.rewards[0] + ev.rewards[1] + ev.rewards[2]) / 3));
}

TEST_CASE("controller training: determinism and frozen backbone") {
    const PhantomSpec ps;
    const DegradationTemplate dt;
    const InMemoryDataset ds = generate_dataset(6, ps, dt, 8);
    ConditionalUNet net(tiny_backbone());
    const auto train = ds.split("train");
    RolloutConfig rc;
    RewardConfig rw;
    PPOConfig ppo;
    ppo.n_episodes = 4;
    ppo.episodes_per_batch = 2;
    ppo.minibatch_size = 4;
    ppo.epochs_per_batch = 2;
    ppo.seed = 3;
    const std::uint32_t checksum = net.params().checksum();
    const auto a = train_controller(net, train, rc, tiny_controller(), ppo, rw);
    const auto b = train_controller(net, train, rc, tiny_controller(), ppo, rw);
    CHECK(net.params().checksum() == checksum);
    REQUIRE(a.history.size() == 2);
    CHECK(a.history[0].episode == 2);
    CHECK(a.history[1].episode == 4);
    CHECK(reward_history_csv(a.history) == reward_history_csv(b.history));
    CHECK(a.controller.params().values() == b.controller.params().values());
    CHECK(a.controller.params().values() != Controller(tiny_controller()).params().values());
    CHECK(reward_history_csv(a.history).rfind("episode,mean_reward,mean_episode_length,mean_micro_steps\n", 0) == 0);

    CHECK_THROWS_AS(
        train_controller(net, train, rc, tiny_controller(), ppo, rw,
                         [&](const RewardRecord&) { net.params().values()[0] += 1.0f; }),
        ContractError);
    CHECK_THROWS_AS(train_controller(net, {}, rc, tiny_controller(), ppo, rw), PreconditionError);
    ControllerConfig mismatched = tiny_controller();
    mismatched.m_max = 2;
    CHECK_THROWS_AS(train_controller(net, train, rc, mismatched, ppo, rw), SpecError);
}

TEST_CASE("PPO config validation and JSON") {
    PPOConfig c;
    c.clip_epsilon = 0.0;
    CHECK_THROWS_AS(c.validate(), SpecError);
    c = {};
    c.gae_lambda = 1.5;
    CHECK_THROWS_AS(c.validate(), SpecError);
    c = {};
    c.discount_gamma = -0.1;
    CHECK_THROWS_AS(c.validate(), SpecError);
    c = {};
    c.seed = 42;
    c.epochs_per_batch = 3;
    CHECK(PPOConfig::from_json(c.to_json()).to_json() == c.to_json());
    CHECK_THROWS_AS(PPOConfig::from_json(nlohmann::json{{"clip", 0.1}}), SpecError);
    RewardConfig r;
    r.focus_weight = 0.3;
    CHECK(RewardConfig::from_json(r.to_json()).to_json() == r.to_json());
}
