#include <doctest.h>

#include <cmath>

#include "../common/tmpdir.hpp"
#include "racmf/controller.hpp"

using namespace racmf;
using nn::Tensor;

namespace {

Image random_image(int n, Rng& rng) {
    Image x(n, n);
    for (auto& v : x.data) v = standard_normal(rng);
    return x;
}

Tensor random_features(int n, Rng& rng) {
    const Image a = random_image(n, rng), b = random_image(n, rng), c = random_image(n, rng), u = random_image(n, rng);
    Mask body(n, n, 1);
    return extract_state_features(a, b, c, u, body, 1, 4);
}

struct RawHeads {
    Tensor spatial, global;
};

RawHeads random_heads(int rows, int cols, int m_max, int b_max, Rng& rng, float scale = 2.0f) {
    RawHeads h{Tensor(m_max + 2, rows, cols), Tensor::vec(std::vector<float>(b_max + 2))};
    for (auto& v : h.spatial.v) v = scale * standard_normal(rng);
    for (auto& v : h.global.v) v = scale * standard_normal(rng);
    return h;
}

ControllerConfig small_config() {
    ControllerConfig c;
    c.feature_width = 8;
    c.b_max = 16;
    c.seed = 2;
    return c;
}

}  // namespace

TEST_CASE("state features") {
    Rng rng(1);
    const Image xa = random_image(8, rng), xk = random_image(8, rng), u = random_image(8, rng);
    const Mask body(8, 8, 1);
    SUBCASE("identity state zeroes the difference and residual channels") {
        const Tensor f = extract_state_features(xa, xa, xa, u, body, 0, 4);
        CHECK(f.c == kStateChannels);
        for (size_t i = 0; i < f.plane(); ++i) {
            CHECK(f.channel(2)[i] == 0.0f);
            CHECK(f.channel(6)[i] == 0.0f);
        }
    }
    SUBCASE("step fraction channel") {
        const Tensor f0 = extract_state_features(xa, xk, xk, u, body, 0, 4);
        const Tensor f3 = extract_state_features(xa, xk, xk, u, body, 3, 4);
        for (size_t i = 0; i < f0.plane(); ++i) {
            CHECK(f0.channel(5)[i] == 0.0f);
            CHECK(f3.channel(5)[i] == 0.75f);
        }
    }
    SUBCASE("channel contents") {
        const Image xc = random_image(8, rng);
        const Tensor f = extract_state_features(xa, xk, xc, u, body, 1, 4);
        for (size_t i = 0; i < f.plane(); ++i) {
            CHECK(f.channel(0)[i] == xa[i]);
            CHECK(f.channel(1)[i] == xk[i]);
            CHECK(f.channel(2)[i] == xk[i] - xa[i]);
            CHECK(f.channel(3)[i] == u[i]);
            CHECK(f.channel(4)[i] == 1.0f);
            CHECK(f.channel(6)[i] == std::abs(xc[i] - xk[i]));
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(extract_state_features(xa, random_image(4, rng), xk, u, body, 0, 4), DimensionError);
        CHECK_THROWS_AS(extract_state_features(xa, xk, xk, u, Mask(4, 4, 1), 0, 4), DimensionError);
        CHECK_THROWS_AS(extract_state_features(xa, xk, xk, u, body, 4, 4), PreconditionError);
    }
}

TEST_CASE("policy forward: shapes, clamping, determinism") {
    const Controller ctrl(small_config());
    Rng rng(2);
    const Tensor f = random_features(32, rng);
    const PolicyOutput a = policy_forward(ctrl, f, 4);
    CHECK(a.dist.n_rows == 8);
    CHECK(a.dist.n_cols == 8);
    CHECK(a.dist.select_prob.size() == 64);
    CHECK(a.dist.budget_logits.size() == 64 * 4);
    CHECK(a.dist.global_logits.size() == 17);
    for (double p : a.dist.select_prob) CHECK((p >= kProbClamp && p <= 1.0 - kProbClamp));
    CHECK((a.dist.stop_prob >= kProbClamp && a.dist.stop_prob <= 1.0 - kProbClamp));
    const PolicyOutput b = policy_forward(ctrl, f, 4);
    CHECK(a.dist.select_prob == b.dist.select_prob);
    CHECK(a.dist.global_logits == b.dist.global_logits);
    CHECK(a.value == b.value);
    const PolicyOutput c = policy_forward(ctrl, f, 8);
    CHECK(c.dist.n_rows == 4);
    CHECK(c.dist.n_cols == 4);
    CHECK_THROWS_AS(policy_forward(ctrl, Tensor(3, 32, 32), 4), DimensionError);
}

TEST_CASE("probabilities are clamped away from 0 and 1") {
    Tensor spatial(5, 2, 2), global = Tensor::vec(std::vector<float>(5));
    spatial.channel(0)[0] = 100.0f;
    spatial.channel(0)[1] = -100.0f;
    global.v[4] = 100.0f;
    const ActionDistribution d = make_distribution(spatial, global, 3, 3);
    CHECK(d.select_prob[0] == 1.0 - kProbClamp);
    CHECK(d.select_prob[1] == kProbClamp);
    CHECK(d.stop_prob == 1.0 - kProbClamp);
    CHECK_THROWS_AS(make_distribution(spatial, global, 2, 3), DimensionError);
    CHECK_THROWS_AS(make_distribution(spatial, global, 3, 4), DimensionError);
    spatial.v[7] = std::nanf("");
    CHECK_THROWS_AS(make_distribution(spatial, global, 3, 3), NumericalError);
}

TEST_CASE("greedy decoding examples") {
    Rng rng(3);
    SUBCASE("saturated stop gate") {
        ActionDistribution d;
        d.n_rows = d.n_cols = 2;
        d.m_max = 1;
        d.b_max = 2;
        d.select_prob.assign(4, 0.3);
        d.budget_logits.assign(8, 0.0);
        d.global_logits = {0.0, 1.0, 0.0};
        d.stop_prob = 1.0 - kProbClamp;
        const SampledAction s = sample_action(d, rng, DecodeMode::Greedy);
        CHECK(s.action.stop);
        CHECK(s.action.global_budget == 1);
    }
    SUBCASE("all selection probabilities at the lower clamp") {
        ActionDistribution d;
        d.n_rows = d.n_cols = 3;
        d.m_max = 2;
        d.b_max = 3;
        d.select_prob.assign(9, kProbClamp);
        d.budget_logits.assign(27, 0.5);
        d.global_logits = {0.2, -1.0, 0.7, 0.1};
        d.stop_prob = 0.2;
        const SampledAction s = sample_action(d, rng, DecodeMode::Greedy);
        for (int i = 0; i < 9; ++i) {
            CHECK(s.action.tile_select[i] == 0.0f);
            CHECK(s.action.tile_budget[i] == 0);
        }
        CHECK(s.action.global_budget == 2);
        CHECK_FALSE(s.action.stop);
        double lse = 0.0;
        for (double l : d.global_logits) lse += std::exp(l);
        const double want = 9 * std::log(1.0 - kProbClamp) + (0.7 - std::log(lse)) + std::log(0.8);
        CHECK(s.log_prob == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("greedy picks the budget argmax on selected tiles") {
        ActionDistribution d;
        d.n_rows = 1;
        d.n_cols = 2;
        d.m_max = 2;
        d.b_max = 1;
        d.select_prob = {0.9, 0.4};
        d.budget_logits = {0.0, 0.1, 2.0, 5.0, 0.0, 0.0};
        d.global_logits = {0.0, 0.0};
        d.stop_prob = 0.1;
        const SampledAction s = sample_action(d, rng, DecodeMode::Greedy);
        CHECK(s.action.tile_select == std::vector<float>{1.0f, 0.0f});
        CHECK(s.action.tile_budget == std::vector<int>{2, 0});
    }
}

TEST_CASE("sampled log-probabilities re-evaluate exactly over 1000 distributions") {
    Rng rng(4);
    for (int trial = 0; trial < 1000; ++trial) {
        const int rows = 1 + trial % 4, cols = 1 + (trial / 4) % 3, m_max = 1 + trial % 3, b_max = trial % 7;
        const RawHeads h = random_heads(rows, cols, m_max, b_max, rng);
        const ActionDistribution d = make_distribution(h.spatial, h.global, m_max, b_max);
        const SampledAction s = sample_action(d, rng, DecodeMode::Sample);
        CHECK(action_log_prob(d, s.action) == s.log_prob);
        CHECK(std::exp(s.log_prob) > 0.0);
        CHECK(std::exp(s.log_prob) <= 1.0);
        CHECK(s.entropy == distribution_entropy(d));
        for (int i = 0; i < d.n_tiles(); ++i)
            if (s.action.tile_select[i] == 0.0f) CHECK(s.action.tile_budget[i] == 0);
    }
}

TEST_CASE("log-probability arithmetic and masking") {
    ActionDistribution d;
    d.n_rows = 1;
    d.n_cols = 2;
    d.m_max = 1;
    d.b_max = 1;
    d.select_prob = {0.25, 0.5};
    d.budget_logits = {0.0, 0.0, 0.3, -0.2};
    d.global_logits = {0.0, 0.0};
    d.stop_prob = 0.5;
    RefinementAction a;
    a.tile_select = {1.0f, 0.0f};
    a.tile_budget = {1, 0};
    a.global_budget = 0;
    const double before = action_log_prob(d, a);
    ActionDistribution doubled = d;
    doubled.select_prob[0] = 0.5;
    CHECK(action_log_prob(doubled, a) - before == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    ActionDistribution other_budget = d;
    other_budget.budget_logits[2] = 7.0;
    other_budget.budget_logits[3] = -4.0;
    CHECK(action_log_prob(other_budget, a) == before);

    RefinementAction wrong = a;
    wrong.tile_select.push_back(0.0f);
    wrong.tile_budget.push_back(0);
    CHECK_THROWS_AS(action_log_prob(d, wrong), DimensionError);
}

TEST_CASE("sampling is deterministic under a fixed stream") {
    Rng rng(5);
    const RawHeads h = random_heads(4, 4, 3, 8, rng);
    const ActionDistribution d = make_distribution(h.spatial, h.global, 3, 8);
    Rng a(11), b(11);
    for (int i = 0; i < 20; ++i) {
        const SampledAction x = sample_action(d, a, DecodeMode::Sample);
        const SampledAction y = sample_action(d, b, DecodeMode::Sample);
        CHECK(x.action.tile_select == y.action.tile_select);
        CHECK(x.action.tile_budget == y.action.tile_budget);
        CHECK(x.action.global_budget == y.action.global_budget);
        CHECK(x.action.stop == y.action.stop);
    }
    const SampledAction g1 = sample_action(d, a, DecodeMode::Greedy);
    const SampledAction g2 = sample_action(d, b, DecodeMode::Greedy);
    CHECK(g1.action.tile_select == g2.action.tile_select);
    CHECK(g1.log_prob == g2.log_prob);
}

TEST_CASE("head gradients match finite differences") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const int m_max = 1 + trial % 3, b_max = 2 + trial % 4;
        const RawHeads h = random_heads(2, 3, m_max, b_max, rng, 1.5f);
        const ActionDistribution d = make_distribution(h.spatial, h.global, m_max, b_max);
        const RefinementAction a = sample_action(d, rng, DecodeMode::Sample).action;
        const double w_logp = 0.7, w_ent = -0.3;
        const HeadGrads g = log_prob_entropy_grads(d, a, w_logp, w_ent);
        auto objective = [&](const Tensor& s, const Tensor& gl) {
            const ActionDistribution dd = make_distribution(s, gl, m_max, b_max);
            return w_logp * action_log_prob(dd, a) + w_ent * distribution_entropy(dd);
        };
        const double eps = 1e-3;
        for (size_t i = 0; i < h.spatial.size(); ++i) {
            Tensor p = h.spatial, m = h.spatial;
            p.v[i] += static_cast<float>(eps);
            m.v[i] -= static_cast<float>(eps);
            const double fd = (objective(p, h.global) - objective(m, h.global)) / (2 * eps);
            CHECK(g.spatial.v[i] == doctest::Approx(fd).epsilon(1e-2).scale(1e-3));
        }
        for (size_t i = 0; i < h.global.size(); ++i) {
            Tensor p = h.global, m = h.global;
            p.v[i] += static_cast<float>(eps);
            m.v[i] -= static_cast<float>(eps);
            const double fd = (objective(h.spatial, p) - objective(h.spatial, m)) / (2 * eps);
            CHECK(g.global.v[i] == doctest::Approx(fd).epsilon(1e-2).scale(1e-3));
        }
    }
}

TEST_CASE("controller policy adapter") {
    const Controller ctrl(small_config());
    Rng rng(7);
    const Image xa = random_image(16, rng), xk = random_image(16, rng), u = random_image(16, rng);
    const Mask body(16, 16, 1);
    const TileGrid grid = TileGrid::cover(16, 16, 4);
    const StepObservation obs{xa, xk, xk, u, body, 0, 4, grid};
    ControllerPolicy pol(ctrl, DecodeMode::Greedy);
    const PolicyDecision d1 = pol.decide(obs, rng);
    const PolicyDecision d2 = pol.decide(obs, rng);
    CHECK(pol.features.size() == 2);
    CHECK(d1.action.tile_select == d2.action.tile_select);
    CHECK(d1.priority.size() == 16);
    CHECK(d1.log_prob == d2.log_prob);
    CHECK_NOTHROW(d1.action.validate(grid, 3));
    TileGrid other = grid;
    other.n_rows = 3;
    const StepObservation bad{xa, xk, xk, u, body, 0, 4, other};
    CHECK_THROWS_AS(pol.decide(bad, rng), ContractError);
}

TEST_CASE("controller config and checkpoints") {
    ControllerConfig c;
    c.feature_width = 0;
    CHECK_THROWS_AS(c.validate(), SpecError);
    c = {};
    c.b_max = -1;
    CHECK_THROWS_AS(c.validate(), SpecError);
    c = {};
    c.entropy_coef = -0.1;
    CHECK_THROWS_AS(c.validate(), SpecError);
    c = small_config();
    CHECK(ControllerConfig::from_json(c.to_json()).to_json() == c.to_json());
    CHECK_THROWS_AS(ControllerConfig::from_json(nlohmann::json{{"width", 3}}), SpecError);

    const Controller ctrl(c);
    CHECK(Controller(c).params().values() == ctrl.params().values());
    testutil::TempDir dir("ctrl");
    save_controller(ctrl, dir / "c.racmf", 12);
    const Controller back = load_controller(dir / "c.racmf");
    CHECK(back.params().values() == ctrl.params().values());
    CHECK(back.config().to_json() == c.to_json());
    Rng rng(8);
    const Tensor f = random_features(16, rng);
    CHECK(policy_forward(back, f, 4).dist.select_prob == policy_forward(ctrl, f, 4).dist.select_prob);
}
