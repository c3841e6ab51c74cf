#include <doctest.h>

#include <algorithm>

#include "racmf/rollout.hpp"

using namespace racmf;

namespace {

class ConstantNet final : public FlowModel {
public:
    explicit ConstantNet(float c) : c_(c) {}
    Image forward(const Image& x, const Image&, double, double) const override { return Image(x.rows, x.cols, c_); }
    JvpResult jvp(const Image& x, const Image&, double, double, const Image&, double) const override {
        return {Image(x.rows, x.cols, c_), Image(x.rows, x.cols, 0.0f)};
    }

private:
    float c_;
};

/// Wraps a model and counts forward evaluations.
class CountingNet final : public FlowModel {
public:
    explicit CountingNet(const FlowModel& inner) : inner_(inner) {}
    Image forward(const Image& x, const Image& x_A, double r, double t) const override {
        ++calls;
        return inner_.forward(x, x_A, r, t);
    }
    JvpResult jvp(const Image& x, const Image& x_A, double r, double t, const Image& dx, double dt) const override {
        return inner_.jvp(x, x_A, r, t, dx, dt);
    }
    mutable int calls = 0;

private:
    const FlowModel& inner_;
};

/// Returns the same action at every step.
class ScriptedPolicy final : public RefinementPolicy {
public:
    explicit ScriptedPolicy(RefinementAction a) : action_(std::move(a)) {}
    PolicyDecision decide(const StepObservation&, Rng&) override {
        PolicyDecision d;
        d.action = action_;
        return d;
    }

private:
    RefinementAction action_;
};

BackboneConfig tiny_backbone() {
    BackboneConfig c;
    c.base_width = 8;
    c.depth = 2;
    c.embed_dim = 16;
    c.seed = 3;
    return c;
}

Image random_image(int n, Rng& rng) {
    Image x(n, n);
    for (auto& v : x.data) v = standard_normal(rng);
    return x;
}

RefinementAction random_action(const TileGrid& grid, int m_max, Rng& rng) {
    RefinementAction a = RefinementAction::empty(grid);
    for (int t = 0; t < grid.n_tiles(); ++t) {
        if (uniform01(rng) < 0.4) {
            a.tile_select[t] = 1.0f;
            a.tile_budget[t] = std::uniform_int_distribution<int>(0, m_max)(rng);
        }
    }
    a.global_budget = std::uniform_int_distribution<int>(0, 3 * grid.n_tiles())(rng);
    return a;
}

}  // namespace

TEST_CASE("schedule") {
    CHECK(make_schedule(1).times == std::vector<double>{1.0, 0.0});
    const Schedule s4 = make_schedule(4);
    REQUIRE(s4.times.size() == 5);
    const std::vector<double> want{1.0, 0.75, 0.5, 0.25, 0.0};
    for (int i = 0; i < 5; ++i) CHECK(s4.times[i] == doctest::Approx(want[i]).epsilon(1e-15));
    for (int K = 1; K <= 50; ++K) {
        const Schedule s = make_schedule(K);
        CHECK(s.times.front() == 1.0);
        CHECK(s.times.back() == 0.0);
        for (int k = 0; k < K; ++k) CHECK(s.times[k] > s.times[k + 1]);
    }
    CHECK_THROWS_AS(make_schedule(0), PreconditionError);
}

TEST_CASE("tile grid covers the image") {
    const TileGrid g = TileGrid::cover(32, 32, 4);
    CHECK(g.n_rows == 8);
    CHECK(g.n_cols == 8);
    CHECK(g.tile_of(5, 9) == 1 * 8 + 2);
    const TileGrid p = TileGrid::cover(10, 7, 4);
    CHECK(p.n_rows == 3);
    CHECK(p.n_cols == 2);
    CHECK(p.tile_area(0) == 16);
    CHECK(p.tile_area(1) == 12);
    CHECK(p.tile_area(5) == 6);
    int total = 0;
    for (int i = 0; i < p.n_tiles(); ++i) total += p.tile_area(i);
    CHECK(total == 70);
}

TEST_CASE("coarse step") {
    Rng rng(1);
    const Image x = random_image(8, rng), xa = random_image(8, rng);
    CHECK(coarse_step(ConstantNet(3.0f), x, xa, 0.5, 0.5) == x);
    CHECK(coarse_step(ConstantNet(0.0f), x, xa, 1.0, 0.25) == x);
    const Image y = coarse_step(ConstantNet(1.0f), Image(4, 4, 0.0f), Image(4, 4, 0.0f), 1.0, 0.75);
    for (float v : y.data) CHECK(v == doctest::Approx(-0.25));
    CHECK_THROWS_AS(coarse_step(ConstantNet(1.0f), x, xa, 0.5, 0.75), PreconditionError);
}

TEST_CASE("masks") {
    const TileGrid g = TileGrid::cover(8, 8, 4);
    SUBCASE("empty action gives zero masks") {
        for (const Image& M : build_masks(RefinementAction::empty(g), g, 3, false))
            for (float v : M.data) CHECK(v == 0.0f);
    }
    SUBCASE("single tile with budget 2 of 3") {
        RefinementAction a = RefinementAction::empty(g);
        a.tile_select[1] = 1.0f;
        a.tile_budget[1] = 2;
        const auto masks = build_masks(a, g, 3, false);
        REQUIRE(masks.size() == 3);
        for (int r = 0; r < 8; ++r)
            for (int c = 0; c < 8; ++c) {
                const float ind = (r < 4 && c >= 4) ? 1.0f : 0.0f;
                CHECK(masks[0](r, c) == ind);
                CHECK(masks[1](r, c) == ind);
                CHECK(masks[2](r, c) == 0.0f);
            }
    }
    SUBCASE("masks are monotone in m, with and without feathering") {
        Rng rng(2);
        const TileGrid big = TileGrid::cover(16, 16, 4);
        for (int trial = 0; trial < 20; ++trial) {
            RefinementAction a = random_action(big, 3, rng);
            for (bool feather : {false, true}) {
                const auto masks = build_masks(a, big, 3, feather);
                for (size_t m = 0; m + 1 < masks.size(); ++m)
                    for (size_t i = 0; i < masks[m].size(); ++i) CHECK(masks[m][i] >= masks[m + 1][i]);
                for (const auto& M : masks)
                    for (float v : M.data) CHECK((v >= 0.0f && v <= 1.0f));
            }
        }
    }
    SUBCASE("feathering softens gated edges only") {
        RefinementAction a = RefinementAction::empty(g);
        a.tile_select[0] = 1.0f;
        a.tile_budget[0] = 1;
        const Image M = build_masks(a, g, 1, true)[0];
        CHECK(M(0, 0) == 1.0f);
        CHECK(M(3, 3) == 0.5f);
        CHECK(M(1, 3) == 0.5f);
        CHECK(M(2, 2) == 1.0f);
        CHECK(M(4, 4) == 0.0f);
        CHECK(M(3, 4) == 0.0f);
    }
    SUBCASE("budget beyond m_max is rejected") {
        RefinementAction a = RefinementAction::empty(g);
        a.tile_select[0] = 1.0f;
        a.tile_budget[0] = 4;
        CHECK_THROWS_AS(build_masks(a, g, 3, false), PreconditionError);
    }
}

TEST_CASE("micro step") {
    Rng rng(3);
    const Image x = random_image(8, rng), xa = random_image(8, rng);
    CHECK(micro_step(ConstantNet(5.0f), x, xa, 0.75, 0.5, Image(8, 8, 0.0f), 0.25) == x);
    const Image open = micro_step(ConstantNet(2.0f), x, xa, 1.0, 0.5, Image(8, 8, 1.0f), 0.25);
    for (size_t i = 0; i < x.size(); ++i) CHECK(open[i] == doctest::Approx(x[i] - 0.25f));
    // Delta t_local = 0.1 with gamma 0.4 over an interval of 0.25
    const Image half =
        micro_step(ConstantNet(1.0f), Image(4, 4, 0.0f), Image(4, 4, 0.0f), 0.5, 0.25, Image(4, 4, 0.5f), 0.4);
    for (float v : half.data) CHECK(v == doctest::Approx(-0.05));
    CHECK_THROWS_AS(micro_step(ConstantNet(1.0f), x, xa, 1.0, 0.5, Image(8, 8, 1.5f), 0.25), PreconditionError);
}

TEST_CASE("budget allocation respects tile and global budgets") {
    const TileGrid g = TileGrid::cover(8, 8, 4);
    RefinementAction a = RefinementAction::empty(g);
    a.tile_select = {1, 1, 0, 1};
    a.tile_budget = {3, 1, 0, 2};
    a.global_budget = 4;
    // priority ties resolve row-major; level 1 goes to tiles 0, 1, 3 before level 2
    CHECK(allocate_budget(a, {0.5f, 0.5f, 0.5f, 0.5f}, 3) == std::vector<int>{2, 1, 0, 1});
    CHECK(allocate_budget(a, {0.1f, 0.2f, 0.3f, 0.9f}, 3) == std::vector<int>{1, 1, 0, 2});
    a.global_budget = 100;
    CHECK(allocate_budget(a, {0.f, 0.f, 0.f, 0.f}, 3) == std::vector<int>{3, 1, 0, 2});
    a.global_budget = 0;
    CHECK(allocate_budget(a, {0.f, 0.f, 0.f, 0.f}, 3) == std::vector<int>{0, 0, 0, 0});
    CHECK_THROWS_AS(allocate_budget(a, {0.f}, 3), DimensionError);
}

TEST_CASE("locality and budget laws over random actions") {
    const ConditionalUNet net(tiny_backbone());
    RolloutConfig cfg;
    cfg.tile_size = 4;
    const TileGrid grid = TileGrid::cover(16, 16, 4);
    Rng rng(4);
    const Image xa = random_image(16, rng);
    for (int trial = 0; trial < 100; ++trial) {
        const RefinementAction a = random_action(grid, cfg.m_max, rng);
        Rng roll(static_cast<std::uint64_t>(trial));
        ScriptedPolicy pol(a);
        const EnhanceResult res = enhance(net, &pol, xa, cfg, roll);
        for (const RolloutStep& s : res.trace.steps) {
            int total = 0;
            for (int t = 0; t < grid.n_tiles(); ++t) {
                CHECK(s.granted[t] <= a.tile_budget[t]);
                total += s.granted[t];
            }
            CHECK(total <= a.global_budget);
            CHECK(total == s.tile_micro_steps);
            // recompute the coarse result and compare pixels outside every mask
            const Image coarse = coarse_step(net, s.state_before, xa, s.t_k, s.t_next);
            for (int r = 0; r < 16; ++r)
                for (int c = 0; c < 16; ++c)
                    if (s.granted[grid.tile_of(r, c)] == 0) CHECK(s.state_after(r, c) == coarse(r, c));
        }
    }
}

TEST_CASE("zero-budget policy reproduces the pure rollout bit for bit") {
    const ConditionalUNet net(tiny_backbone());
    RolloutConfig cfg;
    Rng rng(5);
    const Image xa = random_image(16, rng);
    Rng a(77), b(77);
    ZeroBudgetPolicy zero;
    const EnhanceResult plain = enhance(net, nullptr, xa, cfg, a);
    const EnhanceResult zeroed = enhance(net, &zero, xa, cfg, b);
    CHECK(plain.image == zeroed.image);
    CHECK(zeroed.trace.executed_micro_steps() == 0);
    CHECK(zeroed.trace.total_evals == cfg.K);
}

TEST_CASE("one-step generation without a controller") {
    const ConditionalUNet net(tiny_backbone());
    RolloutConfig cfg;
    cfg.K = 1;
    Rng rng(6);
    const Image xa = random_image(16, rng);
    CountingNet counted(net);
    Rng a(9), b(9);
    const EnhanceResult res = enhance(counted, nullptr, xa, cfg, a);
    CHECK(counted.calls == 1);
    const Image e = standard_normal_image(16, 16, b);
    const Image u = net.forward(e, xa, 0.0, 1.0);
    Image want = e;
    for (size_t i = 0; i < want.size(); ++i) want[i] -= u[i];
    CHECK(res.image == want);
}

TEST_CASE("immediate stop ends the rollout after one coarse step") {
    const ConditionalUNet net(tiny_backbone());
    RolloutConfig cfg;
    const TileGrid grid = TileGrid::cover(16, 16, 4);
    RefinementAction a = RefinementAction::empty(grid);
    std::fill(a.tile_select.begin(), a.tile_select.end(), 1.0f);
    std::fill(a.tile_budget.begin(), a.tile_budget.end(), 2);
    a.global_budget = 100;
    a.stop = true;
    ScriptedPolicy pol(a);
    Rng rng(7);
    const Image xa = random_image(16, rng);
    const EnhanceResult res = enhance(net, &pol, xa, cfg, rng);
    CHECK(res.trace.steps.size() == 1);
    CHECK(res.trace.stopped_early);
    CHECK(res.trace.executed_micro_steps() == 0);
    CHECK(res.trace.total_evals == 1);
}

TEST_CASE("evaluation accounting matches an instrumented counter") {
    const ConditionalUNet net(tiny_backbone());
    RolloutConfig cfg;
    Rng rng(8);
    const Image xa = random_image(16, rng);
    RandomPolicy pol(cfg.m_max, 32);
    for (int trial = 0; trial < 10; ++trial) {
        CountingNet counted(net);
        Rng roll(static_cast<std::uint64_t>(100 + trial));
        const EnhanceResult res = enhance(counted, &pol, xa, cfg, roll);
        CHECK(res.trace.total_evals == counted.calls);
        CHECK(res.trace.total_evals ==
              static_cast<int>(res.trace.steps.size()) + res.trace.executed_micro_steps());
        for (const auto& s : res.trace.steps) {
            const int deepest = *std::max_element(s.granted.begin(), s.granted.end());
            CHECK(s.executed_micro_steps == deepest);
            CHECK(s.eval_count == 1 + s.executed_micro_steps);
        }
    }
}

TEST_CASE("rollouts are deterministic under a fixed seed") {
    const ConditionalUNet net(tiny_backbone());
    RolloutConfig cfg;
    Rng rng(10);
    const Image xa = random_image(16, rng);
    RandomPolicy pol(cfg.m_max, 32);
    Rng a(3), b(3);
    const EnhanceResult r1 = enhance(net, &pol, xa, cfg, a);
    const EnhanceResult r2 = enhance(net, &pol, xa, cfg, b);
    CHECK(r1.image == r2.image);
    CHECK(r1.trace.to_json() == r2.trace.to_json());
}

TEST_CASE("uniform policy grants every tile its budget") {
    const ConditionalUNet net(tiny_backbone());
    RolloutConfig cfg;
    Rng rng(11);
    const Image xa = random_image(16, rng);
    UniformBudgetPolicy pol(2);
    const EnhanceResult res = enhance(net, &pol, xa, cfg, rng);
    for (const auto& s : res.trace.steps) {
        for (int g : s.granted) CHECK(g == 2);
        CHECK(s.executed_micro_steps == 2);
        CHECK(s.compute_cost == doctest::Approx(2.0));
    }
}

TEST_CASE("trace json and config validation") {
    const ConditionalUNet net(tiny_backbone());
    RolloutConfig cfg;
    Rng rng(12);
    const Image xa = random_image(16, rng);
    UniformBudgetPolicy pol(1);
    const auto j = enhance(net, &pol, xa, cfg, rng).trace.to_json();
    REQUIRE(j.contains("steps"));
    REQUIRE(j["steps"].size() == 4);
    const auto& s0 = j["steps"][0];
    for (const char* key : {"t_k", "stop", "global_budget", "tile_select", "tile_budget", "executed_micro_steps",
                            "eval_count"})
        CHECK(s0.contains(key));
    CHECK(s0["tile_select"].size() == 16);

    RolloutConfig bad;
    bad.m_max = 0;
    CHECK_THROWS_AS(bad.validate(), SpecError);
    bad = {};
    bad.gamma_local = 0.0;
    CHECK_THROWS_AS(bad.validate(), SpecError);
    bad = {};
    bad.gamma_local = 1.5;
    CHECK_THROWS_AS(bad.validate(), SpecError);
    bad = {};
    bad.tile_size = 1;
    CHECK_THROWS_AS(bad.validate(), SpecError);
    CHECK(RolloutConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
}

TEST_CASE("actions inconsistent with the grid are rejected") {
    const TileGrid g = TileGrid::cover(8, 8, 4);
    RefinementAction a = RefinementAction::empty(g);
    a.tile_budget[0] = 1;  // budget on an unselected tile
    CHECK_THROWS_AS(a.validate(g, 3), PreconditionError);
    RefinementAction b = RefinementAction::empty(g);
    b.tile_select.pop_back();
    CHECK_THROWS_AS(b.validate(g, 3), DimensionError);
    RefinementAction c = RefinementAction::empty(g);
    c.global_budget = -1;
    CHECK_THROWS_AS(c.validate(g, 3), PreconditionError);
}
