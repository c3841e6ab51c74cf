#include "racmf/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "racmf/json_util.hpp"

namespace racmf {

Schedule make_schedule(int K) {
    if (K < 1) throw PreconditionError("make_schedule: K must be >= 1, got " + std::to_string(K));
    Schedule s;
    s.K = K;
    for (int k = 0; k <= K; ++k) s.times.push_back(1.0 - static_cast<double>(k) / K);
    s.times.back() = 0.0;
    return s;
}

TileGrid TileGrid::cover(int height, int width, int tile_size) {
    if (tile_size < 2) throw PreconditionError("tile_size must be >= 2");
    if (height < 1 || width < 1) throw PreconditionError("tile grid over an empty image");
    TileGrid g;
    g.tile_size = tile_size;
    g.height = height;
    g.width = width;
    g.n_rows = (height + tile_size - 1) / tile_size;
    g.n_cols = (width + tile_size - 1) / tile_size;
    return g;
}

int TileGrid::tile_area(int i) const noexcept {
    const int tr = i / n_cols, tc = i % n_cols;
    const int h = std::min(tile_size, height - tr * tile_size);
    const int w = std::min(tile_size, width - tc * tile_size);
    return h * w;
}

RefinementAction RefinementAction::empty(const TileGrid& grid) {
    RefinementAction a;
    a.tile_select.assign(grid.n_tiles(), 0.0f);
    a.tile_budget.assign(grid.n_tiles(), 0);
    return a;
}

void RefinementAction::validate(const TileGrid& grid, int m_max) const {
    const auto n = static_cast<size_t>(grid.n_tiles());
    if (tile_select.size() != n || tile_budget.size() != n) {
        std::ostringstream os;
        os << "action has " << tile_select.size() << " gates and " << tile_budget.size() << " budgets for a "
           << grid.n_rows << "x" << grid.n_cols << " tile grid";
        throw DimensionError(os.str());
    }
    if (global_budget < 0) throw PreconditionError("global_budget must be >= 0");
    for (size_t i = 0; i < n; ++i) {
        if (!(tile_select[i] >= 0.0f && tile_select[i] <= 1.0f))
            throw PreconditionError("tile_select[" + std::to_string(i) + "] outside [0, 1]");
        if (tile_budget[i] < 0 || tile_budget[i] > m_max)
            throw PreconditionError("tile_budget[" + std::to_string(i) + "] = " + std::to_string(tile_budget[i]) +
                                    " outside [0, " + std::to_string(m_max) + "]");
        if (tile_select[i] == 0.0f && tile_budget[i] != 0)
            throw PreconditionError("tile_budget[" + std::to_string(i) + "] nonzero on an unselected tile");
    }
}

void RolloutConfig::validate() const {
    if (K < 1) throw SpecError("rollout.K", "must be >= 1");
    if (tile_size < 2) throw SpecError("rollout.tile_size", "must be >= 2");
    if (m_max < 1) throw SpecError("rollout.m_max", "must be >= 1");
    if (!(gamma_local > 0.0 && gamma_local <= 1.0)) throw SpecError("rollout.gamma_local", "must be in (0, 1]");
}

nlohmann::ordered_json RolloutConfig::to_json() const {
    nlohmann::ordered_json j;
    j["K"] = K;
    j["tile_size"] = tile_size;
    j["m_max"] = m_max;
    j["gamma_local"] = gamma_local;
    j["feather"] = feather;
    j["init_seed"] = init_seed;
    return j;
}

RolloutConfig RolloutConfig::from_json(const nlohmann::json& j) {
    RolloutConfig c;
    StrictObject o(j, "rollout");
    o.get("K", c.K)
        .get("tile_size", c.tile_size)
        .get("m_max", c.m_max)
        .get("gamma_local", c.gamma_local)
        .get("feather", c.feather)
        .get("init_seed", c.init_seed);
    o.finish();
    c.validate();
    return c;
}

namespace {

void check_times(double t_k, double t_next) {
    if (!(t_next >= 0.0 && t_k <= 1.0 && t_next <= t_k)) {
        std::ostringstream os;
        os << "step requires 0 <= t_next <= t_k <= 1, got t_k=" << t_k << " t_next=" << t_next;
        throw PreconditionError(os.str());
    }
}

}  // namespace

Image coarse_step(const FlowModel& net, const Image& x_k, const Image& x_A, double t_k, double t_next, Image* u_out) {
    check_times(t_k, t_next);
    Image u = net.forward(x_k, x_A, t_next, t_k);
    require_same_shape(u, x_k, "coarse_step");
    const auto dt = static_cast<float>(t_k - t_next);
    Image out = x_k;
    for (size_t i = 0; i < out.size(); ++i) out[i] -= dt * u[i];
    if (u_out) *u_out = std::move(u);
    return out;
}

std::vector<Image> build_masks(const RefinementAction& action, const TileGrid& grid, int m_max, bool feather) {
    action.validate(grid, m_max);
    std::vector<Image> masks;
    for (int m = 1; m <= m_max; ++m) {
        Image M(grid.height, grid.width, 0.0f);
        for (int r = 0; r < grid.height; ++r)
            for (int c = 0; c < grid.width; ++c) {
                const int t = grid.tile_of(r, c);
                if (action.tile_budget[t] >= m) M(r, c) = action.tile_select[t];
            }
        if (feather) {
            Image F = M;
            constexpr int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
            for (int r = 0; r < grid.height; ++r)
                for (int c = 0; c < grid.width; ++c) {
                    float lowest = M(r, c);
                    for (int d = 0; d < 4; ++d) {
                        const int rr = r + dr[d], cc = c + dc[d];
                        if (rr >= 0 && cc >= 0 && rr < grid.height && cc < grid.width)
                            lowest = std::min(lowest, M(rr, cc));
                    }
                    // cosine ramp from `lowest` to M(r, c) sampled at its midpoint
                    F(r, c) = lowest + (M(r, c) - lowest) * 0.5f;
                }
            M = std::move(F);
        }
        masks.push_back(std::move(M));
    }
    return masks;
}

Image micro_step(const FlowModel& net, const Image& x_prev, const Image& x_A, double t_k, double t_next,
                 const Image& M, double gamma_local) {
    check_times(t_k, t_next);
    require_same_shape(x_prev, M, "micro_step mask");
    for (float m : M.data)
        if (!(m >= 0.0f && m <= 1.0f)) throw PreconditionError("micro_step: mask value outside [0, 1]");
    const Image u = net.forward(x_prev, x_A, t_next, t_k);
    const auto dt = static_cast<float>(gamma_local * (t_k - t_next));
    Image out = x_prev;
    for (size_t i = 0; i < out.size(); ++i) {
        const float m = M[i];
        if (m == 0.0f) continue;
        out[i] = m * (x_prev[i] - dt * u[i]) + (1.0f - m) * x_prev[i];
    }
    return out;
}

std::vector<int> allocate_budget(const RefinementAction& action, const std::vector<float>& priority, int m_max) {
    const size_t n = action.tile_budget.size();
    if (priority.size() != n) throw DimensionError("allocate_budget: priority length mismatch");
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return priority[a] > priority[b]; });
    std::vector<int> granted(n, 0);
    int remaining = action.global_budget;
    for (int m = 1; m <= m_max && remaining > 0; ++m)
        for (int t : order) {
            if (remaining == 0) break;
            if (action.tile_select[t] > 0.0f && action.tile_budget[t] >= m) {
                granted[t] = m;
                --remaining;
            }
        }
    return granted;
}

Mask threshold_body_mask(const Image& x, float threshold) {
    Mask m(x.rows, x.cols, 0);
    for (size_t i = 0; i < x.size(); ++i) m[i] = x[i] > threshold ? 1 : 0;
    return m;
}

// ---- baseline policies ----------------------------------------------------------

PolicyDecision ZeroBudgetPolicy::decide(const StepObservation& obs, Rng&) {
    PolicyDecision d;
    d.action = RefinementAction::empty(obs.grid);
    d.priority.assign(obs.grid.n_tiles(), 0.0f);
    return d;
}

PolicyDecision UniformBudgetPolicy::decide(const StepObservation& obs, Rng&) {
    PolicyDecision d;
    d.action = RefinementAction::empty(obs.grid);
    if (budget_ > 0) {
        std::fill(d.action.tile_select.begin(), d.action.tile_select.end(), 1.0f);
        std::fill(d.action.tile_budget.begin(), d.action.tile_budget.end(), budget_);
    }
    d.action.global_budget = budget_ * obs.grid.n_tiles();
    d.priority.assign(obs.grid.n_tiles(), 1.0f);
    return d;
}

PolicyDecision RandomPolicy::decide(const StepObservation& obs, Rng& rng) {
    PolicyDecision d;
    d.action = RefinementAction::empty(obs.grid);
    std::uniform_int_distribution<int> budget(1, m_max_);
    for (int i = 0; i < obs.grid.n_tiles(); ++i)
        if (uniform01(rng) < 0.5) {
            d.action.tile_select[i] = 1.0f;
            d.action.tile_budget[i] = budget(rng);
        }
    d.action.global_budget = std::uniform_int_distribution<int>(0, b_max_)(rng);
    d.priority.resize(obs.grid.n_tiles());
    for (auto& p : d.priority) p = static_cast<float>(uniform01(rng));
    return d;
}

// ---- rollout --------------------------------------------------------------------

int RolloutTrace::executed_micro_steps() const {
    int n = 0;
    for (const auto& s : steps) n += s.executed_micro_steps;
    return n;
}

nlohmann::ordered_json RolloutTrace::to_json() const {
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["total_evals"] = total_evals;
    j["executed_micro_steps"] = executed_micro_steps();
    j["stopped_early"] = stopped_early;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& s : steps) {
        nlohmann::ordered_json e;
        e["k"] = s.k;
        e["t_k"] = s.t_k;
        e["t_next"] = s.t_next;
        e["stop"] = s.has_action && s.action.stop;
        e["global_budget"] = s.has_action ? s.action.global_budget : 0;
        e["tile_select"] = s.has_action ? s.action.tile_select : std::vector<float>{};
        e["tile_budget"] = s.has_action ? s.action.tile_budget : std::vector<int>{};
        e["granted_budget"] = s.granted;
        e["executed_micro_steps"] = s.executed_micro_steps;
        e["tile_micro_steps"] = s.tile_micro_steps;
        e["eval_count"] = s.eval_count;
        arr.push_back(std::move(e));
    }
    j["steps"] = std::move(arr);
    return j;
}

EnhanceResult enhance(const FlowModel& net, RefinementPolicy* policy, const Image& x_A, const RolloutConfig& cfg,
                      Rng& rng, const Mask* body_mask) {
    cfg.validate();
    const Schedule sched = make_schedule(cfg.K);
    const TileGrid grid = TileGrid::cover(x_A.rows, x_A.cols, cfg.tile_size);
    const Mask body = body_mask ? *body_mask : threshold_body_mask(x_A);
    require_same_shape(x_A, body, "enhance body mask");

    EnhanceResult res;
    Image x = standard_normal_image(x_A.rows, x_A.cols, rng);
    const double area = static_cast<double>(x_A.size());
    for (int k = 0; k < cfg.K; ++k) {
        RolloutStep step;
        step.k = k;
        step.t_k = sched.times[k];
        step.t_next = sched.times[k + 1];
        step.state_before = x;
        Image u;
        Image x_next = coarse_step(net, x, x_A, step.t_k, step.t_next, &u);
        step.eval_count = 1;
        step.granted.assign(grid.n_tiles(), 0);

        bool stop = false;
        if (policy) {
            const StepObservation obs{x_A, x, x_next, u, body, k, cfg.K, grid};
            PolicyDecision d = policy->decide(obs, rng);
            d.action.validate(grid, cfg.m_max);
            step.has_action = true;
            step.log_prob = d.log_prob;
            step.value = d.value;
            step.entropy = d.entropy;
            step.action = std::move(d.action);
            stop = step.action.stop;
            if (!stop) {
                const auto& prio = d.priority.empty() ? step.action.tile_select : d.priority;
                step.granted = allocate_budget(step.action, prio, cfg.m_max);
                RefinementAction granted = step.action;
                granted.tile_budget = step.granted;
                const auto masks = build_masks(granted, grid, cfg.m_max, cfg.feather);
                for (const auto& M : masks) {
                    if (std::all_of(M.data.begin(), M.data.end(), [](float v) { return v == 0.0f; })) continue;
                    x_next = micro_step(net, x_next, x_A, step.t_k, step.t_next, M, cfg.gamma_local);
                    ++step.executed_micro_steps;
                }
                for (int t = 0; t < grid.n_tiles(); ++t) {
                    step.tile_micro_steps += step.granted[t];
                    step.compute_cost += step.granted[t] * grid.tile_area(t) / area;
                }
                step.eval_count += step.executed_micro_steps;
            }
        }
        step.state_after = x_next;
        res.trace.total_evals += step.eval_count;
        res.trace.steps.push_back(std::move(step));
        x = std::move(x_next);
        if (stop) {
            res.trace.stopped_early = k + 1 < cfg.K;
            break;
        }
    }
    res.image = std::move(x);
    return res;
}

}  // namespace racmf
