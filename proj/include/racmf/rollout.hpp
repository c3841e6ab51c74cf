#pragma once

// Progressive enhancement: uniform time schedule, full-image coarse steps and
// tile-gated micro-steps driven by an optional refinement policy.

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "racmf/cmf.hpp"
#include "racmf/grid.hpp"
#include "racmf/random.hpp"

namespace racmf {

struct Schedule {
    int K = 0;
    std::vector<double> times;  // t_0 = 1 > ... > t_K = 0
};

/// t_k = 1 - k/K.
Schedule make_schedule(int K);

struct TileGrid {
    int tile_size = 4;
    int n_rows = 0, n_cols = 0;
    int height = 0, width = 0;

    /// Covers an H x W image; the last row/column of tiles may be partial.
    static TileGrid cover(int height, int width, int tile_size);
    int n_tiles() const noexcept { return n_rows * n_cols; }
    int tile_of(int r, int c) const noexcept { return (r / tile_size) * n_cols + c / tile_size; }
    /// Pixel count of tile `i` (smaller for partial edge tiles).
    int tile_area(int i) const noexcept;
};

struct RefinementAction {
    std::vector<float> tile_select;  // row-major, {0,1} or soft [0,1]
    std::vector<int> tile_budget;    // row-major, 0..m_max
    int global_budget = 0;           // in tile micro-steps
    bool stop = false;

    static RefinementAction empty(const TileGrid& grid);
    /// Throws PreconditionError / DimensionError on inconsistency with grid and m_max.
    void validate(const TileGrid& grid, int m_max) const;
};

struct RolloutConfig {
    int K = 4;
    int tile_size = 4;
    int m_max = 3;
    double gamma_local = 0.25;
    bool feather = false;
    std::uint64_t init_seed = 0;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static RolloutConfig from_json(const nlohmann::json& j);
};

/// x_k - (t_k - t_next) u(x_k, x_A, t_next, t_k). The flow field is returned in `u_out` when given.
Image coarse_step(const FlowModel& net, const Image& x_k, const Image& x_A, double t_k, double t_next,
                  Image* u_out = nullptr);

/// Masks M^(1..m_max) from per-tile gates and budgets, nearest-neighbour upsampled
/// to pixels. Feathering lowers gate-boundary pixels (inside the gated tile) to
/// the midpoint of a cosine ramp towards the neighbouring gate value.
std::vector<Image> build_masks(const RefinementAction& action, const TileGrid& grid, int m_max, bool feather);

/// M * (x_prev - gamma (t_k - t_next) u(x_prev, x_A, t_next, t_k)) + (1 - M) * x_prev.
Image micro_step(const FlowModel& net, const Image& x_prev, const Image& x_A, double t_k, double t_next,
                 const Image& M, double gamma_local);

/// Grants per-tile micro-steps under the global budget. Level m is granted to
/// tiles in order of decreasing `priority` (row-major on ties) before any tile
/// receives level m + 1, so grants stay nested across levels.
std::vector<int> allocate_budget(const RefinementAction& action, const std::vector<float>& priority, int m_max);

/// Body mask for images without a known one: pixels above `threshold`.
Mask threshold_body_mask(const Image& x, float threshold = -0.45f);

// ---- policy interface ---------------------------------------------------------

struct StepObservation {
    const Image& x_A;
    const Image& x_k;
    const Image& x_coarse;
    const Image& u;
    const Mask& body_mask;
    int k = 0;
    int K = 1;
    const TileGrid& grid;
};

struct PolicyDecision {
    RefinementAction action;
    std::vector<float> priority;  // per-tile ranking for budget allocation
    double log_prob = 0.0;
    double value = 0.0;
    double entropy = 0.0;
};

class RefinementPolicy {
public:
    virtual ~RefinementPolicy() = default;
    virtual PolicyDecision decide(const StepObservation& obs, Rng& rng) = 0;
};

/// Emits zero budgets and never stops.
class ZeroBudgetPolicy final : public RefinementPolicy {
public:
    PolicyDecision decide(const StepObservation& obs, Rng& rng) override;
};

/// Selects every tile with the same budget; the global budget admits all of it.
class UniformBudgetPolicy final : public RefinementPolicy {
public:
    explicit UniformBudgetPolicy(int budget) : budget_(budget) {}
    PolicyDecision decide(const StepObservation& obs, Rng& rng) override;

private:
    int budget_;
};

/// Selects tiles with probability 1/2 and uniform budgets in 1..m_max; global
/// budget uniform in 0..b_max.
class RandomPolicy final : public RefinementPolicy {
public:
    RandomPolicy(int m_max, int b_max) : m_max_(m_max), b_max_(b_max) {}
    PolicyDecision decide(const StepObservation& obs, Rng& rng) override;

private:
    int m_max_, b_max_;
};

// ---- rollout --------------------------------------------------------------------

struct RolloutStep {
    int k = 0;
    double t_k = 1.0, t_next = 0.0;
    bool has_action = false;
    RefinementAction action;
    std::vector<int> granted;        // micro-steps actually run per tile
    int executed_micro_steps = 0;    // masked network evaluations
    int tile_micro_steps = 0;        // sum of granted
    double compute_cost = 0.0;       // tile micro-steps weighted by tile area / image area
    int eval_count = 0;              // 1 coarse + executed_micro_steps
    double log_prob = 0.0, value = 0.0, entropy = 0.0;
    Image state_before;  // x_k
    Image state_after;   // x_{k+1}
};

struct RolloutTrace {
    std::vector<RolloutStep> steps;
    int total_evals = 0;
    bool stopped_early = false;

    int executed_micro_steps() const;
    nlohmann::ordered_json to_json() const;
};

struct EnhanceResult {
    Image image;
    RolloutTrace trace;
};

/// Runs K coarse steps from standard-normal noise drawn from `rng`; with a
/// policy, each coarse step is followed by the policy's micro-steps. The
/// policy draws from the same `rng` after the initial noise.
EnhanceResult enhance(const FlowModel& net, RefinementPolicy* policy, const Image& x_A, const RolloutConfig& cfg,
                      Rng& rng, const Mask* body_mask = nullptr);

}  // namespace racmf
