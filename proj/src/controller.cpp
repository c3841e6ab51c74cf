#include "racmf/controller.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "racmf/container.hpp"
#include "racmf/json_util.hpp"

namespace racmf {

using nn::Tensor;

Tensor extract_state_features(const Image& x_A, const Image& x_k, const Image& x_coarse, const Image& u,
                              const Mask& body_mask, int k, int K) {
    require_same_shape(x_A, x_k, "state features x_k");
    require_same_shape(x_A, x_coarse, "state features x_coarse");
    require_same_shape(x_A, u, "state features u");
    require_same_shape(x_A, body_mask, "state features body_mask");
    if (!(K >= 1 && k >= 0 && k < K))
        throw PreconditionError("state features need 0 <= k < K, got k=" + std::to_string(k) +
                                " K=" + std::to_string(K));
    Tensor f(kStateChannels, x_A.rows, x_A.cols);
    const float frac = static_cast<float>(k) / static_cast<float>(K);
    for (size_t i = 0; i < x_A.size(); ++i) {
        f.channel(0)[i] = x_A[i];
        f.channel(1)[i] = x_k[i];
        f.channel(2)[i] = x_k[i] - x_A[i];
        f.channel(3)[i] = u[i];
        f.channel(4)[i] = body_mask[i] ? 1.0f : 0.0f;
        f.channel(5)[i] = frac;
        f.channel(6)[i] = std::abs(x_coarse[i] - x_k[i]);
    }
    return f;
}

void ControllerConfig::validate() const {
    if (feature_width < 1) throw SpecError("controller.feature_width", "must be >= 1");
    if (b_max < 0) throw SpecError("controller.b_max", "must be >= 0");
    if (m_max < 1) throw SpecError("controller.m_max", "must be >= 1");
    if (!(entropy_coef >= 0.0)) throw SpecError("controller.entropy_coef", "must be >= 0");
    if (!(value_coef >= 0.0)) throw SpecError("controller.value_coef", "must be >= 0");
    if (!std::isfinite(stop_bias)) throw SpecError("controller.stop_bias", "must be finite");
}

nlohmann::ordered_json ControllerConfig::to_json() const {
    nlohmann::ordered_json j;
    j["feature_width"] = feature_width;
    j["b_max"] = b_max;
    j["m_max"] = m_max;
    j["entropy_coef"] = entropy_coef;
    j["value_coef"] = value_coef;
    j["seed"] = seed;
    j["stop_bias"] = stop_bias;
    return j;
}

ControllerConfig ControllerConfig::from_json(const nlohmann::json& j) {
    ControllerConfig c;
    StrictObject o(j, "controller");
    o.get("feature_width", c.feature_width)
        .get("b_max", c.b_max)
        .get("m_max", c.m_max)
        .get("entropy_coef", c.entropy_coef)
        .get("value_coef", c.value_coef)
        .get("seed", c.seed)
        .get("stop_bias", c.stop_bias);
    o.finish();
    c.validate();
    return c;
}

Controller::Controller(const ControllerConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg_.seed, 300));
    const int w = cfg_.feature_width;
    c1_ = nn::make_conv(params_, "trunk.conv1", kStateChannels, w, 3, rng);
    c2_ = nn::make_conv(params_, "trunk.conv2", w, w, 3, rng);
    c3_ = nn::make_conv(params_, "trunk.conv3", w, w, 3, rng);
    spatial_ = nn::make_conv(params_, "spatial.head", w, cfg_.m_max + 2, 1, rng, 0.1f);
    g1_ = nn::make_linear(params_, "global.fc1", w, w, rng);
    g2_ = nn::make_linear(params_, "global.fc2", w, cfg_.b_max + 2, rng, 0.1f);
    v1_ = nn::make_linear(params_, "value.fc1", w, w, rng);
    v2_ = nn::make_linear(params_, "value.fc2", w, 1, rng, 0.1f);
    params_.values()[g2_.b_off + cfg_.b_max + 1] = static_cast<float>(cfg_.stop_bias);
}

template <class Ctx>
Controller::Heads<Ctx> Controller::apply(Ctx& ctx, const typename Ctx::Value& features, int tile_size) const {
    auto h = ctx.silu(ctx.conv(features, c1_));
    h = ctx.silu(ctx.conv(h, c2_));
    h = ctx.silu(ctx.conv(ctx.tpool(h, tile_size), c3_));
    const auto pooled = ctx.gmean(h);
    return {ctx.conv(h, spatial_), ctx.lin(ctx.silu(ctx.lin(pooled, g1_)), g2_),
            ctx.lin(ctx.silu(ctx.lin(pooled, v1_)), v2_)};
}

template Controller::Heads<nn::EvalCtx> Controller::apply(nn::EvalCtx&, const Tensor&, int) const;
template Controller::Heads<nn::TapeCtx> Controller::apply(nn::TapeCtx&, const int&, int) const;

namespace {

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

/// Logits stored as the stable log-softmax and probabilities.
struct Categorical {
    std::vector<double> logp, p;
    double entropy = 0.0;
};

Categorical categorical(const double* logits, int n) {
    Categorical c;
    const double mx = *std::max_element(logits, logits + n);
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(logits[i] - mx);
    const double lz = mx + std::log(z);
    for (int i = 0; i < n; ++i) {
        c.logp.push_back(logits[i] - lz);
        c.p.push_back(std::exp(c.logp.back()));
        c.entropy -= c.p.back() * c.logp.back();
    }
    return c;
}

double bernoulli_entropy(double p) { return -p * std::log(p) - (1.0 - p) * std::log(1.0 - p); }

int argmax(const std::vector<double>& v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

int draw(const std::vector<double>& p, Rng& rng) {
    const double u = uniform01(rng);
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(p.size()) - 1;
}

void check_dims(const ActionDistribution& d, const RefinementAction& a) {
    const auto n = static_cast<size_t>(d.n_tiles());
    if (a.tile_select.size() != n || a.tile_budget.size() != n) {
        std::ostringstream os;
        os << "action has " << a.tile_select.size() << " tiles, distribution has " << n;
        throw DimensionError(os.str());
    }
    if (a.global_budget < 0 || a.global_budget > d.b_max)
        throw DimensionError("global budget " + std::to_string(a.global_budget) + " outside 0.." +
                             std::to_string(d.b_max));
    for (int b : a.tile_budget)
        if (b < 0 || b > d.m_max) throw DimensionError("tile budget outside 0..m_max");
}

}  // namespace

ActionDistribution make_distribution(const Tensor& spatial, const Tensor& global, int m_max, int b_max) {
    if (spatial.c != m_max + 2) throw DimensionError("spatial head channel count mismatch");
    if (static_cast<int>(global.size()) != b_max + 2) throw DimensionError("global head size mismatch");
    ActionDistribution d;
    d.n_rows = spatial.h;
    d.n_cols = spatial.w;
    d.m_max = m_max;
    d.b_max = b_max;
    const auto n = spatial.plane();
    for (size_t i = 0; i < n; ++i) {
        d.select_prob.push_back(clamp_prob(sigmoid(spatial.channel(0)[i])));
        for (int m = 0; m <= m_max; ++m) d.budget_logits.push_back(spatial.channel(m + 1)[i]);
    }
    for (int b = 0; b <= b_max; ++b) d.global_logits.push_back(global.v[b]);
    d.stop_prob = clamp_prob(sigmoid(global.v[b_max + 1]));
    for (double v : d.budget_logits)
        if (!std::isfinite(v)) throw NumericalError("policy head produced a non-finite budget logit");
    for (double v : d.global_logits)
        if (!std::isfinite(v)) throw NumericalError("policy head produced a non-finite global-budget logit");
    for (double v : d.select_prob)
        if (!std::isfinite(v)) throw NumericalError("policy head produced a non-finite selection probability");
    if (!std::isfinite(d.stop_prob)) throw NumericalError("policy head produced a non-finite stop probability");
    return d;
}

PolicyOutput policy_forward(const Controller& ctrl, const Tensor& features, int tile_size) {
    if (features.c != kStateChannels)
        throw DimensionError("controller expects " + std::to_string(kStateChannels) + " feature channels, got " +
                             std::to_string(features.c));
    nn::EvalCtx ctx(ctrl.params().data());
    const auto heads = ctrl.apply(ctx, features, tile_size);
    PolicyOutput out;
    out.dist = make_distribution(heads.spatial, heads.global, ctrl.config().m_max, ctrl.config().b_max);
    out.value = heads.value.v[0];
    if (!std::isfinite(out.value)) throw NumericalError("value head produced a non-finite estimate");
    return out;
}

SampledAction sample_action(const ActionDistribution& dist, Rng& rng, DecodeMode mode) {
    SampledAction s;
    const int n = dist.n_tiles(), nb = dist.m_max + 1;
    s.action.tile_select.assign(n, 0.0f);
    s.action.tile_budget.assign(n, 0);
    for (int i = 0; i < n; ++i) {
        const double p = dist.select_prob[i];
        const bool sel = mode == DecodeMode::Greedy ? p > 0.5 : uniform01(rng) < p;
        if (!sel) continue;
        s.action.tile_select[i] = 1.0f;
        const auto cat = categorical(dist.budget_logits.data() + static_cast<size_t>(i) * nb, nb);
        s.action.tile_budget[i] = mode == DecodeMode::Greedy ? argmax(cat.p) : draw(cat.p, rng);
    }
    const auto g = categorical(dist.global_logits.data(), dist.b_max + 1);
    s.action.global_budget = mode == DecodeMode::Greedy ? argmax(g.p) : draw(g.p, rng);
    s.action.stop = mode == DecodeMode::Greedy ? dist.stop_prob > 0.5 : uniform01(rng) < dist.stop_prob;
    s.log_prob = action_log_prob(dist, s.action);
    s.entropy = distribution_entropy(dist);
    return s;
}

double action_log_prob(const ActionDistribution& dist, const RefinementAction& action) {
    check_dims(dist, action);
    const int nb = dist.m_max + 1;
    double lp = 0.0;
    for (int i = 0; i < dist.n_tiles(); ++i) {
        const double p = dist.select_prob[i];
        if (action.tile_select[i] > 0.0f) {
            lp += std::log(p);
            lp += categorical(dist.budget_logits.data() + static_cast<size_t>(i) * nb, nb).logp[action.tile_budget[i]];
        } else {
            lp += std::log(1.0 - p);
        }
    }
    lp += categorical(dist.global_logits.data(), dist.b_max + 1).logp[action.global_budget];
    lp += std::log(action.stop ? dist.stop_prob : 1.0 - dist.stop_prob);
    return lp;
}

double distribution_entropy(const ActionDistribution& dist) {
    const int nb = dist.m_max + 1;
    double h = 0.0;
    for (int i = 0; i < dist.n_tiles(); ++i) {
        const double p = dist.select_prob[i];
        h += bernoulli_entropy(p) +
             p * categorical(dist.budget_logits.data() + static_cast<size_t>(i) * nb, nb).entropy;
    }
    h += categorical(dist.global_logits.data(), dist.b_max + 1).entropy;
    h += bernoulli_entropy(dist.stop_prob);
    return h;
}

namespace {

/// d p / d z for a clamped sigmoid (zero where the clamp is active).
double clamped_dsigmoid(double p) {
    if (p <= kProbClamp || p >= 1.0 - kProbClamp) return 0.0;
    return p * (1.0 - p);
}

}  // namespace

HeadGrads log_prob_entropy_grads(const ActionDistribution& dist, const RefinementAction& action, double w_logp,
                                 double w_ent) {
    check_dims(dist, action);
    const int n = dist.n_tiles(), nb = dist.m_max + 1;
    HeadGrads g{Tensor(dist.m_max + 2, dist.n_rows, dist.n_cols), Tensor::vec(std::vector<float>(dist.b_max + 2))};
    for (int i = 0; i < n; ++i) {
        const double p = dist.select_prob[i];
        const double dp = clamped_dsigmoid(p);
        const auto cat = categorical(dist.budget_logits.data() + static_cast<size_t>(i) * nb, nb);
        const bool sel = action.tile_select[i] > 0.0f;
        // select logit: log-prob term, Bernoulli entropy, and p * H(budget)
        double dz = w_logp * (sel ? dp / p : -dp / (1.0 - p));
        dz += w_ent * (std::log((1.0 - p) / p) + cat.entropy) * dp;
        g.spatial.channel(0)[i] = static_cast<float>(dz);
        for (int m = 0; m < nb; ++m) {
            double dl = 0.0;
            if (sel) dl += w_logp * ((m == action.tile_budget[i] ? 1.0 : 0.0) - cat.p[m]);
            dl += w_ent * p * (-cat.p[m] * (cat.logp[m] + cat.entropy));
            g.spatial.channel(m + 1)[i] = static_cast<float>(dl);
        }
    }
    const auto gc = categorical(dist.global_logits.data(), dist.b_max + 1);
    for (int b = 0; b <= dist.b_max; ++b) {
        const double dl = w_logp * ((b == action.global_budget ? 1.0 : 0.0) - gc.p[b]) +
                          w_ent * (-gc.p[b] * (gc.logp[b] + gc.entropy));
        g.global.v[b] = static_cast<float>(dl);
    }
    const double q = dist.stop_prob, dq = clamped_dsigmoid(q);
    const double ds = w_logp * (action.stop ? dq / q : -dq / (1.0 - q)) + w_ent * std::log((1.0 - q) / q) * dq;
    g.global.v[dist.b_max + 1] = static_cast<float>(ds);
    return g;
}

PolicyDecision ControllerPolicy::decide(const StepObservation& obs, Rng& rng) {
    Tensor f = extract_state_features(obs.x_A, obs.x_k, obs.x_coarse, obs.u, obs.body_mask, obs.k, obs.K);
    const PolicyOutput out = policy_forward(ctrl_, f, obs.grid.tile_size);
    if (out.dist.n_rows != obs.grid.n_rows || out.dist.n_cols != obs.grid.n_cols)
        throw ContractError("controller tile grid does not match the rollout tile grid");
    SampledAction s = sample_action(out.dist, rng, mode_);
    features.push_back(std::move(f));
    PolicyDecision d;
    d.action = std::move(s.action);
    d.priority.assign(out.dist.select_prob.begin(), out.dist.select_prob.end());
    d.log_prob = s.log_prob;
    d.entropy = s.entropy;
    d.value = out.value;
    return d;
}

void save_controller(const Controller& ctrl, const std::filesystem::path& path, int episodes) {
    Container c;
    c.meta = {{"kind", "controller"},
              {"format_version", 1},
              {"config", ctrl.config().to_json()},
              {"seed", ctrl.config().seed},
              {"episodes", episodes}};
    c.arrays = ctrl.params().to_arrays();
    write_container(path, c);
}

Controller load_controller(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "controller") throw FormatError(path.string() + ": not a controller checkpoint");
    Controller ctrl(ControllerConfig::from_json(c.meta.at("config")));
    ctrl.params().load_arrays(c.arrays);
    return ctrl;
}

}  // namespace racmf
