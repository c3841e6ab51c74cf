#include "racmf/cmf.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "racmf/container.hpp"
#include "racmf/json_util.hpp"

namespace racmf {

using nn::Tensor;

void TimePair::validate() const {
    if (!(r >= 0.0 && t <= 1.0 && r <= t)) {
        std::ostringstream os;
        os << "time pair requires 0 <= r <= t <= 1, got r=" << r << " t=" << t;
        throw PreconditionError(os.str());
    }
}

void BackboneConfig::validate() const {
    if (base_width < 8) throw SpecError("backbone.base_width", "must be >= 8");
    if (depth < 2) throw SpecError("backbone.depth", "must be >= 2");
    if (embed_dim < 4 || embed_dim % 2) throw SpecError("backbone.embed_dim", "must be even and >= 4");
    if (!(lambda1 >= 0.0)) throw SpecError("backbone.lambda1", "must be >= 0");
    if (!(r_equals_t_prob >= 0.0 && r_equals_t_prob <= 1.0))
        throw SpecError("backbone.r_equals_t_prob", "must be in [0, 1]");
    if (!(learning_rate > 0.0)) throw SpecError("backbone.learning_rate", "must be > 0");
    if (steps < 0) throw SpecError("backbone.steps", "must be >= 0");
    if (batch_size < 1) throw SpecError("backbone.batch_size", "must be >= 1");
    if (grad_clip < 0.0) throw SpecError("backbone.grad_clip", "must be >= 0");
}

nlohmann::ordered_json BackboneConfig::to_json() const {
    nlohmann::ordered_json j;
    j["base_width"] = base_width;
    j["depth"] = depth;
    j["embed_dim"] = embed_dim;
    j["lambda1"] = lambda1;
    j["r_equals_t_prob"] = r_equals_t_prob;
    j["learning_rate"] = learning_rate;
    j["steps"] = steps;
    j["batch_size"] = batch_size;
    j["seed"] = seed;
    j["grad_clip"] = grad_clip;
    return j;
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
    BackboneConfig c;
    StrictObject o(j, "backbone");
    o.get("base_width", c.base_width)
        .get("depth", c.depth)
        .get("embed_dim", c.embed_dim)
        .get("lambda1", c.lambda1)
        .get("r_equals_t_prob", c.r_equals_t_prob)
        .get("learning_rate", c.learning_rate)
        .get("steps", c.steps)
        .get("batch_size", c.batch_size)
        .get("seed", c.seed)
        .get("grad_clip", c.grad_clip);
    o.finish();
    c.validate();
    return c;
}

// ---- time embedding features -------------------------------------------------

namespace {

double frequency(int i, int n) {
    // cycles per unit time, geometric from 1 down to 1e-4
    return n == 1 ? 1.0 : std::pow(10.0, -4.0 * i / (n - 1));
}

}  // namespace

std::vector<float> rt_features(double r, double t, int embed_dim) {
    const int n = embed_dim / 2;
    std::vector<float> f(2 * embed_dim + 1);
    for (int k = 0; k < 2; ++k) {
        const double x = k == 0 ? r : t;
        for (int i = 0; i < n; ++i) {
            const double w = 2.0 * std::numbers::pi * frequency(i, n);
            f[k * embed_dim + i] = static_cast<float>(std::sin(w * x));
            f[k * embed_dim + n + i] = static_cast<float>(std::cos(w * x));
        }
    }
    f[2 * embed_dim] = static_cast<float>(t - r);
    return f;
}

std::vector<float> rt_features_dt(double /*r*/, double t, int embed_dim) {
    const int n = embed_dim / 2;
    std::vector<float> f(2 * embed_dim + 1, 0.0f);
    for (int i = 0; i < n; ++i) {
        const double w = 2.0 * std::numbers::pi * frequency(i, n);
        f[embed_dim + i] = static_cast<float>(w * std::cos(w * t));
        f[embed_dim + n + i] = static_cast<float>(-w * std::sin(w * t));
    }
    f[2 * embed_dim] = 1.0f;
    return f;
}

// ---- network -----------------------------------------------------------------

ConditionalUNet::ResBlock ConditionalUNet::make_block(const std::string& name, int cin, int cout, Rng& rng) {
    ResBlock b;
    b.conv1 = nn::make_conv(params_, name + ".conv1", cin, cout, 3, rng);
    b.mod = nn::make_linear(params_, name + ".mod", cfg_.embed_dim, 2 * cout, rng, 0.5f);
    b.conv2 = nn::make_conv(params_, name + ".conv2", cout, cout, 3, rng, 0.5f);
    b.has_skip = cin != cout;
    if (b.has_skip) b.skip = nn::make_conv(params_, name + ".skip", cin, cout, 1, rng);
    return b;
}

ConditionalUNet::ConditionalUNet(const BackboneConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg_.seed, 77));
    const int E = cfg_.embed_dim, D = cfg_.depth;
    emb1_ = nn::make_linear(params_, "rt_embed.fc1", 2 * E + 1, E, rng);
    emb2_ = nn::make_linear(params_, "rt_embed.fc2", E, E, rng);
    in_conv_ = nn::make_conv(params_, "in_conv", 2, cfg_.base_width, 3, rng);
    int ch = cfg_.base_width;
    for (int l = 0; l < D; ++l) {
        const int out = cfg_.base_width << l;
        down_.push_back(make_block("down" + std::to_string(l), ch, out, rng));
        ch = out;
    }
    mid_ = make_block("mid", ch, ch, rng);
    for (int l = D - 1; l >= 0; --l) {
        const int skip_ch = cfg_.base_width << l;
        up_.push_back(make_block("up" + std::to_string(l), ch + skip_ch, skip_ch, rng));
        ch = skip_ch;
    }
    out_conv_ = nn::make_conv(params_, "out_conv", cfg_.base_width, 1, 3, rng, 0.5f);
}

template <class Ctx>
typename Ctx::Value ConditionalUNet::block(Ctx& ctx, const ResBlock& b, const typename Ctx::Value& x,
                                           const typename Ctx::Value& emb) const {
    auto h = ctx.conv(ctx.silu(x), b.conv1);
    h = ctx.film(h, ctx.lin(emb, b.mod));
    h = ctx.conv(ctx.silu(h), b.conv2);
    return ctx.add(h, b.has_skip ? ctx.conv(x, b.skip) : x);
}

template <class Ctx>
typename Ctx::Value ConditionalUNet::apply(Ctx& ctx, const typename Ctx::Value& input,
                                           const typename Ctx::Value& times) const {
    const auto c_emb = ctx.lin(ctx.silu(ctx.lin(times, emb1_)), emb2_);
    const auto emb = ctx.silu(c_emb);
    const int D = cfg_.depth;
    auto h = ctx.conv(input, in_conv_);
    std::vector<typename Ctx::Value> skips;
    for (int l = 0; l < D; ++l) {
        h = block(ctx, down_[l], h, emb);
        skips.push_back(h);
        if (l + 1 < D) h = ctx.pool2(h);
    }
    h = block(ctx, mid_, h, emb);
    for (int l = D - 1; l >= 0; --l) {
        h = ctx.cat(h, skips[l]);
        h = block(ctx, up_[D - 1 - l], h, emb);
        if (l > 0) h = ctx.up2(h);
    }
    return ctx.conv(ctx.silu(h), out_conv_);
}

template nn::EvalCtx::Value ConditionalUNet::apply(nn::EvalCtx&, const nn::EvalCtx::Value&,
                                                    const nn::EvalCtx::Value&) const;
template nn::DualCtx::Value ConditionalUNet::apply(nn::DualCtx&, const nn::DualCtx::Value&,
                                                    const nn::DualCtx::Value&) const;
template nn::TapeCtx::Value ConditionalUNet::apply(nn::TapeCtx&, const nn::TapeCtx::Value&,
                                                    const nn::TapeCtx::Value&) const;

void ConditionalUNet::check_inputs(const Image& x, const Image& x_A, double r, double t) const {
    require_same_shape(x, x_A, "flow network input");
    const int f = 1 << (cfg_.depth - 1);
    if (x.rows % f || x.cols % f) {
        throw DimensionError("flow network: image " + shape_str(x.rows, x.cols) + " must be divisible by " +
                             std::to_string(f) + " for depth " + std::to_string(cfg_.depth));
    }
    TimePair{r, t}.validate();
}

Image ConditionalUNet::forward(const Image& x, const Image& x_A, double r, double t) const {
    check_inputs(x, x_A, r, t);
    nn::EvalCtx ctx(params_.data());
    return apply(ctx, nn::stack_images({&x, &x_A}), Tensor::vec(rt_features(r, t, cfg_.embed_dim))).to_image();
}

JvpResult ConditionalUNet::jvp(const Image& x, const Image& x_A, double r, double t, const Image& dx,
                               double dt) const {
    check_inputs(x, x_A, r, t);
    require_same_shape(x, dx, "jvp tangent");
    const Image zero(x.rows, x.cols, 0.0f);
    nn::Dual input{nn::stack_images({&x, &x_A}), nn::stack_images({&dx, &zero})};
    auto dfeat = rt_features_dt(r, t, cfg_.embed_dim);
    for (auto& v : dfeat) v = static_cast<float>(v * dt);
    nn::Dual times{Tensor::vec(rt_features(r, t, cfg_.embed_dim)), Tensor::vec(std::move(dfeat))};
    nn::DualCtx ctx(params_.data());
    const auto out = apply(ctx, input, times);
    return {out.p.to_image(), out.t.to_image()};
}

std::vector<float> ConditionalUNet::rt_embed(double r, double t) const {
    TimePair{r, t}.validate();
    nn::EvalCtx ctx(params_.data());
    const auto f = Tensor::vec(rt_features(r, t, cfg_.embed_dim));
    return ctx.lin(ctx.silu(ctx.lin(f, emb1_)), emb2_).v;
}

// ---- objective -----------------------------------------------------------------

Image make_intermediate(const Image& x_B, const Image& e, double t) {
    require_same_shape(x_B, e, "make_intermediate");
    if (!(t >= 0.0 && t <= 1.0)) throw PreconditionError("make_intermediate: t must be in [0, 1]");
    Image out(x_B.rows, x_B.cols);
    const auto a = static_cast<float>(1.0 - t), b = static_cast<float>(t);
    for (size_t i = 0; i < out.size(); ++i) out[i] = a * x_B[i] + b * e[i];
    return out;
}

TrainingSample make_training_sample(const Image& x_A, const Image& x_B, const Image& e, const TimePair& tp) {
    tp.validate();
    require_same_shape(x_A, x_B, "training sample");
    require_same_shape(x_B, e, "training sample");
    TrainingSample s;
    s.x_A = x_A;
    s.x_B = x_B;
    s.e = e;
    s.times = tp;
    s.x_t = make_intermediate(x_B, e, tp.t);
    s.v = Image(x_B.rows, x_B.cols);
    for (size_t i = 0; i < s.v.size(); ++i) s.v[i] = e[i] - x_B[i];
    return s;
}

Image meanflow_target(const FlowModel& net, const Image& x_t, const Image& x_A, const TimePair& tp, const Image& v) {
    tp.validate();
    require_same_shape(x_t, v, "meanflow_target");
    if (tp.t == tp.r) return v;
    const auto j = net.jvp(x_t, x_A, tp.r, tp.t, v, 1.0);
    const auto width = static_cast<float>(tp.t - tp.r);
    Image target(v.rows, v.cols);
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(j.du[i])) {
            std::ostringstream os;
            os << "meanflow_target: non-finite du/dt at pixel " << i << " (r=" << tp.r << ", t=" << tp.t << ")";
            throw NumericalError(os.str());
        }
        target[i] = v[i] - width * j.du[i];
    }
    return target;
}

double mean_abs_diff(const Image& a, const Image& b, const char* what) {
    require_same_shape(a, b, what);
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += std::abs(static_cast<double>(a[i]) - b[i]);
    return a.size() ? acc / static_cast<double>(a.size()) : 0.0;
}

Image reconstruct_one_step(const FlowModel& net, const Image& x_t, const Image& x_A, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw PreconditionError("reconstruct_one_step: t must be in [0, 1]");
    const Image u = net.forward(x_t, x_A, 0.0, t);
    Image out(x_t.rows, x_t.cols);
    const auto tf = static_cast<float>(t);
    for (size_t i = 0; i < out.size(); ++i) out[i] = x_t[i] - tf * u[i];
    return out;
}

LossBreakdown base_loss(const TrainingSample& s, const FlowModel& net, const BackboneConfig& cfg) {
    const Image target = meanflow_target(net, s.x_t, s.x_A, s.times, s.v);
    const Image u = net.forward(s.x_t, s.x_A, s.times.r, s.times.t);
    const double mf = meanflow_loss(u, target);
    const double img = image_loss(reconstruct_one_step(net, s.x_t, s.x_A, s.times.t), s.x_B);
    return combine_losses(mf, img, cfg.lambda1);
}

namespace {

inline float sgn(float x) { return static_cast<float>((x > 0.0f) - (x < 0.0f)); }

}  // namespace

LossBreakdown base_loss_grad(const TrainingSample& s, const ConditionalUNet& net, const BackboneConfig& cfg,
                             std::vector<float>& grads, float weight) {
    if (grads.size() != net.params().size()) throw DimensionError("base_loss_grad: gradient buffer size mismatch");
    const Image target = meanflow_target(net, s.x_t, s.x_A, s.times, s.v);
    const int E = net.config().embed_dim;
    const double r = s.times.r, t = s.times.t;
    const auto n = static_cast<float>(s.x_t.size());

    nn::TapeCtx tape(net.params().data());
    const auto input = tape.input(nn::stack_images({&s.x_t, &s.x_A}));
    const auto out_rt = net.apply(tape, input, tape.input(Tensor::vec(rt_features(r, t, E))));
    const auto out_0t = r == 0.0 ? out_rt : net.apply(tape, input, tape.input(Tensor::vec(rt_features(0.0, t, E))));
    const Tensor& u = tape.value(out_rt);
    const Tensor& u0 = tape.value(out_0t);

    double mf = 0.0, img = 0.0;
    Tensor g_rt(1, s.x_t.rows, s.x_t.cols), g_0t(1, s.x_t.rows, s.x_t.cols);
    const auto tf = static_cast<float>(t);
    const auto img_w = static_cast<float>(cfg.lambda1);
    for (size_t i = 0; i < u.size(); ++i) {
        const float d = u.v[i] - target[i];
        mf += std::abs(static_cast<double>(d));
        g_rt.v[i] = weight * sgn(d) / n;
        const float x0 = s.x_t[i] - tf * u0.v[i];
        const float e = x0 - s.x_B[i];
        img += std::abs(static_cast<double>(e));
        g_0t.v[i] = weight * img_w * (-tf) * sgn(e) / n;
    }
    if (out_0t == out_rt) {
        for (size_t i = 0; i < g_rt.size(); ++i) g_rt.v[i] += g_0t.v[i];
        tape.backward({{out_rt, g_rt}}, grads.data());
    } else {
        tape.backward({{out_rt, g_rt}, {out_0t, g_0t}}, grads.data());
    }
    return combine_losses(mf / n, img / n, cfg.lambda1);
}

TimePair sample_time_pair(Rng& rng, const BackboneConfig& cfg) {
    TimePair tp;
    tp.t = uniform01(rng);
    const double coin = uniform01(rng);
    const double rr = uniform01(rng) * tp.t;
    tp.r = coin < cfg.r_equals_t_prob ? tp.t : rr;
    return tp;
}

Image standard_normal_image(int rows, int cols, Rng& rng) {
    Image e(rows, cols);
    for (auto& v : e.data) v = standard_normal(rng);
    return e;
}

TrainBackboneResult train_backbone(ConditionalUNet& net, const std::vector<const ImagePair*>& train,
                                   const BackboneConfig& cfg, const std::function<void(const LossRecord&)>& on_step) {
    if (train.empty()) throw PreconditionError("train_backbone: empty training split");
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, 100));
    nn::Adam opt;
    opt.lr = cfg.learning_rate;
    std::vector<float> grads(net.params().size());
    TrainBackboneResult res;
    const float w = 1.0f / static_cast<float>(cfg.batch_size);
    for (int step = 0; step < cfg.steps; ++step) {
        std::fill(grads.begin(), grads.end(), 0.0f);
        LossRecord rec;
        rec.step = step;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const ImagePair& p = *train[rng() % train.size()];
            const Image e = standard_normal_image(p.target.rows, p.target.cols, rng);
            const TimePair tp = sample_time_pair(rng, cfg);
            const auto l = base_loss_grad(make_training_sample(p.source, p.target, e, tp), net, cfg, grads, w);
            rec.total += l.total / cfg.batch_size;
            rec.mf += l.mf / cfg.batch_size;
            rec.img += l.img / cfg.batch_size;
        }
        if (!std::isfinite(rec.total) || !std::isfinite(rec.mf) || !std::isfinite(rec.img)) {
            std::ostringstream os;
            os << "train_backbone: non-finite loss at step " << step << " (L_mf=" << rec.mf << ", L_img=" << rec.img
               << ")";
            throw NumericalError(os.str());
        }
        nn::clip_grad_norm(grads, cfg.grad_clip);
        opt.step(net.params().values(), grads);
        res.history.push_back(rec);
        if (on_step) on_step(rec);
    }
    return res;
}

double evaluate_image_loss(const FlowModel& net, const std::vector<const ImagePair*>& pairs, std::uint64_t seed) {
    if (pairs.empty()) return 0.0;
    Rng rng(derive_seed(seed, 200));
    double acc = 0.0;
    for (const auto* p : pairs) {
        const Image e = standard_normal_image(p->target.rows, p->target.cols, rng);
        acc += image_loss(reconstruct_one_step(net, e, p->source, 1.0), p->target);
    }
    return acc / static_cast<double>(pairs.size());
}

void save_backbone(const ConditionalUNet& net, const std::filesystem::path& path, int step_count) {
    Container c;
    c.meta = {{"kind", "backbone"},
              {"format_version", 1},
              {"config", net.config().to_json()},
              {"seed", net.config().seed},
              {"step_count", step_count}};
    c.arrays = net.params().to_arrays();
    write_container(path, c);
}

ConditionalUNet load_backbone(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "backbone") throw FormatError(path.string() + ": not a backbone checkpoint");
    ConditionalUNet net(BackboneConfig::from_json(c.meta.at("config")));
    net.params().load_arrays(c.arrays);
    return net;
}

}  // namespace racmf
