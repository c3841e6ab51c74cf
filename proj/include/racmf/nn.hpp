#pragma once

// Minimal CPU neural-network engine: CHW tensors, a flat parameter store,
// and three execution contexts sharing one model definition:
//   EvalCtx - plain forward pass
//   DualCtx - forward-mode (primal, tangent) pairs for Jacobian-vector products
//   TapeCtx - records the graph for reverse-mode parameter gradients
//
// Models are written once as `template <class Ctx> Ctx::Value apply(Ctx&, ...)`.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "racmf/container.hpp"
#include "racmf/grid.hpp"
#include "racmf/random.hpp"

namespace racmf::nn {

struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<float> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_, float fill = 0.0f)
        : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, fill) {}

    size_t size() const noexcept { return v.size(); }
    size_t plane() const noexcept { return static_cast<size_t>(h) * w; }
    float* channel(int ci) { return v.data() + ci * plane(); }
    const float* channel(int ci) const { return v.data() + ci * plane(); }
    bool same_shape(const Tensor& o) const noexcept { return c == o.c && h == o.h && w == o.w; }

    static Tensor from_image(const Image& img);
    static Tensor vec(std::vector<float> values);
    Image to_image(int ci = 0) const;
};

/// Stacks single-channel images into one tensor.
Tensor stack_images(std::initializer_list<const Image*> images);

struct ParamSpec {
    std::string name;
    std::vector<std::int64_t> shape;
    size_t offset = 0;
    size_t size = 0;
};

/// Flat parameter storage with a named layout.
class ParamSet {
public:
    size_t add(const std::string& name, std::vector<std::int64_t> shape);

    std::vector<float>& values() noexcept { return values_; }
    const std::vector<float>& values() const noexcept { return values_; }
    const std::vector<ParamSpec>& specs() const noexcept { return specs_; }
    size_t size() const noexcept { return values_.size(); }
    const float* data() const noexcept { return values_.data(); }

    std::vector<NamedArray> to_arrays() const;
    /// Loads values by name; layout must match exactly.
    void load_arrays(const std::vector<NamedArray>& arrays);
    std::uint32_t checksum() const;

private:
    std::vector<ParamSpec> specs_;
    std::vector<float> values_;
};

struct Conv2d {
    int cin = 0, cout = 0, k = 3;
    size_t w_off = 0, b_off = 0;
};

struct Linear {
    int in = 0, out = 0;
    size_t w_off = 0, b_off = 0;
};

/// Registers parameters and initializes them (uniform fan-in scaling, zero bias).
Conv2d make_conv(ParamSet& ps, const std::string& name, int cin, int cout, int k, Rng& rng, float gain = 1.0f);
Linear make_linear(ParamSet& ps, const std::string& name, int in, int out, Rng& rng, float gain = 1.0f);

// ---- kernels ---------------------------------------------------------------

Tensor conv2d(const float* params, const Conv2d& L, const Tensor& x, bool bias = true);
/// Accumulates dW/db into `grads`; returns dx when `want_dx`.
Tensor conv2d_backward(const float* params, const Conv2d& L, const Tensor& x, const Tensor& dy, float* grads,
                       bool want_dx);
Tensor linear(const float* params, const Linear& L, const Tensor& x, bool bias = true);
Tensor linear_backward(const float* params, const Linear& L, const Tensor& x, const Tensor& dy, float* grads,
                       bool want_dx);

Tensor silu(const Tensor& x);
Tensor silu_grad_mul(const Tensor& x, const Tensor& d);  // silu'(x) * d
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
/// y = h * (1 + ss[0:C]) + ss[C:2C], per channel.
Tensor film(const Tensor& h, const Tensor& ss);
Tensor avgpool2(const Tensor& x);
Tensor avgpool2_backward(const Tensor& dy, int h, int w);
Tensor upsample2(const Tensor& x);
Tensor upsample2_backward(const Tensor& dy);
Tensor concat(const Tensor& a, const Tensor& b);
/// Mean over each tile of `tile` x `tile` pixels (partial edge tiles allowed).
Tensor tile_pool(const Tensor& x, int tile);
Tensor tile_pool_backward(const Tensor& dy, int tile, int h, int w);
Tensor global_mean(const Tensor& x);
Tensor global_mean_backward(const Tensor& dy, int h, int w);

// ---- contexts --------------------------------------------------------------

class EvalCtx {
public:
    using Value = Tensor;
    explicit EvalCtx(const float* params) : p_(params) {}

    Value conv(const Value& x, const Conv2d& L) { return conv2d(p_, L, x); }
    Value lin(const Value& x, const Linear& L) { return linear(p_, L, x); }
    Value silu(const Value& x) { return nn::silu(x); }
    Value add(const Value& a, const Value& b) { return nn::add(a, b); }
    Value film(const Value& h, const Value& ss) { return nn::film(h, ss); }
    Value pool2(const Value& x) { return avgpool2(x); }
    Value up2(const Value& x) { return upsample2(x); }
    Value cat(const Value& a, const Value& b) { return concat(a, b); }
    Value tpool(const Value& x, int tile) { return tile_pool(x, tile); }
    Value gmean(const Value& x) { return global_mean(x); }

private:
    const float* p_;
};

/// Forward-mode values: primal `p` and tangent `t` (same shape).
struct Dual {
    Tensor p;
    Tensor t;
};

class DualCtx {
public:
    using Value = Dual;
    explicit DualCtx(const float* params) : p_(params) {}

    Value conv(const Value& x, const Conv2d& L);
    Value lin(const Value& x, const Linear& L);
    Value silu(const Value& x);
    Value add(const Value& a, const Value& b);
    Value film(const Value& h, const Value& ss);
    Value pool2(const Value& x);
    Value up2(const Value& x);
    Value cat(const Value& a, const Value& b);
    Value tpool(const Value& x, int tile);
    Value gmean(const Value& x);

private:
    const float* p_;
};

/// Reverse-mode tape. Values are node handles; parameter gradients are
/// accumulated into the buffer given to backward().
class TapeCtx {
public:
    using Value = int;
    explicit TapeCtx(const float* params) : p_(params) {}

    Value input(Tensor t);
    const Tensor& value(Value v) const { return nodes_[v].value; }

    Value conv(Value x, const Conv2d& L);
    Value lin(Value x, const Linear& L);
    Value silu(Value x);
    Value add(Value a, Value b);
    Value film(Value h, Value ss);
    Value pool2(Value x);
    Value up2(Value x);
    Value cat(Value a, Value b);
    Value tpool(Value x, int tile);
    Value gmean(Value x);

    /// Seeds d(loss)/d(output) for the given nodes and back-propagates,
    /// accumulating into `grads` (size = parameter count).
    void backward(const std::vector<std::pair<Value, Tensor>>& seeds, float* grads);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        std::function<void(TapeCtx&, const Node&, float*)> back;
    };
    Value push(Tensor value, bool needs_grad, std::function<void(TapeCtx&, const Node&, float*)> back);
    void accumulate(Value v, const Tensor& g);
    bool needs(Value v) const { return nodes_[v].needs_grad; }

    const float* p_;
    std::vector<Node> nodes_;
};

// ---- optimizer ---------------------------------------------------------------

struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<double> m, v;
    long step_count = 0;

    void step(std::vector<float>& params, const std::vector<float>& grads);
};

/// Scales `grads` so its L2 norm is at most `max_norm`; returns the pre-clip norm.
double clip_grad_norm(std::vector<float>& grads, double max_norm);

}  // namespace racmf::nn
