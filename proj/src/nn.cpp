#include "racmf/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace racmf::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// Owning copies keep every matrix operand at Eigen's maximal alignment. Eigen
// picks its vectorized summation order from operand addresses, so mapping
// arbitrary heap buffers directly would make results depend on where the
// allocator happened to place them.
RowMat owned(const float* p, Eigen::Index rows, Eigen::Index cols) { return CMapMat(p, rows, cols); }

// col[(ci*k + ky)*k + kx][y*W + x] = x[ci][y + ky - pad][x + kx - pad]
RowMat im2col(const Tensor& x, int k) {
    const int pad = k / 2, H = x.h, W = x.w;
    const auto HW = static_cast<Eigen::Index>(x.plane());
    RowMat col = RowMat::Zero(static_cast<Eigen::Index>(x.c) * k * k, HW);
    for (int ci = 0; ci < x.c; ++ci) {
        const float* src = x.channel(ci);
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                float* dst = col.row((ci * k + ky) * k + kx).data();
                const int dy = ky - pad, dx = kx - pad;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + dy;
                    if (sy < 0 || sy >= H) continue;
                    const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                    std::copy(src + sy * W + x0 + dx, src + sy * W + x1 + dx, dst + y * W + x0);
                }
            }
    }
    return col;
}

void col2im(const RowMat& col, int k, Tensor& dx) {
    const int pad = k / 2, H = dx.h, W = dx.w;
    for (int ci = 0; ci < dx.c; ++ci) {
        float* dst = dx.channel(ci);
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const float* src = col.row((ci * k + ky) * k + kx).data();
                const int oy = ky - pad, ox = kx - pad;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + oy;
                    if (sy < 0 || sy >= H) continue;
                    const int x0 = std::max(0, -ox), x1 = std::min(W, W - ox);
                    for (int xx = x0; xx < x1; ++xx) dst[sy * W + xx + ox] += src[y * W + xx];
                }
            }
    }
}

void require(bool ok, const char* what) {
    if (!ok) throw DimensionError(what);
}

}  // namespace

Tensor Tensor::from_image(const Image& img) {
    Tensor t(1, img.rows, img.cols);
    t.v = img.data;
    return t;
}

Tensor Tensor::vec(std::vector<float> values) {
    Tensor t;
    t.c = static_cast<int>(values.size());
    t.h = t.w = 1;
    t.v = std::move(values);
    return t;
}

Image Tensor::to_image(int ci) const {
    Image img(h, w);
    std::copy(channel(ci), channel(ci) + plane(), img.data.begin());
    return img;
}

Tensor stack_images(std::initializer_list<const Image*> images) {
    const Image& first = **images.begin();
    Tensor t(static_cast<int>(images.size()), first.rows, first.cols);
    int ci = 0;
    for (const Image* img : images) {
        require_same_shape(first, *img, "stack_images");
        std::copy(img->data.begin(), img->data.end(), t.channel(ci++));
    }
    return t;
}

// ---- parameters ------------------------------------------------------------

size_t ParamSet::add(const std::string& name, std::vector<std::int64_t> shape) {
    ParamSpec s;
    s.name = name;
    s.shape = std::move(shape);
    s.offset = values_.size();
    s.size = 1;
    for (auto d : s.shape) s.size *= static_cast<size_t>(d);
    values_.resize(values_.size() + s.size, 0.0f);
    specs_.push_back(s);
    return s.offset;
}

std::vector<NamedArray> ParamSet::to_arrays() const {
    std::vector<NamedArray> out;
    for (const auto& s : specs_) {
        out.push_back(NamedArray::from_floats(
            s.name, s.shape,
            std::vector<float>(values_.begin() + static_cast<std::ptrdiff_t>(s.offset),
                               values_.begin() + static_cast<std::ptrdiff_t>(s.offset + s.size))));
    }
    return out;
}

void ParamSet::load_arrays(const std::vector<NamedArray>& arrays) {
    for (const auto& s : specs_) {
        const NamedArray* hit = nullptr;
        for (const auto& a : arrays)
            if (a.name == s.name) hit = &a;
        if (!hit) throw FormatError("checkpoint is missing parameter '" + s.name + "'");
        if (hit->dtype != DType::F32 || hit->shape != s.shape)
            throw FormatError("checkpoint parameter '" + s.name + "' has an unexpected shape or dtype");
        std::copy(hit->f32.begin(), hit->f32.end(), values_.begin() + static_cast<std::ptrdiff_t>(s.offset));
    }
}

std::uint32_t ParamSet::checksum() const {
    return crc32_bytes(reinterpret_cast<const std::uint8_t*>(values_.data()), values_.size() * sizeof(float));
}

Conv2d make_conv(ParamSet& ps, const std::string& name, int cin, int cout, int k, Rng& rng, float gain) {
    Conv2d L{cin, cout, k, 0, 0};
    L.w_off = ps.add(name + ".weight", {cout, cin, k, k});
    L.b_off = ps.add(name + ".bias", {cout});
    const double bound = gain * std::sqrt(3.0 / (cin * k * k));
    auto& v = ps.values();
    for (size_t i = 0; i < static_cast<size_t>(cout) * cin * k * k; ++i)
        v[L.w_off + i] = static_cast<float>(uniform(rng, -bound, bound));
    return L;
}

Linear make_linear(ParamSet& ps, const std::string& name, int in, int out, Rng& rng, float gain) {
    Linear L{in, out, 0, 0};
    L.w_off = ps.add(name + ".weight", {out, in});
    L.b_off = ps.add(name + ".bias", {out});
    const double bound = gain * std::sqrt(3.0 / in);
    auto& v = ps.values();
    for (size_t i = 0; i < static_cast<size_t>(out) * in; ++i)
        v[L.w_off + i] = static_cast<float>(uniform(rng, -bound, bound));
    return L;
}

// ---- kernels ---------------------------------------------------------------

Tensor conv2d(const float* params, const Conv2d& L, const Tensor& x, bool bias) {
    require(x.c == L.cin, "conv2d: input channel mismatch");
    Tensor y(L.cout, x.h, x.w);
    const int K = L.cin * L.k * L.k;
    const auto HW = static_cast<Eigen::Index>(x.plane());
    const RowMat W = owned(params + L.w_off, L.cout, K);
    const RowMat col = L.k == 1 ? owned(x.v.data(), K, HW) : im2col(x, L.k);
    RowMat Y = W * col;
    if (bias) {
        for (int co = 0; co < L.cout; ++co) Y.row(co).array() += params[L.b_off + co];
    }
    MapMat(y.v.data(), L.cout, HW) = Y;
    return y;
}

Tensor conv2d_backward(const float* params, const Conv2d& L, const Tensor& x, const Tensor& dy, float* grads,
                       bool want_dx) {
    const int K = L.cin * L.k * L.k;
    const auto HW = static_cast<Eigen::Index>(x.plane());
    const RowMat dY = owned(dy.v.data(), L.cout, HW);
    const RowMat col = L.k == 1 ? owned(x.v.data(), K, HW) : im2col(x, L.k);
    const RowMat dW = dY * col.transpose();
    MapMat(grads + L.w_off, L.cout, K) += dW;
    for (int co = 0; co < L.cout; ++co) grads[L.b_off + co] += dY.row(co).sum();
    if (!want_dx) return {};
    const RowMat dcol = owned(params + L.w_off, L.cout, K).transpose() * dY;
    Tensor dx(L.cin, x.h, x.w);
    if (L.k == 1)
        MapMat(dx.v.data(), K, HW) = dcol;
    else
        col2im(dcol, L.k, dx);
    return dx;
}

Tensor linear(const float* params, const Linear& L, const Tensor& x, bool bias) {
    require(static_cast<int>(x.size()) == L.in, "linear: input size mismatch");
    Tensor y = Tensor::vec(std::vector<float>(L.out));
    const Eigen::VectorXf out = owned(params + L.w_off, L.out, L.in) * Eigen::VectorXf(owned(x.v.data(), L.in, 1));
    Eigen::Map<Eigen::VectorXf>(y.v.data(), L.out) = out;
    if (bias)
        for (int o = 0; o < L.out; ++o) y.v[o] += params[L.b_off + o];
    return y;
}

Tensor linear_backward(const float* params, const Linear& L, const Tensor& x, const Tensor& dy, float* grads,
                       bool want_dx) {
    const Eigen::VectorXf g = owned(dy.v.data(), L.out, 1), xin = owned(x.v.data(), L.in, 1);
    const RowMat dW = g * xin.transpose();
    MapMat(grads + L.w_off, L.out, L.in) += dW;
    for (int o = 0; o < L.out; ++o) grads[L.b_off + o] += dy.v[o];
    if (!want_dx) return {};
    Tensor dx = x;
    const Eigen::VectorXf d = owned(params + L.w_off, L.out, L.in).transpose() * g;
    Eigen::Map<Eigen::VectorXf>(dx.v.data(), L.in) = d;
    return dx;
}

Tensor silu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.v) v = v * sigmoid(v);
    return y;
}

Tensor silu_grad_mul(const Tensor& x, const Tensor& d) {
    Tensor y = d;
    for (size_t i = 0; i < y.size(); ++i) {
        const float s = sigmoid(x.v[i]);
        y.v[i] *= s * (1.0f + x.v[i] * (1.0f - s));
    }
    return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "add: shape mismatch");
    Tensor y = a;
    for (size_t i = 0; i < y.size(); ++i) y.v[i] += b.v[i];
    return y;
}

Tensor scale(const Tensor& a, float s) {
    Tensor y = a;
    for (auto& v : y.v) v *= s;
    return y;
}

Tensor film(const Tensor& h, const Tensor& ss) {
    require(static_cast<int>(ss.size()) == 2 * h.c, "film: modulation size mismatch");
    Tensor y = h;
    for (int ci = 0; ci < h.c; ++ci) {
        const float g = 1.0f + ss.v[ci], b = ss.v[h.c + ci];
        float* p = y.channel(ci);
        for (size_t i = 0; i < h.plane(); ++i) p[i] = p[i] * g + b;
    }
    return y;
}

Tensor avgpool2(const Tensor& x) {
    require(x.h % 2 == 0 && x.w % 2 == 0, "avgpool2: odd spatial size");
    Tensor y(x.c, x.h / 2, x.w / 2);
    for (int ci = 0; ci < x.c; ++ci) {
        const float* s = x.channel(ci);
        float* d = y.channel(ci);
        for (int r = 0; r < y.h; ++r)
            for (int c = 0; c < y.w; ++c)
                d[r * y.w + c] = 0.25f * (s[2 * r * x.w + 2 * c] + s[2 * r * x.w + 2 * c + 1] +
                                          s[(2 * r + 1) * x.w + 2 * c] + s[(2 * r + 1) * x.w + 2 * c + 1]);
    }
    return y;
}

Tensor avgpool2_backward(const Tensor& dy, int h, int w) {
    Tensor dx(dy.c, h, w);
    for (int ci = 0; ci < dy.c; ++ci) {
        const float* s = dy.channel(ci);
        float* d = dx.channel(ci);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) d[r * w + c] = 0.25f * s[(r / 2) * dy.w + c / 2];
    }
    return dx;
}

Tensor upsample2(const Tensor& x) {
    Tensor y(x.c, x.h * 2, x.w * 2);
    for (int ci = 0; ci < x.c; ++ci) {
        const float* s = x.channel(ci);
        float* d = y.channel(ci);
        for (int r = 0; r < y.h; ++r)
            for (int c = 0; c < y.w; ++c) d[r * y.w + c] = s[(r / 2) * x.w + c / 2];
    }
    return y;
}

Tensor upsample2_backward(const Tensor& dy) {
    Tensor dx(dy.c, dy.h / 2, dy.w / 2);
    for (int ci = 0; ci < dy.c; ++ci) {
        const float* s = dy.channel(ci);
        float* d = dx.channel(ci);
        for (int r = 0; r < dy.h; ++r)
            for (int c = 0; c < dy.w; ++c) d[(r / 2) * dx.w + c / 2] += s[r * dy.w + c];
    }
    return dx;
}

Tensor concat(const Tensor& a, const Tensor& b) {
    require(a.h == b.h && a.w == b.w, "concat: spatial mismatch");
    Tensor y(a.c + b.c, a.h, a.w);
    std::copy(a.v.begin(), a.v.end(), y.v.begin());
    std::copy(b.v.begin(), b.v.end(), y.v.begin() + static_cast<std::ptrdiff_t>(a.size()));
    return y;
}

Tensor tile_pool(const Tensor& x, int tile) {
    const int gh = (x.h + tile - 1) / tile, gw = (x.w + tile - 1) / tile;
    Tensor y(x.c, gh, gw);
    for (int ci = 0; ci < x.c; ++ci) {
        const float* s = x.channel(ci);
        float* d = y.channel(ci);
        for (int r = 0; r < x.h; ++r)
            for (int c = 0; c < x.w; ++c) d[(r / tile) * gw + c / tile] += s[r * x.w + c];
        for (int tr = 0; tr < gh; ++tr)
            for (int tc = 0; tc < gw; ++tc) {
                const int n = (std::min(x.h, (tr + 1) * tile) - tr * tile) * (std::min(x.w, (tc + 1) * tile) - tc * tile);
                d[tr * gw + tc] /= static_cast<float>(n);
            }
    }
    return y;
}

Tensor tile_pool_backward(const Tensor& dy, int tile, int h, int w) {
    Tensor dx(dy.c, h, w);
    for (int ci = 0; ci < dy.c; ++ci) {
        const float* s = dy.channel(ci);
        float* d = dx.channel(ci);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                const int tr = r / tile, tc = c / tile;
                const int n = (std::min(h, (tr + 1) * tile) - tr * tile) * (std::min(w, (tc + 1) * tile) - tc * tile);
                d[r * w + c] = s[tr * dy.w + tc] / static_cast<float>(n);
            }
    }
    return dx;
}

Tensor global_mean(const Tensor& x) {
    Tensor y(x.c, 1, 1);
    for (int ci = 0; ci < x.c; ++ci) {
        double acc = 0.0;
        const float* s = x.channel(ci);
        for (size_t i = 0; i < x.plane(); ++i) acc += s[i];
        y.v[ci] = static_cast<float>(acc / static_cast<double>(x.plane()));
    }
    return y;
}

Tensor global_mean_backward(const Tensor& dy, int h, int w) {
    Tensor dx(dy.c, h, w);
    const float inv = 1.0f / static_cast<float>(h * w);
    for (int ci = 0; ci < dy.c; ++ci) std::fill(dx.channel(ci), dx.channel(ci) + dx.plane(), dy.v[ci] * inv);
    return dx;
}

// ---- DualCtx ---------------------------------------------------------------

Dual DualCtx::conv(const Dual& x, const Conv2d& L) { return {conv2d(p_, L, x.p), conv2d(p_, L, x.t, false)}; }

Dual DualCtx::lin(const Dual& x, const Linear& L) { return {linear(p_, L, x.p), linear(p_, L, x.t, false)}; }

Dual DualCtx::silu(const Dual& x) { return {nn::silu(x.p), silu_grad_mul(x.p, x.t)}; }

Dual DualCtx::add(const Dual& a, const Dual& b) { return {nn::add(a.p, b.p), nn::add(a.t, b.t)}; }

Dual DualCtx::film(const Dual& h, const Dual& ss) {
    Dual y{nn::film(h.p, ss.p), Tensor(h.p.c, h.p.h, h.p.w)};
    const int C = h.p.c;
    for (int ci = 0; ci < C; ++ci) {
        const float g = 1.0f + ss.p.v[ci], dg = ss.t.v[ci], db = ss.t.v[C + ci];
        const float* hp = h.p.channel(ci);
        const float* ht = h.t.channel(ci);
        float* d = y.t.channel(ci);
        for (size_t i = 0; i < h.p.plane(); ++i) d[i] = ht[i] * g + hp[i] * dg + db;
    }
    return y;
}

Dual DualCtx::pool2(const Dual& x) { return {avgpool2(x.p), avgpool2(x.t)}; }
Dual DualCtx::up2(const Dual& x) { return {upsample2(x.p), upsample2(x.t)}; }
Dual DualCtx::cat(const Dual& a, const Dual& b) { return {concat(a.p, b.p), concat(a.t, b.t)}; }
Dual DualCtx::tpool(const Dual& x, int tile) { return {tile_pool(x.p, tile), tile_pool(x.t, tile)}; }
Dual DualCtx::gmean(const Dual& x) { return {global_mean(x.p), global_mean(x.t)}; }

// ---- TapeCtx ---------------------------------------------------------------

TapeCtx::Value TapeCtx::push(Tensor value, bool needs_grad, std::function<void(TapeCtx&, const Node&, float*)> back) {
    nodes_.push_back(Node{std::move(value), Tensor{}, needs_grad, std::move(back)});
    return static_cast<Value>(nodes_.size() - 1);
}

TapeCtx::Value TapeCtx::input(Tensor t) { return push(std::move(t), false, nullptr); }

void TapeCtx::accumulate(Value v, const Tensor& g) {
    auto& n = nodes_[v];
    if (!n.needs_grad) return;
    if (n.grad.v.empty())
        n.grad = g;
    else
        for (size_t i = 0; i < g.size(); ++i) n.grad.v[i] += g.v[i];
}

TapeCtx::Value TapeCtx::conv(Value x, const Conv2d& L) {
    return push(conv2d(p_, L, value(x)), true, [x, L](TapeCtx& t, const Node& n, float* g) {
        auto dx = conv2d_backward(t.p_, L, t.value(x), n.grad, g, t.needs(x));
        if (t.needs(x)) t.accumulate(x, dx);
    });
}

TapeCtx::Value TapeCtx::lin(Value x, const Linear& L) {
    return push(linear(p_, L, value(x)), true, [x, L](TapeCtx& t, const Node& n, float* g) {
        auto dx = linear_backward(t.p_, L, t.value(x), n.grad, g, t.needs(x));
        if (t.needs(x)) t.accumulate(x, dx);
    });
}

TapeCtx::Value TapeCtx::silu(Value x) {
    return push(nn::silu(value(x)), needs(x), [x](TapeCtx& t, const Node& n, float*) {
        t.accumulate(x, silu_grad_mul(t.value(x), n.grad));
    });
}

TapeCtx::Value TapeCtx::add(Value a, Value b) {
    return push(nn::add(value(a), value(b)), needs(a) || needs(b), [a, b](TapeCtx& t, const Node& n, float*) {
        t.accumulate(a, n.grad);
        t.accumulate(b, n.grad);
    });
}

TapeCtx::Value TapeCtx::film(Value h, Value ss) {
    return push(nn::film(value(h), value(ss)), needs(h) || needs(ss), [h, ss](TapeCtx& t, const Node& n, float*) {
        const Tensor& hv = t.value(h);
        const Tensor& sv = t.value(ss);
        const int C = hv.c;
        Tensor dh(hv.c, hv.h, hv.w);
        Tensor dss(2 * C, 1, 1);
        for (int ci = 0; ci < C; ++ci) {
            const float gmul = 1.0f + sv.v[ci];
            const float* gy = n.grad.channel(ci);
            const float* hp = hv.channel(ci);
            float* d = dh.channel(ci);
            double dsum = 0.0, bsum = 0.0;
            for (size_t i = 0; i < hv.plane(); ++i) {
                d[i] = gy[i] * gmul;
                dsum += static_cast<double>(gy[i]) * hp[i];
                bsum += gy[i];
            }
            dss.v[ci] = static_cast<float>(dsum);
            dss.v[C + ci] = static_cast<float>(bsum);
        }
        t.accumulate(h, dh);
        t.accumulate(ss, dss);
    });
}

TapeCtx::Value TapeCtx::pool2(Value x) {
    return push(avgpool2(value(x)), needs(x), [x](TapeCtx& t, const Node& n, float*) {
        t.accumulate(x, avgpool2_backward(n.grad, t.value(x).h, t.value(x).w));
    });
}

TapeCtx::Value TapeCtx::up2(Value x) {
    return push(upsample2(value(x)), needs(x),
                [x](TapeCtx& t, const Node& n, float*) { t.accumulate(x, upsample2_backward(n.grad)); });
}

TapeCtx::Value TapeCtx::cat(Value a, Value b) {
    return push(concat(value(a), value(b)), needs(a) || needs(b), [a, b](TapeCtx& t, const Node& n, float*) {
        const Tensor& av = t.value(a);
        Tensor ga(av.c, av.h, av.w), gb(t.value(b).c, av.h, av.w);
        std::copy(n.grad.v.begin(), n.grad.v.begin() + static_cast<std::ptrdiff_t>(ga.size()), ga.v.begin());
        std::copy(n.grad.v.begin() + static_cast<std::ptrdiff_t>(ga.size()), n.grad.v.end(), gb.v.begin());
        t.accumulate(a, ga);
        t.accumulate(b, gb);
    });
}

TapeCtx::Value TapeCtx::tpool(Value x, int tile) {
    return push(tile_pool(value(x), tile), needs(x), [x, tile](TapeCtx& t, const Node& n, float*) {
        t.accumulate(x, tile_pool_backward(n.grad, tile, t.value(x).h, t.value(x).w));
    });
}

TapeCtx::Value TapeCtx::gmean(Value x) {
    return push(global_mean(value(x)), needs(x), [x](TapeCtx& t, const Node& n, float*) {
        t.accumulate(x, global_mean_backward(n.grad, t.value(x).h, t.value(x).w));
    });
}

void TapeCtx::backward(const std::vector<std::pair<Value, Tensor>>& seeds, float* grads) {
    for (const auto& [v, g] : seeds) {
        if (!nodes_[v].value.same_shape(g)) throw DimensionError("backward: seed gradient shape mismatch");
        accumulate(v, g);
    }
    for (auto i = static_cast<std::ptrdiff_t>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.back || n.grad.v.empty()) continue;
        n.back(*this, n, grads);
        n.grad = Tensor{};  // release early
    }
}

// ---- optimizer ---------------------------------------------------------------

void Adam::step(std::vector<float>& params, const std::vector<float>& grads) {
    if (m.empty()) {
        m.assign(params.size(), 0.0);
        v.assign(params.size(), 0.0);
    }
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        params[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + eps));
    }
}

double clip_grad_norm(std::vector<float>& grads, double max_norm) {
    double sq = 0.0;
    for (float g : grads) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const auto s = static_cast<float>(max_norm / norm);
        for (auto& g : grads) g *= s;
    }
    return norm;
}

}  // namespace racmf::nn
