// SPDX-License-Identifier: Apache-2.0
#include "ccm/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "ccm/error.hpp"
#include "ccm/rng.hpp"

namespace ccm {

namespace {

struct AxisSplit {
    std::int64_t outer = 1;
    std::int64_t axis = 1;
    std::int64_t inner = 1;
};

AxisSplit split_axis(const std::vector<int>& shape, int axis) {
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw ShapeError("axis out of range");
    AxisSplit s;
    for (int i = 0; i < axis; ++i)
        s.outer *= shape[static_cast<size_t>(i)];
    s.axis = shape[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
        s.inner *= shape[i];
    return s;
}

double sigmoid(double x) {
    return 1.0 / (1.0 + std::exp(-x));
}

// Clamp-to-border bilinear read; pixel centers at integer+0.5.
struct BilinearTaps {
    int x0, x1, y0, y1;
    double w00, w01, w10, w11; // [y][x]
};

BilinearTaps bilinear_taps(int H, int W, double x, double y) {
    double u = x - 0.5;
    double v = y - 0.5;
    double xf = std::floor(u);
    double yf = std::floor(v);
    double fx = u - xf;
    double fy = v - yf;
    auto cl = [](int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); };
    BilinearTaps t;
    t.x0 = cl(static_cast<int>(xf), W);
    t.x1 = cl(static_cast<int>(xf) + 1, W);
    t.y0 = cl(static_cast<int>(yf), H);
    t.y1 = cl(static_cast<int>(yf) + 1, H);
    t.w00 = (1.0 - fy) * (1.0 - fx);
    t.w01 = (1.0 - fy) * fx;
    t.w10 = fy * (1.0 - fx);
    t.w11 = fy * fx;
    return t;
}

struct ConvDims {
    int N, C, H, W, O, K, OH, OW;
    bool rank3;
};

ConvDims conv_dims(const std::vector<int>& xs, const std::vector<int>& ws, int stride, int padding) {
    ConvDims d{};
    d.rank3 = xs.size() == 3;
    if (xs.size() != 3 && xs.size() != 4)
        throw ShapeError("conv2d input must be [C,H,W] or [N,C,H,W]");
    if (ws.size() != 4)
        throw ShapeError("conv2d weight must be [O,C,k,k]");
    d.N = d.rank3 ? 1 : xs[0];
    d.C = xs[d.rank3 ? 0 : 1];
    d.H = xs[d.rank3 ? 1 : 2];
    d.W = xs[d.rank3 ? 2 : 3];
    d.O = ws[0];
    d.K = ws[2];
    if (ws[1] != d.C)
        throw ShapeError("conv2d channel mismatch");
    if (ws[3] != d.K)
        throw ShapeError("conv2d kernel must be square");
    if (d.K % 2 == 0)
        throw ShapeError("conv2d kernel size must be odd");
    if (stride < 1 || padding < 0)
        throw ShapeError("conv2d invalid stride/padding");
    int hn = d.H + 2 * padding - d.K;
    int wn = d.W + 2 * padding - d.K;
    if (hn < 0 || wn < 0 || hn % stride != 0 || wn % stride != 0)
        throw ShapeError("conv2d padding does not yield integer output extents");
    d.OH = hn / stride + 1;
    d.OW = wn / stride + 1;
    return d;
}

void conv2d_forward(const ConvDims& d, const double* x, const double* w, const double* b, int stride, int padding,
                    double* out) {
    const std::int64_t xplane = static_cast<std::int64_t>(d.H) * d.W;
    const std::int64_t oplane = static_cast<std::int64_t>(d.OH) * d.OW;
    for (int n = 0; n < d.N; ++n) {
        const double* xn = x + static_cast<std::int64_t>(n) * d.C * xplane;
        double* on = out + static_cast<std::int64_t>(n) * d.O * oplane;
        for (int o = 0; o < d.O; ++o) {
            double* op = on + static_cast<std::int64_t>(o) * oplane;
            double bias = b ? b[o] : 0.0;
            std::fill(op, op + oplane, bias);
            const double* wo = w + static_cast<std::int64_t>(o) * d.C * d.K * d.K;
            for (int c = 0; c < d.C; ++c) {
                const double* xc = xn + static_cast<std::int64_t>(c) * xplane;
                const double* wc = wo + static_cast<std::int64_t>(c) * d.K * d.K;
                for (int ky = 0; ky < d.K; ++ky) {
                    for (int oy = 0; oy < d.OH; ++oy) {
                        int iy = oy * stride - padding + ky;
                        if (iy < 0 || iy >= d.H)
                            continue;
                        const double* xrow = xc + static_cast<std::int64_t>(iy) * d.W;
                        double* orow = op + static_cast<std::int64_t>(oy) * d.OW;
                        for (int kx = 0; kx < d.K; ++kx) {
                            double wv = wc[ky * d.K + kx];
                            if (wv == 0.0)
                                continue;
                            int off = kx - padding;
                            int lo = std::max(0, (padding - kx + stride - 1) / stride);
                            int hi = std::min(d.OW, (d.W - off + stride - 1) / stride);
                            for (int ox = lo; ox < hi; ++ox)
                                orow[ox] += wv * xrow[ox * stride + off];
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward(const ConvDims& d, const double* x, const double* w, int stride, int padding, const double* gout,
                     double* gx, double* gw, double* gb) {
    const std::int64_t xplane = static_cast<std::int64_t>(d.H) * d.W;
    const std::int64_t oplane = static_cast<std::int64_t>(d.OH) * d.OW;
    for (int n = 0; n < d.N; ++n) {
        const double* xn = x + static_cast<std::int64_t>(n) * d.C * xplane;
        const double* gn = gout + static_cast<std::int64_t>(n) * d.O * oplane;
        double* gxn = gx ? gx + static_cast<std::int64_t>(n) * d.C * xplane : nullptr;
        for (int o = 0; o < d.O; ++o) {
            const double* gp = gn + static_cast<std::int64_t>(o) * oplane;
            if (gb) {
                double s = 0.0;
                for (std::int64_t i = 0; i < oplane; ++i)
                    s += gp[i];
                gb[o] += s;
            }
            const double* wo = w + static_cast<std::int64_t>(o) * d.C * d.K * d.K;
            for (int c = 0; c < d.C; ++c) {
                const double* xc = xn + static_cast<std::int64_t>(c) * xplane;
                double* gxc = gxn ? gxn + static_cast<std::int64_t>(c) * xplane : nullptr;
                const double* wc = wo + static_cast<std::int64_t>(c) * d.K * d.K;
                double* gwc = gw ? gw + (static_cast<std::int64_t>(o) * d.C + c) * d.K * d.K : nullptr;
                for (int ky = 0; ky < d.K; ++ky) {
                    for (int oy = 0; oy < d.OH; ++oy) {
                        int iy = oy * stride - padding + ky;
                        if (iy < 0 || iy >= d.H)
                            continue;
                        const double* xrow = xc + static_cast<std::int64_t>(iy) * d.W;
                        double* gxrow = gxc ? gxc + static_cast<std::int64_t>(iy) * d.W : nullptr;
                        const double* grow = gp + static_cast<std::int64_t>(oy) * d.OW;
                        for (int kx = 0; kx < d.K; ++kx) {
                            int off = kx - padding;
                            int lo = std::max(0, (padding - kx + stride - 1) / stride);
                            int hi = std::min(d.OW, (d.W - off + stride - 1) / stride);
                            if (gwc) {
                                double acc = 0.0;
                                for (int ox = lo; ox < hi; ++ox)
                                    acc += grow[ox] * xrow[ox * stride + off];
                                gwc[ky * d.K + kx] += acc;
                            }
                            if (gxrow) {
                                double wv = wc[ky * d.K + kx];
                                if (wv != 0.0)
                                    for (int ox = lo; ox < hi; ++ox)
                                        gxrow[ox * stride + off] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

} // namespace

const Tensor& Var::val() const {
    return tape->val(*this);
}

const std::vector<int>& Var::shape() const {
    return val().shape();
}

int Tape::push(Tensor val, bool needs_grad, std::function<void(Tape&)> back, const char* opname) {
    if (check_finite_)
        val.check_finite(opname);
    Node n;
    n.val = std::move(val);
    n.needs_grad = needs_grad;
    n.back = needs_grad ? std::move(back) : nullptr;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::gbuf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty())
        n.grad = Tensor::zeros(n.val.shape());
    return n.grad;
}

const Tensor& Tape::val(Var v) const {
    if (!v.valid() || v.tape != this)
        throw Error("Var does not belong to this tape");
    return nodes_[static_cast<size_t>(v.id)].val;
}

Var Tape::input(Tensor v) {
    int id = push(std::move(v), false, nullptr, "input");
    return {this, id};
}

Var Tape::param(Tensor* storage) {
    auto it = param_ids_.find(storage);
    if (it != param_ids_.end())
        return {this, it->second};
    bool trainable = trainable_ ? trainable_(storage) : true;
    int id = push(*storage, trainable, nullptr, "param");
    param_ids_.emplace(storage, id);
    param_order_.emplace_back(storage, id);
    return {this, id};
}

Tensor Tape::grad_for(const Tensor* storage) const {
    auto it = param_ids_.find(storage);
    if (it == param_ids_.end())
        throw Error("tensor is not a param on this tape");
    const Node& n = nodes_[static_cast<size_t>(it->second)];
    if (n.grad.empty())
        return Tensor::zeros(n.val.shape());
    n.grad.check_finite("gradient");
    return n.grad;
}

void Tape::backward(Var loss) {
    if (!loss.valid() || loss.tape != this)
        throw Error("backward: loss is not on this tape");
    if (val(loss).numel() != 1)
        throw ShapeError("backward requires a scalar loss");
    gbuf(loss.id)[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.back && !n.grad.empty())
            n.back(*this);
    }
}

// ---------------------------------------------------------------- elementwise

Var Tape::add(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!av.same_shape(bv))
        throw ShapeError("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor out(av.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = av[i] + bv[i];
    bool ng = wants_grad(a) || wants_grad(b);
    int id = push(std::move(out), ng, nullptr, "add");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a, b](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            for (Var v : {a, b})
                if (t.wants_grad(v)) {
                    Tensor& gv = t.gbuf(v.id);
                    for (std::int64_t i = 0; i < g.numel(); ++i)
                        gv[i] += g[i];
                }
        };
    return {this, id};
}

Var Tape::sub(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!av.same_shape(bv))
        throw ShapeError("sub: shape mismatch");
    Tensor out(av.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = av[i] - bv[i];
    bool ng = wants_grad(a) || wants_grad(b);
    int id = push(std::move(out), ng, nullptr, "sub");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a, b](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            if (t.wants_grad(a)) {
                Tensor& ga = t.gbuf(a.id);
                for (std::int64_t i = 0; i < g.numel(); ++i)
                    ga[i] += g[i];
            }
            if (t.wants_grad(b)) {
                Tensor& gb = t.gbuf(b.id);
                for (std::int64_t i = 0; i < g.numel(); ++i)
                    gb[i] -= g[i];
            }
        };
    return {this, id};
}

Var Tape::mul(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!av.same_shape(bv))
        throw ShapeError("mul: shape mismatch");
    Tensor out(av.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = av[i] * bv[i];
    bool ng = wants_grad(a) || wants_grad(b);
    int id = push(std::move(out), ng, nullptr, "mul");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a, b](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            const Tensor& av2 = t.node_val(a.id);
            const Tensor& bv2 = t.node_val(b.id);
            if (t.wants_grad(a)) {
                Tensor& ga = t.gbuf(a.id);
                for (std::int64_t i = 0; i < g.numel(); ++i)
                    ga[i] += g[i] * bv2[i];
            }
            if (t.wants_grad(b)) {
                Tensor& gb = t.gbuf(b.id);
                for (std::int64_t i = 0; i < g.numel(); ++i)
                    gb[i] += g[i] * av2[i];
            }
        };
    return {this, id};
}

Var Tape::add_scalar(Var a, double c) {
    const Tensor& av = val(a);
    Tensor out(av.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = av[i] + c;
    bool ng = wants_grad(a);
    int id = push(std::move(out), ng, nullptr, "add_scalar");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            Tensor& ga = t.gbuf(a.id);
            for (std::int64_t i = 0; i < g.numel(); ++i)
                ga[i] += g[i];
        };
    return {this, id};
}

Var Tape::mul_scalar(Var a, double c) {
    const Tensor& av = val(a);
    Tensor out(av.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = av[i] * c;
    bool ng = wants_grad(a);
    int id = push(std::move(out), ng, nullptr, "mul_scalar");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a, c](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            Tensor& ga = t.gbuf(a.id);
            for (std::int64_t i = 0; i < g.numel(); ++i)
                ga[i] += g[i] * c;
        };
    return {this, id};
}

Var Tape::silu(Var a) {
    const Tensor& av = val(a);
    Tensor out(av.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = av[i] * sigmoid(av[i]);
    bool ng = wants_grad(a);
    int id = push(std::move(out), ng, nullptr, "silu");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            const Tensor& x = t.node_val(a.id);
            Tensor& ga = t.gbuf(a.id);
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                double s = sigmoid(x[i]);
                ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
            }
        };
    return {this, id};
}

Var Tape::gelu(Var a) {
    const Tensor& av = val(a);
    Tensor out(av.shape());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * inv_sqrt2));
    bool ng = wants_grad(a);
    int id = push(std::move(out), ng, nullptr, "gelu");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            const Tensor& x = t.node_val(a.id);
            Tensor& ga = t.gbuf(a.id);
            constexpr double is2 = 0.7071067811865475244;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                double cdf = 0.5 * (1.0 + std::erf(x[i] * is2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * x[i] * x[i]);
                ga[i] += g[i] * (cdf + x[i] * pdf);
            }
        };
    return {this, id};
}

Var Tape::clamp(Var a, double lo, double hi) {
    const Tensor& av = val(a);
    Tensor out(av.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = std::min(hi, std::max(lo, av[i]));
    bool ng = wants_grad(a);
    int id = push(std::move(out), ng, nullptr, "clamp");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a, lo, hi](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            const Tensor& x = t.node_val(a.id);
            Tensor& ga = t.gbuf(a.id);
            for (std::int64_t i = 0; i < g.numel(); ++i)
                if (x[i] > lo && x[i] < hi)
                    ga[i] += g[i];
        };
    return {this, id};
}

// --------------------------------------------------------------------- shape

Var Tape::reshape(Var a, std::vector<int> shape) {
    const Tensor& av = val(a);
    if (shape_numel(shape) != av.numel())
        throw ShapeError("reshape: element count mismatch");
    Tensor out(std::move(shape), av.vec());
    bool ng = wants_grad(a);
    int id = push(std::move(out), ng, nullptr, "reshape");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            Tensor& ga = t.gbuf(a.id);
            for (std::int64_t i = 0; i < g.numel(); ++i)
                ga[i] += g[i];
        };
    return {this, id};
}

Var Tape::concat(const std::vector<Var>& xs, int axis) {
    if (xs.empty())
        throw ShapeError("concat: no inputs");
    std::vector<int> shape = val(xs[0]).shape();
    AxisSplit s0 = split_axis(shape, axis);
    std::int64_t axis_total = 0;
    for (Var v : xs) {
        const auto& sh = val(v).shape();
        if (sh.size() != shape.size())
            throw ShapeError("concat: rank mismatch");
        for (size_t i = 0; i < sh.size(); ++i)
            if (static_cast<int>(i) != axis && sh[i] != shape[i])
                throw ShapeError("concat: extent mismatch off-axis");
        axis_total += sh[static_cast<size_t>(axis)];
    }
    shape[static_cast<size_t>(axis)] = static_cast<int>(axis_total);
    Tensor out(shape);
    std::int64_t dst_axis = 0;
    for (Var v : xs) {
        const Tensor& tv = val(v);
        AxisSplit s = split_axis(tv.shape(), axis);
        for (std::int64_t o = 0; o < s.outer; ++o)
            std::memcpy(out.data() + (o * axis_total + dst_axis) * s.inner, tv.data() + o * s.axis * s.inner,
                        static_cast<size_t>(s.axis * s.inner) * sizeof(double));
        dst_axis += s.axis;
    }
    bool ng = false;
    for (Var v : xs)
        ng = ng || wants_grad(v);
    int id = push(std::move(out), ng, nullptr, "concat");
    if (ng) {
        std::vector<Var> inputs = xs;
        std::int64_t outer = s0.outer, inner = s0.inner, total = axis_total;
        nodes_[static_cast<size_t>(id)].back = [id, inputs, outer, inner, total, axis](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            std::int64_t off = 0;
            for (Var v : inputs) {
                std::int64_t alen = t.node_val(v.id).shape()[static_cast<size_t>(axis)];
                if (t.wants_grad(v)) {
                    Tensor& gv = t.gbuf(v.id);
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* src = g.data() + (o * total + off) * inner;
                        double* dst = gv.data() + o * alen * inner;
                        for (std::int64_t i = 0; i < alen * inner; ++i)
                            dst[i] += src[i];
                    }
                }
                off += alen;
            }
        };
    }
    return {this, id};
}

Var Tape::slice(Var a, int axis, int start, int len) {
    const Tensor& av = val(a);
    AxisSplit s = split_axis(av.shape(), axis);
    if (start < 0 || len <= 0 || start + len > s.axis)
        throw ShapeError("slice: window out of range");
    std::vector<int> shape = av.shape();
    shape[static_cast<size_t>(axis)] = len;
    Tensor out(shape);
    for (std::int64_t o = 0; o < s.outer; ++o)
        std::memcpy(out.data() + o * len * s.inner, av.data() + (o * s.axis + start) * s.inner,
                    static_cast<size_t>(len * s.inner) * sizeof(double));
    bool ng = wants_grad(a);
    int id = push(std::move(out), ng, nullptr, "slice");
    if (ng) {
        std::int64_t outer = s.outer, inner = s.inner, alen = s.axis;
        nodes_[static_cast<size_t>(id)].back = [id, a, outer, inner, alen, start, len](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            Tensor& ga = t.gbuf(a.id);
            for (std::int64_t o = 0; o < outer; ++o) {
                const double* src = g.data() + o * len * inner;
                double* dst = ga.data() + (o * alen + start) * inner;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(len) * inner; ++i)
                    dst[i] += src[i];
            }
        };
    }
    return {this, id};
}

Var Tape::transpose2d(Var a) {
    const Tensor& av = val(a);
    if (av.rank() != 2)
        throw ShapeError("transpose2d needs a rank-2 tensor");
    int n = av.dim(0), m = av.dim(1);
    Tensor out({m, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            out.at(j, i) = av.at(i, j);
    bool ng = wants_grad(a);
    int id = push(std::move(out), ng, nullptr, "transpose2d");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a, n, m](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            Tensor& ga = t.gbuf(a.id);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j)
                    ga.at(i, j) += g.at(j, i);
        };
    return {this, id};
}

// ---------------------------------------------------------------- reductions

Var Tape::sum(Var a) {
    const Tensor& av = val(a);
    Tensor out = Tensor::scalar(av.sum());
    bool ng = wants_grad(a);
    int id = push(std::move(out), ng, nullptr, "sum");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a](Tape& t) {
            double g = t.nodes_[static_cast<size_t>(id)].grad[0];
            Tensor& ga = t.gbuf(a.id);
            for (std::int64_t i = 0; i < ga.numel(); ++i)
                ga[i] += g;
        };
    return {this, id};
}

Var Tape::mean(Var a) {
    const Tensor& av = val(a);
    double inv = 1.0 / static_cast<double>(av.numel());
    Tensor out = Tensor::scalar(av.sum() * inv);
    bool ng = wants_grad(a);
    int id = push(std::move(out), ng, nullptr, "mean");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a, inv](Tape& t) {
            double g = t.nodes_[static_cast<size_t>(id)].grad[0] * inv;
            Tensor& ga = t.gbuf(a.id);
            for (std::int64_t i = 0; i < ga.numel(); ++i)
                ga[i] += g;
        };
    return {this, id};
}

Var Tape::mse(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!av.same_shape(bv))
        throw ShapeError("mse: shape mismatch");
    double inv = 1.0 / static_cast<double>(av.numel());
    double acc = 0.0;
    for (std::int64_t i = 0; i < av.numel(); ++i) {
        double d = av[i] - bv[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc * inv);
    bool ng = wants_grad(a) || wants_grad(b);
    int id = push(std::move(out), ng, nullptr, "mse");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a, b, inv](Tape& t) {
            double g = t.nodes_[static_cast<size_t>(id)].grad[0];
            const Tensor& av2 = t.node_val(a.id);
            const Tensor& bv2 = t.node_val(b.id);
            if (t.wants_grad(a)) {
                Tensor& ga = t.gbuf(a.id);
                for (std::int64_t i = 0; i < av2.numel(); ++i)
                    ga[i] += g * 2.0 * inv * (av2[i] - bv2[i]);
            }
            if (t.wants_grad(b)) {
                Tensor& gb = t.gbuf(b.id);
                for (std::int64_t i = 0; i < av2.numel(); ++i)
                    gb[i] -= g * 2.0 * inv * (av2[i] - bv2[i]);
            }
        };
    return {this, id};
}

// ------------------------------------------------------------ linear algebra

Var Tape::matmul(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw ShapeError("matmul: incompatible shapes " + av.shape_str() + " x " + bv.shape_str());
    int n = av.dim(0), k = av.dim(1), m = bv.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < n; ++i) {
        double* orow = out.data() + static_cast<std::int64_t>(i) * m;
        const double* arow = av.data() + static_cast<std::int64_t>(i) * k;
        for (int t2 = 0; t2 < k; ++t2) {
            double ai = arow[t2];
            if (ai == 0.0)
                continue;
            const double* brow = bv.data() + static_cast<std::int64_t>(t2) * m;
            for (int j = 0; j < m; ++j)
                orow[j] += ai * brow[j];
        }
    }
    bool ng = wants_grad(a) || wants_grad(b);
    int id = push(std::move(out), ng, nullptr, "matmul");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, a, b, n, k, m](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            const Tensor& av2 = t.node_val(a.id);
            const Tensor& bv2 = t.node_val(b.id);
            if (t.wants_grad(a)) { // dA = G * B^T
                Tensor& ga = t.gbuf(a.id);
                for (int i = 0; i < n; ++i)
                    for (int t2 = 0; t2 < k; ++t2) {
                        const double* grow = g.data() + static_cast<std::int64_t>(i) * m;
                        const double* brow = bv2.data() + static_cast<std::int64_t>(t2) * m;
                        double acc = 0.0;
                        for (int j = 0; j < m; ++j)
                            acc += grow[j] * brow[j];
                        ga.at(i, t2) += acc;
                    }
            }
            if (t.wants_grad(b)) { // dB = A^T * G
                Tensor& gb = t.gbuf(b.id);
                for (int i = 0; i < n; ++i) {
                    const double* arow = av2.data() + static_cast<std::int64_t>(i) * k;
                    const double* grow = g.data() + static_cast<std::int64_t>(i) * m;
                    for (int t2 = 0; t2 < k; ++t2) {
                        double ai = arow[t2];
                        if (ai == 0.0)
                            continue;
                        double* gbrow = gb.data() + static_cast<std::int64_t>(t2) * m;
                        for (int j = 0; j < m; ++j)
                            gbrow[j] += ai * grow[j];
                    }
                }
            }
        };
    return {this, id};
}

Var Tape::linear(Var x, Var w, Var b) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0))
        throw ShapeError("linear: incompatible shapes");
    int n = xv.dim(0), k = xv.dim(1), m = wv.dim(1);
    const Tensor* bv = b.valid() ? &val(b) : nullptr;
    if (bv && (bv->rank() != 1 || bv->dim(0) != m))
        throw ShapeError("linear: bias shape");
    Tensor out({n, m});
    for (int i = 0; i < n; ++i) {
        double* orow = out.data() + static_cast<std::int64_t>(i) * m;
        if (bv)
            std::memcpy(orow, bv->data(), static_cast<size_t>(m) * sizeof(double));
        const double* xrow = xv.data() + static_cast<std::int64_t>(i) * k;
        for (int t2 = 0; t2 < k; ++t2) {
            double xi = xrow[t2];
            if (xi == 0.0)
                continue;
            const double* wrow = wv.data() + static_cast<std::int64_t>(t2) * m;
            for (int j = 0; j < m; ++j)
                orow[j] += xi * wrow[j];
        }
    }
    bool ng = wants_grad(x) || wants_grad(w) || (b.valid() && wants_grad(b));
    int id = push(std::move(out), ng, nullptr, "linear");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, x, w, b, n, k, m](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            const Tensor& xv2 = t.node_val(x.id);
            const Tensor& wv2 = t.node_val(w.id);
            if (t.wants_grad(x)) {
                Tensor& gx = t.gbuf(x.id);
                for (int i = 0; i < n; ++i) {
                    const double* grow = g.data() + static_cast<std::int64_t>(i) * m;
                    double* gxrow = gx.data() + static_cast<std::int64_t>(i) * k;
                    for (int t2 = 0; t2 < k; ++t2) {
                        const double* wrow = wv2.data() + static_cast<std::int64_t>(t2) * m;
                        double acc = 0.0;
                        for (int j = 0; j < m; ++j)
                            acc += grow[j] * wrow[j];
                        gxrow[t2] += acc;
                    }
                }
            }
            if (t.wants_grad(w)) {
                Tensor& gw = t.gbuf(w.id);
                for (int i = 0; i < n; ++i) {
                    const double* xrow = xv2.data() + static_cast<std::int64_t>(i) * k;
                    const double* grow = g.data() + static_cast<std::int64_t>(i) * m;
                    for (int t2 = 0; t2 < k; ++t2) {
                        double xi = xrow[t2];
                        if (xi == 0.0)
                            continue;
                        double* gwrow = gw.data() + static_cast<std::int64_t>(t2) * m;
                        for (int j = 0; j < m; ++j)
                            gwrow[j] += xi * grow[j];
                    }
                }
            }
            if (b.valid() && t.wants_grad(b)) {
                Tensor& gb = t.gbuf(b.id);
                for (int i = 0; i < n; ++i) {
                    const double* grow = g.data() + static_cast<std::int64_t>(i) * m;
                    for (int j = 0; j < m; ++j)
                        gb[j] += grow[j];
                }
            }
        };
    return {this, id};
}

// ------------------------------------------------------------------------ nn

Var Tape::conv2d(Var x, Var w, Var b, int stride, int padding) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    ConvDims d = conv_dims(xv.shape(), wv.shape(), stride, padding);
    const Tensor* bv = b.valid() ? &val(b) : nullptr;
    if (bv && (bv->rank() != 1 || bv->dim(0) != d.O))
        throw ShapeError("conv2d: bias shape");
    std::vector<int> oshape = d.rank3 ? std::vector<int>{d.O, d.OH, d.OW} : std::vector<int>{d.N, d.O, d.OH, d.OW};
    Tensor out(oshape);
    conv2d_forward(d, xv.data(), wv.data(), bv ? bv->data() : nullptr, stride, padding, out.data());
    bool ng = wants_grad(x) || wants_grad(w) || (b.valid() && wants_grad(b));
    int id = push(std::move(out), ng, nullptr, "conv2d");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, x, w, b, d, stride, padding](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            const Tensor& xv2 = t.node_val(x.id);
            const Tensor& wv2 = t.node_val(w.id);
            double* gx = t.wants_grad(x) ? t.gbuf(x.id).data() : nullptr;
            double* gw = t.wants_grad(w) ? t.gbuf(w.id).data() : nullptr;
            double* gb = (b.valid() && t.wants_grad(b)) ? t.gbuf(b.id).data() : nullptr;
            conv2d_backward(d, xv2.data(), wv2.data(), stride, padding, g.data(), gx, gw, gb);
        };
    return {this, id};
}

Var Tape::group_norm(Var x, int groups, Var gamma, Var beta, double eps) {
    const Tensor& xv = val(x);
    if (eps <= 0.0)
        throw ShapeError("group_norm: eps must be positive");
    bool rank3 = xv.rank() == 3;
    if (xv.rank() != 3 && xv.rank() != 4)
        throw ShapeError("group_norm input must be [C,H,W] or [N,C,H,W]");
    int N = rank3 ? 1 : xv.dim(0);
    int C = xv.dim(rank3 ? 0 : 1);
    int H = xv.dim(rank3 ? 1 : 2);
    int W = xv.dim(rank3 ? 2 : 3);
    if (groups <= 0 || C % groups != 0)
        throw ShapeError("group_norm: groups must divide channels");
    const Tensor* gv = gamma.valid() ? &val(gamma) : nullptr;
    const Tensor* bv = beta.valid() ? &val(beta) : nullptr;
    if ((gv && gv->numel() != C) || (bv && bv->numel() != C))
        throw ShapeError("group_norm: affine params must have C entries");
    int cpg = C / groups;
    std::int64_t plane = static_cast<std::int64_t>(H) * W;
    std::int64_t gsize = cpg * plane;
    Tensor out(xv.shape());
    Tensor xhat(xv.shape());
    std::vector<double> inv_std(static_cast<size_t>(N * groups));
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const double* xp = xv.data() + (static_cast<std::int64_t>(n) * C + g * cpg) * plane;
            double mu = 0.0;
            for (std::int64_t i = 0; i < gsize; ++i)
                mu += xp[i];
            mu /= static_cast<double>(gsize);
            double var = 0.0;
            for (std::int64_t i = 0; i < gsize; ++i) {
                double dxx = xp[i] - mu;
                var += dxx * dxx;
            }
            var /= static_cast<double>(gsize);
            double istd = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<size_t>(n * groups + g)] = istd;
            double* xh = xhat.data() + (static_cast<std::int64_t>(n) * C + g * cpg) * plane;
            double* op = out.data() + (static_cast<std::int64_t>(n) * C + g * cpg) * plane;
            for (int c = 0; c < cpg; ++c) {
                int ch = g * cpg + c;
                double ga = gv ? (*gv)[ch] : 1.0;
                double be = bv ? (*bv)[ch] : 0.0;
                for (std::int64_t i = 0; i < plane; ++i) {
                    double h = (xp[c * plane + i] - mu) * istd;
                    xh[c * plane + i] = h;
                    op[c * plane + i] = ga * h + be;
                }
            }
        }
    bool ng = wants_grad(x) || (gamma.valid() && wants_grad(gamma)) || (beta.valid() && wants_grad(beta));
    int id = push(std::move(out), ng, nullptr, "group_norm");
    if (ng) {
        auto xhat_s = std::make_shared<Tensor>(std::move(xhat));
        auto istd_s = std::make_shared<std::vector<double>>(std::move(inv_std));
        nodes_[static_cast<size_t>(id)].back = [id, x, gamma, beta, N, C, groups, cpg, plane, gsize, xhat_s,
                                                istd_s](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            const Tensor* gv2 = gamma.valid() ? &t.node_val(gamma.id) : nullptr;
            Tensor* ggamma = (gamma.valid() && t.wants_grad(gamma)) ? &t.gbuf(gamma.id) : nullptr;
            Tensor* gbeta = (beta.valid() && t.wants_grad(beta)) ? &t.gbuf(beta.id) : nullptr;
            Tensor* gx = t.wants_grad(x) ? &t.gbuf(x.id) : nullptr;
            for (int n = 0; n < N; ++n)
                for (int grp = 0; grp < groups; ++grp) {
                    std::int64_t base = (static_cast<std::int64_t>(n) * C + grp * cpg) * plane;
                    const double* gp = g.data() + base;
                    const double* xh = xhat_s->data() + base;
                    double istd = (*istd_s)[static_cast<size_t>(n * groups + grp)];
                    if (ggamma || gbeta)
                        for (int c = 0; c < cpg; ++c) {
                            int ch = grp * cpg + c;
                            double sg = 0.0, sb = 0.0;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                sg += gp[c * plane + i] * xh[c * plane + i];
                                sb += gp[c * plane + i];
                            }
                            if (ggamma)
                                (*ggamma)[ch] += sg;
                            if (gbeta)
                                (*gbeta)[ch] += sb;
                        }
                    if (gx) {
                        // ghat = g * gamma; dx = istd*(ghat - mean(ghat) - xhat*mean(ghat*xhat))
                        double mean_gh = 0.0, mean_ghxh = 0.0;
                        for (int c = 0; c < cpg; ++c) {
                            double ga = gv2 ? (*gv2)[grp * cpg + c] : 1.0;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                double gh = gp[c * plane + i] * ga;
                                mean_gh += gh;
                                mean_ghxh += gh * xh[c * plane + i];
                            }
                        }
                        mean_gh /= static_cast<double>(gsize);
                        mean_ghxh /= static_cast<double>(gsize);
                        double* gxp = gx->data() + base;
                        for (int c = 0; c < cpg; ++c) {
                            double ga = gv2 ? (*gv2)[grp * cpg + c] : 1.0;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                double gh = gp[c * plane + i] * ga;
                                gxp[c * plane + i] += istd * (gh - mean_gh - xh[c * plane + i] * mean_ghxh);
                            }
                        }
                    }
                }
        };
    }
    return {this, id};
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& xv = val(x);
    if (xv.rank() != 2)
        throw ShapeError("layer_norm expects [n,d]");
    int n = xv.dim(0), d = xv.dim(1);
    const Tensor* gv = gamma.valid() ? &val(gamma) : nullptr;
    const Tensor* bv = beta.valid() ? &val(beta) : nullptr;
    if ((gv && gv->numel() != d) || (bv && bv->numel() != d))
        throw ShapeError("layer_norm: affine params must have d entries");
    Tensor out({n, d});
    Tensor xhat({n, d});
    std::vector<double> inv_std(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double* xr = xv.data() + static_cast<std::int64_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j)
            mu += xr[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double dx = xr[j] - mu;
            var += dx * dx;
        }
        var /= d;
        double istd = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = istd;
        double* xh = xhat.data() + static_cast<std::int64_t>(i) * d;
        double* orow = out.data() + static_cast<std::int64_t>(i) * d;
        for (int j = 0; j < d; ++j) {
            double h = (xr[j] - mu) * istd;
            xh[j] = h;
            orow[j] = (gv ? (*gv)[j] : 1.0) * h + (bv ? (*bv)[j] : 0.0);
        }
    }
    bool ng = wants_grad(x) || (gamma.valid() && wants_grad(gamma)) || (beta.valid() && wants_grad(beta));
    int id = push(std::move(out), ng, nullptr, "layer_norm");
    if (ng) {
        auto xhat_s = std::make_shared<Tensor>(std::move(xhat));
        auto istd_s = std::make_shared<std::vector<double>>(std::move(inv_std));
        nodes_[static_cast<size_t>(id)].back = [id, x, gamma, beta, n, d, xhat_s, istd_s](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            const Tensor* gv2 = gamma.valid() ? &t.node_val(gamma.id) : nullptr;
            Tensor* ggamma = (gamma.valid() && t.wants_grad(gamma)) ? &t.gbuf(gamma.id) : nullptr;
            Tensor* gbeta = (beta.valid() && t.wants_grad(beta)) ? &t.gbuf(beta.id) : nullptr;
            Tensor* gx = t.wants_grad(x) ? &t.gbuf(x.id) : nullptr;
            for (int i = 0; i < n; ++i) {
                const double* gr = g.data() + static_cast<std::int64_t>(i) * d;
                const double* xh = xhat_s->data() + static_cast<std::int64_t>(i) * d;
                double istd = (*istd_s)[static_cast<size_t>(i)];
                if (ggamma || gbeta)
                    for (int j = 0; j < d; ++j) {
                        if (ggamma)
                            (*ggamma)[j] += gr[j] * xh[j];
                        if (gbeta)
                            (*gbeta)[j] += gr[j];
                    }
                if (gx) {
                    double mean_gh = 0.0, mean_ghxh = 0.0;
                    for (int j = 0; j < d; ++j) {
                        double gh = gr[j] * (gv2 ? (*gv2)[j] : 1.0);
                        mean_gh += gh;
                        mean_ghxh += gh * xh[j];
                    }
                    mean_gh /= d;
                    mean_ghxh /= d;
                    double* gxr = gx->data() + static_cast<std::int64_t>(i) * d;
                    for (int j = 0; j < d; ++j) {
                        double gh = gr[j] * (gv2 ? (*gv2)[j] : 1.0);
                        gxr[j] += istd * (gh - mean_gh - xh[j] * mean_ghxh);
                    }
                }
            }
        };
    }
    return {this, id};
}

Var Tape::softmax_rows(Var x) {
    const Tensor& xv = val(x);
    if (xv.rank() != 2)
        throw ShapeError("softmax_rows expects [n,m]");
    int n = xv.dim(0), m = xv.dim(1);
    if (m == 0)
        throw ShapeError("softmax_rows: empty rows");
    Tensor out({n, m});
    for (int i = 0; i < n; ++i) {
        const double* xr = xv.data() + static_cast<std::int64_t>(i) * m;
        double* orow = out.data() + static_cast<std::int64_t>(i) * m;
        double mx = xr[0];
        for (int j = 1; j < m; ++j)
            mx = std::max(mx, xr[j]);
        double z = 0.0;
        for (int j = 0; j < m; ++j) {
            orow[j] = std::exp(xr[j] - mx);
            z += orow[j];
        }
        double iz = 1.0 / z;
        for (int j = 0; j < m; ++j)
            orow[j] *= iz;
    }
    bool ng = wants_grad(x);
    int id = push(std::move(out), ng, nullptr, "softmax");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, x, n, m](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            const Tensor& y = t.node_val(id);
            Tensor& gx = t.gbuf(x.id);
            for (int i = 0; i < n; ++i) {
                const double* gr = g.data() + static_cast<std::int64_t>(i) * m;
                const double* yr = y.data() + static_cast<std::int64_t>(i) * m;
                double dot = 0.0;
                for (int j = 0; j < m; ++j)
                    dot += gr[j] * yr[j];
                double* gxr = gx.data() + static_cast<std::int64_t>(i) * m;
                for (int j = 0; j < m; ++j)
                    gxr[j] += yr[j] * (gr[j] - dot);
            }
        };
    return {this, id};
}

AttentionResult Tape::attention(Var q, Var k, Var v) {
    const Tensor& qv = val(q);
    const Tensor& kv = val(k);
    const Tensor& vv = val(v);
    if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2)
        throw ShapeError("attention expects rank-2 q,k,v");
    if (kv.dim(0) == 0)
        throw ShapeError("attention: empty key set");
    if (qv.dim(1) != kv.dim(1) || qv.dim(1) <= 0)
        throw ShapeError("attention: q/k width mismatch");
    if (vv.dim(0) != kv.dim(0))
        throw ShapeError("attention: k/v row mismatch");
    double scale = 1.0 / std::sqrt(static_cast<double>(qv.dim(1)));
    Var logits = matmul(mul_scalar(q, scale), transpose2d(k));
    Var weights = softmax_rows(logits);
    Var out = matmul(weights, v);
    return {out, weights};
}

Var Tape::bilinear_resize(Var x, int out_h, int out_w) {
    const Tensor& xv = val(x);
    if (xv.rank() != 3)
        throw ShapeError("bilinear_resize expects [C,H,W]");
    if (out_h <= 0 || out_w <= 0)
        throw ShapeError("bilinear_resize: output extents must be positive");
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    Tensor out({C, out_h, out_w});
    double sy = static_cast<double>(H) / out_h;
    double sx = static_cast<double>(W) / out_w;
    std::vector<BilinearTaps> taps(static_cast<size_t>(out_h) * out_w);
    for (int i = 0; i < out_h; ++i)
        for (int j = 0; j < out_w; ++j)
            taps[static_cast<size_t>(i) * out_w + j] = bilinear_taps(H, W, (j + 0.5) * sx, (i + 0.5) * sy);
    for (int c = 0; c < C; ++c) {
        const double* xp = xv.data() + static_cast<std::int64_t>(c) * H * W;
        double* op = out.data() + static_cast<std::int64_t>(c) * out_h * out_w;
        for (int i = 0; i < out_h; ++i)
            for (int j = 0; j < out_w; ++j) {
                const BilinearTaps& tp = taps[static_cast<size_t>(i) * out_w + j];
                op[static_cast<std::int64_t>(i) * out_w + j] =
                    tp.w00 * xp[static_cast<std::int64_t>(tp.y0) * W + tp.x0] +
                    tp.w01 * xp[static_cast<std::int64_t>(tp.y0) * W + tp.x1] +
                    tp.w10 * xp[static_cast<std::int64_t>(tp.y1) * W + tp.x0] +
                    tp.w11 * xp[static_cast<std::int64_t>(tp.y1) * W + tp.x1];
            }
    }
    bool ng = wants_grad(x);
    int id = push(std::move(out), ng, nullptr, "bilinear_resize");
    if (ng) {
        auto taps_s = std::make_shared<std::vector<BilinearTaps>>(std::move(taps));
        nodes_[static_cast<size_t>(id)].back = [id, x, C, H, W, out_h, out_w, taps_s](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            Tensor& gx = t.gbuf(x.id);
            for (int c = 0; c < C; ++c) {
                double* gxp = gx.data() + static_cast<std::int64_t>(c) * H * W;
                const double* gp = g.data() + static_cast<std::int64_t>(c) * out_h * out_w;
                for (int i = 0; i < out_h; ++i)
                    for (int j = 0; j < out_w; ++j) {
                        const BilinearTaps& tp = (*taps_s)[static_cast<size_t>(i) * out_w + j];
                        double gg = gp[static_cast<std::int64_t>(i) * out_w + j];
                        gxp[static_cast<std::int64_t>(tp.y0) * W + tp.x0] += tp.w00 * gg;
                        gxp[static_cast<std::int64_t>(tp.y0) * W + tp.x1] += tp.w01 * gg;
                        gxp[static_cast<std::int64_t>(tp.y1) * W + tp.x0] += tp.w10 * gg;
                        gxp[static_cast<std::int64_t>(tp.y1) * W + tp.x1] += tp.w11 * gg;
                    }
            }
        };
    }
    return {this, id};
}

Var Tape::roi_align(Var x, const BoundingBox& box, int p) {
    const Tensor& xv = val(x);
    if (xv.rank() != 3)
        throw ShapeError("roi_align expects [C,H,W]");
    if (p < 1)
        throw ShapeError("roi_align: p must be >= 1");
    BoundingBox b = box.clamped();
    if (!(b.x0 < b.x1) || !(b.y0 < b.y1))
        throw GeometryError("roi_align: box has zero area after clamping");
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    double bx0 = b.x0 * W, bx1 = b.x1 * W;
    double by0 = b.y0 * H, by1 = b.y1 * H;
    double bw = (bx1 - bx0) / p;
    double bh = (by1 - by0) / p;
    std::vector<BilinearTaps> taps(static_cast<size_t>(p) * p);
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j)
            taps[static_cast<size_t>(i) * p + j] = bilinear_taps(H, W, bx0 + (j + 0.5) * bw, by0 + (i + 0.5) * bh);
    Tensor out({C, p, p});
    for (int c = 0; c < C; ++c) {
        const double* xp = xv.data() + static_cast<std::int64_t>(c) * H * W;
        double* op = out.data() + static_cast<std::int64_t>(c) * p * p;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(p) * p; ++i) {
            const BilinearTaps& tp = taps[static_cast<size_t>(i)];
            op[i] = tp.w00 * xp[static_cast<std::int64_t>(tp.y0) * W + tp.x0] +
                    tp.w01 * xp[static_cast<std::int64_t>(tp.y0) * W + tp.x1] +
                    tp.w10 * xp[static_cast<std::int64_t>(tp.y1) * W + tp.x0] +
                    tp.w11 * xp[static_cast<std::int64_t>(tp.y1) * W + tp.x1];
        }
    }
    bool ng = wants_grad(x);
    int id = push(std::move(out), ng, nullptr, "roi_align");
    if (ng) {
        auto taps_s = std::make_shared<std::vector<BilinearTaps>>(std::move(taps));
        nodes_[static_cast<size_t>(id)].back = [id, x, C, H, W, p, taps_s](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            Tensor& gx = t.gbuf(x.id);
            for (int c = 0; c < C; ++c) {
                double* gxp = gx.data() + static_cast<std::int64_t>(c) * H * W;
                const double* gp = g.data() + static_cast<std::int64_t>(c) * p * p;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(p) * p; ++i) {
                    const BilinearTaps& tp = (*taps_s)[static_cast<size_t>(i)];
                    gxp[static_cast<std::int64_t>(tp.y0) * W + tp.x0] += tp.w00 * gp[i];
                    gxp[static_cast<std::int64_t>(tp.y0) * W + tp.x1] += tp.w01 * gp[i];
                    gxp[static_cast<std::int64_t>(tp.y1) * W + tp.x0] += tp.w10 * gp[i];
                    gxp[static_cast<std::int64_t>(tp.y1) * W + tp.x1] += tp.w11 * gp[i];
                }
            }
        };
    }
    return {this, id};
}

Var Tape::add_into_region(Var base, Var patch, int y0, int x0) {
    const Tensor& bv = val(base);
    const Tensor& pv = val(patch);
    if (bv.rank() != 3 || pv.rank() != 3 || bv.dim(0) != pv.dim(0))
        throw ShapeError("add_into_region expects [C,H,W] base and patch");
    int C = bv.dim(0), H = bv.dim(1), W = bv.dim(2);
    int bh = pv.dim(1), bw = pv.dim(2);
    if (y0 < 0 || x0 < 0 || y0 + bh > H || x0 + bw > W)
        throw ShapeError("add_into_region: window outside base");
    Tensor out = bv;
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < bh; ++i)
            for (int j = 0; j < bw; ++j)
                out.at(c, y0 + i, x0 + j) += pv.at(c, i, j);
    bool ng = wants_grad(base) || wants_grad(patch);
    int id = push(std::move(out), ng, nullptr, "add_into_region");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, base, patch, C, bh, bw, y0, x0](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            if (t.wants_grad(base)) {
                Tensor& gb = t.gbuf(base.id);
                for (std::int64_t i = 0; i < g.numel(); ++i)
                    gb[i] += g[i];
            }
            if (t.wants_grad(patch)) {
                Tensor& gp = t.gbuf(patch.id);
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < bh; ++i)
                        for (int j = 0; j < bw; ++j)
                            gp.at(c, i, j) += g.at(c, y0 + i, x0 + j);
            }
        };
    return {this, id};
}

Var Tape::broadcast_add_channel(Var x, Var v) {
    const Tensor& xv = val(x);
    const Tensor& vv = val(v);
    bool rank3 = xv.rank() == 3;
    if (xv.rank() != 3 && xv.rank() != 4)
        throw ShapeError("broadcast_add_channel expects [C,H,W] or [N,C,H,W]");
    int N = rank3 ? 1 : xv.dim(0);
    int C = xv.dim(rank3 ? 0 : 1);
    std::int64_t plane = static_cast<std::int64_t>(xv.dim(rank3 ? 1 : 2)) * xv.dim(rank3 ? 2 : 3);
    if (vv.numel() != C)
        throw ShapeError("broadcast_add_channel: channel mismatch");
    Tensor out = xv;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double* op = out.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            double add = vv[c];
            for (std::int64_t i = 0; i < plane; ++i)
                op[i] += add;
        }
    bool ng = wants_grad(x) || wants_grad(v);
    int id = push(std::move(out), ng, nullptr, "broadcast_add_channel");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, x, v, N, C, plane](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            if (t.wants_grad(x)) {
                Tensor& gx = t.gbuf(x.id);
                for (std::int64_t i = 0; i < g.numel(); ++i)
                    gx[i] += g[i];
            }
            if (t.wants_grad(v)) {
                Tensor& gv = t.gbuf(v.id);
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const double* gp = g.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < plane; ++i)
                            acc += gp[i];
                        gv[c] += acc;
                    }
            }
        };
    return {this, id};
}

Var Tape::avgpool2x(Var x) {
    const Tensor& xv = val(x);
    if (xv.rank() != 3)
        throw ShapeError("avgpool2x expects [C,H,W]");
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    if (H % 2 != 0 || W % 2 != 0)
        throw ShapeError("avgpool2x: extents must be even");
    int OH = H / 2, OW = W / 2;
    Tensor out({C, OH, OW});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < OH; ++y)
            for (int xx = 0; xx < OW; ++xx)
                out.at(c, y, xx) = 0.25 * (xv.at(c, 2 * y, 2 * xx) + xv.at(c, 2 * y, 2 * xx + 1) +
                                           xv.at(c, 2 * y + 1, 2 * xx) + xv.at(c, 2 * y + 1, 2 * xx + 1));
    bool ng = wants_grad(x);
    int id = push(std::move(out), ng, nullptr, "avgpool2x");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, x, C, OH, OW](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            Tensor& gx = t.gbuf(x.id);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < OH; ++y)
                    for (int xx = 0; xx < OW; ++xx) {
                        double gv = 0.25 * g.at(c, y, xx);
                        gx.at(c, 2 * y, 2 * xx) += gv;
                        gx.at(c, 2 * y, 2 * xx + 1) += gv;
                        gx.at(c, 2 * y + 1, 2 * xx) += gv;
                        gx.at(c, 2 * y + 1, 2 * xx + 1) += gv;
                    }
        };
    return {this, id};
}

Var Tape::upsample_nearest2x(Var x) {
    const Tensor& xv = val(x);
    if (xv.rank() != 3)
        throw ShapeError("upsample_nearest2x expects [C,H,W]");
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    Tensor out({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
            for (int xx = 0; xx < 2 * W; ++xx)
                out.at(c, y, xx) = xv.at(c, y / 2, xx / 2);
    bool ng = wants_grad(x);
    int id = push(std::move(out), ng, nullptr, "upsample_nearest2x");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, x, C, H, W](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            Tensor& gx = t.gbuf(x.id);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < 2 * H; ++y)
                    for (int xx = 0; xx < 2 * W; ++xx)
                        gx.at(c, y / 2, xx / 2) += g.at(c, y, xx);
        };
    return {this, id};
}

Var Tape::patchify(Var x, int p) {
    const Tensor& xv = val(x);
    if (xv.rank() != 3)
        throw ShapeError("patchify expects [C,H,W]");
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    if (p < 1 || H % p != 0 || W % p != 0)
        throw ShapeError("patchify: extents must be divisible by patch size");
    int gh = H / p, gw = W / p;
    int n = gh * gw, d = C * p * p;
    Tensor out({n, d});
    for (int by = 0; by < gh; ++by)
        for (int bx = 0; bx < gw; ++bx) {
            double* row = out.data() + static_cast<std::int64_t>(by * gw + bx) * d;
            int i = 0;
            for (int c = 0; c < C; ++c)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        row[i++] = xv.at(c, by * p + py, bx * p + px);
        }
    bool ng = wants_grad(x);
    int id = push(std::move(out), ng, nullptr, "patchify");
    if (ng)
        nodes_[static_cast<size_t>(id)].back = [id, x, C, p, gh, gw, d](Tape& t) {
            const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
            Tensor& gx = t.gbuf(x.id);
            for (int by = 0; by < gh; ++by)
                for (int bx = 0; bx < gw; ++bx) {
                    const double* row = g.data() + static_cast<std::int64_t>(by * gw + bx) * d;
                    int i = 0;
                    for (int c = 0; c < C; ++c)
                        for (int py = 0; py < p; ++py)
                            for (int px = 0; px < p; ++px)
                                gx.at(c, by * p + py, bx * p + px) += row[i++];
                }
        };
    return {this, id};
}

// ----------------------------------------------------------------- plain ops

namespace ops {

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
    Tape t;
    Var bx = b.empty() ? Var{} : t.input(b);
    return t.val(t.conv2d(t.input(x), t.input(w), bx, stride, padding));
}

std::pair<Tensor, Tensor> attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    Tape t;
    AttentionResult r = t.attention(t.input(q), t.input(k), t.input(v));
    return {t.val(r.out), t.val(r.weights)};
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps) {
    Tape t;
    Var g = gamma.empty() ? Var{} : t.input(gamma);
    Var b = beta.empty() ? Var{} : t.input(beta);
    return t.val(t.group_norm(t.input(x), groups, g, b, eps));
}

Tensor roi_align(const Tensor& x, const BoundingBox& box, int p) {
    Tape t;
    return t.val(t.roi_align(t.input(x), box, p));
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    Tape t;
    return t.val(t.bilinear_resize(t.input(x), out_h, out_w));
}

Tensor bilinear_sample(const Tensor& map, double x, double y) {
    if (map.rank() != 3)
        throw ShapeError("bilinear_sample expects [C,H,W]");
    int C = map.dim(0), H = map.dim(1), W = map.dim(2);
    BilinearTaps tp = bilinear_taps(H, W, x, y);
    Tensor out({C});
    for (int c = 0; c < C; ++c) {
        const double* p = map.data() + static_cast<std::int64_t>(c) * H * W;
        out[c] = tp.w00 * p[static_cast<std::int64_t>(tp.y0) * W + tp.x0] +
                 tp.w01 * p[static_cast<std::int64_t>(tp.y0) * W + tp.x1] +
                 tp.w10 * p[static_cast<std::int64_t>(tp.y1) * W + tp.x0] +
                 tp.w11 * p[static_cast<std::int64_t>(tp.y1) * W + tp.x1];
    }
    return out;
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h, int max_coords,
                  std::uint64_t seed) {
    if (!x.all_finite())
        throw NumericalError("grad_check: non-finite input");
    Tensor xcopy = x;
    Tensor g_ad;
    {
        Tape t;
        Var xv = t.param(&xcopy);
        Var loss = f(t, xv);
        if (t.val(loss).numel() != 1)
            throw ShapeError("grad_check: f must be scalar-valued");
        t.backward(loss);
        g_ad = t.grad_for(&xcopy);
    }
    auto eval = [&](const Tensor& xt) {
        Tape t;
        Var loss = f(t, t.input(xt));
        double v = t.val(loss)[0];
        if (!std::isfinite(v))
            throw NumericalError("grad_check: non-finite function value");
        return v;
    };
    std::vector<std::int64_t> coords;
    if (max_coords < 0 || max_coords >= x.numel()) {
        coords.resize(static_cast<size_t>(x.numel()));
        for (std::int64_t i = 0; i < x.numel(); ++i)
            coords[static_cast<size_t>(i)] = i;
    } else {
        Rng rng(seed);
        for (int i = 0; i < max_coords; ++i)
            coords.push_back(rng.next_u64() % static_cast<std::uint64_t>(x.numel()));
    }
    double worst = 0.0;
    Tensor xp = x;
    for (std::int64_t c : coords) {
        double orig = xp[c];
        xp[c] = orig + h;
        double fp = eval(xp);
        xp[c] = orig - h;
        double fm = eval(xp);
        xp[c] = orig;
        double g_fd = (fp - fm) / (2.0 * h);
        double ga = g_ad[c];
        if (!std::isfinite(g_fd) || !std::isfinite(ga))
            throw NumericalError("grad_check: non-finite gradient");
        double rel = std::fabs(ga - g_fd) / std::max({1.0, std::fabs(ga), std::fabs(g_fd)});
        worst = std::max(worst, rel);
    }
    return worst;
}

} // namespace ops

} // namespace ccm
