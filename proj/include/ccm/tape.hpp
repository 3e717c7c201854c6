// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ccm/geometry.hpp"
#include "ccm/tensor.hpp"

namespace ccm {

class Tape;

// Handle to a node on a tape. Cheap to copy; owns nothing.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& val() const;
    const std::vector<int>& shape() const;
};

struct AttentionResult {
    Var out;
    Var weights;
};

// Define-by-run reverse-mode graph over Tensors. Nodes are appended in
// topological order; backward() walks them in reverse. Values are
// immutable once written; a tape is single-threaded, but independent
// tapes may run concurrently.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf carrying data that never needs a gradient.
    Var input(Tensor v);
    // Leaf bound to external parameter storage. Repeated calls with the
    // same pointer return the same node. Gradients are collected per
    // storage pointer and read back with grad_for().
    Var param(Tensor* storage);

    // Restricts which params receive gradients (frozen submodules skip
    // backward work entirely). Default: all params trainable.
    void set_trainable_filter(std::function<bool(const Tensor*)> f) { trainable_ = std::move(f); }
    void set_check_finite(bool on) { check_finite_ = on; }

    const Tensor& val(Var v) const;
    // Gradient accumulated for a param leaf; zeros if it never received one.
    Tensor grad_for(const Tensor* storage) const;
    const std::vector<std::pair<Tensor*, int>>& params() const { return param_order_; }

    // ---- elementwise ----
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var add_scalar(Var a, double c);
    Var mul_scalar(Var a, double c);
    Var silu(Var a);
    Var gelu(Var a);
    Var clamp(Var a, double lo, double hi);

    // ---- shape ----
    Var reshape(Var a, std::vector<int> shape);
    Var concat(const std::vector<Var>& xs, int axis);
    Var slice(Var a, int axis, int start, int len);
    Var transpose2d(Var a);

    // ---- reductions ----
    Var sum(Var a);
    Var mean(Var a);
    Var mse(Var a, Var b);

    // ---- linear algebra ----
    Var matmul(Var a, Var b);
    // x:[n,k] w:[k,m] b:[m] (pass invalid Var for no bias)
    Var linear(Var x, Var w, Var b);

    // ---- nn ----
    // x:[N,C,H,W] or [C,H,W]; w:[O,C,k,k]; b:[O] or invalid.
    Var conv2d(Var x, Var w, Var b, int stride, int padding);
    // gamma/beta:[C] or invalid (treated as 1/0).
    Var group_norm(Var x, int groups, Var gamma, Var beta, double eps);
    // x:[n,d]; normalizes the last axis per row.
    Var layer_norm(Var x, Var gamma, Var beta, double eps);
    Var softmax_rows(Var x);
    // q:[n,d] k:[m,d] v:[m,dv] -> out:[n,dv], weights:[n,m]
    AttentionResult attention(Var q, Var k, Var v);
    // x:[C,H,W]; align-corners=false, border clamp.
    Var bilinear_resize(Var x, int out_h, int out_w);
    // x:[C,H,W]; p x p bin-center samples inside the (clamped) box.
    Var roi_align(Var x, const BoundingBox& box, int p);
    // base:[C,H,W] += patch:[C,bh,bw] at offset (y0,x0); outside the
    // window the result is bitwise equal to base.
    Var add_into_region(Var base, Var patch, int y0, int x0);
    // x:[C,H,W] or [N,C,H,W]; v:[C] added per channel.
    Var broadcast_add_channel(Var x, Var v);
    Var upsample_nearest2x(Var x);
    // x:[C,H,W] with even extents -> [C,H/2,W/2].
    Var avgpool2x(Var x);
    // x:[C,H,W], extents divisible by p -> [(H/p)*(W/p), C*p*p] patch rows
    // in raster order, each row channel-major.
    Var patchify(Var x, int p);

    void backward(Var loss);
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor val;
        Tensor grad;
        bool needs_grad = false;
        std::function<void(Tape&)> back;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const Tensor*, int> param_ids_;
    std::vector<std::pair<Tensor*, int>> param_order_;
    std::function<bool(const Tensor*)> trainable_;
    bool check_finite_ = true;

    int push(Tensor val, bool needs_grad, std::function<void(Tape&)> back, const char* opname);
    bool wants_grad(Var v) const { return v.valid() && nodes_[static_cast<size_t>(v.id)].needs_grad; }
    Tensor& gbuf(int id);
    bool has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }
    const Tensor& node_val(int id) const { return nodes_[static_cast<size_t>(id)].val; }

    friend struct Var;
};

namespace ops {

// Plain-tensor forms of the core array ops; these run the same kernels
// as the tape (built on a scratch graph) and are safe to call from
// multiple threads.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding);
std::pair<Tensor, Tensor> attention(const Tensor& q, const Tensor& k, const Tensor& v);
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps);
Tensor roi_align(const Tensor& x, const BoundingBox& box, int p);
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);
// 4-neighbor bilinear read at continuous (x, y); pixel centers sit at
// integer+0.5 and out-of-range reads clamp to the border.
Tensor bilinear_sample(const Tensor& map, double x, double y);

// Compares reverse-mode gradients of the scalar function f against
// central differences with step h. Checks every coordinate when
// max_coords < 0, otherwise a deterministic random subset. Returns
// max over checked coordinates of |g_ad - g_fd| / max(1,|g_ad|,|g_fd|).
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h, int max_coords = -1,
                  std::uint64_t seed = 0);

} // namespace ops

} // namespace ccm
