// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ccm/rng.hpp"
#include "ccm/tape.hpp"
#include "ccm/tensor.hpp"

namespace ccm {

// Named parameter registry. Entries are appended once at model build
// time and keep stable addresses afterwards; iteration follows
// registration order, which makes optimizer updates and checkpoints
// deterministic.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
    };

    Tensor* add(const std::string& name, Tensor init);
    Tensor* find(const std::string& name);
    const Tensor* find(const std::string& name) const;

    size_t size() const { return entries_.size(); }
    Entry& entry(size_t i) { return entries_[i]; }
    const Entry& entry(size_t i) const { return entries_[i]; }

    std::int64_t total_elements() const;
    std::int64_t total_elements(const std::string& prefix) const;

private:
    std::deque<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

Tensor uniform_fan_in_init(std::vector<int> shape, std::int64_t fan_in, Rng& rng);

struct Linear {
    Tensor* w = nullptr; // [in, out]
    Tensor* b = nullptr;
    static Linear make(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, bool bias = true,
                       bool zero_init = false);
    Var operator()(Tape& t, Var x) const;
};

struct Conv2d {
    Tensor* w = nullptr; // [out, in, k, k]
    Tensor* b = nullptr;
    int stride = 1;
    int padding = 0;
    static Conv2d make(ParamStore& ps, const std::string& name, int in, int out, int k, int stride, int padding,
                       Rng& rng, bool bias = true, bool zero_init = false);
    Var operator()(Tape& t, Var x) const;
};

struct GroupNorm {
    Tensor* gamma = nullptr;
    Tensor* beta = nullptr;
    int groups = 1;
    double eps = 1e-5;
    static GroupNorm make(ParamStore& ps, const std::string& name, int channels, int groups);
    Var operator()(Tape& t, Var x) const;
};

struct LayerNorm {
    Tensor* gamma = nullptr;
    Tensor* beta = nullptr;
    double eps = 1e-5;
    static LayerNorm make(ParamStore& ps, const std::string& name, int dim);
    Var operator()(Tape& t, Var x) const;
};

// Multi-head attention over token matrices; query tokens [n, dim],
// context tokens [m, ctx_dim]. Output projection may be zero-initialized
// so the enclosing residual starts as an identity.
struct MultiHeadAttention {
    Linear to_q, to_k, to_v, to_out;
    int heads = 1;
    int head_dim = 0;
    static MultiHeadAttention make(ParamStore& ps, const std::string& name, int dim, int ctx_dim, int heads, Rng& rng,
                                   bool zero_out = true);
    Var operator()(Tape& t, Var x, Var ctx) const;
};

// Sinusoidal position/timestep features of width dim (cos half, sin half).
Tensor timestep_embedding(int t, int dim, double max_period = 10000.0);

// Accumulates parameter gradients across tapes (one per batch sample).
struct GradBag {
    std::unordered_map<Tensor*, Tensor> grads;
    void add_from(const Tape& tape);
    void scale(double s);
    void clear() { grads.clear(); }
};

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Updates store entries present in `grads` whose name passes `filter`
    // (all when filter is null). Iterates in registration order.
    void step(ParamStore& ps, const GradBag& grads, const std::function<bool(const std::string&)>& filter = nullptr);

    int steps_taken() const { return t_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::unordered_map<Tensor*, std::pair<Tensor, Tensor>> state_;
};

// Checkpoint container: magic "CCKP", version u16, entry count u32, then
// per entry a u32 name length, the name bytes, and a CCTN tensor blob.
void save_checkpoint(const ParamStore& ps, const std::string& path);
// Loads into an already-built store; every entry must match by name and
// shape. Missing file -> StateError; mismatch -> StateError.
void load_checkpoint(ParamStore& ps, const std::string& path);
// Name -> element count census of a checkpoint file.
std::vector<std::pair<std::string, std::int64_t>> checkpoint_census(const std::string& path);

} // namespace ccm
