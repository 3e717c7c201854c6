// SPDX-License-Identifier: Apache-2.0
#include "ccm/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "ccm/error.hpp"

namespace ccm {

Tensor* ParamStore::add(const std::string& name, Tensor init) {
    if (index_.count(name))
        throw Error("duplicate parameter name: " + name);
    entries_.push_back({name, std::move(init)});
    index_.emplace(name, entries_.size() - 1);
    return &entries_.back().value;
}

Tensor* ParamStore::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].value;
}

const Tensor* ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].value;
}

std::int64_t ParamStore::total_elements() const {
    std::int64_t n = 0;
    for (const auto& e : entries_)
        n += e.value.numel();
    return n;
}

std::int64_t ParamStore::total_elements(const std::string& prefix) const {
    std::int64_t n = 0;
    for (const auto& e : entries_)
        if (e.name.rfind(prefix, 0) == 0)
            n += e.value.numel();
    return n;
}

Tensor uniform_fan_in_init(std::vector<int> shape, std::int64_t fan_in, Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
    return rng.uniform_tensor(std::move(shape), -bound, bound);
}

Linear Linear::make(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, bool bias, bool zero_init) {
    Linear l;
    Rng r = rng.stream(name);
    l.w = ps.add(name + ".w", zero_init ? Tensor::zeros({in, out}) : uniform_fan_in_init({in, out}, in, r));
    if (bias)
        l.b = ps.add(name + ".b", zero_init ? Tensor::zeros({out}) : uniform_fan_in_init({out}, in, r));
    return l;
}

Var Linear::operator()(Tape& t, Var x) const {
    return t.linear(x, t.param(w), b ? t.param(b) : Var{});
}

Conv2d Conv2d::make(ParamStore& ps, const std::string& name, int in, int out, int k, int stride, int padding, Rng& rng,
                    bool bias, bool zero_init) {
    Conv2d c;
    c.stride = stride;
    c.padding = padding;
    Rng r = rng.stream(name);
    std::int64_t fan_in = static_cast<std::int64_t>(in) * k * k;
    c.w = ps.add(name + ".w", zero_init ? Tensor::zeros({out, in, k, k}) : uniform_fan_in_init({out, in, k, k}, fan_in, r));
    if (bias)
        c.b = ps.add(name + ".b", zero_init ? Tensor::zeros({out}) : uniform_fan_in_init({out}, fan_in, r));
    return c;
}

Var Conv2d::operator()(Tape& t, Var x) const {
    return t.conv2d(x, t.param(w), b ? t.param(b) : Var{}, stride, padding);
}

GroupNorm GroupNorm::make(ParamStore& ps, const std::string& name, int channels, int groups) {
    GroupNorm g;
    g.groups = groups;
    g.gamma = ps.add(name + ".g", Tensor::full({channels}, 1.0));
    g.beta = ps.add(name + ".b", Tensor::zeros({channels}));
    return g;
}

Var GroupNorm::operator()(Tape& t, Var x) const {
    return t.group_norm(x, groups, t.param(gamma), t.param(beta), eps);
}

LayerNorm LayerNorm::make(ParamStore& ps, const std::string& name, int dim) {
    LayerNorm l;
    l.gamma = ps.add(name + ".g", Tensor::full({dim}, 1.0));
    l.beta = ps.add(name + ".b", Tensor::zeros({dim}));
    return l;
}

Var LayerNorm::operator()(Tape& t, Var x) const {
    return t.layer_norm(x, t.param(gamma), t.param(beta), eps);
}

MultiHeadAttention MultiHeadAttention::make(ParamStore& ps, const std::string& name, int dim, int ctx_dim, int heads,
                                            Rng& rng, bool zero_out) {
    if (dim % heads != 0)
        throw ConfigError("attention dim must be divisible by heads");
    MultiHeadAttention a;
    a.heads = heads;
    a.head_dim = dim / heads;
    a.to_q = Linear::make(ps, name + ".q", dim, dim, rng, /*bias=*/false);
    a.to_k = Linear::make(ps, name + ".k", ctx_dim, dim, rng, /*bias=*/false);
    a.to_v = Linear::make(ps, name + ".v", ctx_dim, dim, rng, /*bias=*/false);
    a.to_out = Linear::make(ps, name + ".out", dim, dim, rng, /*bias=*/true, zero_out);
    return a;
}

Var MultiHeadAttention::operator()(Tape& t, Var x, Var ctx) const {
    Var q = to_q(t, x);
    Var k = to_k(t, ctx);
    Var v = to_v(t, ctx);
    if (heads == 1)
        return to_out(t, t.attention(q, k, v).out);
    std::vector<Var> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var qh = t.slice(q, 1, h * head_dim, head_dim);
        Var kh = t.slice(k, 1, h * head_dim, head_dim);
        Var vh = t.slice(v, 1, h * head_dim, head_dim);
        outs.push_back(t.attention(qh, kh, vh).out);
    }
    return to_out(t, t.concat(outs, 1));
}

Tensor timestep_embedding(int t, int dim, double max_period) {
    if (dim % 2 != 0)
        throw ConfigError("timestep embedding dim must be even");
    int half = dim / 2;
    Tensor e({dim});
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(max_period) * static_cast<double>(i) / half);
        e[i] = std::cos(t * freq);
        e[half + i] = std::sin(t * freq);
    }
    return e;
}

void GradBag::add_from(const Tape& tape) {
    for (const auto& [ptr, id] : tape.params()) {
        (void)id;
        Tensor g = tape.grad_for(ptr);
        auto it = grads.find(ptr);
        if (it == grads.end()) {
            grads.emplace(ptr, std::move(g));
        } else {
            Tensor& acc = it->second;
            for (std::int64_t i = 0; i < acc.numel(); ++i)
                acc[i] += g[i];
        }
    }
}

void GradBag::scale(double s) {
    for (auto& [ptr, g] : grads) {
        (void)ptr;
        for (std::int64_t i = 0; i < g.numel(); ++i)
            g[i] *= s;
    }
}

void Adam::step(ParamStore& ps, const GradBag& grads, const std::function<bool(const std::string&)>& filter) {
    ++t_;
    double c1 = 1.0 - std::pow(beta1_, t_);
    double c2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < ps.size(); ++i) {
        auto& e = ps.entry(i);
        if (filter && !filter(e.name))
            continue;
        auto git = grads.grads.find(&e.value);
        if (git == grads.grads.end())
            continue;
        const Tensor& g = git->second;
        auto& [m, v] = state_[&e.value];
        if (m.empty()) {
            m = Tensor::zeros(e.value.shape());
            v = Tensor::zeros(e.value.shape());
        }
        for (std::int64_t j = 0; j < g.numel(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            double mhat = m[j] / c1;
            double vhat = v[j] / c2;
            e.value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
        e.value.check_finite("adam update");
    }
}

namespace {

constexpr char kCkptMagic[4] = {'C', 'C', 'K', 'P'};
constexpr std::uint16_t kCkptVersion = 1;

void write_u16le(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void write_u32le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i)
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint16_t read_u16le(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t read_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

} // namespace

void save_checkpoint(const ParamStore& ps, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw IoError("cannot open checkpoint for write: " + path);
    os.write(kCkptMagic, 4);
    write_u16le(os, kCkptVersion);
    write_u32le(os, static_cast<std::uint32_t>(ps.size()));
    for (size_t i = 0; i < ps.size(); ++i) {
        const auto& e = ps.entry(i);
        write_u32le(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        e.value.save(os);
    }
    if (!os)
        throw IoError("failed writing checkpoint: " + path);
}

namespace {

template <typename Fn> void for_each_checkpoint_entry(const std::string& path, Fn&& fn) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw StateError("checkpoint not found: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCkptMagic, 4) != 0)
        throw StateError("bad checkpoint magic: " + path);
    if (read_u16le(is) != kCkptVersion)
        throw StateError("unsupported checkpoint version: " + path);
    std::uint32_t count = read_u32le(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t len = read_u32le(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        Tensor t = Tensor::load(is);
        if (!is)
            throw StateError("truncated checkpoint: " + path);
        fn(name, std::move(t));
    }
}

} // namespace

void load_checkpoint(ParamStore& ps, const std::string& path) {
    size_t seen = 0;
    for_each_checkpoint_entry(path, [&](const std::string& name, Tensor t) {
        Tensor* dst = ps.find(name);
        if (!dst)
            throw StateError("checkpoint entry has no matching parameter: " + name);
        if (dst->shape() != t.shape())
            throw StateError("checkpoint shape mismatch for " + name);
        *dst = std::move(t);
        ++seen;
    });
    if (seen != ps.size())
        throw StateError("checkpoint entry count mismatch");
}

std::vector<std::pair<std::string, std::int64_t>> checkpoint_census(const std::string& path) {
    std::vector<std::pair<std::string, std::int64_t>> out;
    for_each_checkpoint_entry(path, [&](const std::string& name, Tensor t) { out.emplace_back(name, t.numel()); });
    return out;
}

} // namespace ccm
