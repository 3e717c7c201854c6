// SPDX-License-Identifier: Apache-2.0
#include "ccm/encoders.hpp"

#include <cmath>

#include "ccm/error.hpp"

namespace ccm {

void EncoderConfig::validate() const {
    if (latent_factor != 2 && latent_factor != 4 && latent_factor != 8)
        throw ConfigError("latent_factor must be one of {2,4,8}");
    if (image_size <= 0 || image_size % latent_factor != 0)
        throw ConfigError("image_size must be divisible by latent_factor");
    if (fg_size <= 0 || patch_size <= 0 || fg_size % patch_size != 0)
        throw ConfigError("fg_size must be divisible by patch_size");
    if (vit_depth < 1 || vit_width < 1)
        throw ConfigError("vit depth/width must be positive");
    if (!(shallow_layer_index < deep_layer_index) || deep_layer_index > vit_depth || shallow_layer_index < 1)
        throw ConfigError("need 1 <= shallow_layer_index < deep_layer_index <= vit_depth");
    if (mlp_layers < 1)
        throw ConfigError("mlp_layers must be positive");
    if (vit_width % vit_heads != 0)
        throw ConfigError("vit_width must be divisible by vit_heads");
    if (d_g < 1 || d_l < 1 || ae_channels < 1)
        throw ConfigError("embedding dims and ae_channels must be positive");
    if (d_l != vit_width)
        throw ConfigError("d_l must equal vit_width (patch tokens are taken as-is)");
}

namespace {

int int_log2(int v) {
    int s = 0;
    while ((1 << s) < v)
        ++s;
    return s;
}

} // namespace

Autoencoder::Autoencoder(const EncoderConfig& cfg, ParamStore& ps, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    stages_ = int_log2(cfg_.latent_factor);
    int c = cfg_.ae_channels;
    enc_stem_ = Conv2d::make(ps, "ae.enc.stem", 3, c, 3, 1, 1, rng);
    int cur = c;
    for (int s = 0; s < stages_; ++s) {
        int nxt = std::min(4 * c, cur * 2);
        enc_convs_.push_back(Conv2d::make(ps, "ae.enc.s" + std::to_string(s), cur, nxt, 3, 1, 1, rng));
        cur = nxt;
    }
    enc_head_ = Conv2d::make(ps, "ae.enc.head", cur, 4, 3, 1, 1, rng);
    dec_stem_ = Conv2d::make(ps, "ae.dec.stem", 4, cur, 3, 1, 1, rng);
    for (int s = 0; s < stages_; ++s) {
        int nxt = s == stages_ - 1 ? c : std::max(c, cur / 2);
        dec_convs_.push_back(Conv2d::make(ps, "ae.dec.s" + std::to_string(s), cur, nxt, 3, 1, 1, rng));
        cur = nxt;
    }
    dec_head_ = Conv2d::make(ps, "ae.dec.head", c, 3, 3, 1, 1, rng);
}

Var Autoencoder::encode_var(Tape& t, Var image) const {
    const Tensor& v = t.val(image);
    if (v.rank() != 3 || v.dim(0) != 3)
        throw ShapeError("ae_encode expects a [3,H,W] image");
    if (v.dim(1) % cfg_.latent_factor != 0 || v.dim(2) % cfg_.latent_factor != 0)
        throw ShapeError("ae_encode: extents not divisible by latent factor");
    Var h = t.silu(enc_stem_(t, image));
    for (const auto& conv : enc_convs_)
        h = t.silu(conv(t, t.avgpool2x(h)));
    return enc_head_(t, h);
}

Var Autoencoder::decode_var(Tape& t, Var z) const {
    const Tensor& v = t.val(z);
    if (v.rank() != 3 || v.dim(0) != 4)
        throw ShapeError("ae_decode expects a [4,h,w] latent");
    Var h = t.silu(dec_stem_(t, z));
    for (const auto& conv : dec_convs_)
        h = t.silu(conv(t, t.upsample_nearest2x(h)));
    return t.clamp(dec_head_(t, h), -1.0, 1.0);
}

LatentCode Autoencoder::encode(const Tensor& image, LatentCode::Source kind) const {
    Tape t;
    t.set_trainable_filter([](const Tensor*) { return false; });
    LatentCode lc;
    lc.values = t.val(encode_var(t, t.input(image)));
    lc.source_kind = kind;
    return lc;
}

Tensor Autoencoder::decode(const Tensor& z) const {
    Tape t;
    t.set_trainable_filter([](const Tensor*) { return false; });
    return t.val(decode_var(t, t.input(z)));
}

ForegroundEncoder::ForegroundEncoder(const EncoderConfig& cfg, ParamStore& ps, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    int w = cfg_.vit_width;
    int pd = 3 * cfg_.patch_size * cfg_.patch_size;
    int np = cfg_.num_patches();
    patch_embed_ = Linear::make(ps, "fg.patch", pd, w, rng);
    Rng r = rng.stream("fg.tokens");
    cls_token_ = ps.add("fg.cls", r.gaussian_tensor({1, w}));
    Tensor pos = r.gaussian_tensor({np + 1, w});
    for (std::int64_t i = 0; i < pos.numel(); ++i)
        pos[i] *= 0.02;
    pos_embed_ = ps.add("fg.pos", std::move(pos));
    for (int b = 0; b < cfg_.vit_depth; ++b) {
        std::string p = "fg.b" + std::to_string(b);
        Block blk;
        blk.ln1 = LayerNorm::make(ps, p + ".ln1", w);
        blk.attn = MultiHeadAttention::make(ps, p + ".attn", w, w, cfg_.vit_heads, rng, /*zero_out=*/false);
        blk.ln2 = LayerNorm::make(ps, p + ".ln2", w);
        blk.fc1 = Linear::make(ps, p + ".fc1", w, 4 * w, rng);
        blk.fc2 = Linear::make(ps, p + ".fc2", 4 * w, w, rng);
        blocks_.push_back(blk);
    }
    ln_final_ = LayerNorm::make(ps, "fg.lnf", w);
    for (int i = 0; i < cfg_.mlp_layers; ++i) {
        int in = w;
        int out = i == cfg_.mlp_layers - 1 ? cfg_.d_g : w;
        mlp_.push_back(Linear::make(ps, "fg.mlp.fc" + std::to_string(i), in, out, rng));
    }
    null_global_ = ps.add("fg.null_global", Tensor::zeros({cfg_.d_g}));
}

ForegroundEncoder::EmbeddingVars ForegroundEncoder::encode_var(Tape& t, Var foreground, bool use_null_global) const {
    const Tensor& v = t.val(foreground);
    if (v.rank() != 3 || v.dim(0) != 3 || v.dim(1) != cfg_.fg_size || v.dim(2) != cfg_.fg_size)
        throw ShapeError("fg_encode expects a [3," + std::to_string(cfg_.fg_size) + "," + std::to_string(cfg_.fg_size) +
                         "] foreground");
    Var patches = patch_embed_(t, t.patchify(foreground, cfg_.patch_size));
    Var tokens = t.concat({t.param(cls_token_), patches}, 0); // [n_p+1, w]
    if (pos_enabled_ && cfg_.use_pos_embed)
        tokens = t.add(tokens, t.param(pos_embed_));
    Var local{};
    for (int b = 0; b < cfg_.vit_depth; ++b) {
        const Block& blk = blocks_[static_cast<size_t>(b)];
        Var n1 = blk.ln1(t, tokens);
        tokens = t.add(tokens, blk.attn(t, n1, n1));
        Var n2 = blk.ln2(t, tokens);
        tokens = t.add(tokens, blk.fc2(t, t.gelu(blk.fc1(t, n2))));
        if (b + 1 == cfg_.shallow_layer_index)
            local = t.slice(tokens, 0, 1, cfg_.num_patches());
        if (b + 1 == cfg_.deep_layer_index)
            break;
    }
    Var cls = ln_final_(t, t.slice(tokens, 0, 0, 1));
    Var g = cls;
    for (size_t i = 0; i < mlp_.size(); ++i) {
        g = mlp_[i](t, g);
        if (i + 1 < mlp_.size())
            g = t.gelu(g);
    }
    if (use_null_global)
        g = t.reshape(t.param(null_global_), {1, cfg_.d_g});
    return {g, local};
}

ForegroundEmbeddings ForegroundEncoder::encode(const Tensor& foreground) const {
    Tape t;
    t.set_trainable_filter([](const Tensor*) { return false; });
    EmbeddingVars ev = encode_var(t, t.input(foreground), false);
    ForegroundEmbeddings out;
    Tensor g = t.val(ev.global);
    out.global = Tensor({cfg_.d_g}, g.vec());
    out.local = t.val(ev.local);
    out.null_global = false;
    return out;
}

} // namespace ccm
