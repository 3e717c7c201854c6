// SPDX-License-Identifier: Apache-2.0
#include "ccm/generator.hpp"

#include <algorithm>
#include <cmath>

#include "ccm/error.hpp"
#include "ccm/image.hpp"

namespace ccm {

std::string ablation_name(Ablation a) {
    switch (a) {
    case Ablation::global_all_tokens: return "global_only_all_tokens";
    case Ablation::global_only_class: return "global_only_class";
    case Ablation::plus_aug: return "plus_aug";
    case Ablation::le_no_fm: return "le_no_fm";
    case Ablation::full: return "full";
    }
    throw ConfigError("bad ablation value");
}

Ablation ablation_from_name(const std::string& s) {
    if (s == "global_only_all_tokens")
        return Ablation::global_all_tokens;
    if (s == "global_only_class")
        return Ablation::global_only_class;
    if (s == "plus_aug")
        return Ablation::plus_aug;
    if (s == "le_no_fm")
        return Ablation::le_no_fm;
    if (s == "full")
        return Ablation::full;
    throw ConfigError("unknown ablation: " + s);
}

void GeneratorConfig::validate(int latent_size) const {
    if (base_channels < 1)
        throw ConfigError("generator needs positive base channels");
    if (p < 2)
        throw ConfigError("RoIAlign output size p must be >= 2");
    if (cfg_drop_prob < 0.0 || cfg_drop_prob > 1.0)
        throw ConfigError("cfg_drop_prob must lie in [0,1]");
    if (res_blocks < 1)
        throw ConfigError("res_blocks must be >= 1");
    for (int r : le_resolutions)
        if (std::find(attention_resolutions.begin(), attention_resolutions.end(), r) == attention_resolutions.end())
            throw ConfigError("le_resolutions must be a subset of attention_resolutions");
    int res = latent_size;
    for (size_t i = 0; i < channel_multipliers.size(); ++i) {
        int ch = base_channels * channel_multipliers[i];
        if (ch % norm_groups != 0 || ch % heads != 0)
            throw ConfigError("level channels must be divisible by norm_groups and heads");
        if (i + 1 < channel_multipliers.size()) {
            if (res % 2 != 0)
                throw ConfigError("latent resolution not divisible across levels");
            res /= 2;
        }
    }
    if (base_channels % 2 != 0)
        throw ConfigError("base_channels must be even (sinusoidal embedding width)");
    if (time_embed_dim < 1)
        throw ConfigError("time_embed_dim must be positive");
}

Tensor UNetInput::stacked() const {
    Tape t;
    Var s = t.concat({t.input(z_t), t.input(bg_latent), t.input(mask_ds), t.input(indicator_map)}, 0);
    return t.val(s);
}

UNetInput assemble_input(const Tensor& z_t, const Tensor& bg_latent, const BoundingBox& box, Indicator indicator,
                         int latent_factor, int t) {
    if (z_t.rank() != 3 || z_t.dim(0) != 4)
        throw ShapeError("assemble_input: z_t must be [4,h,w]");
    if (!z_t.same_shape(bg_latent))
        throw ShapeError("assemble_input: z_t and background latent extents differ");
    indicator.validate();
    int h = z_t.dim(1), w = z_t.dim(2);
    UNetInput in;
    in.z_t = z_t;
    in.bg_latent = bg_latent;
    Tensor pixel_mask = rasterize_box_mask(h * latent_factor, w * latent_factor, box);
    in.mask_ds = resize_nearest(pixel_mask, h, w);
    in.indicator_map = Tensor({2, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            in.indicator_map.at(0, y, x) = indicator.illumination;
            in.indicator_map.at(1, y, x) = indicator.pose;
        }
    in.t = t;
    return in;
}

FeatureWindow box_feature_window(const BoundingBox& box, int fh, int fw) {
    BoundingBox b = box.clamped();
    if (!(b.x0 < b.x1) || !(b.y0 < b.y1))
        throw GeometryError("box has zero area after clamping");
    int x0 = std::clamp(static_cast<int>(std::floor(b.x0 * fw)), 0, fw - 1);
    int y0 = std::clamp(static_cast<int>(std::floor(b.y0 * fh)), 0, fh - 1);
    int x1 = std::clamp(static_cast<int>(std::ceil(b.x1 * fw)), x0 + 1, fw);
    int y1 = std::clamp(static_cast<int>(std::ceil(b.y1 * fh)), y0 + 1, fh);
    return {y0, x0, y1 - y0, x1 - x0};
}

UNet::ResBlock UNet::make_res(ParamStore& ps, const std::string& name, int in_ch, int out_ch, Rng& rng) {
    ResBlock rb;
    rb.out_ch = out_ch;
    rb.n1 = GroupNorm::make(ps, name + ".n1", in_ch, gcfg_.norm_groups);
    rb.c1 = Conv2d::make(ps, name + ".c1", in_ch, out_ch, 3, 1, 1, rng);
    rb.temb = Linear::make(ps, name + ".temb", gcfg_.time_embed_dim, out_ch, rng);
    rb.n2 = GroupNorm::make(ps, name + ".n2", out_ch, gcfg_.norm_groups);
    rb.c2 = Conv2d::make(ps, name + ".c2", out_ch, out_ch, 3, 1, 1, rng, true, gcfg_.zero_init_residuals);
    if (in_ch != out_ch) {
        rb.skip = Conv2d::make(ps, name + ".skip", in_ch, out_ch, 1, 1, 0, rng);
        rb.has_skip = true;
    }
    return rb;
}

UNet::TransformerBlock UNet::make_transformer(ParamStore& ps, const std::string& name, int ch, Rng& rng) {
    TransformerBlock tb;
    tb.channels = ch;
    int ctx_dim = ecfg_.d_g;
    tb.norm = GroupNorm::make(ps, name + ".norm", ch, gcfg_.norm_groups);
    tb.proj_in = Conv2d::make(ps, name + ".proj_in", ch, ch, 1, 1, 0, rng);
    tb.ln1 = LayerNorm::make(ps, name + ".ln1", ch);
    tb.self_attn = MultiHeadAttention::make(ps, name + ".self", ch, ch, gcfg_.heads, rng, /*zero_out=*/false);
    tb.ln2 = LayerNorm::make(ps, name + ".ln2", ch);
    tb.cross_attn =
        MultiHeadAttention::make(ps, name + ".cross", ch, ctx_dim, gcfg_.heads, rng, gcfg_.zero_init_residuals);
    tb.ln3 = LayerNorm::make(ps, name + ".ln3", ch);
    tb.ff1 = Linear::make(ps, name + ".ff1", ch, 4 * ch, rng);
    tb.ff2 = Linear::make(ps, name + ".ff2", 4 * ch, ch, rng);
    tb.proj_out = Conv2d::make(ps, name + ".proj_out", ch, ch, 1, 1, 0, rng, true, gcfg_.zero_init_residuals);
    return tb;
}

UNet::LeSite UNet::make_le(ParamStore& ps, const std::string& name, int ch, Rng& rng) {
    LeSite le;
    le.channels = ch;
    le.fuse = Conv2d::make(ps, name + ".fuse", ch + 2, ch, 3, 1, 1, rng);
    le.to_q = Linear::make(ps, name + ".q", ch, ch, rng, /*bias=*/false);
    le.to_k = Linear::make(ps, name + ".k", ecfg_.d_l, ch, rng, /*bias=*/false);
    le.to_v = Linear::make(ps, name + ".v", ecfg_.d_l, ch, rng, /*bias=*/false);
    // Zero output projection keeps an untrained site additive-neutral;
    // conv_gamma starts at the identity scale (weights 0, bias 1) and
    // conv_beta at zero, so modulation is a no-op too.
    bool zi = gcfg_.zero_init_residuals;
    le.to_out = Linear::make(ps, name + ".out", ch, ch, rng, /*bias=*/true, zi);
    if (gcfg_.has_feature_modulation()) {
        le.conv_gamma = Conv2d::make(ps, name + ".gamma", ecfg_.d_l, ch, 3, 1, 1, rng, true, zi);
        if (zi)
            for (std::int64_t i = 0; i < le.conv_gamma.b->numel(); ++i)
                (*le.conv_gamma.b)[i] = 1.0;
        le.conv_beta = Conv2d::make(ps, name + ".beta", ecfg_.d_l, ch, 3, 1, 1, rng, true, zi);
    }
    return le;
}

UNet::UNet(const GeneratorConfig& gcfg, const EncoderConfig& ecfg, ParamStore& ps, Rng& rng)
    : gcfg_(gcfg), ecfg_(ecfg) {
    ecfg_.validate();
    gcfg_.validate(ecfg_.latent_size());
    if (gcfg_.all_tokens_context() && ecfg_.d_g != ecfg_.d_l)
        throw ConfigError("all-token context requires d_g == d_l");

    temb_fc1_ = Linear::make(ps, "unet.temb.fc1", gcfg_.base_channels, gcfg_.time_embed_dim, rng);
    temb_fc2_ = Linear::make(ps, "unet.temb.fc2", gcfg_.time_embed_dim, gcfg_.time_embed_dim, rng);
    stem_ = Conv2d::make(ps, "unet.stem", 11, gcfg_.base_channels, 3, 1, 1, rng);

    auto attn_at = [&](int res) {
        return std::find(gcfg_.attention_resolutions.begin(), gcfg_.attention_resolutions.end(), res) !=
               gcfg_.attention_resolutions.end();
    };
    auto le_at = [&](int res) {
        return gcfg_.has_local_enhancement() &&
               std::find(gcfg_.le_resolutions.begin(), gcfg_.le_resolutions.end(), res) != gcfg_.le_resolutions.end();
    };

    int levels = static_cast<int>(gcfg_.channel_multipliers.size());
    int res = ecfg_.latent_size();
    int ch = gcfg_.base_channels;
    std::vector<int> skip_chans;
    skip_chans.push_back(ch);

    auto add_res = [&](std::vector<Stage>& seq, const std::string& name, int in_ch, int out_ch) {
        rblocks_.push_back(make_res(ps, name, in_ch, out_ch, rng));
        seq.push_back({Stage::Kind::res, static_cast<int>(rblocks_.size()) - 1});
    };
    auto add_attn = [&](std::vector<Stage>& seq, const std::string& name, int c, int r) {
        if (attn_at(r)) {
            tblocks_.push_back(make_transformer(ps, name + ".t", c, rng));
            seq.push_back({Stage::Kind::transformer, static_cast<int>(tblocks_.size()) - 1});
            if (le_at(r)) {
                le_sites_.push_back(make_le(ps, name + ".le", c, rng));
                seq.push_back({Stage::Kind::le, static_cast<int>(le_sites_.size()) - 1});
            }
        }
    };

    for (int i = 0; i < levels; ++i) {
        int out_ch = gcfg_.base_channels * gcfg_.channel_multipliers[static_cast<size_t>(i)];
        for (int j = 0; j < gcfg_.res_blocks; ++j) {
            std::string name = "unet.down" + std::to_string(i) + ".b" + std::to_string(j);
            add_res(down_stages_, name, ch, out_ch);
            ch = out_ch;
            add_attn(down_stages_, name, ch, res);
            skip_chans.push_back(ch);
        }
        if (i + 1 < levels) {
            resample_convs_.push_back(
                Conv2d::make(ps, "unet.down" + std::to_string(i) + ".ds", ch, ch, 3, 1, 1, rng));
            down_stages_.push_back({Stage::Kind::down, static_cast<int>(resample_convs_.size()) - 1});
            skip_chans.push_back(ch);
            res /= 2;
        }
    }

    if (levels > 0) {
        add_res(mid_stages_, "unet.mid.b0", ch, ch);
        add_attn(mid_stages_, "unet.mid", ch, res);
        add_res(mid_stages_, "unet.mid.b1", ch, ch);
    }

    for (int i = levels - 1; i >= 0; --i) {
        int out_ch = gcfg_.base_channels * gcfg_.channel_multipliers[static_cast<size_t>(i)];
        for (int j = 0; j < gcfg_.res_blocks + 1; ++j) {
            int skip_ch = skip_chans.back();
            skip_chans.pop_back();
            std::string name = "unet.up" + std::to_string(i) + ".b" + std::to_string(j);
            add_res(up_stages_, name, ch + skip_ch, out_ch);
            ch = out_ch;
            add_attn(up_stages_, name, ch, res);
        }
        if (i > 0) {
            resample_convs_.push_back(Conv2d::make(ps, "unet.up" + std::to_string(i) + ".us", ch, ch, 3, 1, 1, rng));
            up_stages_.push_back({Stage::Kind::up, static_cast<int>(resample_convs_.size()) - 1});
            res *= 2;
        }
    }

    out_norm_ = GroupNorm::make(ps, "unet.out.norm", ch, gcfg_.norm_groups);
    out_conv_ = Conv2d::make(ps, "unet.out.conv", ch, 4, 3, 1, 1, rng, true, gcfg_.zero_init_residuals);
}

Var UNet::run_res(Tape& t, const ResBlock& rb, Var x, Var temb) const {
    Var h = rb.c1(t, t.silu(rb.n1(t, x)));
    Var e = rb.temb(t, t.silu(temb));                       // [1, out_ch]
    h = t.broadcast_add_channel(h, t.reshape(e, {rb.out_ch}));
    h = rb.c2(t, t.silu(rb.n2(t, h)));
    Var s = rb.has_skip ? rb.skip(t, x) : x;
    return t.add(h, s);
}

Var UNet::global_fusion(Tape& t, Var feat_tokens, Var context, int block_index) const {
    const TransformerBlock& tb = tblocks_[static_cast<size_t>(block_index)];
    return t.add(feat_tokens, tb.cross_attn(t, tb.ln2(t, feat_tokens), context));
}

Var UNet::run_transformer(Tape& t, int block_index, Var x, Var ctx) const {
    const TransformerBlock& tb = tblocks_[static_cast<size_t>(block_index)];
    const Tensor& xv = t.val(x);
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    Var resid = x;
    Var h = tb.proj_in(t, tb.norm(t, x));
    Var tokens = t.transpose2d(t.reshape(h, {C, H * W})); // [HW, C]
    Var n1 = tb.ln1(t, tokens);
    tokens = t.add(tokens, tb.self_attn(t, n1, n1));
    tokens = global_fusion(t, tokens, ctx, block_index);
    tokens = t.add(tokens, tb.ff2(t, t.gelu(tb.ff1(t, tb.ln3(t, tokens)))));
    Var back = t.reshape(t.transpose2d(tokens), {C, H, W});
    return t.add(tb.proj_out(t, back), resid);
}

Var UNet::feature_modulation(Tape& t, Var f_tilde, Var attn_map, Var e_l, int site_index) const {
    if (!gcfg_.has_feature_modulation())
        throw ConfigError("feature modulation is disabled in this configuration");
    const LeSite& le = le_sites_[static_cast<size_t>(site_index)];
    const Tensor& fv = t.val(f_tilde);
    int c = fv.dim(0), p = fv.dim(1);
    // Aligned embedding map: reshape(A x E_l) to [d_l, p, p].
    Var aligned = t.reshape(t.transpose2d(t.matmul(attn_map, e_l)), {ecfg_.d_l, p, p});
    Var gamma = le.conv_gamma(t, aligned);
    Var beta = le.conv_beta(t, aligned);
    Var normed = t.group_norm(f_tilde, std::min(gcfg_.norm_groups, c), Var{}, Var{}, 1e-5);
    return t.add(t.mul(normed, gamma), beta);
}

Var UNet::local_enhancement(Tape& t, Var feat, Var e_l, Indicator indicator, const BoundingBox& box, int site_index,
                            bool with_modulation) const {
    return local_enhancement_probe(t, feat, e_l, indicator, box, site_index, with_modulation).out;
}

UNet::LeProbe UNet::local_enhancement_probe(Tape& t, Var feat, Var e_l, Indicator indicator, const BoundingBox& box,
                                            int site_index, bool with_modulation) const {
    const LeSite& le = le_sites_[static_cast<size_t>(site_index)];
    const Tensor& fv = t.val(feat);
    int c = fv.dim(0), fh = fv.dim(1), fw = fv.dim(2);
    if (c != le.channels)
        throw ShapeError("local_enhancement: channel mismatch at this site");
    int p = gcfg_.p;

    Var roi = t.roi_align(feat, box, p); // [c,p,p]
    Tensor smap({2, p, p});
    for (int i = 0; i < p * p; ++i) {
        smap[i] = indicator.illumination;
        smap[p * p + i] = indicator.pose;
    }
    Var fused = le.fuse(t, t.concat({roi, t.input(smap)}, 0));            // [c,p,p]
    Var fbar = t.transpose2d(t.reshape(fused, {c, p * p}));               // [p^2,c]
    Var q = le.to_q(t, fbar);
    Var k = le.to_k(t, e_l);
    Var v = le.to_v(t, e_l);
    AttentionResult ar = t.attention(q, k, v);                            // A:[p^2,n_p]
    Var f_tilde = t.reshape(t.transpose2d(le.to_out(t, ar.out)), {c, p, p});
    Var enhanced = (with_modulation && gcfg_.has_feature_modulation())
                       ? feature_modulation(t, f_tilde, ar.weights, e_l, site_index)
                       : f_tilde;
    FeatureWindow win = box_feature_window(box, fh, fw);
    Var patch = t.bilinear_resize(enhanced, win.h, win.w);
    return {t.add_into_region(feat, patch, win.y0, win.x0), ar.weights};
}

Var UNet::forward(Tape& t, Var x_stacked, int tstep, Var e_g, Var e_l, const BoundingBox& box, Indicator indicator,
                  bool le_enabled) const {
    const Tensor& xv = t.val(x_stacked);
    if (xv.rank() != 3 || xv.dim(0) != 11)
        throw ShapeError("unet_forward expects an [11,h,w] input");
    Var ctx = gcfg_.all_tokens_context() ? t.concat({e_g, e_l}, 0) : e_g;

    Var temb = t.input(Tensor({1, gcfg_.base_channels}, timestep_embedding(tstep, gcfg_.base_channels).vec()));
    temb = temb_fc2_(t, t.silu(temb_fc1_(t, temb)));

    auto run_seq = [&](const std::vector<Stage>& seq, Var h, std::vector<Var>* push_skips,
                       std::vector<Var>* pop_skips, size_t* pop_at) {
        for (const Stage& st : seq) {
            switch (st.kind) {
            case Stage::Kind::res: {
                if (pop_skips) {
                    Var skip = (*pop_skips)[--*pop_at];
                    h = run_res(t, rblocks_[static_cast<size_t>(st.index)], t.concat({h, skip}, 0), temb);
                } else {
                    h = run_res(t, rblocks_[static_cast<size_t>(st.index)], h, temb);
                }
                if (push_skips)
                    push_skips->push_back(h);
                break;
            }
            case Stage::Kind::transformer:
                h = run_transformer(t, st.index, h, ctx);
                if (push_skips && !push_skips->empty())
                    push_skips->back() = h;
                break;
            case Stage::Kind::le:
                if (le_enabled)
                    h = local_enhancement(t, h, e_l, indicator, box, st.index, gcfg_.has_feature_modulation());
                if (push_skips && !push_skips->empty())
                    push_skips->back() = h;
                break;
            case Stage::Kind::down:
                h = resample_convs_[static_cast<size_t>(st.index)](t, t.avgpool2x(h));
                if (push_skips)
                    push_skips->push_back(h);
                break;
            case Stage::Kind::up:
                h = resample_convs_[static_cast<size_t>(st.index)](t, t.upsample_nearest2x(h));
                break;
            default:
                throw Error("unexpected stage");
            }
        }
        return h;
    };

    Var h = stem_(t, x_stacked);
    std::vector<Var> skips;
    skips.push_back(h);
    h = run_seq(down_stages_, h, &skips, nullptr, nullptr);
    h = run_seq(mid_stages_, h, nullptr, nullptr, nullptr);
    size_t pop_at = skips.size();
    h = run_seq(up_stages_, h, nullptr, &skips, &pop_at);
    return out_conv_(t, t.silu(out_norm_(t, h)));
}

Tensor UNet::forward(const UNetInput& input, const Tensor& e_g, const Tensor& e_l, const BoundingBox& box,
                     Indicator indicator, bool le_enabled) const {
    Tape t;
    t.set_trainable_filter([](const Tensor*) { return false; });
    Var eg = t.input(Tensor({1, ecfg_.d_g}, e_g.vec()));
    Var el = t.input(e_l);
    Var out = forward(t, t.input(input.stacked()), input.t, eg, el, box, indicator, le_enabled);
    return t.val(out);
}

int UNet::le_channels(int site_index) const {
    return le_sites_[static_cast<size_t>(site_index)].channels;
}

std::int64_t count_parameters(const GeneratorConfig& gcfg, const EncoderConfig& ecfg) {
    ParamStore ps;
    Rng rng(0);
    UNet net(gcfg, ecfg, ps, rng);
    return ps.total_elements("unet.");
}

} // namespace ccm
