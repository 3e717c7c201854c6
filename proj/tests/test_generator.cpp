// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ccm/error.hpp"
#include "ccm/generator.hpp"
#include "ccm/image.hpp"

using namespace ccm;

namespace {

EncoderConfig tiny_enc() {
    EncoderConfig c;
    c.image_size = 32;
    c.latent_factor = 4;
    c.fg_size = 16;
    c.patch_size = 4;
    c.vit_depth = 3;
    c.vit_width = 16;
    c.deep_layer_index = 3;
    c.shallow_layer_index = 1;
    c.vit_heads = 2;
    c.d_g = 16;
    c.d_l = 16;
    c.ae_channels = 8;
    return c;
}

GeneratorConfig tiny_gen(Ablation a = Ablation::full) {
    GeneratorConfig g;
    g.base_channels = 16;
    g.channel_multipliers = {1, 2};
    g.attention_resolutions = {8, 4};
    g.le_resolutions = {8, 4};
    g.p = 4;
    g.time_embed_dim = 32;
    g.res_blocks = 1;
    g.heads = 2;
    g.norm_groups = 8;
    g.ablation = a;
    return g;
}

struct Built {
    ParamStore ps;
    std::unique_ptr<UNet> net;
};

Built build(Ablation a = Ablation::full, bool zero_init = true, std::uint64_t seed = 1) {
    Built b;
    GeneratorConfig g = tiny_gen(a);
    g.zero_init_residuals = zero_init;
    Rng rng(seed);
    b.net = std::make_unique<UNet>(g, tiny_enc(), b.ps, rng);
    return b;
}

} // namespace

TEST_CASE("assemble_input stacks 11 channels with the documented layout") {
    Rng rng(3);
    Tensor z = rng.gaussian_tensor({4, 8, 8});
    Tensor bg = rng.gaussian_tensor({4, 8, 8});
    BoundingBox box{0.25, 0.25, 0.75, 0.75};
    UNetInput in = assemble_input(z, bg, box, Indicator::harmonize(), 4, 17);
    Tensor s = in.stacked();
    REQUIRE(s.shape() == std::vector<int>{11, 8, 8});
    for (int i = 0; i < 64; ++i) {
        CHECK(s[i] == z[i]);                    // channels 0-3
        CHECK(s[4 * 64 + i] == bg[i]);          // channels 4-7
        CHECK(s[9 * 64 + i] == 1.0);            // illumination bit
        CHECK(s[10 * 64 + i] == 0.0);           // pose bit
    }
    for (std::int64_t i = 0; i < in.mask_ds.numel(); ++i)
        CHECK((in.mask_ds[i] == 0.0 || in.mask_ds[i] == 1.0));

    UNetInput full = assemble_input(z, bg, BoundingBox{0.0, 0.0, 1.0, 1.0}, Indicator::blend(), 4, 0);
    for (std::int64_t i = 0; i < full.mask_ds.numel(); ++i)
        CHECK(full.mask_ds[i] == 1.0);

    Tensor bg_bad = rng.gaussian_tensor({4, 4, 4});
    CHECK_THROWS_AS(assemble_input(z, bg_bad, box, Indicator::blend(), 4, 0), ShapeError);
}

TEST_CASE("roi_align identity configuration returns the input") {
    Rng rng(5);
    Tensor m = rng.gaussian_tensor({3, 6, 6});
    Tensor out = ops::roi_align(m, BoundingBox{0.0, 0.0, 1.0, 1.0}, 6);
    for (std::int64_t i = 0; i < m.numel(); ++i)
        CHECK(std::fabs(out[i] - m[i]) <= 1e-12);
}

TEST_CASE("roi_align constant map stays constant") {
    Tensor m = Tensor::full({2, 5, 7}, 3.25);
    Tensor out = ops::roi_align(m, BoundingBox{0.13, 0.22, 0.87, 0.61}, 4);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        CHECK(out[i] == doctest::Approx(3.25).epsilon(1e-14));
}

TEST_CASE("roi_align matches the bilinear oracle per bin") {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        Rng r = rng.stream("t", static_cast<std::uint64_t>(trial));
        int H = 4 + r.uniform_int(8), W = 4 + r.uniform_int(8);
        int p = 2 + r.uniform_int(5);
        Tensor m = r.gaussian_tensor({2, H, W});
        double x0 = r.uniform(0.0, 0.6), y0 = r.uniform(0.0, 0.6);
        BoundingBox box{x0, y0, x0 + r.uniform(0.1, 1.0 - x0), y0 + r.uniform(0.1, 1.0 - y0)};
        Tensor got = ops::roi_align(m, box, p);
        double bw = (box.x1 - box.x0) * W / p, bh = (box.y1 - box.y0) * H / p;
        for (int i = 0; i < p; ++i)
            for (int j = 0; j < p; ++j) {
                Tensor want = ops::bilinear_sample(m, box.x0 * W + (j + 0.5) * bw, box.y0 * H + (i + 0.5) * bh);
                for (int c = 0; c < 2; ++c)
                    CHECK(std::fabs(got.at(c, i, j) - want[c]) <= 1e-10);
            }
    }
    Tensor m = Rng(1).gaussian_tensor({1, 4, 4});
    CHECK_THROWS_AS(ops::roi_align(m, BoundingBox{-0.5, 0.2, -0.1, 0.8}, 2), GeometryError);
}

TEST_CASE("local enhancement leaves outside-box features bitwise unchanged") {
    Built b = build();
    Rng rng(11);
    for (int trial = 0; trial < 25; ++trial) {
        Rng r = rng.stream("t", static_cast<std::uint64_t>(trial));
        int site = trial % b.net->num_le_sites();
        int ch = b.net->le_channels(site);
        int res = site == 0 ? 8 : 4;
        Tensor feat = r.gaussian_tensor({ch, res, res});
        Tensor el = r.gaussian_tensor({16, 16});
        double x0 = r.uniform(0.0, 0.5), y0 = r.uniform(0.0, 0.5);
        BoundingBox box{x0, y0, x0 + r.uniform(0.15, 0.99 - x0), y0 + r.uniform(0.15, 0.99 - y0)};
        // Give the zero-initialized site nonzero output so the check is
        // not vacuous.
        for (size_t i = 0; i < b.ps.size(); ++i)
            if (b.ps.entry(i).name.find(".le.") != std::string::npos) {
                Rng pr = r.stream(b.ps.entry(i).name);
                b.ps.entry(i).value = pr.gaussian_tensor(b.ps.entry(i).value.shape());
            }
        Tape t;
        Var out =
            b.net->local_enhancement(t, t.input(feat), t.input(el), Indicator::compose(), box, site, true);
        const Tensor& ov = t.val(out);
        FeatureWindow win = box_feature_window(box, res, res);
        bool changed_inside = false;
        for (int c = 0; c < ch; ++c)
            for (int y = 0; y < res; ++y)
                for (int x = 0; x < res; ++x) {
                    bool inside = y >= win.y0 && y < win.y0 + win.h && x >= win.x0 && x < win.x0 + win.w;
                    if (!inside)
                        CHECK(ov.at(c, y, x) == feat.at(c, y, x));
                    else if (ov.at(c, y, x) != feat.at(c, y, x))
                        changed_inside = true;
                }
        CHECK(changed_inside);
    }
}

TEST_CASE("local enhancement attention map rows sum to one") {
    Built b = build();
    Rng rng(13);
    Tensor feat = rng.gaussian_tensor({b.net->le_channels(0), 8, 8});
    Tensor el = rng.gaussian_tensor({16, 16});
    BoundingBox box{0.2, 0.3, 0.8, 0.9};
    Tape t;
    auto probe = b.net->local_enhancement_probe(t, t.input(feat), t.input(el), Indicator::blend(), box, 0, true);
    const Tensor& A = t.val(probe.attn);
    REQUIRE(A.shape() == std::vector<int>{16, 16}); // p^2 x n_p
    for (int i = 0; i < 16; ++i) {
        double s = 0.0;
        for (int j = 0; j < 16; ++j)
            s += A.at(i, j);
        CHECK(std::fabs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("untrained local enhancement site is additive-neutral") {
    Built b = build();
    Rng rng(17);
    Tensor feat = rng.gaussian_tensor({b.net->le_channels(0), 8, 8});
    Tensor el = rng.gaussian_tensor({16, 16});
    BoundingBox box{0.1, 0.1, 0.9, 0.9};
    Tape t;
    Var out = b.net->local_enhancement(t, t.input(feat), t.input(el), Indicator::compose(), box, 0, true);
    const Tensor& ov = t.val(out);
    for (std::int64_t i = 0; i < ov.numel(); ++i)
        CHECK(ov[i] == feat[i]);
}

TEST_CASE("feature modulation closed forms") {
    Built b = build();
    Rng rng(19);
    int c = b.net->le_channels(0);
    int p = 4;
    Tensor f_tilde = rng.gaussian_tensor({c, p, p});
    Tensor A_logits = rng.gaussian_tensor({p * p, 16});
    Tensor A({p * p, 16});
    for (int i = 0; i < p * p; ++i) {
        double z = 0;
        for (int j = 0; j < 16; ++j)
            z += std::exp(A_logits.at(i, j));
        for (int j = 0; j < 16; ++j)
            A.at(i, j) = std::exp(A_logits.at(i, j)) / z;
    }
    Tensor el = rng.gaussian_tensor({16, 16});

    // Fresh build: conv_gamma is weights 0 / bias 1, conv_beta all zero,
    // so modulation must reproduce the parameter-free norm.
    {
        Tape t;
        Var out = b.net->feature_modulation(t, t.input(f_tilde), t.input(A), t.input(el), 0);
        Tensor want = ops::group_norm(f_tilde, 8, Tensor(), Tensor(), 1e-5);
        const Tensor& got = t.val(out);
        for (std::int64_t i = 0; i < got.numel(); ++i)
            CHECK(std::fabs(got[i] - want[i]) <= 1e-12);
    }

    // conv_gamma == 0, conv_beta bias b: constant output per channel.
    {
        Tensor* gw = b.ps.find("unet.down0.b0.le.gamma.w");
        Tensor* gb = b.ps.find("unet.down0.b0.le.gamma.b");
        Tensor* bb = b.ps.find("unet.down0.b0.le.beta.b");
        REQUIRE(gw != nullptr);
        REQUIRE(gb != nullptr);
        REQUIRE(bb != nullptr);
        *gb = Tensor::zeros(gb->shape());
        for (std::int64_t i = 0; i < bb->numel(); ++i)
            (*bb)[i] = 0.25 * (static_cast<double>(i) + 1.0);
        Tape t;
        Var out = b.net->feature_modulation(t, t.input(f_tilde), t.input(A), t.input(el), 0);
        const Tensor& got = t.val(out);
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < p * p; ++i)
                CHECK(std::fabs(got[ch * p * p + i] - 0.25 * (ch + 1)) <= 1e-12);
    }
}

TEST_CASE("feature modulation matches a step-by-step recomputation") {
    Built b = build();
    Rng rng(23);
    // Randomize the modulation convolutions.
    for (const char* name : {"unet.mid.le.gamma.w", "unet.mid.le.gamma.b", "unet.mid.le.beta.w", "unet.mid.le.beta.b"}) {
        Tensor* p = b.ps.find(name);
        REQUIRE(p != nullptr);
        Rng pr = rng.stream(name);
        *p = pr.gaussian_tensor(p->shape());
    }
    int site = 2; // mid
    int c = b.net->le_channels(site);
    int p = 4;
    Tensor f_tilde = rng.gaussian_tensor({c, p, p});
    Tensor A = rng.uniform_tensor({p * p, 16}, 0.0, 1.0);
    Tensor el = rng.gaussian_tensor({16, 16});

    Tape t;
    Var out = b.net->feature_modulation(t, t.input(f_tilde), t.input(A), t.input(el), site);
    const Tensor& got = t.val(out);

    // Independent recomposition from the same pieces.
    Tensor ae({16, p * p}); // aligned embeddings, transposed
    for (int i = 0; i < p * p; ++i)
        for (int d = 0; d < 16; ++d) {
            double acc = 0.0;
            for (int j = 0; j < 16; ++j)
                acc += A.at(i, j) * el.at(j, d);
            ae.at(d, i) = acc;
        }
    Tensor aligned({16, p, p}, ae.vec());
    Tensor gamma = ops::conv2d(aligned, *b.ps.find("unet.mid.le.gamma.w"), *b.ps.find("unet.mid.le.gamma.b"), 1, 1);
    Tensor beta = ops::conv2d(aligned, *b.ps.find("unet.mid.le.beta.w"), *b.ps.find("unet.mid.le.beta.b"), 1, 1);
    Tensor normed = ops::group_norm(f_tilde, 8, Tensor(), Tensor(), 1e-5);
    for (std::int64_t i = 0; i < got.numel(); ++i)
        CHECK(got[i] == doctest::Approx(normed[i] * gamma[i] + beta[i]).epsilon(1e-10));
}

TEST_CASE("with_modulation=false matches the le_no_fm variant bit for bit") {
    Built full = build(Ablation::full);
    Built nofm = build(Ablation::le_no_fm);
    // Same seed: shared parameter names received identical values.
    Rng rng(29);
    Tensor feat = rng.gaussian_tensor({full.net->le_channels(0), 8, 8});
    Tensor el = rng.gaussian_tensor({16, 16});
    BoundingBox box{0.2, 0.1, 0.7, 0.8};
    // Make the attention path nonzero in both nets identically.
    for (auto* bb : {&full, &nofm})
        for (size_t i = 0; i < bb->ps.size(); ++i) {
            auto& e = bb->ps.entry(i);
            if (e.name.find(".le.") != std::string::npos && e.name.find("gamma") == std::string::npos &&
                e.name.find("beta") == std::string::npos) {
                Rng pr = Rng(31).stream(e.name);
                e.value = pr.gaussian_tensor(e.value.shape());
            }
        }
    Tape t1, t2;
    Var o1 = full.net->local_enhancement(t1, t1.input(feat), t1.input(el), Indicator::compose(), box, 0,
                                         /*with_modulation=*/false);
    Var o2 = nofm.net->local_enhancement(t2, t2.input(feat), t2.input(el), Indicator::compose(), box, 0, false);
    const Tensor& v1 = t1.val(o1);
    const Tensor& v2 = t2.val(o2);
    REQUIRE(v1.same_shape(v2));
    for (std::int64_t i = 0; i < v1.numel(); ++i)
        CHECK(v1[i] == v2[i]);
}

TEST_CASE("global fusion uses a single context token and starts as identity") {
    Built b = build();
    Rng rng(37);
    Tensor tokens = rng.gaussian_tensor({64, 16});
    Tensor eg = rng.gaussian_tensor({1, 16});
    Tape t;
    Var fused = b.net->global_fusion(t, t.input(tokens), t.input(eg), 0);
    const Tensor& fv = t.val(fused);
    // Zero-initialized output projection: residual passes through bitwise.
    for (std::int64_t i = 0; i < fv.numel(); ++i)
        CHECK(fv[i] == tokens[i]);
    // Global fusion context is the single E_g row.
    CHECK(eg.dim(0) == 1);
}

TEST_CASE("unet forward shape and ablation wiring") {
    Rng rng(41);
    Tensor x = rng.gaussian_tensor({11, 8, 8});
    Tensor eg = rng.gaussian_tensor({1, 16});
    Tensor el = rng.gaussian_tensor({16, 16});
    Tensor el2 = el;
    el2[5] += 0.37; // perturbation
    BoundingBox box{0.25, 0.25, 0.75, 0.75};

    // Class-only variant: output is bitwise invariant to E_l changes.
    {
        Built b = build(Ablation::global_only_class, /*zero_init=*/false);
        Tape t1, t2;
        Var o1 = b.net->forward(t1, t1.input(x), 13, t1.input(eg), t1.input(el), box, Indicator::compose());
        Var o2 = b.net->forward(t2, t2.input(x), 13, t2.input(eg), t2.input(el2), box, Indicator::compose());
        REQUIRE(t1.val(o1).shape() == std::vector<int>{4, 8, 8});
        for (std::int64_t i = 0; i < t1.val(o1).numel(); ++i)
            CHECK(t1.val(o1)[i] == t2.val(o2)[i]);
    }
    // Full variant with live weights: E_l perturbation changes the output.
    {
        Built b = build(Ablation::full, /*zero_init=*/false, /*seed=*/5);
        Tape t1, t2;
        Var o1 = b.net->forward(t1, t1.input(x), 13, t1.input(eg), t1.input(el), box, Indicator::compose());
        Var o2 = b.net->forward(t2, t2.input(x), 13, t2.input(eg), t2.input(el2), box, Indicator::compose());
        double diff = 0.0;
        for (std::int64_t i = 0; i < t1.val(o1).numel(); ++i)
            diff += std::fabs(t1.val(o1)[i] - t2.val(o2)[i]);
        CHECK(diff > 0.0);
    }
    // All-tokens variant consumes E_l through the global context too.
    {
        Built b = build(Ablation::global_all_tokens, false, 7);
        Tape t1, t2;
        Var o1 = b.net->forward(t1, t1.input(x), 13, t1.input(eg), t1.input(el), box, Indicator::compose());
        Var o2 = b.net->forward(t2, t2.input(x), 13, t2.input(eg), t2.input(el2), box, Indicator::compose());
        double diff = 0.0;
        for (std::int64_t i = 0; i < t1.val(o1).numel(); ++i)
            diff += std::fabs(t1.val(o1)[i] - t2.val(o2)[i]);
        CHECK(diff > 0.0);
    }
}

TEST_CASE("parameter census: ablation lattice and checkpoint consistency") {
    EncoderConfig e = tiny_enc();
    std::int64_t n_class = count_parameters(tiny_gen(Ablation::global_only_class), e);
    std::int64_t n_aug = count_parameters(tiny_gen(Ablation::plus_aug), e);
    std::int64_t n_at = count_parameters(tiny_gen(Ablation::global_all_tokens), e);
    std::int64_t n_nofm = count_parameters(tiny_gen(Ablation::le_no_fm), e);
    std::int64_t n_full = count_parameters(tiny_gen(Ablation::full), e);
    CHECK(n_class == n_aug);
    CHECK(n_class == n_at);
    CHECK(n_class < n_nofm);
    CHECK(n_nofm < n_full);

    // Census equals the sum of tensor sizes in a saved checkpoint.
    Built b = build();
    save_checkpoint(b.ps, "gen_ckpt.bin");
    std::int64_t total = 0;
    for (const auto& [name, numel] : checkpoint_census("gen_ckpt.bin"))
        if (name.rfind("unet.", 0) == 0)
            total += numel;
    CHECK(total == n_full);
    std::remove("gen_ckpt.bin");

    // Doubling base channels exactly quadruples an inner conv weight.
    GeneratorConfig g1 = tiny_gen();
    GeneratorConfig g2 = tiny_gen();
    g2.base_channels *= 2;
    ParamStore ps1, ps2;
    Rng r1(0), r2(0);
    UNet u1(g1, e, ps1, r1), u2(g2, e, ps2, r2);
    CHECK(ps2.find("unet.mid.b0.c1.w")->numel() == 4 * ps1.find("unet.mid.b0.c1.w")->numel());
}

TEST_CASE("zero-depth config keeps only stem, head, and time embedding") {
    EncoderConfig e = tiny_enc();
    GeneratorConfig g = tiny_gen();
    g.channel_multipliers = {};
    g.attention_resolutions = {};
    g.le_resolutions = {};
    std::int64_t census = count_parameters(g, e);
    std::int64_t stem = 16LL * 11 * 9 + 16;
    std::int64_t temb = 16LL * 32 + 32 + 32LL * 32 + 32;
    std::int64_t head = 2LL * 16 + (4LL * 16 * 9 + 4);
    CHECK(census == stem + temb + head);
}

TEST_CASE("non-finite activations raise NumericalError") {
    Built b = build(Ablation::full, false);
    // Overflow the stem convolution so an interior op goes non-finite.
    Tensor* w = b.ps.find("unet.stem.w");
    REQUIRE(w != nullptr);
    for (std::int64_t i = 0; i < w->numel(); ++i)
        (*w)[i] = 1e308;
    Tensor x = Tensor::full({11, 8, 8}, 1.0);
    Tape t;
    CHECK_THROWS_AS(
        b.net->forward(t, t.input(x), 0, t.input(Tensor::zeros({1, 16})), t.input(Tensor::zeros({16, 16})),
                       BoundingBox{0.2, 0.2, 0.8, 0.8}, Indicator::blend()),
        NumericalError);
}
