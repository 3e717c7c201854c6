// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ccm/diffusion.hpp"
#include "ccm/encoders.hpp"
#include "ccm/error.hpp"
#include "ccm/image.hpp"

using namespace ccm;

namespace {

EncoderConfig tiny_cfg() {
    EncoderConfig c;
    c.image_size = 16;
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

// Smooth random image in [-1,1].
Tensor smooth_image(Rng& rng, int size) {
    Tensor img({3, size, size});
    double a[3], b[3], f[3];
    for (int c = 0; c < 3; ++c) {
        a[c] = rng.uniform(-0.8, 0.8);
        b[c] = rng.uniform(-0.5, 0.5);
        f[c] = rng.uniform(0.5, 2.0);
    }
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                img.at(c, y, x) =
                    std::clamp(a[c] + b[c] * std::sin(2 * M_PI * f[c] * (x + y) / size + c), -1.0, 1.0);
    return img;
}

} // namespace

TEST_CASE("encoder config invariants are enforced") {
    EncoderConfig c = tiny_cfg();
    c.shallow_layer_index = 3; // not < deep
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_cfg();
    c.latent_factor = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_cfg();
    c.image_size = 18; // not divisible by f=4
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("ae_encode maps 3xHxW to 4 x H/f x W/f") {
    EncoderConfig cfg = tiny_cfg();
    cfg.image_size = 64;
    ParamStore ps;
    Rng rng(1);
    Autoencoder ae(cfg, ps, rng);
    Rng ir(2);
    Tensor img = ir.uniform_tensor({3, 64, 64}, -1.0, 1.0);
    LatentCode z = ae.encode(img);
    CHECK(z.values.shape() == std::vector<int>{4, 16, 16});

    Tensor bad = ir.uniform_tensor({3, 66, 66}, -1.0, 1.0);
    CHECK_THROWS_AS(ae.encode(bad), ShapeError);
}

TEST_CASE("zero image through zero-initialized encoder gives zero latent") {
    EncoderConfig cfg = tiny_cfg();
    ParamStore ps;
    Rng rng(3);
    Autoencoder ae(cfg, ps, rng);
    for (size_t i = 0; i < ps.size(); ++i)
        if (ps.entry(i).name.rfind("ae.", 0) == 0)
            ps.entry(i).value = Tensor::zeros(ps.entry(i).value.shape());
    LatentCode z = ae.encode(Tensor::zeros({3, 16, 16}));
    CHECK(z.values.abs_max() == 0.0);
}

TEST_CASE("ae_decode shape contract and clamped range") {
    EncoderConfig cfg = tiny_cfg();
    ParamStore ps;
    Rng rng(5);
    Autoencoder ae(cfg, ps, rng);
    Rng ir(6);
    for (int trial = 0; trial < 4; ++trial) {
        Tensor z = ir.gaussian_tensor({4, 4, 4});
        Tensor img = ae.decode(z);
        REQUIRE(img.shape() == std::vector<int>{3, 16, 16});
        for (std::int64_t i = 0; i < img.numel(); ++i) {
            CHECK(img[i] >= -1.0);
            CHECK(img[i] <= 1.0);
        }
    }
    CHECK_THROWS_AS(ae.decode(Tensor::zeros({3, 4, 4})), ShapeError);
}

TEST_CASE("autoencoder overfits a tiny set and round-trip error shrinks") {
    ModelConfig mc;
    mc.enc = tiny_cfg();
    mc.init_seed = 7;
    CompositionModel model(mc);
    Rng ir(8);
    std::vector<Tensor> images01;
    for (int i = 0; i < 8; ++i)
        images01.push_back(from_model_range(smooth_image(ir, 16)));

    TrainResult r = pretrain_autoencoder(model, images01, 800, 4e-3, 11);
    REQUIRE(static_cast<int>(r.epoch_losses.size()) == 800);

    // Loss decreases across 5-step window means (within noise).
    auto window_mean = [&](int start) {
        double s = 0;
        for (int i = start; i < start + 5; ++i)
            s += r.epoch_losses[static_cast<size_t>(i)];
        return s / 5;
    };
    CHECK(window_mean(795) < window_mean(0));
    CHECK(window_mean(795) < window_mean(100));

    double mae = 0.0;
    std::int64_t n = 0;
    for (const auto& img01 : images01) {
        Tensor img = to_model_range(img01);
        Tensor rec = model.ae().decode(model.ae().encode(img).values);
        for (std::int64_t i = 0; i < img.numel(); ++i)
            mae += std::fabs(rec[i] - img[i]);
        n += img.numel();
    }
    mae /= static_cast<double>(n);
    CHECK(mae < 0.05);
}

TEST_CASE("fg_encode patch count, determinism, and cosine identity") {
    EncoderConfig cfg = tiny_cfg();
    ParamStore ps;
    Rng rng(9);
    ForegroundEncoder enc(cfg, ps, rng);
    Rng ir(10);
    Tensor fg = ir.uniform_tensor({3, 16, 16}, -1.0, 1.0);

    ForegroundEmbeddings e1 = enc.encode(fg);
    ForegroundEmbeddings e2 = enc.encode(fg);
    CHECK(e1.local.shape() == std::vector<int>{16, 16}); // n_p = (16/4)^2
    CHECK(e1.global.shape() == std::vector<int>{16});
    for (std::int64_t i = 0; i < e1.global.numel(); ++i)
        CHECK(e1.global[i] == e2.global[i]);
    for (std::int64_t i = 0; i < e1.local.numel(); ++i)
        CHECK(e1.local[i] == e2.local[i]);

    CHECK(cosine_similarity(e1.global, e1.global) == doctest::Approx(1.0).epsilon(1e-12));
    Tensor red = Tensor::full({3, 16, 16}, 0.0);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            red.at(0, y, x) = 0.9;
    Tensor blue = Tensor::full({3, 16, 16}, 0.0);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            blue.at(2, y, x) = 0.9;
    CHECK(cosine_similarity(enc.encode(red).global, enc.encode(blue).global) < 1.0);

    CHECK_THROWS_AS(enc.encode(Tensor::zeros({3, 8, 8})), ShapeError);
}

TEST_CASE("null global embedding: init, substitution, trainability") {
    ModelConfig mc;
    mc.enc = tiny_cfg();
    mc.gen.base_channels = 8;
    mc.gen.channel_multipliers = {1};
    mc.gen.attention_resolutions = {4};
    mc.gen.le_resolutions = {4};
    mc.gen.p = 2;
    mc.gen.heads = 2;
    mc.gen.norm_groups = 4;
    mc.gen.time_embed_dim = 16;
    mc.T = 50;
    CompositionModel model(mc);

    // Fresh model: zeros.
    CHECK(model.fg().null_global_embedding().abs_max() == 0.0);

    // Substitution contract: the global var equals the stored vector bitwise.
    Tape t;
    Rng ir(12);
    Var fg = t.input(ir.uniform_tensor({3, 16, 16}, -1.0, 1.0));
    auto emb = model.fg().encode_var(t, fg, true);
    Tensor g = t.val(emb.global);
    Tensor null = model.fg().null_global_embedding();
    REQUIRE(g.numel() == null.numel());
    for (std::int64_t i = 0; i < g.numel(); ++i)
        CHECK(g[i] == null[i]);
}

TEST_CASE("local embeddings tap is strictly shallower than the global tap") {
    EncoderConfig cfg = tiny_cfg();
    CHECK(cfg.shallow_layer_index < cfg.deep_layer_index);
    CHECK(cfg.deep_layer_index <= cfg.vit_depth);
}

TEST_CASE("patch permutation equivariance without positional embeddings") {
    EncoderConfig cfg = tiny_cfg();
    cfg.use_pos_embed = false;
    ParamStore ps;
    Rng rng(13);
    ForegroundEncoder enc(cfg, ps, rng);
    Rng ir(14);
    Tensor fg = ir.uniform_tensor({3, 16, 16}, -1.0, 1.0);

    // Permute the 4x4 grid of 4x4 patches.
    int g = 4, p = 4;
    std::vector<int> perm(16);
    for (int i = 0; i < 16; ++i)
        perm[static_cast<size_t>(i)] = (i * 7 + 3) % 16;
    Tensor permuted({3, 16, 16});
    for (int dst = 0; dst < 16; ++dst) {
        int src = perm[static_cast<size_t>(dst)];
        int sy = src / g, sx = src % g, dy = dst / g, dx = dst % g;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    permuted.at(c, dy * p + y, dx * p + x) = fg.at(c, sy * p + y, sx * p + x);
    }
    ForegroundEmbeddings base = enc.encode(fg);
    ForegroundEmbeddings shuf = enc.encode(permuted);
    for (int row = 0; row < 16; ++row)
        for (int d = 0; d < 16; ++d)
            CHECK(shuf.local.at(row, d) ==
                  doctest::Approx(base.local.at(perm[static_cast<size_t>(row)], d)).epsilon(1e-9));
    // The class-token path is permutation-invariant.
    for (int d = 0; d < 16; ++d)
        CHECK(shuf.global[d] == doctest::Approx(base.global[d]).epsilon(1e-9));
}
