// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ccm/diffusion.hpp"
#include "ccm/error.hpp"
#include "ccm/image.hpp"

using namespace ccm;

namespace {

ModelConfig tiny_model_cfg() {
    ModelConfig mc;
    mc.enc.image_size = 32;
    mc.enc.latent_factor = 4;
    mc.enc.fg_size = 16;
    mc.enc.patch_size = 4;
    mc.enc.vit_depth = 3;
    mc.enc.vit_width = 16;
    mc.enc.deep_layer_index = 3;
    mc.enc.shallow_layer_index = 1;
    mc.enc.vit_heads = 2;
    mc.enc.d_g = 16;
    mc.enc.d_l = 16;
    mc.enc.ae_channels = 8;
    mc.gen.base_channels = 16;
    mc.gen.channel_multipliers = {1, 2};
    mc.gen.attention_resolutions = {8, 4};
    mc.gen.le_resolutions = {8, 4};
    mc.gen.p = 4;
    mc.gen.time_embed_dim = 32;
    mc.gen.res_blocks = 1;
    mc.gen.heads = 2;
    mc.gen.norm_groups = 8;
    mc.T = 1000;
    return mc;
}

PipelineConfig tiny_pipe_cfg() {
    PipelineConfig pc;
    pc.source_size = 48;
    pc.image_size = 32;
    pc.fg_size = 16;
    return pc;
}

std::vector<TrainingTuple> tiny_dataset(int n_sources, std::uint64_t seed) {
    PipelineConfig pc = tiny_pipe_cfg();
    Rng root(seed);
    std::vector<TrainingTuple> out;
    for (int i = 0; i < n_sources; ++i) {
        Rng ri = root.stream("source", static_cast<std::uint64_t>(i));
        Rng rg = ri.stream("gen");
        SourceRecord rec = generate_synthetic_source(rg, pc.source_size, pc.source_size, pc);
        Rng ro = ri.stream("other");
        SourceRecord other = generate_synthetic_source(ro, pc.source_size, pc.source_size, pc);
        Rng ra = ri.stream("aug");
        AugmentedPair pair = build_pair(rec, other, ra, pc);
        for (int k = 0; k < 4; ++k)
            out.push_back(make_tuple(pair, Indicator::kAll[k], pc.fill_value));
    }
    return out;
}

} // namespace

TEST_CASE("schedule single step and closed forms") {
    NoiseSchedule s = NoiseSchedule::make(ScheduleKind::linear, 1, 0.5, 0.6);
    REQUIRE(s.betas.size() == 1);
    CHECK(s.betas[0] == 0.5);
    CHECK(s.alphas_cumprod[0] == doctest::Approx(0.5).epsilon(1e-15));

    // Nearly constant beta: alpha_bar tracks the geometric product.
    NoiseSchedule g = NoiseSchedule::make(ScheduleKind::linear, 50, 0.01, 0.01 + 1e-13);
    for (int t = 0; t < 50; ++t)
        CHECK(g.alpha_bar(t) == doctest::Approx(std::pow(0.99, t + 1)).epsilon(1e-9));
}

TEST_CASE("sd-style scaled_linear schedule is strictly decreasing in (0,1]") {
    NoiseSchedule s = NoiseSchedule::make(ScheduleKind::scaled_linear, 1000, 0.00085, 0.012);
    double prev = 1.0;
    for (int t = 0; t < 1000; ++t) {
        double ab = s.alpha_bar(t);
        CHECK(ab > 0.0);
        CHECK(ab <= 1.0);
        CHECK(ab < prev);
        prev = ab;
        if (t > 0)
            CHECK(s.betas[static_cast<size_t>(t)] >= s.betas[static_cast<size_t>(t - 1)]);
    }
    CHECK_THROWS_AS(NoiseSchedule::make(ScheduleKind::linear, 10, 0.5, 0.4), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::make(ScheduleKind::linear, 10, 0.0, 0.4), ConfigError);
}

TEST_CASE("forward_noise closed-form branches") {
    NoiseSchedule s = NoiseSchedule::make(ScheduleKind::scaled_linear, 100, 0.001, 0.2);
    Rng rng(5);
    Tensor z0 = rng.gaussian_tensor({4, 4, 4});
    Tensor zero = Tensor::zeros({4, 4, 4});
    int t = 37;
    Tensor a = forward_noise(z0, t, zero, s);
    for (std::int64_t i = 0; i < a.numel(); ++i)
        CHECK(a[i] == doctest::Approx(std::sqrt(s.alpha_bar(t)) * z0[i]).epsilon(1e-14));
    Tensor eps = rng.gaussian_tensor({4, 4, 4});
    Tensor b = forward_noise(zero, t, eps, s);
    for (std::int64_t i = 0; i < b.numel(); ++i)
        CHECK(b[i] == doctest::Approx(std::sqrt(1.0 - s.alpha_bar(t)) * eps[i]).epsilon(1e-14));
    CHECK_THROWS_AS(forward_noise(z0, 100, eps, s), ConfigError);
    CHECK_THROWS_AS(forward_noise(z0, -1, eps, s), ConfigError);
}

TEST_CASE("forward_noise second-moment Monte Carlo oracle") {
    NoiseSchedule s = NoiseSchedule::make(ScheduleKind::scaled_linear, 100, 0.001, 0.2);
    Rng rng(7);
    Tensor z0 = rng.gaussian_tensor({4, 4, 4});
    double z0_sq = 0.0;
    for (std::int64_t i = 0; i < z0.numel(); ++i)
        z0_sq += z0[i] * z0[i];
    int t = 60;
    double acc = 0.0;
    const int draws = 1000;
    for (int d = 0; d < draws; ++d) {
        Tensor eps = rng.stream("mc", static_cast<std::uint64_t>(d)).gaussian_tensor({4, 4, 4});
        Tensor zt = forward_noise(z0, t, eps, s);
        for (std::int64_t i = 0; i < zt.numel(); ++i)
            acc += zt[i] * zt[i];
    }
    acc /= draws;
    double want = s.alpha_bar(t) * z0_sq + (1.0 - s.alpha_bar(t)) * 64.0;
    CHECK(acc == doctest::Approx(want).epsilon(0.05));
}

TEST_CASE("cfg_combine closed forms and affinity in the scale") {
    Rng rng(9);
    Tensor u = rng.gaussian_tensor({4, 3, 3});
    Tensor c = rng.gaussian_tensor({4, 3, 3});
    Tensor s1 = cfg_combine(u, c, 1.0);
    Tensor s0 = cfg_combine(u, c, 0.0);
    for (std::int64_t i = 0; i < u.numel(); ++i) {
        CHECK(s1[i] == c[i]);
        CHECK(s0[i] == u[i]);
    }
    Tensor a({1}, {0.0}), b({1}, {2.0});
    CHECK(cfg_combine(a, b, 5.0)[0] == 10.0);

    Tensor l = cfg_combine(u, c, 2.0);
    Tensor r = cfg_combine(u, c, 6.5);
    Tensor m = cfg_combine(u, c, (2.0 + 6.5) / 2.0);
    for (std::int64_t i = 0; i < u.numel(); ++i)
        CHECK(l[i] + r[i] == doctest::Approx(2.0 * m[i]).epsilon(1e-12));

    CHECK_THROWS_AS(cfg_combine(u, rng.gaussian_tensor({4, 2, 2}), 1.0), ShapeError);
}

TEST_CASE("ddim terminal step and perfect-oracle inversion") {
    NoiseSchedule s = NoiseSchedule::make(ScheduleKind::scaled_linear, 1000, 0.00085, 0.012);
    Rng rng(11);
    Tensor z0 = rng.gaussian_tensor({4, 4, 4});
    Tensor eps = rng.gaussian_tensor({4, 4, 4});
    int t = 700;
    Tensor zt = forward_noise(z0, t, eps, s);

    // pred_x0 with the true eps recovers z0.
    Tensor x0 = ddim_pred_x0(zt, eps, t, s);
    for (std::int64_t i = 0; i < x0.numel(); ++i)
        CHECK(std::fabs(x0[i] - z0[i]) < 1e-10);

    // alpha_bar(t_prev = -1) == 1: the step returns pred_x0 exactly.
    Tensor last = ddim_step(zt, eps, t, -1, s, 0.0);
    for (std::int64_t i = 0; i < last.numel(); ++i)
        CHECK(std::fabs(last[i] - x0[i]) == 0.0);

    CHECK_THROWS_AS(ddim_step(zt, eps, t, t, s, 0.0), ConfigError);
}

TEST_CASE("multi-step ddim with the true-noise oracle recovers z0") {
    NoiseSchedule s = NoiseSchedule::make(ScheduleKind::scaled_linear, 1000, 0.00085, 0.012);
    Rng rng(13);
    Tensor z0 = rng.gaussian_tensor({4, 4, 4});
    Tensor eps = rng.gaussian_tensor({4, 4, 4});
    // Walking z_t down with eps_hat == eps stays on the closed-form path
    // z_s = forward_noise(z0, s, eps), so the endpoint recovers z0.
    std::vector<int> taus;
    for (int i = 0; i < 50; ++i)
        taus.push_back(i * 20);
    Tensor z = forward_noise(z0, taus.back(), eps, s);
    for (int i = 49; i >= 0; --i)
        z = ddim_step(z, eps, taus[static_cast<size_t>(i)], i > 0 ? taus[static_cast<size_t>(i - 1)] : -1, s, 0.0);
    for (std::int64_t i = 0; i < z.numel(); ++i)
        CHECK(std::fabs(z[i] - z0[i]) < 1e-10);
}

TEST_CASE("zero predictor at init gives unit loss against gaussian noise") {
    ModelConfig mc = tiny_model_cfg();
    mc.init_seed = 17;
    CompositionModel model(mc);
    auto data = tiny_dataset(4, 19);
    Rng rng(23);
    double acc = 0.0;
    int n = 16;
    for (int i = 0; i < n; ++i) {
        Rng r = rng.stream("case", static_cast<std::uint64_t>(i));
        int t = r.uniform_int(mc.T);
        Tensor eps = r.gaussian_tensor({4, 8, 8});
        Rng drop = r.stream("drop");
        acc += loss_g(model, data[static_cast<size_t>(i % data.size())], t, eps, drop);
    }
    acc /= n;
    // The zero-initialized output conv predicts exactly zero, so the
    // loss is mean(eps^2) over 16*256 = 4096 elements.
    CHECK(acc == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("perfect prediction drives the objective to zero") {
    Rng rng(27);
    Tensor eps = rng.gaussian_tensor({4, 8, 8});
    Tape t;
    Var loss = t.mse(t.input(eps), t.input(eps));
    CHECK(t.val(loss)[0] == 0.0);
}

TEST_CASE("loss gradients pass a sampled finite-difference check") {
    ModelConfig mc = tiny_model_cfg();
    mc.gen.zero_init_residuals = false; // every parameter participates
    mc.init_seed = 29;
    CompositionModel model(mc);
    auto data = tiny_dataset(1, 31);
    const TrainingTuple& tuple = data[3];
    Rng er(33);
    Tensor eps = er.gaussian_tensor({4, 8, 8});
    int tstep = 250;

    // AD gradients for all trainable params in one pass.
    Tape tape;
    tape.set_trainable_filter(model.prefix_filter({"unet.", "fg."}));
    LossGraph lg = build_loss_graph(tape, model, tuple, tstep, eps, false);
    tape.backward(lg.loss);

    // Spot-check a few parameters end to end with central differences.
    Rng pick(35);
    int checked = 0;
    double worst = 0.0;
    for (size_t i = 0; i < model.params().size() && checked < 12; ++i) {
        auto& e = model.params().entry(i);
        if (e.name.rfind("ae.", 0) == 0)
            continue;
        if (pick.uniform() > 0.12)
            continue;
        Tensor g = tape.grad_for(&e.value);
        std::int64_t idx = static_cast<std::int64_t>(pick.next_u64() % static_cast<std::uint64_t>(e.value.numel()));
        double h = 1e-5;
        double orig = e.value[idx];
        auto eval = [&] {
            Tape t2;
            t2.set_trainable_filter([](const Tensor*) { return false; });
            LossGraph l2 = build_loss_graph(t2, model, tuple, tstep, eps, false);
            return t2.val(l2.loss)[0];
        };
        e.value[idx] = orig + h;
        double fp = eval();
        e.value[idx] = orig - h;
        double fm = eval();
        e.value[idx] = orig;
        double fd = (fp - fm) / (2 * h);
        double rel = std::fabs(g[idx] - fd) / std::max({1.0, std::fabs(g[idx]), std::fabs(fd)});
        worst = std::max(worst, rel);
        ++checked;
    }
    CHECK(checked >= 8);
    CHECK(worst < 1e-4);
}

TEST_CASE("classifier-free drop rate audit") {
    // The training loop derives one drop decision per sample from its
    // stream; over 10k simulated steps the rate is 20% +- 2%.
    Rng root(41);
    int hits = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        Rng r = root.stream("sample", static_cast<std::uint64_t>(i));
        if (r.stream("drop").bernoulli(0.2))
            ++hits;
    }
    double rate = static_cast<double>(hits) / n;
    CHECK(rate > 0.18);
    CHECK(rate < 0.22);
}

TEST_CASE("training is deterministic and reports one loss per epoch") {
    auto run = [] {
        ModelConfig mc = tiny_model_cfg();
        mc.init_seed = 43;
        CompositionModel model(mc);
        auto data = tiny_dataset(2, 45);
        TrainOptions opts;
        opts.epochs = 3;
        opts.lr = 1e-4;
        opts.batch = 8;
        opts.seed = 47;
        return train(model, data, opts);
    };
    TrainResult a = run();
    TrainResult b = run();
    REQUIRE(a.epoch_losses.size() == 3);
    REQUIRE(b.epoch_losses.size() == 3);
    for (size_t i = 0; i < 3; ++i)
        CHECK(a.epoch_losses[i] == b.epoch_losses[i]);
}

TEST_CASE("classifier-free training moves the null embedding off its init") {
    ModelConfig mc = tiny_model_cfg();
    mc.init_seed = 61;
    CompositionModel model(mc);
    CHECK(model.fg().null_global_embedding().abs_max() == 0.0);
    auto data = tiny_dataset(2, 63);
    TrainOptions opts;
    opts.epochs = 6;
    opts.batch = 8;
    opts.seed = 65; // 48 samples at drop 0.2: null draws are near-certain
    TrainResult r = train(model, data, opts);
    (void)r;
    CHECK(model.fg().null_global_embedding().abs_max() > 0.0);
}

TEST_CASE("divergence raises TrainingError") {
    ModelConfig mc = tiny_model_cfg();
    mc.init_seed = 49;
    CompositionModel model(mc);
    auto data = tiny_dataset(1, 51);
    TrainOptions opts;
    opts.epochs = 1;
    opts.batch = 4;
    opts.divergence_threshold = 1e-6;
    CHECK_THROWS_AS(train(model, data, opts), TrainingError);
}

TEST_CASE("sampling is deterministic and indicator-sensitive in shape") {
    ModelConfig mc = tiny_model_cfg();
    mc.init_seed = 53;
    CompositionModel model(mc);
    auto data = tiny_dataset(1, 55);
    SamplerConfig sc;
    sc.ddim_steps = 5;
    sc.guidance_scale = 5.0;
    Tensor bg = to_model_range(data[0].background);
    Tensor fg = to_model_range(data[0].foreground);
    Tensor img1 = sample(model, bg, fg, data[0].box, Indicator::blend(), sc, 99);
    Tensor img2 = sample(model, bg, fg, data[0].box, Indicator::blend(), sc, 99);
    REQUIRE(img1.shape() == std::vector<int>{3, 32, 32});
    for (std::int64_t i = 0; i < img1.numel(); ++i) {
        CHECK(img1[i] == img2[i]);
        CHECK(img1[i] >= -1.0);
        CHECK(img1[i] <= 1.0);
    }
    CHECK_THROWS_AS([&] { SamplerConfig bad; bad.ddim_steps = 0; bad.validate(mc.T); }(), ConfigError);
}

TEST_CASE("model checkpoint save/load round-trips and keeps the step counter") {
    ModelConfig mc = tiny_model_cfg();
    mc.init_seed = 57;
    CompositionModel model(mc);
    model.trained_steps = 123;
    model.save("diff_ckpt.bin");
    auto loaded = CompositionModel::load("diff_ckpt.bin");
    CHECK(loaded->trained_steps == 123);
    REQUIRE(loaded->params().size() == model.params().size());
    for (size_t i = 0; i < model.params().size(); ++i) {
        const auto& a = model.params().entry(i);
        const auto& b = loaded->params().entry(i);
        REQUIRE(a.name == b.name);
        for (std::int64_t j = 0; j < a.value.numel(); ++j)
            CHECK(a.value[j] == b.value[j]);
    }
    std::remove("diff_ckpt.bin");
    std::remove("diff_ckpt.bin.json");
    CHECK_THROWS_AS(CompositionModel::load("missing_ckpt.bin"), StateError);
}
