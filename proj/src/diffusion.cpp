// SPDX-License-Identifier: Apache-2.0
#include "ccm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <cstring>
#include <unordered_set>

#include <json.hpp>

#include "ccm/config.hpp"
#include "ccm/error.hpp"
#include "ccm/image.hpp"

using nlohmann::json;

namespace ccm {

std::string schedule_kind_name(ScheduleKind k) {
    return k == ScheduleKind::linear ? "linear" : "scaled_linear";
}

ScheduleKind schedule_kind_from_name(const std::string& s) {
    if (s == "linear")
        return ScheduleKind::linear;
    if (s == "scaled_linear")
        return ScheduleKind::scaled_linear;
    throw ConfigError("unknown schedule kind: " + s);
}

NoiseSchedule NoiseSchedule::make(ScheduleKind kind, int T, double beta_start, double beta_end) {
    if (T < 1)
        throw ConfigError("schedule needs T >= 1");
    if (!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0))
        throw ConfigError("schedule needs 0 < beta_start < beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.kind = kind;
    s.betas.resize(static_cast<size_t>(T));
    s.alphas_cumprod.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double frac = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
        double beta;
        if (kind == ScheduleKind::linear) {
            beta = beta_start + (beta_end - beta_start) * frac;
        } else {
            double r = std::sqrt(beta_start) + (std::sqrt(beta_end) - std::sqrt(beta_start)) * frac;
            beta = r * r;
        }
        s.betas[static_cast<size_t>(t)] = beta;
        prod *= 1.0 - beta;
        s.alphas_cumprod[static_cast<size_t>(t)] = prod;
        if (!(prod > 0.0 && prod <= 1.0))
            throw ConfigError("schedule leaves (0,1]: T too large for beta range");
    }
    return s;
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == -1)
        return 1.0;
    if (t < 0 || t >= T)
        throw ConfigError("timestep out of range");
    return alphas_cumprod[static_cast<size_t>(t)];
}

void SamplerConfig::validate(int T) const {
    if (ddim_steps < 1 || ddim_steps > T)
        throw ConfigError("ddim_steps must lie in [1, T]");
    if (guidance_scale < 0.0)
        throw ConfigError("guidance scale must be non-negative");
    if (eta < 0.0)
        throw ConfigError("eta must be non-negative");
}

Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (!z0.same_shape(eps))
        throw ShapeError("forward_noise: eps shape mismatch");
    if (t < 0 || t >= sched.T)
        throw ConfigError("forward_noise: t out of range");
    double ab = sched.alpha_bar(t);
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out(z0.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = a * z0[i] + b * eps[i];
    return out;
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s) {
    if (!eps_uncond.same_shape(eps_cond))
        throw ShapeError("cfg_combine: shape mismatch");
    if (s == 0.0)
        return eps_uncond;
    if (s == 1.0)
        return eps_cond;
    Tensor out(eps_uncond.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = eps_uncond[i] + s * (eps_cond[i] - eps_uncond[i]);
    return out;
}

Tensor ddim_pred_x0(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched) {
    if (!z_t.same_shape(eps_hat))
        throw ShapeError("ddim: eps shape mismatch");
    double ab = sched.alpha_bar(t);
    double inv_sq = 1.0 / std::sqrt(ab);
    double b = std::sqrt(1.0 - ab);
    Tensor x0(z_t.shape());
    for (std::int64_t i = 0; i < x0.numel(); ++i)
        x0[i] = (z_t[i] - b * eps_hat[i]) * inv_sq;
    return x0;
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev, const NoiseSchedule& sched, double eta,
                 Rng* noise_rng) {
    if (t_prev >= t)
        throw ConfigError("ddim_step: t_prev must be < t");
    Tensor x0 = ddim_pred_x0(z_t, eps_hat, t, sched);
    double abp = sched.alpha_bar(t_prev);
    double ab = sched.alpha_bar(t);
    double sigma = 0.0;
    if (eta > 0.0)
        sigma = eta * std::sqrt((1.0 - abp) / (1.0 - ab)) * std::sqrt(1.0 - ab / abp);
    double dir = std::sqrt(std::max(0.0, 1.0 - abp - sigma * sigma));
    double a = std::sqrt(abp);
    Tensor out(z_t.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = a * x0[i] + dir * eps_hat[i];
    if (sigma > 0.0) {
        if (!noise_rng)
            throw ConfigError("ddim_step: eta > 0 requires a noise rng");
        for (std::int64_t i = 0; i < out.numel(); ++i)
            out[i] += sigma * noise_rng->gaussian();
    }
    return out;
}

void ModelConfig::validate() const {
    enc.validate();
    gen.validate(enc.latent_size());
    if (T < 1)
        throw ConfigError("T must be >= 1");
    if (!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0))
        throw ConfigError("bad beta range");
}

CompositionModel::CompositionModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    Rng rae = rng.stream("init.ae");
    Rng rfg = rng.stream("init.fg");
    Rng run = rng.stream("init.unet");
    ae_ = std::make_unique<Autoencoder>(cfg_.enc, ps_, rae);
    fg_ = std::make_unique<ForegroundEncoder>(cfg_.enc, ps_, rfg);
    unet_ = std::make_unique<UNet>(cfg_.gen, cfg_.enc, ps_, run);
    sched_ = NoiseSchedule::make(cfg_.sched_kind, cfg_.T, cfg_.beta_start, cfg_.beta_end);
}

void CompositionModel::save(const std::string& path) const {
    save_checkpoint(ps_, path);
    json j;
    j["schema_version"] = 1;
    j["model"] = model_config_to_json(cfg_);
    j["trained_steps"] = trained_steps;
    std::ofstream os(path + ".json");
    if (!os)
        throw IoError("cannot write checkpoint sidecar: " + path + ".json");
    os << j.dump(2) << "\n";
}

std::unique_ptr<CompositionModel> CompositionModel::load(const std::string& path) {
    std::ifstream is(path + ".json");
    if (!is)
        throw StateError("missing checkpoint sidecar: " + path + ".json");
    json j = json::parse(is);
    ModelConfig cfg = model_config_from_json(j.at("model"));
    auto model = std::make_unique<CompositionModel>(cfg);
    load_checkpoint(model->ps_, path);
    model->trained_steps = j.value("trained_steps", 0);
    return model;
}

std::function<bool(const Tensor*)> CompositionModel::prefix_filter(const std::vector<std::string>& prefixes) const {
    auto set = std::make_shared<std::unordered_set<const Tensor*>>();
    for (size_t i = 0; i < ps_.size(); ++i) {
        const auto& e = ps_.entry(i);
        for (const auto& p : prefixes)
            if (e.name.rfind(p, 0) == 0) {
                set->insert(&e.value);
                break;
            }
    }
    return [set](const Tensor* t) { return set->count(t) > 0; };
}

LossGraph build_loss_graph(Tape& tape, const CompositionModel& model, const TrainingTuple& tuple, int tstep,
                           const Tensor& eps, bool use_null_global) {
    const auto& ecfg = model.config().enc;
    // Frozen latent codec: plain-tensor encodes feed the graph as data.
    Tensor z0 = model.ae().encode(to_model_range(tuple.composite)).values;
    Tensor bg = model.ae().encode(to_model_range(tuple.background), LatentCode::Source::background).values;
    Tensor z_t = forward_noise(z0, tstep, eps, model.schedule());
    UNetInput in = assemble_input(z_t, bg, tuple.box, tuple.indicator, ecfg.latent_factor, tstep);

    Var fg_img = tape.input(to_model_range(tuple.foreground));
    ForegroundEncoder::EmbeddingVars emb = model.fg().encode_var(tape, fg_img, use_null_global);
    bool le_enabled = !(use_null_global && model.config().gen.null_le_in_uncond);
    Var eps_hat = model.unet().forward(tape, tape.input(in.stacked()), tstep, emb.global, emb.local, tuple.box,
                                       tuple.indicator, le_enabled);
    LossGraph lg;
    lg.loss = tape.mse(eps_hat, tape.input(eps));
    lg.used_null = use_null_global;
    lg.t = tstep;
    return lg;
}

double loss_g(const CompositionModel& model, const TrainingTuple& tuple, int tstep, const Tensor& eps, Rng& rng) {
    bool use_null = rng.bernoulli(model.config().gen.cfg_drop_prob);
    Tape tape;
    tape.set_trainable_filter([](const Tensor*) { return false; });
    LossGraph lg = build_loss_graph(tape, model, tuple, tstep, eps, use_null);
    return tape.val(lg.loss)[0];
}

namespace {

struct SampleOutcome {
    double loss = 0.0;
    GradBag grads;
    Indicator indicator;
};

} // namespace

TrainResult train(CompositionModel& model, const std::vector<TrainingTuple>& dataset, const TrainOptions& opts) {
    if (dataset.empty())
        throw TrainingError("training dataset is empty");
    if (opts.epochs < 1 || opts.batch < 1)
        throw ConfigError("epochs and batch must be positive");

    // Indicator-balanced order: round-robin across the four task groups,
    // each group shuffled per epoch.
    std::array<std::vector<int>, 4> groups;
    for (size_t i = 0; i < dataset.size(); ++i)
        groups[static_cast<size_t>(dataset[i].indicator.index())].push_back(static_cast<int>(i));

    bool train_fg = model.config().enc.fg_encoder_trainable;
    std::vector<std::string> prefixes = {"unet."};
    if (train_fg)
        prefixes.push_back("fg.");
    auto trainable = model.prefix_filter(prefixes);
    auto name_filter = [train_fg](const std::string& name) {
        return name.rfind("unet.", 0) == 0 || (train_fg && name.rfind("fg.", 0) == 0);
    };

    Adam opt(opts.lr);
    Rng root(opts.seed);
    TrainResult result;
    std::int64_t sample_counter = 0;
    int threads = std::max(1, opts.threads);

    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        // Build the epoch order.
        std::array<std::vector<int>, 4> shuffled = groups;
        Rng order_rng = root.stream("order", static_cast<std::uint64_t>(epoch));
        for (auto& g : shuffled)
            for (int i = static_cast<int>(g.size()) - 1; i > 0; --i)
                std::swap(g[static_cast<size_t>(i)], g[static_cast<size_t>(order_rng.uniform_int(i + 1))]);
        std::vector<int> order;
        order.reserve(dataset.size());
        std::array<size_t, 4> cursor{};
        for (size_t left = dataset.size(); left > 0;)
            for (int k = 0; k < 4 && left > 0; ++k)
                if (cursor[static_cast<size_t>(k)] < shuffled[static_cast<size_t>(k)].size()) {
                    order.push_back(shuffled[static_cast<size_t>(k)][cursor[static_cast<size_t>(k)]++]);
                    --left;
                }

        double epoch_loss = 0.0;
        std::int64_t epoch_count = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opts.batch)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(opts.batch));
            int n = static_cast<int>(stop - start);
            std::vector<SampleOutcome> outcomes(static_cast<size_t>(n));

            auto run_one = [&](int j) {
                const TrainingTuple& tuple = dataset[static_cast<size_t>(order[start + static_cast<size_t>(j)])];
                Rng r = root.stream("sample", static_cast<std::uint64_t>(sample_counter + j));
                int tstep = r.uniform_int(model.schedule().T);
                Tensor eps = r.stream("eps").gaussian_tensor(
                    {4, model.config().enc.latent_size(), model.config().enc.latent_size()});
                bool use_null = r.stream("drop").bernoulli(model.config().gen.cfg_drop_prob);
                Tape tape;
                tape.set_trainable_filter(trainable);
                LossGraph lg = build_loss_graph(tape, model, tuple, tstep, eps, use_null);
                tape.backward(lg.loss);
                SampleOutcome& oc = outcomes[static_cast<size_t>(j)];
                oc.loss = tape.val(lg.loss)[0];
                oc.grads.add_from(tape);
                oc.indicator = tuple.indicator;
            };

            if (threads == 1 || n == 1) {
                for (int j = 0; j < n; ++j)
                    run_one(j);
            } else {
                std::vector<std::future<void>> futs;
                int nw = std::min(threads, n);
                for (int w = 0; w < nw; ++w)
                    futs.push_back(std::async(std::launch::async, [&, w] {
                        for (int j = w; j < n; j += nw)
                            run_one(j);
                    }));
                for (auto& f : futs)
                    f.get();
            }

            GradBag bag;
            double batch_loss = 0.0;
            for (int j = 0; j < n; ++j) {
                batch_loss += outcomes[static_cast<size_t>(j)].loss;
                for (auto& [ptr, g] : outcomes[static_cast<size_t>(j)].grads.grads) {
                    auto it = bag.grads.find(ptr);
                    if (it == bag.grads.end())
                        bag.grads.emplace(ptr, std::move(g));
                    else
                        for (std::int64_t i = 0; i < it->second.numel(); ++i)
                            it->second[i] += g[i];
                }
                if (opts.on_sample)
                    opts.on_sample(sample_counter + j, outcomes[static_cast<size_t>(j)].loss,
                                   outcomes[static_cast<size_t>(j)].indicator);
            }
            batch_loss /= n;
            if (!(batch_loss < opts.divergence_threshold))
                throw TrainingError("training diverged: loss " + std::to_string(batch_loss));
            bag.scale(1.0 / n);
            opt.step(model.params(), bag, name_filter);
            sample_counter += n;
            model.trained_steps += 1;
            epoch_loss += batch_loss * n;
            epoch_count += n;
            ++result.steps;
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_count));
    }
    return result;
}

TrainResult pretrain_autoencoder(CompositionModel& model, const std::vector<Tensor>& images01, int steps, double lr,
                                 std::uint64_t seed, int threads) {
    if (images01.empty())
        throw TrainingError("autoencoder pretraining needs images");
    auto trainable = model.prefix_filter({"ae."});
    auto name_filter = [](const std::string& name) { return name.rfind("ae.", 0) == 0; };
    Adam opt(lr);
    (void)seed; // full-batch pretraining draws nothing
    TrainResult result;
    int n = static_cast<int>(images01.size());
    threads = std::max(1, threads);
    for (int step = 0; step < steps; ++step) {
        std::vector<double> losses(static_cast<size_t>(n), 0.0);
        std::vector<GradBag> bags(static_cast<size_t>(n));
        auto run_one = [&](int j) {
            Tape tape;
            tape.set_trainable_filter(trainable);
            Var img = tape.input(to_model_range(images01[static_cast<size_t>(j)]));
            Var z = model.ae().encode_var(tape, img);
            Var rec = model.ae().decode_var(tape, z);
            Var loss = tape.mse(rec, img);
            tape.backward(loss);
            losses[static_cast<size_t>(j)] = tape.val(loss)[0];
            bags[static_cast<size_t>(j)].add_from(tape);
        };
        if (threads == 1 || n == 1) {
            for (int j = 0; j < n; ++j)
                run_one(j);
        } else {
            std::vector<std::future<void>> futs;
            int nw = std::min(threads, n);
            for (int w = 0; w < nw; ++w)
                futs.push_back(std::async(std::launch::async, [&, w] {
                    for (int j = w; j < n; j += nw)
                        run_one(j);
                }));
            for (auto& f : futs)
                f.get();
        }
        GradBag bag;
        double mean_loss = 0.0;
        for (int j = 0; j < n; ++j) {
            mean_loss += losses[static_cast<size_t>(j)];
            for (auto& [ptr, g] : bags[static_cast<size_t>(j)].grads) {
                auto it = bag.grads.find(ptr);
                if (it == bag.grads.end())
                    bag.grads.emplace(ptr, std::move(g));
                else
                    for (std::int64_t i = 0; i < it->second.numel(); ++i)
                        it->second[i] += g[i];
            }
        }
        bag.scale(1.0 / n);
        opt.step(model.params(), bag, name_filter);
        result.epoch_losses.push_back(mean_loss / n);
        ++result.steps;
    }
    return result;
}

namespace {

std::vector<int> ddim_timesteps(int T, int steps) {
    std::vector<int> taus(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i)
        taus[static_cast<size_t>(i)] = static_cast<int>((static_cast<std::int64_t>(i) * T) / steps);
    return taus;
}

} // namespace

std::uint64_t initial_noise_hash(const CompositionModel& model, std::uint64_t seed) {
    int h = model.config().enc.latent_size();
    Tensor z = Rng(seed).stream("z_T").gaussian_tensor({4, h, h});
    std::uint64_t digest = 0xcbf29ce484222325ULL;
    for (std::int64_t i = 0; i < z.numel(); ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &z[i], 8);
        digest ^= bits;
        digest *= 0x100000001b3ULL;
    }
    return digest;
}

Tensor sample(const CompositionModel& model, const Tensor& background, const Tensor& foreground,
              const BoundingBox& box, Indicator indicator, const SamplerConfig& sampler, std::uint64_t seed) {
    const auto& ecfg = model.config().enc;
    sampler.validate(model.schedule().T);
    box.validate();
    indicator.validate();
    if (background.rank() != 3 || background.dim(0) != 3 || background.dim(1) != ecfg.image_size ||
        background.dim(2) != ecfg.image_size)
        throw ShapeError("sample: background must be [3,image_size,image_size]");

    // Mask the box region to the mid-gray fill before encoding, matching
    // the training-time background construction.
    Tensor bg = background;
    Tensor pixel_mask = rasterize_box_mask(ecfg.image_size, ecfg.image_size, box);
    for (int y = 0; y < ecfg.image_size; ++y)
        for (int x = 0; x < ecfg.image_size; ++x)
            if (pixel_mask.at(0, y, x) > 0.5)
                for (int c = 0; c < 3; ++c)
                    bg.at(c, y, x) = 0.0;
    Tensor bg_latent = model.ae().encode(bg, LatentCode::Source::background).values;

    ForegroundEmbeddings emb = model.fg().encode(foreground);
    Tensor null_g = model.fg().null_global_embedding();

    int h = ecfg.latent_size();
    Rng rng(seed);
    Tensor z = rng.stream("z_T").gaussian_tensor({4, h, h});
    Rng eta_rng = rng.stream("eta_noise");

    std::vector<int> taus = ddim_timesteps(model.schedule().T, sampler.ddim_steps);
    for (int i = sampler.ddim_steps - 1; i >= 0; --i) {
        int t = taus[static_cast<size_t>(i)];
        int t_prev = i > 0 ? taus[static_cast<size_t>(i - 1)] : -1;
        UNetInput in = assemble_input(z, bg_latent, box, indicator, ecfg.latent_factor, t);
        Tensor eps_c = model.unet().forward(in, emb.global, emb.local, box, indicator, true);
        Tensor eps_u = model.unet().forward(in, null_g, emb.local, box, indicator,
                                            !model.config().gen.null_le_in_uncond);
        Tensor eps = cfg_combine(eps_u, eps_c, sampler.guidance_scale);
        z = ddim_step(z, eps, t, t_prev, model.schedule(), sampler.eta, &eta_rng);
    }
    return model.ae().decode(z);
}

} // namespace ccm
