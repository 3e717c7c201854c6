// SPDX-License-Identifier: Apache-2.0
//
// controlcom: dataset preparation, training, composition, and evaluation
// for the desk-scale controllable image composition model.
//
// Exit codes: 0 success, 1 internal error, 2 config/validation error,
// 3 missing state (checkpoint/dataset).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "ccm/config.hpp"
#include "ccm/diffusion.hpp"
#include "ccm/error.hpp"
#include "ccm/evaluation.hpp"
#include "ccm/image.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ccm;

namespace {

int effective_threads(int requested) {
    int t = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
    if (t < 1)
        t = 1;
    if (const char* cap = std::getenv("CONTROLCOM_MICRO_THREADS")) {
        int c = std::atoi(cap);
        if (c >= 1)
            t = std::min(t, c);
    }
    return t;
}

RunConfig load_run_config(const std::string& path) {
    if (path.empty())
        return RunConfig{};
    std::ifstream is(path);
    if (!is)
        throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ValidationError(std::string("config is not valid JSON: ") + e.what());
    }
    return run_config_from_json(j);
}

void write_resolved_config(const RunConfig& rc, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream os(dir + "/run_config.json");
    os << run_config_to_json(rc).dump(2) << "\n";
}

BoundingBox parse_box(const std::string& s) {
    BoundingBox b;
    if (std::sscanf(s.c_str(), "%lf,%lf,%lf,%lf", &b.x0, &b.y0, &b.x1, &b.y1) != 4)
        throw ValidationError("box must be x0,y0,x1,y1");
    b.validate();
    return b;
}

Indicator parse_indicator(const std::string& s) {
    int a, b;
    if (std::sscanf(s.c_str(), "%d,%d", &a, &b) != 2)
        throw ValidationError("indicator must be i,p with bits 0/1");
    Indicator ind{a, b};
    ind.validate();
    return ind;
}

ModelConfig model_config_for_dataset(const RunConfig& rc, const std::vector<TrainingTuple>& data) {
    ModelConfig mc;
    if (!rc.model.is_null() && !rc.model.empty())
        mc = model_config_from_json(rc.model);
    mc.enc.image_size = data.front().composite.dim(1);
    mc.enc.fg_size = data.front().foreground.dim(1);
    mc.init_seed = rc.seed;
    mc.validate();
    return mc;
}

int cmd_prepare(const RunConfig& rc, int sources) {
    PipelineConfig pc;
    if (!rc.pipeline.is_null() && !rc.pipeline.empty())
        pc = pipeline_config_from_json(rc.pipeline);
    std::error_code ec;
    fs::create_directories(rc.dataset_dir, ec);
    if (ec || !fs::is_directory(rc.dataset_dir))
        throw ConfigError("cannot create dataset directory: " + rc.dataset_dir);
    int threads = effective_threads(rc.threads);
    Manifest mf = build_dataset(sources, rc.seed, rc.dataset_dir, pc, threads);
    write_resolved_config(rc, rc.dataset_dir);
    std::cout << "dataset: " << rc.dataset_dir << "\n";
    std::cout << "tuples: " << mf.entries.size() << "\n";
    const char* names[4] = {"blend", "view", "harmonize", "compose"};
    for (int k = 0; k < 4; ++k)
        std::cout << "  " << names[k] << ": "
                  << mf.per_task_counts[static_cast<size_t>(Indicator::kAll[k].index())] << "\n";
    return 0;
}

int cmd_train(const RunConfig& rc, const std::string& ablation, bool resume) {
    if (!fs::exists(rc.dataset_dir + "/manifest.json"))
        throw StateError("dataset not found: " + rc.dataset_dir);
    std::vector<TrainingTuple> data = load_dataset(rc.dataset_dir);
    int threads = effective_threads(rc.threads);

    std::unique_ptr<CompositionModel> model;
    if (resume) {
        model = CompositionModel::load(rc.checkpoint);
    } else {
        ModelConfig mc = model_config_for_dataset(rc, data);
        if (!ablation.empty())
            mc.gen.ablation = ablation_from_name(ablation);
        model = std::make_unique<CompositionModel>(mc);
        if (rc.ae_steps > 0) {
            std::vector<Tensor> images;
            images.reserve(data.size());
            for (const auto& t : data)
                images.push_back(t.composite);
            std::cout << "pretraining autoencoder (" << rc.ae_steps << " steps)...\n";
            TrainResult ar = pretrain_autoencoder(*model, images, rc.ae_steps, rc.ae_lr, rc.seed + 1, threads);
            std::cout << "  reconstruction mse: " << ar.epoch_losses.front() << " -> " << ar.epoch_losses.back()
                      << "\n";
        }
    }

    std::ofstream losslog(rc.checkpoint + ".losslog.jsonl");
    TrainOptions opts;
    opts.epochs = rc.epochs;
    opts.lr = rc.lr;
    opts.batch = rc.batch;
    opts.seed = rc.seed;
    opts.threads = threads;
    opts.on_sample = [&](std::int64_t step, double loss, Indicator ind) {
        losslog << json{{"step", step}, {"loss", loss}, {"task_indicator", {ind.illumination, ind.pose}}}.dump()
                << "\n";
    };
    std::cout << "training " << ablation_name(model->config().gen.ablation) << " for " << rc.epochs << " epochs ("
              << data.size() << " tuples, batch " << rc.batch << ", " << threads << " threads)...\n";
    TrainResult tr = train(*model, data, opts);
    model->save(rc.checkpoint);

    json curve = json::array();
    for (double v : tr.epoch_losses)
        curve.push_back(v);
    std::ofstream cs(rc.checkpoint + ".curve.json");
    cs << json{{"epoch_mean_loss", curve}, {"steps", model->trained_steps}}.dump(2) << "\n";
    std::cout << "epochs: " << tr.epoch_losses.size() << ", first loss " << tr.epoch_losses.front() << ", last loss "
              << tr.epoch_losses.back() << "\n";
    std::cout << "checkpoint: " << rc.checkpoint << " (total steps " << model->trained_steps << ")\n";
    return 0;
}

int cmd_compose(const RunConfig& rc, const std::string& bg_path, const std::string& fg_path, const std::string& box_s,
                const std::string& indicator_s, bool all_indicators) {
    if (!fs::exists(rc.checkpoint))
        throw StateError("checkpoint not found: " + rc.checkpoint);
    auto model = CompositionModel::load(rc.checkpoint);
    SamplerConfig sc;
    if (!rc.sampler.is_null() && !rc.sampler.empty())
        sc = sampler_config_from_json(rc.sampler);
    sc.validate(model->schedule().T);
    BoundingBox box = parse_box(box_s);

    int isz = model->config().enc.image_size;
    int fsz = model->config().enc.fg_size;
    Tensor bg = read_png(bg_path);
    Tensor fg = read_png(fg_path);
    if (bg.dim(1) != isz || bg.dim(2) != isz)
        bg = resize_bilinear(bg, isz, isz);
    if (fg.dim(1) != fsz || fg.dim(2) != fsz)
        fg = resize_bilinear(fg, fsz, fsz);
    Tensor bg_m = to_model_range(bg);
    Tensor fg_m = to_model_range(fg);

    fs::create_directories(rc.output_dir);
    std::vector<Indicator> indicators;
    if (all_indicators) {
        indicators.assign(std::begin(Indicator::kAll), std::end(Indicator::kAll));
    } else {
        indicators.push_back(parse_indicator(indicator_s));
    }

    char hash_hex[32];
    std::snprintf(hash_hex, sizeof hash_hex, "%016llx",
                  static_cast<unsigned long long>(initial_noise_hash(*model, rc.seed)));
    json log;
    log["seed"] = rc.seed;
    log["noise_hash"] = hash_hex;
    log["sampler"] = sampler_config_to_json(sc);
    json files = json::array();
    for (Indicator ind : indicators) {
        Tensor out = sample(*model, bg_m, fg_m, box, ind, sc, rc.seed);
        std::string path = rc.output_dir + "/composite_" + ind.name() + ".png";
        write_png(path, from_model_range(out));
        std::cout << ind.name() << " -> " << path << " (z_T " << hash_hex << ")\n";
        files.push_back({{"indicator", {ind.illumination, ind.pose}}, {"file", path}});
    }
    log["outputs"] = files;
    std::ofstream os(rc.output_dir + "/compose_log.json");
    os << log.dump(2) << "\n";
    write_resolved_config(rc, rc.output_dir);
    return 0;
}

int cmd_eval_bt(const std::string& csv, const std::string& out_path) {
    PairwiseTable table = PairwiseTable::from_csv(csv);
    BTScores s = bt_fit(table);
    json items = json::array();
    for (size_t i = 0; i < s.methods.size(); ++i) {
        std::printf("%-24s %8.3f%s\n", s.methods[i].c_str(), s.scores[i], s.clamped[i] ? "  (clamped)" : "");
        items.push_back({{"method", s.methods[i]}, {"score", s.scores[i]}, {"clamped", static_cast<bool>(s.clamped[i])}});
    }
    json report{{"schema_version", 1},
                {"metric", "bt_score"},
                {"items", items},
                {"aggregate", {{"converged", s.converged}, {"iterations", s.iterations}}},
                {"metadata", {{"normalization", "mean-zero log-strengths"}}}};
    if (!out_path.empty()) {
        std::ofstream os(out_path);
        os << report.dump(2) << "\n";
    }
    return 0;
}

int cmd_eval_rank(const std::string& csv, const std::string& out_path) {
    std::ifstream is(csv);
    if (!is)
        throw StateError("rank CSV not found: " + csv);
    std::string line;
    if (!std::getline(is, line))
        throw ValidationError("empty rank CSV");
    std::vector<std::string> methods;
    {
        std::stringstream ss(line);
        std::string item;
        while (std::getline(ss, item, ','))
            methods.push_back(item);
    }
    std::vector<std::vector<int>> rankings;
    while (std::getline(is, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        std::vector<int> row;
        std::stringstream ss(line);
        std::string item;
        while (std::getline(ss, item, ','))
            row.push_back(std::atoi(item.c_str()));
        if (row.size() != methods.size())
            throw ValidationError("rank row width mismatch");
        rankings.push_back(row);
    }
    std::vector<double> means = average_rank(rankings);
    json items = json::array();
    for (size_t i = 0; i < methods.size(); ++i) {
        std::printf("%-24s %8.2f\n", methods[i].c_str(), means[i]);
        items.push_back({{"method", methods[i]}, {"mean_rank", means[i]}});
    }
    json report{{"schema_version", 1},
                {"metric", "average_rank"},
                {"items", items},
                {"aggregate", {{"raters", rankings.size()}}},
                {"metadata", json::object()}};
    if (!out_path.empty()) {
        std::ofstream os(out_path);
        os << report.dump(2) << "\n";
    }
    return 0;
}

int cmd_eval_metrics(const RunConfig& rc, const std::string& out_path) {
    if (!fs::exists(rc.dataset_dir + "/manifest.json"))
        throw StateError("dataset not found: " + rc.dataset_dir);
    std::vector<TrainingTuple> data = load_dataset(rc.dataset_dir);
    std::unique_ptr<CompositionModel> model;
    if (!rc.checkpoint.empty() && fs::exists(rc.checkpoint))
        model = CompositionModel::load(rc.checkpoint);

    json items = json::array();
    double ssim_sum = 0.0, fg_sum = 0.0;
    int fg_count = 0;
    for (size_t i = 0; i < data.size(); ++i) {
        const TrainingTuple& t = data[i];
        double s = masked_background_ssim(t.background, t.composite, t.box);
        ssim_sum += s;
        json item{{"index", i}, {"task", t.indicator.name()}, {"masked_ssim", s}};
        if (model && !t.fg_object_mask.empty()) {
            double fsim = masked_fg_similarity(t.composite, t.foreground, t.box, t.fg_object_mask, model->fg());
            item["fg_similarity"] = fsim;
            fg_sum += fsim;
            ++fg_count;
        }
        items.push_back(item);
    }
    json aggregate{{"masked_ssim_mean", ssim_sum / static_cast<double>(data.size())}, {"count", data.size()}};
    if (fg_count > 0)
        aggregate["fg_similarity_mean"] = fg_sum / fg_count;
    json report{{"schema_version", 1},
                {"metric", "composition_metrics"},
                {"items", items},
                {"aggregate", aggregate},
                {"metadata",
                 {{"note", "foreground similarity uses the trained toy encoder; values are not comparable "
                           "to scores from large pretrained encoders"}}}};
    std::cout << "masked_ssim mean: " << aggregate["masked_ssim_mean"] << " over " << data.size() << " tuples\n";
    if (fg_count > 0)
        std::cout << "fg_similarity mean: " << aggregate["fg_similarity_mean"] << "\n";
    if (!out_path.empty()) {
        std::ofstream os(out_path);
        os << report.dump(2) << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"controlcom: controllable image composition (desk scale)"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "run configuration JSON (flags override file values)");

    // prepare
    auto* prep = app.add_subcommand("prepare", "generate a synthetic training dataset");
    int sources = 100;
    prep->add_option("--sources", sources, "number of source images (4 tuples each)");
    std::string prep_out, train_ds, ckpt, out_dir;
    std::uint64_t seed = 0;
    int threads = 0;
    prep->add_option("--out", prep_out, "dataset directory");
    prep->add_option("--seed", seed, "root seed");
    prep->add_option("--threads", threads, "worker threads (env CONTROLCOM_MICRO_THREADS caps)");

    // train
    auto* tr = app.add_subcommand("train", "train the composition model");
    int epochs = -1, batch = -1, ae_steps = -1;
    double lr = -1.0, ae_lr = -1.0;
    std::string ablation;
    bool resume = false;
    tr->add_option("--dataset", train_ds, "dataset directory");
    tr->add_option("--checkpoint", ckpt, "checkpoint output path");
    tr->add_option("--epochs", epochs, "training epochs");
    tr->add_option("--lr", lr, "learning rate");
    tr->add_option("--batch", batch, "batch size");
    tr->add_option("--ae-steps", ae_steps, "autoencoder pretraining steps");
    tr->add_option("--ae-lr", ae_lr, "autoencoder learning rate");
    tr->add_option("--ablation", ablation,
                   "model variant: global_only_all_tokens|global_only_class|plus_aug|le_no_fm|full");
    tr->add_flag("--resume", resume, "continue from the checkpoint");
    tr->add_option("--seed", seed, "root seed");
    tr->add_option("--threads", threads, "worker threads");

    // compose
    auto* comp = app.add_subcommand("compose", "synthesize composites from a trained checkpoint");
    std::string bg_path, fg_path, box_s, indicator_s = "1,1";
    bool all_indicators = false;
    comp->add_option("--checkpoint", ckpt, "trained checkpoint");
    comp->add_option("--background", bg_path, "background PNG")->required();
    comp->add_option("--foreground", fg_path, "foreground PNG")->required();
    comp->add_option("--box", box_s, "normalized box x0,y0,x1,y1")->required();
    comp->add_option("--indicator", indicator_s, "indicator bits i,p (illumination,pose)");
    comp->add_flag("--all-indicators", all_indicators, "emit all four tasks from one initial noise");
    comp->add_option("--seed", seed, "sampling seed");
    comp->add_option("--out", out_dir, "output directory");

    // eval
    auto* ev = app.add_subcommand("eval", "metrics and subjective-score tooling");
    auto* ev_bt = ev->add_subcommand("bt", "Bradley-Terry scores from a pairwise CSV");
    std::string csv_path, report_path;
    ev_bt->add_option("--csv", csv_path, "CSV: method_a,method_b,wins_a,wins_b")->required();
    ev_bt->add_option("--out", report_path, "report JSON path");
    auto* ev_rank = ev->add_subcommand("rank", "average ranking from per-rater CSV rows");
    ev_rank->add_option("--csv", csv_path, "CSV: header = methods, rows = rank permutations")->required();
    ev_rank->add_option("--out", report_path, "report JSON path");
    auto* ev_metrics = ev->add_subcommand("metrics", "masked metrics over a dataset");
    ev_metrics->add_option("--dataset", train_ds, "dataset directory");
    ev_metrics->add_option("--checkpoint", ckpt, "checkpoint for the foreground encoder (optional)");
    ev_metrics->add_option("--out", report_path, "report JSON path");
    ev->require_subcommand(1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        RunConfig rc = load_run_config(config_path);
        if (seed != 0 || config_path.empty())
            rc.seed = seed;
        if (threads > 0)
            rc.threads = threads;
        if (!prep_out.empty())
            rc.dataset_dir = prep_out;
        if (!train_ds.empty())
            rc.dataset_dir = train_ds;
        if (!ckpt.empty())
            rc.checkpoint = ckpt;
        if (!out_dir.empty())
            rc.output_dir = out_dir;
        if (epochs > 0)
            rc.epochs = epochs;
        if (lr > 0)
            rc.lr = lr;
        if (batch > 0)
            rc.batch = batch;
        if (ae_steps >= 0)
            rc.ae_steps = ae_steps;
        if (ae_lr > 0)
            rc.ae_lr = ae_lr;

        if (app.got_subcommand(prep))
            return cmd_prepare(rc, sources);
        if (app.got_subcommand(tr))
            return cmd_train(rc, ablation, resume);
        if (app.got_subcommand(comp))
            return cmd_compose(rc, bg_path, fg_path, box_s, indicator_s, all_indicators);
        if (app.got_subcommand(ev)) {
            if (ev->got_subcommand(ev_bt))
                return cmd_eval_bt(csv_path, report_path);
            if (ev->got_subcommand(ev_rank))
                return cmd_eval_rank(csv_path, report_path);
            if (ev->got_subcommand(ev_metrics))
                return cmd_eval_metrics(rc, report_path);
        }
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const GeometryError& e) {
        std::cerr << "geometry error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const StateError& e) {
        std::cerr << "missing state: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
