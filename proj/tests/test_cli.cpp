// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#ifndef CONTROLCOM_BIN
#error "CONTROLCOM_BIN must point at the CLI binary"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kBin = CONTROLCOM_BIN;

int run(const std::string& args) {
    int rc = std::system((kBin + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& p) const { return (path / p).string(); }
};

void write_tiny_config(const std::string& path) {
    json j;
    j["pipeline"] = {{"source_size", 48}, {"image_size", 32}, {"fg_size", 16}};
    j["model"] = {{"encoder",
                   {{"image_size", 32},
                    {"latent_factor", 4},
                    {"fg_size", 16},
                    {"patch_size", 4},
                    {"vit_depth", 3},
                    {"vit_width", 16},
                    {"deep_layer_index", 3},
                    {"shallow_layer_index", 1},
                    {"vit_heads", 2},
                    {"d_g", 16},
                    {"d_l", 16},
                    {"ae_channels", 8}}},
                  {"generator",
                   {{"base_channels", 16},
                    {"channel_multipliers", {1, 2}},
                    {"attention_resolutions", {8, 4}},
                    {"le_resolutions", {8, 4}},
                    {"p", 4},
                    {"time_embed_dim", 32},
                    {"heads", 2},
                    {"norm_groups", 8}}}};
    j["sampler"] = {{"ddim_steps", 4}, {"guidance_scale", 5.0}};
    std::ofstream os(path);
    os << j.dump(2) << "\n";
}

} // namespace

TEST_CASE("prepare is deterministic and balanced; bad out dir exits 2") {
    TempDir td("ccm_cli_prepare");
    write_tiny_config(td / "cfg.json");
    std::string base = "--config " + (td / "cfg.json");

    CHECK(run(base + " prepare --sources 3 --seed 7 --out " + (td / "ds_a")) == 0);
    CHECK(run(base + " prepare --sources 3 --seed 7 --out " + (td / "ds_b")) == 0);
    CHECK(slurp(td / "ds_a/manifest.json") == slurp(td / "ds_b/manifest.json"));
    CHECK(slurp(td / "ds_a/tuple_00001_compose/composite.png") ==
          slurp(td / "ds_b/tuple_00001_compose/composite.png"));

    json mf = json::parse(slurp(td / "ds_a/manifest.json"));
    CHECK(mf.at("tuples").size() == 12);
    CHECK(mf.at("per_task_counts").at("blend").get<int>() == 3);

    // A path that cannot be a directory.
    std::ofstream blocker(td / "blocked");
    blocker << "x";
    blocker.close();
    CHECK(run(base + " prepare --sources 1 --out " + (td / "blocked")) == 2);
}

TEST_CASE("unknown config keys are rejected with exit 2") {
    TempDir td("ccm_cli_cfg");
    {
        std::ofstream os(td / "bad.json");
        os << R"({"no_such_key": 1})";
    }
    CHECK(run("--config " + (td / "bad.json") + " prepare --sources 1 --out " + (td / "ds")) == 2);
}

TEST_CASE("train + compose pipeline: determinism, resume, exit codes") {
    TempDir td("ccm_cli_train");
    write_tiny_config(td / "cfg.json");
    std::string base = "--config " + (td / "cfg.json");
    REQUIRE(run(base + " prepare --sources 2 --seed 11 --out " + (td / "ds")) == 0);

    // Missing dataset -> 3.
    CHECK(run(base + " train --dataset " + (td / "nodataset") + " --checkpoint " + (td / "x.ckpt")) == 3);

    REQUIRE(run(base + " train --dataset " + (td / "ds") + " --checkpoint " + (td / "m.ckpt") +
                " --epochs 2 --batch 8 --ae-steps 10 --seed 3 --threads 2") == 0);
    CHECK(fs::exists(td / "m.ckpt"));
    CHECK(fs::exists(td / "m.ckpt.json"));
    CHECK(fs::exists(td / "m.ckpt.losslog.jsonl"));

    // The loss log is JSON lines with the documented fields.
    {
        std::ifstream is(td / "m.ckpt.losslog.jsonl");
        std::string line;
        int lines = 0;
        while (std::getline(is, line)) {
            json j = json::parse(line);
            CHECK(j.contains("step"));
            CHECK(j.contains("loss"));
            CHECK(j.contains("task_indicator"));
            ++lines;
        }
        CHECK(lines == 16); // 2 epochs x 8 samples
    }

    // Resume continues the step counter.
    json sidecar = json::parse(slurp(td / "m.ckpt.json"));
    CHECK(sidecar.at("trained_steps").get<int>() == 2);
    REQUIRE(run(base + " train --resume --dataset " + (td / "ds") + " --checkpoint " + (td / "m.ckpt") +
                " --epochs 1 --batch 8 --seed 4") == 0);
    sidecar = json::parse(slurp(td / "m.ckpt.json"));
    CHECK(sidecar.at("trained_steps").get<int>() == 3);

    // Compose: missing checkpoint -> 3; determinism; all-indicators share z_T.
    std::string bg = td / "ds/tuple_00000_blend/background.png";
    std::string fg = td / "ds/tuple_00000_blend/foreground.png";
    CHECK(run(base + " compose --checkpoint " + (td / "none.ckpt") + " --background " + bg + " --foreground " + fg +
              " --box 0.3,0.3,0.7,0.7") == 3);

    std::string compose_args = " compose --checkpoint " + (td / "m.ckpt") + " --background " + bg +
                               " --foreground " + fg + " --box 0.25,0.25,0.75,0.75 --seed 5";
    REQUIRE(run(base + compose_args + " --all-indicators --out " + (td / "o1")) == 0);
    REQUIRE(run(base + compose_args + " --all-indicators --out " + (td / "o2")) == 0);
    for (const char* f : {"composite_blend.png", "composite_harmonize.png", "composite_view.png",
                          "composite_compose.png"})
        CHECK(slurp(td / ("o1/" + std::string(f))) == slurp(td / ("o2/" + std::string(f))));
    json log = json::parse(slurp(td / "o1/compose_log.json"));
    CHECK(log.at("outputs").size() == 4);
    CHECK(log.at("noise_hash").get<std::string>().size() == 16);

    // Bad indicator and bad box -> 2.
    CHECK(run(base + " compose --checkpoint " + (td / "m.ckpt") + " --background " + bg + " --foreground " + fg +
              " --box 0.9,0.3,0.1,0.7") == 2);
    CHECK(run(base + " compose --checkpoint " + (td / "m.ckpt") + " --background " + bg + " --foreground " + fg +
              " --box 0.3,0.3,0.7,0.7 --indicator 2,0") == 2);

    // Ablation flag selects the trained variant, recorded in the sidecar.
    REQUIRE(run(base + " train --dataset " + (td / "ds") + " --checkpoint " + (td / "abl.ckpt") +
                " --epochs 1 --batch 8 --ae-steps 0 --seed 3 --ablation global_only_class") == 0);
    json abl = json::parse(slurp(td / "abl.ckpt.json"));
    CHECK(abl.at("model").at("generator").at("ablation").get<std::string>() == "global_only_class");

    // eval metrics over the dataset: report validates structurally.
    REQUIRE(run(base + " eval metrics --dataset " + (td / "ds") + " --checkpoint " + (td / "m.ckpt") + " --out " +
                (td / "report.json")) == 0);
    json rep = json::parse(slurp(td / "report.json"));
    CHECK(rep.at("schema_version").get<int>() == 1);
    CHECK(rep.at("metric").get<std::string>() == "composition_metrics");
    CHECK(rep.at("items").is_array());
    CHECK(rep.at("items").size() == 8);
    CHECK(rep.at("aggregate").contains("masked_ssim_mean"));
    // Background equals composite outside the (blacked) box by
    // construction, so the masked SSIM column is identically 1.
    for (const auto& item : rep.at("items"))
        CHECK(item.at("masked_ssim").get<double>() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("eval bt and rank subcommands") {
    TempDir td("ccm_cli_eval");
    {
        std::ofstream os(td / "bt.csv");
        os << "method_a,method_b,wins_a,wins_b\n";
        os << "strong,mid,7500,2500\n";
        os << "mid,weak,6667,3333\n";
        os << "strong,weak,8000,2000\n";
    }
    REQUIRE(run("eval bt --csv " + (td / "bt.csv") + " --out " + (td / "bt.json")) == 0);
    json rep = json::parse(slurp(td / "bt.json"));
    CHECK(rep.at("metric").get<std::string>() == "bt_score");
    REQUIRE(rep.at("items").size() == 3);
    double s0 = rep.at("items")[0].at("score").get<double>();
    double s1 = rep.at("items")[1].at("score").get<double>();
    double s2 = rep.at("items")[2].at("score").get<double>();
    CHECK(s0 > s1);
    CHECK(s1 > s2);
    CHECK(rep.at("aggregate").at("converged").get<bool>());

    {
        std::ofstream os(td / "ranks.csv");
        os << "a,b,c\n1,2,3\n1,3,2\n2,1,3\n";
    }
    REQUIRE(run("eval rank --csv " + (td / "ranks.csv") + " --out " + (td / "rank.json")) == 0);
    json rr = json::parse(slurp(td / "rank.json"));
    CHECK(rr.at("items")[0].at("mean_rank").get<double>() == doctest::Approx(4.0 / 3));

    // Malformed CSV -> 2.
    {
        std::ofstream os(td / "bad.csv");
        os << "method_a,method_b\n";
    }
    CHECK(run("eval bt --csv " + (td / "bad.csv")) == 2);
    {
        std::ofstream os(td / "badrank.csv");
        os << "a,b\n1,1\n";
    }
    CHECK(run("eval rank --csv " + (td / "badrank.csv")) == 2);
}
