#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ctxbias/pipeline/config.hpp"
#include "ctxbias/pipeline/pipeline.hpp"
#include "ctxbias/report/report.hpp"

using namespace ctxbias;
using namespace ctxbias::pipeline;
namespace fs = std::filesystem;

TEST_CASE("default config is the pinned benchmark") {
    const RunConfig cfg = default_config();
    CHECK(cfg.scene.fg_classes.size() == 3);
    CHECK(cfg.scene.fg_classes[1].name == "triangle");
    CHECK(cfg.scene.bg_labels[0].name == "stripes");
    CHECK(cfg.scene.association_table.at("source")[1][0] == doctest::Approx(0.95));
    CHECK(cfg.scene.association_table.at("target")[1][0] == doctest::Approx(0.95));
    CHECK(cfg.scene.perturbations.at("target").brightness_shift > 0.0);
    CHECK(cfg.experiments.n_trials == 6);
    CHECK(cfg.experiments.bins.size() == 9);
    CHECK_NOTHROW(cfg.scene.validate());
}

TEST_CASE("config parsing, overrides and validation") {
    SUBCASE("partial overrides keep the rest of the defaults") {
        const RunConfig cfg = parse_config_json(R"({"seed": 9, "train": {"epochs": 3}})");
        CHECK(cfg.seed == 9);
        CHECK(cfg.train.epochs == 3);
        CHECK(cfg.train.batch_size == 8);
        CHECK(cfg.scene.seed == 9);  // seed propagates
        CHECK(cfg.train.seed == 9);
    }
    SUBCASE("unknown keys are rejected with a field-level message") {
        try {
            parse_config_json(R"({"sede": 9})");
            FAIL("expected config_error");
        } catch (const config_error& e) {
            CHECK(std::string(e.what()).find("sede") != std::string::npos);
        }
    }
    SUBCASE("invalid values are rejected") {
        CHECK_THROWS_AS(parse_config_json(R"({"alpha": 2.0})"), config_error);
        CHECK_THROWS_AS(parse_config_json(R"({"train": {"epochs": 0}})"), config_error);
        CHECK_THROWS_AS(parse_config_json(R"({"experiments": {"force_test": "bogus"}})"),
                        config_error);
        CHECK_THROWS_AS(parse_config_json("not json"), config_error);
    }
    SUBCASE("scene association must stay row-stochastic") {
        CHECK_THROWS_AS(
            parse_config_json(R"({"scene": {"association": {"source": [[0.5, 0.2]]}}})"),
            config_error);
    }
    SUBCASE("write/load round trip preserves the configuration") {
        RunConfig cfg = default_config();
        cfg.seed = 77;
        cfg.experiments.bins = {1, 3, 9};
        cfg.train.learning_rate = 0.005;
        const fs::path p = fs::temp_directory_path() / "ctxbias_cfg_test.json";
        write_config(cfg, p.string());
        const RunConfig back = load_config(p.string());
        CHECK(back.seed == 77);
        CHECK(back.experiments.bins == std::vector<int>{1, 3, 9});
        CHECK(back.train.learning_rate == doctest::Approx(0.005));
        CHECK(back.scene.association_table.at("source")[1][0] == doctest::Approx(0.95));
    }
}

TEST_CASE("report consolidates whatever sections exist") {
    RunConfig cfg = default_config();
    const fs::path root = fs::temp_directory_path() / "ctxbias_report_test";
    fs::remove_all(root);
    cfg.paths.out_root = root.string();

    SUBCASE("no sections is a missing-prerequisite error") {
        fs::create_directories(cfg.paths.experiments_dir());
        CHECK_THROWS_AS(pipeline::cmd_report(cfg), pipeline_error);
    }
    SUBCASE("a single section yields a valid single-section document") {
        fs::create_directories(cfg.paths.experiments_dir());
        {
            std::ofstream f(cfg.paths.experiments_dir() + "/eval.json");
            f << R"({"map50": {"source_val": 0.9}})";
        }
        pipeline::cmd_report(cfg);
        std::ifstream f(cfg.paths.report_dir() + "/report.json");
        REQUIRE(f.good());
        const auto doc = nlohmann::json::parse(f);
        CHECK(doc.at("sections").size() == 1);
        CHECK(doc.at("sections").contains("eval"));
        CHECK(doc.contains("environment"));
        CHECK(doc.contains("timestamp"));
    }
}

TEST_CASE("csv writer quoting") {
    const std::string out = report::to_csv({{"a", "b,c", "d\"e"}, {"1", "2", "3"}});
    CHECK(out == "a,\"b,c\",\"d\"\"e\"\n1,2,3\n");
}

TEST_CASE("svg plot emission") {
    SUBCASE("paired boxplot carries groups and stars") {
        const std::string svg = report::svg_paired_boxplot(
            "t", "S", "T",
            {{"triangle/stripes", {0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}, "**"}});
        CHECK(svg.find("<svg") == 0);
        CHECK(svg.find("triangle/stripes") != std::string::npos);
        CHECK(svg.find("**") != std::string::npos);
        CHECK(svg.find("</svg>") != std::string::npos);
    }
    SUBCASE("pair graph bolds significant edges") {
        const std::string svg = report::svg_pair_graph(
            "g", {"triangle"}, {"stripes", "dots"},
            {{"triangle", "stripes", 0.8, true}, {"triangle", "dots", 0.1, false}});
        CHECK(svg.find("#08306b") != std::string::npos);  // bold color used
        CHECK(svg.find("#9ecae1") != std::string::npos);  // light edge used
    }
    SUBCASE("significance stars ladder") {
        CHECK(report::stars_for_p(0.2) == "");
        CHECK(report::stars_for_p(0.04) == "*");
        CHECK(report::stars_for_p(0.009) == "**");
        CHECK(report::stars_for_p(0.0009) == "***");
    }
}
