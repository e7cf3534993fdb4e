#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctxbias/pipeline/pipeline.hpp"

using namespace ctxbias;

namespace {

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    std::optional<double> alpha;
    std::optional<std::string> out;
    std::optional<std::string> layer;
    std::optional<std::vector<int>> bins;
    std::optional<std::string> select_by_domain;
    std::optional<std::string> force_test;
};

void apply(const Overrides& o, pipeline::RunConfig& cfg) {
    if (o.seed) {
        cfg.seed = *o.seed;
        cfg.scene.seed = *o.seed;
        cfg.train.seed = *o.seed;
    }
    if (o.jobs) cfg.jobs = *o.jobs;
    if (o.alpha) cfg.alpha = *o.alpha;
    if (o.out) cfg.paths.out_root = *o.out;
    if (o.layer) {
        cfg.experiments.layer = *o.layer;
        cfg.experiments.headline_layer = *o.layer;
    }
    if (o.bins) cfg.experiments.bins = *o.bins;
    if (o.select_by_domain) cfg.select_by_domain = *o.select_by_domain;
    if (o.force_test) {
        if (*o.force_test == "wilcoxon") cfg.experiments.force_test = stats::ForcedTest::wilcoxon;
        else if (*o.force_test == "ttest") cfg.experiments.force_test = stats::ForcedTest::ttest;
        else throw config_error("--force-test must be 'wilcoxon' or 'ttest'");
    }
    if (cfg.jobs < 1) throw config_error("--jobs must be >= 1");
    if (cfg.alpha <= 0.0 || cfg.alpha >= 1.0) throw config_error("--alpha outside (0,1)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ctxbias: quantifies foreground-background context bias in object detectors\n"
                 "via background replacement, feature-space ablation, CAM-guided masking and\n"
                 "MMD-based causal metrics on a synthetic benchmark."};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    std::string config_path;
    Overrides ov;
    app.add_option("--config", config_path, "JSON config file (defaults to the pinned benchmark)");
    app.add_option("--seed", ov.seed, "master seed override");
    app.add_option("--jobs", ov.jobs, "worker threads for image-level parallelism");
    app.add_option("--alpha", ov.alpha, "significance level");
    app.add_option("--out", ov.out, "output root directory");
    app.add_option("--layer", ov.layer, "ablation/headline layer (stage1..stage4)");
    app.add_option("--bins", ov.bins, "CAM ladder rungs to evaluate (1..9)")->delimiter(',');
    app.add_option("--select-by-domain", ov.select_by_domain,
                   "checkpoint selection domain (default: source held-out split)");
    app.add_option("--force-test", ov.force_test,
                   "override the Shapiro gate: 'wilcoxon' or 'ttest'");

    using Command = std::function<void(const pipeline::RunConfig&)>;
    std::vector<std::pair<CLI::App*, Command>> commands = {
        {app.add_subcommand("synth", "generate the synthetic multi-domain benchmark"),
         pipeline::cmd_synth},
        {app.add_subcommand("train", "train the toy detector on the source domain"),
         pipeline::cmd_train},
        {app.add_subcommand("eval", "evaluate mAP@50 per dataset split"), pipeline::cmd_eval},
        {app.add_subcommand("q1-image", "background replacement in image space (Q1)"),
         pipeline::cmd_q1_image},
        {app.add_subcommand("q1-feature", "background-label removal in feature space (Q1)"),
         pipeline::cmd_q1_feature},
        {app.add_subcommand("q2-cam", "CAM-thresholded background ablation ladder (Q2)"),
         pipeline::cmd_q2_cam},
        {app.add_subcommand("q3-gradient", "domain association gradients (Q3)"),
         pipeline::cmd_q3_gradient},
        {app.add_subcommand("q3-crossdomain", "cross-domain association sums (Q3)"),
         pipeline::cmd_q3_crossdomain},
        {app.add_subcommand("report", "consolidated report with plots"), pipeline::cmd_report},
    };

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        pipeline::RunConfig cfg =
            config_path.empty() ? pipeline::default_config() : pipeline::load_config(config_path);
        apply(ov, cfg);
        for (const auto& [sub, fn] : commands)
            if (sub->parsed()) fn(cfg);
        return 0;
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const pipeline_error& e) {
        std::cerr << "pipeline error: " << e.what() << "\n";
        return 3;
    } catch (const error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
}
