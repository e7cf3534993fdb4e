#include "ctxbias/pipeline/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <json.hpp>

#include "ctxbias/assoc/feature_store.hpp"
#include "ctxbias/cam/cam.hpp"
#include "ctxbias/core/png.hpp"
#include "ctxbias/core/rng.hpp"
#include "ctxbias/detector/eval.hpp"
#include "ctxbias/interventions/interventions.hpp"
#include "ctxbias/kernels/kernels.hpp"
#include "ctxbias/report/report.hpp"
#include "ctxbias/stats/stats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace ctxbias::pipeline {

namespace {

void write_text(const std::string& path, const std::string& text) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw load_error("cannot write " + path);
    f << text;
}

void write_json(const std::string& path, const ordered_json& doc) {
    write_text(path, doc.dump(2) + "\n");
}

ordered_json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw pipeline_error("missing artifact " + path);
    return ordered_json::parse(f);
}

Dataset load_split(const RunConfig& cfg, const std::string& split) {
    const std::string manifest = cfg.paths.manifest(split);
    if (!fs::exists(manifest))
        throw pipeline_error("dataset split '" + split + "' not found at " + manifest +
                             " (run the synth command first)");
    return read_dataset(manifest);
}

det::ToyDetector load_model(const RunConfig& cfg) {
    return det::ToyDetector::load_checkpoint(cfg.paths.checkpoint_dir());
}

interv::FeatureSpaceConfig feature_space_config(const RunConfig& cfg) {
    interv::FeatureSpaceConfig fc;
    fc.layer = cfg.experiments.layer;
    fc.n_trials = cfg.experiments.n_trials;
    fc.trial_fraction = cfg.experiments.trial_fraction;
    fc.match_iou = cfg.experiments.match_iou;
    fc.predict = cfg.predict_options();
    fc.cam.n_samples = cfg.experiments.cam_samples;
    fc.cam.noise_sigma = cfg.experiments.cam_noise_sigma;
    fc.cam.confidence_floor = cfg.experiments.cam_confidence;
    fc.cam.seed = cfg.seed;
    fc.feature_bin = cfg.experiments.feature_bin;
    fc.seed = cfg.seed;
    fc.jobs = cfg.jobs;
    return fc;
}

std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// Per-pair significance: Wilcoxon over the per-trial paired
// (standard, intervened) detection counts, with the reporting floor on the
// overall drop rate.
struct PairRow {
    int fg, bg;
    assoc::PairStats stats;
    double p = 1.0;
    bool significant = false;
};

std::vector<PairRow> pair_rows(const assoc::FeatureStore& store, const RunConfig& cfg) {
    std::vector<PairRow> rows;
    for (const auto& p : store.pair_stats) {
        PairRow row;
        row.fg = p.fg;
        row.bg = p.bg;
        row.stats = p;
        std::vector<double> std_counts, mod_counts;
        for (const auto& t : p.per_trial) {
            std_counts.push_back(static_cast<double>(t.tp));
            mod_counts.push_back(static_cast<double>(t.tp - t.drops));
        }
        const stats::TestResult w =
            stats::wilcoxon_signed_rank(std_counts, mod_counts, cfg.alpha);
        row.p = w.p_value;
        row.significant = w.decision == stats::Decision::significant &&
                          p.drop_rate() >= cfg.experiments.min_drop_rate && !p.low_support;
        rows.push_back(std::move(row));
    }
    std::sort(rows.begin(), rows.end(), [](const PairRow& a, const PairRow& b) {
        if (a.fg != b.fg) return a.fg < b.fg;
        return a.bg < b.bg;
    });
    if (cfg.experiments.holm) {
        std::vector<double> ps;
        for (const auto& r : rows) ps.push_back(r.p);
        const auto adj = stats::holm_adjust(ps);
        for (size_t i = 0; i < rows.size(); ++i) {
            rows[i].p = adj[i];
            rows[i].significant = rows[i].significant && adj[i] < cfg.alpha;
        }
    }
    return rows;
}

ordered_json events_json(const std::vector<interv::DropEvent>& events) {
    ordered_json out = ordered_json::array();
    for (const auto& e : events) {
        ordered_json je;
        je["image"] = e.image_id;
        je["instance"] = e.instance_index;
        je["fg"] = e.fg_class;
        if (e.removed_bg_label >= 0) je["removed_bg"] = e.removed_bg_label;
        if (e.cam_bin >= 0) je["cam_bin"] = e.cam_bin;
        je["reason"] = interv::drop_reason_name(e.reason);
        je["iou_before"] = e.iou_before;
        je["iou_after"] = e.iou_after;
        out.push_back(std::move(je));
    }
    return out;
}

}  // namespace

// --- synth -------------------------------------------------------------------

void cmd_synth(const RunConfig& cfg) {
    const auto& sy = cfg.synth;
    struct Split {
        std::string name;
        std::string domain;
        int count;
    };
    const std::vector<Split> splits = {
        {sy.source_domain + "_train", sy.source_domain, sy.train_images},
        {sy.source_domain + "_val", sy.source_domain, sy.val_images},
        {sy.target_domain + "_val", sy.target_domain, sy.val_images},
    };
    ordered_json summary;
    for (const auto& split : splits) {
        synth::SceneSpec spec = cfg.scene;
        spec.seed = derive_seed(cfg.seed, "split:" + split.name);
        const Dataset d = synth::generate(spec, split.count, DomainId{split.domain});
        write_dataset(d, cfg.paths.manifest(split.name));
        summary["splits"].push_back(ordered_json{{"name", split.name},
                                                 {"domain", split.domain},
                                                 {"images", split.count},
                                                 {"instances", d.instance_count()}});
        std::cout << "synth: wrote " << split.name << " (" << split.count << " images)\n";
    }

    fs::create_directories(cfg.paths.bg_pool_dir());
    synth::SceneSpec pool_spec = cfg.scene;
    pool_spec.seed = derive_seed(cfg.seed, "split:bg_pool");
    for (int i = 0; i < sy.bg_pool_images; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "bg_%05d.png", i);
        png::write_image((fs::path(cfg.paths.bg_pool_dir()) / buf).string(),
                         synth::generate_bg_image(pool_spec, i));
    }
    summary["bg_pool_images"] = sy.bg_pool_images;
    write_json(cfg.paths.data_dir() + "/synth.json", summary);
    std::cout << "synth: wrote " << sy.bg_pool_images << " background pool images\n";
}

// --- train -------------------------------------------------------------------

void cmd_train(const RunConfig& cfg) {
    const Dataset train_set = load_split(cfg, cfg.synth.source_domain + "_train");
    const std::string val_split = cfg.select_by_domain.empty()
                                      ? cfg.synth.source_domain + "_val"
                                      : cfg.select_by_domain + "_val";
    const Dataset val_set = load_split(cfg, val_split);

    det::ToyDetector model(cfg.model);
    det::TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    const det::TrainResult r = det::train(model, train_set, &val_set, tc);
    model.save_checkpoint(cfg.paths.checkpoint_dir());

    ordered_json log;
    log["selection_split"] = val_split;
    log["best_epoch"] = r.best_epoch;
    log["best_map50"] = r.best_map;
    log["epoch_losses"] = r.epoch_losses;
    log["val_maps"] = r.val_maps;
    log["steps"] = r.step_losses.size();
    log["first_step_loss"] = r.step_losses.empty() ? 0.0 : r.step_losses.front();
    write_json(cfg.paths.checkpoint_dir() + "/train_log.json", log);
    std::cout << "train: best mAP@50 " << fixed(r.best_map) << " at epoch " << r.best_epoch + 1
              << " (selection on " << val_split << ")\n";
}

// --- eval ----------------------------------------------------------------------

void cmd_eval(const RunConfig& cfg) {
    const det::ToyDetector model = load_model(cfg);
    const std::vector<std::string> splits = {cfg.synth.source_domain + "_train",
                                             cfg.synth.source_domain + "_val",
                                             cfg.synth.target_domain + "_val"};
    ordered_json doc;
    std::vector<std::vector<std::string>> csv = {{"dataset", "map50"}};
    for (const auto& split : splits) {
        if (!fs::exists(cfg.paths.manifest(split))) continue;
        const Dataset d = load_split(cfg, split);
        const double m = det::dataset_map50(model, d);
        doc["map50"][split] = m;
        csv.push_back({split, fixed(m)});
        std::cout << "eval: " << split << " mAP@50 = " << fixed(m) << "\n";
    }
    if (!doc.contains("map50")) throw pipeline_error("eval: no dataset splits found (run synth)");
    write_json(cfg.paths.experiments_dir() + "/eval.json", doc);
    write_text(cfg.paths.experiments_dir() + "/eval.csv", report::to_csv(csv));
}

// --- q1 image ------------------------------------------------------------------

void cmd_q1_image(const RunConfig& cfg) {
    const det::ToyDetector model = load_model(cfg);
    const Dataset source = load_split(cfg, cfg.synth.source_domain + "_val");
    const Dataset target = load_split(cfg, cfg.synth.target_domain + "_val");
    if (!fs::is_directory(cfg.paths.bg_pool_dir()))
        throw pipeline_error("background pool missing at " + cfg.paths.bg_pool_dir() +
                             " (run the synth command first)");
    interv::DirectoryBgPool pool(cfg.paths.bg_pool_dir());

    const interv::Q1ImageResult r = interv::run_q1_image_space(
        model,
        {{DomainId{cfg.synth.source_domain}, &source}, {DomainId{cfg.synth.target_domain}, &target}},
        pool, cfg.experiments.n_trials, cfg.seed, cfg.jobs);

    ordered_json doc;
    std::vector<std::vector<std::string>> csv = {
        {"domain", "baseline_map50", "mean_map50", "std_map50", "trials"}};
    for (size_t d = 0; d < r.domains.size(); ++d) {
        ordered_json jd;
        jd["domain"] = r.domains[d];
        jd["baseline_map50"] = r.baseline_map[d];
        jd["mean_map50"] = r.mean_map[d];
        jd["std_map50"] = r.std_map[d];
        jd["per_trial"] = r.map_per_trial[d];
        doc["domains"].push_back(std::move(jd));
        csv.push_back({r.domains[d], fixed(r.baseline_map[d]), fixed(r.mean_map[d]),
                       fixed(r.std_map[d]), std::to_string(r.map_per_trial[d].size())});
        std::cout << "q1-image: " << r.domains[d] << " baseline " << fixed(r.baseline_map[d])
                  << ", composited " << fixed(r.mean_map[d]) << " +- " << fixed(r.std_map[d])
                  << "\n";
    }
    write_json(cfg.paths.experiments_dir() + "/q1_image.json", doc);
    write_text(cfg.paths.experiments_dir() + "/q1_image.csv", report::to_csv(csv));
}

// --- q1 feature ------------------------------------------------------------------

void cmd_q1_feature(const RunConfig& cfg) {
    const det::ToyDetector model = load_model(cfg);
    const interv::FeatureSpaceConfig fc = feature_space_config(cfg);

    ordered_json doc;
    for (const std::string& domain : {cfg.synth.source_domain, cfg.synth.target_domain}) {
        const Dataset data = load_split(cfg, domain + "_val");
        const interv::Q1FeatureResult r =
            interv::run_q1_feature_space(model, data, DomainId{domain}, fc);
        r.store.save(cfg.paths.features_dir(domain));

        const std::vector<PairRow> rows = pair_rows(r.store, cfg);
        ordered_json jd;
        jd["domain"] = domain;
        jd["skipped"] = ordered_json{{"bg_undefined", r.store.skipped_bg_undefined},
                                     {"low_confidence", r.store.skipped_low_confidence},
                                     {"degenerate_cam", r.store.skipped_degenerate_cam}};
        jd["total_pairs"] = rows.size();
        int significant = 0;
        std::vector<std::vector<std::string>> csv = {{"fg", "bg", "tp", "drops", "drop_rate",
                                                      "wilcoxon_p", "significant", "low_support"}};
        for (const auto& row : rows) {
            ordered_json jp;
            jp["fg"] = data.label_space.fg_classes[static_cast<size_t>(row.fg)];
            jp["bg"] = data.label_space.bg_labels[static_cast<size_t>(row.bg)];
            jp["tp"] = row.stats.tp;
            jp["drops"] = row.stats.drops;
            jp["drop_rate"] = row.stats.drop_rate();
            jp["wilcoxon_p"] = row.p;
            jp["significant"] = row.significant;
            jp["low_support"] = row.stats.low_support;
            ordered_json trials = ordered_json::array();
            for (const auto& t : row.stats.per_trial)
                trials.push_back(ordered_json{{"tp", t.tp}, {"drops", t.drops}});
            jp["per_trial"] = std::move(trials);
            jd["pairs"].push_back(std::move(jp));
            significant += row.significant;
            csv.push_back({data.label_space.fg_classes[static_cast<size_t>(row.fg)],
                           data.label_space.bg_labels[static_cast<size_t>(row.bg)],
                           std::to_string(row.stats.tp), std::to_string(row.stats.drops),
                           fixed(row.stats.drop_rate()), fixed(row.p, 6),
                           row.significant ? "yes" : "no", row.stats.low_support ? "yes" : "no"});
        }
        jd["significant_pairs"] = significant;
        ordered_json jtrials = ordered_json::array();
        for (const auto& tr : r.trials) {
            ordered_json jt;
            jt["trial"] = tr.trial;
            jt["pairs"] = ordered_json::array();
            for (const auto& [key, tp] : tr.pair_tp) {
                const int drops = tr.pair_drops.at(key);
                jt["pairs"].push_back(ordered_json{
                    {"fg", data.label_space.fg_classes[static_cast<size_t>(key.first)]},
                    {"bg", data.label_space.bg_labels[static_cast<size_t>(key.second)]},
                    {"tp", tp},
                    {"drops", drops},
                    {"drop_rate", tp > 0 ? static_cast<double>(drops) / tp : 0.0}});
            }
            jtrials.push_back(std::move(jt));
        }
        jd["trials"] = std::move(jtrials);
        jd["events"] = events_json(r.events);
        doc["domains"].push_back(std::move(jd));
        write_text(cfg.paths.experiments_dir() + "/q1_feature_" + domain + ".csv",
                   report::to_csv(csv));
        std::cout << "q1-feature: " << domain << " " << significant << "/" << rows.size()
                  << " significant pairs, " << r.events.size() << " drop events\n";
    }
    write_json(cfg.paths.experiments_dir() + "/q1_feature.json", doc);
}

// --- q2 ------------------------------------------------------------------------

void cmd_q2_cam(const RunConfig& cfg) {
    const det::ToyDetector model = load_model(cfg);
    const std::string domain = cfg.synth.source_domain;
    const Dataset data = load_split(cfg, domain + "_val");

    std::optional<assoc::FeatureStore> store;
    if (fs::exists(fs::path(cfg.paths.features_dir(domain)) / "index.json"))
        store = assoc::FeatureStore::load(cfg.paths.features_dir(domain));

    interv::Q2Config qc;
    qc.layer = cfg.experiments.layer;
    qc.bins = cfg.experiments.bins;
    qc.match_iou = cfg.experiments.match_iou;
    qc.predict = cfg.predict_options();
    qc.cam.n_samples = cfg.experiments.cam_samples;
    qc.cam.noise_sigma = cfg.experiments.cam_noise_sigma;
    qc.cam.confidence_floor = cfg.experiments.cam_confidence;
    qc.cam.seed = cfg.seed;
    qc.hit_bin = cfg.experiments.hit_bin;
    qc.seed = cfg.seed;
    qc.jobs = cfg.jobs;
    const interv::Q2Result r =
        interv::run_q2_cam_bins(model, data, qc, store ? &*store : nullptr);
    if (r.confident_instances == 0)
        std::cout << "q2-cam: warning: no instance above the confidence floor\n";

    ordered_json doc;
    doc["domain"] = domain;
    doc["layer"] = qc.layer;
    doc["confident_instances"] = r.confident_instances;
    for (size_t k = 0; k < r.bins.size(); ++k)
        doc["bins"].push_back(ordered_json{{"bin", r.bins[k]},
                                           {"instances", r.instances_per_bin[k]},
                                           {"drops", r.drops_per_bin[k]},
                                           {"drop_rate", r.drop_rate_per_bin[k]}});
    doc["events"] = events_json(r.events);

    // drop rate per rung, the reported rungs as columns
    std::vector<std::vector<std::string>> bins_csv;
    std::vector<std::string> head = {"dataset"};
    std::vector<std::string> row = {domain};
    for (int b : cfg.experiments.report_bins) {
        head.push_back("B" + std::to_string(b));
        for (size_t k = 0; k < r.bins.size(); ++k)
            if (r.bins[k] == b) row.push_back(fixed(r.drop_rate_per_bin[k], 2));
    }
    bins_csv.push_back(head);
    bins_csv.push_back(row);
    write_text(cfg.paths.experiments_dir() + "/q2_bins.csv", report::to_csv(bins_csv));

    // hit ratios per layer, associated / non-associated
    std::vector<std::vector<std::string>> hit_csv = {{"layer", "fg_mean_assoc", "bg_mean_assoc",
                                                      "fg_mean_noassoc", "bg_mean_noassoc",
                                                      "fg_mean_all", "bg_mean_all"}};
    for (const auto& h : r.hit_ratios) {
        ordered_json jh;
        jh["layer"] = h.layer;
        jh["n_assoc"] = h.n_assoc;
        jh["n_noassoc"] = h.n_noassoc;
        jh["fg_mean_assoc"] = h.fg_assoc;
        jh["bg_mean_assoc"] = h.bg_assoc;
        jh["fg_mean_noassoc"] = h.fg_noassoc;
        jh["bg_mean_noassoc"] = h.bg_noassoc;
        jh["fg_mean_all"] = h.fg_all;
        jh["bg_mean_all"] = h.bg_all;
        doc["hit_ratios"].push_back(std::move(jh));
        hit_csv.push_back({h.layer, fixed(h.fg_assoc, 2), fixed(h.bg_assoc, 2),
                           fixed(h.fg_noassoc, 2), fixed(h.bg_noassoc, 2), fixed(h.fg_all, 2),
                           fixed(h.bg_all, 2)});
    }
    write_text(cfg.paths.experiments_dir() + "/q2_hit_ratio.csv", report::to_csv(hit_csv));
    write_json(cfg.paths.experiments_dir() + "/q2_cam.json", doc);

    // optional CAM exports for visual inspection / external embedding
    if (cfg.experiments.dump_cams > 0) {
        const cam::SmoothGradCamPP engine(model);
        cam::SmoothConfig sc = qc.cam;
        int dumped = 0;
        const std::string cam_dir = cfg.paths.experiments_dir() + "/cams";
        fs::create_directories(cam_dir);
        for (const auto& rec : data.images) {
            if (dumped >= cfg.experiments.dump_cams) break;
            const auto matched = det::match_detections(model.predict(rec.pixels, {}, qc.predict),
                                                       rec.instances, qc.match_iou);
            for (const auto& d : matched) {
                if (dumped >= cfg.experiments.dump_cams) break;
                if (!d.matched_gt || d.confidence < sc.confidence_floor) continue;
                try {
                    const cam::CamMap m = engine.compute(rec.pixels, d, qc.layer, sc);
                    const std::string stem =
                        cam_dir + "/" + rec.id + "_" + std::to_string(*d.matched_gt);
                    FeatureTensor t;
                    t.layer = qc.layer;
                    t.dims = {1, static_cast<std::uint32_t>(m.height),
                              static_cast<std::uint32_t>(m.width)};
                    t.data = m.heat;
                    t.provenance = {rec.id, std::to_string(*d.matched_gt), domain, "cam"};
                    io::write_tensor(t, stem + ".cbt");
                    report::write_cam_png(stem + ".png", m.heat, m.width, m.height);
                    ++dumped;
                } catch (const numeric_error&) {
                    continue;
                }
            }
        }
        std::cout << "q2-cam: dumped " << dumped << " cam maps\n";
    }

    std::cout << "q2-cam: " << r.confident_instances << " confident instances";
    for (size_t k = 0; k < r.bins.size(); ++k)
        if (r.bins[k] == 1 || r.bins[k] == 9)
            std::cout << ", bin" << r.bins[k] << " drop " << fixed(r.drop_rate_per_bin[k], 3);
    std::cout << "\n";
}

// --- q3 ------------------------------------------------------------------------

namespace {

struct StorePair {
    assoc::FeatureStore source;
    assoc::FeatureStore target;
};

StorePair load_stores(const RunConfig& cfg) {
    return {assoc::FeatureStore::load(cfg.paths.features_dir(cfg.synth.source_domain)),
            assoc::FeatureStore::load(cfg.paths.features_dir(cfg.synth.target_domain))};
}

// Pairs entering the Q3 analyses: FG-BG associations in common across the
// two domains, i.e. pairs whose drop is significant under the reporting rule
// in the source and in the target domain.
std::vector<std::pair<int, int>> supported_pairs(const StorePair& stores, const RunConfig& cfg) {
    std::set<std::pair<int, int>> target_sig;
    for (const auto& row : pair_rows(stores.target, cfg))
        if (row.significant) target_sig.insert({row.fg, row.bg});
    std::vector<std::pair<int, int>> out;
    for (const auto& row : pair_rows(stores.source, cfg))
        if (row.significant && target_sig.count({row.fg, row.bg}))
            out.emplace_back(row.fg, row.bg);
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

void cmd_q3_gradient(const RunConfig& cfg) {
    const StorePair stores = load_stores(cfg);
    const auto pairs = supported_pairs(stores, cfg);
    const int n_trials = static_cast<int>(stores.source.trial_images.size());

    ordered_json doc;
    doc["headline_layer"] = cfg.experiments.headline_layer;
    std::vector<std::vector<std::string>> csv = {
        {"fg", "bg", "layer", "case", "p", "n_trials_used", "degenerate_excluded",
         "median_gradient_source", "median_gradient_target"}};
    int finite_pairs = 0;
    std::map<std::string, int> case_counts = {{"C1", 0}, {"C2", 0}, {"C3", 0}};

    for (const auto& [fg, bg] : pairs) {
        ordered_json jp;
        jp["fg"] = stores.source.fg_names[static_cast<size_t>(fg)];
        jp["bg"] = stores.source.bg_names[static_cast<size_t>(bg)];
        bool headline_finite = false;

        for (const std::string& layer : stores.source.layers) {
            std::vector<double> grad_s, grad_t;
            int degenerate = 0, missing = 0;
            for (int t = 0; t < n_trials; ++t) {
                std::optional<double> gs, gt;
                for (const auto* store : {&stores.source, &stores.target}) {
                    const auto drop = store->trial_drop_rate(fg, bg, t);
                    if (!drop) {
                        ++missing;
                        break;
                    }
                    const assoc::AssociationPartition part = store->pair_partition(fg, bg, t);
                    if (part.f_a.empty() || part.f_na.empty()) {
                        ++missing;
                        break;
                    }
                    const metrics::ContextMmds mm = metrics::context_mmds(
                        assoc::stack_features(part.f_na, layer),
                        assoc::stack_features(part.f_a, layer));
                    const metrics::GradientValue g = metrics::association_gradient(*drop, mm);
                    if (g.degenerate) {
                        ++degenerate;
                        break;
                    }
                    (store == &stores.source ? gs : gt) = g.gradient;
                }
                if (gs && gt) {
                    grad_s.push_back(*gs);
                    grad_t.push_back(*gt);
                }
            }

            ordered_json jl;
            jl["layer"] = layer;
            jl["gradient_source"] = grad_s;
            jl["gradient_target"] = grad_t;
            jl["degenerate_excluded"] = degenerate;
            jl["trials_missing_support"] = missing;
            std::string case_name = "C3";
            double p_used = 1.0;
            if (grad_s.size() >= 2) {
                const stats::CaseLabel c = stats::classify_case(grad_s, grad_t, cfg.alpha,
                                                                cfg.experiments.force_test);
                case_name = stats::case_name(c.label);
                p_used = c.test.p_value;
                jl["test"] = c.test.test;
                jl["note"] = c.direction_note;
            } else {
                jl["note"] = "insufficient paired trials";
            }
            jl["case"] = case_name;
            jl["p"] = p_used;

            if (layer == cfg.experiments.headline_layer) {
                headline_finite = !grad_s.empty();
                jp["headline_case"] = case_name;
                jp["headline_p"] = p_used;
                ++case_counts[case_name];
                auto median = [](std::vector<double> v) {
                    if (v.empty()) return 0.0;
                    std::sort(v.begin(), v.end());
                    const size_t n = v.size();
                    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
                };
                csv.push_back({stores.source.fg_names[static_cast<size_t>(fg)],
                               stores.source.bg_names[static_cast<size_t>(bg)], layer, case_name,
                               fixed(p_used, 6), std::to_string(grad_s.size()),
                               std::to_string(degenerate), fixed(median(grad_s), 6),
                               fixed(median(grad_t), 6)});
            }
            jp["layers"].push_back(std::move(jl));
        }
        if (headline_finite) ++finite_pairs;
        jp["finite"] = headline_finite;
        doc["pairs"].push_back(std::move(jp));
    }

    doc["supported_pairs"] = pairs.size();
    doc["finite_pairs"] = finite_pairs;
    doc["finite_fraction"] =
        pairs.empty() ? 0.0 : static_cast<double>(finite_pairs) / static_cast<double>(pairs.size());
    doc["cases"] = ordered_json{{"C1", case_counts["C1"]},
                                {"C2", case_counts["C2"]},
                                {"C3", case_counts["C3"]}};
    write_json(cfg.paths.experiments_dir() + "/q3_gradient.json", doc);
    write_text(cfg.paths.experiments_dir() + "/q3_gradient.csv", report::to_csv(csv));
    std::cout << "q3-gradient: " << pairs.size() << " supported pairs, finite "
              << finite_pairs << ", C1/C2/C3 = " << case_counts["C1"] << "/"
              << case_counts["C2"] << "/" << case_counts["C3"] << "\n";
}

void cmd_q3_crossdomain(const RunConfig& cfg) {
    const StorePair stores = load_stores(cfg);
    const auto pairs = supported_pairs(stores, cfg);
    const int n_trials = static_cast<int>(stores.source.trial_images.size());
    const std::string& layer = cfg.experiments.headline_layer;

    ordered_json doc;
    doc["layer"] = layer;
    std::vector<std::vector<std::string>> csv = {
        {"fg", "bg", "case", "p", "n_trials_used", "median_sum_aa", "median_sum_nana"}};
    std::map<std::string, int> case_counts = {{"C1", 0}, {"C2", 0}, {"C3", 0}};

    for (const auto& [fg, bg] : pairs) {
        std::vector<double> sum_aa, sum_nana;
        int excluded = 0;
        ordered_json per_trial = ordered_json::array();
        for (int t = 0; t < n_trials; ++t) {
            const assoc::AssociationPartition ps = stores.source.pair_partition(fg, bg, t);
            const assoc::AssociationPartition pt = stores.target.pair_partition(fg, bg, t);
            if (ps.f_a.empty() || pt.f_a.empty() || ps.f_na.empty() || pt.f_na.empty()) {
                ++excluded;
                continue;
            }
            const std::uint64_t seed_s = derive_seed(
                cfg.seed, "bal:" + std::to_string(fg) + ":" + std::to_string(bg) + ":s",
                static_cast<std::uint64_t>(t));
            const std::uint64_t seed_t = derive_seed(
                cfg.seed, "bal:" + std::to_string(fg) + ":" + std::to_string(bg) + ":t",
                static_cast<std::uint64_t>(t));
            const assoc::BalancedSample na_s = assoc::balance_sample(ps.f_a, ps.f_na, seed_s);
            const assoc::BalancedSample na_t = assoc::balance_sample(pt.f_a, pt.f_na, seed_t);
            if (na_s.records.empty() || na_t.records.empty()) {
                ++excluded;
                continue;
            }
            const metrics::CrossDomainSums s = metrics::cross_domain_sums(
                assoc::stack_features(ps.f_a, layer), assoc::stack_features(pt.f_a, layer),
                assoc::stack_features(na_s.records, layer),
                assoc::stack_features(na_t.records, layer));
            sum_aa.push_back(s.sum_aa);
            sum_nana.push_back(s.sum_nana);
            per_trial.push_back(ordered_json{{"trial", t + 1},
                                             {"sum_aa", s.sum_aa},
                                             {"sum_nana", s.sum_nana},
                                             {"f2b_asso", s.f2b_asso},
                                             {"b2f_asso", s.b2f_asso},
                                             {"f2b_noasso", s.f2b_noasso},
                                             {"b2f_noasso", s.b2f_noasso}});
        }

        ordered_json jp;
        jp["fg"] = stores.source.fg_names[static_cast<size_t>(fg)];
        jp["bg"] = stores.source.bg_names[static_cast<size_t>(bg)];
        jp["per_trial"] = std::move(per_trial);
        jp["trials_excluded"] = excluded;
        std::string case_name = "C3";
        double p_used = 1.0;
        if (sum_aa.size() >= 2) {
            const stats::CaseLabel c =
                stats::classify_case(sum_aa, sum_nana, cfg.alpha, cfg.experiments.force_test);
            case_name = stats::case_name(c.label);
            p_used = c.test.p_value;
            jp["test"] = c.test.test;
            jp["note"] = c.direction_note;
        } else {
            jp["note"] = "insufficient paired trials";
        }
        jp["case"] = case_name;
        jp["p"] = p_used;
        ++case_counts[case_name];
        doc["pairs"].push_back(std::move(jp));

        auto median = [](std::vector<double> v) {
            if (v.empty()) return 0.0;
            std::sort(v.begin(), v.end());
            const size_t n = v.size();
            return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
        };
        csv.push_back({stores.source.fg_names[static_cast<size_t>(fg)],
                       stores.source.bg_names[static_cast<size_t>(bg)], case_name,
                       fixed(p_used, 6), std::to_string(sum_aa.size()), fixed(median(sum_aa), 6),
                       fixed(median(sum_nana), 6)});
    }

    doc["cases"] = ordered_json{{"C1", case_counts["C1"]},
                                {"C2", case_counts["C2"]},
                                {"C3", case_counts["C3"]}};
    write_json(cfg.paths.experiments_dir() + "/q3_crossdomain.json", doc);
    write_text(cfg.paths.experiments_dir() + "/q3_crossdomain.csv", report::to_csv(csv));
    std::cout << "q3-crossdomain: C1/C2/C3 = " << case_counts["C1"] << "/" << case_counts["C2"]
              << "/" << case_counts["C3"] << "\n";
}

// --- report ----------------------------------------------------------------------

void cmd_report(const RunConfig& cfg) {
    const auto started = std::chrono::steady_clock::now();
    const std::string exp = cfg.paths.experiments_dir();
    ordered_json sections;
    int found = 0;
    for (const char* name : {"eval", "q1_image", "q1_feature", "q2_cam", "q3_gradient",
                             "q3_crossdomain"}) {
        const std::string path = exp + "/" + name + ".json";
        if (!fs::exists(path)) continue;
        sections[name] = read_json_file(path);
        ++found;
    }
    if (found == 0)
        throw pipeline_error("report: no experiment sections under " + exp +
                             " (run at least one experiment command first)");

    const std::string out = cfg.paths.report_dir();
    fs::create_directories(out);

    // plots
    if (sections.contains("q3_gradient")) {
        std::vector<report::BoxGroup> groups;
        for (const auto& jp : sections["q3_gradient"]["pairs"]) {
            for (const auto& jl : jp["layers"]) {
                if (jl["layer"] != cfg.experiments.headline_layer) continue;
                report::BoxGroup g;
                g.label = jp["fg"].get<std::string>() + "/" + jp["bg"].get<std::string>();
                g.a_samples = jl["gradient_source"].get<std::vector<double>>();
                g.b_samples = jl["gradient_target"].get<std::vector<double>>();
                g.stars = report::stars_for_p(jl["p"].get<double>());
                if (!g.a_samples.empty()) groups.push_back(std::move(g));
            }
        }
        if (!groups.empty())
            write_text(out + "/gradients_boxplot.svg",
                       report::svg_paired_boxplot("Domain association gradients", "source",
                                                  "target", groups));
    }
    if (sections.contains("q3_crossdomain")) {
        std::vector<report::BoxGroup> groups;
        for (const auto& jp : sections["q3_crossdomain"]["pairs"]) {
            report::BoxGroup g;
            g.label = jp["fg"].get<std::string>() + "/" + jp["bg"].get<std::string>();
            for (const auto& jt : jp["per_trial"]) {
                g.a_samples.push_back(jt["sum_aa"].get<double>());
                g.b_samples.push_back(jt["sum_nana"].get<double>());
            }
            g.stars = report::stars_for_p(jp["p"].get<double>());
            if (!g.a_samples.empty()) groups.push_back(std::move(g));
        }
        if (!groups.empty())
            write_text(out + "/crossdomain_boxplot.svg",
                       report::svg_paired_boxplot("Cross-domain association sums", "sum_aa",
                                                  "sum_nana", groups));
    }
    if (sections.contains("q1_feature")) {
        for (const auto& jd : sections["q1_feature"]["domains"]) {
            std::vector<report::PairEdge> edges;
            std::set<std::string> fg_set, bg_set;
            for (const auto& jp : jd["pairs"]) {
                report::PairEdge e;
                e.fg = jp["fg"].get<std::string>();
                e.bg = jp["bg"].get<std::string>();
                e.weight = jp["drop_rate"].get<double>();
                e.significant = jp["significant"].get<bool>();
                fg_set.insert(e.fg);
                bg_set.insert(e.bg);
                edges.push_back(std::move(e));
            }
            const std::string domain = jd["domain"].get<std::string>();
            write_text(out + "/pair_graph_" + domain + ".svg",
                       report::svg_pair_graph("Drop-rate pairs (" + domain + ")",
                                              {fg_set.begin(), fg_set.end()},
                                              {bg_set.begin(), bg_set.end()}, edges));
        }
    }

    // copy csv mirrors next to the consolidated report
    for (const auto& entry : fs::directory_iterator(exp))
        if (entry.path().extension() == ".csv")
            fs::copy_file(entry.path(), fs::path(out) / entry.path().filename(),
                          fs::copy_options::overwrite_existing);

    ordered_json doc;
    {
        // config echo via the canonical writer
        const std::string tmp = out + "/config_echo.json";
        write_config(cfg, tmp);
        doc["config"] = read_json_file(tmp);
    }
    doc["environment"] = ordered_json{{"compiler", __VERSION__},
                                      {"kernels", kern::active_name()},
                                      {"vector_isa_available",
                                       kern::avx2_kernels() != nullptr ? "avx2" : "none"}};
    doc["sections"] = std::move(sections);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    doc["timestamp"] = ordered_json{
        {"generated_at_unix",
         std::chrono::duration_cast<std::chrono::seconds>(
             std::chrono::system_clock::now().time_since_epoch())
             .count()},
        {"wall_clock_s", wall}};
    write_json(out + "/report.json", doc);
    std::cout << "report: wrote " << out << "/report.json with " << found << " sections\n";
}

}  // namespace ctxbias::pipeline
