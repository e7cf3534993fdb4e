#include "ctxbias/pipeline/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

using nlohmann::json;
using nlohmann::ordered_json;

namespace ctxbias::pipeline {

RunConfig default_config() {
    RunConfig cfg;
    cfg.scene.image_size = 64;
    cfg.scene.fg_classes = {{"disc", synth::ShapeKind::disc, 10, 16},
                            {"triangle", synth::ShapeKind::triangle, 10, 16},
                            {"cross", synth::ShapeKind::cross, 10, 16}};
    cfg.scene.bg_labels = {{"stripes", synth::TextureKind::stripes},
                           {"dots", synth::TextureKind::dots},
                           {"checker", synth::TextureKind::checker},
                           {"flat", synth::TextureKind::flat}};
    const std::vector<double> uniform = {0.25, 0.25, 0.25, 0.25};
    const std::vector<double> planted = {0.95, 1.0 / 60, 1.0 / 60, 1.0 / 60};
    cfg.scene.association_table["source"] = {uniform, planted, uniform};
    cfg.scene.association_table["target"] = {uniform, planted, uniform};
    cfg.scene.perturbations["target"] = {12.0, 0.5};
    cfg.scene.noise_sigma = 14.0;
    cfg.scene.fg_level = 160;
    for (auto& f : cfg.scene.fg_classes) {
        f.min_size = 9;
        f.max_size = 14;
    }
    cfg.scene.seed = cfg.seed;

    cfg.model.image_size = 64;
    cfg.model.num_classes = 3;
    cfg.model.channels = {16, 32, 48, 64};

    cfg.train.epochs = 30;
    cfg.train.batch_size = 8;
    cfg.train.learning_rate = 1e-3;
    return cfg;
}

namespace {

void require_keys(const json& j, const std::set<std::string>& allowed,
                  const std::string& where) {
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw config_error("config: unknown key '" + key + "' in " + where);
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig parse_config_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw config_error("config: invalid JSON: " + std::string(e.what()));
    }
    RunConfig cfg = default_config();

    require_keys(doc, {"seed", "jobs", "alpha", "out", "scene", "synth", "model", "train",
                       "select_by_domain", "experiments"},
                 "top level");
    maybe(doc, "seed", cfg.seed);
    maybe(doc, "jobs", cfg.jobs);
    maybe(doc, "alpha", cfg.alpha);
    if (doc.contains("out")) cfg.paths.out_root = doc.at("out").get<std::string>();
    maybe(doc, "select_by_domain", cfg.select_by_domain);
    if (cfg.jobs < 1) throw config_error("config: jobs must be >= 1");
    if (cfg.alpha <= 0.0 || cfg.alpha >= 1.0) throw config_error("config: alpha outside (0,1)");

    if (doc.contains("scene")) {
        const json& js = doc.at("scene");
        require_keys(js,
                     {"image_size", "fg_classes", "bg_labels", "association", "perturbations",
                      "min_objects", "max_objects", "noise_sigma", "fg_level"},
                     "scene");
        maybe(js, "image_size", cfg.scene.image_size);
        maybe(js, "min_objects", cfg.scene.min_objects);
        maybe(js, "max_objects", cfg.scene.max_objects);
        maybe(js, "noise_sigma", cfg.scene.noise_sigma);
        maybe(js, "fg_level", cfg.scene.fg_level);
        if (js.contains("fg_classes")) {
            cfg.scene.fg_classes.clear();
            for (const auto& jf : js.at("fg_classes")) {
                synth::FgClassSpec f;
                f.name = jf.at("name").get<std::string>();
                f.shape = synth::shape_from_name(jf.at("shape").get<std::string>());
                maybe(jf, "min_size", f.min_size);
                maybe(jf, "max_size", f.max_size);
                cfg.scene.fg_classes.push_back(std::move(f));
            }
        }
        if (js.contains("bg_labels")) {
            cfg.scene.bg_labels.clear();
            for (const auto& jb : js.at("bg_labels")) {
                synth::BgLabelSpec b;
                b.name = jb.at("name").get<std::string>();
                b.texture = synth::texture_from_name(jb.at("texture").get<std::string>());
                cfg.scene.bg_labels.push_back(std::move(b));
            }
        }
        if (js.contains("association")) {
            cfg.scene.association_table.clear();
            for (const auto& [domain, rows] : js.at("association").items())
                cfg.scene.association_table[domain] =
                    rows.get<std::vector<std::vector<double>>>();
        }
        if (js.contains("perturbations")) {
            cfg.scene.perturbations.clear();
            for (const auto& [domain, jp] : js.at("perturbations").items()) {
                synth::DomainPerturb p;
                maybe(jp, "brightness_shift", p.brightness_shift);
                maybe(jp, "texture_swap_prob", p.texture_swap_prob);
                cfg.scene.perturbations[domain] = p;
            }
        }
    }

    if (doc.contains("synth")) {
        const json& js = doc.at("synth");
        require_keys(js, {"train_images", "val_images", "bg_pool_images", "source_domain",
                          "target_domain"},
                     "synth");
        maybe(js, "train_images", cfg.synth.train_images);
        maybe(js, "val_images", cfg.synth.val_images);
        maybe(js, "bg_pool_images", cfg.synth.bg_pool_images);
        maybe(js, "source_domain", cfg.synth.source_domain);
        maybe(js, "target_domain", cfg.synth.target_domain);
        if (cfg.synth.train_images < 1 || cfg.synth.val_images < 1)
            throw config_error("config: synth image counts must be >= 1");
    }

    if (doc.contains("model")) {
        const json& jm = doc.at("model");
        require_keys(jm, {"channels", "base_box"}, "model");
        if (jm.contains("channels")) {
            const auto ch = jm.at("channels").get<std::vector<int>>();
            if (ch.size() != 4) throw config_error("config: model.channels needs 4 entries");
            for (size_t i = 0; i < 4; ++i) cfg.model.channels[i] = ch[i];
        }
        maybe(jm, "base_box", cfg.model.base_box);
    }
    cfg.model.image_size = cfg.scene.image_size;
    cfg.model.num_classes = static_cast<int>(cfg.scene.fg_classes.size());

    if (doc.contains("train")) {
        const json& jt = doc.at("train");
        require_keys(jt,
                     {"epochs", "batch_size", "learning_rate", "flip", "color_jitter",
                      "resize_crop", "eval_every", "pos_obj_weight", "box_weight"},
                     "train");
        maybe(jt, "epochs", cfg.train.epochs);
        maybe(jt, "batch_size", cfg.train.batch_size);
        maybe(jt, "learning_rate", cfg.train.learning_rate);
        maybe(jt, "flip", cfg.train.flip);
        maybe(jt, "color_jitter", cfg.train.color_jitter);
        maybe(jt, "resize_crop", cfg.train.resize_crop);
        maybe(jt, "eval_every", cfg.train.eval_every);
        maybe(jt, "pos_obj_weight", cfg.train.pos_obj_weight);
        maybe(jt, "box_weight", cfg.train.box_weight);
        cfg.train.validate();
    }

    if (doc.contains("experiments")) {
        const json& je = doc.at("experiments");
        require_keys(je,
                     {"layer", "headline_layer", "n_trials", "trial_fraction", "score_threshold",
                      "nms_iou", "match_iou", "cam_samples", "cam_noise_sigma", "cam_confidence",
                      "feature_bin", "bins", "report_bins", "hit_bin", "min_drop_rate", "holm",
                      "force_test", "dump_cams"},
                     "experiments");
        auto& e = cfg.experiments;
        maybe(je, "layer", e.layer);
        maybe(je, "headline_layer", e.headline_layer);
        maybe(je, "n_trials", e.n_trials);
        maybe(je, "trial_fraction", e.trial_fraction);
        maybe(je, "score_threshold", e.score_threshold);
        maybe(je, "nms_iou", e.nms_iou);
        maybe(je, "match_iou", e.match_iou);
        maybe(je, "cam_samples", e.cam_samples);
        maybe(je, "cam_noise_sigma", e.cam_noise_sigma);
        maybe(je, "cam_confidence", e.cam_confidence);
        maybe(je, "feature_bin", e.feature_bin);
        maybe(je, "bins", e.bins);
        maybe(je, "report_bins", e.report_bins);
        maybe(je, "hit_bin", e.hit_bin);
        maybe(je, "min_drop_rate", e.min_drop_rate);
        maybe(je, "holm", e.holm);
        maybe(je, "dump_cams", e.dump_cams);
        if (je.contains("force_test")) {
            const std::string f = je.at("force_test").get<std::string>();
            if (f == "wilcoxon") e.force_test = stats::ForcedTest::wilcoxon;
            else if (f == "ttest") e.force_test = stats::ForcedTest::ttest;
            else if (f.empty() || f == "auto") e.force_test = stats::ForcedTest::none;
            else throw config_error("config: force_test must be wilcoxon, ttest or auto");
        }
        if (e.n_trials < 1) throw config_error("config: n_trials must be >= 1");
        if (e.trial_fraction <= 0.0 || e.trial_fraction > 1.0)
            throw config_error("config: trial_fraction outside (0,1]");
        if (e.feature_bin < 1 || e.feature_bin > 9 || e.hit_bin < 1 || e.hit_bin > 9)
            throw config_error("config: bin indices must lie in 1..9");
    }

    cfg.scene.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    cfg.scene.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config_json(text);
}

void write_config(const RunConfig& cfg, const std::string& path) {
    ordered_json doc;
    doc["seed"] = cfg.seed;
    doc["jobs"] = cfg.jobs;
    doc["alpha"] = cfg.alpha;
    doc["out"] = cfg.paths.out_root;
    doc["select_by_domain"] = cfg.select_by_domain;

    ordered_json js;
    js["image_size"] = cfg.scene.image_size;
    js["fg_classes"] = ordered_json::array();
    for (const auto& f : cfg.scene.fg_classes) {
        const char* shapes[] = {"disc", "triangle", "cross", "square"};
        js["fg_classes"].push_back(ordered_json{{"name", f.name},
                                                {"shape", shapes[static_cast<int>(f.shape)]},
                                                {"min_size", f.min_size},
                                                {"max_size", f.max_size}});
    }
    js["bg_labels"] = ordered_json::array();
    for (const auto& b : cfg.scene.bg_labels) {
        const char* textures[] = {"stripes", "dots", "checker", "flat"};
        js["bg_labels"].push_back(
            ordered_json{{"name", b.name}, {"texture", textures[static_cast<int>(b.texture)]}});
    }
    js["association"] = ordered_json::object();
    for (const auto& [domain, rows] : cfg.scene.association_table) js["association"][domain] = rows;
    js["perturbations"] = ordered_json::object();
    for (const auto& [domain, p] : cfg.scene.perturbations)
        js["perturbations"][domain] = ordered_json{{"brightness_shift", p.brightness_shift},
                                                   {"texture_swap_prob", p.texture_swap_prob}};
    js["min_objects"] = cfg.scene.min_objects;
    js["max_objects"] = cfg.scene.max_objects;
    js["noise_sigma"] = cfg.scene.noise_sigma;
    js["fg_level"] = cfg.scene.fg_level;
    doc["scene"] = std::move(js);

    doc["synth"] = ordered_json{{"train_images", cfg.synth.train_images},
                                {"val_images", cfg.synth.val_images},
                                {"bg_pool_images", cfg.synth.bg_pool_images},
                                {"source_domain", cfg.synth.source_domain},
                                {"target_domain", cfg.synth.target_domain}};
    doc["model"] = ordered_json{
        {"channels", cfg.model.channels},
        {"base_box", cfg.model.base_box}};
    doc["train"] = ordered_json{{"epochs", cfg.train.epochs},
                                {"batch_size", cfg.train.batch_size},
                                {"learning_rate", cfg.train.learning_rate},
                                {"flip", cfg.train.flip},
                                {"color_jitter", cfg.train.color_jitter},
                                {"resize_crop", cfg.train.resize_crop},
                                {"eval_every", cfg.train.eval_every},
                                {"pos_obj_weight", cfg.train.pos_obj_weight},
                                {"box_weight", cfg.train.box_weight}};
    const auto& e = cfg.experiments;
    const char* force =
        e.force_test == stats::ForcedTest::wilcoxon
            ? "wilcoxon"
            : (e.force_test == stats::ForcedTest::ttest ? "ttest" : "auto");
    doc["experiments"] = ordered_json{{"layer", e.layer},
                                      {"headline_layer", e.headline_layer},
                                      {"n_trials", e.n_trials},
                                      {"trial_fraction", e.trial_fraction},
                                      {"score_threshold", e.score_threshold},
                                      {"nms_iou", e.nms_iou},
                                      {"match_iou", e.match_iou},
                                      {"cam_samples", e.cam_samples},
                                      {"cam_noise_sigma", e.cam_noise_sigma},
                                      {"cam_confidence", e.cam_confidence},
                                      {"feature_bin", e.feature_bin},
                                      {"bins", e.bins},
                                      {"report_bins", e.report_bins},
                                      {"hit_bin", e.hit_bin},
                                      {"min_drop_rate", e.min_drop_rate},
                                      {"holm", e.holm},
                                      {"force_test", force},
                                      {"dump_cams", e.dump_cams}};

    std::ofstream f(path, std::ios::trunc);
    if (!f) throw load_error("config: cannot write " + path);
    f << doc.dump(2) << "\n";
}

}  // namespace ctxbias::pipeline
