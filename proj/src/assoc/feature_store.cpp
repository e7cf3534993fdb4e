#include "ctxbias/assoc/feature_store.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace ctxbias::assoc {

namespace {

std::string group_stem(const std::string& fg, const std::string& bg, const std::string& layer,
                       bool associated) {
    return fg + "__" + bg + "__" + layer + "__" + (associated ? "a" : "na");
}

}  // namespace

const PairStats* FeatureStore::find_pair(int fg, int bg) const {
    for (const auto& p : pair_stats)
        if (p.fg == fg && p.bg == bg) return &p;
    return nullptr;
}

AssociationPartition FeatureStore::pair_partition(int fg, int bg, std::optional<int> trial) const {
    std::set<std::string> allowed;
    if (trial) {
        if (*trial < 0 || static_cast<size_t>(*trial) >= trial_images.size())
            throw numeric_error("feature store: trial index out of range");
        allowed.insert(trial_images[static_cast<size_t>(*trial)].begin(),
                       trial_images[static_cast<size_t>(*trial)].end());
    }
    std::vector<OutcomeRecord> filtered;
    for (const auto& o : outcomes) {
        if (o.fg_class != fg || o.bg_label != bg) continue;
        if (trial && !allowed.count(o.image_id)) continue;
        filtered.push_back(o);
    }
    return partition(domain, filtered, features);
}

std::optional<double> FeatureStore::trial_drop_rate(int fg, int bg, int trial) const {
    const PairStats* p = find_pair(fg, bg);
    if (!p || trial < 0 || static_cast<size_t>(trial) >= p->per_trial.size()) return std::nullopt;
    const PairTrialStat& t = p->per_trial[static_cast<size_t>(trial)];
    if (t.tp == 0) return std::nullopt;
    return static_cast<double>(t.drops) / t.tp;
}

void FeatureStore::save(const std::string& dir) const {
    fs::create_directories(dir);
    ordered_json index;
    index["domain"] = domain;
    index["layers"] = layers;
    index["label_space"]["fg"] = fg_names;
    index["label_space"]["bg"] = bg_names;
    index["trials"] = trial_images;
    index["skipped"]["bg_undefined"] = skipped_bg_undefined;
    index["skipped"]["low_confidence"] = skipped_low_confidence;
    index["skipped"]["degenerate_cam"] = skipped_degenerate_cam;

    index["pairs"] = ordered_json::array();
    for (const auto& p : pair_stats) {
        ordered_json jp;
        jp["fg"] = fg_names.at(static_cast<size_t>(p.fg));
        jp["bg"] = bg_names.at(static_cast<size_t>(p.bg));
        jp["tp"] = p.tp;
        jp["drops"] = p.drops;
        jp["low_support"] = p.low_support;
        jp["per_trial"] = ordered_json::array();
        for (const auto& t : p.per_trial)
            jp["per_trial"].push_back(ordered_json{{"tp", t.tp}, {"drops", t.drops}});
        index["pairs"].push_back(std::move(jp));
    }

    index["outcomes"] = ordered_json::array();
    for (const auto& o : outcomes)
        index["outcomes"].push_back(ordered_json{{"image", o.image_id},
                                                 {"instance", o.instance_index},
                                                 {"fg", o.fg_class},
                                                 {"bg", o.bg_label},
                                                 {"dropped", o.dropped}});

    // feature matrices grouped by (pair, layer, associated-flag)
    index["groups"] = ordered_json::array();
    for (const auto& p : pair_stats) {
        for (const auto& layer : layers) {
            const AssociationPartition part = pair_partition(p.fg, p.bg, std::nullopt);
            for (const bool associated : {true, false}) {
                const auto& recs = associated ? part.f_a : part.f_na;
                if (recs.empty()) continue;
                const std::string stem = group_stem(fg_names.at(static_cast<size_t>(p.fg)),
                                                    bg_names.at(static_cast<size_t>(p.bg)), layer,
                                                    associated);
                const metrics::PartitionFeatures mats = stack_features(recs, layer);
                io::write_cbt((fs::path(dir) / (stem + "_f.cbt")).string(),
                              {static_cast<std::uint32_t>(mats.f_avg.rows),
                               static_cast<std::uint32_t>(mats.f_avg.dim)},
                              mats.f_avg.data.data());
                io::write_cbt((fs::path(dir) / (stem + "_b.cbt")).string(),
                              {static_cast<std::uint32_t>(mats.b_avg.rows),
                               static_cast<std::uint32_t>(mats.b_avg.dim)},
                              mats.b_avg.data.data());

                ordered_json jg;
                jg["fg"] = fg_names.at(static_cast<size_t>(p.fg));
                jg["bg"] = bg_names.at(static_cast<size_t>(p.bg));
                jg["layer"] = layer;
                jg["associated"] = associated;
                jg["f_file"] = stem + "_f.cbt";
                jg["b_file"] = stem + "_b.cbt";
                jg["rows"] = ordered_json::array();
                for (const auto& r : recs)
                    jg["rows"].push_back(ordered_json{{"image", r.image_id},
                                                      {"instance", r.instance_index},
                                                      {"confidence", r.features->confidence}});
                index["groups"].push_back(std::move(jg));
            }
        }
    }

    std::ofstream f(fs::path(dir) / "index.json", std::ios::trunc);
    if (!f) throw load_error("feature store: cannot write index in " + dir);
    f << index.dump(2) << "\n";
}

FeatureStore FeatureStore::load(const std::string& dir) {
    const fs::path index_path = fs::path(dir) / "index.json";
    std::ifstream f(index_path);
    if (!f)
        throw pipeline_error("feature store not found at " + dir +
                             " (run the q1-feature command first)");
    json index = json::parse(f, nullptr, true);

    FeatureStore s;
    s.domain = index.at("domain").get<std::string>();
    s.layers = index.at("layers").get<std::vector<std::string>>();
    s.fg_names = index.at("label_space").at("fg").get<std::vector<std::string>>();
    s.bg_names = index.at("label_space").at("bg").get<std::vector<std::string>>();
    s.trial_images = index.at("trials").get<std::vector<std::vector<std::string>>>();
    s.skipped_bg_undefined = index.at("skipped").at("bg_undefined").get<int>();
    s.skipped_low_confidence = index.at("skipped").at("low_confidence").get<int>();
    s.skipped_degenerate_cam = index.at("skipped").at("degenerate_cam").get<int>();

    auto fg_id = [&](const std::string& n) {
        for (size_t i = 0; i < s.fg_names.size(); ++i)
            if (s.fg_names[i] == n) return static_cast<int>(i);
        throw schema_error("feature store: unknown fg name " + n);
    };
    auto bg_id = [&](const std::string& n) {
        for (size_t i = 0; i < s.bg_names.size(); ++i)
            if (s.bg_names[i] == n) return static_cast<int>(i);
        throw schema_error("feature store: unknown bg name " + n);
    };

    for (const auto& jp : index.at("pairs")) {
        PairStats p;
        p.fg = fg_id(jp.at("fg").get<std::string>());
        p.bg = bg_id(jp.at("bg").get<std::string>());
        p.tp = jp.at("tp").get<int>();
        p.drops = jp.at("drops").get<int>();
        p.low_support = jp.at("low_support").get<bool>();
        for (const auto& jt : jp.at("per_trial"))
            p.per_trial.push_back({jt.at("tp").get<int>(), jt.at("drops").get<int>()});
        s.pair_stats.push_back(std::move(p));
    }

    for (const auto& jo : index.at("outcomes")) {
        OutcomeRecord o;
        o.image_id = jo.at("image").get<std::string>();
        o.instance_index = jo.at("instance").get<int>();
        o.fg_class = jo.at("fg").get<int>();
        o.bg_label = jo.at("bg").get<int>();
        o.dropped = jo.at("dropped").get<bool>();
        s.outcomes.push_back(std::move(o));
    }

    // rebuild instance feature bundles from the grouped matrices
    std::map<std::pair<std::string, int>, InstanceFeatures> bundles;
    for (const auto& jg : index.at("groups")) {
        const std::string layer = jg.at("layer").get<std::string>();
        const int fg = fg_id(jg.at("fg").get<std::string>());
        const auto fm = io::read_cbt((fs::path(dir) / jg.at("f_file").get<std::string>()).string());
        const auto bm = io::read_cbt((fs::path(dir) / jg.at("b_file").get<std::string>()).string());
        if (fm.dims.size() != 2 || bm.dims.size() != 2)
            throw schema_error("feature store: group matrices must be rank 2");
        const size_t n = fm.dims[0], d = fm.dims[1];
        size_t row = 0;
        for (const auto& jr : jg.at("rows")) {
            if (row >= n) throw schema_error("feature store: row count mismatch");
            const std::string image = jr.at("image").get<std::string>();
            const int instance = jr.at("instance").get<int>();
            InstanceFeatures& bundle = bundles[{image, instance}];
            bundle.image_id = image;
            bundle.instance_index = instance;
            bundle.fg_class = fg;
            bundle.confidence = jr.at("confidence").get<double>();
            std::vector<float> fv(fm.data.begin() + static_cast<std::ptrdiff_t>(row * d),
                                  fm.data.begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
            std::vector<float> bv(bm.data.begin() + static_cast<std::ptrdiff_t>(row * d),
                                  bm.data.begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
            bundle.per_layer[layer] = {std::move(fv), std::move(bv)};
            ++row;
        }
    }
    s.features.reserve(bundles.size());
    for (auto& [key, bundle] : bundles) s.features.push_back(std::move(bundle));
    return s;
}

}  // namespace ctxbias::assoc
