#include "ctxbias/interventions/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "ctxbias/core/parallel.hpp"
#include "ctxbias/core/png.hpp"
#include "ctxbias/core/rng.hpp"
#include "ctxbias/detector/eval.hpp"
#include "ctxbias/kernels/kernels.hpp"

namespace fs = std::filesystem;

namespace ctxbias::interv {

double loss_of_information(double iou_after) {
    if (iou_after < 0.0 || iou_after > 1.0)
        throw numeric_error("loss_of_information: iou outside [0,1]");
    return -std::log10(std::max(iou_after, 1e-12));
}

const char* drop_reason_name(DropReason r) {
    switch (r) {
        case DropReason::class_changed: return "class_changed";
        case DropReason::info_loss: return "info_loss";
        default: return "rematched";
    }
}

// --- compositing -------------------------------------------------------------

namespace {

ImageU8 resize_nearest(const ImageU8& src, int w, int h) {
    if (src.width == w && src.height == h) return src;
    ImageU8 out(w, h, src.channels);
    for (int y = 0; y < h; ++y) {
        const int sy = std::min(src.height - 1, y * src.height / h);
        for (int x = 0; x < w; ++x) {
            const int sx = std::min(src.width - 1, x * src.width / w);
            for (int c = 0; c < src.channels; ++c) out.set(x, y, c, src.at(sx, sy, c));
        }
    }
    return out;
}

}  // namespace

ImageU8 composite_background(const ImageU8& image,
                             const std::vector<InstanceAnnotation>& annotations,
                             const ImageU8& bg_image) {
    const ImageU8 bg = resize_nearest(bg_image, image.width, image.height);
    if (bg.channels != image.channels)
        throw format_error("composite_background: channel mismatch");

    Mask fg_union(image.width, image.height);
    for (const auto& ann : annotations)
        for (size_t i = 0; i < fg_union.bits.size(); ++i)
            fg_union.bits[i] |= ann.instance_mask.bits[i];

    ImageU8 out(image.width, image.height, image.channels);
    kern::active().composite(image.data.data(), bg.data.data(), fg_union.bits.data(),
                             image.width * image.height, image.channels, out.data.data());
    return out;
}

DirectoryBgPool::DirectoryBgPool(const std::string& dir) {
    if (!fs::is_directory(dir)) throw load_error("bg pool: not a directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") files_.push_back(e.path().string());
    std::sort(files_.begin(), files_.end());
    if (files_.empty()) throw load_error("bg pool: no .png files in " + dir);
}

ImageU8 DirectoryBgPool::get(size_t index) const { return png::read(files_.at(index)); }

// --- drop evaluation ---------------------------------------------------------

namespace {

struct PriorTp {
    int gt_index;
    int class_id;
    int cell_index;
    double confidence;
    double iou_before;
    DetectionRecord det;
};

std::vector<PriorTp> prior_true_positives(const std::vector<DetectionRecord>& matched) {
    std::vector<PriorTp> out;
    for (const auto& d : matched)
        if (d.matched_gt)
            out.push_back({*d.matched_gt, d.class_id, d.cell_index, d.confidence,
                           *d.iou_with_match, d});
    std::sort(out.begin(), out.end(),
              [](const PriorTp& a, const PriorTp& b) { return a.gt_index < b.gt_index; });
    return out;
}

// The three-condition drop test for one prior true positive against the
// re-matched post-intervention detections.
std::optional<DropEvent> evaluate_drop(const std::vector<DetectionRecord>& mod_matched,
                                       const std::vector<InstanceAnnotation>& anns,
                                       const PriorTp& tp, double match_iou) {
    const InstanceAnnotation& g = anns[static_cast<size_t>(tp.gt_index)];

    double iou_same = 0.0;
    const DetectionRecord* best_same = nullptr;
    double iou_any = 0.0;
    const DetectionRecord* best_any = nullptr;
    for (const auto& d : mod_matched) {
        const double v = iou(d.bbox, g.bbox);
        if (v > iou_any) {
            iou_any = v;
            best_any = &d;
        }
        if (d.class_id == g.class_id && v > iou_same) {
            iou_same = v;
            best_same = &d;
        }
    }

    std::optional<DropReason> reason;
    // (a) localization survived but the predicted class changed
    if (best_any && iou_any >= match_iou && best_any->class_id != g.class_id)
        reason = DropReason::class_changed;
    // (b) same-class IoU collapsed below 0.1 (loss of information > 1)
    else if (loss_of_information(iou_same) > kDropLossThreshold)
        reason = DropReason::info_loss;
    // (c) the surviving same-class detection now matches a different ground truth
    else if (best_same && best_same->matched_gt && *best_same->matched_gt != tp.gt_index)
        reason = DropReason::rematched;

    if (!reason) return std::nullopt;
    DropEvent e;
    e.image_id = g.image_id;
    e.instance_index = tp.gt_index;
    e.fg_class = g.class_id;
    e.reason = *reason;
    e.iou_before = tp.iou_before;
    e.iou_after = iou_same;
    return e;
}

Mask ablation_complement(const Mask& keep) {
    Mask out(keep.width, keep.height);
    for (size_t i = 0; i < keep.bits.size(); ++i) out.bits[i] = keep.bits[i] ? 0 : 1;
    return out;
}

// Majority-vote downsample with a center-cell fallback so small objects are
// never lost on coarse grids.
Mask instance_grid(const Mask& inst, const Box& bbox, int grid) {
    Mask g = det::ToyDetector::downsample_majority(inst, grid, grid);
    if (g.count() == 0) {
        const int stride = inst.width / grid;
        const int cx = std::clamp(static_cast<int>((bbox.x + bbox.w / 2) / stride), 0, grid - 1);
        const int cy = std::clamp(static_cast<int>((bbox.y + bbox.h / 2) / stride), 0, grid - 1);
        g.set(cx, cy, 1);
    }
    return g;
}

}  // namespace

// --- image-space background replacement ---------------------------------------

Q1ImageResult run_q1_image_space(const det::ToyDetector& model,
                                 const std::vector<std::pair<DomainId, const Dataset*>>& domains,
                                 const BgPool& pool, int n_trials, std::uint64_t seed, int jobs) {
    if (pool.size() == 0) throw config_error("q1-image: empty background pool");
    if (n_trials < 1) throw config_error("q1-image: n_trials must be >= 1");
    for (const auto& [id, data] : domains)
        if (!data || data->images.empty())
            throw config_error("q1-image: empty dataset for domain " + id.name);

    det::PredictOptions opt;
    opt.score_threshold = 0.05;

    size_t max_images = 0;
    for (const auto& [id, data] : domains) max_images = std::max(max_images, data->images.size());

    Q1ImageResult res;
    for (const auto& [id, data] : domains) {
        res.domains.push_back(id.name);
        const auto dets = parallel_map<std::vector<DetectionRecord>>(
            data->images.size(), jobs, [&, d = data](size_t i) {
                return model.predict(d->images[i].pixels, {}, opt);
            });
        res.baseline_map.push_back(det::evaluate_map(dets, *data).map);
    }

    res.map_per_trial.assign(domains.size(), {});
    for (int trial = 0; trial < n_trials; ++trial) {
        // one background sequence per trial, shared across domains
        Rng rng(derive_seed(seed, "q1img-trial", static_cast<std::uint64_t>(trial)));
        std::vector<size_t> seq(max_images);
        for (auto& s : seq) s = rng.next_below(pool.size());

        for (size_t di = 0; di < domains.size(); ++di) {
            const Dataset& data = *domains[di].second;
            const auto dets = parallel_map<std::vector<DetectionRecord>>(
                data.images.size(), jobs, [&](size_t i) {
                    const ImageU8 composited = composite_background(
                        data.images[i].pixels, data.images[i].instances, pool.get(seq[i]));
                    return model.predict(composited, {}, opt);
                });
            res.map_per_trial[di].push_back(det::evaluate_map(dets, data).map);
        }
    }

    for (size_t di = 0; di < domains.size(); ++di) {
        const auto& maps = res.map_per_trial[di];
        double mean = 0.0;
        for (double m : maps) mean += m;
        mean /= static_cast<double>(maps.size());
        double var = 0.0;
        for (double m : maps) var += (m - mean) * (m - mean);
        var = maps.size() > 1 ? var / static_cast<double>(maps.size() - 1) : 0.0;
        res.mean_map.push_back(mean);
        res.std_map.push_back(std::sqrt(var));
    }
    return res;
}

// --- feature-space background removal ------------------------------------------

BgRemovalOutcome run_bg_removal(const det::ToyDetector& model, const Dataset& data, int bg_label,
                                const FeatureSpaceConfig& cfg) {
    if (!data.label_space.is_bg_id(bg_label))
        throw config_error("bg removal: id " + std::to_string(bg_label) + " is not a bg label");
    model.layer_index(cfg.layer);

    struct PerImage {
        std::vector<assoc::OutcomeRecord> outcomes;
        std::vector<DropEvent> events;
    };
    const auto per_image = parallel_map<PerImage>(
        data.images.size(), cfg.jobs, [&](size_t i) {
            PerImage out;
            const ImageRecord& rec = data.images[i];
            if (!rec.semantic.contains_label(bg_label)) return out;

            const auto std_matched = det::match_detections(
                model.predict(rec.pixels, {}, cfg.predict), rec.instances, cfg.match_iou);
            const auto tps = prior_true_positives(std_matched);
            if (tps.empty()) return out;

            det::AblationHook hook{cfg.layer, rec.semantic.label_mask(bg_label),
                                   det::HookMode::zero_where_true};
            const auto mod_matched = det::match_detections(
                model.predict(rec.pixels, {hook}, cfg.predict), rec.instances, cfg.match_iou);

            for (const auto& tp : tps) {
                auto event = evaluate_drop(mod_matched, rec.instances, tp, cfg.match_iou);
                assoc::OutcomeRecord o;
                o.image_id = rec.id;
                o.instance_index = tp.gt_index;
                o.fg_class = tp.class_id;
                o.bg_label = bg_label - data.label_space.num_fg();
                o.dropped = event.has_value();
                out.outcomes.push_back(o);
                if (event) {
                    event->removed_bg_label = o.bg_label;
                    out.events.push_back(*event);
                }
            }
            return out;
        });

    BgRemovalOutcome merged;
    for (const auto& pi : per_image) {
        merged.outcomes.insert(merged.outcomes.end(), pi.outcomes.begin(), pi.outcomes.end());
        merged.events.insert(merged.events.end(), pi.events.begin(), pi.events.end());
    }
    return merged;
}

Q1FeatureResult run_q1_feature_space(const det::ToyDetector& model, const Dataset& data,
                                     const DomainId& domain, const FeatureSpaceConfig& cfg) {
    if (data.images.empty()) throw config_error("q1-feature: empty dataset");
    const int ablate_layer = model.layer_index(cfg.layer);
    (void)ablate_layer;

    Q1FeatureResult res;
    assoc::FeatureStore& store = res.store;
    store.domain = domain.name;
    store.layers = model.layer_names();
    store.fg_names = data.label_space.fg_classes;
    store.bg_names = data.label_space.bg_labels;

    // outcomes and drop events per background label
    for (int bi = 0; bi < data.label_space.num_bg(); ++bi) {
        BgRemovalOutcome one = run_bg_removal(model, data, data.label_space.bg_id(bi), cfg);
        store.outcomes.insert(store.outcomes.end(), one.outcomes.begin(), one.outcomes.end());
        res.events.insert(res.events.end(), one.events.begin(), one.events.end());
    }

    // masked-feature bundles for confident prior true positives
    struct PerImage {
        std::vector<assoc::InstanceFeatures> features;
        int skipped_bg_undefined = 0;
        int skipped_low_confidence = 0;
        int skipped_degenerate_cam = 0;
    };
    const cam::SmoothGradCamPP engine(model);
    const auto per_image = parallel_map<PerImage>(
        data.images.size(), cfg.jobs, [&](size_t i) {
            PerImage out;
            const ImageRecord& rec = data.images[i];
            const det::ToyDetector::Forward fwd = model.forward_image(rec.pixels);
            const auto matched = det::match_detections(model.decode(fwd, cfg.predict, rec.id),
                                                       rec.instances, cfg.match_iou);
            for (const auto& tp : prior_true_positives(matched)) {
                if (tp.confidence < cfg.cam.confidence_floor) {
                    ++out.skipped_low_confidence;
                    continue;
                }
                std::map<std::string, cam::CamMap> maps;
                try {
                    maps = engine.compute_all_layers(rec.pixels, tp.det, cfg.cam);
                } catch (const numeric_error&) {
                    ++out.skipped_degenerate_cam;
                    continue;
                }
                const InstanceAnnotation& gt = rec.instances[static_cast<size_t>(tp.gt_index)];

                assoc::InstanceFeatures bundle;
                bundle.image_id = rec.id;
                bundle.instance_index = tp.gt_index;
                bundle.fg_class = gt.class_id;
                bundle.confidence = tp.confidence;
                bool ok = true;
                for (int l = 0; l < 4 && ok; ++l) {
                    const std::string& layer = model.layer_names()[static_cast<size_t>(l)];
                    const cam::CamMap& cm = maps.at(layer);
                    if (cm.max_value <= 0.0f) {
                        ++out.skipped_degenerate_cam;
                        ok = false;
                        break;
                    }
                    const auto ladder = cam::bin_ladder(cm, gt.instance_mask);
                    const Mask& keep = ladder.at(static_cast<size_t>(cfg.feature_bin - 1)).mask;
                    const int grid = model.stage_size(l);
                    const Mask inst_g = instance_grid(gt.instance_mask, gt.bbox, grid);
                    Mask cam_g = det::ToyDetector::downsample_majority(keep, grid, grid);
                    for (size_t k = 0; k < cam_g.bits.size(); ++k) cam_g.bits[k] |= inst_g.bits[k];

                    FeatureTensor act;
                    act.layer = layer;
                    act.dims = {static_cast<std::uint32_t>(model.layers()[static_cast<size_t>(l)].out_c),
                                static_cast<std::uint32_t>(grid), static_cast<std::uint32_t>(grid)};
                    act.data = fwd.stage_out[static_cast<size_t>(l)];
                    try {
                        const assoc::ExtractedFeatures ef = assoc::extract_features(cam_g, inst_g, act);
                        bundle.per_layer[layer] = {ef.x_f_avg, ef.x_b_avg};
                    } catch (const assoc::bg_undefined_error&) {
                        ++out.skipped_bg_undefined;
                        ok = false;
                    }
                }
                if (ok) out.features.push_back(std::move(bundle));
            }
            return out;
        });

    for (const auto& pi : per_image) {
        store.features.insert(store.features.end(), pi.features.begin(), pi.features.end());
        store.skipped_bg_undefined += pi.skipped_bg_undefined;
        store.skipped_low_confidence += pi.skipped_low_confidence;
        store.skipped_degenerate_cam += pi.skipped_degenerate_cam;
    }

    // per-trial image subsamples (deterministic per seed and trial index)
    const int n = static_cast<int>(data.images.size());
    const int per_trial = std::max(1, static_cast<int>(std::floor(cfg.trial_fraction * n)));
    for (int t = 0; t < cfg.n_trials; ++t) {
        Rng rng(derive_seed(cfg.seed, "trial", static_cast<std::uint64_t>(t)));
        std::vector<int> picks = rng.sample_without_replacement(n, per_trial);
        std::sort(picks.begin(), picks.end());
        std::vector<std::string> ids;
        ids.reserve(picks.size());
        for (int p : picks) ids.push_back(data.images[static_cast<size_t>(p)].id);
        store.trial_images.push_back(std::move(ids));
    }

    // pair statistics over the full set and per trial
    std::map<std::pair<int, int>, assoc::PairStats> stats;
    std::vector<std::set<std::string>> trial_sets;
    for (const auto& ids : store.trial_images)
        trial_sets.emplace_back(ids.begin(), ids.end());
    for (const auto& o : store.outcomes) {
        assoc::PairStats& p = stats[{o.fg_class, o.bg_label}];
        p.fg = o.fg_class;
        p.bg = o.bg_label;
        p.per_trial.resize(static_cast<size_t>(cfg.n_trials));
        ++p.tp;
        p.drops += o.dropped;
        for (int t = 0; t < cfg.n_trials; ++t) {
            if (!trial_sets[static_cast<size_t>(t)].count(o.image_id)) continue;
            ++p.per_trial[static_cast<size_t>(t)].tp;
            p.per_trial[static_cast<size_t>(t)].drops += o.dropped;
        }
    }
    for (auto& [key, p] : stats) {
        p.low_support = p.tp < assoc::kMinPairSupport;
        store.pair_stats.push_back(p);
    }

    // per-trial aggregates for the report
    for (int t = 0; t < cfg.n_trials; ++t) {
        TrialResult tr;
        tr.trial = t + 1;
        for (const auto& p : store.pair_stats) {
            const auto& ts = p.per_trial[static_cast<size_t>(t)];
            if (ts.tp == 0) continue;
            tr.pair_tp[{p.fg, p.bg}] = ts.tp;
            tr.pair_drops[{p.fg, p.bg}] = ts.drops;
        }
        res.trials.push_back(std::move(tr));
    }
    return res;
}

// --- CAM-ladder ablation ---------------------------------------------------------

Q2Result run_q2_cam_bins(const det::ToyDetector& model, const Dataset& data, const Q2Config& cfg,
                         const assoc::FeatureStore* assoc_store) {
    if (data.images.empty()) throw config_error("q2-cam: empty dataset");
    model.layer_index(cfg.layer);
    for (int b : cfg.bins)
        if (b < 1 || b > cam::kNumBins)
            throw config_error("q2-cam: bin index " + std::to_string(b) + " outside 1..9");

    // associated = dropped under removal of at least one bg label
    std::set<std::pair<std::string, int>> associated;
    if (assoc_store)
        for (const auto& o : assoc_store->outcomes)
            if (o.dropped) associated.insert({o.image_id, o.instance_index});

    struct PerImage {
        std::vector<std::pair<int, bool>> bin_outcomes;  // (bin, dropped)
        std::vector<DropEvent> events;
        std::vector<std::array<cam::HitRatio, 4>> hits;  // per instance, per layer
        std::vector<bool> hit_assoc;
        int confident = 0;
    };
    const cam::SmoothGradCamPP engine(model);
    const auto per_image = parallel_map<PerImage>(
        data.images.size(), cfg.jobs, [&](size_t i) {
            PerImage out;
            const ImageRecord& rec = data.images[i];
            const auto matched = det::match_detections(model.predict(rec.pixels, {}, cfg.predict),
                                                       rec.instances, cfg.match_iou);
            for (const auto& tp : prior_true_positives(matched)) {
                if (tp.confidence < cfg.cam.confidence_floor) continue;
                std::map<std::string, cam::CamMap> maps;
                try {
                    maps = engine.compute_all_layers(rec.pixels, tp.det, cfg.cam);
                } catch (const numeric_error&) {
                    continue;
                }
                const InstanceAnnotation& gt = rec.instances[static_cast<size_t>(tp.gt_index)];
                const cam::CamMap& ablate_cam = maps.at(cfg.layer);
                if (ablate_cam.max_value <= 0.0f) continue;
                ++out.confident;

                const auto ladder = cam::bin_ladder(ablate_cam, gt.instance_mask);
                for (int bin : cfg.bins) {
                    const Mask& keep = ladder.at(static_cast<size_t>(bin - 1)).mask;
                    det::AblationHook hook{cfg.layer, ablation_complement(keep),
                                           det::HookMode::zero_where_true};
                    const auto mod_matched =
                        det::match_detections(model.predict(rec.pixels, {hook}, cfg.predict),
                                              rec.instances, cfg.match_iou);
                    auto event = evaluate_drop(mod_matched, rec.instances, tp, cfg.match_iou);
                    out.bin_outcomes.emplace_back(bin, event.has_value());
                    if (event) {
                        event->cam_bin = bin;
                        out.events.push_back(*event);
                    }
                }

                // hit ratios at the configured rung, every layer
                std::array<cam::HitRatio, 4> rows;
                bool rows_ok = true;
                for (int l = 0; l < 4 && rows_ok; ++l) {
                    const cam::CamMap& cm = maps.at(model.layer_names()[static_cast<size_t>(l)]);
                    if (cm.max_value <= 0.0f) {
                        rows_ok = false;
                        break;
                    }
                    const auto lad = cam::bin_ladder(cm, gt.instance_mask);
                    rows[static_cast<size_t>(l)] = cam::hit_ratio(
                        lad.at(static_cast<size_t>(cfg.hit_bin - 1)).mask, gt.instance_mask);
                }
                if (rows_ok) {
                    out.hits.push_back(rows);
                    out.hit_assoc.push_back(associated.count({rec.id, tp.gt_index}) > 0);
                }
            }
            return out;
        });

    Q2Result res;
    res.bins = cfg.bins;
    res.instances_per_bin.assign(cfg.bins.size(), 0);
    res.drops_per_bin.assign(cfg.bins.size(), 0);
    std::map<int, size_t> bin_pos;
    for (size_t k = 0; k < cfg.bins.size(); ++k) bin_pos[cfg.bins[k]] = k;

    std::array<double, 4> fg_a{}, bg_a{}, fg_n{}, bg_n{}, fg_all{}, bg_all{};
    int n_a = 0, n_n = 0, n_all = 0;
    for (const auto& pi : per_image) {
        res.confident_instances += pi.confident;
        for (const auto& [bin, dropped] : pi.bin_outcomes) {
            const size_t k = bin_pos.at(bin);
            ++res.instances_per_bin[k];
            res.drops_per_bin[k] += dropped;
        }
        res.events.insert(res.events.end(), pi.events.begin(), pi.events.end());
        for (size_t j = 0; j < pi.hits.size(); ++j) {
            ++n_all;
            const bool assoc_flag = pi.hit_assoc[j];
            if (assoc_flag) ++n_a;
            else ++n_n;
            for (int l = 0; l < 4; ++l) {
                fg_all[static_cast<size_t>(l)] += pi.hits[j][static_cast<size_t>(l)].fg;
                bg_all[static_cast<size_t>(l)] += pi.hits[j][static_cast<size_t>(l)].bg;
                if (assoc_flag) {
                    fg_a[static_cast<size_t>(l)] += pi.hits[j][static_cast<size_t>(l)].fg;
                    bg_a[static_cast<size_t>(l)] += pi.hits[j][static_cast<size_t>(l)].bg;
                } else {
                    fg_n[static_cast<size_t>(l)] += pi.hits[j][static_cast<size_t>(l)].fg;
                    bg_n[static_cast<size_t>(l)] += pi.hits[j][static_cast<size_t>(l)].bg;
                }
            }
        }
    }

    res.drop_rate_per_bin.assign(cfg.bins.size(), 0.0);
    for (size_t k = 0; k < cfg.bins.size(); ++k)
        if (res.instances_per_bin[k] > 0)
            res.drop_rate_per_bin[k] =
                static_cast<double>(res.drops_per_bin[k]) / res.instances_per_bin[k];

    for (int l = 0; l < 4; ++l) {
        Q2HitRow row;
        row.layer = model.layer_names()[static_cast<size_t>(l)];
        row.n_assoc = n_a;
        row.n_noassoc = n_n;
        row.n_all = n_all;
        if (n_a > 0) {
            row.fg_assoc = fg_a[static_cast<size_t>(l)] / n_a;
            row.bg_assoc = bg_a[static_cast<size_t>(l)] / n_a;
        }
        if (n_n > 0) {
            row.fg_noassoc = fg_n[static_cast<size_t>(l)] / n_n;
            row.bg_noassoc = bg_n[static_cast<size_t>(l)] / n_n;
        }
        if (n_all > 0) {
            row.fg_all = fg_all[static_cast<size_t>(l)] / n_all;
            row.bg_all = bg_all[static_cast<size_t>(l)] / n_all;
        }
        res.hit_ratios.push_back(std::move(row));
    }
    return res;
}

}  // namespace ctxbias::interv
