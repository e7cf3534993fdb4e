#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "ctxbias/detector/eval.hpp"
#include "ctxbias/detector/train.hpp"
#include "ctxbias/interventions/interventions.hpp"
#include "ctxbias/synthbench/synthbench.hpp"

using namespace ctxbias;
using namespace ctxbias::interv;

namespace {

synth::SceneSpec bench_spec() {
    synth::SceneSpec s;
    s.image_size = 64;
    s.fg_classes = {{"disc", synth::ShapeKind::disc, 10, 16},
                    {"triangle", synth::ShapeKind::triangle, 10, 16},
                    {"cross", synth::ShapeKind::cross, 10, 16}};
    s.bg_labels = {{"stripes", synth::TextureKind::stripes},
                   {"dots", synth::TextureKind::dots},
                   {"checker", synth::TextureKind::checker},
                   {"flat", synth::TextureKind::flat}};
    const std::vector<double> u = {0.25, 0.25, 0.25, 0.25};
    s.association_table["source"] = {u, {0.95, 1.0 / 60, 1.0 / 60, 1.0 / 60}, u};
    s.association_table["target"] = {u, {0.95, 1.0 / 60, 1.0 / 60, 1.0 / 60}, u};
    s.seed = 17;
    return s;
}

// small trained model shared by the heavier subcases
const det::ToyDetector& trained_model() {
    static const det::ToyDetector model = [] {
        det::ModelConfig mc;
        mc.image_size = 64;
        mc.num_classes = 3;
        det::ToyDetector m(mc);
        const Dataset train_set = synth::generate(bench_spec(), 120, DomainId{"source"});
        det::TrainConfig tc;
        tc.epochs = 12;
        tc.seed = 23;
        det::train(m, train_set, nullptr, tc);
        return m;
    }();
    return model;
}

}  // namespace

TEST_CASE("loss_of_information pinned values") {
    CHECK(loss_of_information(0.1) == doctest::Approx(1.0));
    CHECK(loss_of_information(1.0) == doctest::Approx(0.0));
    CHECK(loss_of_information(0.01) == doctest::Approx(2.0));
    CHECK(loss_of_information(0.0) == doctest::Approx(12.0));  // floor at 1e-12
    CHECK_THROWS_AS(loss_of_information(-0.1), numeric_error);
    CHECK_THROWS_AS(loss_of_information(1.1), numeric_error);
    // threshold semantics: loss > 1 exactly when iou < 0.1
    CHECK(loss_of_information(0.0999) > 1.0);
    CHECK(loss_of_information(0.1001) < 1.0);
}

TEST_CASE("composite_background pixel rules") {
    const Dataset d = synth::generate(bench_spec(), 3, DomainId{"source"});
    const ImageRecord& rec = d.images[0];

    SUBCASE("bg equal to the original image is an identity") {
        const ImageU8 out = composite_background(rec.pixels, rec.instances, rec.pixels);
        CHECK(out.data == rec.pixels.data);
    }
    SUBCASE("instance mask covering the whole image keeps the original") {
        InstanceAnnotation full;
        full.image_id = rec.id;
        full.class_id = 0;
        full.bbox = Box{0, 0, 64, 64};
        full.instance_mask = Mask(64, 64);
        std::fill(full.instance_mask.bits.begin(), full.instance_mask.bits.end(), 1);
        ImageU8 other(64, 64, 3);
        const ImageU8 out = composite_background(rec.pixels, {full}, other);
        CHECK(out.data == rec.pixels.data);
    }
    SUBCASE("solid fg on checkerboard bg: exactly mask-many pixels differ") {
        ImageU8 checker(64, 64, 3);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const std::uint8_t v = ((x / 4 + y / 4) % 2) ? 40 : 200;
                for (int c = 0; c < 3; ++c) checker.set(x, y, c, v);
            }
        ImageU8 gray(64, 64, 3);
        std::fill(gray.data.begin(), gray.data.end(), static_cast<std::uint8_t>(120));

        Mask disc(64, 64);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                if ((x - 30) * (x - 30) + (y - 30) * (y - 30) <= 49) disc.set(x, y, 1);
        InstanceAnnotation ann;
        ann.image_id = "x";
        ann.class_id = 0;
        ann.bbox = Box{23, 23, 15, 15};
        ann.instance_mask = disc;

        const ImageU8 out = composite_background(gray, {ann}, checker);
        size_t differing = 0;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                if (out.at(x, y, 0) != checker.at(x, y, 0)) ++differing;
        CHECK(differing == disc.count());
        // and foreground pixels are bit-exact from the fg image
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                if (disc.at(x, y)) REQUIRE(out.at(x, y, 1) == 120);
    }
    SUBCASE("no instances returns the pure background") {
        ImageU8 bg(32, 32, 3);
        std::fill(bg.data.begin(), bg.data.end(), static_cast<std::uint8_t>(9));
        const ImageU8 out = composite_background(rec.pixels, {}, bg);
        for (auto v : out.data) CHECK(v == 9);
    }
}

TEST_CASE("q1 image space: identity pool and degenerate randomness") {
    const det::ToyDetector& model = trained_model();
    Dataset one;
    const Dataset d = synth::generate(bench_spec(), 6, DomainId{"source"});
    one.label_space = d.label_space;
    one.images = {d.images[0]};

    SUBCASE("pool containing each image's own pixels reproduces the baseline") {
        VectorBgPool pool({d.images[0].pixels});
        const Q1ImageResult r =
            run_q1_image_space(model, {{DomainId{"source"}, &one}}, pool, 3, 5, 1);
        for (double m : r.map_per_trial[0]) CHECK(m == doctest::Approx(r.baseline_map[0]));
    }
    SUBCASE("single-background pool gives zero std over trials") {
        VectorBgPool pool({synth::generate_bg_image(bench_spec(), 0)});
        const Q1ImageResult r =
            run_q1_image_space(model, {{DomainId{"source"}, &d}}, pool, 4, 5, 2);
        CHECK(r.std_map[0] == doctest::Approx(0.0));
    }
    SUBCASE("empty pool rejected") {
        VectorBgPool pool({});
        CHECK_THROWS_AS(run_q1_image_space(model, {{DomainId{"source"}, &d}}, pool, 2, 5, 1),
                        config_error);
    }
}

TEST_CASE("feature-space removal bookkeeping") {
    const det::ToyDetector& model = trained_model();
    const Dataset d = synth::generate(bench_spec(), 60, DomainId{"source"});

    FeatureSpaceConfig cfg;
    cfg.seed = 9;
    cfg.jobs = 2;
    cfg.cam.n_samples = 2;
    cfg.n_trials = 4;

    SUBCASE("hooked inference identical to standard yields zero drops") {
        // removing a label absent from the semantic maps is a no-op; build a
        // dataset copy whose label space has one extra, never-used label
        Dataset extra = d;
        extra.label_space.bg_labels.push_back("unused");
        const BgRemovalOutcome out =
            run_bg_removal(model, extra, extra.label_space.bg_id(4), cfg);
        CHECK(out.outcomes.empty());
        CHECK(out.events.empty());
    }

    SUBCASE("full experiment produces coherent stores") {
        const Q1FeatureResult r = run_q1_feature_space(model, d, DomainId{"source"}, cfg);
        const auto& store = r.store;
        REQUIRE(!store.pair_stats.empty());

        for (const auto& p : store.pair_stats) {
            CHECK(p.tp > 0);  // zero-support pairs are absent, never 0/0
            CHECK(p.drops <= p.tp);
            CHECK(p.drop_rate() >= 0.0);
            CHECK(p.drop_rate() <= 1.0);
            REQUIRE(p.per_trial.size() == 4);
            for (const auto& t : p.per_trial) {
                CHECK(t.tp <= p.tp);
                CHECK(t.drops <= t.tp);
            }
        }

        // every drop event is grounded in a reproducible prior true positive
        std::set<std::pair<std::string, int>> tp_keys;
        for (const auto& rec : d.images) {
            const auto matched = det::match_detections(model.predict(rec.pixels, {}, cfg.predict),
                                                       rec.instances, cfg.match_iou);
            for (const auto& dd : matched)
                if (dd.matched_gt) tp_keys.insert({rec.id, *dd.matched_gt});
        }
        for (const auto& e : r.events) {
            CHECK(tp_keys.count({e.image_id, e.instance_index}) == 1);
            CHECK(e.iou_before >= cfg.match_iou);
            CHECK(e.removed_bg_label >= 0);
        }

        // determinism of the whole pipeline stage
        const Q1FeatureResult r2 = run_q1_feature_space(model, d, DomainId{"source"}, cfg);
        REQUIRE(r2.store.outcomes.size() == store.outcomes.size());
        for (size_t i = 0; i < store.outcomes.size(); ++i) {
            CHECK(r2.store.outcomes[i].image_id == store.outcomes[i].image_id);
            CHECK(r2.store.outcomes[i].dropped == store.outcomes[i].dropped);
        }
        CHECK(r2.store.features.size() == store.features.size());
    }
}

TEST_CASE("q2 cam bins structure on the trained toy model") {
    const det::ToyDetector& model = trained_model();
    const Dataset d = synth::generate(bench_spec(), 30, DomainId{"source"});

    Q2Config cfg;
    cfg.bins = {1, 5, 9};
    cfg.cam.n_samples = 2;
    cfg.jobs = 2;
    const Q2Result r = run_q2_cam_bins(model, d, cfg, nullptr);

    REQUIRE(r.bins.size() == 3);
    if (r.confident_instances > 0) {
        for (size_t k = 0; k < r.bins.size(); ++k) {
            CHECK(r.instances_per_bin[k] == r.confident_instances);
            CHECK(r.drop_rate_per_bin[k] >= 0.0);
            CHECK(r.drop_rate_per_bin[k] <= 1.0);
        }
        // full-image keep mask at bin 9 tends to drop almost nothing; the
        // ordering property itself is asserted end-to-end in acceptance
        for (const auto& row : r.hit_ratios) {
            if (row.n_all > 0) CHECK(row.fg_all == doctest::Approx(1.0));
        }
        for (const auto& e : r.events) CHECK(e.cam_bin >= 1);
    }
    CHECK_THROWS_AS(run_q2_cam_bins(model, d, [&] {
                        Q2Config bad = cfg;
                        bad.bins = {11};
                        return bad;
                    }(), nullptr),
                    config_error);
}
