#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <numeric>
#include <set>

#include "ctxbias/core/rng.hpp"

#include "ctxbias/detector/eval.hpp"
#include "ctxbias/detector/model.hpp"
#include "ctxbias/detector/train.hpp"
#include "ctxbias/synthbench/synthbench.hpp"

using namespace ctxbias;
using namespace ctxbias::det;
namespace fs = std::filesystem;

namespace {

synth::SceneSpec small_spec() {
    synth::SceneSpec s;
    s.image_size = 64;
    s.fg_classes = {{"disc", synth::ShapeKind::disc, 10, 16},
                    {"triangle", synth::ShapeKind::triangle, 10, 16},
                    {"cross", synth::ShapeKind::cross, 10, 16}};
    s.bg_labels = {{"stripes", synth::TextureKind::stripes},
                   {"dots", synth::TextureKind::dots},
                   {"checker", synth::TextureKind::checker},
                   {"flat", synth::TextureKind::flat}};
    const std::vector<double> uniform = {0.25, 0.25, 0.25, 0.25};
    s.association_table["source"] = {uniform, {0.95, 1.0 / 60, 1.0 / 60, 1.0 / 60}, uniform};
    s.association_table["target"] = {uniform, {0.95, 1.0 / 60, 1.0 / 60, 1.0 / 60}, uniform};
    s.seed = 11;
    return s;
}

ModelConfig small_model() {
    ModelConfig mc;
    mc.image_size = 64;
    mc.num_classes = 3;
    return mc;
}

DetectionRecord mk_det(const std::string& img, int cls, Box b, double conf, int cell = 0) {
    DetectionRecord d;
    d.image_id = img;
    d.class_id = cls;
    d.bbox = b;
    d.confidence = conf;
    d.cell_index = cell;
    return d;
}

InstanceAnnotation gt(const std::string& img, int cls, Box b) {
    InstanceAnnotation a;
    a.image_id = img;
    a.class_id = cls;
    a.bbox = b;
    a.instance_mask = Mask(64, 64);
    a.instance_mask.set(static_cast<int>(b.x), static_cast<int>(b.y), 1);
    return a;
}

}  // namespace

TEST_CASE("hooks: empty and all-false masks are strict no-ops, all-true zeroes the layer") {
    ToyDetector model(small_model());
    model.init_weights(3);
    const Dataset d = synth::generate(small_spec(), 1, DomainId{"source"});
    const ImageU8& img = d.images[0].pixels;

    const auto plain = model.forward_image(img);

    Mask all_false(64, 64);
    const auto hooked = model.forward_image(img, {{"stage2", all_false}});
    CHECK(hooked.head == plain.head);  // bitwise identical logits
    CHECK(hooked.stage_out[1] == plain.stage_out[1]);

    Mask all_true(64, 64);
    std::fill(all_true.bits.begin(), all_true.bits.end(), 1);
    const auto zeroed = model.capture(img, {"stage2"}, {{"stage2", all_true}});
    for (float v : zeroed.at("stage2").data) CHECK(v == 0.0f);

    CHECK_THROWS_AS(model.forward_image(img, {{"nosuch", all_false}}), hook_error);
}

TEST_CASE("predict is deterministic and capture is passive") {
    ToyDetector model(small_model());
    model.init_weights(4);
    const Dataset d = synth::generate(small_spec(), 2, DomainId{"source"});
    PredictOptions opt;
    opt.score_threshold = 0.0001;

    const auto r1 = model.predict(d.images[0].pixels, {}, opt);
    const auto r2 = model.predict(d.images[0].pixels, {}, opt);
    REQUIRE(r1.size() == r2.size());
    for (size_t i = 0; i < r1.size(); ++i) {
        CHECK(r1[i].confidence == r2[i].confidence);
        CHECK(r1[i].bbox.x == r2[i].bbox.x);
        CHECK(r1[i].class_id == r2[i].class_id);
    }

    // capture runs the same forward; detections unchanged
    const auto caps = model.capture(d.images[0].pixels, {"stage1", "stage4"}, {});
    const auto r3 = model.predict(d.images[0].pixels, {}, opt);
    REQUIRE(r3.size() == r1.size());
    for (size_t i = 0; i < r1.size(); ++i) CHECK(r3[i].confidence == r1[i].confidence);
    CHECK(caps.at("stage1").dims[1] == 64);
}

TEST_CASE("zero input produces constant bias response at stage1") {
    ToyDetector model(small_model());
    model.init_weights(5);
    for (size_t i = 0; i < model.layers()[0].b.size(); ++i)
        model.layers()[0].b[i] = 0.05f * static_cast<float>(i % 3);
    std::vector<float> zero(static_cast<size_t>(3) * 64 * 64, 0.0f);
    const auto fwd = model.forward_chw(zero);
    const auto& s1 = fwd.stage_out[0];
    const size_t hw = 64 * 64;
    for (int c = 0; c < small_model().channels[0]; ++c) {
        const float expect = std::max(0.0f, model.layers()[0].b[static_cast<size_t>(c)]);
        for (size_t p = 0; p < hw; ++p) CHECK(s1[static_cast<size_t>(c) * hw + p] == expect);
    }
}

TEST_CASE("capture dims follow the declared stride schedule") {
    ToyDetector model(small_model());
    model.init_weights(6);
    const Dataset d = synth::generate(small_spec(), 1, DomainId{"source"});
    const auto caps = model.capture(d.images[0].pixels, {"stage1", "stage2", "stage3", "stage4"}, {});
    CHECK(caps.at("stage1").dims[1] == 64);
    CHECK(caps.at("stage2").dims[1] == 32);
    CHECK(caps.at("stage3").dims[1] == 16);
    CHECK(caps.at("stage4").dims[1] == 8);
}

TEST_CASE("match_detections basics") {
    std::vector<InstanceAnnotation> anns = {gt("a", 0, {10, 10, 10, 10})};

    SUBCASE("iou above threshold and correct class matches") {
        auto out = match_detections({mk_det("a", 0, {11, 10, 10, 10}, 0.9)}, anns, 0.5);
        REQUIRE(out[0].matched_gt.has_value());
        CHECK(*out[0].matched_gt == 0);
    }
    SUBCASE("two detections on one ground truth: only the higher confidence matches") {
        auto out = match_detections(
            {mk_det("a", 0, {10, 10, 10, 10}, 0.6, 1), mk_det("a", 0, {11, 10, 10, 10}, 0.9, 2)}, anns,
            0.5);
        // the 0.9 det matched, the 0.6 det did not
        for (const auto& d : out) {
            if (d.confidence == 0.9) CHECK(d.matched_gt.has_value());
            else CHECK(!d.matched_gt.has_value());
        }
    }
    SUBCASE("wrong class never matches") {
        auto out = match_detections({mk_det("a", 1, {10, 10, 10, 10}, 0.99)}, anns, 0.5);
        CHECK(!out[0].matched_gt.has_value());
    }
    SUBCASE("empty inputs give empty output") {
        CHECK(match_detections({}, anns, 0.5).empty());
    }
    SUBCASE("threshold outside (0,1) rejected") {
        CHECK_THROWS(match_detections({}, anns, 1.0));
    }
}

TEST_CASE("match_detections equals exhaustive greedy-order oracle") {
    Rng rng_boxes(314);
    auto rnd_box = [&]() {
        return Box{rng_boxes.next_uniform(0, 40), rng_boxes.next_uniform(0, 40),
                   rng_boxes.next_uniform(5, 20), rng_boxes.next_uniform(5, 20)};
    };
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<InstanceAnnotation> anns;
        const int n_gt = rng_boxes.next_int(1, 3);
        for (int g = 0; g < n_gt; ++g) anns.push_back(gt("a", rng_boxes.next_int(0, 1), rnd_box()));
        std::vector<DetectionRecord> dets;
        const int n_det = rng_boxes.next_int(1, 5);
        for (int i = 0; i < n_det; ++i) {
            Box b = anns[static_cast<size_t>(rng_boxes.next_int(0, n_gt - 1))].bbox;
            b.x += rng_boxes.next_uniform(-4, 4);
            b.y += rng_boxes.next_uniform(-4, 4);
            dets.push_back(mk_det("a", rng_boxes.next_int(0, 1), b, rng_boxes.next_double(), i));
        }

        // oracle: among all one-to-one assignments, lexicographically best
        // (matched, iou) sequence in descending-confidence order
        std::vector<size_t> order(dets.size());
        std::iota(order.begin(), order.end(), size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return dets[a].confidence > dets[b].confidence;
        });
        std::vector<int> best_assign;
        std::vector<double> best_key;
        std::vector<int> assign(dets.size(), -1);
        std::vector<bool> used(anns.size(), false);
        auto recurse = [&](auto&& self, size_t pos) -> void {
            if (pos == order.size()) {
                std::vector<double> key;
                for (size_t oi : order) {
                    if (assign[oi] < 0) {
                        key.push_back(0.0);
                        key.push_back(0.0);
                    } else {
                        key.push_back(1.0);
                        key.push_back(iou(dets[oi].bbox, anns[static_cast<size_t>(assign[oi])].bbox));
                    }
                }
                if (best_key.empty() || key > best_key) {
                    best_key = key;
                    best_assign = assign;
                }
                return;
            }
            const size_t oi = order[pos];
            self(self, pos + 1);  // leave unmatched
            for (size_t g = 0; g < anns.size(); ++g) {
                if (used[g] || anns[g].class_id != dets[oi].class_id) continue;
                if (iou(dets[oi].bbox, anns[g].bbox) < 0.5) continue;
                used[g] = true;
                assign[oi] = static_cast<int>(g);
                self(self, pos + 1);
                assign[oi] = -1;
                used[g] = false;
            }
        };
        recurse(recurse, 0);

        const auto matched = match_detections(dets, anns, 0.5);
        for (size_t i = 0; i < dets.size(); ++i) {
            const int expected = best_assign.empty() ? -1 : best_assign[i];
            if (expected < 0) CHECK(!matched[i].matched_gt.has_value());
            else {
                REQUIRE(matched[i].matched_gt.has_value());
                CHECK(*matched[i].matched_gt == expected);
            }
        }
    }
}

TEST_CASE("map50 values") {
    Dataset ds;
    ds.label_space.fg_classes = {"a", "b"};
    ds.label_space.bg_labels = {"x", "y"};
    ImageRecord rec;
    rec.id = "img";
    rec.file = "f";
    rec.semantic_map_file = "s";
    rec.pixels = ImageU8(64, 64, 3);
    rec.semantic = SemanticMap{"img", 64, 64, std::vector<std::uint8_t>(64 * 64, 2)};
    rec.instances = {gt("img", 0, {10, 10, 10, 10}), gt("img", 0, {30, 30, 10, 10})};
    rec.instance_mask_files = {"m0", "m1"};
    ds.images.push_back(rec);

    SUBCASE("perfect detections give 1.0") {
        std::vector<std::vector<DetectionRecord>> dets = {
            {mk_det("img", 0, {10, 10, 10, 10}, 0.9, 0), mk_det("img", 0, {30, 30, 10, 10}, 0.8, 1)}};
        CHECK(evaluate_map(dets, ds).map == doctest::Approx(1.0));
    }
    SUBCASE("no detections give 0.0") {
        std::vector<std::vector<DetectionRecord>> dets = {{}};
        CHECK(evaluate_map(dets, ds).map == doctest::Approx(0.0));
    }
    SUBCASE("one FP ranked middle gives the hand-computed all-point AP") {
        // ranking: TP (0.9), FP (0.85), TP (0.8)
        // precision at recalls 0.5 and 1.0: 1.0 and 2/3 -> AP = 0.5 + 0.5*2/3 = 5/6
        std::vector<std::vector<DetectionRecord>> dets = {
            {mk_det("img", 0, {10, 10, 10, 10}, 0.9, 0), mk_det("img", 0, {50, 50, 10, 10}, 0.85, 1),
             mk_det("img", 0, {30, 30, 10, 10}, 0.8, 2)}};
        CHECK(evaluate_map(dets, ds).map == doctest::Approx(5.0 / 6.0));
    }
    SUBCASE("invariant under strictly increasing confidence rescaling") {
        std::vector<std::vector<DetectionRecord>> dets = {
            {mk_det("img", 0, {10, 10, 10, 10}, 0.9, 0), mk_det("img", 0, {50, 50, 10, 10}, 0.85, 1),
             mk_det("img", 0, {30, 30, 10, 10}, 0.8, 2)}};
        auto rescaled = dets;
        for (auto& d : rescaled[0]) d.confidence = d.confidence * d.confidence * 0.5;
        CHECK(evaluate_map(dets, ds).map == evaluate_map(rescaled, ds).map);
    }
    SUBCASE("no ground truth at all is an evaluation error") {
        Dataset empty = ds;
        empty.images[0].instances.clear();
        empty.images[0].instance_mask_files.clear();
        std::vector<std::vector<DetectionRecord>> dets = {{}};
        CHECK_THROWS_AS(evaluate_map(dets, empty), numeric_error);
    }
}

TEST_CASE("training smoke, determinism and checkpoint round-trip") {
    const Dataset tiny = synth::generate(small_spec(), 30, DomainId{"source"});

    SUBCASE("single-image single-epoch run stays finite") {
        Dataset one;
        one.label_space = tiny.label_space;
        one.images = {tiny.images[0]};
        // a one-image dataset cannot cover every class; waive the check by
        // restricting the label space to the classes present
        std::set<int> seen;
        for (const auto& ann : one.images[0].instances) seen.insert(ann.class_id);
        TrainConfig cfg;
        cfg.epochs = 1;
        cfg.batch_size = 1;
        if (seen.size() == one.label_space.fg_classes.size()) {
            ToyDetector model(small_model());
            const TrainResult r = train(model, one, nullptr, cfg);
            for (double l : r.step_losses) CHECK(std::isfinite(l));
        } else {
            ToyDetector model(small_model());
            CHECK_THROWS_AS(train(model, one, nullptr, cfg), config_error);
        }
    }

    SUBCASE("empty dataset and bad config rejected") {
        Dataset empty;
        empty.label_space = tiny.label_space;
        ToyDetector model(small_model());
        TrainConfig cfg;
        CHECK_THROWS_AS(train(model, empty, nullptr, cfg), config_error);
        TrainConfig bad;
        bad.epochs = 0;
        CHECK_THROWS_AS(train(model, tiny, nullptr, bad), config_error);
    }

    SUBCASE("same seed gives bitwise-identical weights; checkpoints round-trip") {
        TrainConfig cfg;
        cfg.epochs = 2;
        cfg.seed = 99;
        ToyDetector m1(small_model()), m2(small_model());
        train(m1, tiny, nullptr, cfg);
        train(m2, tiny, nullptr, cfg);
        for (size_t i = 0; i < m1.layers().size(); ++i) {
            REQUIRE(m1.layers()[i].w == m2.layers()[i].w);
            REQUIRE(m1.layers()[i].b == m2.layers()[i].b);
        }

        const fs::path dir = fs::temp_directory_path() / "ctxbias_ckpt_test";
        fs::remove_all(dir);
        m1.save_checkpoint(dir.string());
        const ToyDetector loaded = ToyDetector::load_checkpoint(dir.string());
        for (size_t i = 0; i < m1.layers().size(); ++i) {
            REQUIRE(loaded.layers()[i].w == m1.layers()[i].w);
            REQUIRE(loaded.layers()[i].b == m1.layers()[i].b);
        }
    }

    SUBCASE("loss decreases over the first 10% of steps and mAP becomes nontrivial") {
        const Dataset data = synth::generate(small_spec(), 80, DomainId{"source"});
        TrainConfig cfg;
        cfg.epochs = 10;
        cfg.seed = 5;
        ToyDetector model(small_model());
        const TrainResult r = train(model, data, nullptr, cfg);
        REQUIRE(r.step_losses.size() >= 20);
        const size_t cut = r.step_losses.size() / 10;
        double early = 0.0, later = 0.0;
        for (size_t i = 0; i < 3; ++i) early += r.step_losses[i];
        for (size_t i = cut; i < cut + 3; ++i) later += r.step_losses[i];
        CHECK(later < early);

        CHECK(dataset_map50(model, data) > 0.5);
    }
}
