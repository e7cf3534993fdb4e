#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ctxbias/assoc/assoc.hpp"
#include "ctxbias/assoc/feature_store.hpp"
#include "ctxbias/core/rng.hpp"

using namespace ctxbias;
using namespace ctxbias::assoc;
namespace fs = std::filesystem;

namespace {

FeatureTensor make_activation(Rng& rng, int c, int h, int w) {
    FeatureTensor t;
    t.layer = "stage1";
    t.dims = {static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(h),
              static_cast<std::uint32_t>(w)};
    t.data.resize(t.size());
    for (auto& v : t.data) v = static_cast<float>(rng.next_uniform(-1.0, 1.0));
    return t;
}

InstanceFeatures bundle(const std::string& image, int instance, int cls) {
    InstanceFeatures f;
    f.image_id = image;
    f.instance_index = instance;
    f.fg_class = cls;
    f.confidence = 0.9;
    f.per_layer["stage1"] = {{1.0f, 2.0f}, {3.0f, 4.0f}};
    return f;
}

}  // namespace

TEST_CASE("extract_features against a brute-force per-cell oracle") {
    Rng rng(55);
    for (int trial = 0; trial < 20; ++trial) {
        const int c = 4, h = 5, w = 5;
        const FeatureTensor act = make_activation(rng, c, h, w);
        Mask inst(w, h), cam(w, h);
        // random instance cells, cam = instance plus extra cells
        for (int k = 0; k < 5; ++k) inst.set(rng.next_int(0, w - 1), rng.next_int(0, h - 1), 1);
        cam.bits = inst.bits;
        for (int k = 0; k < 8; ++k) cam.set(rng.next_int(0, w - 1), rng.next_int(0, h - 1), 1);
        size_t n_bg = 0;
        for (size_t i = 0; i < cam.bits.size(); ++i) n_bg += cam.bits[i] && !inst.bits[i];
        if (inst.count() == 0 || n_bg == 0) continue;

        const ExtractedFeatures got = extract_features(cam, inst, act);

        // independent naive loop
        const size_t hw = static_cast<size_t>(h) * w;
        std::vector<double> masked(act.data.size(), 0.0);
        double sq = 0.0;
        for (int ch = 0; ch < c; ++ch)
            for (size_t i = 0; i < hw; ++i)
                if (cam.bits[i]) {
                    masked[static_cast<size_t>(ch) * hw + i] = act.data[static_cast<size_t>(ch) * hw + i];
                    sq += masked[static_cast<size_t>(ch) * hw + i] * masked[static_cast<size_t>(ch) * hw + i];
                }
        const double norm = std::sqrt(sq);
        for (int ch = 0; ch < c; ++ch) {
            double f = 0.0, b = 0.0;
            size_t nf = 0, nb = 0;
            for (size_t i = 0; i < hw; ++i) {
                const double v = masked[static_cast<size_t>(ch) * hw + i] / norm;
                if (inst.bits[i]) {
                    f += v;
                    ++nf;
                } else if (cam.bits[i]) {
                    b += v;
                    ++nb;
                }
            }
            CHECK(got.x_f_avg[static_cast<size_t>(ch)] ==
                  doctest::Approx(f / static_cast<double>(nf)).epsilon(1e-6));
            CHECK(got.x_b_avg[static_cast<size_t>(ch)] ==
                  doctest::Approx(b / static_cast<double>(nb)).epsilon(1e-6));
        }

        // unit norm of the normalized masked tensor
        double check = 0.0;
        for (float v : got.x_c) check += static_cast<double>(v) * v;
        CHECK(std::sqrt(check) == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("extract_features symmetry and error cases") {
    SUBCASE("all-ones activation, full cam, half instance: equal constant vectors") {
        FeatureTensor act;
        act.layer = "stage1";
        act.dims = {2, 4, 4};
        act.data.assign(32, 1.0f);
        Mask cam(4, 4);
        std::fill(cam.bits.begin(), cam.bits.end(), 1);
        Mask inst(4, 4);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 2; ++x) inst.set(x, y, 1);
        const ExtractedFeatures f = extract_features(cam, inst, act);
        CHECK(f.x_f_avg[0] == doctest::Approx(f.x_b_avg[0]));
        CHECK(f.x_f_avg[0] == doctest::Approx(f.x_f_avg[1]));
    }
    SUBCASE("cam equal to instance: background feature undefined") {
        FeatureTensor act;
        act.layer = "stage1";
        act.dims = {1, 3, 3};
        act.data.assign(9, 1.0f);
        Mask inst(3, 3);
        inst.set(1, 1, 1);
        CHECK_THROWS_AS(extract_features(inst, inst, act), bg_undefined_error);
    }
    SUBCASE("instance outside cam rejected") {
        FeatureTensor act;
        act.layer = "stage1";
        act.dims = {1, 3, 3};
        act.data.assign(9, 1.0f);
        Mask inst(3, 3), cam(3, 3);
        inst.set(0, 0, 1);
        cam.set(2, 2, 1);
        CHECK_THROWS_AS(extract_features(cam, inst, act), numeric_error);
    }
}

TEST_CASE("partition follows the drop outcome only") {
    std::vector<InstanceFeatures> features = {bundle("img0", 0, 1), bundle("img1", 0, 1),
                                              bundle("img2", 0, 0)};
    std::vector<OutcomeRecord> outcomes = {
        {"img0", 0, 1, 0, true},   // dropped under stripes removal -> F_a
        {"img1", 0, 1, 0, false},  // retained -> F_na
        {"img2", 0, 0, 1, false},
        {"img9", 0, 1, 0, true},   // no feature bundle: ignored
    };
    const AssociationPartition p = partition("source", outcomes, features);
    REQUIRE(p.f_a.size() == 1);
    CHECK(p.f_a[0].image_id == "img0");
    CHECK(p.f_a[0].associated);
    REQUIRE(p.f_na.size() == 2);

    // membership never depends on feature values
    std::vector<InstanceFeatures> scrambled = features;
    scrambled[0].per_layer["stage1"].first = {9.0f, -9.0f};
    const AssociationPartition q = partition("source", outcomes, scrambled);
    CHECK(q.f_a.size() == p.f_a.size());
    CHECK(q.f_na.size() == p.f_na.size());
}

TEST_CASE("balance_sample") {
    std::vector<InstanceFeatures> features;
    for (int i = 0; i < 10; ++i) features.push_back(bundle("img" + std::to_string(i), 0, 0));
    std::vector<AssociationRecord> f_a, f_na;
    for (int i = 0; i < 3; ++i)
        f_a.push_back({"d", "a" + std::to_string(i), 0, 0, 0, true, &features[static_cast<size_t>(i)]});
    for (int i = 0; i < 8; ++i)
        f_na.push_back({"d", "n" + std::to_string(i), 0, 0, 0, false, &features[static_cast<size_t>(i)]});

    SUBCASE("subset size equals |F_a|, deterministic per seed") {
        const BalancedSample s1 = balance_sample(f_a, f_na, 42);
        const BalancedSample s2 = balance_sample(f_a, f_na, 42);
        CHECK(s1.records.size() == 3);
        CHECK(!s1.low_support);
        REQUIRE(s1.records.size() == s2.records.size());
        for (size_t i = 0; i < s1.records.size(); ++i)
            CHECK(s1.records[i].image_id == s2.records[i].image_id);
    }
    SUBCASE("equal sizes return F_na unchanged") {
        std::vector<AssociationRecord> small(f_na.begin(), f_na.begin() + 3);
        const BalancedSample s = balance_sample(f_a, small, 1);
        CHECK(s.records.size() == 3);
        CHECK(!s.low_support);
    }
    SUBCASE("short F_na flags low support") {
        std::vector<AssociationRecord> small(f_na.begin(), f_na.begin() + 2);
        const BalancedSample s = balance_sample(f_a, small, 1);
        CHECK(s.records.size() == 2);
        CHECK(s.low_support);
    }
    SUBCASE("empty F_a gives empty subset") {
        CHECK(balance_sample({}, f_na, 1).records.empty());
    }
}

TEST_CASE("feature store round-trips through disk") {
    FeatureStore store;
    store.domain = "source";
    store.layers = {"stage1"};
    store.fg_names = {"disc", "triangle"};
    store.bg_names = {"stripes", "dots"};
    store.trial_images = {{"img0", "img1"}, {"img1"}};
    store.features = {bundle("img0", 0, 1), bundle("img1", 0, 1)};
    store.outcomes = {{"img0", 0, 1, 0, true}, {"img1", 0, 1, 0, false}};
    PairStats ps;
    ps.fg = 1;
    ps.bg = 0;
    ps.tp = 2;
    ps.drops = 1;
    ps.low_support = true;
    ps.per_trial = {{2, 1}, {1, 0}};
    store.pair_stats = {ps};
    store.skipped_bg_undefined = 3;

    const fs::path dir = fs::temp_directory_path() / "ctxbias_store_test";
    fs::remove_all(dir);
    store.save(dir.string());

    const FeatureStore back = FeatureStore::load(dir.string());
    CHECK(back.domain == "source");
    CHECK(back.fg_names == store.fg_names);
    CHECK(back.trial_images == store.trial_images);
    CHECK(back.skipped_bg_undefined == 3);
    REQUIRE(back.pair_stats.size() == 1);
    CHECK(back.pair_stats[0].per_trial[0].drops == 1);
    CHECK(back.trial_drop_rate(1, 0, 0) == doctest::Approx(0.5));

    const AssociationPartition p = back.pair_partition(1, 0, std::nullopt);
    REQUIRE(p.f_a.size() == 1);
    REQUIRE(p.f_na.size() == 1);
    CHECK(p.f_a[0].features->per_layer.at("stage1").first == std::vector<float>{1.0f, 2.0f});

    // trial 1 restricts to img1 only
    const AssociationPartition t1 = back.pair_partition(1, 0, 1);
    CHECK(t1.f_a.empty());
    CHECK(t1.f_na.size() == 1);

    CHECK_THROWS_AS(FeatureStore::load((dir / "missing").string()), pipeline_error);
}
