#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ctxbias/core/dataset.hpp"
#include "ctxbias/core/png.hpp"
#include "ctxbias/core/rng.hpp"
#include "ctxbias/core/tensor.hpp"
#include "ctxbias/core/types.hpp"

using namespace ctxbias;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("ctxbias_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Tiny two-image dataset built by hand; 16x16, one instance per image.
Dataset tiny_dataset() {
    Dataset d;
    d.label_space.fg_classes = {"disc", "triangle"};
    d.label_space.bg_labels = {"stripes", "flat"};

    for (int i = 0; i < 2; ++i) {
        ImageRecord rec;
        rec.id = "img" + std::to_string(i);
        rec.file = "images/" + rec.id + ".png";
        rec.semantic_map_file = "semantic/" + rec.id + ".png";
        rec.pixels = ImageU8(16, 16, 3);
        for (size_t k = 0; k < rec.pixels.data.size(); ++k)
            rec.pixels.data[k] = static_cast<std::uint8_t>((k * 7 + static_cast<size_t>(i)) % 256);

        rec.semantic.image_id = rec.id;
        rec.semantic.width = 16;
        rec.semantic.height = 16;
        rec.semantic.labels.assign(256, static_cast<std::uint8_t>(d.label_space.bg_id(i)));

        InstanceAnnotation ann;
        ann.image_id = rec.id;
        ann.class_id = i;
        ann.bbox = Box{4, 4, 5, 6};
        ann.instance_mask = Mask(16, 16);
        for (int y = 4; y < 10; ++y)
            for (int x = 4; x < 9; ++x) {
                ann.instance_mask.set(x, y, 1);
                rec.semantic.labels[static_cast<size_t>(y) * 16 + x] =
                    static_cast<std::uint8_t>(i);
            }
        rec.instances.push_back(ann);
        rec.instance_mask_files.push_back("masks/" + rec.id + "_0.png");
        d.images.push_back(std::move(rec));
    }
    return d;
}

}  // namespace

TEST_CASE("iou examples and rasterized brute-force property") {
    const Box a{0, 0, 2, 2};
    CHECK(iou(a, a) == doctest::Approx(1.0));
    CHECK(iou(Box{0, 0, 2, 2}, Box{10, 10, 2, 2}) == doctest::Approx(0.0));
    CHECK(iou(Box{0, 0, 2, 2}, Box{1, 0, 2, 2}) == doctest::Approx(2.0 / 6.0));

    // integer boxes: analytic iou equals pixel-counted intersection / union
    Rng rng(123);
    for (int t = 0; t < 200; ++t) {
        const Box p{static_cast<double>(rng.next_int(0, 20)), static_cast<double>(rng.next_int(0, 20)),
                    static_cast<double>(rng.next_int(1, 10)), static_cast<double>(rng.next_int(1, 10))};
        const Box q{static_cast<double>(rng.next_int(0, 20)), static_cast<double>(rng.next_int(0, 20)),
                    static_cast<double>(rng.next_int(1, 10)), static_cast<double>(rng.next_int(1, 10))};
        size_t inter = 0, uni = 0;
        for (int y = 0; y < 40; ++y)
            for (int x = 0; x < 40; ++x) {
                const bool in_p = x >= p.x && x < p.x2() && y >= p.y && y < p.y2();
                const bool in_q = x >= q.x && x < q.x2() && y >= q.y && y < q.y2();
                inter += in_p && in_q;
                uni += in_p || in_q;
            }
        const double brute = static_cast<double>(inter) / static_cast<double>(uni);
        CHECK(iou(p, q) == doctest::Approx(brute).epsilon(1e-12));
        CHECK(iou(p, q) == doctest::Approx(iou(q, p)));
        CHECK(iou(p, q) >= 0.0);
        CHECK(iou(p, q) <= 1.0);
    }
}

TEST_CASE("png round-trips gray and rgb rasters") {
    const auto dir = temp_dir("png");
    Rng rng(7);

    ImageU8 img(23, 17, 3);
    for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.next_below(256));
    png::write_image((dir / "a.png").string(), img);
    const ImageU8 back = png::read((dir / "a.png").string());
    CHECK(back.width == img.width);
    CHECK(back.height == img.height);
    CHECK(back.channels == 3);
    CHECK(back.data == img.data);

    Mask m(9, 11);
    for (auto& v : m.bits) v = static_cast<std::uint8_t>(rng.next_below(2));
    png::write_mask((dir / "m.png").string(), m);
    CHECK(png::read_mask((dir / "m.png").string()).bits == m.bits);
}

TEST_CASE("tensor file round-trip is bit-exact") {
    const auto dir = temp_dir("cbt");

    SUBCASE("minimal 1x1x1 tensor") {
        FeatureTensor t;
        t.layer = "stage1";
        t.dims = {1, 1, 1};
        t.data = {0.5f};
        t.provenance = {"img0", std::nullopt, "source", "none"};
        const std::string path = (dir / "t.cbt").string();
        io::write_tensor(t, path);
        // header: 4 magic + 4 head + 3*4 dims, payload: 4 bytes
        CHECK(fs::file_size(path) == 24);
        const FeatureTensor back = io::read_tensor(path);
        CHECK(back.data == t.data);
        CHECK(back.dims == t.dims);
        CHECK(back.layer == t.layer);
        CHECK(back.provenance.domain_id == "source");
    }

    SUBCASE("dimension mismatch is rejected") {
        FeatureTensor t;
        t.layer = "stage1";
        t.dims = {2, 2, 2};
        t.data.assign(7, 0.0f);
        CHECK_THROWS_AS(io::write_tensor(t, (dir / "bad.cbt").string()), format_error);
    }

    SUBCASE("1000 random tensors round-trip bit-exactly") {
        Rng rng(99);
        const std::string path = (dir / "r.cbt").string();
        for (int i = 0; i < 1000; ++i) {
            FeatureTensor t;
            t.layer = "stage" + std::to_string(1 + (i % 4));
            t.dims = {static_cast<std::uint32_t>(rng.next_int(1, 4)),
                      static_cast<std::uint32_t>(rng.next_int(1, 6)),
                      static_cast<std::uint32_t>(rng.next_int(1, 6))};
            t.data.resize(t.size());
            for (auto& v : t.data) v = static_cast<float>(rng.next_uniform(-100.0, 100.0));
            t.provenance = {"img" + std::to_string(i), std::nullopt, "source", "none"};
            io::write_tensor(t, path);
            const FeatureTensor back = io::read_tensor(path);
            REQUIRE(back.dims == t.dims);
            REQUIRE(back.data == t.data);  // bit-exact
        }
    }

    SUBCASE("corrupt files are rejected") {
        const std::string path = (dir / "c.cbt").string();
        {
            std::ofstream f(path, std::ios::binary);
            f << "NOPE1234";
        }
        CHECK_THROWS_AS(io::read_cbt(path), format_error);

        FeatureTensor t;
        t.layer = "stage1";
        t.dims = {1, 2, 2};
        t.data = {1, 2, 3, 4};
        t.provenance = {"x", std::nullopt, "d", "none"};
        io::write_tensor(t, path);
        // truncate payload
        fs::resize_file(path, fs::file_size(path) - 4);
        CHECK_THROWS_AS(io::read_cbt(path), format_error);
    }
}

TEST_CASE("dataset manifest round-trip") {
    const auto dir = temp_dir("dataset");
    const std::string manifest = (dir / "manifest.json").string();

    SUBCASE("empty image list is a valid dataset") {
        Dataset d;
        d.label_space.fg_classes = {"disc"};
        d.label_space.bg_labels = {"flat"};
        write_dataset(d, manifest);
        const Dataset back = read_dataset(manifest);
        CHECK(back.images.empty());
        CHECK(back.label_space.fg_classes == d.label_space.fg_classes);
    }

    SUBCASE("write-read-write is byte identical") {
        write_dataset(tiny_dataset(), manifest);
        const auto bytes1 = slurp(manifest);
        const Dataset back = read_dataset(manifest);
        const std::string manifest2 = (dir / "copy" / "manifest.json").string();
        Dataset copy = back;
        write_dataset(copy, manifest2);
        CHECK(slurp(manifest2) == bytes1);

        // every raster byte-identical as well
        for (const auto& rec : back.images) {
            CHECK(slurp(dir / rec.file) == slurp(dir / "copy" / rec.file));
            CHECK(slurp(dir / rec.semantic_map_file) ==
                  slurp(dir / "copy" / rec.semantic_map_file));
        }
    }

    SUBCASE("missing mask file is a load error naming the file") {
        write_dataset(tiny_dataset(), manifest);
        fs::remove(dir / "masks" / "img0_0.png");
        try {
            read_dataset(manifest);
            FAIL("expected load_error");
        } catch (const load_error& e) {
            CHECK(std::string(e.what()).find("img0_0.png") != std::string::npos);
        }
    }

    SUBCASE("semantic id outside label space is a schema error") {
        Dataset d = tiny_dataset();
        d.images[0].semantic.labels[0] = 50;
        write_dataset(d, manifest);
        CHECK_THROWS_AS(read_dataset(manifest), schema_error);
    }
}

TEST_CASE("label space invariants") {
    LabelSpace ls;
    ls.fg_classes = {"a", "b"};
    ls.bg_labels = {"c", "d", "e"};
    ls.validate();
    CHECK(ls.num_labels() == 5);
    CHECK(ls.is_fg_id(1));
    CHECK(!ls.is_fg_id(2));
    CHECK(ls.is_bg_id(2));
    CHECK(ls.bg_id_of("d") == 3);
    CHECK(ls.name(4) == "e");

    LabelSpace dup;
    dup.fg_classes = {"a"};
    dup.bg_labels = {"a"};
    CHECK_THROWS_AS(dup.validate(), schema_error);
}
