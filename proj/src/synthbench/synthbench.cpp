#include "ctxbias/synthbench/synthbench.hpp"

#include <algorithm>
#include <cmath>

#include "ctxbias/core/rng.hpp"

namespace ctxbias::synth {

namespace {

struct Color {
    int r, g, b;
};

Color clamp_color(int r, int g, int b) {
    return {std::clamp(r, 0, 255), std::clamp(g, 0, 255), std::clamp(b, 0, 255)};
}

// Two palettes per texture; the alternate one realizes the domain's
// texture-swap perturbation.
struct Palette {
    Color primary, secondary;
};

Palette texture_palette(TextureKind kind, bool alternate) {
    switch (kind) {
        case TextureKind::stripes:
            return alternate ? Palette{{140, 70, 70}, {200, 120, 120}}
                             : Palette{{70, 70, 150}, {120, 120, 200}};
        case TextureKind::dots:
            return alternate ? Palette{{120, 60, 120}, {200, 140, 200}}
                             : Palette{{60, 120, 60}, {140, 200, 140}};
        case TextureKind::checker:
            return alternate ? Palette{{60, 110, 130}, {110, 160, 180}}
                             : Palette{{130, 90, 50}, {180, 140, 90}};
        case TextureKind::flat:
        default:
            return alternate ? Palette{{150, 150, 110}, {150, 150, 110}}
                             : Palette{{100, 100, 100}, {100, 100, 100}};
    }
}

void draw_texture(ImageU8& img, TextureKind kind, const Palette& pal, int x0, int y0, int x1,
                  int y1, int phase) {
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            Color c = pal.primary;
            switch (kind) {
                case TextureKind::stripes:
                    if (((y + phase) / 4) % 2 == 0) c = pal.secondary;
                    break;
                case TextureKind::dots: {
                    const int cx = (x + phase) % 8 - 4;
                    const int cy = (y + phase) % 8 - 4;
                    if (cx * cx + cy * cy <= 6) c = pal.secondary;
                    break;
                }
                case TextureKind::checker:
                    if ((((x + phase) / 4) + ((y + phase) / 4)) % 2 == 0) c = pal.secondary;
                    break;
                case TextureKind::flat:
                    break;
            }
            img.set(x, y, 0, static_cast<std::uint8_t>(c.r));
            img.set(x, y, 1, static_cast<std::uint8_t>(c.g));
            img.set(x, y, 2, static_cast<std::uint8_t>(c.b));
        }
    }
}

// Rasterizes a shape centered at (cx, cy) with size s into `mask`.
void draw_shape(Mask& mask, ShapeKind kind, int cx, int cy, int s) {
    const double half = s / 2.0;
    for (int y = cy - s; y <= cy + s; ++y) {
        for (int x = cx - s; x <= cx + s; ++x) {
            if (x < 0 || y < 0 || x >= mask.width || y >= mask.height) continue;
            const double dx = x - cx, dy = y - cy;
            bool inside = false;
            switch (kind) {
                case ShapeKind::disc:
                    inside = dx * dx + dy * dy <= half * half;
                    break;
                case ShapeKind::triangle: {
                    // upward triangle: apex at (cx, cy-half), base at cy+half
                    const double t = (dy + half) / s;  // 0 at apex row, 1 at base
                    inside = dy >= -half && dy <= half && t >= 0.0 && std::abs(dx) <= t * half;
                    break;
                }
                case ShapeKind::cross: {
                    const double bar = std::max(1.0, s / 3.0) / 2.0;
                    inside = (std::abs(dx) <= bar && std::abs(dy) <= half) ||
                             (std::abs(dy) <= bar && std::abs(dx) <= half);
                    break;
                }
                case ShapeKind::square:
                    inside = std::abs(dx) <= half && std::abs(dy) <= half;
                    break;
            }
            if (inside) mask.set(x, y, 1);
        }
    }
}

Box tight_bbox(const Mask& mask) {
    int min_x = mask.width, min_y = mask.height, max_x = -1, max_y = -1;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(x, y)) {
                min_x = std::min(min_x, x);
                min_y = std::min(min_y, y);
                max_x = std::max(max_x, x);
                max_y = std::max(max_y, y);
            }
    if (max_x < 0) throw numeric_error("synthbench: drew an empty shape");
    return Box{static_cast<double>(min_x), static_cast<double>(min_y),
               static_cast<double>(max_x - min_x + 1), static_cast<double>(max_y - min_y + 1)};
}

}  // namespace

ShapeKind shape_from_name(const std::string& name) {
    if (name == "disc") return ShapeKind::disc;
    if (name == "triangle") return ShapeKind::triangle;
    if (name == "cross") return ShapeKind::cross;
    if (name == "square") return ShapeKind::square;
    throw config_error("synthbench: unknown shape kind '" + name + "'");
}

TextureKind texture_from_name(const std::string& name) {
    if (name == "stripes") return TextureKind::stripes;
    if (name == "dots") return TextureKind::dots;
    if (name == "checker") return TextureKind::checker;
    if (name == "flat") return TextureKind::flat;
    throw config_error("synthbench: unknown texture kind '" + name + "'");
}

void SceneSpec::validate() const {
    if (image_size < 16 || image_size % 8 != 0)
        throw config_error("synthbench: image_size must be a multiple of 8, >= 16");
    if (fg_classes.size() < 2) throw config_error("synthbench: need at least 2 fg classes");
    if (bg_labels.size() < 2) throw config_error("synthbench: need at least 2 bg labels");
    if (association_table.size() < 2)
        throw config_error("synthbench: need association rows for at least 2 domains");
    for (const auto& [domain, rows] : association_table) {
        if (rows.size() != fg_classes.size())
            throw config_error("synthbench: association rows for '" + domain +
                               "' must cover every fg class");
        for (const auto& row : rows) {
            if (row.size() != bg_labels.size())
                throw config_error("synthbench: association row width mismatch in '" + domain + "'");
            double sum = 0.0;
            for (double v : row) {
                if (v < 0.0) throw config_error("synthbench: negative association probability");
                sum += v;
            }
            if (std::abs(sum - 1.0) > 1e-6)
                throw config_error("synthbench: association row must sum to 1 in '" + domain + "'");
        }
    }
    if (min_objects < 1 || max_objects < min_objects || max_objects > 4)
        throw config_error("synthbench: objects per image must satisfy 1 <= min <= max <= 4");
    for (const auto& f : fg_classes) {
        if (f.min_size < 4 || f.max_size < f.min_size)
            throw config_error("synthbench: bad size range for class " + f.name);
        if (f.max_size + 4 > image_size / 2)
            throw config_error("synthbench: objects of class " + f.name +
                               " cannot fit inside a background region");
    }
}

LabelSpace SceneSpec::label_space() const {
    LabelSpace ls;
    for (const auto& f : fg_classes) ls.fg_classes.push_back(f.name);
    for (const auto& b : bg_labels) ls.bg_labels.push_back(b.name);
    ls.validate();
    return ls;
}

Dataset generate(const SceneSpec& spec, int n_images, const DomainId& domain) {
    spec.validate();
    if (n_images < 1) throw config_error("synthbench: n_images must be >= 1");
    const auto assoc_it = spec.association_table.find(domain.name);
    if (assoc_it == spec.association_table.end())
        throw config_error("synthbench: no association row for domain '" + domain.name + "'");
    const auto& assoc = assoc_it->second;
    DomainPerturb perturb;
    if (auto it = spec.perturbations.find(domain.name); it != spec.perturbations.end())
        perturb = it->second;

    Dataset out;
    out.label_space = spec.label_space();
    const int S = spec.image_size;
    const int R = S / 2;  // region edge

    for (int idx = 0; idx < n_images; ++idx) {
        Rng rng(derive_seed(spec.seed, "image:" + domain.name, static_cast<std::uint64_t>(idx)));

        ImageRecord rec;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s_%05d", domain.name.c_str(), idx);
        rec.id = buf;
        rec.file = "images/" + rec.id + ".png";
        rec.semantic_map_file = "semantic/" + rec.id + ".png";
        rec.pixels = ImageU8(S, S, 3);
        rec.semantic.image_id = rec.id;
        rec.semantic.width = S;
        rec.semantic.height = S;
        rec.semantic.labels.assign(static_cast<size_t>(S) * S, 0);

        // choose objects, their regions and the region labels they force
        const int n_obj = rng.next_int(spec.min_objects, spec.max_objects);
        const std::vector<int> obj_regions = rng.sample_without_replacement(4, n_obj);
        std::vector<int> region_label(4, -1);
        std::vector<std::pair<int, int>> objects;  // (fg class, region)
        for (int j = 0; j < n_obj; ++j) {
            const int cls = rng.next_int(0, static_cast<int>(spec.fg_classes.size()) - 1);
            const int bg = rng.next_weighted(assoc[static_cast<size_t>(cls)]);
            region_label[static_cast<size_t>(obj_regions[static_cast<size_t>(j)])] = bg;
            objects.emplace_back(cls, obj_regions[static_cast<size_t>(j)]);
        }
        for (int r = 0; r < 4; ++r)
            if (region_label[static_cast<size_t>(r)] < 0)
                region_label[static_cast<size_t>(r)] =
                    rng.next_int(0, static_cast<int>(spec.bg_labels.size()) - 1);

        // render regions
        for (int r = 0; r < 4; ++r) {
            const int x0 = (r % 2) * R, y0 = (r / 2) * R;
            const int bg = region_label[static_cast<size_t>(r)];
            const bool alternate = rng.next_double() < perturb.texture_swap_prob;
            const Palette pal = texture_palette(spec.bg_labels[static_cast<size_t>(bg)].texture, alternate);
            const int phase = rng.next_int(0, 7);
            draw_texture(rec.pixels, spec.bg_labels[static_cast<size_t>(bg)].texture, pal, x0, y0,
                         x0 + R, y0 + R, phase);
            const std::uint8_t sem_id =
                static_cast<std::uint8_t>(out.label_space.bg_id(bg));
            for (int y = y0; y < y0 + R; ++y)
                for (int x = x0; x < x0 + R; ++x)
                    rec.semantic.labels[static_cast<size_t>(y) * S + x] = sem_id;
        }

        // place objects fully inside their regions
        for (const auto& [cls, region] : objects) {
            const FgClassSpec& f = spec.fg_classes[static_cast<size_t>(cls)];
            const int size = rng.next_int(f.min_size, f.max_size);
            const int margin = size / 2 + 2;
            const int x0 = (region % 2) * R, y0 = (region / 2) * R;
            if (x0 + margin > x0 + R - margin)
                throw config_error("synthbench: object larger than region");
            const int cx = rng.next_int(x0 + margin, x0 + R - margin - 1);
            const int cy = rng.next_int(y0 + margin, y0 + R - margin - 1);

            InstanceAnnotation ann;
            ann.image_id = rec.id;
            ann.class_id = cls;
            ann.instance_mask = Mask(S, S);
            draw_shape(ann.instance_mask, f.shape, cx, cy, size);
            ann.bbox = tight_bbox(ann.instance_mask);

            // shared foreground color family with small jitter: shape (and
            // context), not color, identifies the class
            const int jitter = rng.next_int(-15, 15);
            const Color fg_color = clamp_color(spec.fg_level + jitter, spec.fg_level + jitter,
                                               spec.fg_level - 5 + jitter);
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x)
                    if (ann.instance_mask.at(x, y)) {
                        rec.pixels.set(x, y, 0, static_cast<std::uint8_t>(fg_color.r));
                        rec.pixels.set(x, y, 1, static_cast<std::uint8_t>(fg_color.g));
                        rec.pixels.set(x, y, 2, static_cast<std::uint8_t>(fg_color.b));
                        rec.semantic.labels[static_cast<size_t>(y) * S + x] =
                            static_cast<std::uint8_t>(cls);
                    }

            rec.instance_mask_files.push_back("masks/" + rec.id + "_" +
                                              std::to_string(rec.instances.size()) + ".png");
            rec.instances.push_back(std::move(ann));
        }

        // domain brightness shift plus pixel noise
        for (auto& v : rec.pixels.data) {
            const double noisy = v + perturb.brightness_shift + rng.next_gaussian() * spec.noise_sigma;
            v = static_cast<std::uint8_t>(std::clamp(noisy, 0.0, 255.0));
        }

        out.images.push_back(std::move(rec));
    }
    return out;
}

ImageU8 generate_bg_image(const SceneSpec& spec, int index) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, "bgpool", static_cast<std::uint64_t>(index)));
    const int S = spec.image_size;
    const int R = S / 2;
    ImageU8 img(S, S, 3);
    for (int r = 0; r < 4; ++r) {
        const int x0 = (r % 2) * R, y0 = (r / 2) * R;
        const int bg = rng.next_int(0, static_cast<int>(spec.bg_labels.size()) - 1);
        const bool alternate = rng.next_double() < 0.5;
        const Palette pal = texture_palette(spec.bg_labels[static_cast<size_t>(bg)].texture, alternate);
        draw_texture(img, spec.bg_labels[static_cast<size_t>(bg)].texture, pal, x0, y0, x0 + R,
                     y0 + R, rng.next_int(0, 7));
    }
    for (auto& v : img.data) {
        const double noisy = v + rng.next_gaussian() * spec.noise_sigma;
        v = static_cast<std::uint8_t>(std::clamp(noisy, 0.0, 255.0));
    }
    return img;
}

}  // namespace ctxbias::synth
