#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctxbias/core/error.hpp"

namespace ctxbias {

// Axis-aligned box, (x, y) top-left corner, in pixels.
struct Box {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double area() const { return w * h; }
    double x2() const { return x + w; }
    double y2() const { return y + h; }
};

// Intersection over union of two positive-area boxes. Symmetric, in [0,1].
inline double iou(const Box& a, const Box& b) {
    if (a.area() <= 0.0 || b.area() <= 0.0)
        throw numeric_error("iou: boxes must have positive area");
    const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return inter / uni;
}

// Binary raster, row-major, one byte per pixel (0 or 1).
struct Mask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> bits;

    Mask() = default;
    Mask(int w, int h) : width(w), height(h), bits(static_cast<size_t>(w) * h, 0) {}

    std::uint8_t at(int x, int y) const { return bits[static_cast<size_t>(y) * width + x]; }
    void set(int x, int y, std::uint8_t v) { bits[static_cast<size_t>(y) * width + x] = v; }
    size_t count() const {
        size_t n = 0;
        for (auto b : bits) n += (b != 0);
        return n;
    }
    bool empty_mask() const { return count() == 0; }
};

// Interleaved 8-bit image, row-major, `channels` = 1 (gray) or 3 (RGB).
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> data;

    ImageU8() = default;
    ImageU8(int w, int h, int c)
        : width(w), height(h), channels(c), data(static_cast<size_t>(w) * h * c, 0) {}

    std::uint8_t at(int x, int y, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    void set(int x, int y, int c, std::uint8_t v) {
        data[(static_cast<size_t>(y) * width + x) * channels + c] = v;
    }
};

// Foreground classes and background labels with dense, disjoint integer ids.
// fg ids are [0, fg.size()), bg ids are [fg.size(), fg.size()+bg.size()).
struct LabelSpace {
    std::vector<std::string> fg_classes;
    std::vector<std::string> bg_labels;

    int num_fg() const { return static_cast<int>(fg_classes.size()); }
    int num_bg() const { return static_cast<int>(bg_labels.size()); }
    int num_labels() const { return num_fg() + num_bg(); }

    int bg_id(int bg_index) const { return num_fg() + bg_index; }
    bool is_fg_id(int id) const { return id >= 0 && id < num_fg(); }
    bool is_bg_id(int id) const { return id >= num_fg() && id < num_labels(); }

    const std::string& name(int id) const {
        if (is_fg_id(id)) return fg_classes[static_cast<size_t>(id)];
        if (is_bg_id(id)) return bg_labels[static_cast<size_t>(id - num_fg())];
        throw schema_error("label id " + std::to_string(id) + " outside label space");
    }

    int fg_id_of(const std::string& n) const {
        for (int i = 0; i < num_fg(); ++i)
            if (fg_classes[static_cast<size_t>(i)] == n) return i;
        throw schema_error("unknown fg class '" + n + "'");
    }
    int bg_id_of(const std::string& n) const {
        for (int i = 0; i < num_bg(); ++i)
            if (bg_labels[static_cast<size_t>(i)] == n) return bg_id(i);
        throw schema_error("unknown bg label '" + n + "'");
    }

    void validate() const {
        if (fg_classes.empty()) throw schema_error("label space: no fg classes");
        std::vector<std::string> all = fg_classes;
        all.insert(all.end(), bg_labels.begin(), bg_labels.end());
        std::sort(all.begin(), all.end());
        if (std::adjacent_find(all.begin(), all.end()) != all.end())
            throw schema_error("label space: duplicate label name");
    }
};

// One ground-truth object instance.
struct InstanceAnnotation {
    std::string image_id;
    int class_id = 0;  // fg class id
    Box bbox;
    Mask instance_mask;  // image-sized binary raster

    void validate(int img_w, int img_h) const {
        if (bbox.area() <= 0.0) throw schema_error("annotation in " + image_id + ": empty bbox");
        if (instance_mask.width != img_w || instance_mask.height != img_h)
            throw schema_error("annotation in " + image_id + ": mask size mismatch");
        if (instance_mask.empty_mask())
            throw schema_error("annotation in " + image_id + ": empty instance mask");
    }
};

// Per-image semantic label map; every pixel carries a LabelSpace id.
struct SemanticMap {
    std::string image_id;
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> labels;  // row-major ids

    std::uint8_t at(int x, int y) const { return labels[static_cast<size_t>(y) * width + x]; }

    // Binary mask of all pixels with the given label id.
    Mask label_mask(int id) const {
        Mask m(width, height);
        for (size_t i = 0; i < labels.size(); ++i) m.bits[i] = (labels[i] == id) ? 1 : 0;
        return m;
    }

    bool contains_label(int id) const {
        for (auto v : labels)
            if (v == id) return true;
        return false;
    }
};

// One model prediction, optionally matched against a ground-truth annotation.
struct DetectionRecord {
    std::string image_id;
    int class_id = 0;
    Box bbox;
    double confidence = 0.0;           // in [0,1]
    int cell_index = -1;               // flat head-grid cell the box decoded from
    std::optional<int> matched_gt;     // index into the image's annotation list
    std::optional<double> iou_with_match;

    bool is_true_positive() const { return matched_gt.has_value(); }
};

// Named dataset split / domain key.
struct DomainId {
    std::string name;

    bool operator==(const DomainId& o) const { return name == o.name; }
};

}  // namespace ctxbias
