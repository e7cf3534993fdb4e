#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ctxbias/core/dataset.hpp"
#include "ctxbias/core/types.hpp"

namespace ctxbias::synth {

enum class ShapeKind { disc, triangle, cross, square };
enum class TextureKind { stripes, dots, checker, flat };

ShapeKind shape_from_name(const std::string& name);
TextureKind texture_from_name(const std::string& name);

struct FgClassSpec {
    std::string name;
    ShapeKind shape = ShapeKind::disc;
    int min_size = 10;
    int max_size = 16;
};

struct BgLabelSpec {
    std::string name;
    TextureKind texture = TextureKind::flat;
};

struct DomainPerturb {
    double brightness_shift = 0.0;   // added to every pixel, u8 units
    double texture_swap_prob = 0.0;  // per-region probability of the alternate palette
};

// Scenes are a 2x2 grid of textured background regions. Each object is
// placed fully inside one region whose label is drawn from the
// association_table row of the object's class, which plants an exact,
// auditable P(bg | fg) co-occurrence.
struct SceneSpec {
    int image_size = 64;  // square, multiple of 8
    std::vector<FgClassSpec> fg_classes;
    std::vector<BgLabelSpec> bg_labels;
    // domain name -> row-stochastic matrix [fg][bg] of P(bg | fg)
    std::map<std::string, std::vector<std::vector<double>>> association_table;
    std::map<std::string, DomainPerturb> perturbations;
    int min_objects = 1;
    int max_objects = 3;
    double noise_sigma = 8.0;  // additive gaussian pixel noise, u8 units
    int fg_level = 215;        // foreground brightness; lower values force
                               // the detector to lean on surrounding context
    std::uint64_t seed = 1;

    void validate() const;
    LabelSpace label_space() const;
};

// Deterministic per (spec.seed, domain, image index). Every image carries a
// full semantic map and per-instance masks consistent with it.
Dataset generate(const SceneSpec& spec, int n_images, const DomainId& domain);

// Object-free texture collages for the Q1 image-space background pool.
ImageU8 generate_bg_image(const SceneSpec& spec, int index);

}  // namespace ctxbias::synth
