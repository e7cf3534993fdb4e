#pragma once

#include <string>
#include <vector>

#include "ctxbias/core/types.hpp"

namespace ctxbias {

// One image with its rasters and annotations, fully loaded.
struct ImageRecord {
    std::string id;
    std::string file;               // path relative to the manifest
    std::string semantic_map_file;  // path relative to the manifest
    ImageU8 pixels;
    SemanticMap semantic;
    std::vector<InstanceAnnotation> instances;
    std::vector<std::string> instance_mask_files;  // parallel to `instances`
};

struct Dataset {
    LabelSpace label_space;
    std::vector<ImageRecord> images;

    size_t instance_count() const {
        size_t n = 0;
        for (const auto& im : images) n += im.instances.size();
        return n;
    }
};

// Manifest schema (JSON):
//   {label_space: {fg: [...], bg: [...]},
//    images: [{id, file, width, height, semantic_map_file,
//              instances: [{class, bbox: [x,y,w,h], instance_mask_file}]}]}
// All file paths are relative to the manifest's directory.
Dataset read_dataset(const std::string& manifest_path);

// Writes the manifest plus every raster (image, semantic map, instance
// masks). write(read(write(d))) is byte-identical.
void write_dataset(const Dataset& d, const std::string& manifest_path);

}  // namespace ctxbias
