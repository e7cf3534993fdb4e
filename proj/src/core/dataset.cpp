#include "ctxbias/core/dataset.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ctxbias/core/png.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace ctxbias {

namespace {

// Boxes in manifests are integer pixel values whenever possible, so that
// write/read/write round-trips are byte-identical.
ordered_json box_to_json(const Box& b) {
    auto num = [](double v) -> ordered_json {
        if (v == std::floor(v) && std::abs(v) < 1e15) return static_cast<std::int64_t>(v);
        return v;
    };
    return ordered_json::array({num(b.x), num(b.y), num(b.w), num(b.h)});
}

Box box_from_json(const json& j) {
    if (!j.is_array() || j.size() != 4) throw schema_error("bbox must be [x,y,w,h]");
    return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace

Dataset read_dataset(const std::string& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw load_error("dataset: cannot open manifest: " + manifest_path);
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::exception& e) {
        throw schema_error("dataset: manifest is not valid JSON: " + std::string(e.what()));
    }
    const fs::path root = fs::path(manifest_path).parent_path();

    Dataset d;
    try {
        for (const auto& n : doc.at("label_space").at("fg"))
            d.label_space.fg_classes.push_back(n.get<std::string>());
        for (const auto& n : doc.at("label_space").at("bg"))
            d.label_space.bg_labels.push_back(n.get<std::string>());
    } catch (const json::exception& e) {
        throw schema_error("dataset: bad label_space: " + std::string(e.what()));
    }
    d.label_space.validate();

    if (!doc.contains("images")) throw schema_error("dataset: manifest missing 'images'");
    for (const auto& jim : doc.at("images")) {
        ImageRecord rec;
        try {
            rec.id = jim.at("id").get<std::string>();
            rec.file = jim.at("file").get<std::string>();
            rec.semantic_map_file = jim.at("semantic_map_file").get<std::string>();
        } catch (const json::exception& e) {
            throw schema_error("dataset: bad image entry: " + std::string(e.what()));
        }
        const int w = jim.at("width").get<int>();
        const int h = jim.at("height").get<int>();

        const fs::path img_path = root / rec.file;
        if (!fs::exists(img_path))
            throw load_error("dataset: missing image file: " + img_path.string());
        rec.pixels = png::read(img_path.string());
        if (rec.pixels.width != w || rec.pixels.height != h)
            throw schema_error("dataset: image size mismatch for " + rec.id);

        const fs::path sem_path = root / rec.semantic_map_file;
        if (!fs::exists(sem_path))
            throw load_error("dataset: missing semantic map file: " + sem_path.string());
        rec.semantic = png::read_semantic(sem_path.string(), rec.id);
        if (rec.semantic.width != w || rec.semantic.height != h)
            throw schema_error("dataset: semantic map size mismatch for " + rec.id);
        for (auto id : rec.semantic.labels)
            if (id >= d.label_space.num_labels())
                throw schema_error("dataset: semantic label id " + std::to_string(id) +
                                   " outside label space in " + rec.id);

        if (jim.contains("instances")) {
            for (const auto& jin : jim.at("instances")) {
                InstanceAnnotation ann;
                ann.image_id = rec.id;
                ann.class_id = d.label_space.fg_id_of(jin.at("class").get<std::string>());
                ann.bbox = box_from_json(jin.at("bbox"));
                const std::string mask_file = jin.at("instance_mask_file").get<std::string>();
                const fs::path mask_path = root / mask_file;
                if (!fs::exists(mask_path))
                    throw load_error("dataset: missing mask file: " + mask_path.string());
                ann.instance_mask = png::read_mask(mask_path.string());
                ann.validate(w, h);
                rec.instances.push_back(std::move(ann));
                rec.instance_mask_files.push_back(mask_file);
            }
        }
        d.images.push_back(std::move(rec));
    }
    return d;
}

void write_dataset(const Dataset& d, const std::string& manifest_path) {
    const fs::path root = fs::path(manifest_path).parent_path();
    if (!root.empty()) fs::create_directories(root);

    ordered_json doc;
    doc["label_space"]["fg"] = d.label_space.fg_classes;
    doc["label_space"]["bg"] = d.label_space.bg_labels;
    doc["images"] = ordered_json::array();

    for (const auto& rec : d.images) {
        fs::create_directories((root / rec.file).parent_path());
        png::write_image((root / rec.file).string(), rec.pixels);
        fs::create_directories((root / rec.semantic_map_file).parent_path());
        png::write_semantic((root / rec.semantic_map_file).string(), rec.semantic);

        ordered_json jim;
        jim["id"] = rec.id;
        jim["file"] = rec.file;
        jim["width"] = rec.pixels.width;
        jim["height"] = rec.pixels.height;
        jim["semantic_map_file"] = rec.semantic_map_file;
        jim["instances"] = ordered_json::array();
        for (size_t i = 0; i < rec.instances.size(); ++i) {
            const auto& ann = rec.instances[i];
            const std::string& mask_file = rec.instance_mask_files[i];
            fs::create_directories((root / mask_file).parent_path());
            png::write_mask((root / mask_file).string(), ann.instance_mask);

            ordered_json jin;
            jin["class"] = d.label_space.fg_classes[static_cast<size_t>(ann.class_id)];
            jin["bbox"] = box_to_json(ann.bbox);
            jin["instance_mask_file"] = mask_file;
            jim["instances"].push_back(std::move(jin));
        }
        doc["images"].push_back(std::move(jim));
    }

    std::ofstream f(manifest_path, std::ios::trunc);
    if (!f) throw load_error("dataset: cannot open manifest for write: " + manifest_path);
    f << doc.dump(2) << "\n";
}

}  // namespace ctxbias
