#include "ctxbias/detector/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ctxbias/core/rng.hpp"
#include "ctxbias/kernels/kernels.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace ctxbias::det {

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void softmax(const float* logits, int n, std::vector<double>& out) {
    out.resize(static_cast<size_t>(n));
    double mx = logits[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(logits[i]));
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        out[static_cast<size_t>(i)] = std::exp(static_cast<double>(logits[i]) - mx);
        sum += out[static_cast<size_t>(i)];
    }
    for (auto& v : out) v /= sum;
}

}  // namespace

std::vector<float> image_to_chw(const ImageU8& image) {
    const size_t hw = static_cast<size_t>(image.width) * image.height;
    std::vector<float> out(3 * hw);
    if (image.channels == 3) {
        for (size_t p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c)
                out[static_cast<size_t>(c) * hw + p] =
                    static_cast<float>(image.data[p * 3 + static_cast<size_t>(c)]) / 255.0f;
    } else if (image.channels == 1) {
        for (size_t p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c)
                out[static_cast<size_t>(c) * hw + p] = static_cast<float>(image.data[p]) / 255.0f;
    } else {
        throw format_error("image_to_chw: unsupported channel count");
    }
    return out;
}

ToyDetector::ToyDetector(const ModelConfig& cfg) : cfg_(cfg) {
    if (cfg_.image_size % 8 != 0) throw config_error("model: image_size must be divisible by 8");
    if (cfg_.num_classes < 1) throw config_error("model: need at least one class");
    int in_c = 3;
    for (int i = 0; i < 4; ++i) {
        ConvLayer l;
        l.name = "stage" + std::to_string(i + 1);
        l.in_c = in_c;
        l.out_c = cfg_.channels[static_cast<size_t>(i)];
        l.k = 3;
        l.stride = i == 0 ? 1 : 2;
        l.w.assign(l.w_count(), 0.0f);
        l.b.assign(static_cast<size_t>(l.out_c), 0.0f);
        in_c = l.out_c;
        names_.push_back(l.name);
        layers_.push_back(std::move(l));
    }
    ConvLayer head;
    head.name = "head";
    head.in_c = in_c;
    head.out_c = cfg_.head_channels();
    head.k = 1;
    head.stride = 1;
    head.w.assign(head.w_count(), 0.0f);
    head.b.assign(static_cast<size_t>(head.out_c), 0.0f);
    layers_.push_back(std::move(head));
}

const std::vector<std::string>& ToyDetector::layer_names() const { return names_; }

int ToyDetector::layer_index(const std::string& name) const {
    for (size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return static_cast<int>(i);
    throw hook_error("unknown layer '" + name + "'");
}

void ToyDetector::init_weights(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "weights"));
    for (auto& l : layers_) {
        const double fan_in = static_cast<double>(l.in_c) * l.k * l.k;
        const double scale = std::sqrt(2.0 / fan_in);
        for (auto& v : l.w) v = static_cast<float>(rng.next_gaussian() * scale);
        std::fill(l.b.begin(), l.b.end(), 0.0f);
    }
    // start objectness biased negative so early training is not flooded
    ConvLayer& head = layers_.back();
    head.b[0] = -2.0f;
}

Mask ToyDetector::downsample_majority(const Mask& mask, int grid_h, int grid_w) {
    Mask out(grid_w, grid_h);
    const int sy = mask.height / grid_h;
    const int sx = mask.width / grid_w;
    for (int gy = 0; gy < grid_h; ++gy) {
        for (int gx = 0; gx < grid_w; ++gx) {
            int count = 0;
            for (int y = gy * sy; y < (gy + 1) * sy; ++y)
                for (int x = gx * sx; x < (gx + 1) * sx; ++x) count += mask.at(x, y) != 0;
            // ties count as masked
            out.set(gx, gy, 2 * count >= sy * sx ? 1 : 0);
        }
    }
    return out;
}

ToyDetector::Forward ToyDetector::forward_chw(const std::vector<float>& image_chw,
                                              const std::vector<AblationHook>& hooks) const {
    const int S = cfg_.image_size;
    if (image_chw.size() != static_cast<size_t>(3) * S * S)
        throw hook_error("forward: image buffer size mismatch");
    for (const auto& h : hooks) {
        layer_index(h.layer);  // validates the name
        if (h.mask.width != S || h.mask.height != S)
            throw hook_error("hook mask must match input image shape");
    }

    Forward f;
    f.image = image_chw;
    const kern::Kernels& K = kern::active();

    const std::vector<float>* cur = &f.image;
    int cur_c = 3, cur_hw = S;
    std::vector<float> pad;
    for (int i = 0; i < 4; ++i) {
        const ConvLayer& l = layers_[static_cast<size_t>(i)];
        kern::Conv3x3Shape shape{cur_c, cur_hw, cur_hw, l.out_c, l.stride};
        pad.resize(static_cast<size_t>(cur_c) * shape.pad_h() * shape.pad_w());
        kern::pad_chw(cur->data(), cur_c, cur_hw, cur_hw, pad.data());

        const int oh = shape.out_h();
        auto& out = f.stage_out[static_cast<size_t>(i)];
        out.assign(static_cast<size_t>(l.out_c) * oh * oh, 0.0f);
        K.conv3x3_fwd(pad.data(), shape, l.w.data(), l.b.data(), out.data());
        K.relu_fwd(out.data(), out.size());

        for (const auto& h : hooks) {
            if (layer_index(h.layer) != i) continue;
            const Mask grid = downsample_majority(h.mask, oh, oh);
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < oh; ++x)
                    if (grid.at(x, y))
                        for (int c = 0; c < l.out_c; ++c)
                            out[(static_cast<size_t>(c) * oh + y) * oh + x] = 0.0f;
        }
        cur = &out;
        cur_c = l.out_c;
        cur_hw = oh;
    }

    const ConvLayer& head = layers_.back();
    f.head.assign(static_cast<size_t>(head.out_c) * cur_hw * cur_hw, 0.0f);
    K.conv1x1_fwd(cur->data(), cur_c, cur_hw * cur_hw, head.w.data(), head.b.data(), head.out_c,
                  f.head.data());
    return f;
}

ToyDetector::Forward ToyDetector::forward_image(const ImageU8& image,
                                                const std::vector<AblationHook>& hooks) const {
    if (image.width != cfg_.image_size || image.height != cfg_.image_size)
        throw hook_error("forward: image size mismatch with model config");
    return forward_chw(image_to_chw(image), hooks);
}

std::vector<DetectionRecord> ToyDetector::decode(const Forward& fwd, const PredictOptions& opt,
                                                 const std::string& image_id) const {
    const int g = cfg_.grid();
    const int K = cfg_.num_classes;
    const size_t hw = static_cast<size_t>(g) * g;
    const double stride = 8.0;

    std::vector<DetectionRecord> cands;
    std::vector<double> probs;
    for (int cy = 0; cy < g; ++cy) {
        for (int cx = 0; cx < g; ++cx) {
            const size_t at = static_cast<size_t>(cy) * g + cx;
            const double obj = sigmoid(fwd.head[0 * hw + at]);
            std::vector<float> cls(static_cast<size_t>(K));
            for (int c = 0; c < K; ++c) cls[static_cast<size_t>(c)] = fwd.head[(5 + static_cast<size_t>(c)) * hw + at];
            softmax(cls.data(), K, probs);
            int best = 0;
            for (int c = 1; c < K; ++c)
                if (probs[static_cast<size_t>(c)] > probs[static_cast<size_t>(best)]) best = c;
            const double score = obj * probs[static_cast<size_t>(best)];
            if (score < opt.score_threshold) continue;

            const double tx = sigmoid(fwd.head[1 * hw + at]);
            const double ty = sigmoid(fwd.head[2 * hw + at]);
            const double tw = std::clamp(static_cast<double>(fwd.head[3 * hw + at]), -4.0, 4.0);
            const double th = std::clamp(static_cast<double>(fwd.head[4 * hw + at]), -4.0, 4.0);
            const double bw = cfg_.base_box * std::exp(tw);
            const double bh = cfg_.base_box * std::exp(th);
            const double px = (cx + tx) * stride;
            const double py = (cy + ty) * stride;

            DetectionRecord d;
            d.image_id = image_id;
            d.class_id = best;
            d.bbox = Box{px - bw / 2.0, py - bh / 2.0, bw, bh};
            d.confidence = score;
            d.cell_index = static_cast<int>(at);
            cands.push_back(std::move(d));
        }
    }

    // NMS per class, deterministic order: score desc, cell index asc
    std::sort(cands.begin(), cands.end(), [](const DetectionRecord& a, const DetectionRecord& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.cell_index < b.cell_index;
    });
    std::vector<DetectionRecord> kept;
    for (const auto& c : cands) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.class_id != c.class_id) continue;
            if (iou(k.bbox, c.bbox) > opt.nms_iou) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(c);
    }
    return kept;
}

std::vector<DetectionRecord> ToyDetector::predict(const ImageU8& image,
                                                  const std::vector<AblationHook>& hooks,
                                                  const PredictOptions& opt) const {
    return decode(forward_image(image, hooks), opt, "");
}

std::map<std::string, FeatureTensor> ToyDetector::capture(
    const ImageU8& image, const std::vector<std::string>& layers,
    const std::vector<AblationHook>& hooks) const {
    const Forward f = forward_image(image, hooks);
    std::map<std::string, FeatureTensor> out;
    for (const auto& name : layers) {
        const int idx = layer_index(name);
        const int sz = stage_size(idx);
        FeatureTensor t;
        t.layer = name;
        t.dims = {static_cast<std::uint32_t>(layers_[static_cast<size_t>(idx)].out_c),
                  static_cast<std::uint32_t>(sz), static_cast<std::uint32_t>(sz)};
        t.data = f.stage_out[static_cast<size_t>(idx)];
        out.emplace(name, std::move(t));
    }
    return out;
}

std::array<std::vector<float>, 4> ToyDetector::backward_score(const Forward& fwd, int cell_index,
                                                              int class_id) const {
    const int g = cfg_.grid();
    const int K = cfg_.num_classes;
    const size_t hw = static_cast<size_t>(g) * g;
    if (cell_index < 0 || static_cast<size_t>(cell_index) >= hw)
        throw numeric_error("backward_score: cell index out of range");
    if (class_id < 0 || class_id >= K)
        throw numeric_error("backward_score: class id out of range");
    const size_t at = static_cast<size_t>(cell_index);

    // score s = sigmoid(obj) * softmax(cls)[class_id]
    const double obj = sigmoid(fwd.head[0 * hw + at]);
    std::vector<float> cls(static_cast<size_t>(K));
    for (int c = 0; c < K; ++c) cls[static_cast<size_t>(c)] = fwd.head[(5 + static_cast<size_t>(c)) * hw + at];
    std::vector<double> p;
    softmax(cls.data(), K, p);
    const double pc = p[static_cast<size_t>(class_id)];

    std::vector<float> ghead(fwd.head.size(), 0.0f);
    ghead[0 * hw + at] = static_cast<float>(obj * (1.0 - obj) * pc);
    for (int c = 0; c < K; ++c) {
        const double delta = c == class_id ? 1.0 : 0.0;
        ghead[(5 + static_cast<size_t>(c)) * hw + at] =
            static_cast<float>(obj * pc * (delta - p[static_cast<size_t>(c)]));
    }

    const kern::Kernels& Kr = kern::active();
    std::array<std::vector<float>, 4> grads;

    // head (1x1) back to stage4
    const ConvLayer& head = layers_.back();
    std::vector<float> g4(fwd.stage_out[3].size());
    Kr.conv1x1_bwd_data(ghead.data(), head.out_c, g * g, head.w.data(), head.in_c, g4.data());
    grads[3] = std::move(g4);

    for (int i = 3; i >= 1; --i) {
        const ConvLayer& l = layers_[static_cast<size_t>(i)];
        const int in_sz = stage_size(i - 1);
        // relu gate at this stage's output
        Kr.relu_bwd(grads[static_cast<size_t>(i)].data(), fwd.stage_out[static_cast<size_t>(i)].data(),
                    grads[static_cast<size_t>(i)].size());
        kern::Conv3x3Shape shape{l.in_c, in_sz, in_sz, l.out_c, l.stride};
        std::vector<float> gin_pad(static_cast<size_t>(l.in_c) * shape.pad_h() * shape.pad_w(), 0.0f);
        Kr.conv3x3_bwd_data(grads[static_cast<size_t>(i)].data(), shape, l.w.data(), gin_pad.data());
        std::vector<float> gin(static_cast<size_t>(l.in_c) * in_sz * in_sz);
        kern::crop_chw(gin_pad.data(), l.in_c, in_sz, in_sz, gin.data());
        grads[static_cast<size_t>(i - 1)] = std::move(gin);
    }
    return grads;
}

void ToyDetector::ParamGrads::init(const ToyDetector& m) {
    w.clear();
    b.clear();
    for (const auto& l : m.layers_) {
        w.emplace_back(l.w.size(), 0.0f);
        b.emplace_back(l.b.size(), 0.0f);
    }
}

void ToyDetector::ParamGrads::accumulate(const ParamGrads& other) {
    for (size_t i = 0; i < w.size(); ++i) {
        kern::active().axpy(1.0f, other.w[i].data(), w[i].data(), w[i].size());
        kern::active().axpy(1.0f, other.b[i].data(), b[i].data(), b[i].size());
    }
}

void ToyDetector::ParamGrads::scale(float s) {
    for (auto& v : w)
        for (auto& x : v) x *= s;
    for (auto& v : b)
        for (auto& x : v) x *= s;
}

void ToyDetector::backward_train(const Forward& fwd, const std::vector<float>& grad_head,
                                 ParamGrads& grads) const {
    const kern::Kernels& K = kern::active();
    const int g = cfg_.grid();
    const ConvLayer& head = layers_.back();

    // head weight grads + grad into stage4
    K.conv1x1_bwd_weights(fwd.stage_out[3].data(), head.in_c, g * g, grad_head.data(), head.out_c,
                          grads.w[4].data(), grads.b[4].data());
    std::vector<float> gcur(fwd.stage_out[3].size());
    K.conv1x1_bwd_data(grad_head.data(), head.out_c, g * g, head.w.data(), head.in_c,
                       gcur.data());

    std::vector<float> pad, gin_pad;
    for (int i = 3; i >= 0; --i) {
        const ConvLayer& l = layers_[static_cast<size_t>(i)];
        const int in_sz = i == 0 ? cfg_.image_size : stage_size(i - 1);
        const std::vector<float>& input = i == 0 ? fwd.image : fwd.stage_out[static_cast<size_t>(i - 1)];

        K.relu_bwd(gcur.data(), fwd.stage_out[static_cast<size_t>(i)].data(), gcur.size());

        kern::Conv3x3Shape shape{l.in_c, in_sz, in_sz, l.out_c, l.stride};
        pad.resize(static_cast<size_t>(l.in_c) * shape.pad_h() * shape.pad_w());
        kern::pad_chw(input.data(), l.in_c, in_sz, in_sz, pad.data());
        K.conv3x3_bwd_weights(pad.data(), shape, gcur.data(), grads.w[static_cast<size_t>(i)].data(),
                              grads.b[static_cast<size_t>(i)].data());
        if (i > 0) {
            gin_pad.assign(pad.size(), 0.0f);
            K.conv3x3_bwd_data(gcur.data(), shape, l.w.data(), gin_pad.data());
            std::vector<float> gin(static_cast<size_t>(l.in_c) * in_sz * in_sz);
            kern::crop_chw(gin_pad.data(), l.in_c, in_sz, in_sz, gin.data());
            gcur = std::move(gin);
        }
    }
}

void ToyDetector::save_checkpoint(const std::string& dir) const {
    fs::create_directories(dir);
    ordered_json index;
    index["image_size"] = cfg_.image_size;
    index["num_classes"] = cfg_.num_classes;
    index["channels"] = cfg_.channels;
    index["base_box"] = cfg_.base_box;
    index["layers"] = ordered_json::array();
    for (const auto& l : layers_) {
        ordered_json jl;
        jl["name"] = l.name;
        jl["in_c"] = l.in_c;
        jl["out_c"] = l.out_c;
        jl["k"] = l.k;
        jl["stride"] = l.stride;
        jl["w_file"] = l.name + "_w.cbt";
        jl["b_file"] = l.name + "_b.cbt";
        index["layers"].push_back(jl);
        io::write_cbt((fs::path(dir) / (l.name + "_w.cbt")).string(),
                      {static_cast<std::uint32_t>(l.out_c), static_cast<std::uint32_t>(l.in_c),
                       static_cast<std::uint32_t>(l.k), static_cast<std::uint32_t>(l.k)},
                      l.w.data());
        io::write_cbt((fs::path(dir) / (l.name + "_b.cbt")).string(),
                      {static_cast<std::uint32_t>(l.out_c)}, l.b.data());
    }
    std::ofstream f(fs::path(dir) / "index.json", std::ios::trunc);
    if (!f) throw load_error("checkpoint: cannot write index in " + dir);
    f << index.dump(2) << "\n";
}

ToyDetector ToyDetector::load_checkpoint(const std::string& dir) {
    const fs::path index_path = fs::path(dir) / "index.json";
    std::ifstream f(index_path);
    if (!f)
        throw pipeline_error("checkpoint not found at " + dir + " (run the train command first)");
    json index = json::parse(f, nullptr, true);

    ModelConfig cfg;
    cfg.image_size = index.at("image_size").get<int>();
    cfg.num_classes = index.at("num_classes").get<int>();
    const auto ch = index.at("channels");
    for (size_t i = 0; i < 4; ++i) cfg.channels[i] = ch.at(i).get<int>();
    cfg.base_box = index.at("base_box").get<double>();

    ToyDetector model(cfg);
    for (const auto& jl : index.at("layers")) {
        const std::string name = jl.at("name").get<std::string>();
        ConvLayer* target = nullptr;
        for (auto& l : model.layers_)
            if (l.name == name) target = &l;
        if (!target) throw schema_error("checkpoint: unexpected layer " + name);
        const auto wp = io::read_cbt((fs::path(dir) / jl.at("w_file").get<std::string>()).string());
        const auto bp = io::read_cbt((fs::path(dir) / jl.at("b_file").get<std::string>()).string());
        if (wp.data.size() != target->w.size() || bp.data.size() != target->b.size())
            throw schema_error("checkpoint: weight shape mismatch for " + name);
        target->w = wp.data;
        target->b = bp.data;
    }
    return model;
}

}  // namespace ctxbias::det
