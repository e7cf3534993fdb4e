#include "ctxbias/cam/cam.hpp"

#include <algorithm>
#include <cmath>

#include "ctxbias/core/rng.hpp"

namespace ctxbias::cam {

namespace {

}  // namespace

// alpha_ij = g^2 / (2 g^2 + sum(A) g^3) with zero-denominator cells dropped;
// w_c = sum_ij alpha_ij relu(g_ij); heat_ij = relu(sum_c w_c A_c,ij).
std::vector<float> gradcampp_weighting(const std::vector<float>& acts, const std::vector<float>& grads,
                                       int channels, int hw) {
    std::vector<float> heat(static_cast<size_t>(hw), 0.0f);
    for (int c = 0; c < channels; ++c) {
        const float* a = acts.data() + static_cast<size_t>(c) * hw;
        const float* g = grads.data() + static_cast<size_t>(c) * hw;
        double a_sum = 0.0;
        for (int i = 0; i < hw; ++i) a_sum += a[i];
        double w = 0.0;
        for (int i = 0; i < hw; ++i) {
            const double gi = g[i];
            const double denom = 2.0 * gi * gi + a_sum * gi * gi * gi;
            if (denom == 0.0) continue;
            const double alpha = gi * gi / denom;
            if (gi > 0.0) w += alpha * gi;
        }
        for (int i = 0; i < hw; ++i)
            heat[static_cast<size_t>(i)] += static_cast<float>(w) * a[i];
    }
    for (auto& v : heat) v = v > 0.0f ? v : 0.0f;
    return heat;
}

namespace {

// align_corners=false bilinear upsample of a single-channel map.
std::vector<float> upsample_bilinear(const std::vector<float>& src, int sh, int sw, int dh,
                                     int dw) {
    std::vector<float> out(static_cast<size_t>(dh) * dw);
    const double fy = static_cast<double>(sh) / dh;
    const double fx = static_cast<double>(sw) / dw;
    for (int y = 0; y < dh; ++y) {
        const double sy = std::clamp((y + 0.5) * fy - 0.5, 0.0, sh - 1.0);
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, sh - 1);
        const double wy = sy - y0;
        for (int x = 0; x < dw; ++x) {
            const double sx = std::clamp((x + 0.5) * fx - 0.5, 0.0, sw - 1.0);
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, sw - 1);
            const double wx = sx - x0;
            const double v00 = src[static_cast<size_t>(y0) * sw + x0];
            const double v01 = src[static_cast<size_t>(y0) * sw + x1];
            const double v10 = src[static_cast<size_t>(y1) * sw + x0];
            const double v11 = src[static_cast<size_t>(y1) * sw + x1];
            out[static_cast<size_t>(y) * dw + x] = static_cast<float>(
                (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11));
        }
    }
    return out;
}

}  // namespace

SmoothGradCamPP::SmoothGradCamPP(const det::ToyDetector& model) : model_(model) {
    if (!model.differentiable())
        throw hook_error("smooth_gradcam: adapter has no differentiable score path");
}

std::map<std::string, CamMap> SmoothGradCamPP::compute_all_layers(
    const ImageU8& image, const DetectionRecord& instance_det, const SmoothConfig& cfg) const {
    if (cfg.n_samples < 1) throw numeric_error("smooth_gradcam: n_samples must be >= 1");
    if (instance_det.confidence < cfg.confidence_floor)
        throw numeric_error("smooth_gradcam: instance confidence below floor");
    if (instance_det.cell_index < 0)
        throw numeric_error("smooth_gradcam: detection lacks a head cell");

    const int S = model_.config().image_size;
    const std::vector<float> base = det::image_to_chw(image);
    Rng rng(derive_seed(cfg.seed, "cam:" + instance_det.image_id,
                        static_cast<std::uint64_t>(instance_det.cell_index)));

    std::array<std::vector<float>, 4> heat_acc;
    for (int l = 0; l < 4; ++l) {
        const int sz = model_.stage_size(l);
        heat_acc[static_cast<size_t>(l)].assign(static_cast<size_t>(sz) * sz, 0.0f);
    }

    for (int s = 0; s < cfg.n_samples; ++s) {
        std::vector<float> input = base;
        if (cfg.noise_sigma > 0.0) {
            // dynamic range of normalized input is 1.0
            for (auto& v : input)
                v += static_cast<float>(rng.next_gaussian() * cfg.noise_sigma);
        }
        const det::ToyDetector::Forward fwd = model_.forward_chw(input);
        const auto grads = model_.backward_score(fwd, instance_det.cell_index,
                                                 instance_det.class_id);
        for (int l = 0; l < 4; ++l) {
            const int sz = model_.stage_size(l);
            const int ch = model_.layers()[static_cast<size_t>(l)].out_c;
            const std::vector<float> h = gradcampp_weighting(fwd.stage_out[static_cast<size_t>(l)],
                                                          grads[static_cast<size_t>(l)], ch, sz * sz);
            for (size_t i = 0; i < h.size(); ++i) heat_acc[static_cast<size_t>(l)][i] += h[i];
        }
    }

    std::map<std::string, CamMap> out;
    bool any_signal = false;
    for (int l = 0; l < 4; ++l) {
        const int sz = model_.stage_size(l);
        auto& acc = heat_acc[static_cast<size_t>(l)];
        for (auto& v : acc) v /= static_cast<float>(cfg.n_samples);

        CamMap m;
        m.instance_id = instance_det.image_id + "#" + std::to_string(instance_det.cell_index);
        m.layer = model_.layer_names()[static_cast<size_t>(l)];
        m.width = S;
        m.height = S;
        m.heat = upsample_bilinear(acc, sz, sz, S, S);
        m.max_value = 0.0f;
        for (float v : m.heat) m.max_value = std::max(m.max_value, v);
        any_signal = any_signal || m.max_value > 0.0f;
        out.emplace(m.layer, std::move(m));
    }
    if (!any_signal)
        throw numeric_error("smooth_gradcam: zero gradient everywhere (degenerate map)");
    return out;
}

CamMap SmoothGradCamPP::compute(const ImageU8& image, const DetectionRecord& instance_det,
                                const std::string& layer, const SmoothConfig& cfg) const {
    model_.layer_index(layer);
    auto all = compute_all_layers(image, instance_det, cfg);
    CamMap m = std::move(all.at(layer));
    if (m.max_value <= 0.0f)
        throw numeric_error("smooth_gradcam: degenerate map at layer " + layer);
    return m;
}

std::vector<BinMask> bin_ladder(const CamMap& cam, const Mask& instance_mask) {
    if (cam.max_value <= 0.0f) throw numeric_error("bin_ladder: cam max must be positive");
    if (instance_mask.width != cam.width || instance_mask.height != cam.height)
        throw numeric_error("bin_ladder: instance mask size mismatch");

    std::vector<BinMask> out;
    out.reserve(kNumBins);
    const double mx = cam.max_value;
    for (int k = 1; k <= kNumBins; ++k) {
        BinMask bm;
        bm.bin = k;
        bm.threshold = mx * std::max(1.0 - 0.1 * k, 1e-9 / mx);
        bm.mask = Mask(cam.width, cam.height);
        for (size_t i = 0; i < bm.mask.bits.size(); ++i)
            bm.mask.bits[i] =
                (cam.heat[i] >= bm.threshold || instance_mask.bits[i]) ? 1 : 0;
        out.push_back(std::move(bm));
    }
    return out;
}

HitRatio hit_ratio(const Mask& cam_mask, const Mask& instance_mask) {
    if (cam_mask.width != instance_mask.width || cam_mask.height != instance_mask.height)
        throw numeric_error("hit_ratio: mask size mismatch");
    const size_t inst = instance_mask.count();
    if (inst == 0) throw numeric_error("hit_ratio: empty instance mask");
    size_t fg_hit = 0, bg_hit = 0;
    for (size_t i = 0; i < cam_mask.bits.size(); ++i) {
        if (!cam_mask.bits[i]) continue;
        if (instance_mask.bits[i]) ++fg_hit;
        else ++bg_hit;
    }
    return {static_cast<double>(fg_hit) / static_cast<double>(inst),
            static_cast<double>(bg_hit) / static_cast<double>(inst)};
}

}  // namespace ctxbias::cam
