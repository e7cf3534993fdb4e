#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ctxbias/core/types.hpp"
#include "ctxbias/detector/model.hpp"

namespace ctxbias::cam {

// Saliency map for one detected instance at one layer, bilinearly upsampled
// to image size. Values are >= 0; max_value > 0 for a confident detection.
struct CamMap {
    std::string instance_id;
    std::string layer;
    int width = 0;
    int height = 0;
    std::vector<float> heat;
    float max_value = 0.0f;
};

struct BinMask {
    int bin = 0;            // k in 1..9, bin 1 tightest
    double threshold = 0.0;  // t_k
    Mask mask;               // (heat >= t_k) union instance mask
};

struct SmoothConfig {
    int n_samples = 8;
    double noise_sigma = 0.1;        // fraction of the input dynamic range
    std::uint64_t seed = 0;
    double confidence_floor = 0.85;  // instances below are rejected
};

inline constexpr int kNumBins = 9;

// Smooth-GradCAM++ against a differentiable detector: the heat is the mean
// over noise-perturbed passes of the GradCAM++ weighting of layer
// activations by the gradients of one instance's class score.
class SmoothGradCamPP {
public:
    // Rejects adapters without a differentiable score path.
    explicit SmoothGradCamPP(const det::ToyDetector& model);

    // CAM at every hookable layer for one detection, sharing the noisy
    // forward/backward passes across layers.
    std::map<std::string, CamMap> compute_all_layers(const ImageU8& image,
                                                     const DetectionRecord& instance_det,
                                                     const SmoothConfig& cfg) const;

    CamMap compute(const ImageU8& image, const DetectionRecord& instance_det,
                   const std::string& layer, const SmoothConfig& cfg) const;

private:
    const det::ToyDetector& model_;
};

// Thresholds t_k = max(heat) * max(1 - 0.1 k, 1e-9 / max(heat)), k = 1..9;
// every mask is unioned with the instance mask, so masks are nested and the
// instance region is contained in each bin.
std::vector<BinMask> bin_ladder(const CamMap& heat, const Mask& instance_mask);

struct HitRatio {
    double fg = 0.0;  // |mask ∩ instance| / |instance|
    double bg = 0.0;  // |mask \ instance| / |instance|
};

HitRatio hit_ratio(const Mask& cam_mask, const Mask& instance_mask);

// Raw GradCAM++ channel weighting for one layer (activations and score
// gradients, both C x hw). Building block of SmoothGradCamPP, exposed so the
// closed-form single-layer check can target it directly.
std::vector<float> gradcampp_weighting(const std::vector<float>& acts,
                                       const std::vector<float>& grads, int channels, int hw);

}  // namespace ctxbias::cam
