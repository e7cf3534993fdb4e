#pragma once

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ctxbias/core/dataset.hpp"
#include "ctxbias/core/tensor.hpp"
#include "ctxbias/core/types.hpp"

namespace ctxbias::det {

enum class HookMode { zero_where_true };

// Zeroes a layer's output activations at every grid cell whose image-space
// receptive-field center falls inside `mask` (mask is downsampled to the
// layer grid by majority vote, ties masked).
struct AblationHook {
    std::string layer;
    Mask mask;  // input-image coordinates
    HookMode mode = HookMode::zero_where_true;
};

struct PredictOptions {
    double score_threshold = 0.25;
    double nms_iou = 0.5;
};

// Abstract detector surface the analysis modules work against. External
// detectors can be wrapped behind this contract; activations cross the
// boundary as CBT1 tensors.
class DetectorAdapter {
public:
    virtual ~DetectorAdapter() = default;

    virtual const std::vector<std::string>& layer_names() const = 0;

    // False for models whose score path is not differentiable end to end
    // (gradient-based CAM refuses such adapters at registration).
    virtual bool differentiable() const = 0;

    virtual std::vector<DetectionRecord> predict(const ImageU8& image,
                                                 const std::vector<AblationHook>& hooks,
                                                 const PredictOptions& opt) const = 0;

    virtual std::map<std::string, FeatureTensor> capture(
        const ImageU8& image, const std::vector<std::string>& layers,
        const std::vector<AblationHook>& hooks) const = 0;
};

struct ModelConfig {
    int image_size = 64;  // square input, multiple of 8
    int num_classes = 3;
    std::array<int, 4> channels = {16, 32, 48, 64};
    double base_box = 16.0;  // box decode scale in pixels

    int grid() const { return image_size / 8; }
    int head_channels() const { return 5 + num_classes; }
};

struct ConvLayer {
    std::string name;
    int in_c = 0, out_c = 0, k = 3, stride = 1;
    std::vector<float> w, b;

    size_t w_count() const {
        return static_cast<size_t>(out_c) * in_c * k * k;
    }
};

// Four 3x3 conv stages (strides 1,2,2,2) with ReLU, named stage1..stage4,
// plus a 1x1 dense head: channel 0 objectness, 1..4 box deltas
// (tx,ty,tw,th), 5.. class logits. Anchor-free decode at stride 8.
class ToyDetector final : public DetectorAdapter {
public:
    explicit ToyDetector(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    const std::vector<std::string>& layer_names() const override;
    bool differentiable() const override { return true; }
    int layer_index(const std::string& name) const;  // throws hook_error

    void init_weights(std::uint64_t seed);

    // --- forward ---------------------------------------------------------
    struct Forward {
        std::vector<float> image;                    // input, CHW float
        std::array<std::vector<float>, 4> stage_out; // post-relu, post-hook
        std::vector<float> head;                     // (5+K, g, g)
    };
    Forward forward_chw(const std::vector<float>& image_chw,
                        const std::vector<AblationHook>& hooks = {}) const;
    Forward forward_image(const ImageU8& image,
                          const std::vector<AblationHook>& hooks = {}) const;

    std::vector<DetectionRecord> decode(const Forward& fwd, const PredictOptions& opt,
                                        const std::string& image_id) const;

    std::vector<DetectionRecord> predict(const ImageU8& image,
                                         const std::vector<AblationHook>& hooks,
                                         const PredictOptions& opt) const override;

    std::map<std::string, FeatureTensor> capture(
        const ImageU8& image, const std::vector<std::string>& layers,
        const std::vector<AblationHook>& hooks) const override;

    // --- gradients -------------------------------------------------------
    // d(score)/d(stage outputs) for the detection score
    // sigmoid(obj) * softmax(cls)[class_id] at one head cell.
    std::array<std::vector<float>, 4> backward_score(const Forward& fwd, int cell_index,
                                                     int class_id) const;

    struct ParamGrads {
        std::vector<std::vector<float>> w;  // stages 0..3, then head at 4
        std::vector<std::vector<float>> b;
        void init(const ToyDetector& m);
        void accumulate(const ParamGrads& other);
        void scale(float s);
    };
    // Training backprop from a head gradient; accumulates into `grads`.
    void backward_train(const Forward& fwd, const std::vector<float>& grad_head,
                        ParamGrads& grads) const;

    std::vector<ConvLayer>& layers() { return layers_; }
    const std::vector<ConvLayer>& layers() const { return layers_; }

    // stage spatial size (stage1 = image_size, halving afterwards)
    int stage_size(int index) const { return cfg_.image_size >> index; }

    // --- checkpoints -----------------------------------------------------
    // Directory of CBT1 tensors (one per weight/bias) plus index.json.
    void save_checkpoint(const std::string& dir) const;
    static ToyDetector load_checkpoint(const std::string& dir);

    // Majority-vote downsample of an image mask to a layer grid; exposed for
    // the feature-extraction path which aligns masks the same way.
    static Mask downsample_majority(const Mask& mask, int grid_h, int grid_w);

private:
    ModelConfig cfg_;
    std::vector<ConvLayer> layers_;  // stage1..stage4, head at index 4
    std::vector<std::string> names_;
};

std::vector<float> image_to_chw(const ImageU8& image);

}  // namespace ctxbias::det
