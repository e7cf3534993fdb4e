#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace ctxbias::kern {

// 3x3 convolution geometry, pad = 1. Inputs to the conv kernels are padded
// buffers of shape (in_c, in_h + 2, in_w + 2) so the inner loops stay
// branch-free; callers own the padding (see pad_chw / crop_chw).
struct Conv3x3Shape {
    int in_c = 0;
    int in_h = 0;
    int in_w = 0;
    int out_c = 0;
    int stride = 1;  // 1 or 2

    int out_h() const { return (in_h - 1) / stride + 1; }
    int out_w() const { return (in_w - 1) / stride + 1; }
    int pad_h() const { return in_h + 2; }
    int pad_w() const { return in_w + 2; }
};

// weights layout: (out_c, in_c, 3, 3) row-major; bias: (out_c).
using Conv3x3FwdFn = void (*)(const float* in_pad, const Conv3x3Shape& s, const float* w,
                              const float* b, float* out);
// grad wrt padded input; caller zero-fills gin_pad and crops afterwards.
using Conv3x3BwdDataFn = void (*)(const float* gout, const Conv3x3Shape& s, const float* w,
                                  float* gin_pad);
// accumulates into gw/gb (caller zero-fills before the first image).
using Conv3x3BwdWFn = void (*)(const float* in_pad, const Conv3x3Shape& s, const float* gout,
                               float* gw, float* gb);

// 1x1 convolution over hw contiguous positions per channel.
using Conv1x1FwdFn = void (*)(const float* in, int in_c, int hw, const float* w, const float* b,
                              int out_c, float* out);
using Conv1x1BwdDataFn = void (*)(const float* gout, int out_c, int hw, const float* w, int in_c,
                                  float* gin);
using Conv1x1BwdWFn = void (*)(const float* in, int in_c, int hw, const float* gout, int out_c,
                               float* gw, float* gb);

using ReluFwdFn = void (*)(float* x, size_t n);
// grad *= (out > 0), where out is the forward post-relu output.
using ReluBwdFn = void (*)(float* grad, const float* out, size_t n);

// out[i*m + j] = squared L2 distance between X row i and Y row j,
// accumulated in double precision.
using PairwiseSqdistFn = void (*)(const float* X, size_t n, const float* Y, size_t m, size_t d,
                                  double* out);

// out = mask ? fg : bg, per pixel (mask is 1 byte/pixel, data interleaved).
using CompositeFn = void (*)(const std::uint8_t* fg, const std::uint8_t* bg,
                             const std::uint8_t* mask, int n_pixels, int channels,
                             std::uint8_t* out);

using AxpyFn = void (*)(float a, const float* x, float* y, size_t n);
using DotFn = double (*)(const float* a, const float* b, size_t n);

// One fused Adam step; bc1/bc2 are the precomputed 1/(1-beta^t) corrections.
using AdamStepFn = void (*)(float* p, const float* g, float* m, float* v, size_t n, float lr,
                            float beta1, float beta2, float eps, float bc1, float bc2);

struct Kernels {
    const char* name = "";
    Conv3x3FwdFn conv3x3_fwd = nullptr;
    Conv3x3BwdDataFn conv3x3_bwd_data = nullptr;
    Conv3x3BwdWFn conv3x3_bwd_weights = nullptr;
    Conv1x1FwdFn conv1x1_fwd = nullptr;
    Conv1x1BwdDataFn conv1x1_bwd_data = nullptr;
    Conv1x1BwdWFn conv1x1_bwd_weights = nullptr;
    ReluFwdFn relu_fwd = nullptr;
    ReluBwdFn relu_bwd = nullptr;
    PairwiseSqdistFn pairwise_sqdist = nullptr;
    CompositeFn composite = nullptr;
    AxpyFn axpy = nullptr;
    DotFn dot = nullptr;
    AdamStepFn adam_step = nullptr;
};

// Scalar reference implementations; always available, the ground truth the
// SIMD variants are equivalence-tested against.
const Kernels& scalar_kernels();

// AVX2+FMA variants, or nullptr when the CPU lacks them.
const Kernels* avx2_kernels();

// Selected at first use: AVX2 when supported, else scalar. The environment
// variable CTXBIAS_KERNELS=scalar|avx2|auto overrides.
const Kernels& active();

// Name of the active variant ("scalar" / "avx2") for report fingerprints.
const char* active_name();

// Padding helpers shared by all conv call sites.
// src: (c, h, w) -> dst: (c, h+2, w+2) zero-padded border.
void pad_chw(const float* src, int c, int h, int w, float* dst);
// Inverse crop: dst (c, h, w) from padded src, used for gradient buffers.
void crop_chw(const float* src_pad, int c, int h, int w, float* dst);

}  // namespace ctxbias::kern
