#include "ctxbias/kernels/kernels.hpp"

#include <cmath>
#include <cstring>

// Reference kernels. Plain loops, no tricks: these define the semantics the
// AVX2 variants must reproduce.

namespace ctxbias::kern {

namespace scalar {

void conv3x3_fwd(const float* in_pad, const Conv3x3Shape& s, const float* w, const float* b,
                 float* out) {
    const int oh = s.out_h(), ow = s.out_w();
    const size_t pw = static_cast<size_t>(s.pad_w());
    const size_t in_plane = static_cast<size_t>(s.pad_h()) * pw;
    for (int oc = 0; oc < s.out_c; ++oc) {
        float* op = out + static_cast<size_t>(oc) * oh * ow;
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) op[static_cast<size_t>(y) * ow + x] = b[oc];
        for (int ic = 0; ic < s.in_c; ++ic) {
            const float* ip = in_pad + static_cast<size_t>(ic) * in_plane;
            const float* wp = w + (static_cast<size_t>(oc) * s.in_c + ic) * 9;
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    const int iy = y * s.stride, ix = x * s.stride;
                    float acc = 0.0f;
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx)
                            acc += wp[ky * 3 + kx] *
                                   ip[static_cast<size_t>(iy + ky) * pw + (ix + kx)];
                    op[static_cast<size_t>(y) * ow + x] += acc;
                }
            }
        }
    }
}

void conv3x3_bwd_data(const float* gout, const Conv3x3Shape& s, const float* w, float* gin_pad) {
    const int oh = s.out_h(), ow = s.out_w();
    const size_t pw = static_cast<size_t>(s.pad_w());
    const size_t in_plane = static_cast<size_t>(s.pad_h()) * pw;
    for (int oc = 0; oc < s.out_c; ++oc) {
        const float* gp = gout + static_cast<size_t>(oc) * oh * ow;
        for (int ic = 0; ic < s.in_c; ++ic) {
            float* ip = gin_pad + static_cast<size_t>(ic) * in_plane;
            const float* wp = w + (static_cast<size_t>(oc) * s.in_c + ic) * 9;
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    const float g = gp[static_cast<size_t>(y) * ow + x];
                    const int iy = y * s.stride, ix = x * s.stride;
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx)
                            ip[static_cast<size_t>(iy + ky) * pw + (ix + kx)] +=
                                wp[ky * 3 + kx] * g;
                }
            }
        }
    }
}

void conv3x3_bwd_weights(const float* in_pad, const Conv3x3Shape& s, const float* gout, float* gw,
                         float* gb) {
    const int oh = s.out_h(), ow = s.out_w();
    const size_t pw = static_cast<size_t>(s.pad_w());
    const size_t in_plane = static_cast<size_t>(s.pad_h()) * pw;
    for (int oc = 0; oc < s.out_c; ++oc) {
        const float* gp = gout + static_cast<size_t>(oc) * oh * ow;
        float gb_acc = 0.0f;
        for (size_t i = 0; i < static_cast<size_t>(oh) * ow; ++i) gb_acc += gp[i];
        gb[oc] += gb_acc;
        for (int ic = 0; ic < s.in_c; ++ic) {
            const float* ip = in_pad + static_cast<size_t>(ic) * in_plane;
            float* wp = gw + (static_cast<size_t>(oc) * s.in_c + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    float acc = 0.0f;
                    for (int y = 0; y < oh; ++y) {
                        const int iy = y * s.stride + ky;
                        for (int x = 0; x < ow; ++x)
                            acc += gp[static_cast<size_t>(y) * ow + x] *
                                   ip[static_cast<size_t>(iy) * pw + (x * s.stride + kx)];
                    }
                    wp[ky * 3 + kx] += acc;
                }
            }
        }
    }
}

void conv1x1_fwd(const float* in, int in_c, int hw, const float* w, const float* b, int out_c,
                 float* out) {
    for (int oc = 0; oc < out_c; ++oc) {
        float* op = out + static_cast<size_t>(oc) * hw;
        for (int i = 0; i < hw; ++i) op[i] = b[oc];
        for (int ic = 0; ic < in_c; ++ic) {
            const float wv = w[static_cast<size_t>(oc) * in_c + ic];
            const float* ip = in + static_cast<size_t>(ic) * hw;
            for (int i = 0; i < hw; ++i) op[i] += wv * ip[i];
        }
    }
}

void conv1x1_bwd_data(const float* gout, int out_c, int hw, const float* w, int in_c,
                      float* gin) {
    std::memset(gin, 0, static_cast<size_t>(in_c) * hw * sizeof(float));
    for (int oc = 0; oc < out_c; ++oc) {
        const float* gp = gout + static_cast<size_t>(oc) * hw;
        for (int ic = 0; ic < in_c; ++ic) {
            const float wv = w[static_cast<size_t>(oc) * in_c + ic];
            float* ip = gin + static_cast<size_t>(ic) * hw;
            for (int i = 0; i < hw; ++i) ip[i] += wv * gp[i];
        }
    }
}

void conv1x1_bwd_weights(const float* in, int in_c, int hw, const float* gout, int out_c,
                         float* gw, float* gb) {
    for (int oc = 0; oc < out_c; ++oc) {
        const float* gp = gout + static_cast<size_t>(oc) * hw;
        float gb_acc = 0.0f;
        for (int i = 0; i < hw; ++i) gb_acc += gp[i];
        gb[oc] += gb_acc;
        for (int ic = 0; ic < in_c; ++ic) {
            const float* ip = in + static_cast<size_t>(ic) * hw;
            float acc = 0.0f;
            for (int i = 0; i < hw; ++i) acc += gp[i] * ip[i];
            gw[static_cast<size_t>(oc) * in_c + ic] += acc;
        }
    }
}

void relu_fwd(float* x, size_t n) {
    for (size_t i = 0; i < n; ++i) x[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd(float* grad, const float* out, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (out[i] <= 0.0f) grad[i] = 0.0f;
}

void pairwise_sqdist(const float* X, size_t n, const float* Y, size_t m, size_t d, double* out) {
    for (size_t i = 0; i < n; ++i) {
        const float* xi = X + i * d;
        for (size_t j = 0; j < m; ++j) {
            const float* yj = Y + j * d;
            double acc = 0.0;
            for (size_t k = 0; k < d; ++k) {
                const double diff = static_cast<double>(xi[k]) - static_cast<double>(yj[k]);
                acc += diff * diff;
            }
            out[i * m + j] = acc;
        }
    }
}

void composite(const std::uint8_t* fg, const std::uint8_t* bg, const std::uint8_t* mask,
               int n_pixels, int channels, std::uint8_t* out) {
    for (int p = 0; p < n_pixels; ++p) {
        const std::uint8_t* src = mask[p] ? fg : bg;
        for (int c = 0; c < channels; ++c) {
            const size_t at = static_cast<size_t>(p) * channels + c;
            out[at] = src[at];
        }
    }
}

void axpy(float a, const float* x, float* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

double dot(const float* a, const float* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

void adam_step(float* p, const float* g, float* m, float* v, size_t n, float lr, float beta1,
               float beta2, float eps, float bc1, float bc2) {
    for (size_t i = 0; i < n; ++i) {
        m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
        const float mhat = m[i] * bc1;
        const float vhat = v[i] * bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace scalar

const Kernels& scalar_kernels() {
    static const Kernels k = {
        "scalar",
        scalar::conv3x3_fwd,
        scalar::conv3x3_bwd_data,
        scalar::conv3x3_bwd_weights,
        scalar::conv1x1_fwd,
        scalar::conv1x1_bwd_data,
        scalar::conv1x1_bwd_weights,
        scalar::relu_fwd,
        scalar::relu_bwd,
        scalar::pairwise_sqdist,
        scalar::composite,
        scalar::axpy,
        scalar::dot,
        scalar::adam_step,
    };
    return k;
}

void pad_chw(const float* src, int c, int h, int w, float* dst) {
    const size_t pw = static_cast<size_t>(w) + 2;
    const size_t plane = (static_cast<size_t>(h) + 2) * pw;
    std::memset(dst, 0, static_cast<size_t>(c) * plane * sizeof(float));
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            std::memcpy(dst + static_cast<size_t>(ch) * plane + (static_cast<size_t>(y) + 1) * pw + 1,
                        src + (static_cast<size_t>(ch) * h + y) * w,
                        static_cast<size_t>(w) * sizeof(float));
}

void crop_chw(const float* src_pad, int c, int h, int w, float* dst) {
    const size_t pw = static_cast<size_t>(w) + 2;
    const size_t plane = (static_cast<size_t>(h) + 2) * pw;
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            std::memcpy(dst + (static_cast<size_t>(ch) * h + y) * w,
                        src_pad + static_cast<size_t>(ch) * plane + (static_cast<size_t>(y) + 1) * pw + 1,
                        static_cast<size_t>(w) * sizeof(float));
}

}  // namespace ctxbias::kern
