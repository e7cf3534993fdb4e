// AVX2+FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma; kernels.cpp only hands these out after a runtime cpuid check.

#include <immintrin.h>

#include <cstring>
#include <vector>

#include "ctxbias/kernels/kernels.hpp"

namespace ctxbias::kern {

namespace avx2 {

inline double hsum_pd(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(lo) + _mm_cvtsd_f64(_mm_unpackhi_pd(lo, lo));
}

inline float hsum_ps(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_hadd_ps(lo, lo);
    lo = _mm_hadd_ps(lo, lo);
    return _mm_cvtss_f32(lo);
}

// Split one padded row into even/odd columns so stride-2 convolutions read
// contiguous segments: row[2j] -> even[j], row[2j+1] -> odd[j].
struct Deinterleaved {
    int half = 0;  // entries per parity row, plus 8 floats slack
    std::vector<float> even, odd;

    void build(const float* in_pad, int c, int pad_h, int pad_w) {
        half = (pad_w + 1) / 2 + 8;
        even.assign(static_cast<size_t>(c) * pad_h * half, 0.0f);
        odd.assign(static_cast<size_t>(c) * pad_h * half, 0.0f);
        for (int ch = 0; ch < c; ++ch) {
            for (int y = 0; y < pad_h; ++y) {
                const float* src = in_pad + (static_cast<size_t>(ch) * pad_h + y) * pad_w;
                float* e = even.data() + (static_cast<size_t>(ch) * pad_h + y) * half;
                float* o = odd.data() + (static_cast<size_t>(ch) * pad_h + y) * half;
                for (int x = 0; x < pad_w; ++x) {
                    if (x & 1)
                        o[x >> 1] = src[x];
                    else
                        e[x >> 1] = src[x];
                }
            }
        }
    }

    const float* row(int parity, int ch, int y, int pad_h) const {
        const auto& v = parity ? odd : even;
        return v.data() + (static_cast<size_t>(ch) * pad_h + y) * half;
    }
    float* row_mut(int parity, int ch, int y, int pad_h) {
        auto& v = parity ? odd : even;
        return v.data() + (static_cast<size_t>(ch) * pad_h + y) * half;
    }
};

void conv3x3_fwd(const float* in_pad, const Conv3x3Shape& s, const float* w, const float* b,
                 float* out) {
    const int oh = s.out_h(), ow = s.out_w();
    const size_t pw = static_cast<size_t>(s.pad_w());
    const size_t in_plane = static_cast<size_t>(s.pad_h()) * pw;

    if (s.stride == 1) {
        for (int oc = 0; oc < s.out_c; ++oc) {
            float* op = out + static_cast<size_t>(oc) * oh * ow;
            const float* wbase = w + static_cast<size_t>(oc) * s.in_c * 9;
            for (int y = 0; y < oh; ++y) {
                int x = 0;
                for (; x + 8 <= ow; x += 8) {
                    __m256 acc = _mm256_set1_ps(b[oc]);
                    for (int ic = 0; ic < s.in_c; ++ic) {
                        const float* ip = in_pad + static_cast<size_t>(ic) * in_plane;
                        const float* wp = wbase + static_cast<size_t>(ic) * 9;
                        for (int ky = 0; ky < 3; ++ky) {
                            const float* row = ip + static_cast<size_t>(y + ky) * pw + x;
                            acc = _mm256_fmadd_ps(_mm256_set1_ps(wp[ky * 3 + 0]),
                                                  _mm256_loadu_ps(row + 0), acc);
                            acc = _mm256_fmadd_ps(_mm256_set1_ps(wp[ky * 3 + 1]),
                                                  _mm256_loadu_ps(row + 1), acc);
                            acc = _mm256_fmadd_ps(_mm256_set1_ps(wp[ky * 3 + 2]),
                                                  _mm256_loadu_ps(row + 2), acc);
                        }
                    }
                    _mm256_storeu_ps(op + static_cast<size_t>(y) * ow + x, acc);
                }
                for (; x < ow; ++x) {
                    float acc = b[oc];
                    for (int ic = 0; ic < s.in_c; ++ic) {
                        const float* ip = in_pad + static_cast<size_t>(ic) * in_plane;
                        const float* wp = wbase + static_cast<size_t>(ic) * 9;
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx)
                                acc += wp[ky * 3 + kx] *
                                       ip[static_cast<size_t>(y + ky) * pw + (x + kx)];
                    }
                    op[static_cast<size_t>(y) * ow + x] = acc;
                }
            }
        }
        return;
    }

    // stride 2: read contiguous segments of the even/odd split rows
    Deinterleaved d;
    d.build(in_pad, s.in_c, s.pad_h(), s.pad_w());
    for (int oc = 0; oc < s.out_c; ++oc) {
        float* op = out + static_cast<size_t>(oc) * oh * ow;
        const float* wbase = w + static_cast<size_t>(oc) * s.in_c * 9;
        for (int y = 0; y < oh; ++y) {
            int x = 0;
            for (; x + 8 <= ow; x += 8) {
                __m256 acc = _mm256_set1_ps(b[oc]);
                for (int ic = 0; ic < s.in_c; ++ic) {
                    const float* wp = wbase + static_cast<size_t>(ic) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        const float* e = d.row(0, ic, 2 * y + ky, s.pad_h());
                        const float* o = d.row(1, ic, 2 * y + ky, s.pad_h());
                        acc = _mm256_fmadd_ps(_mm256_set1_ps(wp[ky * 3 + 0]),
                                              _mm256_loadu_ps(e + x), acc);
                        acc = _mm256_fmadd_ps(_mm256_set1_ps(wp[ky * 3 + 1]),
                                              _mm256_loadu_ps(o + x), acc);
                        acc = _mm256_fmadd_ps(_mm256_set1_ps(wp[ky * 3 + 2]),
                                              _mm256_loadu_ps(e + x + 1), acc);
                    }
                }
                _mm256_storeu_ps(op + static_cast<size_t>(y) * ow + x, acc);
            }
            for (; x < ow; ++x) {
                float acc = b[oc];
                for (int ic = 0; ic < s.in_c; ++ic) {
                    const float* ip = in_pad + static_cast<size_t>(ic) * in_plane;
                    const float* wp = wbase + static_cast<size_t>(ic) * 9;
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx)
                            acc += wp[ky * 3 + kx] *
                                   ip[static_cast<size_t>(2 * y + ky) * pw + (2 * x + kx)];
                }
                op[static_cast<size_t>(y) * ow + x] = acc;
            }
        }
    }
}

void conv3x3_bwd_data(const float* gout, const Conv3x3Shape& s, const float* w, float* gin_pad) {
    const int oh = s.out_h(), ow = s.out_w();
    const size_t pw = static_cast<size_t>(s.pad_w());
    const size_t in_plane = static_cast<size_t>(s.pad_h()) * pw;

    if (s.stride == 1) {
        for (int oc = 0; oc < s.out_c; ++oc) {
            const float* gp = gout + static_cast<size_t>(oc) * oh * ow;
            for (int ic = 0; ic < s.in_c; ++ic) {
                float* ip = gin_pad + static_cast<size_t>(ic) * in_plane;
                const float* wp = w + (static_cast<size_t>(oc) * s.in_c + ic) * 9;
                for (int y = 0; y < oh; ++y) {
                    const float* grow = gp + static_cast<size_t>(y) * ow;
                    for (int ky = 0; ky < 3; ++ky) {
                        float* irow = ip + static_cast<size_t>(y + ky) * pw;
                        for (int kx = 0; kx < 3; ++kx) {
                            const __m256 wv = _mm256_set1_ps(wp[ky * 3 + kx]);
                            int x = 0;
                            for (; x + 8 <= ow; x += 8) {
                                __m256 cur = _mm256_loadu_ps(irow + x + kx);
                                cur = _mm256_fmadd_ps(wv, _mm256_loadu_ps(grow + x), cur);
                                _mm256_storeu_ps(irow + x + kx, cur);
                            }
                            for (; x < ow; ++x) irow[x + kx] += wp[ky * 3 + kx] * grow[x];
                        }
                    }
                }
            }
        }
        return;
    }

    // stride 2: accumulate into even/odd scratch, then interleave back
    Deinterleaved d;
    d.half = (s.pad_w() + 1) / 2 + 8;
    d.even.assign(static_cast<size_t>(s.in_c) * s.pad_h() * d.half, 0.0f);
    d.odd.assign(static_cast<size_t>(s.in_c) * s.pad_h() * d.half, 0.0f);
    for (int oc = 0; oc < s.out_c; ++oc) {
        const float* gp = gout + static_cast<size_t>(oc) * oh * ow;
        for (int ic = 0; ic < s.in_c; ++ic) {
            const float* wp = w + (static_cast<size_t>(oc) * s.in_c + ic) * 9;
            for (int y = 0; y < oh; ++y) {
                const float* grow = gp + static_cast<size_t>(y) * ow;
                for (int ky = 0; ky < 3; ++ky) {
                    float* e = d.row_mut(0, ic, 2 * y + ky, s.pad_h());
                    float* o = d.row_mut(1, ic, 2 * y + ky, s.pad_h());
                    struct Tgt {
                        float* base;
                        int off;
                        float wv;
                    } tgts[3] = {{e, 0, wp[ky * 3 + 0]}, {o, 0, wp[ky * 3 + 1]}, {e, 1, wp[ky * 3 + 2]}};
                    for (const auto& t : tgts) {
                        const __m256 wv = _mm256_set1_ps(t.wv);
                        int x = 0;
                        for (; x + 8 <= ow; x += 8) {
                            __m256 cur = _mm256_loadu_ps(t.base + x + t.off);
                            cur = _mm256_fmadd_ps(wv, _mm256_loadu_ps(grow + x), cur);
                            _mm256_storeu_ps(t.base + x + t.off, cur);
                        }
                        for (; x < ow; ++x) t.base[x + t.off] += t.wv * grow[x];
                    }
                }
            }
        }
    }
    for (int ic = 0; ic < s.in_c; ++ic) {
        for (int y = 0; y < s.pad_h(); ++y) {
            float* dst = gin_pad + static_cast<size_t>(ic) * in_plane + static_cast<size_t>(y) * pw;
            const float* e = d.row(0, ic, y, s.pad_h());
            const float* o = d.row(1, ic, y, s.pad_h());
            for (size_t x = 0; x < pw; ++x) dst[x] += (x & 1) ? o[x >> 1] : e[x >> 1];
        }
    }
}

void conv3x3_bwd_weights(const float* in_pad, const Conv3x3Shape& s, const float* gout, float* gw,
                         float* gb) {
    const int oh = s.out_h(), ow = s.out_w();
    const size_t pw = static_cast<size_t>(s.pad_w());
    const size_t in_plane = static_cast<size_t>(s.pad_h()) * pw;

    Deinterleaved d;
    if (s.stride == 2) d.build(in_pad, s.in_c, s.pad_h(), s.pad_w());

    for (int oc = 0; oc < s.out_c; ++oc) {
        const float* gp = gout + static_cast<size_t>(oc) * oh * ow;
        {
            __m256 acc = _mm256_setzero_ps();
            size_t i = 0;
            const size_t n = static_cast<size_t>(oh) * ow;
            for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(gp + i));
            float tail = 0.0f;
            for (; i < n; ++i) tail += gp[i];
            gb[oc] += hsum_ps(acc) + tail;
        }
        for (int ic = 0; ic < s.in_c; ++ic) {
            float* wp = gw + (static_cast<size_t>(oc) * s.in_c + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    __m256 acc = _mm256_setzero_ps();
                    float tail = 0.0f;
                    for (int y = 0; y < oh; ++y) {
                        const float* grow = gp + static_cast<size_t>(y) * ow;
                        const float* irow;
                        int off;
                        if (s.stride == 1) {
                            irow = in_pad + static_cast<size_t>(ic) * in_plane +
                                   static_cast<size_t>(y + ky) * pw;
                            off = kx;
                        } else {
                            // column 2x+kx: kx 0/2 -> even row at x/(x+1), kx 1 -> odd
                            irow = d.row(kx & 1, ic, 2 * y + ky, s.pad_h());
                            off = (kx == 2) ? 1 : 0;
                        }
                        int x = 0;
                        for (; x + 8 <= ow; x += 8)
                            acc = _mm256_fmadd_ps(_mm256_loadu_ps(grow + x),
                                                  _mm256_loadu_ps(irow + x + off), acc);
                        for (; x < ow; ++x) tail += grow[x] * irow[x + off];
                    }
                    wp[ky * 3 + kx] += hsum_ps(acc) + tail;
                }
            }
        }
    }
}

void conv1x1_fwd(const float* in, int in_c, int hw, const float* w, const float* b, int out_c,
                 float* out) {
    for (int oc = 0; oc < out_c; ++oc) {
        float* op = out + static_cast<size_t>(oc) * hw;
        const __m256 bv = _mm256_set1_ps(b[oc]);
        int i = 0;
        for (; i + 8 <= hw; i += 8) _mm256_storeu_ps(op + i, bv);
        for (; i < hw; ++i) op[i] = b[oc];
        for (int ic = 0; ic < in_c; ++ic) {
            const float wv = w[static_cast<size_t>(oc) * in_c + ic];
            const __m256 wvv = _mm256_set1_ps(wv);
            const float* ip = in + static_cast<size_t>(ic) * hw;
            i = 0;
            for (; i + 8 <= hw; i += 8) {
                __m256 cur = _mm256_loadu_ps(op + i);
                cur = _mm256_fmadd_ps(wvv, _mm256_loadu_ps(ip + i), cur);
                _mm256_storeu_ps(op + i, cur);
            }
            for (; i < hw; ++i) op[i] += wv * ip[i];
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
            const __m256 wvv = _mm256_set1_ps(wv);
            float* ip = gin + static_cast<size_t>(ic) * hw;
            int i = 0;
            for (; i + 8 <= hw; i += 8) {
                __m256 cur = _mm256_loadu_ps(ip + i);
                cur = _mm256_fmadd_ps(wvv, _mm256_loadu_ps(gp + i), cur);
                _mm256_storeu_ps(ip + i, cur);
            }
            for (; i < hw; ++i) ip[i] += wv * gp[i];
        }
    }
}

void conv1x1_bwd_weights(const float* in, int in_c, int hw, const float* gout, int out_c,
                         float* gw, float* gb) {
    for (int oc = 0; oc < out_c; ++oc) {
        const float* gp = gout + static_cast<size_t>(oc) * hw;
        __m256 acc = _mm256_setzero_ps();
        float tail = 0.0f;
        int i = 0;
        for (; i + 8 <= hw; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(gp + i));
        for (; i < hw; ++i) tail += gp[i];
        gb[oc] += hsum_ps(acc) + tail;
        for (int ic = 0; ic < in_c; ++ic) {
            const float* ip = in + static_cast<size_t>(ic) * hw;
            __m256 dacc = _mm256_setzero_ps();
            float dtail = 0.0f;
            i = 0;
            for (; i + 8 <= hw; i += 8)
                dacc = _mm256_fmadd_ps(_mm256_loadu_ps(gp + i), _mm256_loadu_ps(ip + i), dacc);
            for (; i < hw; ++i) dtail += gp[i] * ip[i];
            gw[static_cast<size_t>(oc) * in_c + ic] += hsum_ps(dacc) + dtail;
        }
    }
}

void relu_fwd(float* x, size_t n) {
    const __m256 zero = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) _mm256_storeu_ps(x + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
    for (; i < n; ++i) x[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd(float* grad, const float* out, size_t n) {
    const __m256 zero = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 keep = _mm256_cmp_ps(_mm256_loadu_ps(out + i), zero, _CMP_GT_OQ);
        _mm256_storeu_ps(grad + i, _mm256_and_ps(_mm256_loadu_ps(grad + i), keep));
    }
    for (; i < n; ++i)
        if (out[i] <= 0.0f) grad[i] = 0.0f;
}

void pairwise_sqdist(const float* X, size_t n, const float* Y, size_t m, size_t d, double* out) {
    for (size_t i = 0; i < n; ++i) {
        const float* xi = X + i * d;
        for (size_t j = 0; j < m; ++j) {
            const float* yj = Y + j * d;
            __m256d acc0 = _mm256_setzero_pd();
            __m256d acc1 = _mm256_setzero_pd();
            size_t k = 0;
            for (; k + 8 <= d; k += 8) {
                const __m256 xv = _mm256_loadu_ps(xi + k);
                const __m256 yv = _mm256_loadu_ps(yj + k);
                // subtract after widening so the difference is exact in double
                const __m256d lo = _mm256_sub_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(xv)),
                                                 _mm256_cvtps_pd(_mm256_castps256_ps128(yv)));
                const __m256d hi = _mm256_sub_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(xv, 1)),
                                                 _mm256_cvtps_pd(_mm256_extractf128_ps(yv, 1)));
                acc0 = _mm256_fmadd_pd(lo, lo, acc0);
                acc1 = _mm256_fmadd_pd(hi, hi, acc1);
            }
            double acc = hsum_pd(_mm256_add_pd(acc0, acc1));
            for (; k < d; ++k) {
                const double diff = static_cast<double>(xi[k]) - static_cast<double>(yj[k]);
                acc += diff * diff;
            }
            out[i * m + j] = acc;
        }
    }
}

void composite(const std::uint8_t* fg, const std::uint8_t* bg, const std::uint8_t* mask,
               int n_pixels, int channels, std::uint8_t* out) {
    const size_t total = static_cast<size_t>(n_pixels) * channels;
    // expand the per-pixel mask to per-byte, then wide blends
    std::vector<std::uint8_t> sel(total);
    size_t at = 0;
    for (int p = 0; p < n_pixels; ++p) {
        const std::uint8_t v = mask[p] ? 0xff : 0x00;
        for (int c = 0; c < channels; ++c) sel[at++] = v;
    }
    size_t i = 0;
    for (; i + 32 <= total; i += 32) {
        const __m256i f = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(fg + i));
        const __m256i g = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(bg + i));
        const __m256i sv = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(sel.data() + i));
        _mm256_storeu_si256(reinterpret_cast<__m256i*>(out + i), _mm256_blendv_epi8(g, f, sv));
    }
    for (; i < total; ++i) out[i] = sel[i] ? fg[i] : bg[i];
}

void axpy(float a, const float* x, float* y, size_t n) {
    const __m256 av = _mm256_set1_ps(a);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 cur = _mm256_loadu_ps(y + i);
        cur = _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), cur);
        _mm256_storeu_ps(y + i, cur);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

double dot(const float* a, const float* b, size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 av = _mm256_loadu_ps(a + i);
        const __m256 bv = _mm256_loadu_ps(b + i);
        acc0 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(av)),
                               _mm256_cvtps_pd(_mm256_castps256_ps128(bv)), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(av, 1)),
                               _mm256_cvtps_pd(_mm256_extractf128_ps(bv, 1)), acc1);
    }
    double acc = hsum_pd(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

void adam_step(float* p, const float* g, float* m, float* v, size_t n, float lr, float beta1,
               float beta2, float eps, float bc1, float bc2) {
    const __m256 b1 = _mm256_set1_ps(beta1), ob1 = _mm256_set1_ps(1.0f - beta1);
    const __m256 b2 = _mm256_set1_ps(beta2), ob2 = _mm256_set1_ps(1.0f - beta2);
    const __m256 lrv = _mm256_set1_ps(lr), epsv = _mm256_set1_ps(eps);
    const __m256 bc1v = _mm256_set1_ps(bc1), bc2v = _mm256_set1_ps(bc2);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 gv = _mm256_loadu_ps(g + i);
        __m256 mv = _mm256_loadu_ps(m + i);
        __m256 vv = _mm256_loadu_ps(v + i);
        mv = _mm256_add_ps(_mm256_mul_ps(b1, mv), _mm256_mul_ps(ob1, gv));
        vv = _mm256_add_ps(_mm256_mul_ps(b2, vv), _mm256_mul_ps(ob2, _mm256_mul_ps(gv, gv)));
        _mm256_storeu_ps(m + i, mv);
        _mm256_storeu_ps(v + i, vv);
        const __m256 mhat = _mm256_mul_ps(mv, bc1v);
        const __m256 vhat = _mm256_mul_ps(vv, bc2v);
        const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(vhat), epsv);
        __m256 pv = _mm256_loadu_ps(p + i);
        pv = _mm256_sub_ps(pv, _mm256_div_ps(_mm256_mul_ps(lrv, mhat), denom));
        _mm256_storeu_ps(p + i, pv);
    }
    for (; i < n; ++i) {
        m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
        const float mhat = m[i] * bc1;
        const float vhat = v[i] * bc2;
        p[i] -= lr * mhat / (__builtin_sqrtf(vhat) + eps);
    }
}

}  // namespace avx2

const Kernels* avx2_kernels_impl() {
    static const Kernels k = {
        "avx2",
        avx2::conv3x3_fwd,
        avx2::conv3x3_bwd_data,
        avx2::conv3x3_bwd_weights,
        avx2::conv1x1_fwd,
        avx2::conv1x1_bwd_data,
        avx2::conv1x1_bwd_weights,
        avx2::relu_fwd,
        avx2::relu_bwd,
        avx2::pairwise_sqdist,
        avx2::composite,
        avx2::axpy,
        avx2::dot,
        avx2::adam_step,
    };
    return &k;
}

}  // namespace ctxbias::kern
