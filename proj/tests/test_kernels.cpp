#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "ctxbias/core/rng.hpp"
#include "ctxbias/kernels/kernels.hpp"

using namespace ctxbias;
using namespace ctxbias::kern;

namespace {

std::vector<float> random_vec(Rng& rng, size_t n, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.next_uniform(lo, hi));
    return v;
}

// Independent direct convolution with explicit boundary checks, no padding
// buffer; the oracle the padded kernels are checked against.
void conv3x3_naive(const std::vector<float>& in, const Conv3x3Shape& s,
                   const std::vector<float>& w, const std::vector<float>& b,
                   std::vector<float>& out) {
    const int oh = s.out_h(), ow = s.out_w();
    out.assign(static_cast<size_t>(s.out_c) * oh * ow, 0.0f);
    for (int oc = 0; oc < s.out_c; ++oc)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                double acc = b[static_cast<size_t>(oc)];
                for (int ic = 0; ic < s.in_c; ++ic)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = y * s.stride + ky - 1;
                            const int ix = x * s.stride + kx - 1;
                            if (iy < 0 || iy >= s.in_h || ix < 0 || ix >= s.in_w) continue;
                            acc += static_cast<double>(
                                       w[((static_cast<size_t>(oc) * s.in_c + ic) * 9) +
                                         static_cast<size_t>(ky * 3 + kx)]) *
                                   in[(static_cast<size_t>(ic) * s.in_h + iy) * s.in_w + ix];
                        }
                out[(static_cast<size_t>(oc) * oh + y) * ow + x] = static_cast<float>(acc);
            }
}

void check_close(const std::vector<float>& a, const std::vector<float>& b, double tol) {
    REQUIRE(a.size() == b.size());
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max(1.0, std::abs(static_cast<double>(a[i])));
        worst = std::max(worst, std::abs(static_cast<double>(a[i]) - b[i]) / denom);
    }
    CHECK(worst < tol);
}

struct ConvBuffers {
    Conv3x3Shape s;
    std::vector<float> in, in_pad, w, b;

    ConvBuffers(Rng& rng, int ic, int h, int wdt, int oc, int stride) {
        s = {ic, h, wdt, oc, stride};
        in = random_vec(rng, static_cast<size_t>(ic) * h * wdt);
        w = random_vec(rng, static_cast<size_t>(oc) * ic * 9);
        b = random_vec(rng, static_cast<size_t>(oc));
        in_pad.resize(static_cast<size_t>(ic) * s.pad_h() * s.pad_w());
        pad_chw(in.data(), ic, h, wdt, in_pad.data());
    }
    size_t out_size() const { return static_cast<size_t>(s.out_c) * s.out_h() * s.out_w(); }
};

}  // namespace

TEST_CASE("conv3x3 forward matches naive oracle and avx2 matches scalar") {
    Rng rng(42);
    const Kernels& ref = scalar_kernels();
    const Kernels* simd = avx2_kernels();

    for (int stride : {1, 2}) {
        for (auto [ic, h, w, oc] : {std::tuple{3, 16, 16, 8}, std::tuple{5, 13, 19, 4},
                                    std::tuple{16, 32, 32, 12}, std::tuple{1, 7, 9, 3}}) {
            ConvBuffers cb(rng, ic, h, w, oc, stride);
            std::vector<float> out_ref(cb.out_size()), out_naive;
            ref.conv3x3_fwd(cb.in_pad.data(), cb.s, cb.w.data(), cb.b.data(), out_ref.data());
            conv3x3_naive(cb.in, cb.s, cb.w, cb.b, out_naive);
            check_close(out_naive, out_ref, 1e-5);

            if (simd) {
                std::vector<float> out_simd(cb.out_size());
                simd->conv3x3_fwd(cb.in_pad.data(), cb.s, cb.w.data(), cb.b.data(),
                                  out_simd.data());
                check_close(out_ref, out_simd, 1e-4);
            }
        }
    }
}

TEST_CASE("conv3x3 backward-data matches finite differences") {
    Rng rng(7);
    const Kernels& ref = scalar_kernels();
    for (int stride : {1, 2}) {
        ConvBuffers cb(rng, 2, 6, 7, 3, stride);
        std::vector<float> gout = random_vec(rng, cb.out_size());

        std::vector<float> gin_pad(cb.in_pad.size(), 0.0f);
        ref.conv3x3_bwd_data(gout.data(), cb.s, cb.w.data(), gin_pad.data());
        std::vector<float> gin(cb.in.size());
        crop_chw(gin_pad.data(), cb.s.in_c, cb.s.in_h, cb.s.in_w, gin.data());

        // loss = sum(out * gout); d loss / d in[i] by central differences
        auto loss = [&](const std::vector<float>& input) {
            std::vector<float> pad(cb.in_pad.size());
            pad_chw(input.data(), cb.s.in_c, cb.s.in_h, cb.s.in_w, pad.data());
            std::vector<float> out(cb.out_size());
            ref.conv3x3_fwd(pad.data(), cb.s, cb.w.data(), cb.b.data(), out.data());
            double acc = 0.0;
            for (size_t i = 0; i < out.size(); ++i)
                acc += static_cast<double>(out[i]) * gout[i];
            return acc;
        };
        const float eps = 1e-3f;
        for (size_t probe : {size_t{0}, cb.in.size() / 3, cb.in.size() - 1}) {
            std::vector<float> inp = cb.in;
            inp[probe] += eps;
            const double up = loss(inp);
            inp[probe] -= 2 * eps;
            const double dn = loss(inp);
            const double fd = (up - dn) / (2.0 * eps);
            CHECK(std::abs(fd - gin[probe]) < 5e-2 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST_CASE("conv3x3 backward avx2 matches scalar") {
    Rng rng(11);
    const Kernels& ref = scalar_kernels();
    const Kernels* simd = avx2_kernels();
    if (!simd) return;
    for (int stride : {1, 2}) {
        ConvBuffers cb(rng, 6, 18, 21, 5, stride);
        std::vector<float> gout = random_vec(rng, cb.out_size());

        std::vector<float> gp_ref(cb.in_pad.size(), 0.0f), gp_simd(cb.in_pad.size(), 0.0f);
        ref.conv3x3_bwd_data(gout.data(), cb.s, cb.w.data(), gp_ref.data());
        simd->conv3x3_bwd_data(gout.data(), cb.s, cb.w.data(), gp_simd.data());
        check_close(gp_ref, gp_simd, 1e-4);

        std::vector<float> gw_ref(cb.w.size(), 0.0f), gb_ref(cb.b.size(), 0.0f);
        std::vector<float> gw_simd(cb.w.size(), 0.0f), gb_simd(cb.b.size(), 0.0f);
        ref.conv3x3_bwd_weights(cb.in_pad.data(), cb.s, gout.data(), gw_ref.data(),
                                gb_ref.data());
        simd->conv3x3_bwd_weights(cb.in_pad.data(), cb.s, gout.data(), gw_simd.data(),
                                  gb_simd.data());
        check_close(gw_ref, gw_simd, 1e-4);
        check_close(gb_ref, gb_simd, 1e-4);
    }
}

TEST_CASE("conv1x1 forward/backward equivalence") {
    Rng rng(5);
    const Kernels& ref = scalar_kernels();
    const Kernels* simd = avx2_kernels();
    const int in_c = 7, out_c = 9, hw = 83;
    auto in = random_vec(rng, static_cast<size_t>(in_c) * hw);
    auto w = random_vec(rng, static_cast<size_t>(out_c) * in_c);
    auto b = random_vec(rng, static_cast<size_t>(out_c));
    auto gout = random_vec(rng, static_cast<size_t>(out_c) * hw);

    std::vector<float> out_ref(static_cast<size_t>(out_c) * hw);
    ref.conv1x1_fwd(in.data(), in_c, hw, w.data(), b.data(), out_c, out_ref.data());
    // spot-check one element against a direct dot product
    {
        double acc = b[2];
        for (int ic = 0; ic < in_c; ++ic)
            acc += static_cast<double>(w[2 * in_c + ic]) * in[static_cast<size_t>(ic) * hw + 17];
        CHECK(std::abs(out_ref[2 * hw + 17] - acc) < 1e-5);
    }
    if (simd) {
        std::vector<float> out_simd(out_ref.size());
        simd->conv1x1_fwd(in.data(), in_c, hw, w.data(), b.data(), out_c, out_simd.data());
        check_close(out_ref, out_simd, 1e-5);

        std::vector<float> gin_ref(in.size()), gin_simd(in.size());
        ref.conv1x1_bwd_data(gout.data(), out_c, hw, w.data(), in_c, gin_ref.data());
        simd->conv1x1_bwd_data(gout.data(), out_c, hw, w.data(), in_c, gin_simd.data());
        check_close(gin_ref, gin_simd, 1e-5);

        std::vector<float> gw_ref(w.size(), 0.0f), gb_ref(b.size(), 0.0f);
        std::vector<float> gw_simd(w.size(), 0.0f), gb_simd(b.size(), 0.0f);
        ref.conv1x1_bwd_weights(in.data(), in_c, hw, gout.data(), out_c, gw_ref.data(),
                                gb_ref.data());
        simd->conv1x1_bwd_weights(in.data(), in_c, hw, gout.data(), out_c, gw_simd.data(),
                                  gb_simd.data());
        check_close(gw_ref, gw_simd, 1e-5);
        check_close(gb_ref, gb_simd, 1e-5);
    }
}

TEST_CASE("elementwise kernels: relu, axpy, dot, adam, composite") {
    Rng rng(3);
    const Kernels& ref = scalar_kernels();
    const Kernels* simd = avx2_kernels();
    const size_t n = 1003;

    auto x = random_vec(rng, n);
    auto y = random_vec(rng, n);

    {
        auto a = x, b = x;
        ref.relu_fwd(a.data(), n);
        if (simd) {
            simd->relu_fwd(b.data(), n);
            CHECK(a == b);
        }
        for (size_t i = 0; i < n; ++i) CHECK(a[i] == (x[i] > 0 ? x[i] : 0.0f));

        auto ga = y, gb = y;
        ref.relu_bwd(ga.data(), a.data(), n);
        if (simd) {
            simd->relu_bwd(gb.data(), a.data(), n);
            CHECK(ga == gb);
        }
    }
    {
        auto ya = y, yb = y;
        ref.axpy(0.37f, x.data(), ya.data(), n);
        if (simd) {
            simd->axpy(0.37f, x.data(), yb.data(), n);
            check_close(ya, yb, 1e-6);
        }
        const double d_ref = ref.dot(x.data(), y.data(), n);
        if (simd) CHECK(std::abs(simd->dot(x.data(), y.data(), n) - d_ref) < 1e-9);
    }
    {
        auto p1 = x, p2 = x;
        auto g = y;
        std::vector<float> m1(n, 0.0f), v1(n, 0.0f), m2(n, 0.0f), v2(n, 0.0f);
        ref.adam_step(p1.data(), g.data(), m1.data(), v1.data(), n, 1e-3f, 0.9f, 0.999f, 1e-8f,
                      10.0f, 1000.0f);
        if (simd) {
            simd->adam_step(p2.data(), g.data(), m2.data(), v2.data(), n, 1e-3f, 0.9f, 0.999f,
                            1e-8f, 10.0f, 1000.0f);
            check_close(p1, p2, 1e-5);
        }
    }
    {
        const int npx = 517, ch = 3;
        std::vector<std::uint8_t> fg(static_cast<size_t>(npx) * ch), bg(fg.size()),
            mask(static_cast<size_t>(npx));
        for (auto& v : fg) v = static_cast<std::uint8_t>(rng.next_below(256));
        for (auto& v : bg) v = static_cast<std::uint8_t>(rng.next_below(256));
        for (auto& v : mask) v = static_cast<std::uint8_t>(rng.next_below(2));
        std::vector<std::uint8_t> oa(fg.size()), ob(fg.size());
        ref.composite(fg.data(), bg.data(), mask.data(), npx, ch, oa.data());
        if (simd) {
            simd->composite(fg.data(), bg.data(), mask.data(), npx, ch, ob.data());
            CHECK(oa == ob);
        }
        for (int p = 0; p < npx; ++p)
            for (int c = 0; c < ch; ++c)
                CHECK(oa[static_cast<size_t>(p) * ch + c] ==
                      (mask[static_cast<size_t>(p)] ? fg : bg)[static_cast<size_t>(p) * ch + c]);
    }
}

TEST_CASE("pairwise_sqdist matches naive double loop, scalar and avx2") {
    Rng rng(9);
    const Kernels& ref = scalar_kernels();
    const Kernels* simd = avx2_kernels();
    const size_t n = 13, m = 17, d = 21;
    auto X = random_vec(rng, n * d);
    auto Y = random_vec(rng, m * d);

    std::vector<double> naive(n * m);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (size_t k = 0; k < d; ++k) {
                const double diff =
                    static_cast<double>(X[i * d + k]) - static_cast<double>(Y[j * d + k]);
                acc += diff * diff;
            }
            naive[i * m + j] = acc;
        }

    std::vector<double> out_ref(n * m), out_simd(n * m);
    ref.pairwise_sqdist(X.data(), n, Y.data(), m, d, out_ref.data());
    for (size_t i = 0; i < n * m; ++i) CHECK(std::abs(out_ref[i] - naive[i]) < 1e-12);
    if (simd) {
        simd->pairwise_sqdist(X.data(), n, Y.data(), m, d, out_simd.data());
        for (size_t i = 0; i < n * m; ++i) CHECK(std::abs(out_simd[i] - naive[i]) < 1e-10);
    }
}

TEST_CASE("active kernel dispatch reports a valid variant") {
    const char* name = active_name();
    const bool ok = std::string(name) == "scalar" || std::string(name) == "avx2";
    CHECK(ok);
}
