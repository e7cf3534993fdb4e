#include "ctxbias/kernels/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace ctxbias::kern {

// Defined in kernels_avx2.cpp (compiled with -mavx2 -mfma).
const Kernels* avx2_kernels_impl();

const Kernels* avx2_kernels() {
    if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"))
        return avx2_kernels_impl();
    return nullptr;
}

namespace {

const Kernels& select() {
    const char* env = std::getenv("CTXBIAS_KERNELS");
    if (env && std::strcmp(env, "scalar") == 0) return scalar_kernels();
    if (env && std::strcmp(env, "avx2") == 0) {
        if (const Kernels* k = avx2_kernels()) return *k;
        return scalar_kernels();  // requested but unsupported; fall back
    }
    if (const Kernels* k = avx2_kernels()) return *k;
    return scalar_kernels();
}

}  // namespace

const Kernels& active() {
    static const Kernels& k = select();
    return k;
}

const char* active_name() { return active().name; }

}  // namespace ctxbias::kern
