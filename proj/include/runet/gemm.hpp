#pragma once

#include <cblas.h>

#include <cstdlib>

namespace runet {

extern "C" typedef void (*openblas_set_threads_fn)(int);
}  // namespace runet

extern "C" void openblas_set_num_threads(int);

namespace runet {

// BLAS thread count: RUNET_THREADS if set, else 1. Single-threaded BLAS keeps
// results bitwise reproducible; the override exists for bigger machines.
inline void configure_blas_threads() {
    int threads = 1;
    if (const char* env = std::getenv("RUNET_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) threads = v;
    }
    openblas_set_num_threads(threads);
}

inline void ensure_blas_configured() {
    static const bool done = (configure_blas_threads(), true);
    (void)done;
}

// Row-major C(m x n) = alpha * op(A) * op(B) + beta * C.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                 int lda, const float* b, int ldb, float beta, float* c, int ldc) {
    ensure_blas_configured();
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                 int lda, const double* b, int ldb, double beta, double* c, int ldc) {
    ensure_blas_configured();
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace runet
