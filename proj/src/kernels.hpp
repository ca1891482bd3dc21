#pragma once

#include <cstddef>
#include <cstring>

namespace xlab::detail {

// C[M x N] += op(A) * B[K x N], row-major with leading dimensions, where
// op(A) is A[M x K] or, with TransA, the transpose of A[K x M]. Every
// element of C accumulates its K products in increasing k order starting from
// its current value, whichever code path (vector block or scalar edge) it is
// computed on; results are therefore reproducible for a given (M, N, K) shape.
template <bool TransA = false, typename T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C,
          std::size_t ldc) {
    typedef T vec __attribute__((vector_size(64)));
    constexpr std::size_t W = 64 / sizeof(T);
    constexpr std::size_t NR = 2 * W;
    constexpr std::size_t MR = 4;
    auto load = [](const T* p) {
        vec v;
        std::memcpy(&v, p, sizeof v);
        return v;
    };
    auto store = [](T* p, const vec& v) { std::memcpy(p, &v, sizeof v); };

    // Element (i, k) of op(A).
    auto at = [A, lda](std::size_t i, std::size_t k) { return TransA ? A[k * lda + i] : A[i * lda + k]; };

    // Column panels outermost: a K x NR panel of B stays cached while every
    // row block of A streams past it.
    std::size_t j = 0;
    for (; j + NR <= N; j += NR) {
        std::size_t i = 0;
        for (; i + MR <= M; i += MR) {
            T* c = C + i * ldc + j;
            vec c00 = load(c), c01 = load(c + W);
            vec c10 = load(c + ldc), c11 = load(c + ldc + W);
            vec c20 = load(c + 2 * ldc), c21 = load(c + 2 * ldc + W);
            vec c30 = load(c + 3 * ldc), c31 = load(c + 3 * ldc + W);
            const T* b = B + j;
            for (std::size_t k = 0; k < K; ++k, b += ldb) {
                const vec b0 = load(b), b1 = load(b + W);
                const T x0 = at(i, k), x1 = at(i + 1, k), x2 = at(i + 2, k), x3 = at(i + 3, k);
                c00 += x0 * b0;
                c01 += x0 * b1;
                c10 += x1 * b0;
                c11 += x1 * b1;
                c20 += x2 * b0;
                c21 += x2 * b1;
                c30 += x3 * b0;
                c31 += x3 * b1;
            }
            store(c, c00);
            store(c + W, c01);
            store(c + ldc, c10);
            store(c + ldc + W, c11);
            store(c + 2 * ldc, c20);
            store(c + 2 * ldc + W, c21);
            store(c + 3 * ldc, c30);
            store(c + 3 * ldc + W, c31);
        }
        for (; i < M; ++i) {
            T* c = C + i * ldc + j;
            vec c0 = load(c), c1 = load(c + W);
            const T* b = B + j;
            for (std::size_t k = 0; k < K; ++k, b += ldb) {
                const T x = at(i, k);
                c0 += x * load(b);
                c1 += x * load(b + W);
            }
            store(c, c0);
            store(c + W, c1);
        }
    }
    for (; j < N; ++j) {
        for (std::size_t i = 0; i < M; ++i) {
            T acc = C[i * ldc + j];
            for (std::size_t k = 0; k < K; ++k) acc += at(i, k) * B[k * ldb + j];
            C[i * ldc + j] = acc;
        }
    }
}

// out[c x r] = in[r x c]^T
template <typename T>
void transpose(const T* in, std::size_t rows, std::size_t cols, T* out) {
    constexpr std::size_t tile = 16;
    for (std::size_t r0 = 0; r0 < rows; r0 += tile) {
        for (std::size_t c0 = 0; c0 < cols; c0 += tile) {
            const std::size_t r1 = r0 + tile < rows ? r0 + tile : rows;
            const std::size_t c1 = c0 + tile < cols ? c0 + tile : cols;
            for (std::size_t r = r0; r < r1; ++r) {
                for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
            }
        }
    }
}

}  // namespace xlab::detail
