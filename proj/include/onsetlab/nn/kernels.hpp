#pragma once

// OpenMP-parallel compute kernels behind every layer. A naive serial
// implementation of the same contracts lives in the onsetlab_ref library and
// is compared against these in the test and benchmark targets.
//
// Layout convention for the convolutional stages: activations are stored
// channel-major over the whole batch, shape {C, N, H, W} ("CNHW"). That turns
// every conv into one GEMM whose inner axis is N*H'*W' (thousands of columns),
// which is what the blocked microkernels below are shaped for. Dense stages
// use plain {N, F}.
//
// Determinism: every output element is accumulated by exactly one thread in a
// fixed order, so results are bit-identical from run to run and independent
// of the thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <vector>

#include "onsetlab/nn/tensor.hpp"

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace onsetlab::nn {

inline int max_threads() {
#if defined(_OPENMP)
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace detail {

// Register-blocked micro-tile: IR rows of C accumulate in registers across
// the k sweep, JR columns span one packed micro-panel. Panels of B are packed
// so the k loop streams contiguous memory; KC bounds the packed chunk so it
// stays cache-resident.
inline constexpr int kGemmIR = 6;
inline constexpr int kGemmJR = 64;
inline constexpr int kGemmJB = 256;  // panel width, multiple of kGemmJR
inline constexpr int kGemmKC = 576;  // k chunk

// Micro-panels: packed[jm][kk][JR] for jm = 0 .. jb/JR - 1. Columns beyond n
// are zero-filled so the microkernel always runs at full width.
template <typename T>
void pack_b_panel(const T* b, int ldb, int k0, int kc, int j0, int jb, int n, T* packed) {
    constexpr int JR = kGemmJR;
    for (int jm = 0; jm < jb; jm += JR) {
        T* dst = packed + static_cast<std::size_t>(jm) * kc;
        const int jw = std::min(JR, n - (j0 + jm));
        for (int kk = 0; kk < kc; ++kk) {
            const T* src = b + static_cast<std::size_t>(k0 + kk) * ldb + (j0 + jm);
            T* d = dst + static_cast<std::size_t>(kk) * JR;
            for (int j = 0; j < jw; ++j) d[j] = src[j];
            for (int j = jw; j < JR; ++j) d[j] = T(0);
        }
    }
}

// Same packing from the transpose: brm is [n x K] row-major and the packed
// panel represents columns j0..j0+jb of brm^T. Rows of brm are read in
// contiguous chunks.
template <typename T>
void pack_bt_panel(const T* brm, int ldb, int k0, int kc, int j0, int jb, int n, T* packed) {
    constexpr int JR = kGemmJR;
    for (int jm = 0; jm < jb; jm += JR) {
        T* dst = packed + static_cast<std::size_t>(jm) * kc;
        const int jw = std::min(JR, n - (j0 + jm));
        for (int j = 0; j < JR; ++j) {
            if (j < jw) {
                const T* src = brm + static_cast<std::size_t>(j0 + jm + j) * ldb + k0;
                for (int kk = 0; kk < kc; ++kk) dst[static_cast<std::size_t>(kk) * JR + j] = src[kk];
            } else {
                for (int kk = 0; kk < kc; ++kk) dst[static_cast<std::size_t>(kk) * JR + j] = T(0);
            }
        }
    }
}

template <typename T, int IR>
void microkernel(const T* a, int lda, const T* bpanel, T* c, int ldc, int kc, int jw,
                 bool accumulate) {
    constexpr int JR = kGemmJR;
    T acc[IR][JR];
    for (int i = 0; i < IR; ++i)
        for (int j = 0; j < JR; ++j) acc[i][j] = T(0);
    for (int kk = 0; kk < kc; ++kk) {
        const T* brow = bpanel + static_cast<std::size_t>(kk) * JR;
        for (int i = 0; i < IR; ++i) {
            const T av = a[static_cast<std::size_t>(i) * lda + kk];
#pragma omp simd
            for (int j = 0; j < JR; ++j) acc[i][j] += av * brow[j];
        }
    }
    for (int i = 0; i < IR; ++i) {
        T* crow = c + static_cast<std::size_t>(i) * ldc;
        if (accumulate)
            for (int j = 0; j < jw; ++j) crow[j] += acc[i][j];
        else
            for (int j = 0; j < jw; ++j) crow[j] = acc[i][j];
    }
}

template <typename T>
void run_microkernel(const T* a, int lda, const T* bpanel, T* c, int ldc, int ih, int kc, int jw,
                     bool accumulate) {
    switch (ih) {
        case 6: microkernel<T, 6>(a, lda, bpanel, c, ldc, kc, jw, accumulate); break;
        case 5: microkernel<T, 5>(a, lda, bpanel, c, ldc, kc, jw, accumulate); break;
        case 4: microkernel<T, 4>(a, lda, bpanel, c, ldc, kc, jw, accumulate); break;
        case 3: microkernel<T, 3>(a, lda, bpanel, c, ldc, kc, jw, accumulate); break;
        case 2: microkernel<T, 2>(a, lda, bpanel, c, ldc, kc, jw, accumulate); break;
        default: microkernel<T, 1>(a, lda, bpanel, c, ldc, kc, jw, accumulate); break;
    }
}

// Plain small-matrix path; packing overhead is not worth it below this.
template <typename T>
void gemm_rr_small(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::size_t>(i) * n;
        if (!accumulate) std::fill(crow, crow + n, T(0));
        const T* arow = a + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = b + static_cast<std::size_t>(kk) * n;
#pragma omp simd
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// C[m x n] (+)= A[m x k] * B[k x n], all row-major.
template <typename T>
void gemm_rr(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    constexpr int IR = detail::kGemmIR;
    constexpr int JB = detail::kGemmJB;
    constexpr int KC = detail::kGemmKC;
    if (n < detail::kGemmJR || static_cast<long>(m) * k * n < 65536) {
        detail::gemm_rr_small(a, b, c, m, k, n, accumulate);
        return;
    }
    const int jpanels = (n + JB - 1) / JB;
#pragma omp parallel
    {
        std::vector<T> packed(static_cast<std::size_t>(JB) * KC);
#pragma omp for schedule(static)
        for (int jp = 0; jp < jpanels; ++jp) {
            const int j0 = jp * JB;
            const int jb = std::min(JB, n - j0);
            for (int k0 = 0; k0 < k; k0 += KC) {
                const int kc = std::min(KC, k - k0);
                detail::pack_b_panel(b, n, k0, kc, j0, jb, n, packed.data());
                const bool acc = accumulate || k0 > 0;
                for (int i0 = 0; i0 < m; i0 += IR) {
                    const int ih = std::min(IR, m - i0);
                    for (int jm = 0; jm < jb; jm += detail::kGemmJR) {
                        const int jw = std::min(detail::kGemmJR, jb - jm);
                        detail::run_microkernel(a + static_cast<std::size_t>(i0) * k + k0, k,
                                                packed.data() + static_cast<std::size_t>(jm) * kc,
                                                c + static_cast<std::size_t>(i0) * n + j0 + jm, n,
                                                ih, kc, jw, acc);
                    }
                }
            }
        }
    }
}

// C[m x n] (+)= A * B^T with A[m x k] and B[n x k], both row-major. Columns
// of the logical B^T are packed from contiguous rows of B, so this handles
// the conv weight gradient (k = batch * positions) without a transpose.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    constexpr int IR = detail::kGemmIR;
    constexpr int JB = detail::kGemmJB;
    constexpr int KC = detail::kGemmKC;
    const int jpanels = (n + JB - 1) / JB;
#pragma omp parallel
    {
        std::vector<T> packed(static_cast<std::size_t>(JB) * KC);
#pragma omp for schedule(static)
        for (int jp = 0; jp < jpanels; ++jp) {
            const int j0 = jp * JB;
            const int jb = std::min(JB, n - j0);
            for (int k0 = 0; k0 < k; k0 += KC) {
                const int kc = std::min(KC, k - k0);
                detail::pack_bt_panel(b, k, k0, kc, j0, jb, n, packed.data());
                const bool acc = accumulate || k0 > 0;
                for (int i0 = 0; i0 < m; i0 += IR) {
                    const int ih = std::min(IR, m - i0);
                    for (int jm = 0; jm < jb; jm += detail::kGemmJR) {
                        const int jw = std::min(detail::kGemmJR, jb - jm);
                        detail::run_microkernel(a + static_cast<std::size_t>(i0) * k + k0, k,
                                                packed.data() + static_cast<std::size_t>(jm) * kc,
                                                c + static_cast<std::size_t>(i0) * n + j0 + jm, n,
                                                ih, kc, jw, acc);
                    }
                }
            }
        }
    }
}

// C[m x n] (+)= A^T * B with A[k x m], B[k x n], row-major. Used for dense
// weight gradients (k = batch); rows of C are owned by single threads.
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::size_t>(i) * n;
        if (!accumulate) std::fill(crow, crow + n, T(0));
        for (int kk = 0; kk < k; ++kk) {
            const T av = a[static_cast<std::size_t>(kk) * m + i];
            const T* brow = b + static_cast<std::size_t>(kk) * n;
#pragma omp simd
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void transpose(const T* src, T* dst, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            dst[static_cast<std::size_t>(j) * rows + i] = src[static_cast<std::size_t>(i) * cols + j];
}

// Geometry of one conv2d over the batch.
struct ConvGeom {
    int c_in, h, w;         // input plane extents
    int c_out, kh, kw;      // kernel
    int pad_top, pad_left;  // zero padding on the low-index side
    int out_h, out_w;

    int patch() const { return c_in * kh * kw; }
    int positions() const { return out_h * out_w; }
};

// 'valid': no padding. 'same': output extents equal input extents, with the
// extra pad element (odd total) on the high-index side.
inline ConvGeom make_conv_geom(int c_in, int h, int w, int c_out, int kh, int kw, bool same) {
    ConvGeom g{};
    g.c_in = c_in;
    g.h = h;
    g.w = w;
    g.c_out = c_out;
    g.kh = kh;
    g.kw = kw;
    if (same) {
        g.pad_top = (kh - 1) / 2;
        g.pad_left = (kw - 1) / 2;
        g.out_h = h;
        g.out_w = w;
    } else {
        if (h < kh || w < kw) throw ContractError("conv2d 'valid': input smaller than kernel");
        g.pad_top = 0;
        g.pad_left = 0;
        g.out_h = h - kh + 1;
        g.out_w = w - kw + 1;
    }
    return g;
}

// Unfold CNHW input x[c_in][n][h][w] into cols[patch x n*positions].
// Row r = (ci, ki, kj); column = n * positions + (oh * out_w + ow).
// Out-of-range taps read zero.
template <typename T>
void im2col_batch(const T* x, const ConvGeom& g, int n, T* cols) {
    const int pos = g.positions();
    const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
    const std::size_t ldcols = static_cast<std::size_t>(n) * pos;
    const int rows = g.patch();
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const int ci = r / (g.kh * g.kw);
        const int ki = (r / g.kw) % g.kh;
        const int kj = r % g.kw;
        T* dst_row = cols + static_cast<std::size_t>(r) * ldcols;
        const T* src_ch = x + static_cast<std::size_t>(ci) * n * plane;
        for (int s = 0; s < n; ++s) {
            const T* src = src_ch + static_cast<std::size_t>(s) * plane;
            T* dst = dst_row + static_cast<std::size_t>(s) * pos;
            for (int oh = 0; oh < g.out_h; ++oh) {
                const int ih = oh - g.pad_top + ki;
                T* d = dst + static_cast<std::size_t>(oh) * g.out_w;
                if (ih < 0 || ih >= g.h) {
                    std::fill(d, d + g.out_w, T(0));
                    continue;
                }
                const T* srow = src + static_cast<std::size_t>(ih) * g.w;
                const int jw = kj - g.pad_left;
                const int lo = std::max(0, -jw);
                const int hi = std::min(g.out_w, g.w - jw);
                for (int ow = 0; ow < lo; ++ow) d[ow] = T(0);
                for (int ow = lo; ow < hi; ++ow) d[ow] = srow[ow + jw];
                for (int ow = hi; ow < g.out_w; ++ow) d[ow] = T(0);
            }
        }
    }
}

// Scatter-add of cols gradients back to CNHW input layout. Parallel over
// input channels: all rows touching channel ci are reduced by one thread.
template <typename T>
void col2im_batch(const T* cols, const ConvGeom& g, int n, T* x) {
    const int pos = g.positions();
    const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
    const std::size_t ldcols = static_cast<std::size_t>(n) * pos;
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < g.c_in; ++ci) {
        T* dst_ch = x + static_cast<std::size_t>(ci) * n * plane;
        std::fill(dst_ch, dst_ch + static_cast<std::size_t>(n) * plane, T(0));
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                const int r = (ci * g.kh + ki) * g.kw + kj;
                const T* src_row = cols + static_cast<std::size_t>(r) * ldcols;
                for (int s = 0; s < n; ++s) {
                    T* dst = dst_ch + static_cast<std::size_t>(s) * plane;
                    const T* src = src_row + static_cast<std::size_t>(s) * pos;
                    for (int oh = 0; oh < g.out_h; ++oh) {
                        const int ih = oh - g.pad_top + ki;
                        if (ih < 0 || ih >= g.h) continue;
                        T* drow = dst + static_cast<std::size_t>(ih) * g.w;
                        const T* srow = src + static_cast<std::size_t>(oh) * g.out_w;
                        const int jw = kj - g.pad_left;
                        const int lo = std::max(0, -jw);
                        const int hi = std::min(g.out_w, g.w - jw);
                        for (int ow = lo; ow < hi; ++ow) drow[ow + jw] += srow[ow];
                    }
                }
            }
        }
    }
}

// y[c][col] += bias[c] over rows of length ld.
template <typename T>
void bias_add_rows(T* y, const T* bias, int rows, std::size_t ld) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        T* row = y + static_cast<std::size_t>(r) * ld;
        const T bv = bias[r];
#pragma omp simd
        for (std::size_t j = 0; j < ld; ++j) row[j] += bv;
    }
}

template <typename T>
void row_sums(const T* y, int rows, std::size_t ld, T* out, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const T* row = y + static_cast<std::size_t>(r) * ld;
        T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
        std::size_t j = 0;
        for (; j + 4 <= ld; j += 4) {
            s0 += row[j];
            s1 += row[j + 1];
            s2 += row[j + 2];
            s3 += row[j + 3];
        }
        for (; j < ld; ++j) s0 += row[j];
        const T s = s0 + s1 + s2 + s3;
        out[r] = accumulate ? out[r] + s : s;
    }
}

// Max-pooling over CNHW planes with stride == pool size and floor output
// extents. Ties pick the lowest linear plane index; argmax is recorded for
// the backward pass as an offset within the sample's input plane.
template <typename T>
void maxpool_forward_cnhw(const T* x, int c, int n, int h, int w, int ph, int pw, T* y,
                          int* argmax) {
    const int oh = h / ph;
    const int ow = w / pw;
    const std::size_t in_plane = static_cast<std::size_t>(h) * w;
    const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
    const long planes = static_cast<long>(c) * n;
#pragma omp parallel for schedule(static)
    for (long p = 0; p < planes; ++p) {
        const T* src = x + p * in_plane;
        T* dst = y + p * out_plane;
        int* arg = argmax + p * out_plane;
        for (int i = 0; i < oh; ++i) {
            for (int j = 0; j < ow; ++j) {
                int best = (i * ph) * w + j * pw;
                T bv = src[best];
                for (int di = 0; di < ph; ++di) {
                    for (int dj = 0; dj < pw; ++dj) {
                        const int idx = (i * ph + di) * w + (j * pw + dj);
                        if (src[idx] > bv) {
                            bv = src[idx];
                            best = idx;
                        }
                    }
                }
                dst[i * ow + j] = bv;
                arg[i * ow + j] = best;
            }
        }
    }
}

template <typename T>
void maxpool_backward_cnhw(const T* dy, const int* argmax, int c, int n, std::size_t in_plane,
                           std::size_t out_plane, T* dx) {
    const long planes = static_cast<long>(c) * n;
#pragma omp parallel for schedule(static)
    for (long p = 0; p < planes; ++p) {
        const T* g = dy + p * out_plane;
        const int* arg = argmax + p * out_plane;
        T* d = dx + p * in_plane;
        std::fill(d, d + in_plane, T(0));
        for (std::size_t o = 0; o < out_plane; ++o) d[arg[o]] += g[o];
    }
}

template <typename T>
void relu_forward(const T* x, T* y, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
        y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_backward(const T* x, const T* dy, T* dx, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
        dx[i] = x[i] > T(0) ? dy[i] : T(0);
}

template <typename T>
void sigmoid_forward(const T* x, T* y, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
        y[i] = T(1) / (T(1) + std::exp(-x[i]));
}

template <typename T>
void sigmoid_backward(const T* y, const T* dy, T* dx, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
        dx[i] = dy[i] * y[i] * (T(1) - y[i]);
}

// Batch-norm statistics over one channel's contiguous CNHW plane block.
template <typename T>
struct BnMoments {
    T mean, var;  // biased variance
};

template <typename T>
BnMoments<T> bn_moments(const T* x, std::size_t count) {
    T s0 = 0, s1 = 0;
    for (std::size_t i = 0; i < count; ++i) s0 += x[i];
    const T mean = s0 / static_cast<T>(count);
    for (std::size_t i = 0; i < count; ++i) {
        const T d = x[i] - mean;
        s1 += d * d;
    }
    return {mean, s1 / static_cast<T>(count)};
}

}  // namespace onsetlab::nn
