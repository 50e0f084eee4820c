#pragma once

#include "runet/autograd.hpp"
#include "runet/gemm.hpp"

namespace runet {

// Unfolds one image (C,H,W) into a (C*k*k) x (Ho*Wo) patch matrix so that
// convolution becomes a single GEMM against the (Cout) x (C*k*k) weight matrix.
// Row order matches the row-major weight layout: r = (c*k + kh)*k + kw.
template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col) {
    const int64_t ncols = static_cast<int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        const T* xc = x + static_cast<int64_t>(c) * H * W;
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                T* row = col + (static_cast<int64_t>(c) * k * k + kh * k + kw) * ncols;
                for (int ho = 0; ho < Ho; ++ho) {
                    int ih = ho * stride - pad + kh;
                    T* dst = row + static_cast<int64_t>(ho) * Wo;
                    if (ih < 0 || ih >= H) {
                        std::fill_n(dst, Wo, T(0));
                        continue;
                    }
                    const T* src_row = xc + static_cast<int64_t>(ih) * W;
                    if (stride == 1) {
                        // valid wo range: 0 <= wo - pad + kw < W
                        int lo = std::max(0, pad - kw);
                        int hi = std::min(Wo, W + pad - kw);
                        if (lo > 0) std::fill_n(dst, lo, T(0));
                        if (hi > lo) std::copy_n(src_row + lo - pad + kw, hi - lo, dst + lo);
                        if (hi < Wo) std::fill_n(dst + std::max(hi, 0), Wo - std::max(hi, lo), T(0));
                    } else {
                        for (int wo = 0; wo < Wo; ++wo) {
                            int iw = wo * stride - pad + kw;
                            dst[wo] = (iw >= 0 && iw < W) ? src_row[iw] : T(0);
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add inverse of im2col, used for the input gradient.
template <typename T>
void col2im_add(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
                T* x) {
    const int64_t ncols = static_cast<int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        T* xc = x + static_cast<int64_t>(c) * H * W;
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                const T* row = col + (static_cast<int64_t>(c) * k * k + kh * k + kw) * ncols;
                for (int ho = 0; ho < Ho; ++ho) {
                    int ih = ho * stride - pad + kh;
                    if (ih < 0 || ih >= H) continue;
                    T* dst_row = xc + static_cast<int64_t>(ih) * W;
                    const T* src = row + static_cast<int64_t>(ho) * Wo;
                    for (int wo = 0; wo < Wo; ++wo) {
                        int iw = wo * stride - pad + kw;
                        if (iw >= 0 && iw < W) dst_row[iw] += src[wo];
                    }
                }
            }
        }
    }
}

// 2D convolution, square odd kernel. x:(N,Cin,H,W) w:(Cout,Cin,k,k) b:(Cout).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1, int pad = 0) {
    const Tensor<T>&xv = x->value, &wv = w->value, &bv = b->value;
    if (xv.rank() != 4 || wv.rank() != 4 || bv.rank() != 1)
        throw InvalidShapeError("conv2d: expected x rank 4, w rank 4, b rank 1");
    int N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int Cout = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != Cin)
        throw InvalidShapeError(cat("conv2d: input channels ", Cin, " vs weight expects ",
                                    wv.dim(1)));
    if (wv.dim(3) != k || k % 2 == 0)
        throw InvalidShapeError(cat("conv2d: kernel must be square and odd, got ", wv.dim(2), "x",
                                    wv.dim(3)));
    if (bv.dim(0) != Cout)
        throw InvalidShapeError(cat("conv2d: bias size ", bv.dim(0), " vs ", Cout, " out channels"));
    if (stride < 1 || pad < 0) throw InvalidConfigError("conv2d: bad stride/pad");
    int Ho = (H + 2 * pad - k) / stride + 1;
    int Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho < 1 || Wo < 1)
        throw InvalidShapeError(cat("conv2d: kernel ", k, " larger than padded input ", H, "x", W));

    const int64_t K = static_cast<int64_t>(Cin) * k * k;
    const int64_t ncols = static_cast<int64_t>(Ho) * Wo;
    Tensor<T> out({N, Cout, Ho, Wo});
    std::vector<T> col(K * ncols);
    for (int n = 0; n < N; ++n) {
        im2col(xv.ptr() + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W, k, stride, pad, Ho, Wo,
               col.data());
        T* on = out.ptr() + static_cast<int64_t>(n) * Cout * ncols;
        gemm(false, false, Cout, static_cast<int>(ncols), static_cast<int>(K), T(1), wv.ptr(),
             static_cast<int>(K), col.data(), static_cast<int>(ncols), T(0), on,
             static_cast<int>(ncols));
        for (int co = 0; co < Cout; ++co) {
            T bias = bv[co];
            T* row = on + co * ncols;
            for (int64_t i = 0; i < ncols; ++i) row[i] += bias;
        }
    }

    auto bwd = [N, Cin, H, W, Cout, k, stride, pad, Ho, Wo, K, ncols](Node<T>& node) {
        const Tensor<T>& xv2 = node.inputs[0]->value;
        const Tensor<T>& wv2 = node.inputs[1]->value;
        bool need_x = node.inputs[0]->requires_grad;
        bool need_w = node.inputs[1]->requires_grad;
        bool need_b = node.inputs[2]->requires_grad;
        Tensor<T> gx, gw, gb;
        if (need_x) gx = Tensor<T>(xv2.shape);
        if (need_w) gw = Tensor<T>(wv2.shape);
        if (need_b) gb = Tensor<T>(Shape{Cout});
        std::vector<T> col(K * ncols), dcol;
        if (need_x) dcol.resize(K * ncols);
        for (int n = 0; n < N; ++n) {
            const T* dyn = node.grad.ptr() + static_cast<int64_t>(n) * Cout * ncols;
            if (need_b) {
                for (int co = 0; co < Cout; ++co) {
                    T s = 0;
                    const T* row = dyn + co * ncols;
                    for (int64_t i = 0; i < ncols; ++i) s += row[i];
                    gb[co] += s;
                }
            }
            if (need_w) {
                im2col(xv2.ptr() + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W, k, stride,
                       pad, Ho, Wo, col.data());
                // dW (Cout x K) += dY (Cout x ncols) * col^T (ncols x K)
                gemm(false, true, Cout, static_cast<int>(K), static_cast<int>(ncols), T(1), dyn,
                     static_cast<int>(ncols), col.data(), static_cast<int>(ncols), T(1), gw.ptr(),
                     static_cast<int>(K));
            }
            if (need_x) {
                // dcol (K x ncols) = W^T (K x Cout) * dY (Cout x ncols)
                gemm(true, false, static_cast<int>(K), static_cast<int>(ncols), Cout, T(1),
                     wv2.ptr(), static_cast<int>(K), dyn, static_cast<int>(ncols), T(0),
                     dcol.data(), static_cast<int>(ncols));
                col2im_add(dcol.data(), Cin, H, W, k, stride, pad, Ho, Wo,
                           gx.ptr() + static_cast<int64_t>(n) * Cin * H * W);
            }
        }
        if (need_x) node.inputs[0]->accumulate(gx);
        if (need_w) node.inputs[1]->accumulate(gw);
        if (need_b) node.inputs[2]->accumulate(gb);
    };
    return make_op<T>(std::move(out), {x, w, b}, bwd);
}

// Transposed convolution with kernel == stride (non-overlapping), which is the
// only configuration the decoder uses; output is exactly stride x larger.
// x:(N,Cin,H,W) w:(Cin,Cout,k,k) b:(Cout).
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 2) {
    const Tensor<T>&xv = x->value, &wv = w->value, &bv = b->value;
    if (xv.rank() != 4 || wv.rank() != 4 || bv.rank() != 1)
        throw InvalidShapeError("conv_transpose2d: expected x rank 4, w rank 4, b rank 1");
    int N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int Cout = wv.dim(1), k = wv.dim(2);
    if (wv.dim(0) != Cin)
        throw InvalidShapeError(cat("conv_transpose2d: input channels ", Cin, " vs weight expects ",
                                    wv.dim(0)));
    if (wv.dim(3) != k) throw InvalidShapeError("conv_transpose2d: kernel must be square");
    if (k != stride)
        throw InvalidConfigError(cat("conv_transpose2d supports kernel == stride only, got k=", k,
                                     " stride=", stride));
    if (bv.dim(0) != Cout)
        throw InvalidShapeError(cat("conv_transpose2d: bias size ", bv.dim(0), " vs ", Cout));
    int Ho = H * stride, Wo = W * stride;

    // G (Cout*k*k x H*W) = w^T (viewed Cin x Cout*k*k) * x_n (Cin x H*W),
    // then each G row scatters to a distinct (kh,kw) phase of the output.
    const int M = Cout * k * k;
    const int64_t ncols = static_cast<int64_t>(H) * W;
    Tensor<T> out({N, Cout, Ho, Wo});
    std::vector<T> g(static_cast<int64_t>(M) * ncols);
    for (int n = 0; n < N; ++n) {
        const T* xn = xv.ptr() + static_cast<int64_t>(n) * Cin * ncols;
        gemm(true, false, M, static_cast<int>(ncols), Cin, T(1), wv.ptr(), M, xn,
             static_cast<int>(ncols), T(0), g.data(), static_cast<int>(ncols));
        T* on = out.ptr() + static_cast<int64_t>(n) * Cout * Ho * Wo;
        for (int co = 0; co < Cout; ++co) {
            T bias = bv[co];
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw) {
                    const T* row = g.data() + (static_cast<int64_t>(co) * k * k + kh * k + kw) * ncols;
                    for (int ih = 0; ih < H; ++ih) {
                        T* dst = on + (static_cast<int64_t>(co) * Ho + ih * stride + kh) * Wo + kw;
                        const T* src = row + static_cast<int64_t>(ih) * W;
                        for (int iw = 0; iw < W; ++iw) dst[iw * stride] = src[iw] + bias;
                    }
                }
        }
    }

    auto bwd = [N, Cin, H, W, Cout, k, stride, M, ncols, Ho, Wo](Node<T>& node) {
        const Tensor<T>& xv2 = node.inputs[0]->value;
        const Tensor<T>& wv2 = node.inputs[1]->value;
        bool need_x = node.inputs[0]->requires_grad;
        bool need_w = node.inputs[1]->requires_grad;
        bool need_b = node.inputs[2]->requires_grad;
        Tensor<T> gx, gw, gb;
        if (need_x) gx = Tensor<T>(xv2.shape);
        if (need_w) gw = Tensor<T>(wv2.shape);
        if (need_b) gb = Tensor<T>(Shape{Cout});
        std::vector<T> dg(static_cast<int64_t>(M) * ncols);
        for (int n = 0; n < N; ++n) {
            const T* dyn = node.grad.ptr() + static_cast<int64_t>(n) * Cout * Ho * Wo;
            // gather dY into the phase-major layout of G
            for (int co = 0; co < Cout; ++co)
                for (int kh = 0; kh < k; ++kh)
                    for (int kw = 0; kw < k; ++kw) {
                        T* row = dg.data() + (static_cast<int64_t>(co) * k * k + kh * k + kw) * ncols;
                        for (int ih = 0; ih < H; ++ih) {
                            const T* src = dyn + (static_cast<int64_t>(co) * Ho + ih * stride + kh) * Wo + kw;
                            T* dst = row + static_cast<int64_t>(ih) * W;
                            for (int iw = 0; iw < W; ++iw) dst[iw] = src[iw * stride];
                        }
                    }
            if (need_b) {
                for (int co = 0; co < Cout; ++co) {
                    T s = 0;
                    const T* plane = dyn + static_cast<int64_t>(co) * Ho * Wo;
                    for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i) s += plane[i];
                    gb[co] += s;
                }
            }
            if (need_x) {
                // dX (Cin x ncols) = w (Cin x M) * dG (M x ncols)
                gemm(false, false, Cin, static_cast<int>(ncols), M, T(1), wv2.ptr(), M, dg.data(),
                     static_cast<int>(ncols), T(0),
                     gx.ptr() + static_cast<int64_t>(n) * Cin * ncols, static_cast<int>(ncols));
            }
            if (need_w) {
                // dW (Cin x M) += x_n (Cin x ncols) * dG^T (ncols x M)
                gemm(false, true, Cin, M, static_cast<int>(ncols), T(1),
                     xv2.ptr() + static_cast<int64_t>(n) * Cin * ncols, static_cast<int>(ncols),
                     dg.data(), static_cast<int>(ncols), T(1), gw.ptr(), M);
            }
        }
        if (need_x) node.inputs[0]->accumulate(gx);
        if (need_w) node.inputs[1]->accumulate(gw);
        if (need_b) node.inputs[2]->accumulate(gb);
    };
    return make_op<T>(std::move(out), {x, w, b}, bwd);
}

// 2x2/2 max pooling. Ties break toward the first maximum in row-major scan
// order, and the winning index is reused by the backward scatter.
template <typename T>
Var<T> max_pool2d(const Var<T>& x) {
    const Tensor<T>& xv = x->value;
    if (xv.rank() != 4) throw InvalidShapeError("max_pool2d: expected rank-4 input");
    int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw InvalidShapeError(cat("max_pool2d: spatial dims must be even, got ", H, "x", W));
    int Ho = H / 2, Wo = W / 2;
    Tensor<T> out({N, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
    int64_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* plane = xv.ptr() + (static_cast<int64_t>(n) * C + c) * H * W;
            for (int ho = 0; ho < Ho; ++ho)
                for (int wo = 0; wo < Wo; ++wo, ++o) {
                    int64_t base = static_cast<int64_t>(2 * ho) * W + 2 * wo;
                    int64_t best = base;
                    T bv = plane[base];
                    const int64_t cands[3] = {base + 1, base + W, base + W + 1};
                    for (int64_t idx : cands)
                        if (plane[idx] > bv) {
                            bv = plane[idx];
                            best = idx;
                        }
                    out[o] = bv;
                    (*argmax)[o] = (static_cast<int64_t>(n) * C + c) * H * W + best;
                }
        }
    return make_op<T>(std::move(out), {x}, [argmax](Node<T>& node) {
        Tensor<T> gx(node.inputs[0]->value.shape);
        for (int64_t i = 0; i < node.grad.size(); ++i) gx[(*argmax)[i]] += node.grad[i];
        node.inputs[0]->accumulate(gx);
    });
}

// Group normalization over (channels/groups, H, W) slices per sample.
// x:(N,C,H,W) gamma,beta:(C). Variance is biased (divide by count).
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups,
                  T eps = T(1e-5)) {
    const Tensor<T>& xv = x->value;
    if (xv.rank() != 4) throw InvalidShapeError("group_norm: expected rank-4 input");
    int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (groups < 1 || C % groups != 0)
        throw InvalidConfigError(cat("group_norm: channels ", C, " not divisible by groups ",
                                     groups));
    if (gamma->value.rank() != 1 || gamma->value.dim(0) != C || beta->value.rank() != 1 ||
        beta->value.dim(0) != C)
        throw InvalidShapeError("group_norm: gamma/beta must have shape [C]");
    const int cg = C / groups;
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t gsize = cg * plane;

    auto xhat = std::make_shared<Tensor<T>>(xv.shape);
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * groups);
    Tensor<T> out(xv.shape);
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const T* src = xv.ptr() + (static_cast<int64_t>(n) * C + g * cg) * plane;
            T mean = 0;
            for (int64_t i = 0; i < gsize; ++i) mean += src[i];
            mean /= static_cast<T>(gsize);
            T var = 0;
            for (int64_t i = 0; i < gsize; ++i) {
                T d = src[i] - mean;
                var += d * d;
            }
            var /= static_cast<T>(gsize);
            T inv = T(1) / std::sqrt(var + eps);
            (*inv_std)[static_cast<size_t>(n) * groups + g] = inv;
            T* xh = xhat->ptr() + (static_cast<int64_t>(n) * C + g * cg) * plane;
            T* dst = out.ptr() + (static_cast<int64_t>(n) * C + g * cg) * plane;
            for (int c = 0; c < cg; ++c) {
                T gm = gamma->value[g * cg + c], bt = beta->value[g * cg + c];
                for (int64_t i = 0; i < plane; ++i) {
                    T v = (src[c * plane + i] - mean) * inv;
                    xh[c * plane + i] = v;
                    dst[c * plane + i] = gm * v + bt;
                }
            }
        }

    auto bwd = [N, C, groups, cg, plane, gsize, xhat, inv_std](Node<T>& node) {
        const Var<T>&xin = node.inputs[0], &gam = node.inputs[1], &bet = node.inputs[2];
        Tensor<T> gx, gg, gb;
        if (xin->requires_grad) gx = Tensor<T>(xin->value.shape);
        if (gam->requires_grad) gg = Tensor<T>(Shape{C});
        if (bet->requires_grad) gb = Tensor<T>(Shape{C});
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < groups; ++g) {
                const int64_t off = (static_cast<int64_t>(n) * C + g * cg) * plane;
                const T* dy = node.grad.ptr() + off;
                const T* xh = xhat->ptr() + off;
                if (gam->requires_grad || bet->requires_grad) {
                    for (int c = 0; c < cg; ++c) {
                        T sg = 0, sb = 0;
                        for (int64_t i = 0; i < plane; ++i) {
                            sg += dy[c * plane + i] * xh[c * plane + i];
                            sb += dy[c * plane + i];
                        }
                        if (gam->requires_grad) gg[g * cg + c] += sg;
                        if (bet->requires_grad) gb[g * cg + c] += sb;
                    }
                }
                if (xin->requires_grad) {
                    T inv = (*inv_std)[static_cast<size_t>(n) * groups + g];
                    T s1 = 0, s2 = 0;  // sums of dxhat and dxhat*xhat over the group
                    for (int c = 0; c < cg; ++c) {
                        T gm = gam->value[g * cg + c];
                        for (int64_t i = 0; i < plane; ++i) {
                            T dxh = dy[c * plane + i] * gm;
                            s1 += dxh;
                            s2 += dxh * xh[c * plane + i];
                        }
                    }
                    s1 /= static_cast<T>(gsize);
                    s2 /= static_cast<T>(gsize);
                    T* dst = gx.ptr() + off;
                    for (int c = 0; c < cg; ++c) {
                        T gm = gam->value[g * cg + c];
                        for (int64_t i = 0; i < plane; ++i) {
                            T dxh = dy[c * plane + i] * gm;
                            dst[c * plane + i] = inv * (dxh - s1 - xh[c * plane + i] * s2);
                        }
                    }
                }
            }
        if (xin->requires_grad) xin->accumulate(gx);
        if (gam->requires_grad) gam->accumulate(gg);
        if (bet->requires_grad) bet->accumulate(gb);
    };
    return make_op<T>(std::move(out), {x, gamma, beta}, bwd);
}

// Batch normalization over (N,H,W) per channel. Training mode normalizes with
// batch statistics (biased variance) and updates the running buffers in place:
// running += momentum * (batch - running). Eval mode uses the running buffers.
template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                    const Var<T>& running_mean, const Var<T>& running_var, bool training,
                    T momentum = T(0.1), T eps = T(1e-5)) {
    const Tensor<T>& xv = x->value;
    if (xv.rank() != 4) throw InvalidShapeError("batch_norm2d: expected rank-4 input");
    int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    for (const Var<T>* p : {&gamma, &beta, &running_mean, &running_var})
        if ((*p)->value.rank() != 1 || (*p)->value.dim(0) != C)
            throw InvalidShapeError("batch_norm2d: per-channel params must have shape [C]");
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t m = static_cast<int64_t>(N) * plane;

    Tensor<T> out(xv.shape);
    if (training) {
        auto xhat = std::make_shared<Tensor<T>>(xv.shape);
        auto inv_std = std::make_shared<std::vector<T>>(C);
        for (int c = 0; c < C; ++c) {
            T mean = 0;
            for (int n = 0; n < N; ++n) {
                const T* src = xv.ptr() + (static_cast<int64_t>(n) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) mean += src[i];
            }
            mean /= static_cast<T>(m);
            T var = 0;
            for (int n = 0; n < N; ++n) {
                const T* src = xv.ptr() + (static_cast<int64_t>(n) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    T d = src[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<T>(m);
            T inv = T(1) / std::sqrt(var + eps);
            (*inv_std)[c] = inv;
            running_mean->value[c] += momentum * (mean - running_mean->value[c]);
            running_var->value[c] += momentum * (var - running_var->value[c]);
            T gm = gamma->value[c], bt = beta->value[c];
            for (int n = 0; n < N; ++n) {
                const int64_t off = (static_cast<int64_t>(n) * C + c) * plane;
                const T* src = xv.ptr() + off;
                T* xh = xhat->ptr() + off;
                T* dst = out.ptr() + off;
                for (int64_t i = 0; i < plane; ++i) {
                    T v = (src[i] - mean) * inv;
                    xh[i] = v;
                    dst[i] = gm * v + bt;
                }
            }
        }
        auto bwd = [N, C, plane, m, xhat, inv_std](Node<T>& node) {
            const Var<T>&xin = node.inputs[0], &gam = node.inputs[1], &bet = node.inputs[2];
            Tensor<T> gx, gg, gb;
            if (xin->requires_grad) gx = Tensor<T>(xin->value.shape);
            if (gam->requires_grad) gg = Tensor<T>(Shape{C});
            if (bet->requires_grad) gb = Tensor<T>(Shape{C});
            for (int c = 0; c < C; ++c) {
                T sg = 0, sb = 0;
                for (int n = 0; n < N; ++n) {
                    const int64_t off = (static_cast<int64_t>(n) * C + c) * plane;
                    const T* dy = node.grad.ptr() + off;
                    const T* xh = xhat->ptr() + off;
                    for (int64_t i = 0; i < plane; ++i) {
                        sg += dy[i] * xh[i];
                        sb += dy[i];
                    }
                }
                if (gam->requires_grad) gg[c] += sg;
                if (bet->requires_grad) gb[c] += sb;
                if (xin->requires_grad) {
                    T gm = gam->value[c];
                    T inv = (*inv_std)[c];
                    T s1 = gm * sb / static_cast<T>(m);
                    T s2 = gm * sg / static_cast<T>(m);
                    for (int n = 0; n < N; ++n) {
                        const int64_t off = (static_cast<int64_t>(n) * C + c) * plane;
                        const T* dy = node.grad.ptr() + off;
                        const T* xh = xhat->ptr() + off;
                        T* dst = gx.ptr() + off;
                        for (int64_t i = 0; i < plane; ++i)
                            dst[i] = inv * (dy[i] * gm - s1 - xh[i] * s2);
                    }
                }
            }
            if (xin->requires_grad) xin->accumulate(gx);
            if (gam->requires_grad) gam->accumulate(gg);
            if (bet->requires_grad) bet->accumulate(gb);
        };
        return make_op<T>(std::move(out), {x, gamma, beta}, bwd);
    }

    // eval mode: running stats are constants, so d/dx is a per-channel scale
    auto scale = std::make_shared<std::vector<T>>(C);
    for (int c = 0; c < C; ++c) {
        T inv = T(1) / std::sqrt(running_var->value[c] + eps);
        (*scale)[c] = gamma->value[c] * inv;
        T gm_inv = (*scale)[c];
        T shift = beta->value[c] - running_mean->value[c] * gm_inv;
        for (int n = 0; n < N; ++n) {
            const int64_t off = (static_cast<int64_t>(n) * C + c) * plane;
            const T* src = xv.ptr() + off;
            T* dst = out.ptr() + off;
            for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * gm_inv + shift;
        }
    }
    auto bwd_eval = [N, C, plane, scale](Node<T>& node) {
        const Var<T>& xin = node.inputs[0];
        if (!xin->requires_grad) return;
        Tensor<T> gx(xin->value.shape);
        for (int c = 0; c < C; ++c)
            for (int n = 0; n < N; ++n) {
                const int64_t off = (static_cast<int64_t>(n) * C + c) * plane;
                const T* dy = node.grad.ptr() + off;
                T* dst = gx.ptr() + off;
                for (int64_t i = 0; i < plane; ++i) dst[i] = dy[i] * (*scale)[c];
            }
        xin->accumulate(gx);
    };
    return make_op<T>(std::move(out), {x}, bwd_eval);
}

// Foreground probability from 2-class logits: p = sigma(l1 - l0).
// logits:(N,2,H,W) -> probs:(N,1,H,W).
template <typename T>
Var<T> softmax2_foreground(const Var<T>& logits) {
    const Tensor<T>& lv = logits->value;
    if (lv.rank() != 4 || lv.dim(1) != 2)
        throw InvalidShapeError(cat("softmax2_foreground: expected (N,2,H,W), got ",
                                    shape_str(lv.shape)));
    int N = lv.dim(0), H = lv.dim(2), W = lv.dim(3);
    const int64_t plane = static_cast<int64_t>(H) * W;
    Tensor<T> out({N, 1, H, W});
    for (int n = 0; n < N; ++n) {
        const T* l0 = lv.ptr() + static_cast<int64_t>(n) * 2 * plane;
        const T* l1 = l0 + plane;
        T* dst = out.ptr() + static_cast<int64_t>(n) * plane;
        for (int64_t i = 0; i < plane; ++i) {
            T d = l1[i] - l0[i];
            dst[i] = d >= T(0) ? T(1) / (T(1) + std::exp(-d)) : std::exp(d) / (T(1) + std::exp(d));
        }
    }
    Tensor<T> probs = out;
    return make_op<T>(std::move(out), {logits}, [N, plane, probs = std::move(probs)](Node<T>& node) {
        Tensor<T> gl(node.inputs[0]->value.shape);
        for (int n = 0; n < N; ++n) {
            const T* p = probs.ptr() + static_cast<int64_t>(n) * plane;
            const T* dy = node.grad.ptr() + static_cast<int64_t>(n) * plane;
            T* g0 = gl.ptr() + static_cast<int64_t>(n) * 2 * plane;
            T* g1 = g0 + plane;
            for (int64_t i = 0; i < plane; ++i) {
                T d = dy[i] * p[i] * (T(1) - p[i]);
                g1[i] = d;
                g0[i] = -d;
            }
        }
        node.inputs[0]->accumulate(gl);
    });
}

// Mean pixelwise 2-class softmax cross-entropy against a binary target.
// logits:(N,2,H,W), target:(N,1,H,W) with values exactly 0 or 1.
template <typename T>
Var<T> softmax_ce_loss(const Var<T>& logits, const Tensor<T>& target) {
    const Tensor<T>& lv = logits->value;
    if (lv.rank() != 4 || lv.dim(1) != 2)
        throw InvalidShapeError(cat("softmax_ce_loss: expected logits (N,2,H,W), got ",
                                    shape_str(lv.shape)));
    int N = lv.dim(0), H = lv.dim(2), W = lv.dim(3);
    if (target.shape != Shape{N, 1, H, W})
        throw InvalidShapeError(cat("softmax_ce_loss: target shape ", shape_str(target.shape),
                                    " vs expected [", N, ",1,", H, ",", W, "]"));
    for (T v : target.data)
        if (v != T(0) && v != T(1))
            throw InvalidDataError("softmax_ce_loss: target must be exactly binary");

    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t m = static_cast<int64_t>(N) * plane;
    auto softplus = [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); };
    auto pfg = std::make_shared<Tensor<T>>(Shape{N, 1, H, W});
    T loss = 0;
    for (int n = 0; n < N; ++n) {
        const T* l0 = lv.ptr() + static_cast<int64_t>(n) * 2 * plane;
        const T* l1 = l0 + plane;
        const T* y = target.ptr() + static_cast<int64_t>(n) * plane;
        T* p = pfg->ptr() + static_cast<int64_t>(n) * plane;
        for (int64_t i = 0; i < plane; ++i) {
            T d = l1[i] - l0[i];
            p[i] = d >= T(0) ? T(1) / (T(1) + std::exp(-d)) : std::exp(d) / (T(1) + std::exp(d));
            // CE = y*softplus(-d) + (1-y)*softplus(d)
            loss += y[i] > T(0.5) ? softplus(-d) : softplus(d);
        }
    }
    loss /= static_cast<T>(m);
    auto target_copy = std::make_shared<Tensor<T>>(target);
    return make_op<T>(Tensor<T>({1}, std::vector<T>{loss}), {logits},
                      [N, plane, m, pfg, target_copy](Node<T>& node) {
                          T g = node.grad[0] / static_cast<T>(m);
                          Tensor<T> gl(node.inputs[0]->value.shape);
                          for (int n = 0; n < N; ++n) {
                              const T* p = pfg->ptr() + static_cast<int64_t>(n) * plane;
                              const T* y = target_copy->ptr() + static_cast<int64_t>(n) * plane;
                              T* g0 = gl.ptr() + static_cast<int64_t>(n) * 2 * plane;
                              T* g1 = g0 + plane;
                              for (int64_t i = 0; i < plane; ++i) {
                                  T d = g * (p[i] - y[i]);
                                  g1[i] = d;
                                  g0[i] = -d;
                              }
                          }
                          node.inputs[0]->accumulate(gl);
                      });
}

}  // namespace runet
