#pragma once

#include "advlab/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace advlab {

// Image-shaped ops on [N,C,H,W] tensors. Parallel loops always own disjoint
// output slices; accumulation within a slice is sequential, so results are
// bitwise reproducible for any thread count.

namespace detail {

template <typename T>
void conv3x3_forward(const T* x, const T* w, const T* b, T* y, int n, int ci, int co, int h, int wd) {
    const int64_t in_plane = static_cast<int64_t>(h) * wd;
    const int64_t x_item = static_cast<int64_t>(ci) * in_plane;
    const int64_t y_item = static_cast<int64_t>(co) * in_plane;
#pragma omp parallel for collapse(2) schedule(static)
    for (int ni = 0; ni < n; ++ni)
        for (int oc = 0; oc < co; ++oc) {
            T* yp = y + ni * y_item + oc * in_plane;
            const T bias = b ? b[oc] : T(0);
            for (int64_t i = 0; i < in_plane; ++i) yp[i] = bias;
            for (int ic = 0; ic < ci; ++ic) {
                const T* xp = x + ni * x_item + ic * in_plane;
                const T* wk = w + ((static_cast<int64_t>(oc) * ci + ic) * 9);
                for (int ky = 0; ky < 3; ++ky) {
                    const int dy = ky - 1;
                    const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    for (int kx = 0; kx < 3; ++kx) {
                        const int dx = kx - 1;
                        const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                        const T wv = wk[ky * 3 + kx];
                        if (wv == T(0)) continue;
                        for (int yy = y0; yy < y1; ++yy) {
                            T* yrow = yp + static_cast<int64_t>(yy) * wd;
                            const T* xrow = xp + static_cast<int64_t>(yy + dy) * wd + dx;
                            for (int xx = x0; xx < x1; ++xx) yrow[xx] += wv * xrow[xx];
                        }
                    }
                }
            }
        }
}

}  // namespace detail

// 3x3 convolution, stride 1, zero padding 1. x:[N,Ci,H,W] w:[Co,Ci,3,3] b:[Co]
template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.shape().size() != 4 || w.shape().size() != 4 || w.dim(2) != 3 || w.dim(3) != 3 || x.dim(1) != w.dim(1) ||
        b.dim(0) != w.dim(0))
        throw std::invalid_argument("conv3x3: bad shapes");
    const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0);
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    auto out = detail::make_op<T>(
        {n, co, h, wd}, {&x, &w, &b}, [xn, wn, bn, n, ci, co, h, wd](TensorNode<T>& o) {
            const int64_t plane = static_cast<int64_t>(h) * wd;
            if (xn->needs_grad) {
                xn->ensure_grad();
                // dX[n,ic] += sum_oc corr(dY[n,oc], flip(w[oc,ic]))
#pragma omp parallel for collapse(2) schedule(static)
                for (int ni = 0; ni < n; ++ni)
                    for (int ic = 0; ic < ci; ++ic) {
                        T* dx = &xn->grad[(static_cast<int64_t>(ni) * ci + ic) * plane];
                        for (int oc = 0; oc < co; ++oc) {
                            const T* dy = &o.grad[(static_cast<int64_t>(ni) * co + oc) * plane];
                            const T* wk = &wn->value[(static_cast<int64_t>(oc) * ci + ic) * 9];
                            for (int ky = 0; ky < 3; ++ky) {
                                const int dyo = ky - 1;
                                const int y0 = std::max(0, -dyo), y1 = std::min(h, h - dyo);
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int dxo = kx - 1;
                                    const int x0 = std::max(0, -dxo), x1 = std::min(wd, wd - dxo);
                                    const T wv = wk[ky * 3 + kx];
                                    if (wv == T(0)) continue;
                                    for (int yy = y0; yy < y1; ++yy) {
                                        const T* gr = dy + static_cast<int64_t>(yy) * wd;
                                        T* dxr = dx + static_cast<int64_t>(yy + dyo) * wd + dxo;
                                        for (int xx = x0; xx < x1; ++xx) dxr[xx] += wv * gr[xx];
                                    }
                                }
                            }
                        }
                    }
            }
            if (wn->needs_grad) {
                wn->ensure_grad();
#pragma omp parallel for schedule(static)
                for (int oc = 0; oc < co; ++oc)
                    for (int ic = 0; ic < ci; ++ic) {
                        T* dw = &wn->grad[(static_cast<int64_t>(oc) * ci + ic) * 9];
                        for (int ni = 0; ni < n; ++ni) {
                            const T* dy = &o.grad[(static_cast<int64_t>(ni) * co + oc) * plane];
                            const T* xp = &xn->value[(static_cast<int64_t>(ni) * ci + ic) * plane];
                            for (int ky = 0; ky < 3; ++ky) {
                                const int dyo = ky - 1;
                                const int y0 = std::max(0, -dyo), y1 = std::min(h, h - dyo);
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int dxo = kx - 1;
                                    const int x0 = std::max(0, -dxo), x1 = std::min(wd, wd - dxo);
                                    T acc = T(0);
                                    for (int yy = y0; yy < y1; ++yy) {
                                        const T* gr = dy + static_cast<int64_t>(yy) * wd;
                                        const T* xr = xp + static_cast<int64_t>(yy + dyo) * wd + dxo;
                                        for (int xx = x0; xx < x1; ++xx) acc += gr[xx] * xr[xx];
                                    }
                                    dw[ky * 3 + kx] += acc;
                                }
                            }
                        }
                    }
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int oc = 0; oc < co; ++oc) {
                    T acc = T(0);
                    for (int ni = 0; ni < n; ++ni) {
                        const T* dy = &o.grad[(static_cast<int64_t>(ni) * co + oc) * plane];
                        for (int64_t i = 0; i < plane; ++i) acc += dy[i];
                    }
                    bn->grad[oc] += acc;
                }
            }
        });
    detail::conv3x3_forward(x.data(), w.data(), b.data(), out.data(), n, ci, co, h, wd);
    return out;
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
    if (x.shape().size() != 4 || x.dim(2) % 2 || x.dim(3) % 2) throw std::invalid_argument("avg_pool2: bad shape");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int ho = h / 2, wo = w / 2;
    auto xn = x.node();
    auto out = detail::make_op<T>(
        {n, c, ho, wo}, {&x}, [xn, n, c, h, w, ho, wo](TensorNode<T>& o) {
            xn->ensure_grad();
            for (int64_t p = 0; p < static_cast<int64_t>(n) * c; ++p) {
                const T* gy = &o.grad[p * ho * wo];
                T* gx = &xn->grad[p * h * w];
                for (int yy = 0; yy < ho; ++yy)
                    for (int xx = 0; xx < wo; ++xx) {
                        const T g = gy[static_cast<int64_t>(yy) * wo + xx] * T(0.25);
                        gx[(2 * yy) * w + 2 * xx] += g;
                        gx[(2 * yy) * w + 2 * xx + 1] += g;
                        gx[(2 * yy + 1) * w + 2 * xx] += g;
                        gx[(2 * yy + 1) * w + 2 * xx + 1] += g;
                    }
            }
        });
    const T* px = x.data();
    T* po = out.data();
    for (int64_t p = 0; p < static_cast<int64_t>(n) * c; ++p) {
        const T* xp = &px[p * h * w];
        T* yp = &po[p * ho * wo];
        for (int yy = 0; yy < ho; ++yy)
            for (int xx = 0; xx < wo; ++xx)
                yp[static_cast<int64_t>(yy) * wo + xx] =
                    T(0.25) * (xp[(2 * yy) * w + 2 * xx] + xp[(2 * yy) * w + 2 * xx + 1] +
                               xp[(2 * yy + 1) * w + 2 * xx] + xp[(2 * yy + 1) * w + 2 * xx + 1]);
    }
    return out;
}

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
    if (x.shape().size() != 4) throw std::invalid_argument("upsample_nearest2: want 4-D");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int ho = h * 2, wo = w * 2;
    auto xn = x.node();
    auto out = detail::make_op<T>(
        {n, c, ho, wo}, {&x}, [xn, n, c, h, w, ho, wo](TensorNode<T>& o) {
            xn->ensure_grad();
            for (int64_t p = 0; p < static_cast<int64_t>(n) * c; ++p) {
                const T* gy = &o.grad[p * ho * wo];
                T* gx = &xn->grad[p * h * w];
                for (int yy = 0; yy < h; ++yy)
                    for (int xx = 0; xx < w; ++xx)
                        gx[static_cast<int64_t>(yy) * w + xx] +=
                            gy[(2 * yy) * wo + 2 * xx] + gy[(2 * yy) * wo + 2 * xx + 1] +
                            gy[(2 * yy + 1) * wo + 2 * xx] + gy[(2 * yy + 1) * wo + 2 * xx + 1];
            }
        });
    const T* px = x.data();
    T* po = out.data();
    for (int64_t p = 0; p < static_cast<int64_t>(n) * c; ++p) {
        const T* xp = &px[p * h * w];
        T* yp = &po[p * ho * wo];
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx) {
                const T v = xp[static_cast<int64_t>(yy) * w + xx];
                yp[(2 * yy) * wo + 2 * xx] = v;
                yp[(2 * yy) * wo + 2 * xx + 1] = v;
                yp[(2 * yy + 1) * wo + 2 * xx] = v;
                yp[(2 * yy + 1) * wo + 2 * xx + 1] = v;
            }
    }
    return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 4 || b.shape().size() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
        a.dim(3) != b.dim(3))
        throw std::invalid_argument("concat_channels: bad shapes");
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    const int64_t plane = static_cast<int64_t>(h) * w;
    auto an = a.node();
    auto bn = b.node();
    auto out = detail::make_op<T>(
        {n, ca + cb, h, w}, {&a, &b}, [an, bn, n, ca, cb, plane](TensorNode<T>& o) {
            for (int ni = 0; ni < n; ++ni) {
                const T* go = &o.grad[static_cast<int64_t>(ni) * (ca + cb) * plane];
                if (an->needs_grad) {
                    an->ensure_grad();
                    T* ga = &an->grad[static_cast<int64_t>(ni) * ca * plane];
                    for (int64_t i = 0; i < ca * plane; ++i) ga[i] += go[i];
                }
                if (bn->needs_grad) {
                    bn->ensure_grad();
                    T* gb = &bn->grad[static_cast<int64_t>(ni) * cb * plane];
                    for (int64_t i = 0; i < cb * plane; ++i) gb[i] += go[ca * plane + i];
                }
            }
        });
    T* po = out.data();
    for (int ni = 0; ni < n; ++ni) {
        std::copy(&a.data()[static_cast<int64_t>(ni) * ca * plane], &a.data()[static_cast<int64_t>(ni) * ca * plane] + ca * plane,
                  &po[static_cast<int64_t>(ni) * (ca + cb) * plane]);
        std::copy(&b.data()[static_cast<int64_t>(ni) * cb * plane], &b.data()[static_cast<int64_t>(ni) * cb * plane] + cb * plane,
                  &po[static_cast<int64_t>(ni) * (ca + cb) * plane + ca * plane]);
    }
    return out;
}

// Feature-wise affine modulation: out[n,c,:,:] = x[n,c,:,:] * (1 + s[n,c]) + t[n,c]
template <typename T>
Tensor<T> film(const Tensor<T>& x, const Tensor<T>& s, const Tensor<T>& t) {
    if (x.shape().size() != 4 || s.shape().size() != 2 || s.shape() != t.shape() || s.dim(0) != x.dim(0) ||
        s.dim(1) != x.dim(1))
        throw std::invalid_argument("film: bad shapes");
    const int n = x.dim(0), c = x.dim(1);
    const int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
    auto xn = x.node();
    auto sn = s.node();
    auto tn = t.node();
    auto out = detail::make_op<T>(
        x.shape(), {&x, &s, &t}, [xn, sn, tn, n, c, plane](TensorNode<T>& o) {
            for (int ni = 0; ni < n; ++ni)
                for (int ch = 0; ch < c; ++ch) {
                    const int64_t off = (static_cast<int64_t>(ni) * c + ch) * plane;
                    const size_t sc = static_cast<size_t>(ni) * c + ch;
                    const T* go = &o.grad[off];
                    if (xn->needs_grad) {
                        xn->ensure_grad();
                        const T k = T(1) + sn->value[sc];
                        T* gx = &xn->grad[off];
                        for (int64_t i = 0; i < plane; ++i) gx[i] += go[i] * k;
                    }
                    if (sn->needs_grad) {
                        sn->ensure_grad();
                        T acc = T(0);
                        const T* xv = &xn->value[off];
                        for (int64_t i = 0; i < plane; ++i) acc += go[i] * xv[i];
                        sn->grad[sc] += acc;
                    }
                    if (tn->needs_grad) {
                        tn->ensure_grad();
                        T acc = T(0);
                        for (int64_t i = 0; i < plane; ++i) acc += go[i];
                        tn->grad[sc] += acc;
                    }
                }
        });
    const T* px = x.data();
    const T* ps = s.data();
    const T* pt = t.data();
    T* po = out.data();
    for (int ni = 0; ni < n; ++ni)
        for (int ch = 0; ch < c; ++ch) {
            const int64_t off = (static_cast<int64_t>(ni) * c + ch) * plane;
            const T k = T(1) + ps[static_cast<size_t>(ni) * c + ch];
            const T b = pt[static_cast<size_t>(ni) * c + ch];
            for (int64_t i = 0; i < plane; ++i) po[off + i] = px[off + i] * k + b;
        }
    return out;
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, int groups, T eps = T(1e-5)) {
    if (x.shape().size() != 4 || x.dim(1) % groups || gamma.dim(0) != x.dim(1) || beta.dim(0) != x.dim(1))
        throw std::invalid_argument("group_norm: bad shapes");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int cg = c / groups;
    const int64_t plane = static_cast<int64_t>(h) * w;
    const int64_t gsize = cg * plane;
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto out = detail::make_op<T>(
        x.shape(), {&x, &gamma, &beta}, [xn, gn, bn, n, c, cg, groups, plane, gsize, eps](TensorNode<T>& o) {
            for (int ni = 0; ni < n; ++ni)
                for (int g = 0; g < groups; ++g) {
                    const int64_t off = (static_cast<int64_t>(ni) * c + static_cast<int64_t>(g) * cg) * plane;
                    const T* xv = &xn->value[off];
                    const T* go = &o.grad[off];
                    T mu = T(0), var = T(0);
                    for (int64_t i = 0; i < gsize; ++i) mu += xv[i];
                    mu /= static_cast<T>(gsize);
                    for (int64_t i = 0; i < gsize; ++i) var += (xv[i] - mu) * (xv[i] - mu);
                    var /= static_cast<T>(gsize);
                    const T istd = T(1) / std::sqrt(var + eps);
                    if (gn->needs_grad || bn->needs_grad) {
                        if (gn->needs_grad) gn->ensure_grad();
                        if (bn->needs_grad) bn->ensure_grad();
                        for (int cc = 0; cc < cg; ++cc) {
                            const int ch = g * cg + cc;
                            T dg = T(0), db = T(0);
                            for (int64_t i = 0; i < plane; ++i) {
                                const int64_t ix = static_cast<int64_t>(cc) * plane + i;
                                dg += go[ix] * (xv[ix] - mu) * istd;
                                db += go[ix];
                            }
                            if (gn->needs_grad) gn->grad[ch] += dg;
                            if (bn->needs_grad) bn->grad[ch] += db;
                        }
                    }
                    if (xn->needs_grad) {
                        xn->ensure_grad();
                        T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                        for (int cc = 0; cc < cg; ++cc) {
                            const T gm = gn->value[g * cg + cc];
                            for (int64_t i = 0; i < plane; ++i) {
                                const int64_t ix = static_cast<int64_t>(cc) * plane + i;
                                const T dxh = go[ix] * gm;
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * (xv[ix] - mu) * istd;
                            }
                        }
                        T* gx = &xn->grad[off];
                        const T inv_m = T(1) / static_cast<T>(gsize);
                        for (int cc = 0; cc < cg; ++cc) {
                            const T gm = gn->value[g * cg + cc];
                            for (int64_t i = 0; i < plane; ++i) {
                                const int64_t ix = static_cast<int64_t>(cc) * plane + i;
                                const T dxh = go[ix] * gm;
                                const T xh = (xv[ix] - mu) * istd;
                                gx[ix] += istd * (dxh - inv_m * sum_dxhat - xh * inv_m * sum_dxhat_xhat);
                            }
                        }
                    }
                }
        });
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pb = beta.data();
    T* po = out.data();
    for (int ni = 0; ni < n; ++ni)
        for (int g = 0; g < groups; ++g) {
            const int64_t off = (static_cast<int64_t>(ni) * c + static_cast<int64_t>(g) * cg) * plane;
            const T* xv = &px[off];
            T mu = T(0), var = T(0);
            for (int64_t i = 0; i < gsize; ++i) mu += xv[i];
            mu /= static_cast<T>(gsize);
            for (int64_t i = 0; i < gsize; ++i) var += (xv[i] - mu) * (xv[i] - mu);
            var /= static_cast<T>(gsize);
            const T istd = T(1) / std::sqrt(var + eps);
            for (int cc = 0; cc < cg; ++cc) {
                const T gm = pg[g * cg + cc], bt = pb[g * cg + cc];
                for (int64_t i = 0; i < plane; ++i) {
                    const int64_t ix = off + static_cast<int64_t>(cc) * plane + i;
                    po[ix] = gm * (px[ix] - mu) * istd + bt;
                }
            }
        }
    return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {  // [N,C,H,W] -> [N,C]
    if (x.shape().size() != 4) throw std::invalid_argument("global_avg_pool: want 4-D");
    const int n = x.dim(0), c = x.dim(1);
    const int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
    auto xn = x.node();
    auto out = detail::make_op<T>(
        {n, c}, {&x}, [xn, n, c, plane](TensorNode<T>& o) {
            xn->ensure_grad();
            const T inv = T(1) / static_cast<T>(plane);
            for (int64_t p = 0; p < static_cast<int64_t>(n) * c; ++p) {
                const T g = o.grad[p] * inv;
                T* gx = &xn->grad[p * plane];
                for (int64_t i = 0; i < plane; ++i) gx[i] += g;
            }
        });
    const T* px = x.data();
    T* po = out.data();
    for (int64_t p = 0; p < static_cast<int64_t>(n) * c; ++p) {
        T acc = T(0);
        const T* xp = &px[p * plane];
        for (int64_t i = 0; i < plane; ++i) acc += xp[i];
        po[p] = acc / static_cast<T>(plane);
    }
    return out;
}

}  // namespace advlab
