#pragma once

#include <array>

#include "voxrep/autograd.hpp"

// Volumetric kernels on [N, C, X, Y, Z] tensors. conv3d runs as im2col plus
// GEMM, chunked over output positions with a shape-derived chunk size so the
// work partition (and thus every reduction order) is independent of the
// worker count.

namespace voxrep::tc {

namespace detail {

constexpr int64_t kColsChunkElems = int64_t(1) << 22;  // ~16 MB float buffer

struct Conv3dDims {
    int64_t n, ci, co, k, stride, pad;
    std::array<int64_t, 3> in;   // X, Y, Z
    std::array<int64_t, 3> out;  // oX, oY, oZ
    int64_t in_spatial() const { return in[0] * in[1] * in[2]; }
    int64_t out_spatial() const { return out[0] * out[1] * out[2]; }
    int64_t patch() const { return ci * k * k * k; }
};

inline Conv3dDims conv3d_dims(const Shape& x, const Shape& w, int64_t stride, int64_t pad) {
    if (x.size() != 5) throw ShapeError("conv3d: input must be [N,C,X,Y,Z], got " + shape_str(x));
    if (w.size() != 5 || w[2] != w[3] || w[3] != w[4])
        throw ShapeError("conv3d: weight must be [Co,Ci,k,k,k], got " + shape_str(w));
    if (x[1] != w[1])
        throw ShapeError("conv3d: channel mismatch, input has " + std::to_string(x[1]) +
                         ", weight expects " + std::to_string(w[1]));
    if (stride < 1) throw ArgumentError("conv3d: stride must be >= 1");
    if (pad < 0) throw ArgumentError("conv3d: padding must be >= 0");
    Conv3dDims d;
    d.n = x[0];
    d.ci = x[1];
    d.co = w[0];
    d.k = w[2];
    d.stride = stride;
    d.pad = pad;
    d.in = {x[2], x[3], x[4]};
    for (int a = 0; a < 3; ++a) {
        d.out[a] = (d.in[a] + 2 * pad - d.k) / stride + 1;
        if (d.in[a] + 2 * pad < d.k || d.out[a] <= 0)
            throw ShapeError("conv3d: non-positive output dim for input " + shape_str(x));
    }
    return d;
}

// Patch rows for output positions [o0, o1) of one sample.
template <class S>
void im2col_chunk(const S* x, const Conv3dDims& d, int64_t o0, int64_t o1, S* cols) {
    const int64_t chunk = o1 - o0;
    const int64_t oyz = d.out[1] * d.out[2];
    std::vector<int64_t> cx(chunk), cy(chunk), cz(chunk);
    for (int64_t o = o0; o < o1; ++o) {
        cx[o - o0] = (o / oyz) * d.stride - d.pad;
        cy[o - o0] = ((o / d.out[2]) % d.out[1]) * d.stride - d.pad;
        cz[o - o0] = (o % d.out[2]) * d.stride - d.pad;
    }
    const int64_t ix_max = d.in[0], iy_max = d.in[1], iz_max = d.in[2];
    S* row = cols;
    for (int64_t ci = 0; ci < d.ci; ++ci) {
        const S* xc = x + ci * d.in_spatial();
        for (int64_t kx = 0; kx < d.k; ++kx)
            for (int64_t ky = 0; ky < d.k; ++ky)
                for (int64_t kz = 0; kz < d.k; ++kz, row += chunk) {
                    for (int64_t j = 0; j < chunk; ++j) {
                        const int64_t ix = cx[j] + kx, iy = cy[j] + ky, iz = cz[j] + kz;
                        row[j] = (ix >= 0 && ix < ix_max && iy >= 0 && iy < iy_max &&
                                  iz >= 0 && iz < iz_max)
                                     ? xc[(ix * iy_max + iy) * iz_max + iz]
                                     : S(0);
                    }
                }
    }
}

// Transposed scatter of patch-row gradients back onto one sample.
template <class S>
void col2im_chunk(const S* cols, const Conv3dDims& d, int64_t o0, int64_t o1, S* dx) {
    const int64_t chunk = o1 - o0;
    const int64_t oyz = d.out[1] * d.out[2];
    std::vector<int64_t> cx(chunk), cy(chunk), cz(chunk);
    for (int64_t o = o0; o < o1; ++o) {
        cx[o - o0] = (o / oyz) * d.stride - d.pad;
        cy[o - o0] = ((o / d.out[2]) % d.out[1]) * d.stride - d.pad;
        cz[o - o0] = (o % d.out[2]) * d.stride - d.pad;
    }
    const int64_t ix_max = d.in[0], iy_max = d.in[1], iz_max = d.in[2];
    const S* row = cols;
    for (int64_t ci = 0; ci < d.ci; ++ci) {
        S* xc = dx + ci * d.in_spatial();
        for (int64_t kx = 0; kx < d.k; ++kx)
            for (int64_t ky = 0; ky < d.k; ++ky)
                for (int64_t kz = 0; kz < d.k; ++kz, row += chunk) {
                    for (int64_t j = 0; j < chunk; ++j) {
                        const int64_t ix = cx[j] + kx, iy = cy[j] + ky, iz = cz[j] + kz;
                        if (ix >= 0 && ix < ix_max && iy >= 0 && iy < iy_max && iz >= 0 &&
                            iz < iz_max)
                            xc[(ix * iy_max + iy) * iz_max + iz] += row[j];
                    }
                }
    }
}

inline int64_t conv_chunk_size(int64_t patch, int64_t out_spatial) {
    int64_t c = kColsChunkElems / std::max<int64_t>(patch, 1);
    return std::max<int64_t>(1, std::min(out_spatial, c));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

template <class S>
Var<S> conv3d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int64_t stride, int64_t pad) {
    using detail::Conv3dDims;
    const Conv3dDims d = detail::conv3d_dims(x.shape(), w.shape(), stride, pad);
    if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != d.co))
        throw ShapeError("conv3d: bias must be [Co]");

    const int64_t oS = d.out_spatial();
    const int64_t K = d.patch();
    const int64_t chunk_size = detail::conv_chunk_size(K, oS);
    const int64_t n_chunks = (oS + chunk_size - 1) / chunk_size;

    TensorData<S> out({d.n, d.co, d.out[0], d.out[1], d.out[2]});
    const S* xv = x.value().data();
    const S* wv = w.value().data();
    parallel_for(d.n * n_chunks, [&](int64_t item) {
        const int64_t n = item / n_chunks;
        const int64_t c = item % n_chunks;
        const int64_t o0 = c * chunk_size, o1 = std::min(oS, o0 + chunk_size);
        AlignedVec<S> cols(K * (o1 - o0));
        detail::im2col_chunk(xv + n * d.ci * d.in_spatial(), d, o0, o1, cols.data());
        ConstMatMap<S> W(wv, d.co, K), C(cols.data(), K, o1 - o0);
        MatMap<S> O(out.v.data() + n * d.co * oS, d.co, oS);
        O.middleCols(o0, o1 - o0).noalias() = W * C;
    });
    if (b.defined()) {
        const S* bv = b.value().data();
        parallel_for(d.n, [&](int64_t n) {
            S* on = out.v.data() + n * d.co * oS;
            for (int64_t co = 0; co < d.co; ++co) {
                const S bias = bv[co];
                S* p = on + co * oS;
                for (int64_t s = 0; s < oS; ++s) p[s] += bias;
            }
        });
    }

    auto px = x.node(), pw = w.node();
    auto pb = b.defined() ? b.node() : nullptr;
    std::vector<std::shared_ptr<detail::Node<S>>> parents = {px, pw};
    if (pb) parents.push_back(pb);
    return detail::make_op<S>(
        std::move(out), std::move(parents),
        [px, pw, pb, d, oS, K, chunk_size, n_chunks](detail::Node<S>& nd) {
            const S* g = nd.grad.data();
            if (pb && pb->requires_grad) {
                auto& db = pb->ensure_grad();
                for (int64_t n = 0; n < d.n; ++n)
                    for (int64_t co = 0; co < d.co; ++co) {
                        const S* p = g + (n * d.co + co) * oS;
                        S acc = 0;
                        for (int64_t s = 0; s < oS; ++s) acc += p[s];
                        db[co] += acc;
                    }
            }
            if (px->requires_grad) {
                auto& dx = px->ensure_grad();
                const S* wv = pw->val.v.data();
                // Chunks of one sample overlap in input space; keep them
                // sequential per sample and parallelize across samples.
                parallel_for(d.n, [&](int64_t n) {
                    S* dxn = dx.data() + n * d.ci * d.in_spatial();
                    for (int64_t c = 0; c < n_chunks; ++c) {
                        const int64_t o0 = c * chunk_size, o1 = std::min(oS, o0 + chunk_size);
                        AlignedVec<S> dcols(K * (o1 - o0));
                        ConstMatMap<S> W(wv, d.co, K);
                        ConstMatMap<S> G(g + n * d.co * oS, d.co, oS);
                        MatMap<S>(dcols.data(), K, o1 - o0).noalias() =
                            W.transpose() * G.middleCols(o0, o1 - o0);
                        detail::col2im_chunk(dcols.data(), d, o0, o1, dxn);
                    }
                });
            }
            if (pw->requires_grad) {
                auto& dw = pw->ensure_grad();
                MatMap<S> DW(dw.data(), d.co, K);
                const S* xv = px->val.v.data();
                for (int64_t n = 0; n < d.n; ++n) {
                    ConstMatMap<S> G(g + n * d.co * oS, d.co, oS);
                    for (int64_t c = 0; c < n_chunks; ++c) {
                        const int64_t o0 = c * chunk_size, o1 = std::min(oS, o0 + chunk_size);
                        AlignedVec<S> cols(K * (o1 - o0));
                        detail::im2col_chunk(xv + n * d.ci * d.in_spatial(), d, o0, o1,
                                             cols.data());
                        ConstMatMap<S> C(cols.data(), K, o1 - o0);
                        DW.noalias() += G.middleCols(o0, o1 - o0) * C.transpose();
                    }
                }
            }
        });
}

template <class S>
Var<S> conv3d(const Var<S>& x, const Var<S>& w, int64_t stride, int64_t pad) {
    return conv3d(x, w, Var<S>(), stride, pad);
}

// ---------------------------------------------------------------------------
// 1x1x1 transpose convolution, stride 1: a per-voxel channel mix.
// ---------------------------------------------------------------------------

template <class S>
Var<S> conv_transpose3d_1x1(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    if (x.shape().size() != 5) throw ShapeError("conv_transpose3d_1x1: input must be 5-d");
    if (w.shape().size() != 2)
        throw ShapeError("conv_transpose3d_1x1: weight must be [Co,Ci]");
    const int64_t n = x.shape()[0], ci = x.shape()[1];
    const int64_t sx = x.shape()[2], sy = x.shape()[3], sz = x.shape()[4];
    const int64_t spatial = sx * sy * sz;
    const int64_t co = w.shape()[0];
    if (w.shape()[1] != ci)
        throw ShapeError("conv_transpose3d_1x1: channel mismatch, input has " +
                         std::to_string(ci) + ", weight expects " + std::to_string(w.shape()[1]));
    if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != co))
        throw ShapeError("conv_transpose3d_1x1: bias must be [Co]");

    TensorData<S> out({n, co, sx, sy, sz});
    ConstMatMap<S> W(w.value().data(), co, ci);
    for (int64_t i = 0; i < n; ++i) {
        ConstMatMap<S> X(x.value().data() + i * ci * spatial, ci, spatial);
        MatMap<S> O(out.v.data() + i * co * spatial, co, spatial);
        O.noalias() = W * X;
        if (b.defined())
            for (int64_t c = 0; c < co; ++c) O.row(c).array() += b.value()[c];
    }

    auto px = x.node(), pw = w.node();
    auto pb = b.defined() ? b.node() : nullptr;
    std::vector<std::shared_ptr<detail::Node<S>>> parents = {px, pw};
    if (pb) parents.push_back(pb);
    return detail::make_op<S>(std::move(out), std::move(parents),
                              [px, pw, pb, n, ci, co, spatial](detail::Node<S>& nd) {
                                  ConstMatMap<S> W2(pw->val.v.data(), co, ci);
                                  for (int64_t i = 0; i < n; ++i) {
                                      ConstMatMap<S> G(nd.grad.data() + i * co * spatial, co,
                                                       spatial);
                                      if (px->requires_grad) {
                                          MatMap<S> DX(px->ensure_grad().data() + i * ci * spatial,
                                                       ci, spatial);
                                          DX.noalias() += W2.transpose() * G;
                                      }
                                      if (pw->requires_grad) {
                                          ConstMatMap<S> X(px->val.v.data() + i * ci * spatial,
                                                           ci, spatial);
                                          MatMap<S> DW(pw->ensure_grad().data(), co, ci);
                                          DW.noalias() += G * X.transpose();
                                      }
                                      if (pb && pb->requires_grad) {
                                          auto& db = pb->ensure_grad();
                                          for (int64_t c = 0; c < co; ++c)
                                              db[c] += G.row(c).sum();
                                      }
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Trilinear resize, align-corners=false convention:
//   src = (o + 0.5) * in/out - 0.5, clamped to [0, in-1].
// ---------------------------------------------------------------------------

namespace detail {

struct AxisLerp {
    std::vector<int64_t> i0, i1;
    std::vector<double> w1;  // weight of i1
};

inline AxisLerp axis_lerp(int64_t in, int64_t out) {
    AxisLerp a;
    a.i0.resize(out);
    a.i1.resize(out);
    a.w1.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        if (src > in - 1) src = static_cast<double>(in - 1);
        int64_t i0 = static_cast<int64_t>(src);
        if (i0 > in - 1) i0 = in - 1;
        a.i0[o] = i0;
        a.i1[o] = std::min(i0 + 1, in - 1);
        a.w1[o] = src - static_cast<double>(i0);
    }
    return a;
}

}  // namespace detail

template <class S>
Var<S> trilinear_resize(const Var<S>& x, int64_t tx, int64_t ty, int64_t tz) {
    if (x.shape().size() != 5) throw ShapeError("trilinear_resize: input must be 5-d");
    if (tx < 1 || ty < 1 || tz < 1)
        throw ArgumentError("trilinear_resize: target dims must be >= 1");
    const int64_t n = x.shape()[0], c = x.shape()[1];
    const int64_t ix = x.shape()[2], iy = x.shape()[3], iz = x.shape()[4];
    auto ax = std::make_shared<detail::AxisLerp>(detail::axis_lerp(ix, tx));
    auto ay = std::make_shared<detail::AxisLerp>(detail::axis_lerp(iy, ty));
    auto az = std::make_shared<detail::AxisLerp>(detail::axis_lerp(iz, tz));

    TensorData<S> out({n, c, tx, ty, tz});
    const int64_t in_plane = ix * iy * iz, out_plane = tx * ty * tz;
    const S* xv = x.value().data();
    parallel_for(n * c, [&](int64_t plane) {
        const S* src = xv + plane * in_plane;
        S* dst = out.v.data() + plane * out_plane;
        int64_t o = 0;
        for (int64_t a = 0; a < tx; ++a) {
            const int64_t x0 = ax->i0[a] * iy * iz, x1 = ax->i1[a] * iy * iz;
            const double wx = ax->w1[a];
            for (int64_t bb = 0; bb < ty; ++bb) {
                const int64_t y0 = ay->i0[bb] * iz, y1 = ay->i1[bb] * iz;
                const double wy = ay->w1[bb];
                for (int64_t dd = 0; dd < tz; ++dd, ++o) {
                    const int64_t z0 = az->i0[dd], z1 = az->i1[dd];
                    const double wz = az->w1[dd];
                    const double c00 = src[x0 + y0 + z0] * (1 - wz) + src[x0 + y0 + z1] * wz;
                    const double c01 = src[x0 + y1 + z0] * (1 - wz) + src[x0 + y1 + z1] * wz;
                    const double c10 = src[x1 + y0 + z0] * (1 - wz) + src[x1 + y0 + z1] * wz;
                    const double c11 = src[x1 + y1 + z0] * (1 - wz) + src[x1 + y1 + z1] * wz;
                    const double c0 = c00 * (1 - wy) + c01 * wy;
                    const double c1 = c10 * (1 - wy) + c11 * wy;
                    dst[o] = static_cast<S>(c0 * (1 - wx) + c1 * wx);
                }
            }
        }
    });

    auto px = x.node();
    return detail::make_op<S>(
        std::move(out), {px},
        [px, ax, ay, az, n, c, tx, ty, tz, iy, iz, in_plane, out_plane](detail::Node<S>& nd) {
            auto& dx = px->ensure_grad();
            const S* g = nd.grad.data();
            parallel_for(n * c, [&](int64_t plane) {
                S* dst = dx.data() + plane * in_plane;
                const S* src = g + plane * out_plane;
                int64_t o = 0;
                for (int64_t a = 0; a < tx; ++a) {
                    const int64_t x0 = ax->i0[a] * iy * iz, x1 = ax->i1[a] * iy * iz;
                    const double wx = ax->w1[a];
                    for (int64_t bb = 0; bb < ty; ++bb) {
                        const int64_t y0 = ay->i0[bb] * iz, y1 = ay->i1[bb] * iz;
                        const double wy = ay->w1[bb];
                        for (int64_t dd = 0; dd < tz; ++dd, ++o) {
                            const int64_t z0 = az->i0[dd], z1 = az->i1[dd];
                            const double wz = az->w1[dd];
                            const double gv = src[o];
                            dst[x0 + y0 + z0] += static_cast<S>(gv * (1 - wx) * (1 - wy) * (1 - wz));
                            dst[x0 + y0 + z1] += static_cast<S>(gv * (1 - wx) * (1 - wy) * wz);
                            dst[x0 + y1 + z0] += static_cast<S>(gv * (1 - wx) * wy * (1 - wz));
                            dst[x0 + y1 + z1] += static_cast<S>(gv * (1 - wx) * wy * wz);
                            dst[x1 + y0 + z0] += static_cast<S>(gv * wx * (1 - wy) * (1 - wz));
                            dst[x1 + y0 + z1] += static_cast<S>(gv * wx * (1 - wy) * wz);
                            dst[x1 + y1 + z0] += static_cast<S>(gv * wx * wy * (1 - wz));
                            dst[x1 + y1 + z1] += static_cast<S>(gv * wx * wy * wz);
                        }
                    }
                }
            });
        });
}

// ---------------------------------------------------------------------------
// Weight normalization: w_c = g_c * v_c / ||v_c||, per output channel (row).
// ---------------------------------------------------------------------------

template <class S>
Var<S> weight_norm(const Var<S>& v, const Var<S>& g) {
    if (v.shape().empty()) throw ShapeError("weight_norm: direction tensor must be non-scalar");
    const int64_t co = v.shape()[0];
    if (g.shape().size() != 1 || g.shape()[0] != co)
        throw ShapeError("weight_norm: gain must have one entry per output channel");
    const int64_t rest = v.numel() / co;

    auto norms = std::make_shared<std::vector<double>>(co);
    TensorData<S> out = v.tensor();
    for (int64_t c = 0; c < co; ++c) {
        const S* vc = v.value().data() + c * rest;
        double nsq = 0;
        for (int64_t i = 0; i < rest; ++i) nsq += double(vc[i]) * double(vc[i]);
        const double norm = std::sqrt(nsq);
        if (norm == 0.0)
            throw NumericError("weight_norm: zero-norm direction for channel " +
                               std::to_string(c));
        (*norms)[c] = norm;
        const S scale = static_cast<S>(double(g.value()[c]) / norm);
        S* oc = out.v.data() + c * rest;
        for (int64_t i = 0; i < rest; ++i) oc[i] *= scale;
    }

    auto pv = v.node(), pg = g.node();
    return detail::make_op<S>(std::move(out), {pv, pg},
                              [pv, pg, norms, co, rest](detail::Node<S>& nd) {
                                  for (int64_t c = 0; c < co; ++c) {
                                      const S* dw = nd.grad.data() + c * rest;
                                      const S* vc = pv->val.v.data() + c * rest;
                                      const double norm = (*norms)[c];
                                      double dot = 0;
                                      for (int64_t i = 0; i < rest; ++i)
                                          dot += double(dw[i]) * double(vc[i]);
                                      if (pg->requires_grad)
                                          pg->ensure_grad()[c] += static_cast<S>(dot / norm);
                                      if (pv->requires_grad) {
                                          const double gain = pg->val.v[c];
                                          const double a = gain / norm;
                                          const double bcoef = gain * dot / (norm * norm * norm);
                                          S* dv = pv->ensure_grad().data() + c * rest;
                                          for (int64_t i = 0; i < rest; ++i)
                                              dv[i] += static_cast<S>(a * dw[i] - bcoef * vc[i]);
                                      }
                                  }
                              });
}

}  // namespace voxrep::tc
