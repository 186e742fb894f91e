# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterization kernels: the hot per-pixel loops of the forward,
reference and backward passes. Semantics match kernels._fallback exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log1p

cnp.import_array()

cdef double _EPS_DET = 2e-12

cdef int _FACES[4][3]
_FACES[0][:] = [1, 2, 3]
_FACES[1][:] = [0, 2, 3]
_FACES[2][:] = [0, 1, 3]
_FACES[3][:] = [0, 1, 2]


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _softplus(double x) noexcept nogil:
    if x > 30.0:
        return x
    return log1p(exp(x))


cdef inline double _alpha_unclipped(double f_prev, double f_next, double s) noexcept nogil:
    return 1.0 - exp(_softplus(-s * f_prev) - _softplus(-s * f_next))


cdef inline int _face_hit(const double[:, :, ::1] proj, const double[:, ::1] depths,
                          const double[:, ::1] f, Py_ssize_t k, int fi,
                          double px, double py,
                          double* zp_out, double* f_out) noexcept nogil:
    cdef int ia = _FACES[fi][0], ib = _FACES[fi][1], ic = _FACES[fi][2]
    cdef double ax = proj[k, ia, 0], ay = proj[k, ia, 1]
    cdef double m00 = proj[k, ib, 0] - ax
    cdef double m10 = proj[k, ib, 1] - ay
    cdef double m01 = proj[k, ic, 0] - ax
    cdef double m11 = proj[k, ic, 1] - ay
    cdef double det = m00 * m11 - m01 * m10
    if fabs(det) < _EPS_DET:
        return 0
    cdef double rx = px - ax, ry = py - ay
    cdef double u = (m11 * rx - m01 * ry) / det
    cdef double v = (-m10 * rx + m00 * ry) / det
    if u < 0.0 or v < 0.0 or u + v > 1.0:
        return 0
    cdef double za = depths[k, ia], zb = depths[k, ib], zc = depths[k, ic]
    cdef double w0 = (1.0 - u - v) / za
    cdef double w1 = u / zb
    cdef double w2 = v / zc
    cdef double S = w0 + w1 + w2
    f_out[0] = (w0 * f[k, ia] + w1 * f[k, ib] + w2 * f[k, ic]) / S
    zp_out[0] = 1.0 / S
    return 1


cdef inline int _splat_hits(const double[:, :, ::1] proj, const double[:, ::1] depths,
                            const double[:, ::1] f, const double[:, ::1] bbox,
                            Py_ssize_t k, double px, double py,
                            double* f_prev, double* f_next,
                            int* fi_prev, int* fi_next) noexcept nogil:
    if px < bbox[k, 0] or px > bbox[k, 2] or py < bbox[k, 1] or py > bbox[k, 3]:
        return 0
    cdef double z_lo = 0, z_hi = 0, f_lo = 0, f_hi = 0, zp, fh
    cdef int n = 0, fi, lo_fi = -1, hi_fi = -1
    for fi in range(4):
        if not _face_hit(proj, depths, f, k, fi, px, py, &zp, &fh):
            continue
        if n == 0:
            z_lo = zp; z_hi = zp
            f_lo = fh; f_hi = fh
            lo_fi = fi; hi_fi = fi
        else:
            if zp < z_lo:
                z_lo = zp; f_lo = fh; lo_fi = fi
            if zp > z_hi:
                z_hi = zp; f_hi = fh; hi_fi = fi
        n += 1
    if n < 2:
        return 0
    f_prev[0] = f_lo
    f_next[0] = f_hi
    fi_prev[0] = lo_fi
    fi_next[0] = hi_fi
    return 1


def forward_tiles(const double[:, :, ::1] proj, const double[:, ::1] depths,
                  const double[:, ::1] f, const double[:, ::1] normals,
                  const double[::1] mean_depth, colors_obj,
                  const double[:, ::1] bbox,
                  const long long[::1] tile_starts, const long long[::1] tile_items,
                  tile_ids, int tile_size, int tiles_x,
                  int width, int height, int n_w, double s,
                  double t_stop, double alpha_clip,
                  double[:, :, ::1] normal_map, double[:, ::1] depth_map,
                  double[:, ::1] opacity_map, color_map_obj, bint save_state):
    cdef bint has_color = colors_obj is not None and color_map_obj is not None
    cdef const double[:, ::1] colors = colors_obj if colors_obj is not None \
        else np.zeros((1, 3))
    cdef double[:, :, ::1] color_map = color_map_obj if color_map_obj is not None \
        else np.zeros((1, 1, 3))

    cdef long long tid, lo, hi, L, k
    cdef int tx, ty, x0, y0, col, row, xi, yi, local, npx = tile_size * tile_size
    cdef int wcount, m, i, fip, fin, n_blend
    cdef long long pos
    cdef double px, py, T, acc_o, acc_d, a, fp, fn
    cdef double acc_n0, acc_n1, acc_n2, acc_c0, acc_c1, acc_c2

    widx_arr = np.zeros(n_w, dtype=np.int64)
    wz_arr = np.zeros(n_w, dtype=np.float64)
    cdef long long[::1] widx = widx_arr
    cdef double[::1] wz = wz_arr

    saved = []
    cdef int[::1] counts
    cdef long long[::1] rec_idx
    cdef double[::1] rec_alpha
    cdef Py_ssize_t rec_n

    for tid_obj in tile_ids:
        tid = tid_obj
        lo = tile_starts[tid]
        hi = tile_starts[tid + 1]
        L = hi - lo
        tx = <int>(tid % tiles_x)
        ty = <int>(tid // tiles_x)
        x0 = tx * tile_size
        y0 = ty * tile_size

        counts_arr = np.zeros(npx, dtype=np.int32)
        counts = counts_arr
        if save_state:
            rec_idx_arr = np.empty(npx * L, dtype=np.int64)
            rec_alpha_arr = np.empty(npx * L, dtype=np.float64)
        else:
            rec_idx_arr = np.empty(0, dtype=np.int64)
            rec_alpha_arr = np.empty(0, dtype=np.float64)
        rec_idx = rec_idx_arr
        rec_alpha = rec_alpha_arr
        rec_n = 0

        with nogil:
            for local in range(npx):
                col = local % tile_size
                row = local // tile_size
                xi = x0 + col
                yi = y0 + row
                if xi >= width or yi >= height:
                    continue
                px = xi + 0.5
                py = yi + 0.5
                wcount = 0
                pos = 0
                T = 1.0
                acc_o = 0.0; acc_d = 0.0
                acc_n0 = 0.0; acc_n1 = 0.0; acc_n2 = 0.0
                acc_c0 = 0.0; acc_c1 = 0.0; acc_c2 = 0.0
                n_blend = 0
                while True:
                    while wcount < n_w and pos < L:
                        widx[wcount] = tile_items[lo + pos]
                        wz[wcount] = mean_depth[tile_items[lo + pos]]
                        wcount += 1
                        pos += 1
                    if wcount == 0:
                        break
                    m = 0
                    for i in range(1, wcount):
                        if wz[i] < wz[m]:
                            m = i
                    k = widx[m]
                    for i in range(m, wcount - 1):
                        widx[i] = widx[i + 1]
                        wz[i] = wz[i + 1]
                    wcount -= 1

                    if not _splat_hits(proj, depths, f, bbox, k, px, py,
                                       &fp, &fn, &fip, &fin):
                        continue
                    a = _alpha_unclipped(fp, fn, s)
                    if a <= 0.0:
                        continue
                    if a > alpha_clip:
                        a = alpha_clip
                    acc_o += T * a
                    acc_d += T * a * mean_depth[k]
                    acc_n0 += T * a * normals[k, 0]
                    acc_n1 += T * a * normals[k, 1]
                    acc_n2 += T * a * normals[k, 2]
                    if has_color:
                        acc_c0 += T * a * colors[k, 0]
                        acc_c1 += T * a * colors[k, 1]
                        acc_c2 += T * a * colors[k, 2]
                    if save_state:
                        rec_idx[rec_n] = k
                        rec_alpha[rec_n] = a
                        rec_n += 1
                    n_blend += 1
                    T *= 1.0 - a
                    if T < t_stop:
                        break
                opacity_map[yi, xi] = acc_o
                depth_map[yi, xi] = acc_d
                normal_map[yi, xi, 0] = acc_n0
                normal_map[yi, xi, 1] = acc_n1
                normal_map[yi, xi, 2] = acc_n2
                if has_color:
                    color_map[yi, xi, 0] = acc_c0
                    color_map[yi, xi, 1] = acc_c1
                    color_map[yi, xi, 2] = acc_c2
                if save_state:
                    counts[local] = n_blend
        if save_state:
            saved.append((int(tid), counts_arr,
                          rec_idx_arr[:rec_n].copy(),
                          rec_alpha_arr[:rec_n].copy()))
    return saved


def reference_render(const double[:, :, ::1] proj, const double[:, ::1] depths,
                     const double[:, ::1] f, const double[:, ::1] normals,
                     const double[::1] mean_depth, colors_obj,
                     const double[:, ::1] bbox,
                     int width, int height, double s, double alpha_clip,
                     int row_lo, int row_hi,
                     double[:, :, ::1] normal_map, double[:, ::1] depth_map,
                     double[:, ::1] opacity_map, color_map_obj):
    cdef bint has_color = colors_obj is not None and color_map_obj is not None
    cdef const double[:, ::1] colors = colors_obj if colors_obj is not None \
        else np.zeros((1, 3))
    cdef double[:, :, ::1] color_map = color_map_obj if color_map_obj is not None \
        else np.zeros((1, 1, 3))

    cdef Py_ssize_t K = mean_depth.shape[0]
    order_arr = np.lexsort((np.arange(K), np.asarray(mean_depth))).astype(np.int64)
    cdef long long[::1] order = order_arr

    cdef int xi, yi, fip, fin
    cdef Py_ssize_t oi, k
    cdef double px, py, T, acc_o, acc_d, a, fp, fn
    cdef double acc_n0, acc_n1, acc_n2, acc_c0, acc_c1, acc_c2

    with nogil:
        for yi in range(row_lo, row_hi):
            py = yi + 0.5
            for xi in range(width):
                px = xi + 0.5
                T = 1.0
                acc_o = 0.0; acc_d = 0.0
                acc_n0 = 0.0; acc_n1 = 0.0; acc_n2 = 0.0
                acc_c0 = 0.0; acc_c1 = 0.0; acc_c2 = 0.0
                for oi in range(K):
                    k = order[oi]
                    if not _splat_hits(proj, depths, f, bbox, k, px, py,
                                       &fp, &fn, &fip, &fin):
                        continue
                    a = _alpha_unclipped(fp, fn, s)
                    if a <= 0.0:
                        continue
                    if a > alpha_clip:
                        a = alpha_clip
                    acc_o += T * a
                    acc_d += T * a * mean_depth[k]
                    acc_n0 += T * a * normals[k, 0]
                    acc_n1 += T * a * normals[k, 1]
                    acc_n2 += T * a * normals[k, 2]
                    if has_color:
                        acc_c0 += T * a * colors[k, 0]
                        acc_c1 += T * a * colors[k, 1]
                        acc_c2 += T * a * colors[k, 2]
                    T *= 1.0 - a
                opacity_map[yi, xi] = acc_o
                depth_map[yi, xi] = acc_d
                normal_map[yi, xi, 0] = acc_n0
                normal_map[yi, xi, 1] = acc_n1
                normal_map[yi, xi, 2] = acc_n2
                if has_color:
                    color_map[yi, xi, 0] = acc_c0
                    color_map[yi, xi, 1] = acc_c1
                    color_map[yi, xi, 2] = acc_c2


cdef inline void _face_hit_backward(const double[:, :, ::1] proj,
                                    const double[:, ::1] depths,
                                    const double[:, ::1] f,
                                    Py_ssize_t k, int fi, double px, double py,
                                    double g_fhit, double[:, ::1] d_f,
                                    double[:, :, ::1] d_proj,
                                    double[:, ::1] d_depths) noexcept nogil:
    cdef int ia = _FACES[fi][0], ib = _FACES[fi][1], ic = _FACES[fi][2]
    cdef double ax = proj[k, ia, 0], ay = proj[k, ia, 1]
    cdef double m00 = proj[k, ib, 0] - ax
    cdef double m10 = proj[k, ib, 1] - ay
    cdef double m01 = proj[k, ic, 0] - ax
    cdef double m11 = proj[k, ic, 1] - ay
    cdef double det = m00 * m11 - m01 * m10
    cdef double rx = px - ax, ry = py - ay
    cdef double u = (m11 * rx - m01 * ry) / det
    cdef double v = (-m10 * rx + m00 * ry) / det
    cdef double za = depths[k, ia], zb = depths[k, ib], zc = depths[k, ic]
    cdef double w0 = (1.0 - u - v) / za
    cdef double w1 = u / zb
    cdef double w2 = v / zc
    cdef double S = w0 + w1 + w2
    cdef double f_hit = (w0 * f[k, ia] + w1 * f[k, ib] + w2 * f[k, ic]) / S

    d_f[k, ia] += g_fhit * w0 / S
    d_f[k, ib] += g_fhit * w1 / S
    d_f[k, ic] += g_fhit * w2 / S

    cdef double dw0 = g_fhit * (f[k, ia] - f_hit) / S
    cdef double dw1 = g_fhit * (f[k, ib] - f_hit) / S
    cdef double dw2 = g_fhit * (f[k, ic] - f_hit) / S

    d_depths[k, ia] += dw0 * (-w0 / za)
    d_depths[k, ib] += dw1 * (-w1 / zb)
    d_depths[k, ic] += dw2 * (-w2 / zc)

    cdef double gu = -dw0 / za + dw1 / zb
    cdef double gv = -dw0 / za + dw2 / zc

    cdef double qx = (m11 * gu - m10 * gv) / det
    cdef double qy = (-m01 * gu + m00 * gv) / det
    d_proj[k, ia, 0] += -qx * (1.0 - u - v)
    d_proj[k, ia, 1] += -qy * (1.0 - u - v)
    d_proj[k, ib, 0] += -qx * u
    d_proj[k, ib, 1] += -qy * u
    d_proj[k, ic, 0] += -qx * v
    d_proj[k, ic, 1] += -qy * v


def backward_tiles(const double[:, :, ::1] proj, const double[:, ::1] depths,
                   const double[:, ::1] f, const double[:, ::1] normals,
                   const double[::1] mean_depth, colors_obj,
                   const double[:, ::1] bbox,
                   saved, int tile_size, int tiles_x,
                   int width, int height, double s, double alpha_clip,
                   const double[:, :, ::1] d_normal_map,
                   const double[:, ::1] d_depth_map,
                   const double[:, ::1] d_opacity_map, d_color_map_obj,
                   double[:, ::1] d_f, double[:, :, ::1] d_proj,
                   double[:, ::1] d_depths, double[:, ::1] d_normals,
                   double[::1] d_mean_depth, d_colors_obj):
    cdef bint has_color = (colors_obj is not None and d_color_map_obj is not None
                           and d_colors_obj is not None)
    cdef const double[:, ::1] colors = colors_obj if colors_obj is not None \
        else np.zeros((1, 3))
    cdef const double[:, :, ::1] d_color_map = d_color_map_obj \
        if d_color_map_obj is not None else np.zeros((1, 1, 3))
    cdef double[:, ::1] d_colors = d_colors_obj if d_colors_obj is not None \
        else np.zeros((1, 3))

    cdef long long tid
    cdef int tx, ty, x0, y0, col, row, xi, yi, local, npx = tile_size * tile_size
    cdef Py_ssize_t offset, m, i, k
    cdef int fip, fin, c
    cdef double px, py, T, a, Ti, w, d_alpha, one_m
    cdef double g_o, g_d, gn0, gn1, gn2, gc0, gc1, gc2
    cdef double suf_o, suf_d, sn0, sn1, sn2, sc0, sc1, sc2
    cdef double fp, fn_, a_un, ratio, da_dfp, da_dfn

    cdef const int[::1] counts
    cdef const long long[::1] rec_idx
    cdef const double[::1] rec_alpha
    cdef double[::1] Ts

    ts_arr = np.empty(0)
    for tid_obj, counts_arr, rec_idx_arr, rec_alpha_arr in saved:
        tid = tid_obj
        counts = counts_arr
        rec_idx = rec_idx_arr
        rec_alpha = rec_alpha_arr
        if len(ts_arr) < len(rec_alpha_arr):
            ts_arr = np.empty(max(len(rec_alpha_arr), 64))
        Ts = ts_arr
        tx = <int>(tid % tiles_x)
        ty = <int>(tid // tiles_x)
        x0 = tx * tile_size
        y0 = ty * tile_size
        offset = 0
        with nogil:
            for local in range(npx):
                m = counts[local]
                if m == 0:
                    continue
                col = local % tile_size
                row = local // tile_size
                xi = x0 + col
                yi = y0 + row
                px = xi + 0.5
                py = yi + 0.5

                g_o = d_opacity_map[yi, xi]
                g_d = d_depth_map[yi, xi]
                gn0 = d_normal_map[yi, xi, 0]
                gn1 = d_normal_map[yi, xi, 1]
                gn2 = d_normal_map[yi, xi, 2]
                if has_color:
                    gc0 = d_color_map[yi, xi, 0]
                    gc1 = d_color_map[yi, xi, 1]
                    gc2 = d_color_map[yi, xi, 2]

                T = 1.0
                for i in range(m):
                    Ts[i] = T
                    T *= 1.0 - rec_alpha[offset + i]

                suf_o = 0.0; suf_d = 0.0
                sn0 = 0.0; sn1 = 0.0; sn2 = 0.0
                sc0 = 0.0; sc1 = 0.0; sc2 = 0.0
                for i in range(m - 1, -1, -1):
                    k = rec_idx[offset + i]
                    a = rec_alpha[offset + i]
                    Ti = Ts[i]
                    w = Ti * a
                    one_m = 1.0 - a
                    d_mean_depth[k] += g_d * w
                    d_normals[k, 0] += gn0 * w
                    d_normals[k, 1] += gn1 * w
                    d_normals[k, 2] += gn2 * w
                    if has_color:
                        d_colors[k, 0] += gc0 * w
                        d_colors[k, 1] += gc1 * w
                        d_colors[k, 2] += gc2 * w

                    d_alpha = (g_o * (Ti - suf_o / one_m)
                               + g_d * (Ti * mean_depth[k] - suf_d / one_m))
                    d_alpha += gn0 * (Ti * normals[k, 0] - sn0 / one_m)
                    d_alpha += gn1 * (Ti * normals[k, 1] - sn1 / one_m)
                    d_alpha += gn2 * (Ti * normals[k, 2] - sn2 / one_m)
                    if has_color:
                        d_alpha += gc0 * (Ti * colors[k, 0] - sc0 / one_m)
                        d_alpha += gc1 * (Ti * colors[k, 1] - sc1 / one_m)
                        d_alpha += gc2 * (Ti * colors[k, 2] - sc2 / one_m)

                    suf_o += w
                    suf_d += w * mean_depth[k]
                    sn0 += w * normals[k, 0]
                    sn1 += w * normals[k, 1]
                    sn2 += w * normals[k, 2]
                    if has_color:
                        sc0 += w * colors[k, 0]
                        sc1 += w * colors[k, 1]
                        sc2 += w * colors[k, 2]

                    if not _splat_hits(proj, depths, f, bbox, k, px, py,
                                       &fp, &fn_, &fip, &fin):
                        continue
                    a_un = _alpha_unclipped(fp, fn_, s)
                    if a_un <= 0.0 or a_un > alpha_clip:
                        continue
                    ratio = 1.0 - a_un
                    da_dfp = s * ratio * _sigmoid(-s * fp)
                    da_dfn = -s * ratio * _sigmoid(-s * fn_)
                    _face_hit_backward(proj, depths, f, k, fip, px, py,
                                       d_alpha * da_dfp, d_f, d_proj, d_depths)
                    _face_hit_backward(proj, depths, f, k, fin, px, py,
                                       d_alpha * da_dfn, d_f, d_proj, d_depths)
                offset += m


cdef inline double _tet_gradient(const double[:, ::1] positions,
                                 const double[::1] sdf,
                                 const cnp.int64_t[:, ::1] tets, Py_ssize_t k,
                                 double* g, double* c1, double* c2, double* c3) noexcept nogil:
    """In-tet field gradient via the cross-product form; returns det (6V).

    c1, c2, c3 receive the edge cross products (e2 x e3 etc.) for reuse in the
    backward chain. det == 0 leaves g zeroed.
    """
    cdef Py_ssize_t v0 = tets[k, 0], v1 = tets[k, 1], v2 = tets[k, 2], v3 = tets[k, 3]
    cdef double e1x = positions[v1, 0] - positions[v0, 0]
    cdef double e1y = positions[v1, 1] - positions[v0, 1]
    cdef double e1z = positions[v1, 2] - positions[v0, 2]
    cdef double e2x = positions[v2, 0] - positions[v0, 0]
    cdef double e2y = positions[v2, 1] - positions[v0, 1]
    cdef double e2z = positions[v2, 2] - positions[v0, 2]
    cdef double e3x = positions[v3, 0] - positions[v0, 0]
    cdef double e3y = positions[v3, 1] - positions[v0, 1]
    cdef double e3z = positions[v3, 2] - positions[v0, 2]
    c1[0] = e2y * e3z - e2z * e3y
    c1[1] = e2z * e3x - e2x * e3z
    c1[2] = e2x * e3y - e2y * e3x
    c2[0] = e3y * e1z - e3z * e1y
    c2[1] = e3z * e1x - e3x * e1z
    c2[2] = e3x * e1y - e3y * e1x
    c3[0] = e1y * e2z - e1z * e2y
    c3[1] = e1z * e2x - e1x * e2z
    c3[2] = e1x * e2y - e1y * e2x
    cdef double det = e1x * c1[0] + e1y * c1[1] + e1z * c1[2]
    cdef double df1, df2, df3
    g[0] = 0.0
    g[1] = 0.0
    g[2] = 0.0
    if det != 0.0:
        df1 = sdf[v1] - sdf[v0]
        df2 = sdf[v2] - sdf[v0]
        df3 = sdf[v3] - sdf[v0]
        g[0] = (df1 * c1[0] + df2 * c2[0] + df3 * c3[0]) / det
        g[1] = (df1 * c1[1] + df2 * c2[1] + df3 * c3[1]) / det
        g[2] = (df1 * c1[2] + df2 * c2[2] + df3 * c3[2]) / det
    return det


cdef inline void _chain_dg(const cnp.int64_t[:, ::1] tets, Py_ssize_t k,
                           double det, double* g, double* c1, double* c2,
                           double* c3, double* d_g,
                           double[::1] d_sdf, double[:, ::1] d_deform) noexcept nogil:
    """Accumulate dL/d(sdf) and dL/d(position) from dL/dg of one tet."""
    cdef double d1, d2, d3, d0
    cdef Py_ssize_t c
    cdef Py_ssize_t vs[4]
    cdef double dfs[4]
    if det == 0.0:
        return
    d1 = (c1[0] * d_g[0] + c1[1] * d_g[1] + c1[2] * d_g[2]) / det
    d2 = (c2[0] * d_g[0] + c2[1] * d_g[1] + c2[2] * d_g[2]) / det
    d3 = (c3[0] * d_g[0] + c3[1] * d_g[1] + c3[2] * d_g[2]) / det
    d0 = -(d1 + d2 + d3)
    dfs[0] = d0
    dfs[1] = d1
    dfs[2] = d2
    dfs[3] = d3
    for c in range(4):
        vs[c] = tets[k, c]
        d_sdf[vs[c]] += dfs[c]
        d_deform[vs[c], 0] -= dfs[c] * g[0]
        d_deform[vs[c], 1] -= dfs[c] * g[1]
        d_deform[vs[c], 2] -= dfs[c] * g[2]


def eikonal_kernel(const double[:, ::1] positions, const double[::1] sdf,
                   const cnp.int64_t[:, ::1] tets, const cnp.int64_t[::1] tet_set,
                   double eps_normal,
                   double[::1] d_sdf, double[:, ::1] d_deform):
    cdef double loss = 0.0
    cdef Py_ssize_t i, k
    cdef double g[3]
    cdef double c1[3]
    cdef double c2[3]
    cdef double c3[3]
    cdef double d_g[3]
    cdef double det, norm, w
    with nogil:
        for i in range(tet_set.shape[0]):
            k = tet_set[i]
            det = _tet_gradient(positions, sdf, tets, k, g, c1, c2, c3)
            norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]) ** 0.5
            loss += (norm - 1.0) * (norm - 1.0)
            if norm > eps_normal:
                w = 2.0 * (norm - 1.0) / norm
                d_g[0] = w * g[0]
                d_g[1] = w * g[1]
                d_g[2] = w * g[2]
                _chain_dg(tets, k, det, g, c1, c2, c3, d_g, d_sdf, d_deform)
    return loss


def normal_consistency_kernel(const double[:, ::1] positions, const double[::1] sdf,
                              const cnp.int64_t[:, ::1] tets,
                              const cnp.int64_t[:, ::1] edges,
                              double eps_normal,
                              double[::1] d_sdf, double[:, ::1] d_deform):
    cdef Py_ssize_t K = tets.shape[0]
    cdef Py_ssize_t N = positions.shape[0]
    cdef cnp.ndarray[double, ndim=2] n_t_arr = np.zeros((K, 3))
    cdef cnp.ndarray[double, ndim=1] gnorm_arr = np.zeros(K)
    cdef cnp.ndarray[double, ndim=1] counts_arr = np.zeros(N)
    cdef cnp.ndarray[double, ndim=2] n_v_arr = np.zeros((N, 3))
    cdef cnp.ndarray[double, ndim=1] anorm_arr = np.zeros(N)
    cdef cnp.ndarray[double, ndim=2] d_nv_arr = np.zeros((N, 3))
    cdef double[:, ::1] n_t = n_t_arr
    cdef double[::1] gnorm = gnorm_arr
    cdef double[::1] counts = counts_arr
    cdef double[:, ::1] n_v = n_v_arr      # vertex mean then unit normal
    cdef double[::1] anorm = anorm_arr     # norm of the vertex mean; 0 = undefined
    cdef double[:, ::1] d_nv = d_nv_arr
    cdef double loss = 0.0
    cdef Py_ssize_t k, c, v, a, b, e
    cdef double g[3]
    cdef double c1[3]
    cdef double c2[3]
    cdef double c3[3]
    cdef double d_g[3]
    cdef double d_nt[3]
    cdef double det, norm, an, dot, inv

    with nogil:
        # tet normals onto vertices
        for k in range(K):
            det = _tet_gradient(positions, sdf, tets, k, g, c1, c2, c3)
            norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]) ** 0.5
            gnorm[k] = norm
            if norm < eps_normal:
                continue
            n_t[k, 0] = g[0] / norm
            n_t[k, 1] = g[1] / norm
            n_t[k, 2] = g[2] / norm
            for c in range(4):
                v = tets[k, c]
                counts[v] += 1.0
                n_v[v, 0] += n_t[k, 0]
                n_v[v, 1] += n_t[k, 1]
                n_v[v, 2] += n_t[k, 2]
        for v in range(N):
            if counts[v] == 0.0:
                continue
            n_v[v, 0] /= counts[v]
            n_v[v, 1] /= counts[v]
            n_v[v, 2] /= counts[v]
            an = (n_v[v, 0] ** 2 + n_v[v, 1] ** 2 + n_v[v, 2] ** 2) ** 0.5
            if an < eps_normal:
                continue
            anorm[v] = an
            n_v[v, 0] /= an
            n_v[v, 1] /= an
            n_v[v, 2] /= an
        # edge cosine penalty
        for e in range(edges.shape[0]):
            a = edges[e, 0]
            b = edges[e, 1]
            if anorm[a] == 0.0 or anorm[b] == 0.0:
                continue
            loss += 1.0 - (n_v[a, 0] * n_v[b, 0] + n_v[a, 1] * n_v[b, 1]
                           + n_v[a, 2] * n_v[b, 2])
            for c in range(3):
                d_nv[a, c] -= n_v[b, c]
                d_nv[b, c] -= n_v[a, c]
        # normalize backward at vertices: d_mean = (I - n n^T) d_n / |mean|
        for v in range(N):
            if anorm[v] == 0.0:
                continue
            dot = (n_v[v, 0] * d_nv[v, 0] + n_v[v, 1] * d_nv[v, 1]
                   + n_v[v, 2] * d_nv[v, 2])
            for c in range(3):
                d_nv[v, c] = (d_nv[v, c] - n_v[v, c] * dot) / anorm[v]
        # back through the per-tet normals into sdf/position gradients
        for k in range(K):
            if gnorm[k] < eps_normal:
                continue
            d_nt[0] = 0.0
            d_nt[1] = 0.0
            d_nt[2] = 0.0
            for c in range(4):
                v = tets[k, c]
                inv = 1.0 / counts[v]
                d_nt[0] += d_nv[v, 0] * inv
                d_nt[1] += d_nv[v, 1] * inv
                d_nt[2] += d_nv[v, 2] * inv
            dot = n_t[k, 0] * d_nt[0] + n_t[k, 1] * d_nt[1] + n_t[k, 2] * d_nt[2]
            d_g[0] = (d_nt[0] - n_t[k, 0] * dot) / gnorm[k]
            d_g[1] = (d_nt[1] - n_t[k, 1] * dot) / gnorm[k]
            d_g[2] = (d_nt[2] - n_t[k, 2] * dot) / gnorm[k]
            det = _tet_gradient(positions, sdf, tets, k, g, c1, c2, c3)
            _chain_dg(tets, k, det, g, c1, c2, c3, d_g, d_sdf, d_deform)
    return loss
