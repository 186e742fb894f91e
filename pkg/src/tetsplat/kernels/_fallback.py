"""Pure-Python rasterization kernels.

Reference semantics for the compiled extension: identical traversal order,
hit selection and blending math, written with plain loops. Slow, but exact;
the compiled backend is validated against it.
"""

from __future__ import annotations

import math

import numpy as np

_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))
_EPS_DET = 2e-12  # 2 * projected-area threshold


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus(x):
    if x > 30.0:
        return x
    return math.log1p(math.exp(x))


def _alpha_unclipped(f_prev, f_next, s):
    ratio = math.exp(_softplus(-s * f_prev) - _softplus(-s * f_next))
    return 1.0 - ratio


def _face_hit(proj, depths, f, k, fi, px, py):
    """Barycentric + perspective-corrected hit of pixel (px,py) on face fi of splat k.

    Returns (zp, f_hit) or None.
    """
    ia, ib, ic = _FACES[fi]
    ax, ay = proj[k, ia, 0], proj[k, ia, 1]
    m00 = proj[k, ib, 0] - ax
    m10 = proj[k, ib, 1] - ay
    m01 = proj[k, ic, 0] - ax
    m11 = proj[k, ic, 1] - ay
    det = m00 * m11 - m01 * m10
    if abs(det) < _EPS_DET:
        return None
    rx, ry = px - ax, py - ay
    u = (m11 * rx - m01 * ry) / det
    v = (-m10 * rx + m00 * ry) / det
    if u < 0.0 or v < 0.0 or u + v > 1.0:
        return None
    za, zb, zc = depths[k, ia], depths[k, ib], depths[k, ic]
    w0 = (1.0 - u - v) / za
    w1 = u / zb
    w2 = v / zc
    S = w0 + w1 + w2
    f_hit = (w0 * f[k, ia] + w1 * f[k, ib] + w2 * f[k, ic]) / S
    return 1.0 / S, f_hit


def _splat_hits(proj, depths, f, bbox, k, px, py):
    """Entry/exit SDF values of splat k at the pixel, or None.

    More than two containing faces keeps the nearest and farthest hits.
    """
    if px < bbox[k, 0] or px > bbox[k, 2] or py < bbox[k, 1] or py > bbox[k, 3]:
        return None
    z_lo = z_hi = 0.0
    f_lo = f_hi = 0.0
    n = 0
    for fi in range(4):
        hit = _face_hit(proj, depths, f, k, fi, px, py)
        if hit is None:
            continue
        zp, fh = hit
        if n == 0:
            z_lo = z_hi = zp
            f_lo = f_hi = fh
        else:
            if zp < z_lo:
                z_lo, f_lo = zp, fh
            if zp > z_hi:
                z_hi, f_hi = zp, fh
        n += 1
    if n < 2:
        return None
    return f_lo, f_hi


def forward_tiles(proj, depths, f, normals, mean_depth, colors, bbox,
                  tile_starts, tile_items, tile_ids, tile_size, tiles_x,
                  width, height, n_w, s, t_stop, alpha_clip,
                  normal_map, depth_map, opacity_map, color_map, save_state):
    """Blend the given tiles into the map images.

    Returns a list of per-tile saved records (tile_id, counts, idx, alpha) when
    save_state is true, else an empty list.
    """
    saved = []
    for tid in tile_ids:
        lo, hi = tile_starts[tid], tile_starts[tid + 1]
        items = tile_items[lo:hi]
        tx = tid % tiles_x
        ty = tid // tiles_x
        x0, y0 = tx * tile_size, ty * tile_size
        npx = tile_size * tile_size
        counts = np.zeros(npx, dtype=np.int32) if save_state else None
        rec_idx, rec_alpha = [], []
        for local in range(npx):
            col = local % tile_size
            row = local // tile_size
            xi, yi = x0 + col, y0 + row
            if xi >= width or yi >= height:
                continue
            px, py = xi + 0.5, yi + 0.5
            # per-pixel resorting window over the tile-sorted stream
            widx = [0] * n_w
            wz = [0.0] * n_w
            wcount = 0
            pos = 0
            L = len(items)
            T = 1.0
            acc_o = 0.0
            acc_d = 0.0
            acc_n = [0.0, 0.0, 0.0]
            acc_c = [0.0, 0.0, 0.0]
            n_blend = 0
            while True:
                while wcount < n_w and pos < L:
                    widx[wcount] = items[pos]
                    wz[wcount] = mean_depth[items[pos]]
                    wcount += 1
                    pos += 1
                if wcount == 0:
                    break
                m = 0
                for i in range(1, wcount):
                    if wz[i] < wz[m]:
                        m = i
                k = widx[m]
                for i in range(m, wcount - 1):  # shift keeps stream order on ties
                    widx[i] = widx[i + 1]
                    wz[i] = wz[i + 1]
                wcount -= 1

                hits = _splat_hits(proj, depths, f, bbox, k, px, py)
                if hits is None:
                    continue
                a = _alpha_unclipped(hits[0], hits[1], s)
                if a <= 0.0:
                    continue
                if a > alpha_clip:
                    a = alpha_clip
                acc_o += T * a
                acc_d += T * a * mean_depth[k]
                for c in range(3):
                    acc_n[c] += T * a * normals[k, c]
                if colors is not None:
                    for c in range(3):
                        acc_c[c] += T * a * colors[k, c]
                if save_state:
                    rec_idx.append(k)
                    rec_alpha.append(a)
                n_blend += 1
                T *= 1.0 - a
                if T < t_stop:
                    break
            opacity_map[yi, xi] = acc_o
            depth_map[yi, xi] = acc_d
            for c in range(3):
                normal_map[yi, xi, c] = acc_n[c]
            if color_map is not None:
                for c in range(3):
                    color_map[yi, xi, c] = acc_c[c]
            if save_state:
                counts[local] = n_blend
        if save_state:
            saved.append((tid,
                          counts,
                          np.asarray(rec_idx, dtype=np.int64),
                          np.asarray(rec_alpha, dtype=np.float64)))
    return saved


def reference_render(proj, depths, f, normals, mean_depth, colors, bbox,
                     width, height, s, alpha_clip, row_lo, row_hi,
                     normal_map, depth_map, opacity_map, color_map):
    """Exact per-pixel ordering oracle: full sort by mean depth, no tiling,
    no resorting window, no early stop."""
    K = len(mean_depth)
    order = np.lexsort((np.arange(K), mean_depth))
    for yi in range(row_lo, row_hi):
        py = yi + 0.5
        for xi in range(width):
            px = xi + 0.5
            T = 1.0
            acc_o = acc_d = 0.0
            acc_n = [0.0, 0.0, 0.0]
            acc_c = [0.0, 0.0, 0.0]
            for k in order:
                hits = _splat_hits(proj, depths, f, bbox, k, px, py)
                if hits is None:
                    continue
                a = _alpha_unclipped(hits[0], hits[1], s)
                if a <= 0.0:
                    continue
                if a > alpha_clip:
                    a = alpha_clip
                acc_o += T * a
                acc_d += T * a * mean_depth[k]
                for c in range(3):
                    acc_n[c] += T * a * normals[k, c]
                if colors is not None:
                    for c in range(3):
                        acc_c[c] += T * a * colors[k, c]
                T *= 1.0 - a
            opacity_map[yi, xi] = acc_o
            depth_map[yi, xi] = acc_d
            for c in range(3):
                normal_map[yi, xi, c] = acc_n[c]
            if color_map is not None:
                for c in range(3):
                    color_map[yi, xi, c] = acc_c[c]


def _face_hit_backward(proj, depths, f, k, fi, px, py, g_fhit,
                       d_f, d_proj, d_depths):
    """Accumulate d(loss)/d(face inputs) given d(loss)/d(f_hit) on face fi."""
    ia, ib, ic = _FACES[fi]
    ax, ay = proj[k, ia, 0], proj[k, ia, 1]
    m00 = proj[k, ib, 0] - ax
    m10 = proj[k, ib, 1] - ay
    m01 = proj[k, ic, 0] - ax
    m11 = proj[k, ic, 1] - ay
    det = m00 * m11 - m01 * m10
    rx, ry = px - ax, py - ay
    u = (m11 * rx - m01 * ry) / det
    v = (-m10 * rx + m00 * ry) / det
    za, zb, zc = depths[k, ia], depths[k, ib], depths[k, ic]
    w0 = (1.0 - u - v) / za
    w1 = u / zb
    w2 = v / zc
    S = w0 + w1 + w2
    f_hit = (w0 * f[k, ia] + w1 * f[k, ib] + w2 * f[k, ic]) / S

    d_f[k, ia] += g_fhit * w0 / S
    d_f[k, ib] += g_fhit * w1 / S
    d_f[k, ic] += g_fhit * w2 / S

    dw0 = g_fhit * (f[k, ia] - f_hit) / S
    dw1 = g_fhit * (f[k, ib] - f_hit) / S
    dw2 = g_fhit * (f[k, ic] - f_hit) / S

    d_depths[k, ia] += dw0 * (-w0 / za)
    d_depths[k, ib] += dw1 * (-w1 / zb)
    d_depths[k, ic] += dw2 * (-w2 / zc)

    gu = -dw0 / za + dw1 / zb
    gv = -dw0 / za + dw2 / zc

    # q = M^{-T} (gu, gv)
    qx = (m11 * gu - m10 * gv) / det
    qy = (-m01 * gu + m00 * gv) / det
    d_proj[k, ia, 0] += -qx * (1.0 - u - v)
    d_proj[k, ia, 1] += -qy * (1.0 - u - v)
    d_proj[k, ib, 0] += -qx * u
    d_proj[k, ib, 1] += -qy * u
    d_proj[k, ic, 0] += -qx * v
    d_proj[k, ic, 1] += -qy * v


def _splat_hits_full(proj, depths, f, k, px, py):
    """Entry/exit hits with their face ids, matching _splat_hits' selection."""
    z_lo = z_hi = 0.0
    f_lo = f_hi = 0.0
    fi_lo = fi_hi = -1
    n = 0
    for fi in range(4):
        hit = _face_hit(proj, depths, f, k, fi, px, py)
        if hit is None:
            continue
        zp, fh = hit
        if n == 0:
            z_lo = z_hi = zp
            f_lo = f_hi = fh
            fi_lo = fi_hi = fi
        else:
            if zp < z_lo:
                z_lo, f_lo, fi_lo = zp, fh, fi
            if zp > z_hi:
                z_hi, f_hi, fi_hi = zp, fh, fi
        n += 1
    if n < 2:
        return None
    return f_lo, f_hi, fi_lo, fi_hi


def backward_tiles(proj, depths, f, normals, mean_depth, colors, bbox,
                   saved, tile_size, tiles_x, width, height, s, alpha_clip,
                   d_normal_map, d_depth_map, d_opacity_map, d_color_map,
                   d_f, d_proj, d_depths, d_normals, d_mean_depth, d_colors):
    """Reverse-mode pass over saved per-tile contribution records."""
    for tid, counts, rec_idx, rec_alpha in saved:
        tx = tid % tiles_x
        ty = tid // tiles_x
        x0, y0 = tx * tile_size, ty * tile_size
        offset = 0
        for local in range(tile_size * tile_size):
            m = counts[local]
            if m == 0:
                continue
            col = local % tile_size
            row = local // tile_size
            xi, yi = x0 + col, y0 + row
            px, py = xi + 0.5, yi + 0.5
            idxs = rec_idx[offset:offset + m]
            alphas = rec_alpha[offset:offset + m]
            offset += m

            g_o = d_opacity_map[yi, xi]
            g_d = d_depth_map[yi, xi]
            g_n = d_normal_map[yi, xi]
            g_c = d_color_map[yi, xi] if d_color_map is not None else None

            # entry transmittances
            Ts = np.empty(m)
            T = 1.0
            for i in range(m):
                Ts[i] = T
                T *= 1.0 - alphas[i]

            suf_o = suf_d = 0.0
            suf_n = np.zeros(3)
            suf_c = np.zeros(3)
            for i in range(m - 1, -1, -1):
                k = idxs[i]
                a = alphas[i]
                Ti = Ts[i]
                w = Ti * a
                d_mean_depth[k] += g_d * w
                for c in range(3):
                    d_normals[k, c] += g_n[c] * w
                if g_c is not None:
                    for c in range(3):
                        d_colors[k, c] += g_c[c] * w

                d_alpha = (g_o * (Ti - suf_o / (1.0 - a))
                           + g_d * (Ti * mean_depth[k] - suf_d / (1.0 - a)))
                for c in range(3):
                    d_alpha += g_n[c] * (Ti * normals[k, c] - suf_n[c] / (1.0 - a))
                if g_c is not None:
                    for c in range(3):
                        d_alpha += g_c[c] * (Ti * colors[k, c] - suf_c[c] / (1.0 - a))

                suf_o += w
                suf_d += w * mean_depth[k]
                for c in range(3):
                    suf_n[c] += w * normals[k, c]
                if g_c is not None:
                    for c in range(3):
                        suf_c[c] += w * colors[k, c]

                hits = _splat_hits_full(proj, depths, f, k, px, py)
                if hits is None:
                    continue
                f_prev, f_next, fi_prev, fi_next = hits
                a_un = _alpha_unclipped(f_prev, f_next, s)
                if a_un <= 0.0 or a_un > alpha_clip:
                    continue  # clamp regions have zero local derivative
                ratio = 1.0 - a_un
                da_dfp = s * ratio * _sigmoid(-s * f_prev)
                da_dfn = -s * ratio * _sigmoid(-s * f_next)
                _face_hit_backward(proj, depths, f, k, fi_prev, px, py,
                                   d_alpha * da_dfp, d_f, d_proj, d_depths)
                _face_hit_backward(proj, depths, f, k, fi_next, px, py,
                                   d_alpha * da_dfn, d_f, d_proj, d_depths)


def _tet_gradients_cross(positions, sdf, tets):
    """In-tet field gradients and the cross products reused by the backward chain."""
    tp = positions[tets]
    f = sdf[tets]
    e1 = tp[:, 1] - tp[:, 0]
    e2 = tp[:, 2] - tp[:, 0]
    e3 = tp[:, 3] - tp[:, 0]
    c1 = np.cross(e2, e3)
    c2 = np.cross(e3, e1)
    c3 = np.cross(e1, e2)
    det = np.einsum("ij,ij->i", e1, c1)
    df = f[:, 1:] - f[:, :1]
    g = (df[:, 0, None] * c1 + df[:, 1, None] * c2 + df[:, 2, None] * c3)
    ok = det != 0.0
    g[ok] /= det[ok, None]
    g[~ok] = 0.0
    return g, c1, c2, c3, det


def _chain_dg(tets, det, g, c1, c2, c3, d_g, d_sdf, d_deform):
    """Accumulate dL/d(sdf), dL/d(position) from per-tet dL/dg."""
    ok = det != 0.0
    d123 = np.stack([np.einsum("ij,ij->i", c, d_g) for c in (c1, c2, c3)], axis=1)
    d123[ok] /= det[ok, None]
    d123[~ok] = 0.0
    d_f = np.concatenate([-d123.sum(axis=1, keepdims=True), d123], axis=1)
    d_pos = -d_f[..., None] * g[:, None, :]
    N = len(d_sdf)
    flat = tets.ravel()
    d_sdf += np.bincount(flat, weights=d_f.ravel(), minlength=N)
    for c in range(3):
        d_deform[:, c] += np.bincount(flat, weights=d_pos[..., c].ravel(),
                                      minlength=N)


def eikonal_kernel(positions, sdf, tets, tet_set, eps_normal, d_sdf, d_deform):
    sub = tets[tet_set]
    g, c1, c2, c3, det = _tet_gradients_cross(positions, sdf, sub)
    norms = np.linalg.norm(g, axis=1)
    loss = float(np.sum((norms - 1.0) ** 2))
    d_g = np.zeros_like(g)
    safe = norms > eps_normal
    d_g[safe] = (2.0 * (norms[safe] - 1.0) / norms[safe])[:, None] * g[safe]
    _chain_dg(sub, det, g, c1, c2, c3, d_g, d_sdf, d_deform)
    return loss


def normal_consistency_kernel(positions, sdf, tets, edges, eps_normal,
                              d_sdf, d_deform):
    N = len(positions)
    g, c1, c2, c3, det = _tet_gradients_cross(positions, sdf, tets)
    gnorm = np.linalg.norm(g, axis=1)
    defined_t = gnorm >= eps_normal
    n_t = np.zeros_like(g)
    n_t[defined_t] = g[defined_t] / gnorm[defined_t, None]

    flat = tets[defined_t].ravel()
    counts = np.bincount(flat, minlength=N).astype(np.float64)
    n_rep = np.repeat(n_t[defined_t], 4, axis=0)
    avg = np.stack([np.bincount(flat, weights=n_rep[:, c], minlength=N)
                    for c in range(3)], axis=1)
    has = counts > 0
    avg[has] /= counts[has, None]
    anorm = np.linalg.norm(avg, axis=1)
    defined_v = has & (anorm >= eps_normal)
    n_v = np.zeros_like(avg)
    n_v[defined_v] = avg[defined_v] / anorm[defined_v, None]

    use = defined_v[edges[:, 0]] & defined_v[edges[:, 1]]
    n1, n2 = n_v[edges[use, 0]], n_v[edges[use, 1]]
    loss = float(np.sum(1.0 - np.einsum("ij,ij->i", n1, n2)))

    d_nv = np.zeros_like(n_v)
    for c in range(3):
        d_nv[:, c] -= np.bincount(edges[use, 0], weights=n2[:, c], minlength=N)
        d_nv[:, c] -= np.bincount(edges[use, 1], weights=n1[:, c], minlength=N)

    d_avg = np.zeros_like(avg)
    dot = np.einsum("ij,ij->i", n_v[defined_v], d_nv[defined_v])
    d_avg[defined_v] = (d_nv[defined_v] - n_v[defined_v] * dot[:, None]) \
        / anorm[defined_v, None]

    d_nt = np.zeros_like(n_t)
    d_nt[defined_t] = (d_avg[tets[defined_t]]
                       / counts[tets[defined_t], None]).sum(axis=1)
    d_g = np.zeros_like(g)
    dot_t = np.einsum("ij,ij->i", n_t[defined_t], d_nt[defined_t])
    d_g[defined_t] = (d_nt[defined_t] - n_t[defined_t] * dot_t[:, None]) \
        / gnorm[defined_t, None]
    d_g[~defined_t] = 0.0
    _chain_dg(tets, det, g, c1, c2, c3, d_g, d_sdf, d_deform)
    return loss
