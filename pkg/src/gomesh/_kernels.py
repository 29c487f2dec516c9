"""Numba kernels for rasterization: splat compositing, z-buffer, soft mask.

Forward splatting parallelizes over 16x16 pixel tiles; every pixel is owned
by exactly one tile and there is no cross-tile accumulation, so results do
not depend on thread count. The backward kernel writes per-(tile, splat)
gradient slots that the caller reduces in fixed order.

fastmath stays off everywhere: bit-identical output across runs and thread
counts is part of the rasterizer contract.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

TILE = 16
ALPHA_CLAMP = 0.999
T_MIN = 1e-4  # stop compositing once transmittance drops below this
# Contributions with gaussian weight below this are skipped and the weight
# offset so the kernel is continuous at the cutoff (finite-difference safe).
ALPHA_CUT = 1e-7
Q_CUT = 2.0 * np.log(1.0 / ALPHA_CUT)
SOFT_BAND = 40.0  # sigmoid arguments beyond this are saturated


@njit(cache=True)
def bin_pairs_by_tile(tx0, tx1, ty0, ty1, order, tiles_x, n_tiles):
    """Per-tile splat lists, depth-ordered, via a stable counting sort.

    ``order`` holds splat indices sorted by (depth, index); emitting pairs
    in that order and placing them bucket-sequentially keeps each tile's
    list front-to-back without any comparison sort.
    """
    n = order.shape[0]
    tile_starts = np.zeros(n_tiles + 1, dtype=np.int64)
    for oi in range(n):
        i = order[oi]
        span = (tx1[i] - tx0[i]) * (ty1[i] - ty0[i])
        if span <= 0:
            continue
        for ty in range(ty0[i], ty1[i]):
            base = ty * tiles_x
            for tx in range(tx0[i], tx1[i]):
                tile_starts[base + tx + 1] += 1
    for t in range(n_tiles):
        tile_starts[t + 1] += tile_starts[t]
    cursor = tile_starts[:-1].copy()
    pair_splat = np.empty(tile_starts[n_tiles], dtype=np.int64)
    for oi in range(n):
        i = order[oi]
        for ty in range(ty0[i], ty1[i]):
            base = ty * tiles_x
            for tx in range(tx0[i], tx1[i]):
                t = base + tx
                pair_splat[cursor[t]] = i
                cursor[t] += 1
    return pair_splat, tile_starts


@njit(cache=True, parallel=True)
def rasterize_tiles(
    means2d,
    conics,
    colors,
    pair_splat,
    tile_starts,
    tiles_x,
    height,
    width,
    out_img,
    out_alpha,
    n_contrib,
    final_t,
):
    n_tiles = tile_starts.shape[0] - 1
    for tile in prange(n_tiles):
        start, stop = tile_starts[tile], tile_starts[tile + 1]
        if stop == start:
            continue
        m = stop - start
        # Contiguous per-tile copies: the pixel loops rescan this block.
        sc = np.empty((m, 8))
        for k in range(m):
            s = pair_splat[start + k]
            sc[k, 0] = means2d[s, 0]
            sc[k, 1] = means2d[s, 1]
            sc[k, 2] = conics[s, 0]
            sc[k, 3] = conics[s, 1]
            sc[k, 4] = conics[s, 2]
            sc[k, 5] = colors[s, 0]
            sc[k, 6] = colors[s, 1]
            sc[k, 7] = colors[s, 2]
        ty, tx = tile // tiles_x, tile % tiles_x
        y_lo, x_lo = ty * TILE, tx * TILE
        y_hi, x_hi = min(y_lo + TILE, height), min(x_lo + TILE, width)
        for py in range(y_lo, y_hi):
            cy = py + 0.5
            for px in range(x_lo, x_hi):
                cx = px + 0.5
                t = 1.0
                r = g = b = 0.0
                acc = 0.0
                count = 0
                for k in range(m):
                    dx = cx - sc[k, 0]
                    dy = cy - sc[k, 1]
                    q = (
                        sc[k, 2] * dx * dx
                        + 2.0 * sc[k, 3] * dx * dy
                        + sc[k, 4] * dy * dy
                    )
                    if q > Q_CUT or q < 0.0:
                        continue
                    w = np.exp(-0.5 * q) - ALPHA_CUT
                    if w <= 0.0:
                        continue
                    alpha = w if w < ALPHA_CLAMP else ALPHA_CLAMP
                    r += t * alpha * sc[k, 5]
                    g += t * alpha * sc[k, 6]
                    b += t * alpha * sc[k, 7]
                    acc += t * alpha
                    t *= 1.0 - alpha
                    count += 1
                    if t < T_MIN:
                        break
                out_img[py, px, 0] = r
                out_img[py, px, 1] = g
                out_img[py, px, 2] = b
                out_alpha[py, px] = acc
                n_contrib[py, px] = count
                final_t[py, px] = t


@njit(cache=True, parallel=True)
def rasterize_tiles_backward(
    means2d,
    conics,
    colors,
    pair_splat,
    tile_starts,
    tiles_x,
    height,
    width,
    n_contrib,
    grad_img,
    grad_alpha,
    pair_grad_mean,
    pair_grad_conic,
    pair_grad_color,
):
    """Adjoint of rasterize_tiles. Gradients land in per-pair slots.

    Per pixel the forward compositing is recomputed front-to-back into
    scratch arrays, then walked back-to-front keeping suffix sums of the
    downstream contributions (which carry the transmittance derivative).
    """
    n_tiles = tile_starts.shape[0] - 1
    for tile in prange(n_tiles):
        start, stop = tile_starts[tile], tile_starts[tile + 1]
        if stop == start:
            continue
        ty, tx = tile // tiles_x, tile % tiles_x
        y_lo, x_lo = ty * TILE, tx * TILE
        y_hi, x_hi = min(y_lo + TILE, height), min(x_lo + TILE, width)
        m = stop - start
        sc = np.empty((m, 8))
        for k in range(m):
            s = pair_splat[start + k]
            sc[k, 0] = means2d[s, 0]
            sc[k, 1] = means2d[s, 1]
            sc[k, 2] = conics[s, 0]
            sc[k, 3] = conics[s, 1]
            sc[k, 4] = conics[s, 2]
            sc[k, 5] = colors[s, 0]
            sc[k, 6] = colors[s, 1]
            sc[k, 7] = colors[s, 2]
        sl_idx = np.empty(m, dtype=np.int64)
        sl_alpha = np.empty(m)
        sl_w = np.empty(m)
        sl_t = np.empty(m)
        sl_dx = np.empty(m)
        sl_dy = np.empty(m)
        for py in range(y_lo, y_hi):
            cy = py + 0.5
            for px in range(x_lo, x_hi):
                total = n_contrib[py, px]
                if total == 0:
                    continue
                cx = px + 0.5
                gr = grad_img[py, px, 0]
                gg = grad_img[py, px, 1]
                gb = grad_img[py, px, 2]
                gm = grad_alpha[py, px]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and gm == 0.0:
                    continue
                # Forward replay.
                t = 1.0
                count = 0
                for k in range(m):
                    dx = cx - sc[k, 0]
                    dy = cy - sc[k, 1]
                    q = (
                        sc[k, 2] * dx * dx
                        + 2.0 * sc[k, 3] * dx * dy
                        + sc[k, 4] * dy * dy
                    )
                    if q > Q_CUT or q < 0.0:
                        continue
                    w = np.exp(-0.5 * q) - ALPHA_CUT
                    if w <= 0.0:
                        continue
                    alpha = w if w < ALPHA_CLAMP else ALPHA_CLAMP
                    sl_idx[count] = k
                    sl_alpha[count] = alpha
                    sl_w[count] = w
                    sl_t[count] = t
                    sl_dx[count] = dx
                    sl_dy[count] = dy
                    t *= 1.0 - alpha
                    count += 1
                    if count == total:
                        break
                # Reverse sweep with suffix sums over later contributions.
                suf_r = suf_g = suf_b = suf_m = 0.0
                for i in range(count - 1, -1, -1):
                    k = sl_idx[i]
                    alpha = sl_alpha[i]
                    ti = sl_t[i]
                    one_m = 1.0 - alpha
                    ta = ti * alpha
                    slot = start + k  # pair slot; tiles own disjoint ranges
                    pair_grad_color[slot, 0] += gr * ta
                    pair_grad_color[slot, 1] += gg * ta
                    pair_grad_color[slot, 2] += gb * ta
                    d_alpha = (
                        gr * (ti * sc[k, 5] - suf_r / one_m)
                        + gg * (ti * sc[k, 6] - suf_g / one_m)
                        + gb * (ti * sc[k, 7] - suf_b / one_m)
                        + gm * (ti - suf_m / one_m)
                    )
                    suf_r += ta * sc[k, 5]
                    suf_g += ta * sc[k, 6]
                    suf_b += ta * sc[k, 7]
                    suf_m += ta
                    if sl_w[i] >= ALPHA_CLAMP:
                        continue  # clamped: d alpha / d w = 0
                    gq = -0.5 * (sl_w[i] + ALPHA_CUT) * d_alpha
                    dx = sl_dx[i]
                    dy = sl_dy[i]
                    pair_grad_conic[slot, 0] += gq * dx * dx
                    pair_grad_conic[slot, 1] += gq * 2.0 * dx * dy
                    pair_grad_conic[slot, 2] += gq * dy * dy
                    gdx = gq * (2.0 * sc[k, 2] * dx + 2.0 * sc[k, 3] * dy)
                    gdy = gq * (2.0 * sc[k, 3] * dx + 2.0 * sc[k, 4] * dy)
                    pair_grad_mean[slot, 0] -= gdx
                    pair_grad_mean[slot, 1] -= gdy


@njit(cache=True)
def rasterize_full(means2d, conics, colors, order, height, width, out_img, out_alpha):
    """Reference compositor: every splat at every pixel, no cutoffs."""
    n = order.shape[0]
    for py in range(height):
        cy = py + 0.5
        for px in range(width):
            cx = px + 0.5
            t = 1.0
            r = g = b = 0.0
            acc = 0.0
            for k in range(n):
                s = order[k]
                dx = cx - means2d[s, 0]
                dy = cy - means2d[s, 1]
                q = (
                    conics[s, 0] * dx * dx
                    + 2.0 * conics[s, 1] * dx * dy
                    + conics[s, 2] * dy * dy
                )
                if q < 0.0:
                    continue
                w = np.exp(-0.5 * q)
                alpha = w if w < ALPHA_CLAMP else ALPHA_CLAMP
                r += t * alpha * colors[s, 0]
                g += t * alpha * colors[s, 1]
                b += t * alpha * colors[s, 2]
                acc += t * alpha
                t *= 1.0 - alpha
            out_img[py, px, 0] = r
            out_img[py, px, 1] = g
            out_img[py, px, 2] = b
            out_alpha[py, px] = acc


@njit(cache=True)
def zbuffer_faces(v2d, vz, faces, znear, height, width, face_id, depth):
    """Hard z-buffer over projected triangles; ties keep the earlier face.

    v2d holds pixel-space vertex positions, vz camera-space depths. Faces
    with any vertex at or behind the near plane are skipped. Depth is
    perspective-correct (1/z interpolated in screen space).
    """
    f = faces.shape[0]
    for j in range(f):
        i0, i1, i2 = faces[j, 0], faces[j, 1], faces[j, 2]
        if vz[i0] <= znear or vz[i1] <= znear or vz[i2] <= znear:
            continue
        x0, y0 = v2d[i0, 0], v2d[i0, 1]
        x1, y1 = v2d[i1, 0], v2d[i1, 1]
        x2, y2 = v2d[i2, 0], v2d[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        lo_x = max(0, int(np.floor(min(x0, min(x1, x2)) - 0.5)))
        hi_x = min(width - 1, int(np.ceil(max(x0, max(x1, x2)) - 0.5)))
        lo_y = max(0, int(np.floor(min(y0, min(y1, y2)) - 0.5)))
        hi_y = min(height - 1, int(np.ceil(max(y0, max(y1, y2)) - 0.5)))
        iz0, iz1, iz2 = 1.0 / vz[i0], 1.0 / vz[i1], 1.0 / vz[i2]
        inv_area = 1.0 / area
        for py in range(lo_y, hi_y + 1):
            cy = py + 0.5
            for px in range(lo_x, hi_x + 1):
                cx = px + 0.5
                w0 = ((x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)) * inv_area
                w1 = ((x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                iz = w0 * iz0 + w1 * iz1 + w2 * iz2
                z = 1.0 / iz
                if z < depth[py, px]:
                    depth[py, px] = z
                    face_id[py, px] = j


@njit(cache=True, inline="always")
def _segment_distance_sq(px, py, ax, ay, bx, by):
    """Squared distance from point to segment, plus the clamped parameter."""
    ex, ey = bx - ax, by - ay
    ee = ex * ex + ey * ey
    if ee == 0.0:
        dx, dy = px - ax, py - ay
        return dx * dx + dy * dy, 0.0
    t = ((px - ax) * ex + (py - ay) * ey) / ee
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    dx = px - (ax + t * ex)
    dy = py - (ay + t * ey)
    return dx * dx + dy * dy, t


@njit(cache=True)
def soft_mask_forward(v2d, vz, faces, znear, sigma, height, width, prod_nz, zero_count):
    """Accumulate per-pixel products of (1 - sigmoid(delta / sigma)).

    delta is the signed euclidean distance to the projected face boundary
    (positive inside). Saturated factors (exact zeros) are counted apart so
    the backward pass can form leave-one-out products without dividing by
    zero. Pixels farther outside a face than SOFT_BAND * sigma are skipped.
    """
    f = faces.shape[0]
    margin = SOFT_BAND * sigma + 1.0
    for j in range(f):
        i0, i1, i2 = faces[j, 0], faces[j, 1], faces[j, 2]
        if vz[i0] <= znear or vz[i1] <= znear or vz[i2] <= znear:
            continue
        x0, y0 = v2d[i0, 0], v2d[i0, 1]
        x1, y1 = v2d[i1, 0], v2d[i1, 1]
        x2, y2 = v2d[i2, 0], v2d[i2, 1]
        lo_x = max(0, int(np.floor(min(x0, min(x1, x2)) - margin)))
        hi_x = min(width - 1, int(np.ceil(max(x0, max(x1, x2)) + margin)))
        lo_y = max(0, int(np.floor(min(y0, min(y1, y2)) - margin)))
        hi_y = min(height - 1, int(np.ceil(max(y0, max(y1, y2)) + margin)))
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        for py in range(lo_y, hi_y + 1):
            cy = py + 0.5
            for px in range(lo_x, hi_x + 1):
                cx = px + 0.5
                d0, _ = _segment_distance_sq(cx, cy, x0, y0, x1, y1)
                d1, _ = _segment_distance_sq(cx, cy, x1, y1, x2, y2)
                d2, _ = _segment_distance_sq(cx, cy, x2, y2, x0, y0)
                dmin = min(d0, min(d1, d2))
                w0 = (x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)
                w1 = (x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)
                w2 = area - w0 - w1
                inside = (w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0) or (
                    w0 <= 0.0 and w1 <= 0.0 and w2 <= 0.0
                )
                delta = np.sqrt(dmin) if inside else -np.sqrt(dmin)
                x = delta / sigma
                if x < -SOFT_BAND:
                    continue
                if x > SOFT_BAND:
                    zero_count[py, px] += 1
                    continue
                d = 1.0 / (1.0 + np.exp(-x))
                one_m = 1.0 - d
                if one_m == 0.0:
                    zero_count[py, px] += 1
                else:
                    prod_nz[py, px] *= one_m


@njit(cache=True)
def soft_mask_backward(
    v2d, vz, faces, znear, sigma, height, width, prod_nz, zero_count, grad_mask, grad_v2d
):
    """Adjoint of soft_mask_forward onto projected vertex positions.

    Only pixels with no saturated factor carry gradient (a saturated factor
    either zeroes the leave-one-out product or has zero sigmoid slope).
    """
    f = faces.shape[0]
    margin = SOFT_BAND * sigma + 1.0
    for j in range(f):
        i0, i1, i2 = faces[j, 0], faces[j, 1], faces[j, 2]
        if vz[i0] <= znear or vz[i1] <= znear or vz[i2] <= znear:
            continue
        x0, y0 = v2d[i0, 0], v2d[i0, 1]
        x1, y1 = v2d[i1, 0], v2d[i1, 1]
        x2, y2 = v2d[i2, 0], v2d[i2, 1]
        lo_x = max(0, int(np.floor(min(x0, min(x1, x2)) - margin)))
        hi_x = min(width - 1, int(np.ceil(max(x0, max(x1, x2)) + margin)))
        lo_y = max(0, int(np.floor(min(y0, min(y1, y2)) - margin)))
        hi_y = min(height - 1, int(np.ceil(max(y0, max(y1, y2)) + margin)))
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        for py in range(lo_y, hi_y + 1):
            cy = py + 0.5
            for px in range(lo_x, hi_x + 1):
                if zero_count[py, px] > 0:
                    continue
                g_m = grad_mask[py, px]
                if g_m == 0.0:
                    continue
                cx = px + 0.5
                d0, t0 = _segment_distance_sq(cx, cy, x0, y0, x1, y1)
                d1, t1 = _segment_distance_sq(cx, cy, x1, y1, x2, y2)
                d2, t2 = _segment_distance_sq(cx, cy, x2, y2, x0, y0)
                dmin = min(d0, min(d1, d2))
                w0 = (x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)
                w1 = (x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)
                w2 = area - w0 - w1
                inside = (w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0) or (
                    w0 <= 0.0 and w1 <= 0.0 and w2 <= 0.0
                )
                dist = np.sqrt(dmin)
                x = (dist if inside else -dist) / sigma
                if x < -SOFT_BAND or x > SOFT_BAND:
                    continue
                d = 1.0 / (1.0 + np.exp(-x))
                one_m = 1.0 - d
                if one_m == 0.0 or dist == 0.0:
                    continue
                # dM/dD = leave-one-out product; dD/ddelta = D(1-D)/sigma.
                g_delta = g_m * (prod_nz[py, px] / one_m) * d * one_m / sigma
                sign = 1.0 if inside else -1.0
                # Chain through the closest edge's point-to-segment distance.
                if dmin == d0:
                    ax, ay, bx, by, t, ia, ib = x0, y0, x1, y1, t0, i0, i1
                elif dmin == d1:
                    ax, ay, bx, by, t, ia, ib = x1, y1, x2, y2, t1, i1, i2
                else:
                    ax, ay, bx, by, t, ia, ib = x2, y2, x0, y0, t2, i2, i0
                nx = (cx - (ax + t * (bx - ax))) / dist
                ny = (cy - (ay + t * (by - ay))) / dist
                # d dist / dA = -(1 - t) * n, d dist / dB = -t * n (envelope
                # theorem: the clamped parameter is stationary).
                coef = g_delta * sign
                grad_v2d[ia, 0] += -coef * (1.0 - t) * nx
                grad_v2d[ia, 1] += -coef * (1.0 - t) * ny
                grad_v2d[ib, 0] += -coef * t * nx
                grad_v2d[ib, 1] += -coef * t * ny
