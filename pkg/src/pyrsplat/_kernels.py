"""Numba kernels: tile-based alpha compositing and voxel-grid gather/scatter.

The compositing kernels parallelize over tiles; each tile owns its pixel
block exclusively, and backward gradients are written per tile-list entry
(an entry belongs to exactly one tile), then reduced to per-Gaussian
accumulators in a fixed serial order.  Rendering is therefore deterministic
regardless of thread count.

Work is organized row-major inside a tile: each Gaussian entry is loaded
once per 16-pixel row and composited across the row, with row-level
rectangle rejection.  Per-pixel inclusion (3-sigma box, 3-sigma ellipse
cutoff in conic metric) lives in one shared helper, so the tiled kernels,
the backward replay, and the serial full-list reference renderer produce
bit-identical per-pixel arithmetic.

Constants are float32 so float32 inputs run entirely in float32 (float64
inputs promote everything back up); pixel-center coordinates arrive as
precomputed arrays in the working dtype.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

TILE_SIZE = 16
T_EPS = np.float32(1e-4)        # early termination threshold on transmittance
ALPHA_CLAMP = np.float32(0.99)
POWER_CUTOFF = np.float32(-4.5)  # exp cutoff at the 3-sigma ellipse
HALF = np.float32(0.5)
ONE = np.float32(1.0)
ZERO = np.float32(0.0)


@njit(cache=True, inline="always")
def _splat_alpha(dx, dy, r, ca, cb, cc, w, alpha):
    """Effective alpha of one splat at one pixel; 0.0 means "skip".

    Shared by every compositing path so inclusion rules and rounding are
    identical everywhere.
    """
    if dx > r or dx < -r or dy > r or dy < -r:
        return ZERO, ZERO
    power = -(HALF * (ca * dx * dx + cc * dy * dy)) - cb * dx * dy
    if power > ZERO or power < POWER_CUTOFF:
        return ZERO, ZERO
    g = np.exp(power)
    a = w * alpha * g
    if a > ALPHA_CLAMP:
        a = ALPHA_CLAMP
    if a <= ZERO:
        return ZERO, g
    return a, g


@njit(cache=True)
def bin_tiles(order, mean2d, radius, width, height):
    """Assign depth-ordered Gaussians to every tile their 3-sigma box overlaps.

    Returns (offsets, entries): entries[offsets[t]:offsets[t+1]] are Gaussian
    indices for tile t, preserving global depth order.
    """
    n_tiles_x = (width + TILE_SIZE - 1) // TILE_SIZE
    n_tiles_y = (height + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = n_tiles_x * n_tiles_y
    n = order.shape[0]
    spans = np.empty((n, 4), dtype=np.int64)
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for i in range(n):
        g = order[i]
        r = radius[g]
        x0 = int(np.floor((mean2d[g, 0] - r) / TILE_SIZE))
        x1 = int(np.floor((mean2d[g, 0] + r) / TILE_SIZE)) + 1
        y0 = int(np.floor((mean2d[g, 1] - r) / TILE_SIZE))
        y1 = int(np.floor((mean2d[g, 1] + r) / TILE_SIZE)) + 1
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > n_tiles_x:
            x1 = n_tiles_x
        if y1 > n_tiles_y:
            y1 = n_tiles_y
        spans[i, 0] = x0
        spans[i, 1] = x1
        spans[i, 2] = y0
        spans[i, 3] = y1
        for ty in range(y0, y1):
            for tx in range(x0, x1):
                counts[ty * n_tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    entries = np.empty(offsets[n_tiles], dtype=np.int64)
    cursor = offsets[:n_tiles].copy()
    for i in range(n):
        g = order[i]
        for ty in range(spans[i, 2], spans[i, 3]):
            for tx in range(spans[i, 0], spans[i, 1]):
                t = ty * n_tiles_x + tx
                entries[cursor[t]] = g
                cursor[t] += 1
    return offsets, entries


@njit(cache=True, parallel=True)
def composite_forward(
    offsets, entries, mean2d, conic, radius, color, alpha, weight, level0,
    n_levels, bg, xcent, ycent, img, final_t, mass, stop_e,
):
    """Tile-parallel front-to-back compositing with per-level mass buffers."""
    height = ycent.shape[0]
    width = xcent.shape[0]
    n_tiles_x = (width + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // n_tiles_x
        tx = t % n_tiles_x
        x0 = tx * TILE_SIZE
        y_end = min((ty + 1) * TILE_SIZE, height)
        x_end = min((tx + 1) * TILE_SIZE, width)
        nx = x_end - x0
        start = offsets[t]
        end = offsets[t + 1]
        trans = np.empty(nx, dtype=mean2d.dtype)
        acc0 = np.empty(nx, dtype=mean2d.dtype)
        acc1 = np.empty(nx, dtype=mean2d.dtype)
        acc2 = np.empty(nx, dtype=mean2d.dtype)
        for py in range(ty * TILE_SIZE, y_end):
            pyc = ycent[py]
            for i in range(nx):
                trans[i] = ONE
                acc0[i] = ZERO
                acc1[i] = ZERO
                acc2[i] = ZERO
                stop_e[py, x0 + i] = end
            n_live = nx
            for e in range(start, end):
                if n_live == 0:
                    break
                g = entries[e]
                my = mean2d[g, 1]
                r = radius[g]
                dy = pyc - my
                if dy > r or dy < -r:
                    continue
                mx = mean2d[g, 0]
                ca = conic[g, 0]
                cb = conic[g, 1]
                cc = conic[g, 2]
                wg = weight[g]
                al = alpha[g]
                c0 = color[g, 0]
                c1 = color[g, 1]
                c2 = color[g, 2]
                lv = level0[g]
                for i in range(nx):
                    t_here = trans[i]
                    if t_here < ZERO:
                        continue
                    a, _ = _splat_alpha(
                        xcent[x0 + i] - mx, dy, r, ca, cb, cc, wg, al
                    )
                    if a == ZERO:
                        continue
                    next_t = t_here * (ONE - a)
                    if next_t < T_EPS:
                        trans[i] = -t_here  # done; keep value for output
                        stop_e[py, x0 + i] = e
                        n_live -= 1
                        continue
                    contrib = a * t_here
                    acc0[i] += c0 * contrib
                    acc1[i] += c1 * contrib
                    acc2[i] += c2 * contrib
                    mass[py, x0 + i, lv] += contrib
                    trans[i] = next_t
            for i in range(nx):
                t_here = trans[i]
                if t_here < ZERO:
                    t_here = -t_here
                img[py, x0 + i, 0] = acc0[i] + t_here * bg[0]
                img[py, x0 + i, 1] = acc1[i] + t_here * bg[1]
                img[py, x0 + i, 2] = acc2[i] + t_here * bg[2]
                final_t[py, x0 + i] = t_here


@njit(cache=True, parallel=True)
def composite_backward(
    offsets, entries, mean2d, conic, radius, color, alpha, weight, bg,
    xcent, ycent, d_img, final_t, stop_entry,
    d_mean2d_e, d_conic_e, d_alpha_e, d_weight_e, d_color_e,
):
    """Backward of composite_forward; writes gradients per tile-list entry.

    Uses the forward pass's per-pixel final transmittance and termination
    entry, then walks the entries back to front rebuilding per-contributor
    transmittance (T_before = T_after / (1 - a)) while maintaining the color
    composited behind each contributor, background included.
    """
    height = ycent.shape[0]
    width = xcent.shape[0]
    n_tiles_x = (width + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        start = offsets[t]
        end = offsets[t + 1]
        if end == start:
            continue
        ty = t // n_tiles_x
        tx = t % n_tiles_x
        x0 = tx * TILE_SIZE
        y_end = min((ty + 1) * TILE_SIZE, height)
        x_end = min((tx + 1) * TILE_SIZE, width)
        nx = x_end - x0
        trans = np.empty(nx, dtype=mean2d.dtype)
        stop_e = np.empty(nx, dtype=np.int64)
        s0 = np.empty(nx, dtype=mean2d.dtype)
        s1 = np.empty(nx, dtype=mean2d.dtype)
        s2 = np.empty(nx, dtype=mean2d.dtype)
        g0 = np.empty(nx, dtype=mean2d.dtype)
        g1 = np.empty(nx, dtype=mean2d.dtype)
        g2 = np.empty(nx, dtype=mean2d.dtype)
        for py in range(ty * TILE_SIZE, y_end):
            pyc = ycent[py]
            any_grad = False
            for i in range(nx):
                g0[i] = d_img[py, x0 + i, 0]
                g1[i] = d_img[py, x0 + i, 1]
                g2[i] = d_img[py, x0 + i, 2]
                if g0[i] != ZERO or g1[i] != ZERO or g2[i] != ZERO:
                    any_grad = True
                    trans[i] = final_t[py, x0 + i]
                    stop_e[i] = stop_entry[py, x0 + i]
                else:
                    stop_e[i] = start  # no gradient: skip this pixel entirely
            if not any_grad:
                continue
            # reverse walk from the forward pass's stop points
            for i in range(nx):
                s0[i] = trans[i] * bg[0]
                s1[i] = trans[i] * bg[1]
                s2[i] = trans[i] * bg[2]
            for e in range(end - 1, start - 1, -1):
                g = entries[e]
                my = mean2d[g, 1]
                r = radius[g]
                dy = pyc - my
                if dy > r or dy < -r:
                    continue
                mx = mean2d[g, 0]
                ca = conic[g, 0]
                cb = conic[g, 1]
                cc = conic[g, 2]
                wg = weight[g]
                al = alpha[g]
                c0 = color[g, 0]
                c1 = color[g, 1]
                c2 = color[g, 2]
                a_dmx = ZERO
                a_dmy = ZERO
                a_dca = ZERO
                a_dcb = ZERO
                a_dcc = ZERO
                a_dal = ZERO
                a_dw = ZERO
                a_dc0 = ZERO
                a_dc1 = ZERO
                a_dc2 = ZERO
                touched = False
                for i in range(nx):
                    if e >= stop_e[i]:
                        continue
                    dx = xcent[x0 + i] - mx
                    a, gval = _splat_alpha(dx, dy, r, ca, cb, cc, wg, al)
                    if a == ZERO:
                        continue
                    touched = True
                    inv = ONE / (ONE - a)
                    t_here = trans[i] * inv
                    contrib = a * t_here
                    a_dc0 += g0[i] * contrib
                    a_dc1 += g1[i] * contrib
                    a_dc2 += g2[i] * contrib
                    d_a = (
                        g0[i] * (c0 * t_here - s0[i] * inv)
                        + g1[i] * (c1 * t_here - s1[i] * inv)
                        + g2[i] * (c2 * t_here - s2[i] * inv)
                    )
                    if a < ALPHA_CLAMP:  # clamped splats get no shape grads
                        d_g = d_a * wg * al
                        a_dw += d_a * al * gval
                        a_dal += d_a * wg * gval
                        d_power = d_g * gval
                        a_dca -= d_power * (HALF * dx * dx)
                        a_dcb -= d_power * (dx * dy)
                        a_dcc -= d_power * (HALF * dy * dy)
                        a_dmx += d_power * (ca * dx + cb * dy)
                        a_dmy += d_power * (cc * dy + cb * dx)
                    s0[i] += c0 * contrib
                    s1[i] += c1 * contrib
                    s2[i] += c2 * contrib
                    trans[i] = t_here
                if touched:
                    d_mean2d_e[e, 0] += a_dmx
                    d_mean2d_e[e, 1] += a_dmy
                    d_conic_e[e, 0] += a_dca
                    d_conic_e[e, 1] += a_dcb
                    d_conic_e[e, 2] += a_dcc
                    d_alpha_e[e] += a_dal
                    d_weight_e[e] += a_dw
                    d_color_e[e, 0] += a_dc0
                    d_color_e[e, 1] += a_dc1
                    d_color_e[e, 2] += a_dc2


@njit(cache=True)
def reduce_entry_grads(
    entries, d_mean2d_e, d_conic_e, d_alpha_e, d_weight_e, d_color_e,
    d_mean2d, d_conic, d_alpha, d_weight, d_color,
):
    """Deterministic per-Gaussian reduction of per-entry gradients."""
    for e in range(entries.shape[0]):
        g = entries[e]
        d_mean2d[g, 0] += d_mean2d_e[e, 0]
        d_mean2d[g, 1] += d_mean2d_e[e, 1]
        d_conic[g, 0] += d_conic_e[e, 0]
        d_conic[g, 1] += d_conic_e[e, 1]
        d_conic[g, 2] += d_conic_e[e, 2]
        d_alpha[g] += d_alpha_e[e]
        d_weight[g] += d_weight_e[e]
        d_color[g, 0] += d_color_e[e, 0]
        d_color[g, 1] += d_color_e[e, 1]
        d_color[g, 2] += d_color_e[e, 2]


@njit(cache=True)
def composite_reference(
    order, mean2d, conic, radius, color, alpha, weight, level0,
    n_levels, bg, xcent, ycent, img, final_t, mass, stop_e,
):
    """Serial full-list renderer: every pixel walks the whole sorted list.

    Same per-pixel arithmetic as composite_forward; used as the tiling
    oracle.
    """
    n = order.shape[0]
    height = ycent.shape[0]
    width = xcent.shape[0]
    for py in range(height):
        pyc = ycent[py]
        for px in range(width):
            pxc = xcent[px]
            trans = ONE
            c0 = ZERO
            c1 = ZERO
            c2 = ZERO
            for i in range(n):
                g = order[i]
                a, _ = _splat_alpha(
                    pxc - mean2d[g, 0], pyc - mean2d[g, 1], radius[g],
                    conic[g, 0], conic[g, 1], conic[g, 2],
                    weight[g], alpha[g],
                )
                if a == ZERO:
                    continue
                next_t = trans * (ONE - a)
                if next_t < T_EPS:
                    stop_e[py, px] = i
                    break
                contrib = a * trans
                c0 += color[g, 0] * contrib
                c1 += color[g, 1] * contrib
                c2 += color[g, 2] * contrib
                mass[py, px, level0[g]] += contrib
                trans = next_t
            img[py, px, 0] = c0 + trans * bg[0]
            img[py, px, 1] = c1 + trans * bg[1]
            img[py, px, 2] = c2 + trans * bg[2]
            final_t[py, px] = trans


# ---------------------------------------------------------------------------
# voxel grid gather/scatter (trilinear corners precomputed by the caller)
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def grid_gather(density_flat, features_flat, idx, w, raw_out, feat_out):
    """raw_out[m] = sum_k w[m,k] * density[idx[m,k]]; same for features."""
    m_total = idx.shape[0]
    n_feat = features_flat.shape[1]
    for m in prange(m_total):
        acc = ZERO
        for k in range(8):
            acc += w[m, k] * density_flat[idx[m, k]]
        raw_out[m] = acc
        for f in range(n_feat):
            accf = ZERO
            for k in range(8):
                accf += w[m, k] * features_flat[idx[m, k], f]
            feat_out[m, f] = accf


@njit(cache=True)
def grid_scatter(idx, w, d_raw, d_feat, density_grad, features_grad):
    """Serial (deterministic) transpose of grid_gather."""
    m_total = idx.shape[0]
    n_feat = d_feat.shape[1]
    for m in range(m_total):
        dr = d_raw[m]
        for k in range(8):
            j = idx[m, k]
            wk = w[m, k]
            density_grad[j] += wk * dr
            for f in range(n_feat):
                features_grad[j, f] += wk * d_feat[m, f]
    return density_grad


@njit(cache=True, parallel=True)
def grid_coords(x, lo, inv_cell, res, idx, w, inside):
    """Trilinear corner indices/weights for points x in one pass.

    inv_cell = (res - 1) / (hi - lo) per axis; idx gets flat corner indices,
    w the matching weights, inside the AABB-membership mask.
    """
    m_total = x.shape[0]
    r = res
    for m in prange(m_total):
        ok = True
        u0 = (x[m, 0] - lo[0]) * inv_cell[0]
        u1 = (x[m, 1] - lo[1]) * inv_cell[1]
        u2 = (x[m, 2] - lo[2]) * inv_cell[2]
        if u0 < 0.0 or u0 > r - 1 or u1 < 0.0 or u1 > r - 1 or u2 < 0.0 or u2 > r - 1:
            ok = False
        if u0 < 0.0:
            u0 = 0.0
        elif u0 > r - 1:
            u0 = r - 1.0
        if u1 < 0.0:
            u1 = 0.0
        elif u1 > r - 1:
            u1 = r - 1.0
        if u2 < 0.0:
            u2 = 0.0
        elif u2 > r - 1:
            u2 = r - 1.0
        i0 = min(int(u0), r - 2)
        i1 = min(int(u1), r - 2)
        i2 = min(int(u2), r - 2)
        f0 = u0 - i0
        f1 = u1 - i1
        f2 = u2 - i2
        base = (i0 * r + i1) * r + i2
        idx[m, 0] = base
        idx[m, 1] = base + 1
        idx[m, 2] = base + r
        idx[m, 3] = base + r + 1
        idx[m, 4] = base + r * r
        idx[m, 5] = base + r * r + 1
        idx[m, 6] = base + r * r + r
        idx[m, 7] = base + r * r + r + 1
        w[m, 0] = (1.0 - f0) * (1.0 - f1) * (1.0 - f2)
        w[m, 1] = (1.0 - f0) * (1.0 - f1) * f2
        w[m, 2] = (1.0 - f0) * f1 * (1.0 - f2)
        w[m, 3] = (1.0 - f0) * f1 * f2
        w[m, 4] = f0 * (1.0 - f1) * (1.0 - f2)
        w[m, 5] = f0 * (1.0 - f1) * f2
        w[m, 6] = f0 * f1 * (1.0 - f2)
        w[m, 7] = f0 * f1 * f2
        inside[m] = ok
