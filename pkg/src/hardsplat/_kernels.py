"""Numba kernels for tiled forward rasterization and its blend backward.

All kernels are single-threaded with fixed iteration order, so outputs are
bit-reproducible regardless of the host's thread count. Splat arrays arrive
pre-sorted by (depth, gaussian_index); per-tile lists inherit that order.

The forward pass tapes (splat, weight) per contributing pixel. Weights obey
w_i = a_i * T_{i-1} with T updated by subtraction (T -= w), so the backward
pass reconstructs every intermediate transmittance exactly from the tape.
"""

import numba
import numpy as np

TILE = 16


@numba.njit(cache=True)
def build_tile_lists(rects, n_tiles_x, n_tiles_y):
    """CSR lists of splats per tile from pixel rects (x0, x1, y0, y1)."""
    m = rects.shape[0]
    n_tiles = n_tiles_x * n_tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for s in range(m):
        tx0 = rects[s, 0] // TILE
        tx1 = (rects[s, 1] - 1) // TILE
        ty0 = rects[s, 2] // TILE
        ty1 = (rects[s, 3] - 1) // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * n_tiles_x + tx + 1] += 1
    offsets = np.empty(n_tiles + 1, dtype=np.int64)
    offsets[0] = 0
    for t in range(n_tiles):
        offsets[t + 1] = offsets[t] + counts[t + 1]
    items = np.empty(offsets[n_tiles], dtype=np.int64)
    cursor = offsets[:-1].copy()
    for s in range(m):
        tx0 = rects[s, 0] // TILE
        tx1 = (rects[s, 1] - 1) // TILE
        ty0 = rects[s, 2] // TILE
        ty1 = (rects[s, 3] - 1) // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * n_tiles_x + tx
                items[cursor[t]] = s
                cursor[t] += 1
    return offsets, items


@numba.njit(cache=True)
def forward(height, width, mean2d, conic, opacity, color, gidx, rects,
            tile_offsets, tile_items, n_tiles_x, background,
            alpha_clamp, alpha_skip, term_eps, tape_capacity):
    """Front-to-back alpha blending over 16x16 tiles.

    Returns image, final transmittance, rendered index (argmax weight,
    ties to the smaller gaussian index), per-splat visibility, and the
    per-pixel contribution tape (start/count into pos/weight arrays).
    """
    image = np.zeros((height, width, 3))
    t_final = np.ones((height, width))
    rendered_index = np.full((height, width), -1, dtype=np.int64)
    visible = np.zeros(mean2d.shape[0], dtype=np.bool_)
    tape_start = np.zeros(height * width, dtype=np.int64)
    tape_count = np.zeros(height * width, dtype=np.int64)
    tape_pos = np.empty(tape_capacity, dtype=np.int64)
    tape_w = np.empty(tape_capacity)
    cursor = 0

    n_tiles_y = (height + TILE - 1) // TILE
    for tile_y in range(n_tiles_y):
        for tile_x in range(n_tiles_x):
            t = tile_y * n_tiles_x + tile_x
            lo, hi = tile_offsets[t], tile_offsets[t + 1]
            y_end = min((tile_y + 1) * TILE, height)
            x_end = min((tile_x + 1) * TILE, width)
            for py in range(tile_y * TILE, y_end):
                cy = py + 0.5
                for px in range(tile_x * TILE, x_end):
                    cx = px + 0.5
                    pix = py * width + px
                    trans = 1.0
                    best_w = 0.0
                    best_g = np.int64(-1)
                    start = cursor
                    for k in range(lo, hi):
                        if trans < term_eps:
                            break
                        s = tile_items[k]
                        if px < rects[s, 0] or px >= rects[s, 1]:
                            continue
                        if py < rects[s, 2] or py >= rects[s, 3]:
                            continue
                        dx = cx - mean2d[s, 0]
                        dy = cy - mean2d[s, 1]
                        maha = (conic[s, 0] * dx * dx
                                + 2.0 * conic[s, 1] * dx * dy
                                + conic[s, 2] * dy * dy)
                        if maha < 0.0:
                            maha = 0.0
                        a_raw = opacity[s] * np.exp(-0.5 * maha)
                        if a_raw < alpha_skip:
                            continue
                        a = a_raw if a_raw < alpha_clamp else alpha_clamp
                        w = a * trans
                        tape_pos[cursor] = s
                        tape_w[cursor] = w
                        cursor += 1
                        image[py, px, 0] += w * color[s, 0]
                        image[py, px, 1] += w * color[s, 1]
                        image[py, px, 2] += w * color[s, 2]
                        visible[s] = True
                        g = gidx[s]
                        if w > best_w or (w == best_w and best_g >= 0 and g < best_g):
                            best_w = w
                            best_g = g
                        trans -= w
                    image[py, px, 0] += trans * background[0]
                    image[py, px, 1] += trans * background[1]
                    image[py, px, 2] += trans * background[2]
                    t_final[py, px] = trans
                    rendered_index[py, px] = best_g
                    tape_start[pix] = start
                    tape_count[pix] = cursor - start
    return (image, t_final, rendered_index, visible,
            tape_start, tape_count, tape_pos[:cursor], tape_w[:cursor])


@numba.njit(cache=True)
def backward(height, width, mean2d, conic, opacity, color,
             tape_start, tape_count, tape_pos, tape_w,
             d_image, t_final, background, alpha_clamp):
    """Reverse-order blend backward.

    Walks each pixel's tape back to front, reconstructing transmittances
    from the taped weights, and accumulates gradients w.r.t. splat color,
    activated opacity, conic (A, B, C with quadratic form
    A dx^2 + 2 B dx dy + C dy^2) and 2D mean (pixel units). Contributions
    clamped at alpha_clamp in the forward get zero opacity/shape gradient,
    matching the value the forward actually produced.
    """
    m = mean2d.shape[0]
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_opacity = np.zeros(m)
    d_color = np.zeros((m, 3))

    for py in range(height):
        cy = py + 0.5
        for px in range(width):
            pix = py * width + px
            cnt = tape_count[pix]
            if cnt == 0:
                continue
            cx = px + 0.5
            start = tape_start[pix]
            dl0 = d_image[py, px, 0]
            dl1 = d_image[py, px, 1]
            dl2 = d_image[py, px, 2]
            trans = t_final[py, px]
            s0 = background[0] * trans
            s1 = background[1] * trans
            s2 = background[2] * trans
            for i in range(cnt - 1, -1, -1):
                w = tape_w[start + i]
                s = tape_pos[start + i]
                t_prev = trans + w
                a = w / t_prev
                one_m = 1.0 - a
                c0 = color[s, 0]
                c1 = color[s, 1]
                c2 = color[s, 2]
                dl_da = (dl0 * (t_prev * c0 - s0 / one_m)
                         + dl1 * (t_prev * c1 - s1 / one_m)
                         + dl2 * (t_prev * c2 - s2 / one_m))
                d_color[s, 0] += w * dl0
                d_color[s, 1] += w * dl1
                d_color[s, 2] += w * dl2

                dx = cx - mean2d[s, 0]
                dy = cy - mean2d[s, 1]
                maha = (conic[s, 0] * dx * dx
                        + 2.0 * conic[s, 1] * dx * dy
                        + conic[s, 2] * dy * dy)
                if maha >= 0.0:
                    g = np.exp(-0.5 * maha)
                    a_raw = opacity[s] * g
                    if a_raw < alpha_clamp:
                        d_opacity[s] += dl_da * g
                        dl_dmaha = -0.5 * a_raw * dl_da
                        d_conic[s, 0] += dl_dmaha * dx * dx
                        d_conic[s, 1] += dl_dmaha * 2.0 * dx * dy
                        d_conic[s, 2] += dl_dmaha * dy * dy
                        gx = conic[s, 0] * dx + conic[s, 1] * dy
                        gy = conic[s, 1] * dx + conic[s, 2] * dy
                        d_mean2d[s, 0] += dl_dmaha * (-2.0) * gx
                        d_mean2d[s, 1] += dl_dmaha * (-2.0) * gy

                s0 += w * c0
                s1 += w * c1
                s2 += w * c2
                trans = t_prev
    return d_mean2d, d_conic, d_opacity, d_color
