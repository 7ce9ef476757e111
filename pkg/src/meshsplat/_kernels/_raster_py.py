"""Pure numpy implementation of the hot rasterization kernels.

Same signatures and semantics as the compiled ``_raster`` extension; used
when the extension is not built or ``MESHSPLAT_PURE_PYTHON=1`` is set.
Work is vectorized over the pixels of one tile and loops over the tile's
splat list.
"""
import numpy as np

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


def _tile_pixels(tile, n_tiles_x, tile_size, width, height):
    ty, tx = divmod(tile, n_tiles_x)
    x0, y0 = tx * tile_size, ty * tile_size
    x1, y1 = min(x0 + tile_size, width), min(y0 + tile_size, height)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return ys.ravel(), xs.ravel()


def rasterize_forward(means2d, conics, opacities, colors, tile_offsets, tile_ids,
                      width, height, tile_size, num_threads=1):
    image = np.zeros((height, width, 3))
    final_T = np.ones((height, width))
    n_proc = np.zeros((height, width), dtype=np.int64)
    contributed = np.zeros(len(means2d), dtype=bool)
    n_tiles_x = (width + tile_size - 1) // tile_size
    for tile in range(len(tile_offsets) - 1):
        start, end = tile_offsets[tile], tile_offsets[tile + 1]
        if start == end:
            continue
        ys, xs = _tile_pixels(tile, n_tiles_x, tile_size, width, height)
        px, py = xs + 0.5, ys + 0.5
        T = np.ones(len(px))
        C = np.zeros((len(px), 3))
        done = np.zeros(len(px), dtype=bool)
        last = np.zeros(len(px), dtype=np.int64)
        for k in range(start, end):
            s = tile_ids[k]
            dx, dy = px - means2d[s, 0], py - means2d[s, 1]
            a, b, c = conics[s]
            power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
            alpha = np.minimum(ALPHA_MAX, opacities[s] * np.exp(power))
            live = ~done & (power <= 0.0) & (alpha >= ALPHA_MIN)
            test_T = T * (1.0 - alpha)
            stop = live & (test_T < T_MIN)
            done |= stop
            live &= ~stop
            if not live.any():
                continue
            w = alpha[live] * T[live]
            C[live] += w[:, None] * colors[s]
            T[live] = test_T[live]
            last[live] = k + 1 - start
            contributed[s] = True
        image[ys, xs] = C
        final_T[ys, xs] = T
        n_proc[ys, xs] = last
    return image, final_T, n_proc, contributed


def rasterize_backward(means2d, conics, opacities, colors, tile_offsets, tile_ids,
                       width, height, tile_size, image, n_proc, dL_dimage, num_threads=1):
    P = len(tile_ids)
    e_mean = np.zeros((P, 2))
    e_conic = np.zeros((P, 3))
    e_opac = np.zeros(P)
    e_color = np.zeros((P, 3))
    n_tiles_x = (width + tile_size - 1) // tile_size
    for tile in range(len(tile_offsets) - 1):
        start, end = tile_offsets[tile], tile_offsets[tile + 1]
        if start == end:
            continue
        ys, xs = _tile_pixels(tile, n_tiles_x, tile_size, width, height)
        px, py = xs + 0.5, ys + 0.5
        npix = n_proc[ys, xs]
        C = image[ys, xs]
        g = dL_dimage[ys, xs]
        T = np.ones(len(px))
        acc = np.zeros((len(px), 3))
        for k in range(start, end):
            s = tile_ids[k]
            dx, dy = px - means2d[s, 0], py - means2d[s, 1]
            a, b, c = conics[s]
            power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
            G = np.exp(power)
            raw = opacities[s] * G
            alpha = np.minimum(ALPHA_MAX, raw)
            live = (k - start < npix) & (power <= 0.0) & (alpha >= ALPHA_MIN)
            if not live.any():
                continue
            al, Tl, gl, Gl = alpha[live], T[live], g[live], G[live]
            w = al * Tl
            acc[live] += w[:, None] * colors[s]
            e_color[k] = (w[:, None] * gl).sum(axis=0)
            suffix = C[live] - acc[live]
            dL_dalpha = (gl * (Tl[:, None] * colors[s] - suffix / (1.0 - al)[:, None])).sum(axis=1)
            dL_dalpha = np.where(raw[live] < ALPHA_MAX, dL_dalpha, 0.0)
            T[live] = Tl * (1.0 - al)
            e_opac[k] = (Gl * dL_dalpha).sum()
            dL_dpower = opacities[s] * Gl * dL_dalpha
            dxl, dyl = dx[live], dy[live]
            e_conic[k, 0] = (-0.5 * dxl * dxl * dL_dpower).sum()
            e_conic[k, 1] = (-dxl * dyl * dL_dpower).sum()
            e_conic[k, 2] = (-0.5 * dyl * dyl * dL_dpower).sum()
            e_mean[k, 0] = (dL_dpower * (a * dxl + b * dyl)).sum()
            e_mean[k, 1] = (dL_dpower * (c * dyl + b * dxl)).sum()
    return e_mean, e_conic, e_opac, e_color


def depth_raster(tri_cam, fx, fy, cx, cy, width, height):
    depth = np.full((height, width), np.inf)
    for t in tri_cam:
        z = t[:, 2]
        u = fx * t[:, 0] / z + cx
        v = fy * t[:, 1] / z + cy
        area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
        if abs(area) < 1e-18:
            continue
        i0 = max(0, int(np.ceil(v.min() - 0.5)))
        i1 = min(height - 1, int(np.floor(v.max() - 0.5)))
        j0 = max(0, int(np.ceil(u.min() - 0.5)))
        j1 = min(width - 1, int(np.floor(u.max() - 0.5)))
        if i0 > i1 or j0 > j1:
            continue
        ys, xs = np.mgrid[i0:i1 + 1, j0:j1 + 1]
        py, px = ys + 0.5, xs + 0.5
        w0 = ((u[2] - u[1]) * (py - v[1]) - (v[2] - v[1]) * (px - u[1])) / area
        w1 = ((u[0] - u[2]) * (py - v[2]) - (v[0] - v[2]) * (px - u[2])) / area
        w2 = ((u[1] - u[0]) * (py - v[0]) - (v[1] - v[0]) * (px - u[0])) / area
        inside = (w0 >= -1e-10) & (w1 >= -1e-10) & (w2 >= -1e-10)
        zz = 1.0 / (w0 / z[0] + w1 / z[1] + w2 / z[2])
        cur = depth[i0:i1 + 1, j0:j1 + 1]
        upd = inside & (zz < cur)
        cur[upd] = zz[upd]
    return depth
