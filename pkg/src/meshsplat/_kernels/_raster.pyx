# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterization kernels (tile-parallel alpha blending and mesh depth).

Mirrors ``_raster_py`` exactly; each tile is owned by one thread, and the
backward pass writes one gradient record per (tile, splat) entry so the
final per-splat reduction order never depends on the thread schedule.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, ceil, floor, fabs, INFINITY

cnp.import_array()

cdef double ALPHA_MAX = 0.99
cdef double ALPHA_MIN = 1.0 / 255.0
cdef double T_MIN = 1e-4


def rasterize_forward(const double[:, ::1] means2d, const double[:, ::1] conics,
                      const double[::1] opacities, const double[:, ::1] colors,
                      const cnp.int64_t[::1] tile_offsets, const cnp.int64_t[::1] tile_ids,
                      int width, int height, int tile_size, int num_threads=1):
    cdef Py_ssize_t n_tiles = tile_offsets.shape[0] - 1
    cdef int n_tiles_x = (width + tile_size - 1) // tile_size
    image_arr = np.zeros((height, width, 3))
    final_T_arr = np.ones((height, width))
    n_proc_arr = np.zeros((height, width), dtype=np.int64)
    contrib_arr = np.zeros(means2d.shape[0], dtype=np.uint8)
    cdef double[:, :, ::1] image = image_arr
    cdef double[:, ::1] final_T = final_T_arr
    cdef cnp.int64_t[:, ::1] n_proc = n_proc_arr
    cdef cnp.uint8_t[::1] contributed = contrib_arr
    cdef Py_ssize_t tile, k, s
    cdef int i, j, x0, y0, x1, y1, ty, tx
    cdef double px, py, dx, dy, power, alpha, T, test_T, r, g, b
    cdef cnp.int64_t start, end, last
    if num_threads < 1:
        num_threads = 1
    for tile in prange(n_tiles, nogil=True, schedule="static", num_threads=num_threads):
        start = tile_offsets[tile]
        end = tile_offsets[tile + 1]
        if start == end:
            continue
        ty = tile // n_tiles_x
        tx = tile - ty * n_tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        for i in range(y0, y1):
            for j in range(x0, x1):
                px = j + 0.5
                py = i + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                last = 0
                for k in range(start, end):
                    s = tile_ids[k]
                    dx = px - means2d[s, 0]
                    dy = py - means2d[s, 1]
                    power = -0.5 * (conics[s, 0] * dx * dx + conics[s, 2] * dy * dy) - conics[s, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = opacities[s] * exp(power)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    if alpha < ALPHA_MIN:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < T_MIN:
                        break
                    r = r + colors[s, 0] * alpha * T
                    g = g + colors[s, 1] * alpha * T
                    b = b + colors[s, 2] * alpha * T
                    T = test_T
                    last = k + 1 - start
                    contributed[s] = 1
                image[i, j, 0] = r
                image[i, j, 1] = g
                image[i, j, 2] = b
                final_T[i, j] = T
                n_proc[i, j] = last
    return image_arr, final_T_arr, n_proc_arr, contrib_arr.astype(bool)


def rasterize_backward(const double[:, ::1] means2d, const double[:, ::1] conics,
                       const double[::1] opacities, const double[:, ::1] colors,
                       const cnp.int64_t[::1] tile_offsets, const cnp.int64_t[::1] tile_ids,
                       int width, int height, int tile_size,
                       const double[:, :, ::1] image, const cnp.int64_t[:, ::1] n_proc,
                       const double[:, :, ::1] dL_dimage, int num_threads=1):
    cdef Py_ssize_t n_tiles = tile_offsets.shape[0] - 1
    cdef Py_ssize_t P = tile_ids.shape[0]
    cdef int n_tiles_x = (width + tile_size - 1) // tile_size
    e_mean_arr = np.zeros((P, 2))
    e_conic_arr = np.zeros((P, 3))
    e_opac_arr = np.zeros(P)
    e_color_arr = np.zeros((P, 3))
    cdef double[:, ::1] e_mean = e_mean_arr
    cdef double[:, ::1] e_conic = e_conic_arr
    cdef double[::1] e_opac = e_opac_arr
    cdef double[:, ::1] e_color = e_color_arr
    cdef Py_ssize_t tile, k, s
    cdef int i, j, x0, y0, x1, y1, ty, tx
    cdef double px, py, dx, dy, power, G, raw, alpha, T, w, dL_dalpha, dL_dpower
    cdef double ar, ag, ab, gr, gg, gb, cr, cg, cb
    cdef cnp.int64_t start, end, npix
    if num_threads < 1:
        num_threads = 1
    for tile in prange(n_tiles, nogil=True, schedule="static", num_threads=num_threads):
        start = tile_offsets[tile]
        end = tile_offsets[tile + 1]
        if start == end:
            continue
        ty = tile // n_tiles_x
        tx = tile - ty * n_tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        for i in range(y0, y1):
            for j in range(x0, x1):
                npix = n_proc[i, j]
                if npix == 0:
                    continue
                px = j + 0.5
                py = i + 0.5
                gr = dL_dimage[i, j, 0]
                gg = dL_dimage[i, j, 1]
                gb = dL_dimage[i, j, 2]
                cr = image[i, j, 0]
                cg = image[i, j, 1]
                cb = image[i, j, 2]
                T = 1.0
                ar = 0.0
                ag = 0.0
                ab = 0.0
                for k in range(start, start + npix):
                    s = tile_ids[k]
                    dx = px - means2d[s, 0]
                    dy = py - means2d[s, 1]
                    power = -0.5 * (conics[s, 0] * dx * dx + conics[s, 2] * dy * dy) - conics[s, 1] * dx * dy
                    if power > 0.0:
                        continue
                    G = exp(power)
                    raw = opacities[s] * G
                    alpha = raw
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    if alpha < ALPHA_MIN:
                        continue
                    w = alpha * T
                    ar = ar + w * colors[s, 0]
                    ag = ag + w * colors[s, 1]
                    ab = ab + w * colors[s, 2]
                    e_color[k, 0] += w * gr
                    e_color[k, 1] += w * gg
                    e_color[k, 2] += w * gb
                    dL_dalpha = (gr * (T * colors[s, 0] - (cr - ar) / (1.0 - alpha))
                                 + gg * (T * colors[s, 1] - (cg - ag) / (1.0 - alpha))
                                 + gb * (T * colors[s, 2] - (cb - ab) / (1.0 - alpha)))
                    if raw >= ALPHA_MAX:
                        dL_dalpha = 0.0
                    T = T * (1.0 - alpha)
                    e_opac[k] += G * dL_dalpha
                    dL_dpower = opacities[s] * G * dL_dalpha
                    e_conic[k, 0] += -0.5 * dx * dx * dL_dpower
                    e_conic[k, 1] += -dx * dy * dL_dpower
                    e_conic[k, 2] += -0.5 * dy * dy * dL_dpower
                    e_mean[k, 0] += dL_dpower * (conics[s, 0] * dx + conics[s, 1] * dy)
                    e_mean[k, 1] += dL_dpower * (conics[s, 2] * dy + conics[s, 1] * dx)
    return e_mean_arr, e_conic_arr, e_opac_arr, e_color_arr


def depth_raster(const double[:, :, ::1] tri_cam, double fx, double fy, double cx, double cy,
                 int width, int height):
    depth_arr = np.full((height, width), np.inf)
    cdef double[:, ::1] depth = depth_arr
    cdef Py_ssize_t t, n = tri_cam.shape[0]
    cdef double u0, u1, u2, v0, v1, v2, z0, z1, z2, area, px, py, w0, w1, w2, zz
    cdef double umin, umax, vmin, vmax
    cdef int i, j, i0, i1, j0, j1
    with nogil:
        for t in range(n):
            z0 = tri_cam[t, 0, 2]
            z1 = tri_cam[t, 1, 2]
            z2 = tri_cam[t, 2, 2]
            u0 = fx * tri_cam[t, 0, 0] / z0 + cx
            u1 = fx * tri_cam[t, 1, 0] / z1 + cx
            u2 = fx * tri_cam[t, 2, 0] / z2 + cx
            v0 = fy * tri_cam[t, 0, 1] / z0 + cy
            v1 = fy * tri_cam[t, 1, 1] / z1 + cy
            v2 = fy * tri_cam[t, 2, 1] / z2 + cy
            area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
            if fabs(area) < 1e-18:
                continue
            umin = min(u0, min(u1, u2))
            umax = max(u0, max(u1, u2))
            vmin = min(v0, min(v1, v2))
            vmax = max(v0, max(v1, v2))
            i0 = <int>max(0.0, ceil(vmin - 0.5))
            i1 = <int>min(height - 1.0, floor(vmax - 0.5))
            j0 = <int>max(0.0, ceil(umin - 0.5))
            j1 = <int>min(width - 1.0, floor(umax - 0.5))
            for i in range(i0, i1 + 1):
                py = i + 0.5
                for j in range(j0, j1 + 1):
                    px = j + 0.5
                    w0 = ((u2 - u1) * (py - v1) - (v2 - v1) * (px - u1)) / area
                    w1 = ((u0 - u2) * (py - v2) - (v0 - v2) * (px - u2)) / area
                    w2 = ((u1 - u0) * (py - v0) - (v1 - v0) * (px - u0)) / area
                    if w0 < -1e-10 or w1 < -1e-10 or w2 < -1e-10:
                        continue
                    zz = 1.0 / (w0 / z0 + w1 / z1 + w2 / z2)
                    if zz < depth[i, j]:
                        depth[i, j] = zz
    return depth_arr
