"""Forward image synthesis: mesh-depth occlusion masking, global depth sort,
tile-binned alpha blending, and an untiled reference renderer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import Camera, world_to_camera
from .splats import Projection, SplatSet, project_splats

TILE_SIZE = 16
DEPTH_OFFSET = 0.01

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


def occlusion_mask(splats: SplatSet, depth_map, cam: Camera, delta: float = DEPTH_OFFSET,
                   p_cam=None) -> np.ndarray:
    """True for splats whose center lies more than ``delta`` behind the mesh surface."""
    if p_cam is None:
        p_cam = world_to_camera(cam, splats.positions)
    z = p_cam[:, 2]
    masked = np.zeros(len(p_cam), dtype=bool)
    front = z > 1e-12
    if depth_map is None or not front.any():
        return masked
    u = np.floor(cam.fx * p_cam[front, 0] / z[front] + cam.cx)
    v = np.floor(cam.fy * p_cam[front, 1] / z[front] + cam.cy)
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    idx = np.flatnonzero(front)[inside]
    d = depth_map[v[inside].astype(np.int64), u[inside].astype(np.int64)]
    with np.errstate(invalid="ignore"):
        masked[idx] = np.isfinite(d) & (z[idx] > d + delta)
    return masked


@dataclass
class RenderTape:
    """Everything the backward pass needs to replay the blending."""

    cam: Camera
    proj: Projection
    order: np.ndarray
    tiled: bool
    backend: str | None
    tile_offsets: np.ndarray | None
    tile_ids: np.ndarray | None
    n_proc: np.ndarray
    num_threads: int


@dataclass
class RenderOutput:
    image: np.ndarray
    final_T: np.ndarray
    contributed: np.ndarray
    masked: np.ndarray
    tape: RenderTape

    @property
    def weight_sum(self) -> np.ndarray:
        # blending weights telescope to 1 - T on the black background
        return 1.0 - self.final_T


def _sorted_visible(splats, cam, depth_map, delta, occlusion):
    proj = project_splats(splats, cam)
    masked = (occlusion_mask(splats, depth_map, cam, delta, p_cam=proj._p_cam)
              if occlusion and depth_map is not None else np.zeros(len(splats), bool))
    live = np.flatnonzero(proj.visible & ~masked)
    # global front-to-back order by center depth, ties by splat index
    order = live[np.lexsort((live, proj.depths[live]))]
    return proj, masked, order


def bin_tiles(proj: Projection, order, width, height, tile_size=TILE_SIZE):
    """Tile lists for splats in ``order``; returns ``(offsets, ranks)``."""
    n_tx = (width + tile_size - 1) // tile_size
    n_ty = (height + tile_size - 1) // tile_size
    m = proj.means2d[order]
    e = proj.extent[order]
    j0 = np.clip(np.ceil(m[:, 0] - e[:, 0] - 0.5), 0, width - 1).astype(np.int64)
    j1 = np.clip(np.floor(m[:, 0] + e[:, 0] - 0.5), 0, width - 1).astype(np.int64)
    i0 = np.clip(np.ceil(m[:, 1] - e[:, 1] - 0.5), 0, height - 1).astype(np.int64)
    i1 = np.clip(np.floor(m[:, 1] + e[:, 1] - 0.5), 0, height - 1).astype(np.int64)
    tx0, tx1 = j0 // tile_size, j1 // tile_size
    ty0, ty1 = i0 // tile_size, i1 // tile_size
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    ranks = np.repeat(np.arange(len(order)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = tx0[ranks] + local % nx[ranks]
    ty = ty0[ranks] + local // nx[ranks]
    tiles = ty * n_tx + tx
    sort = np.lexsort((ranks, tiles))
    tile_ids = np.ascontiguousarray(ranks[sort], dtype=np.int64)
    offsets = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
    np.cumsum(np.bincount(tiles, minlength=n_tx * n_ty), out=offsets[1:])
    return offsets, tile_ids


def _packed(proj, order):
    return (np.ascontiguousarray(proj.means2d[order]), np.ascontiguousarray(proj.conics[order]),
            np.ascontiguousarray(proj.opacities[order]), np.ascontiguousarray(proj.colors[order]))


def render(splats: SplatSet, cam: Camera, depth_map=None, delta: float = DEPTH_OFFSET,
           occlusion: bool = True, backend: str | None = None, num_threads: int = 1,
           update_visibility: bool = True) -> RenderOutput:
    """Tile-binned front-to-back alpha blending of all unmasked, unculled splats."""
    proj, masked, order = _sorted_visible(splats, cam, depth_map, delta, occlusion)
    offsets, tile_ids = bin_tiles(proj, order, cam.width, cam.height)
    k = kernels.get(backend)
    image, final_T, n_proc, contrib_rank = k.rasterize_forward(
        *_packed(proj, order), offsets, tile_ids, cam.width, cam.height, TILE_SIZE, num_threads)
    contributed = np.zeros(len(splats), dtype=bool)
    contributed[order] = contrib_rank
    if update_visibility:
        splats.ever_visible |= contributed
    tape = RenderTape(cam, proj, order, True, backend, offsets, tile_ids, n_proc, num_threads)
    return RenderOutput(image, final_T, contributed, masked, tape)


def render_reference(splats: SplatSet, cam: Camera, depth_map=None, delta: float = DEPTH_OFFSET,
                     occlusion: bool = True, update_visibility: bool = False) -> RenderOutput:
    """Untiled oracle: every pixel walks the full globally sorted splat list."""
    proj, masked, order = _sorted_visible(splats, cam, depth_map, delta, occlusion)
    H, W = cam.height, cam.width
    ys, xs = np.mgrid[0:H, 0:W]
    px, py = xs.ravel() + 0.5, ys.ravel() + 0.5
    T = np.ones(H * W)
    C = np.zeros((H * W, 3))
    done = np.zeros(H * W, dtype=bool)
    n_proc = np.zeros(H * W, dtype=np.int64)
    contributed = np.zeros(len(splats), dtype=bool)
    for rank, s in enumerate(order):
        if done.all():
            break
        dx, dy = px - proj.means2d[s, 0], py - proj.means2d[s, 1]
        a, b, c = proj.conics[s]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        alpha = np.minimum(ALPHA_MAX, proj.opacities[s] * np.exp(power))
        live = ~done & (power <= 0) & (alpha >= ALPHA_MIN)
        test_T = T * (1.0 - alpha)
        stop = live & (test_T < T_MIN)
        done |= stop
        live &= ~stop
        if not live.any():
            continue
        C[live] += (alpha[live] * T[live])[:, None] * proj.colors[s]
        T[live] = test_T[live]
        n_proc[live] = rank + 1
        contributed[s] = True
    if update_visibility:
        splats.ever_visible |= contributed
    tape = RenderTape(cam, proj, order, False, None, None, None, n_proc.reshape(H, W), 1)
    return RenderOutput(C.reshape(H, W, 3), T.reshape(H, W), contributed, masked, tape)
