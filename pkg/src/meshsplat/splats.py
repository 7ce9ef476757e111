"""Splat parameter storage, covariance construction, screen-space projection,
mesh binding and tight/loose classification."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .core import (Z_NEAR, Camera, world_to_camera, eval_sh, quat_to_rotmat, rgb_to_sh_dc, sh_basis,
                   sh_basis_grad, sh_count, sh_degree_from_count)
from .mesh import MeshBvh, TriMesh

LOWPASS = 0.3
ALPHA_MIN = 1.0 / 255.0

LOOSE, TIGHT = 0, 1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class SplatSet:
    """Structure-of-arrays store; every array has the splat count as first axis.

    ``rotations`` are ``(w, x, y, z)`` quaternions, ``sh`` is ``(N, K, 3)``,
    ``bound_face`` is ``-1`` for unbound splats and ``tight`` is the class flag.
    """

    positions: np.ndarray
    raw_scales: np.ndarray
    raw_opacity: np.ndarray
    rotations: np.ndarray
    sh: np.ndarray
    bound_face: np.ndarray
    tight: np.ndarray
    ever_visible: np.ndarray

    PARAMS = ("positions", "raw_scales", "raw_opacity", "rotations", "sh")

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.raw_scales = np.asarray(self.raw_scales, dtype=np.float64).reshape(n, 3)
        self.raw_opacity = np.asarray(self.raw_opacity, dtype=np.float64).reshape(n)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 3 or len(self.sh) != n or self.sh.shape[2] != 3:
            self.sh = self.sh.reshape(n, -1, 3)
        sh_degree_from_count(self.sh.shape[1])
        self.bound_face = np.asarray(self.bound_face, dtype=np.int64).reshape(n)
        self.tight = np.asarray(self.tight, dtype=bool).reshape(n)
        self.ever_visible = np.asarray(self.ever_visible, dtype=bool).reshape(n)
        if np.any(self.tight & (self.bound_face < 0)):
            raise ValueError("tight splats must be bound to a face")

    @classmethod
    def empty(cls, sh_degree: int = 0):
        k = sh_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 4)),
                   np.zeros((0, k, 3)), np.zeros(0, np.int64), np.zeros(0, bool), np.zeros(0, bool))

    @classmethod
    def create(cls, positions, scales, opacities, rotations=None, colors=None, sh_degree=0,
               bound_face=None, tight=None):
        """Convenience constructor from activated values."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
        opac = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))
        rot = np.tile([1.0, 0, 0, 0], (n, 1)) if rotations is None else rotations
        sh = np.zeros((n, sh_count(sh_degree), 3))
        if colors is not None:
            sh[:, 0, :] = rgb_to_sh_dc(np.broadcast_to(colors, (n, 3)))
        bf = -np.ones(n, np.int64) if bound_face is None else bound_face
        tt = np.zeros(n, bool) if tight is None else tight
        return cls(positions, np.log(scales), logit(opac), rot, sh, bf, tt, np.zeros(n, bool))

    def __len__(self):
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh.shape[1])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.raw_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.raw_opacity)

    def copy(self) -> "SplatSet":
        return replace(self, **{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, idx) -> "SplatSet":
        return replace(self, **{f.name: getattr(self, f.name)[idx].copy() for f in fields(self)})

    def concat(self, other: "SplatSet") -> "SplatSet":
        return replace(self, **{f.name: np.concatenate([getattr(self, f.name), getattr(other, f.name)])
                                for f in fields(self)})

    def get_params(self) -> dict:
        return {name: getattr(self, name) for name in self.PARAMS}


# ---------------------------------------------------------------------------
# geometry


def build_covariance(raw_scale, q) -> np.ndarray:
    """World covariance ``R S S^T R^T`` with ``S = diag(exp(raw_scale))``."""
    R = quat_to_rotmat(q)
    M = R * np.exp(np.asarray(raw_scale, dtype=np.float64))[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def splat_normals(splats: SplatSet):
    """World-space axis of smallest scale for each splat, plus that axis index."""
    axis = np.argmin(splats.raw_scales, axis=1)
    R = quat_to_rotmat(splats.rotations)
    return R[np.arange(len(splats)), :, axis], axis


@dataclass
class Projection:
    """Screen-space data for every splat in one view (arrays over all splats).

    ``visible`` marks splats that survive near-plane and footprint culling.
    The ``_*`` fields are intermediates reused by the backward pass.
    """

    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    radii: np.ndarray
    extent: np.ndarray
    visible: np.ndarray
    _p_cam: np.ndarray
    _cov3d: np.ndarray
    _J: np.ndarray
    _R: np.ndarray
    _dirs: np.ndarray
    _dir_len: np.ndarray
    _sh_basis: np.ndarray
    _color_clamped: np.ndarray


def project_splats(splats: SplatSet, cam: Camera) -> Projection:
    """EWA projection of all splats into ``cam`` (vectorized)."""
    n = len(splats)
    W = cam.R_cw
    p_cam = world_to_camera(cam, splats.positions)
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    front = z > Z_NEAR
    zs = np.where(front, z, 1.0)

    R = quat_to_rotmat(splats.rotations)
    s = np.exp(splats.raw_scales)
    M = R * s[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / (zs * zs)
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / (zs * zs)
    T = J @ W
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)

    means2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = 3.0 * np.sqrt(lam_max)

    opac = sigmoid(splats.raw_opacity)
    # Mahalanobis radius beyond which opacity * g < 1/255, i.e. the exact support
    with np.errstate(divide="ignore", invalid="ignore"):
        k2 = np.where(opac > ALPHA_MIN, 2.0 * np.log(opac / ALPHA_MIN), 0.0)
    ext = np.stack([np.sqrt(k2 * a), np.sqrt(k2 * c)], axis=1) + 1.0
    visible = front & (opac > ALPHA_MIN)
    visible &= (means2d[:, 0] + ext[:, 0] > 0) & (means2d[:, 0] - ext[:, 0] < cam.width)
    visible &= (means2d[:, 1] + ext[:, 1] > 0) & (means2d[:, 1] - ext[:, 1] < cam.height)

    dirs = splats.positions - cam.center
    dir_len = np.linalg.norm(dirs, axis=1)
    unit = dirs / np.maximum(dir_len, 1e-12)[:, None]
    basis = sh_basis(unit, splats.sh_degree)
    raw_rgb = np.einsum("nk,nkc->nc", basis, splats.sh) + 0.5
    colors = np.maximum(raw_rgb, 0.0)

    return Projection(
        means2d=means2d, cov2d=cov2d, conics=conics, depths=z, colors=colors, opacities=opac,
        radii=radii, extent=ext, visible=visible,
        _p_cam=p_cam, _cov3d=cov3d, _J=J, _R=R, _dirs=dirs, _dir_len=dir_len,
        _sh_basis=basis, _color_clamped=raw_rgb < 0.0,
    )


@dataclass
class ProjectedSplat:
    mean: np.ndarray
    cov: np.ndarray
    depth: float
    rgb: np.ndarray
    opacity: float
    radius: float


def project_splat(splats: SplatSet, index: int, cam: Camera) -> ProjectedSplat | None:
    """Single-splat view of :func:`project_splats`; ``None`` when culled."""
    proj = project_splats(splats.subset([index]), cam)
    if not proj.visible[0]:
        return None
    return ProjectedSplat(proj.means2d[0], proj.cov2d[0], float(proj.depths[0]), proj.colors[0],
                          float(proj.opacities[0]), float(proj.radii[0]))


def gaussian_weight(mean, cov, x) -> np.ndarray:
    """``exp(-0.5 (x - mean)^T cov^-1 (x - mean))`` for points ``x`` of shape ``(..., 2)``."""
    cov = np.asarray(cov, dtype=np.float64)
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    a, b, c = cov[1, 1] / det, -cov[0, 1] / det, cov[0, 0] / det
    d = np.asarray(x, dtype=np.float64) - mean
    dx, dy = d[..., 0], d[..., 1]
    return np.exp(-0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy)


def projection_backward(splats: SplatSet, cam: Camera, proj: Projection,
                        d_means2d, d_conics, d_colors, d_opac) -> dict:
    """Chain screen-space gradients back to the raw splat parameters.

    ``d_conics`` holds derivatives w.r.t. the three stored conic entries
    ``(a, b, c)`` where the exponent is ``-0.5 (a dx^2 + c dy^2) - b dx dy``.
    """
    n = len(splats)
    W = cam.R_cw
    p_cam = proj._p_cam
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    zs = np.where(z > Z_NEAR, z, 1.0)
    fx, fy = cam.fx, cam.fy

    # conic = inverse(cov2d): dL/dcov = -C^T G C with G the full-matrix gradient
    Cm = np.empty((n, 2, 2))
    Cm[:, 0, 0] = proj.conics[:, 0]
    Cm[:, 0, 1] = Cm[:, 1, 0] = proj.conics[:, 1]
    Cm[:, 1, 1] = proj.conics[:, 2]
    Gc = np.empty((n, 2, 2))
    Gc[:, 0, 0] = d_conics[:, 0]
    Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * d_conics[:, 1]
    Gc[:, 1, 1] = d_conics[:, 2]
    d_cov2d = -Cm @ Gc @ Cm

    T = proj._J @ W
    cov3d = proj._cov3d
    # cov2d = T cov3d T^T
    d_cov3d = np.swapaxes(T, 1, 2) @ d_cov2d @ T
    d_T = 2.0 * d_cov2d @ T @ cov3d
    d_J = d_T @ W.T

    d_pcam = np.zeros((n, 3))
    d_pcam[:, 0] = d_means2d[:, 0] * fx / zs
    d_pcam[:, 1] = d_means2d[:, 1] * fy / zs
    d_pcam[:, 2] = -(d_means2d[:, 0] * fx * x + d_means2d[:, 1] * fy * y) / (zs * zs)
    # J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
    d_pcam[:, 0] += -fx / (zs * zs) * d_J[:, 0, 2]
    d_pcam[:, 1] += -fy / (zs * zs) * d_J[:, 1, 2]
    d_pcam[:, 2] += (-fx / (zs * zs) * d_J[:, 0, 0] - fy / (zs * zs) * d_J[:, 1, 1]
                     + 2 * fx * x / zs ** 3 * d_J[:, 0, 2] + 2 * fy * y / zs ** 3 * d_J[:, 1, 2])
    d_pos = d_pcam @ W

    # cov3d = M M^T, M = R diag(s)
    s = np.exp(splats.raw_scales)
    R = proj._R
    M = R * s[:, None, :]
    d_cov3d_sym = 0.5 * (d_cov3d + np.swapaxes(d_cov3d, 1, 2))
    d_M = 2.0 * d_cov3d_sym @ M
    d_s = np.einsum("nij,nij->nj", d_M, R)
    d_raw_scales = d_s * s
    d_R = d_M * s[:, None, :]
    from .core import quat_to_rotmat_vjp
    d_rot = quat_to_rotmat_vjp(splats.rotations, d_R)

    # colors
    d_rgb = np.where(proj._color_clamped, 0.0, d_colors)
    d_sh = proj._sh_basis[:, :, None] * d_rgb[:, None, :]
    dbasis = sh_basis_grad(proj._dirs / np.maximum(proj._dir_len, 1e-12)[:, None], splats.sh_degree)
    d_unit = np.einsum("nc,nkc,nkj->nj", d_rgb, splats.sh, dbasis)
    unit = proj._dirs / np.maximum(proj._dir_len, 1e-12)[:, None]
    d_dir = (d_unit - unit * np.sum(d_unit * unit, axis=1, keepdims=True)) / np.maximum(proj._dir_len, 1e-12)[:, None]
    d_pos = d_pos + d_dir

    op = proj.opacities
    d_raw_opacity = d_opac * op * (1.0 - op)

    return {
        "positions": d_pos,
        "raw_scales": d_raw_scales,
        "raw_opacity": d_raw_opacity,
        "rotations": d_rot,
        "sh": d_sh,
    }


# ---------------------------------------------------------------------------
# mesh binding


def classify_splats(splats: SplatSet, mesh: TriMesh, bvh: MeshBvh, d_th: float) -> np.ndarray:
    """Rebind every splat to its nearest face and set ``tight = d < d_th``.

    Mutates ``splats`` in place and returns the distances.
    """
    if mesh.n_faces == 0:
        raise ValueError("mesh has no faces")
    ids, dists = bvh.nearest_many(splats.positions)
    splats.bound_face = ids
    splats.tight = dists < d_th
    assert not np.any(splats.tight & (splats.bound_face < 0))
    return dists


def binding_distances(splats: SplatSet, mesh: TriMesh) -> np.ndarray:
    """Distance of each bound splat to its bound face (NaN when unbound)."""
    from .mesh import closest_points_on_triangles
    out = np.full(len(splats), np.nan)
    bound = splats.bound_face >= 0
    tri = mesh.triangles()[splats.bound_face[bound]]
    _, d, _ = closest_points_on_triangles(splats.positions[bound], tri[:, 0], tri[:, 1], tri[:, 2])
    out[bound] = d
    return out


def _frame_from_normal(normals, tangents):
    """Rotation matrices whose columns are (tangent, bitangent, normal)."""
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    t = tangents - n * np.sum(tangents * n, axis=1, keepdims=True)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    bt = np.cross(n, t)
    return np.stack([t, bt, n], axis=2)


def rotmats_to_quats(R) -> np.ndarray:
    from .core import rotmat_to_quat
    return np.array([rotmat_to_quat(r) for r in R]).reshape(-1, 4)


def init_from_mesh(mesh: TriMesh, sh_degree: int = 0, opacity: float = 0.1,
                   gray: float = 0.5) -> SplatSet:
    """One flat splat per face at its centroid, smallest axis along the face normal."""
    if mesh.n_faces == 0:
        raise ValueError("mesh has no faces")
    tri = mesh.triangles()
    centroids = tri.mean(axis=1)
    edges = np.linalg.norm(tri - np.roll(tri, -1, axis=1), axis=2)
    tangential = np.log(np.maximum(edges.mean(axis=1) / 2.0, 1e-4))
    raw_scales = np.stack([tangential, tangential, tangential + np.log(0.1)], axis=1)
    frames = _frame_from_normal(mesh.normals, tri[:, 1] - tri[:, 0])
    rotations = rotmats_to_quats(frames)
    n = mesh.n_faces
    sh = np.zeros((n, sh_count(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh_dc(gray)
    return SplatSet(
        positions=centroids,
        raw_scales=raw_scales,
        raw_opacity=np.full(n, logit(opacity)),
        rotations=rotations,
        sh=sh,
        bound_face=np.arange(n),
        tight=np.ones(n, bool),
        ever_visible=np.zeros(n, bool),
    )


def eval_colors(splats: SplatSet, cam: Camera) -> np.ndarray:
    dirs = splats.positions - cam.center
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    return eval_sh(splats.sh, dirs)
