"""Shared math: rotations, real spherical harmonics, pinhole cameras.

Conventions used everywhere in the package:

* matrices are row-major numpy arrays and act on column vectors (``R @ v``);
* quaternions are stored ``(w, x, y, z)``;
* camera space is +z forward, +x right, +y down, image origin top-left,
  and pixel ``(i, j)`` has its center at continuous coordinates ``(j + 0.5, i + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

Z_NEAR = 0.01


def sh_count(degree: int) -> int:
    if degree not in (0, 1, 2, 3):
        raise ValueError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    for deg in range(4):
        if (deg + 1) ** 2 == count:
            return deg
    raise ValueError(f"{count} is not a valid SH coefficient count")


# ---------------------------------------------------------------------------
# quaternions


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a quaternion (or a stack of them, shape ``(..., 4)``).

    The input is normalized first, so any non-zero 4-vector is accepted.
    """
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    R = np.empty(np.shape(w) + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q, dR):
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back to the raw quaternion.

    Includes the normalization step, so ``q`` need not be unit length.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = np.moveaxis(u, -1, 0)
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    du = np.stack([dw, dx, dy, dz], axis=-1)
    # d(q/|q|)/dq = (I - u u^T) / |q|
    return (du - u * np.sum(du * u, axis=-1, keepdims=True)) / norm


def rotmat_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single matrix, ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs, degree: int) -> np.ndarray:
    """Real SH basis values at unit directions ``(..., 3)`` -> ``(..., (degree+1)**2)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = sh_count(degree)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (n,))
    out[..., 0] = SH_C0
    if degree > 0:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree > 2:
        out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs, degree: int) -> np.ndarray:
    """Partial derivatives of :func:`sh_basis` w.r.t. ``(x, y, z)``: shape ``(..., n, 3)``.

    The polynomials are differentiated as functions on R^3; chaining through the
    direction normalization is the caller's job.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    n = sh_count(degree)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(dirs.shape[:-1] + (n, 3))
    if degree > 0:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree > 1:
        c = SH_C2
        g[..., 4, :] = np.stack([c[0] * y, c[0] * x, zero], -1)
        g[..., 5, :] = np.stack([zero, c[1] * z, c[1] * y], -1)
        g[..., 6, :] = np.stack([-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z], -1)
        g[..., 7, :] = np.stack([c[3] * z, zero, c[3] * x], -1)
        g[..., 8, :] = np.stack([2 * c[4] * x, -2 * c[4] * y, zero], -1)
    if degree > 2:
        c = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, :] = np.stack([6 * c[0] * x * y, c[0] * (3 * xx - 3 * yy), zero], -1)
        g[..., 10, :] = np.stack([c[1] * y * z, c[1] * x * z, c[1] * x * y], -1)
        g[..., 11, :] = np.stack(
            [-2 * c[2] * x * y, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * y * z], -1)
        g[..., 12, :] = np.stack(
            [-6 * c[3] * x * z, -6 * c[3] * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)], -1)
        g[..., 13, :] = np.stack(
            [c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * x * y, 8 * c[4] * x * z], -1)
        g[..., 14, :] = np.stack([2 * c[5] * x * z, -2 * c[5] * y * z, c[5] * (xx - yy)], -1)
        g[..., 15, :] = np.stack([c[6] * (3 * xx - 3 * yy), -6 * c[6] * x * y, zero], -1)
    return g


def eval_sh(coeffs, dirs) -> np.ndarray:
    """View-dependent color from SH coefficients ``(..., n, 3)`` at unit ``dirs``.

    Follows the usual splatting convention: ``max(sum_k c_k Y_k(d) + 0.5, 0)``.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    degree = sh_degree_from_count(coeffs.shape[-2])
    basis = sh_basis(dirs, degree)
    raw = np.einsum("...k,...kc->...c", basis, coeffs) + 0.5
    return np.maximum(raw, 0.0)


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera pose ``x_c = R_cw x_w + t_cw``."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R_cw: np.ndarray
    t_cw: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R_cw, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t_cw, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("R_cw is not orthonormal")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R_cw", R)
        object.__setattr__(self, "t_cw", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R_cw.T @ self.t_cw

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(
            fx=fx, fy=fy,
            cx=width / 2 if cx is None else cx,
            cy=height / 2 if cy is None else cy,
            width=width, height=height,
            R_cw=R, t_cw=-R @ eye,
        )


def world_to_camera(cam: Camera, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    # einsum without BLAS rounds each row identically whatever the batch size
    return np.einsum("...j,ij->...i", p, cam.R_cw) + cam.t_cw


def camera_to_world(cam: Camera, p_cam) -> np.ndarray:
    p_cam = np.asarray(p_cam, dtype=np.float64)
    return (p_cam - cam.t_cw) @ cam.R_cw


def project_point(cam: Camera, p_cam):
    """Pinhole projection of camera-space points.

    Returns ``(u, v, depth)``; entries with ``z <= Z_NEAR`` come back as NaN
    so callers can cull them.
    """
    p_cam = np.asarray(p_cam, dtype=np.float64)
    x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    ok = z > Z_NEAR
    zs = np.where(ok, z, 1.0)
    u = np.where(ok, cam.fx * x / zs + cam.cx, np.nan)
    v = np.where(ok, cam.fy * y / zs + cam.cy, np.nan)
    return u, v, np.where(ok, z, np.nan)
