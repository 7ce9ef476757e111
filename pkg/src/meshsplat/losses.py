"""Training objectives: L1 + D-SSIM image loss and the three mesh-alignment
regularizers applied to tightly bound splats.

Scalar reductions use ``math.fsum`` so every loss is exactly rounded and
independent of summation order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .mesh import TriMesh, closest_points_on_triangles
from .splats import SplatSet, splat_normals

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    lambda_img: float = 0.001
    lambda_nc: float = 0.1
    lambda_min: float = 0.1
    lambda_max: float = 10.0
    lambda_proj: float = 50.0
    rho: float = 0.1
    d_th: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


def fsum(a) -> float:
    return math.fsum(np.asarray(a, dtype=np.float64).ravel())


def gaussian_kernel1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _filter(img, kernel):
    """Separable 'same' correlation with zero padding over the two image axes."""
    out = correlate1d(img, kernel, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, kernel, axis=1, mode="constant", cval=0.0)


@dataclass
class _SsimParts:
    mu1: np.ndarray
    mu2: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    smap: np.ndarray


def _ssim_parts(x, y, kernel=None) -> _SsimParts:
    kernel = gaussian_kernel1d() if kernel is None else kernel
    mu1, mu2 = _filter(x, kernel), _filter(y, kernel)
    s11 = _filter(x * x, kernel) - mu1 * mu1
    s22 = _filter(y * y, kernel) - mu2 * mu2
    s12 = _filter(x * y, kernel) - mu1 * mu2
    A1 = 2 * mu1 * mu2 + SSIM_C1
    A2 = 2 * s12 + SSIM_C2
    B1 = mu1 * mu1 + mu2 * mu2 + SSIM_C1
    B2 = s11 + s22 + SSIM_C2
    return _SsimParts(mu1, mu2, A1, A2, B1, B2, (A1 * A2) / (B1 * B2))


def ssim_map(x, y) -> np.ndarray:
    x, y = _as_image(x), _as_image(y)
    return _ssim_parts(x, y).smap


def ssim(x, y) -> float:
    """Mean SSIM over pixels and channels of two ``[0, 1]`` images."""
    m = ssim_map(x, y)
    return fsum(m) / m.size


def ssim_grad(x, y) -> np.ndarray:
    """Gradient of :func:`ssim` w.r.t. the first image."""
    x, y = _as_image(x), _as_image(y)
    kernel = gaussian_kernel1d()
    p = _ssim_parts(x, y, kernel)
    n = x.size
    BB = p.B1 * p.B2
    d_mu1 = (2 * p.mu2 * p.A2 - 2 * p.mu2 * p.A1) / BB - p.smap * (2 * p.mu1 / p.B1 - 2 * p.mu1 / p.B2)
    d_f11 = -p.smap / p.B2
    d_f12 = 2 * p.A1 / BB
    # the zero-padded symmetric filter is its own adjoint
    g = (_filter(d_mu1, kernel) + 2 * x * _filter(d_f11, kernel) + y * _filter(d_f12, kernel)) / n
    return g.reshape(np.shape(x))


def _as_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    return img


def l1_loss(x, y) -> float:
    d = np.abs(np.asarray(x, dtype=np.float64) - y)
    return fsum(d) / d.size


def image_loss(rendered, target, lambda_img: float) -> float:
    """``(1 - lambda) L1 + lambda (1 - SSIM)``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    return (1 - lambda_img) * l1_loss(rendered, target) + lambda_img * (1 - ssim(rendered, target))


def image_loss_terms(rendered, target, lambda_img: float) -> list:
    """Per-element contributions whose exact sum is ``image_loss - lambda_img``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    n = rendered.size
    return [(1 - lambda_img) / n * np.abs(rendered - target), -lambda_img / n * ssim_map(rendered, target)]


def normal_consistency_terms(splats: SplatSet, mesh: TriMesh) -> np.ndarray:
    """Per-splat ``1 - |n_i . n_f|`` for tight splats (zeros elsewhere)."""
    out = np.zeros(len(splats))
    t = splats.tight
    if not t.any():
        return out
    normals, _ = splat_normals(splats.subset(t))
    nf = mesh.normals[splats.bound_face[t]]
    out[t] = 1.0 - np.abs(np.sum(normals * nf, axis=1))
    return out


def normal_consistency_loss(splats: SplatSet, mesh: TriMesh) -> float:
    return fsum(normal_consistency_terms(splats, mesh))


def scale_terms(splats: SplatSet, lambda_min: float, lambda_max: float, rho: float) -> np.ndarray:
    out = np.zeros(len(splats))
    t = splats.tight
    s = np.exp(splats.raw_scales[t])
    out[t] = lambda_min * np.abs(s.min(axis=1)) + lambda_max * np.abs(s.max(axis=1) - rho)
    return out


def scale_loss(splats: SplatSet, lambda_min: float, lambda_max: float, rho: float) -> float:
    return fsum(scale_terms(splats, lambda_min, lambda_max, rho))


def surface_offsets(splats: SplatSet, mesh: TriMesh):
    """Closest points on each tight splat's bound face and the distances to them."""
    t = splats.tight
    tri = mesh.triangles()[splats.bound_face[t]]
    q, d, _ = closest_points_on_triangles(splats.positions[t], tri[:, 0], tri[:, 1], tri[:, 2])
    return q, d


def projection_loss(splats: SplatSet, mesh: TriMesh) -> float:
    if not splats.tight.any():
        return 0.0
    return fsum(surface_offsets(splats, mesh)[1])


def total_loss(rendered, target, splats: SplatSet, mesh: TriMesh, weights: LossWeights):
    """Weighted objective and its per-term breakdown.

    The scale term already carries its own min/max weights and gets no outer weight.
    """
    terms = {
        "L_img": image_loss(rendered, target, weights.lambda_img),
        "L_nc": normal_consistency_loss(splats, mesh),
        "L_scale": scale_loss(splats, weights.lambda_min, weights.lambda_max, weights.rho),
        "L_proj": projection_loss(splats, mesh),
    }
    total = math.fsum([
        terms["L_img"],
        weights.lambda_nc * terms["L_nc"],
        terms["L_scale"],
        weights.lambda_proj * terms["L_proj"],
    ])
    terms["total"] = total
    return total, terms


def psnr(x, y, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    mse = fsum((np.asarray(x, dtype=np.float64) - y) ** 2) / np.size(x)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)
