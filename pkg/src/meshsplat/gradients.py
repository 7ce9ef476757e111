"""Analytic backward passes for rendering and all losses, and a
finite-difference gradient checker."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import quat_to_rotmat_vjp
from .losses import (LossWeights, image_loss, image_loss_terms, normal_consistency_loss, normal_consistency_terms,
                     projection_loss, scale_loss, scale_terms, ssim_grad, surface_offsets, total_loss)
from .mesh import TriMesh
from .renderer import ALPHA_MAX, ALPHA_MIN, TILE_SIZE, RenderOutput, render
from .splats import SplatSet, projection_backward, splat_normals

PARAM_CLASSES = SplatSet.PARAMS


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class GradStore:
    """Per-splat gradients mirroring :class:`SplatSet`, plus densification statistics."""

    positions: np.ndarray
    raw_scales: np.ndarray
    raw_opacity: np.ndarray
    rotations: np.ndarray
    sh: np.ndarray
    grad2d_accum: np.ndarray = field(default=None)
    grad2d_count: np.ndarray = field(default=None)

    @classmethod
    def zeros_like(cls, splats: SplatSet) -> "GradStore":
        n = len(splats)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 4)),
                   np.zeros_like(splats.sh), np.zeros(n), np.zeros(n, np.int64))

    def zero_(self):
        for name in PARAM_CLASSES:
            getattr(self, name)[...] = 0.0

    def add(self, grads: dict, scale: float = 1.0):
        for name, g in grads.items():
            getattr(self, name)[...] += scale * g

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_CLASSES}

    def check_finite(self):
        for name in PARAM_CLASSES:
            g = getattr(self, name)
            bad = ~np.isfinite(g.reshape(len(g), int(np.prod(g.shape[1:])))).all(axis=1)
            if bad.any():
                raise NonFiniteGradient(f"non-finite gradient for {name} of splat {int(np.flatnonzero(bad)[0])}")


def _zero_grads(splats: SplatSet) -> dict:
    n = len(splats)
    return {"positions": np.zeros((n, 3)), "raw_scales": np.zeros((n, 3)), "raw_opacity": np.zeros(n),
            "rotations": np.zeros((n, 4)), "sh": np.zeros_like(splats.sh)}


def _reference_blend_backward(tape, image, dL_dimage):
    proj, order = tape.proj, tape.order
    H, W = tape.n_proc.shape
    ys, xs = np.mgrid[0:H, 0:W]
    px, py = xs.ravel() + 0.5, ys.ravel() + 0.5
    n_proc = tape.n_proc.ravel()
    C = image.reshape(-1, 3)
    g = dL_dimage.reshape(-1, 3)
    T = np.ones(H * W)
    acc = np.zeros((H * W, 3))
    m = len(order)
    d_mean, d_conic, d_opac, d_color = np.zeros((m, 2)), np.zeros((m, 3)), np.zeros(m), np.zeros((m, 3))
    for rank, s in enumerate(order):
        dx, dy = px - proj.means2d[s, 0], py - proj.means2d[s, 1]
        a, b, c = proj.conics[s]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        G = np.exp(power)
        raw = proj.opacities[s] * G
        alpha = np.minimum(ALPHA_MAX, raw)
        live = (rank < n_proc) & (power <= 0) & (alpha >= ALPHA_MIN)
        if not live.any():
            continue
        al, Tl, gl, Gl = alpha[live], T[live], g[live], G[live]
        w = al * Tl
        acc[live] += w[:, None] * proj.colors[s]
        d_color[rank] = (w[:, None] * gl).sum(axis=0)
        suffix = C[live] - acc[live]
        dL_dalpha = (gl * (Tl[:, None] * proj.colors[s] - suffix / (1.0 - al)[:, None])).sum(axis=1)
        dL_dalpha = np.where(raw[live] < ALPHA_MAX, dL_dalpha, 0.0)
        T[live] = Tl * (1.0 - al)
        d_opac[rank] = (Gl * dL_dalpha).sum()
        dp = proj.opacities[s] * Gl * dL_dalpha
        dxl, dyl = dx[live], dy[live]
        d_conic[rank] = [(-0.5 * dxl * dxl * dp).sum(), (-dxl * dyl * dp).sum(), (-0.5 * dyl * dyl * dp).sum()]
        d_mean[rank] = [(dp * (a * dxl + b * dyl)).sum(), (dp * (c * dyl + b * dxl)).sum()]
    return d_mean, d_conic, d_opac, d_color


def _reduce_entries(tile_ids, m, *entry_arrays):
    out = []
    for e in entry_arrays:
        flat = e.reshape(len(e), int(np.prod(e.shape[1:])))
        red = np.stack([np.bincount(tile_ids, weights=flat[:, k], minlength=m) for k in range(flat.shape[1])], axis=1)
        out.append(red.reshape((m,) + e.shape[1:]))
    return out


def backward_render(splats: SplatSet, out: RenderOutput, dL_dimage):
    """Gradients of a scalar loss through the blending and projection.

    Returns ``(grads, d_means2d)`` where ``grads`` maps parameter names to
    arrays over all splats and ``d_means2d`` is the screen-space positional
    gradient (pixels) used for densification statistics.
    """
    tape = out.tape
    dL_dimage = np.ascontiguousarray(dL_dimage, dtype=np.float64)
    if not np.all(np.isfinite(dL_dimage)):
        i, j = np.argwhere(~np.isfinite(dL_dimage))[0][:2]
        raise NonFiniteGradient(f"non-finite image gradient at pixel ({i}, {j})")
    order, proj = tape.order, tape.proj
    m = len(order)
    if tape.tiled:
        k = kernels.get(tape.backend)
        means2d = np.ascontiguousarray(proj.means2d[order])
        conics = np.ascontiguousarray(proj.conics[order])
        opac = np.ascontiguousarray(proj.opacities[order])
        colors = np.ascontiguousarray(proj.colors[order])
        e = k.rasterize_backward(means2d, conics, opac, colors, tape.tile_offsets, tape.tile_ids,
                                 tape.cam.width, tape.cam.height, TILE_SIZE,
                                 np.ascontiguousarray(out.image), tape.n_proc, dL_dimage, tape.num_threads)
        d_mean, d_conic, d_opac, d_color = _reduce_entries(tape.tile_ids, m, *e)
    else:
        d_mean, d_conic, d_opac, d_color = _reference_blend_backward(tape, out.image, dL_dimage)

    n = len(splats)
    full = lambda arr: np.zeros((n,) + arr.shape[1:])  # noqa: E731
    dm, dc, do, dcol = full(d_mean), full(d_conic), full(d_opac), full(d_color)
    dm[order], dc[order], do[order], dcol[order] = d_mean, d_conic, d_opac, d_color
    grads = projection_backward(splats, tape.cam, proj, dm, dc, dcol, do)
    for name, g in grads.items():
        bad = ~np.isfinite(g.reshape(n, int(np.prod(g.shape[1:])))).all(axis=1)
        if bad.any():
            s = int(np.flatnonzero(bad)[0])
            raise NonFiniteGradient(f"non-finite {name} gradient for splat {s}")
    return grads, dm


def image_loss_grad(rendered, target, lambda_img: float) -> np.ndarray:
    rendered = np.asarray(rendered, dtype=np.float64)
    g_l1 = np.sign(rendered - target) / rendered.size
    return (1 - lambda_img) * g_l1 - lambda_img * ssim_grad(rendered, target)


def normal_consistency_grad(splats: SplatSet, mesh: TriMesh) -> dict:
    """Argmin-scale axis is held fixed; normals are compared up to sign."""
    grads = _zero_grads(splats)
    t = np.flatnonzero(splats.tight)
    if len(t) == 0:
        return grads
    sub = splats.subset(t)
    normals, axis = splat_normals(sub)
    nf = mesh.normals[sub.bound_face]
    sign = np.sign(np.sum(normals * nf, axis=1))
    dR = np.zeros((len(t), 3, 3))
    dR[np.arange(len(t)), :, axis] = -sign[:, None] * nf
    grads["rotations"][t] = quat_to_rotmat_vjp(sub.rotations, dR)
    return grads


def scale_grad(splats: SplatSet, lambda_min: float, lambda_max: float, rho: float) -> dict:
    """Subgradient 0 is used at the ``|max - rho|`` kink."""
    grads = _zero_grads(splats)
    t = np.flatnonzero(splats.tight)
    if len(t) == 0:
        return grads
    s = np.exp(splats.raw_scales[t])
    kmin, kmax = np.argmin(s, axis=1), np.argmax(s, axis=1)
    rows = np.arange(len(t))
    g = np.zeros((len(t), 3))
    g[rows, kmin] += lambda_min * s[rows, kmin]
    g[rows, kmax] += lambda_max * np.sign(s[rows, kmax] - rho) * s[rows, kmax]
    grads["raw_scales"][t] = g
    return grads


def projection_grad(splats: SplatSet, mesh: TriMesh) -> dict:
    """Gradient of the summed distances to bound faces: ``(p - s) / |p - s|``."""
    grads = _zero_grads(splats)
    t = np.flatnonzero(splats.tight)
    if len(t) == 0:
        return grads
    q, d = surface_offsets(splats, mesh)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(d[:, None] > 0, (splats.positions[t] - q) / d[:, None], 0.0)
    grads["positions"][t] = g
    return grads


def backward_losses(splats: SplatSet, mesh: TriMesh, weights: LossWeights) -> dict:
    """Gradients of the weighted regularizers (tight splats only)."""
    grads = _zero_grads(splats)
    for part, w in ((normal_consistency_grad(splats, mesh), weights.lambda_nc),
                    (scale_grad(splats, weights.lambda_min, weights.lambda_max, weights.rho), 1.0),
                    (projection_grad(splats, mesh), weights.lambda_proj)):
        for name in grads:
            grads[name] += w * part[name]
    return grads


# ---------------------------------------------------------------------------
# finite-difference checker


@dataclass
class GradScene:
    splats: SplatSet
    mesh: TriMesh
    cam: object
    target: np.ndarray
    depth_map: np.ndarray | None
    weights: LossWeights = field(default_factory=LossWeights)


TERMS = ("L_img", "L_nc", "L_scale", "L_proj", "total")


def _event_signature(out: RenderOutput, target) -> bytes:
    """Fingerprint of every discrete choice the renderer and losses made.

    Two probes with equal signatures lie on the same smooth piece of the
    loss: same sort order, same per-pixel set of splats above the alpha
    threshold, same clamp states, same termination points, same L1 signs.
    """
    tape = out.tape
    proj, order = tape.proj, tape.order
    H, W = out.image.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W]
    px, py = xs.ravel() + 0.5, ys.ravel() + 0.5
    parts = [order.tobytes(), tape.n_proc.tobytes(), proj._color_clamped[order].tobytes(),
             np.sign(out.image - target).astype(np.int8).tobytes()]
    if len(order):
        m = proj.means2d[order]
        cn = proj.conics[order]
        dx, dy = px[None] - m[:, :1], py[None] - m[:, 1:]
        power = -0.5 * (cn[:, :1] * dx * dx + cn[:, 2:] * dy * dy) - cn[:, 1:2] * dx * dy
        raw = proj.opacities[order][:, None] * np.exp(power)
        parts += [np.packbits(raw >= ALPHA_MIN).tobytes(), np.packbits(raw >= ALPHA_MAX).tobytes()]
    return b"".join(parts)


def _term_parts(scene: GradScene, splats: SplatSet, terms, backend=None):
    """Per-element loss contributions for each term, plus the event signature.

    Every term's exact sum equals its loss up to an additive constant, so a
    central difference can be formed with a single rounding.
    """
    w = scene.weights
    parts = {}
    sig = b""
    reg = {}
    if {"L_nc", "total"} & set(terms):
        reg["L_nc"] = normal_consistency_terms(splats, scene.mesh)
    if {"L_scale", "total"} & set(terms):
        reg["L_scale"] = scale_terms(splats, w.lambda_min, w.lambda_max, w.rho)
    if {"L_proj", "total"} & set(terms) and splats.tight.any():
        reg["L_proj"] = surface_offsets(splats, scene.mesh)[1]
    reg.setdefault("L_proj", np.zeros(0))
    img = None
    if {"L_img", "total"} & set(terms):
        out = render(splats, scene.cam, scene.depth_map, backend=backend, update_visibility=False)
        sig = _event_signature(out, scene.target)
        img = image_loss_terms(out.image, scene.target, w.lambda_img)
    for term in terms:
        if term == "L_img":
            parts[term] = img
        elif term == "total":
            parts[term] = img + [w.lambda_nc * reg["L_nc"], reg["L_scale"], w.lambda_proj * reg["L_proj"]]
        else:
            parts[term] = [reg[term]]
    return parts, sig


def _term_value(scene: GradScene, splats: SplatSet, term: str, backend=None) -> float:
    w = scene.weights
    if term == "L_nc":
        return normal_consistency_loss(splats, scene.mesh)
    if term == "L_scale":
        return scale_loss(splats, w.lambda_min, w.lambda_max, w.rho)
    if term == "L_proj":
        return projection_loss(splats, scene.mesh)
    out = render(splats, scene.cam, scene.depth_map, backend=backend, update_visibility=False)
    if term == "L_img":
        return image_loss(out.image, scene.target, w.lambda_img)
    return total_loss(out.image, scene.target, splats, scene.mesh, w)[0]


def analytic_term_grads(scene: GradScene, term: str, backend=None) -> dict:
    w = scene.weights
    splats = scene.splats
    if term == "L_nc":
        return normal_consistency_grad(splats, scene.mesh)
    if term == "L_scale":
        return scale_grad(splats, w.lambda_min, w.lambda_max, w.rho)
    if term == "L_proj":
        return projection_grad(splats, scene.mesh)
    out = render(splats, scene.cam, scene.depth_map, backend=backend, update_visibility=False)
    grads, _ = backward_render(splats, out, image_loss_grad(out.image, scene.target, w.lambda_img))
    if term == "total":
        reg = backward_losses(splats, scene.mesh, w)
        for name in grads:
            grads[name] = grads[name] + reg[name]
    return grads


@dataclass
class GradReport:
    rows: list
    rel_tol: float
    abs_floor: float

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.rows)

    def failures(self):
        return [r for r in self.rows if not r["passed"]]

    def to_json(self) -> str:
        return json.dumps({"passed": self.passed, "rel_tol": self.rel_tol, "abs_floor": self.abs_floor,
                           "rows": self.rows}, indent=2)

    def table(self) -> str:
        lines = [f"{'term':<8} {'parameter':<12} {'n':>6} {'max_rel_err':>12} {'max_abs_err':>12} {'shrunk':>6}  status"]
        for r in self.rows:
            lines.append(f"{r['term']:<8} {r['param']:<12} {r['count']:>6} {r['max_rel_err']:>12.3e} "
                         f"{r['max_abs_err']:>12.3e} {r['shrunk_steps']:>6}  {'ok' if r['passed'] else 'FAIL'}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def compare(analytic: float, numeric: float, rel_tol: float, abs_floor: float):
    """Relative error where either value exceeds the floor, absolute otherwise."""
    err = abs(analytic - numeric)
    scale = max(abs(analytic), abs(numeric))
    if scale > abs_floor:
        rel = err / scale
        return rel, err, rel < rel_tol
    return 0.0, err, err <= abs_floor


def _exact_difference(plus: list, minus: list) -> float:
    return math.fsum(np.concatenate([a.ravel() for a in plus] + [-a.ravel() for a in minus]))


def _central_differences(scene, pname, k, terms, h, backend, max_shrink=3):
    """Central differences of every term at element ``k``.

    ``h`` shrinks tenfold while the two probes straddle a discontinuity.
    Returns ``({term: value} or None, shrinks)``.
    """
    for step in range(max_shrink + 1):
        probe = scene.splats.copy()
        arr = getattr(probe, pname).reshape(-1)
        x0 = arr[k]
        arr[k] = x0 + h
        pp, sp = _term_parts(scene, probe, terms, backend)
        arr[k] = x0 - h
        pm, sm = _term_parts(scene, probe, terms, backend)
        if sp == sm:
            return {t: _exact_difference(pp[t], pm[t]) / (2 * h) for t in terms}, step
        h /= 10.0
    return None, max_shrink


def check_gradients(scene: GradScene, terms=TERMS, h: float = 1e-5, rel_tol: float = 1e-4,
                    abs_floor: float = 1e-8, backend=None, corrupt: str | None = None) -> GradReport:
    """Central finite differences against the analytic gradients, every parameter element.

    ``corrupt`` names a parameter class whose analytic gradient is perturbed on
    purpose (used to show the harness catches errors).
    """
    terms = tuple(terms)
    analytic = {}
    for term in terms:
        grads = analytic_term_grads(scene, term, backend)
        if corrupt is not None:
            grads[corrupt] = grads[corrupt] * 1.01 + 1e-3
        analytic[term] = grads
    rows = []
    for pname in PARAM_CLASSES:
        size = getattr(scene.splats, pname).size
        acc = {t: {"max_rel": 0.0, "max_abs": 0.0, "worst": None, "ok": True} for t in terms}
        shrunk = nonsmooth = 0
        for k in range(size):
            numeric, steps = _central_differences(scene, pname, k, terms, h, backend)
            shrunk += steps > 0
            if numeric is None:
                nonsmooth += 1
                continue
            for t in terms:
                rel, err, passed = compare(float(analytic[t][pname].reshape(-1)[k]), numeric[t], rel_tol, abs_floor)
                a = acc[t]
                if rel > a["max_rel"]:
                    a["max_rel"], a["worst"] = rel, k
                a["max_abs"] = max(a["max_abs"], err)
                a["ok"] &= passed
        for t in terms:
            a = acc[t]
            rows.append({"term": t, "param": pname, "count": int(size), "max_rel_err": a["max_rel"],
                         "max_abs_err": a["max_abs"], "worst_index": a["worst"], "shrunk_steps": int(shrunk),
                         "nonsmooth": int(nonsmooth), "passed": bool(a["ok"] and nonsmooth == 0)})
    rows.sort(key=lambda r: (TERMS.index(r["term"]) if r["term"] in TERMS else 99, PARAM_CLASSES.index(r["param"])))
    return GradReport(rows, rel_tol, abs_floor)


def gradient_fixture(n_splats: int = 50, size: int = 48, seed: int = 0, sh_degree: int = 3,
                     weights: LossWeights | None = None) -> GradScene:
    """Random splats in front of a two-triangle backdrop; a fifth are tight.

    Tight splats sit 2e-3..8e-3 off the backdrop so the distance term is
    differentiable; a few splats hide behind it to exercise the mask.
    """
    from .core import Camera
    from .mesh import render_depth
    rng = np.random.default_rng(seed)
    n = n_splats
    pos = rng.uniform([-1.0, -1.0, -0.6], [1.0, 1.0, 0.6], (n, 3))
    n_tight = max(1, n // 5)
    pos[:n_tight, 2] = 1.5 - rng.uniform(2e-3, 8e-3, n_tight)
    pos[n_tight:n_tight + 3, 2] = 2.0
    s = SplatSet.create(pos, np.exp(rng.uniform(-2.6, -1.4, (n, 3))), rng.uniform(0.2, 0.8, n),
                        rotations=rng.normal(size=(n, 4)), sh_degree=sh_degree)
    s.sh[:] = rng.normal(scale=0.3, size=s.sh.shape)
    s.sh[:, 0, :] += 0.8
    s.rotations[:] /= np.linalg.norm(s.rotations, axis=1, keepdims=True)
    V = np.array([[-3, -3, 1.5], [3, -3, 1.5], [3, 3, 1.5], [-3, 3, 1.5]], float)
    mesh = TriMesh(V, [[0, 1, 2], [0, 2, 3]])
    s.bound_face[:n_tight] = np.where(pos[:n_tight, 0] > pos[:n_tight, 1], 0, 1)
    s.tight[:n_tight] = True
    f = 0.9 * size
    cam = Camera.look_at([0.3, -0.2, -4.0], [0, 0, 0], [0, -1, 0], f, f, size, size)
    target = rng.uniform(0.0, 1.0, (size, size, 3))
    return GradScene(s, mesh, cam, target, render_depth(mesh, cam), weights or LossWeights())
