"""Optimization loop: Adam updates, class-specific densification, occlusion
pruning, classification refresh, evaluation and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .gradients import GradStore, backward_losses, backward_render, image_loss_grad
from .losses import LossWeights, psnr, ssim, total_loss
from .mesh import MeshBvh, TriMesh
from .renderer import occlusion_mask, render
from .scenes import Dataset, depth_maps, linear_to_srgb, save_checkpoint, load_checkpoint
from .core import normalize_quat, quat_to_rotmat, sh_count
from .splats import SplatSet, classify_splats, init_from_mesh

log = logging.getLogger(__name__)

SPLIT_FACTOR = 1.6
METRIC_COLUMNS = ("iter", "L_img", "L_nc", "L_scale", "L_proj", "total", "n_splats", "n_tight")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    total_iters: int = 30000
    prune_period: int = 500
    densify_interval: int = 100
    densify_start: int = 500
    densify_end: int = 15000
    densify_grad_threshold: float = 2e-4
    opacity_prune_threshold: float = 0.005
    percent_dense: float = 0.01
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    delta: float = 0.01
    seed: int = 0
    sh_degree: int = 3
    init_opacity: float = 0.1
    random_init_points: int = 0
    max_splats: int = 0
    mesh_occlusion: bool = True
    pruning: bool = True
    num_threads: int = 1
    checkpoint_every: int = 0
    eval_every: int = 0
    backend: str | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.total_iters > 0 and not (0 <= self.densify_start < self.densify_end <= self.total_iters):
            raise ValueError("need densify_start < densify_end <= total_iters")
        for name in ("lr_position", "lr_position_final", "lr_sh", "lr_opacity", "lr_scale", "lr_rotation"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.prune_period < 0 or self.densify_interval <= 0:
            raise ValueError("prune_period must be >= 0 and densify_interval > 0")
        if self.num_threads < 1:
            raise ValueError("num_threads must be >= 1")

    def with_iters(self, n: int) -> "TrainConfig":
        """Copy with ``total_iters = n``; the densification window is scaled to fit."""
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if self.total_iters > 0 and n < self.total_iters:
            frac = n / self.total_iters
            d["densify_start"] = int(self.densify_start * frac)
            d["densify_end"] = max(d["densify_start"] + 1, int(self.densify_end * frac))
        d["total_iters"] = n
        if n > 0:
            d["densify_end"] = min(d["densify_end"], n)
            d["densify_start"] = min(d["densify_start"], d["densify_end"] - 1)
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int):
        return cls(np.zeros(n), np.zeros(n, np.int64))

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.grad_accum / np.maximum(self.count, 1), 0.0)

    def reset(self, n: int | None = None):
        n = len(self.count) if n is None else n
        self.grad_accum, self.count = np.zeros(n), np.zeros(n, np.int64)


@dataclass
class Adam:
    """First/second-moment state per parameter array, indexed by splat."""

    m: dict
    v: dict
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-15

    @classmethod
    def zeros_like(cls, splats: SplatSet):
        p = splats.get_params()
        return cls({k: np.zeros_like(a) for k, a in p.items()}, {k: np.zeros_like(a) for k, a in p.items()})

    def update(self, params: dict, grads: dict, lrs: dict):
        self.step += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.step, 1 - b2 ** self.step
        for name, p in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lrs[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def select(self, idx):
        self.m = {k: a[idx] for k, a in self.m.items()}
        self.v = {k: a[idx] for k, a in self.v.items()}

    def extend(self, n_new: int):
        for d in (self.m, self.v):
            for k, a in d.items():
                d[k] = np.concatenate([a, np.zeros((n_new,) + a.shape[1:])])


@dataclass
class TrainState:
    splats: SplatSet
    mesh: TriMesh
    bvh: MeshBvh
    adam: Adam
    stats: DensifyStats
    rng: np.random.Generator
    extent: float
    iteration: int = 0


def make_state(config: TrainConfig, mesh: TriMesh, extent: float, splats: SplatSet | None = None) -> TrainState:
    rng = np.random.default_rng(config.seed)
    bvh = MeshBvh(mesh)
    if splats is None:
        splats = init_from_mesh(mesh, config.sh_degree, config.init_opacity)
        if config.random_init_points > 0:
            splats = splats.concat(random_splats(mesh, config.random_init_points, config.sh_degree, rng,
                                                 config.init_opacity))
    classify_splats(splats, mesh, bvh, config.weights.d_th)
    return TrainState(splats, mesh, bvh, Adam.zeros_like(splats), DensifyStats.zeros(len(splats)), rng, extent)


def random_splats(mesh: TriMesh, count: int, sh_degree: int, rng, opacity: float) -> SplatSet:
    """Isotropic splats uniform in the mesh bounding box grown by half its size."""
    lo, hi = mesh.bounds()
    pad = 0.5 * (hi - lo)
    pos = rng.uniform(lo - pad, hi + pad, (count, 3))
    scale = 0.02 * float(np.linalg.norm(hi - lo))
    colors = rng.uniform(0.0, 1.0, (count, 3))
    s = SplatSet.create(pos, np.full((count, 3), scale), np.full(count, opacity), colors=colors,
                        sh_degree=sh_degree)
    return s


def learning_rates(config: TrainConfig, state: TrainState) -> dict:
    t = min(state.iteration / max(config.total_iters, 1), 1.0)
    lr_pos = math.exp((1 - t) * math.log(config.lr_position) + t * math.log(config.lr_position_final))
    K = state.splats.sh.shape[1]
    lr_sh = np.full((1, K, 1), config.lr_sh / 20.0)
    lr_sh[0, 0, :] = config.lr_sh
    return {"positions": lr_pos * state.extent, "raw_scales": config.lr_scale, "raw_opacity": config.lr_opacity,
            "rotations": config.lr_rotation, "sh": lr_sh}


def _dump(state: TrainState, dump_dir):
    if dump_dir is None:
        return None
    path = Path(dump_dir) / f"state_dump_{state.iteration:06d}.ply"
    save_checkpoint(state.splats, path)
    return path


def train_step(state: TrainState, config: TrainConfig, cam, target, depth_map, dump_dir=None) -> dict:
    """One render, loss, backward and Adam update; returns the loss breakdown."""
    s = state.splats
    out = render(s, cam, depth_map if config.mesh_occlusion else None, config.delta,
                 occlusion=config.mesh_occlusion, backend=config.backend, num_threads=config.num_threads)
    total, terms = total_loss(out.image, target, s, state.mesh, config.weights)
    if not math.isfinite(total):
        path = _dump(state, dump_dir)
        raise NonFiniteLoss(f"non-finite loss at iteration {state.iteration}" + (f"; state saved to {path}" if path else ""))
    grads, d_means2d = backward_render(s, out, image_loss_grad(out.image, target, config.weights.lambda_img))
    reg = backward_losses(s, state.mesh, config.weights)
    store = GradStore.zeros_like(s)
    store.add(grads)
    store.add(reg)
    store.check_finite()

    # screen-space gradient in NDC units, as used by the 3DGS densification rule
    rendered = out.tape.order
    g_ndc = d_means2d[rendered] * np.array([cam.width / 2.0, cam.height / 2.0])
    state.stats.grad_accum[rendered] += np.linalg.norm(g_ndc, axis=1)
    state.stats.count[rendered] += 1

    state.adam.update(s.get_params(), store.as_dict(), learning_rates(config, state))
    s.rotations[:] = normalize_quat(s.rotations)
    return terms


# ---------------------------------------------------------------------------
# densification


def sample_barycentric(rng, n: int) -> np.ndarray:
    """Uniform barycentric weights ``(n, 3)`` on a triangle."""
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    return np.stack([1 - u - v, u, v], axis=1)


def sample_on_faces(mesh: TriMesh, faces, rng) -> np.ndarray:
    w = sample_barycentric(rng, len(faces))
    tri = mesh.triangles()[faces]
    return np.einsum("nk,nkd->nd", w, tri)


def _sample_own_gaussian(s: SplatSet, rng) -> np.ndarray:
    z = rng.normal(size=(len(s), 3)) * s.scales
    return s.positions + np.einsum("nij,nj->ni", quat_to_rotmat(s.rotations), z)


def densify(state: TrainState, config: TrainConfig) -> dict:
    """Clone or split splats whose mean screen-space gradient reaches the threshold."""
    s = state.splats
    n = len(s)
    mean = state.stats.mean()
    cand = np.flatnonzero((mean >= config.densify_grad_threshold) & (state.stats.count > 0))
    large = s.scales.max(axis=1) > config.percent_dense * state.extent
    if config.max_splats > 0:
        # each clone adds one splat, each split adds one net; keep the strongest
        room = max(config.max_splats - n, 0)
        if len(cand) > room:
            order = np.lexsort((cand, -mean[cand]))
            cand = np.sort(cand[order[:room]])
    info = {"cloned": 0, "split": 0}
    if len(cand) == 0:
        state.stats.reset(n)
        return info
    rng = state.rng
    tight = s.tight[cand]
    is_split = large[cand]

    clone_idx = cand[~is_split]
    clones = s.subset(clone_idx)
    t = clones.tight.copy()
    if t.any():
        clones.positions[t] = sample_on_faces(state.mesh, clones.bound_face[t], rng)
    if (~t).any():
        loose = clones.subset(~t)
        clones.positions[~t] = _sample_own_gaussian(loose, rng)

    split_idx = cand[is_split]
    parents = s.subset(np.repeat(split_idx, 2))
    t = parents.tight.copy()
    new_pos = parents.positions.copy()
    if t.any():
        new_pos[t] = sample_on_faces(state.mesh, parents.bound_face[t], rng)
    if (~t).any():
        new_pos[~t] = _sample_own_gaussian(parents.subset(~t), rng)
    parents.positions = new_pos
    parents.raw_scales = parents.raw_scales - math.log(SPLIT_FACTOR)

    keep = np.ones(n, bool)
    keep[split_idx] = False
    keep_idx = np.flatnonzero(keep)
    state.splats = s.subset(keep_idx).concat(clones).concat(parents)
    state.adam.select(keep_idx)
    state.adam.extend(len(clones) + len(parents))
    state.stats.reset(len(state.splats))
    classify_splats(state.splats, state.mesh, state.bvh, config.weights.d_th)
    info.update(cloned=int(len(clone_idx)), split=int(len(split_idx)), tight=int(tight.sum()))
    return info


# ---------------------------------------------------------------------------
# pruning


def occluded_in_all_views(splats: SplatSet, cameras, depths, delta: float) -> np.ndarray:
    """True for splats masked by the mesh in every one of the given views."""
    hidden = np.ones(len(splats), bool)
    for cam, depth in zip(cameras, depths):
        hidden &= occlusion_mask(splats, depth, cam, delta)
        if not hidden.any():
            break
    return hidden


def prune(state: TrainState, config: TrainConfig, cameras, depths) -> dict:
    """Remove splats behind the mesh in all views, plus near-transparent ones."""
    s = state.splats
    behind = np.zeros(len(s), bool)
    if config.mesh_occlusion and len(cameras):
        behind = occluded_in_all_views(s, cameras, depths, config.delta) & ~s.ever_visible
    faint = s.opacities < config.opacity_prune_threshold
    remove = behind | faint
    keep = np.flatnonzero(~remove)
    if remove.any():
        state.splats = s.subset(keep)
        state.adam.select(keep)
        state.stats.grad_accum = state.stats.grad_accum[keep]
        state.stats.count = state.stats.count[keep]
    state.splats.ever_visible[:] = False
    return {"behind": int(behind.sum()), "faint": int((faint & ~behind).sum()), "removed": int(remove.sum())}


# ---------------------------------------------------------------------------
# evaluation and the loop


def evaluate(splats: SplatSet, dataset: Dataset, indices, depths, config: TrainConfig) -> dict:
    """Mean PSNR/SSIM over the given frames, on sRGB-encoded images."""
    ps, ss = [], []
    for i in indices:
        cam = dataset.frames[i].camera
        out = render(splats, cam, depths[i] if config.mesh_occlusion else None, config.delta,
                     occlusion=config.mesh_occlusion, backend=config.backend, num_threads=config.num_threads,
                     update_visibility=False)
        a, b = linear_to_srgb(out.image), linear_to_srgb(dataset.image(i))
        ps.append(psnr(a, b))
        ss.append(ssim(a, b))
    if not ps:
        return {"psnr": float("nan"), "ssim": float("nan"), "count": 0}
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "count": len(ps)}


@dataclass
class TrainResult:
    splats: SplatSet
    metrics: list
    evals: list
    events: list


def train(config: TrainConfig, dataset: Dataset, mesh: TriMesh, out_dir=None, resume=None,
          depth_cache=None, progress=None) -> TrainResult:
    """Full schedule; writes ``metrics.csv`` and checkpoints when ``out_dir`` is given."""
    train_idx = dataset.indices("train")
    if not train_idx:
        raise ValueError("dataset has no training views")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    init = load_checkpoint(resume) if resume is not None else None
    if init is not None and init.sh.shape[1] != sh_count(config.sh_degree):
        raise ValueError("resume checkpoint SH degree differs from config")
    state = make_state(config, mesh, dataset.extent, init)
    depths = depth_maps(dataset, mesh, depth_cache)
    train_cams = [dataset.frames[i].camera for i in train_idx]
    train_depths = [depths[i] for i in train_idx]
    test_idx = dataset.indices("test")

    metrics, evals, events = [], [], []
    writer = fh = None
    if out_dir is not None:
        fh = open(out_dir / "metrics.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
    try:
        queue = []
        for it in range(1, config.total_iters + 1):
            state.iteration = it
            if not queue:
                queue = list(state.rng.permutation(train_idx))
            i = int(queue.pop())
            cam = dataset.frames[i].camera
            terms = train_step(state, config, cam, dataset.image(i), depths[i], out_dir)
            row = [it] + [terms[k] for k in METRIC_COLUMNS[1:6]] + [len(state.splats), int(state.splats.tight.sum())]
            metrics.append(row)
            if writer is not None:
                writer.writerow([it] + [repr(float(v)) for v in row[1:6]] + row[6:])

            if config.densify_start < it <= config.densify_end and it % config.densify_interval == 0:
                info = densify(state, config)
                events.append(("densify", it, info))
            elif it % config.densify_interval == 0:
                classify_splats(state.splats, mesh, state.bvh, config.weights.d_th)
            if config.pruning and config.prune_period and it % config.prune_period == 0:
                info = prune(state, config, train_cams, train_depths)
                events.append(("prune", it, info))
            if config.eval_every and it % config.eval_every == 0 and test_idx:
                ev = evaluate(state.splats, dataset, test_idx, depths, config)
                ev["iter"] = it
                evals.append(ev)
                log.info("iter %d: held-out PSNR %.2f dB, %d splats", it, ev["psnr"], len(state.splats))
            if out_dir is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
                save_checkpoint(state.splats, out_dir / f"checkpoint_{it:06d}.ply")
            if progress is not None:
                progress(it, terms, state)
    finally:
        if fh is not None:
            fh.close()
    classify_splats(state.splats, mesh, state.bvh, config.weights.d_th)
    if out_dir is not None:
        save_checkpoint(state.splats, out_dir / "final.ply")
    return TrainResult(state.splats, metrics, evals, events)


def drop_loose(splats: SplatSet) -> SplatSet:
    return splats.subset(splats.tight)


__all__ = ["TrainConfig", "DensifyStats", "Adam", "TrainState", "make_state", "train_step", "densify",
           "prune", "train", "evaluate", "sample_barycentric", "occluded_in_all_views", "drop_loose",
           "NonFiniteLoss", "TrainResult"]
