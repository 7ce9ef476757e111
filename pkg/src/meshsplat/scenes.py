"""Datasets, images, checkpoints and synthetic scenes.

Dataset layout on disk::

    scene/
      transforms.json
      images/*.png        8-bit sRGB
      mesh.ply
      reference.ply       (synthetic scenes only)

``transforms.json`` holds shared intrinsics (``w``, ``h``, ``fl_x``, ``fl_y``,
``cx``, ``cy``), a ``mesh`` path, an optional ``camera_convention``
(``"opengl"`` by default, or ``"opencv"``) and a ``frames`` list of
``{"file_path", "transform_matrix", ["split"]}`` with camera-to-world
matrices.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Camera, sh_count, sh_degree_from_count
from .mesh import TriMesh, load_mesh, render_depth, save_mesh
from .ply import PlyError, read_ply, write_ply
from .renderer import render
from .splats import SplatSet, logit, rotmats_to_quats, _frame_from_normal
from .core import rgb_to_sh_dc

log = logging.getLogger(__name__)

TEST_EVERY = 8
GL_TO_CV = np.diag([1.0, -1.0, -1.0])


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# images


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def quantize(linear) -> np.ndarray:
    """Linear ``[0, 1]`` image to 8-bit sRGB codes."""
    return np.round(linear_to_srgb(linear) * 255.0).astype(np.uint8)


def dequantize(codes) -> np.ndarray:
    return srgb_to_linear(np.asarray(codes, dtype=np.float64) / 255.0)


def write_image(path, linear):
    Image.fromarray(quantize(linear), mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    """Decode an sRGB PNG to a linear float image ``(H, W, 3)``."""
    with Image.open(path) as im:
        codes = np.asarray(im.convert("RGB"))
    return dequantize(codes)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Frame:
    camera: Camera
    image_path: Path
    split: str
    name: str


@dataclass
class Dataset:
    root: Path
    frames: list
    extent: float
    mesh_path: Path | None
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.frames)

    def indices(self, split: str) -> list:
        return [i for i, f in enumerate(self.frames) if f.split == split]

    def image(self, i: int) -> np.ndarray:
        if i not in self._cache:
            img = read_image(self.frames[i].image_path)
            cam = self.frames[i].camera
            if img.shape[:2] != (cam.height, cam.width):
                raise DatasetError(f"{self.frames[i].image_path}: size {img.shape[1]}x{img.shape[0]} "
                                   f"does not match {cam.width}x{cam.height}")
            self._cache[i] = img
        return self._cache[i]

    def load_mesh(self) -> TriMesh:
        if self.mesh_path is None:
            raise DatasetError("dataset names no mesh")
        return load_mesh(self.mesh_path)


def camera_from_c2w(c2w, fx, fy, cx, cy, width, height, convention="opengl") -> Camera:
    c2w = np.asarray(c2w, dtype=np.float64)
    if c2w.shape not in ((4, 4), (3, 4)):
        raise DatasetError(f"transform_matrix has shape {c2w.shape}")
    R, c = c2w[:3, :3], c2w[:3, 3]
    if abs(np.linalg.det(R)) < 1e-9:
        raise DatasetError("camera-to-world matrix is not invertible")
    if convention == "opengl":
        R = R @ GL_TO_CV
    elif convention != "opencv":
        raise DatasetError(f"unknown camera_convention {convention!r}")
    try:
        return Camera(fx, fy, cx, cy, width, height, R.T, -R.T @ c)
    except ValueError as exc:
        raise DatasetError(str(exc)) from None


def camera_to_c2w(cam: Camera, convention="opengl") -> np.ndarray:
    R = cam.R_cw.T
    if convention == "opengl":
        R = R @ GL_TO_CV
    out = np.eye(4)
    out[:3, :3], out[:3, 3] = R, cam.center
    return out


def scene_extent(cameras) -> float:
    """1.1 times the largest camera distance from the mean camera center."""
    centers = np.array([c.center for c in cameras])
    if len(centers) == 0:
        return 1.0
    r = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    return 1.1 * r if r > 0 else 1.0


def load_dataset(root, require_images: bool = True) -> Dataset:
    """Read a dataset directory (or a transforms JSON path).

    Frames are ordered by file name; without explicit ``split`` fields every
    eighth frame, starting with the first, is a test frame.
    """
    root = Path(root)
    tf = root / "transforms.json"
    if root.is_file():
        tf, root = root, root.parent
    if not tf.is_file():
        raise DatasetError(f"{tf} not found")
    try:
        meta = json.loads(tf.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{tf}: {exc}") from None
    if not isinstance(meta, dict) or not isinstance(meta.get("frames", []), list):
        raise DatasetError(f"{tf}: expected an object with a 'frames' list")
    convention = meta.get("camera_convention", "opengl")
    raw = meta.get("frames", [])
    if not all(isinstance(f, dict) and "file_path" in f for f in raw):
        raise DatasetError(f"{tf}: every frame needs a file_path")
    raw = sorted(raw, key=lambda f: f["file_path"])
    frames = []
    size = None
    for k, fr in enumerate(raw):
        w, h = int(fr.get("w", meta.get("w", 0))), int(fr.get("h", meta.get("h", 0)))
        if size is not None and (w, h) != size:
            raise DatasetError(f"frame {fr['file_path']}: size {w}x{h} differs from {size[0]}x{size[1]}")
        size = (w, h)
        fx = float(fr.get("fl_x", meta.get("fl_x", 0)))
        fy = float(fr.get("fl_y", meta.get("fl_y", fx)))
        cx = float(fr.get("cx", meta.get("cx", w / 2)))
        cy = float(fr.get("cy", meta.get("cy", h / 2)))
        if "transform_matrix" not in fr:
            raise DatasetError(f"frame {fr['file_path']}: missing transform_matrix")
        cam = camera_from_c2w(fr["transform_matrix"], fx, fy, cx, cy, w, h, convention)
        path = root / fr["file_path"]
        if not path.suffix:
            path = path.with_suffix(".png")
        if require_images and not path.is_file():
            raise DatasetError(f"image {path} not found")
        split = fr.get("split") or ("test" if k % TEST_EVERY == 0 else "train")
        if split not in ("train", "test"):
            raise DatasetError(f"frame {fr['file_path']}: split must be train or test")
        frames.append(Frame(cam, path, split, Path(fr["file_path"]).stem))
    mesh_path = root / meta["mesh"] if meta.get("mesh") else None
    if mesh_path is not None and not mesh_path.is_file():
        raise DatasetError(f"mesh {mesh_path} not found")
    extent = float(meta["scene_extent"]) if "scene_extent" in meta else scene_extent([f.camera for f in frames])
    return Dataset(root, frames, extent, mesh_path)


def write_transforms(root, cameras, names, mesh_name="mesh.ply", splits=None):
    root = Path(root)
    cam0 = cameras[0] if cameras else None
    meta = {"camera_convention": "opengl"}
    if cam0 is not None:
        meta.update({"w": cam0.width, "h": cam0.height, "fl_x": cam0.fx, "fl_y": cam0.fy,
                     "cx": cam0.cx, "cy": cam0.cy})
    meta["mesh"] = mesh_name
    meta["frames"] = []
    for k, (cam, name) in enumerate(zip(cameras, names)):
        fr = {"file_path": f"images/{name}.png", "transform_matrix": camera_to_c2w(cam).tolist()}
        if splits is not None:
            fr["split"] = splits[k]
        meta["frames"].append(fr)
    (root / "transforms.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")


def depth_maps(dataset: Dataset, mesh: TriMesh, cache_dir=None) -> list:
    """Mesh depth per frame, optionally cached as ``.npy`` keyed by frame name."""
    out = []
    for f in dataset.frames:
        path = None if cache_dir is None else Path(cache_dir) / f"{f.name}.npy"
        if path is not None and path.is_file():
            out.append(np.load(path))
            continue
        d = render_depth(mesh, f.camera)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path, d)
        out.append(d)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dtype(sh_degree: int) -> np.dtype:
    """Vertex layout: 3DGS properties as doubles plus ``bound_face`` and ``splat_class``."""
    n_rest = 3 * (sh_count(sh_degree) - 1)
    names = (["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] + [f"f_rest_{i}" for i in range(n_rest)]
             + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])
    return np.dtype([(n, "<f8") for n in names] + [("bound_face", "<i4"), ("splat_class", "u1")])


def save_checkpoint(splats: SplatSet, path):
    n, K = len(splats), splats.sh.shape[1]
    rec = np.empty(n, dtype=checkpoint_dtype(splats.sh_degree))
    for a, name in enumerate("xyz"):
        rec[name] = splats.positions[:, a]
    for c in range(3):
        rec[f"f_dc_{c}"] = splats.sh[:, 0, c]
    # channel-major like the 3DGS exporter: all R coefficients, then G, then B
    rest = splats.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * (splats.sh.shape[1] - 1))
    for i in range(3 * (K - 1)):
        rec[f"f_rest_{i}"] = rest[:, i]
    rec["opacity"] = splats.raw_opacity
    for a in range(3):
        rec[f"scale_{a}"] = splats.raw_scales[:, a]
    for a in range(4):
        rec[f"rot_{a}"] = splats.rotations[:, a]
    rec["bound_face"] = splats.bound_face
    rec["splat_class"] = splats.tight
    write_ply(path, [("vertex", rec)])


def load_checkpoint(path) -> SplatSet:
    """Read a checkpoint or a vanilla 3DGS PLY (missing binding loads as Loose, unbound)."""
    try:
        data = read_ply(path)
    except (PlyError, OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    v = data.get("vertex")
    if v is None or not isinstance(v, np.ndarray) or v.dtype.names is None:
        raise CheckpointError(f"{path}: no vertex element")
    names = set(v.dtype.names)
    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
                "rot_0", "rot_1", "rot_2", "rot_3"]
    missing = [r for r in required if r not in names]
    if missing:
        raise CheckpointError(f"{path}: missing properties {missing}")
    n_rest = sum(1 for s in names if s.startswith("f_rest_"))
    if n_rest % 3:
        raise CheckpointError(f"{path}: {n_rest} f_rest properties is not a multiple of 3")
    try:
        sh_degree_from_count(n_rest // 3 + 1)
    except ValueError:
        raise CheckpointError(f"{path}: {n_rest} f_rest properties match no SH degree") from None
    if any(f"f_rest_{i}" not in names for i in range(n_rest)):
        raise CheckpointError(f"{path}: f_rest properties are not contiguous")
    n, K = len(v), n_rest // 3 + 1
    col = lambda name: np.asarray(v[name], dtype=np.float64)  # noqa: E731
    sh = np.zeros((n, K, 3))
    sh[:, 0, :] = np.stack([col(f"f_dc_{c}") for c in range(3)], axis=1)
    if K > 1:
        rest = np.stack([col(f"f_rest_{i}") for i in range(n_rest)], axis=1)
        sh[:, 1:, :] = rest.reshape(n, 3, K - 1).transpose(0, 2, 1)
    bound = np.asarray(v["bound_face"], np.int64) if "bound_face" in names else -np.ones(n, np.int64)
    tight = np.asarray(v["splat_class"]) == 1 if "splat_class" in names else np.zeros(n, bool)
    try:
        return SplatSet(
            positions=np.stack([col("x"), col("y"), col("z")], axis=1),
            raw_scales=np.stack([col(f"scale_{a}") for a in range(3)], axis=1),
            raw_opacity=col("opacity"),
            rotations=np.stack([col(f"rot_{a}") for a in range(4)], axis=1),
            sh=sh, bound_face=bound, tight=tight, ever_visible=np.zeros(n, bool),
        )
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SceneSpec:
    kind: str = "cube"
    width: int = 64
    height: int = 64
    n_views: int = 16
    focal: float = 80.0
    ring_radius: float = 2.5
    ring_height: float = 1.25
    seed: int = 0

    KINDS = ("cube", "icosphere", "floating")


def cube_mesh(side: float = 1.0, cells: int = 4) -> TriMesh:
    """Axis-aligned cube centered at the origin, each face a ``cells x cells`` quad grid."""
    h = side / 2
    t = np.linspace(-h, h, cells + 1)
    verts, faces = [], []
    for axis in range(3):
        for sgn in (-1.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            if sgn < 0:
                u_ax, v_ax = v_ax, u_ax  # keep the winding outward
            base = len(verts)
            for a in t:
                for b in t:
                    p = np.zeros(3)
                    p[axis], p[u_ax], p[v_ax] = sgn * h, a, b
                    verts.append(p)
            m = cells + 1
            for i in range(cells):
                for j in range(cells):
                    v00, v01 = base + i * m + j, base + i * m + j + 1
                    v10, v11 = v00 + m, v01 + m
                    faces += [(v00, v10, v11), (v00, v11, v01)]
    return TriMesh(np.array(verts), np.array(faces))


def icosphere_mesh(radius: float = 0.5, subdivisions: int = 2) -> TriMesh:
    g = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, g, 0], [1, g, 0], [-1, -g, 0], [1, -g, 0], [0, -1, g], [0, 1, g],
                  [0, -1, -g], [0, 1, -g], [g, 0, -1], [g, 0, 1], [-g, 0, -1], [-g, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
    return TriMesh(v * radius, f)


def _subdivide(v, f):
    """Midpoint 1-to-4 subdivision with shared edge midpoints."""
    verts = list(v)
    mid = {}

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in mid:
            mid[key] = len(verts)
            verts.append((v[a] + v[b]) / 2)
        return mid[key]

    out = []
    for a, b, c in f:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return np.array(verts), np.array(out)


def procedural_color(p) -> np.ndarray:
    """Smooth position-dependent albedo in ``[0.15, 0.85]``."""
    p = np.asarray(p, dtype=np.float64)
    r = 0.5 + 0.35 * np.sin(4.2 * p[:, 0] + 1.4 * p[:, 2] + 0.3)
    g = 0.5 + 0.35 * np.sin(3.4 * p[:, 1] - 2.2 * p[:, 0] + 1.9)
    b = 0.5 + 0.35 * np.cos(3.8 * p[:, 2] + 1.8 * p[:, 1] - 0.4)
    return np.stack([r, g, b], axis=1)


def surface_splats(mesh: TriMesh, subdivisions: int = 1, opacity: float = 0.95) -> SplatSet:
    """Flat splats on the centroids of a subdivided copy of ``mesh``, bound to their parent faces."""
    v, f = mesh.vertices, mesh.faces
    parent = np.arange(len(f))
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
        parent = np.repeat(parent, 4)
    tri = v[f]
    centers = tri.mean(axis=1)
    edges = np.linalg.norm(tri - np.roll(tri, -1, axis=1), axis=2).mean(axis=1)
    n = mesh.normals[parent]
    R = _frame_from_normal(n, tri[:, 1] - tri[:, 0])
    tang = np.log(0.6 * edges)
    raw_scales = np.stack([tang, tang, np.full(len(f), np.log(1e-3))], axis=1)
    sh = rgb_to_sh_dc(procedural_color(centers))[:, None, :]
    m = len(f)
    return SplatSet(centers, raw_scales, np.full(m, logit(opacity)), rotmats_to_quats(R), sh,
                    parent, np.ones(m, bool), np.zeros(m, bool))


def floating_detail(center=(0.0, 0.0, 0.9), radius: float = 0.18, count: int = 40, seed: int = 7) -> SplatSet:
    """A compact, brightly colored cluster of round splats away from any surface."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pos = np.asarray(center) + d * radius * rng.uniform(0.0, 1.0, (count, 1)) ** (1 / 3)
    colors = np.tile([0.95, 0.8, 0.1], (count, 1)) * rng.uniform(0.8, 1.0, (count, 1))
    return SplatSet.create(pos, np.full((count, 3), 0.35 * radius), np.full(count, 0.9), colors=colors)


def ring_cameras(spec: SceneSpec) -> list:
    cams = []
    for k in range(spec.n_views):
        a = 2 * np.pi * k / spec.n_views
        eye = [spec.ring_radius * np.cos(a), spec.ring_radius * np.sin(a), spec.ring_height]
        cams.append(Camera.look_at(eye, [0, 0, 0], [0, 0, 1], spec.focal, spec.focal, spec.width, spec.height))
    return cams


def reference_scene(spec: SceneSpec):
    """``(mesh, reference splats)`` for a spec."""
    if spec.kind == "cube":
        mesh = cube_mesh()
        ref = surface_splats(mesh)
    elif spec.kind == "icosphere":
        mesh = icosphere_mesh()
        ref = surface_splats(mesh)
    elif spec.kind == "floating":
        mesh = cube_mesh()
        ref = surface_splats(mesh).concat(floating_detail())
    else:
        raise ValueError(f"unknown scene kind {spec.kind!r}; expected one of {SceneSpec.KINDS}")
    return mesh, ref


def make_synthetic_scene(spec: SceneSpec, out_dir) -> Path:
    """Render a reference splat set on (and off) a mesh from a camera ring and write a dataset."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    mesh, ref = reference_scene(spec)
    cams = ring_cameras(spec)
    names = [f"view_{k:03d}" for k in range(len(cams))]
    for cam, name in zip(cams, names):
        img = render(ref, cam, render_depth(mesh, cam), update_visibility=False).image
        write_image(out / "images" / f"{name}.png", img)
    save_mesh(mesh, out / "mesh.ply")
    save_checkpoint(ref, out / "reference.ply")
    write_transforms(out, cams, names)
    log.info("wrote %d views of %s scene to %s", len(cams), spec.kind, out)
    return out
