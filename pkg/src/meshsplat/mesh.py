"""Triangle meshes: storage, OBJ/PLY I/O, closest-point queries, a face BVH,
quadric-error decimation and z-buffer depth rendering."""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .core import Z_NEAR, Camera, world_to_camera
from .ply import read_ply, write_ply

log = logging.getLogger(__name__)

MIN_FACE_AREA = 1e-12

INTERIOR, EDGE, VERTEX = 0, 1, 2
REGION_NAMES = {INTERIOR: "interior", EDGE: "edge", VERTEX: "vertex"}


class MeshError(ValueError):
    pass


def _dot(a, b):
    # explicit sums keep results independent of array length (no BLAS reordering)
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def triangle_areas(vertices, faces):
    tri = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray = field(init=False)
    dropped_faces: int = field(default=0, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        length = np.linalg.norm(n, axis=1)
        if np.any(0.5 * length <= MIN_FACE_AREA):
            raise MeshError("degenerate face (area <= 1e-12)")
        self.normals = n / length[:, None] if len(n) else n.reshape(0, 3)

    @classmethod
    def from_arrays(cls, vertices, faces):
        """Build a mesh, dropping degenerate faces instead of failing."""
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise MeshError("face index out of range")
        keep = triangle_areas(vertices, faces) > MIN_FACE_AREA if len(faces) else np.zeros(0, bool)
        dropped = int((~keep).sum())
        if dropped:
            log.warning("dropped %d degenerate face(s)", dropped)
        mesh = cls(vertices, faces[keep])
        mesh.dropped_faces = dropped
        return mesh

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.faces)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def face_centroid(mesh: TriMesh, face_id: int) -> np.ndarray:
    return mesh.vertices[mesh.faces[face_id]].sum(axis=0) / 3.0


# ---------------------------------------------------------------------------
# I/O


def load_mesh(path) -> TriMesh:
    """Read an OBJ or PLY triangle mesh; polygons are fan-triangulated."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        verts, polys = _read_obj(path)
    elif suffix == ".ply":
        data = read_ply(path)
        if "vertex" not in data:
            raise MeshError(f"{path}: no vertex element")
        v = data["vertex"]
        verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
        polys = data.get("face", np.zeros((0, 3), np.int64))
        if isinstance(polys, dict):
            polys = polys.get("vertex_indices", polys.get("vertex_index"))
    else:
        raise MeshError(f"unsupported mesh format {suffix!r}")
    faces = _triangulate(polys)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MeshError(f"{path}: face index out of range")
    return TriMesh.from_arrays(verts, faces)


def _read_obj(path):
    verts, polys = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    polys.append(idx)
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from exc
    return np.array(verts, dtype=np.float64).reshape(-1, 3), polys


def _triangulate(polys):
    if isinstance(polys, np.ndarray) and polys.ndim == 2:
        if polys.shape[1] == 3:
            return polys.astype(np.int64)
        polys = list(polys)
    tris = []
    for poly in polys:
        poly = [int(i) for i in poly]
        if len(poly) < 3:
            raise MeshError("face with fewer than three vertices")
        for k in range(1, len(poly) - 1):
            tris.append((poly[0], poly[k], poly[k + 1]))
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def save_mesh(mesh: TriMesh, path, ascii: bool = False):
    path = Path(path)
    if path.suffix.lower() == ".obj":
        with open(path, "w", encoding="utf-8") as fh:
            for v in mesh.vertices:
                fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
            for f in mesh.faces + 1:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
    elif path.suffix.lower() == ".ply":
        vert = np.empty(len(mesh.vertices), dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
        vert["x"], vert["y"], vert["z"] = mesh.vertices.T
        write_ply(path, [("vertex", vert), ("face", mesh.faces)],
                  fmt="ascii" if ascii else "binary_little_endian")
    else:
        raise MeshError(f"unsupported mesh format {path.suffix!r}")


# ---------------------------------------------------------------------------
# closest point


def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangles ``abc`` to points ``p`` (all ``(N, 3)``).

    Returns ``(points, dists, regions)`` with regions coded INTERIOR/EDGE/VERTEX.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    bp = p - b
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    cp = p - c
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = ~in_a & (d3 >= 0) & (d4 <= d3)
    in_ab = ~in_a & ~in_b & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    in_c = ~in_a & ~in_b & ~in_ab & (d6 >= 0) & (d5 <= d6)
    in_ac = ~in_a & ~in_b & ~in_ab & ~in_c & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    in_bc = (~in_a & ~in_b & ~in_ab & ~in_c & ~in_ac
             & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0))
    inside = ~(in_a | in_b | in_ab | in_c | in_ac | in_bc)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in = vb * denom
        w_in = vc * denom

    q = np.where(in_a[..., None], a, 0.0)
    q = np.where(in_b[..., None], b, q)
    q = np.where(in_c[..., None], c, q)
    q = np.where(in_ab[..., None], a + t_ab[..., None] * ab, q)
    q = np.where(in_ac[..., None], a + t_ac[..., None] * ac, q)
    q = np.where(in_bc[..., None], b + t_bc[..., None] * (c - b), q)
    q = np.where(inside[..., None], a + ab * v_in[..., None] + ac * w_in[..., None], q)

    diff = p - q
    dist = np.sqrt(_dot(diff, diff))
    region = np.where(inside, INTERIOR, np.where(in_a | in_b | in_c, VERTEX, EDGE))
    return q, dist, region


def closest_point_on_triangle(p, tri):
    """Single query: ``tri`` is ``(3, 3)``. Returns ``(point, dist, region_name)``."""
    tri = np.asarray(tri, dtype=np.float64)
    q, d, r = closest_points_on_triangles(np.asarray(p)[None], tri[0][None], tri[1][None], tri[2][None])
    return q[0], float(d[0]), REGION_NAMES[int(r[0])]


def nearest_face_linear(mesh: TriMesh, p):
    """Reference nearest-face search over every face (lowest index wins ties)."""
    tri = mesh.triangles()
    _, d, _ = closest_points_on_triangles(np.asarray(p, dtype=np.float64)[None], tri[:, 0], tri[:, 1], tri[:, 2])
    best = int(np.argmin(d))  # argmin returns the first minimum
    return best, float(d[best])


class MeshBvh:
    """Median-split AABB tree over the faces of a mesh."""

    LEAF_SIZE = 8

    def __init__(self, mesh: TriMesh):
        if mesh.n_faces == 0:
            raise MeshError("cannot build a BVH over an empty mesh")
        self.mesh = mesh
        tri = mesh.triangles()
        self._a, self._b, self._c = (np.ascontiguousarray(tri[:, k]) for k in range(3))
        lo, hi = tri.min(axis=1), tri.max(axis=1)
        cent = (lo + hi) / 2
        self.order = np.arange(mesh.n_faces)
        self.box_lo, self.box_hi, self.left, self.right, self.start, self.count = [], [], [], [], [], []
        self._build(lo, hi, cent, 0, mesh.n_faces)
        self.box_lo = np.array(self.box_lo)
        self.box_hi = np.array(self.box_hi)

    def _build(self, lo, hi, cent, begin, end):
        node = len(self.left)
        idx = self.order[begin:end]
        self.box_lo.append(lo[idx].min(axis=0))
        self.box_hi.append(hi[idx].max(axis=0))
        self.left.append(-1)
        self.right.append(-1)
        self.start.append(begin)
        self.count.append(end - begin)
        if end - begin > self.LEAF_SIZE:
            c = cent[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            perm = np.argsort(c[:, axis], kind="stable")
            self.order[begin:end] = idx[perm]
            mid = (begin + end) // 2
            self.left[node] = self._build(lo, hi, cent, begin, mid)
            self.right[node] = self._build(lo, hi, cent, mid, end)
            self.count[node] = 0
        return node

    def leaves(self):
        return [(self.start[n], self.count[n]) for n in range(len(self.left)) if self.left[n] < 0]

    def _box_dist(self, node, p):
        gap = np.maximum(np.maximum(self.box_lo[node] - p, p - self.box_hi[node]), 0.0)
        return float(np.sqrt(gap @ gap))

    def nearest(self, p):
        p = np.asarray(p, dtype=np.float64)
        best_id, best_d = -1, np.inf
        stack = [0]
        while stack:
            node = stack.pop()
            # slack keeps exact ties alive when the box distance rounds up
            if self._box_dist(node, p) > best_d * (1 + 1e-12) + 1e-300:
                continue
            if self.left[node] < 0:
                ids = self.order[self.start[node]:self.start[node] + self.count[node]]
                _, d, _ = closest_points_on_triangles(p[None], self._a[ids], self._b[ids], self._c[ids])
                for fid, dist in zip(ids, d):
                    if dist < best_d or (dist == best_d and fid < best_id):
                        best_id, best_d = int(fid), float(dist)
                continue
            l, r = self.left[node], self.right[node]
            dl, dr = self._box_dist(l, p), self._box_dist(r, p)
            # push the farther child first so the nearer one is explored first
            if dl <= dr:
                stack.extend((r, l))
            else:
                stack.extend((l, r))
        return best_id, best_d

    def nearest_many(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        ids = np.empty(len(points), dtype=np.int64)
        dists = np.empty(len(points))
        for k, p in enumerate(points):
            ids[k], dists[k] = self.nearest(p)
        return ids, dists


def nearest_face(bvh: MeshBvh, p):
    return bvh.nearest(p)


def point_to_mesh_distance(mesh: TriMesh, points, bvh: MeshBvh | None = None):
    bvh = bvh or MeshBvh(mesh)
    return bvh.nearest_many(points)[1]


# ---------------------------------------------------------------------------
# decimation


BOUNDARY_WEIGHT = 1e3


def _plane_quadric(n, p):
    d = -float(n @ p)
    v = np.append(n, d)
    return np.outer(v, v)


def decimate_qem(mesh: TriMesh, target_faces: int) -> TriMesh:
    """Greedy edge-collapse simplification with pair quadrics (Garland-Heckbert).

    Open boundaries get heavily weighted perpendicular planes so they are kept.
    Collapses that would break manifoldness, flip a face or create a
    degenerate face are skipped; if no valid collapse remains the mesh is
    returned with more faces than requested (``len(result.faces)`` tells).
    """
    if target_faces < 4:
        raise ValueError("target_faces must be >= 4")
    if mesh.n_faces <= target_faces:
        return mesh

    V = [v.copy() for v in mesh.vertices]
    faces = [list(f) for f in mesh.faces]
    alive = [True] * len(faces)
    vfaces = [set() for _ in V]
    for fi, f in enumerate(faces):
        for v in f:
            vfaces[v].add(fi)

    Q = [np.zeros((4, 4)) for _ in V]
    for fi, f in enumerate(faces):
        K = _plane_quadric(mesh.normals[fi], mesh.vertices[f[0]])
        for v in f:
            Q[v] += K

    edge_faces: dict[tuple[int, int], list[int]] = {}
    for fi, f in enumerate(faces):
        for k in range(3):
            e = tuple(sorted((f[k], f[(k + 1) % 3])))
            edge_faces.setdefault(e, []).append(fi)
    boundary_vertex = [False] * len(V)
    for (i, j), fl in edge_faces.items():
        if len(fl) == 1:
            n = mesh.normals[fl[0]]
            e = mesh.vertices[j] - mesh.vertices[i]
            perp = np.cross(e, n)
            perp /= np.linalg.norm(perp)
            K = BOUNDARY_WEIGHT * _plane_quadric(perp, mesh.vertices[i])
            Q[i] += K
            Q[j] += K
            boundary_vertex[i] = boundary_vertex[j] = True

    stamp = [0] * len(V)
    valive = [True] * len(V)
    heap = []
    counter = 0

    def neighbors(v):
        out = set()
        for fi in vfaces[v]:
            out.update(faces[fi])
        out.discard(v)
        return out

    def best_position(i, j):
        Qs = Q[i] + Q[j]
        A = Qs[:3, :3]
        cands = [V[i], V[j], (V[i] + V[j]) / 2]
        if abs(np.linalg.det(A)) > 1e-12 * max(1.0, np.abs(A).max()) ** 3:
            try:
                x = np.linalg.solve(A, -Qs[:3, 3])
                span = np.linalg.norm(V[i] - V[j])
                if np.linalg.norm(x - cands[2]) <= 2.0 * span + 1e-12:
                    cands.insert(0, x)
            except np.linalg.LinAlgError:
                pass
        best, best_cost = None, np.inf
        for x in cands:
            h = np.append(x, 1.0)
            cost = max(float(h @ Qs @ h), 0.0)
            if cost < best_cost - 1e-15:
                best, best_cost = x, cost
        return best, best_cost

    def push(i, j):
        nonlocal counter
        if i > j:
            i, j = j, i
        x, cost = best_position(i, j)
        heapq.heappush(heap, (cost, counter, i, j, stamp[i], stamp[j], x))
        counter += 1

    for i, j in edge_faces:
        push(i, j)

    n_alive = len(faces)
    total_error = 0.0

    def valid_collapse(i, j, x):
        shared = [fi for fi in vfaces[i] if j in faces[fi]]
        if not shared or len(shared) > 2:
            return False
        opposite = {v for fi in shared for v in faces[fi] if v not in (i, j)}
        if neighbors(i) & neighbors(j) != opposite:
            return False
        if len(shared) == 2 and boundary_vertex[i] and boundary_vertex[j]:
            return False
        for v in (i, j):
            for fi in vfaces[v]:
                if fi in shared:
                    continue
                f = faces[fi]
                old = [V[k] for k in f]
                new = [x if k in (i, j) else V[k] for k in f]
                n_old = np.cross(old[1] - old[0], old[2] - old[0])
                n_new = np.cross(new[1] - new[0], new[2] - new[0])
                if 0.5 * np.linalg.norm(n_new) <= MIN_FACE_AREA:
                    return False
                if n_old @ n_new <= 0:
                    return False
        # collapsing would leave two faces on the same vertex triple
        keys = set()
        for v in (i, j):
            for fi in vfaces[v]:
                if fi in shared:
                    continue
                key = frozenset(i if k == j else k for k in faces[fi])
                if key in keys:
                    return False
                keys.add(key)
        return True

    while heap and n_alive > target_faces:
        cost, _, i, j, si, sj, x = heapq.heappop(heap)
        if not (valive[i] and valive[j]) or stamp[i] != si or stamp[j] != sj:
            continue
        if not valid_collapse(i, j, x):
            continue
        shared = [fi for fi in vfaces[i] if j in faces[fi]]
        for fi in shared:
            alive[fi] = False
            n_alive -= 1
            for v in faces[fi]:
                vfaces[v].discard(fi)
        for fi in list(vfaces[j]):
            faces[fi] = [i if k == j else k for k in faces[fi]]
            vfaces[i].add(fi)
        vfaces[j].clear()
        valive[j] = False
        V[i] = np.asarray(x, dtype=np.float64)
        Q[i] = Q[i] + Q[j]
        boundary_vertex[i] = boundary_vertex[i] or boundary_vertex[j]
        total_error += cost
        stamp[i] += 1
        for k in neighbors(i):
            push(i, k)

    keep_faces = np.array([f for f, a in zip(faces, alive) if a], dtype=np.int64).reshape(-1, 3)
    used = np.unique(keep_faces)
    remap = -np.ones(len(V), dtype=np.int64)
    remap[used] = np.arange(len(used))
    out = TriMesh.from_arrays(np.array(V)[used], remap[keep_faces])
    out.quadric_error = total_error
    if out.n_faces > target_faces:
        log.warning("decimation stopped at %d faces (target %d)", out.n_faces, target_faces)
    return out


# ---------------------------------------------------------------------------
# depth rendering


def _clip_near(tri_cam, z_near):
    """Clip camera-space triangles ``(T, 3, 3)`` against ``z >= z_near``."""
    z = tri_cam[:, :, 2]
    inside = z >= z_near
    n_in = inside.sum(axis=1)
    keep = [tri_cam[n_in == 3]]
    for t, ins in zip(tri_cam[(n_in > 0) & (n_in < 3)], inside[(n_in > 0) & (n_in < 3)]):
        poly = []
        for k in range(3):
            a, b = t[k], t[(k + 1) % 3]
            ia, ib = ins[k], ins[(k + 1) % 3]
            if ia:
                poly.append(a)
            if ia != ib:
                s = (z_near - a[2]) / (b[2] - a[2])
                poly.append(a + s * (b - a))
        for k in range(1, len(poly) - 1):
            keep.append(np.array([poly[0], poly[k], poly[k + 1]])[None])
    return np.concatenate(keep, axis=0) if keep else np.zeros((0, 3, 3))


def render_depth(mesh: TriMesh, cam: Camera) -> np.ndarray:
    """Per-pixel camera-space depth of the nearest surface (``inf`` where empty).

    Pixels are sampled at their centers; depth is interpolated perspective-correctly.
    """
    tri_cam = world_to_camera(cam, mesh.triangles().reshape(-1, 3)).reshape(-1, 3, 3)
    tri_cam = _clip_near(tri_cam, Z_NEAR)
    return kernels.depth_raster(
        np.ascontiguousarray(tri_cam, dtype=np.float64),
        float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
        int(cam.width), int(cam.height),
    )
