"""Spatial domains: shape descriptors, triangulation, normalization, rigid fields."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

SHAPES = ("unit-square", "disk", "annulus", "l-shape", "polygon")
ROTATION = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class AlphaProfile:
    """Accommodation coefficient as a function of normalized arclength s in [0, 1).

    kind is one of ``constant`` (``value``), ``piecewise`` (``breakpoints`` splitting
    [0, 1) and one entry of ``values`` per piece) or ``bump``
    (``base + amplitude * exp(-(d / width)**2)`` with d the periodic distance to ``center``).
    """

    kind: str = "constant"
    value: float = 1.0
    breakpoints: tuple[float, ...] = ()
    values: tuple[float, ...] = ()
    base: float = 0.0
    amplitude: float = 1.0
    center: float = 0.5
    width: float = 0.1

    def __post_init__(self):
        if self.kind == "constant":
            vals = [self.value]
        elif self.kind == "piecewise":
            if len(self.values) != len(self.breakpoints) + 1:
                raise ValueError("piecewise profile needs len(values) == len(breakpoints) + 1")
            if list(self.breakpoints) != sorted(self.breakpoints) or any(
                not 0.0 < b < 1.0 for b in self.breakpoints
            ):
                raise ValueError("breakpoints must be increasing inside (0, 1)")
            vals = list(self.values)
        elif self.kind == "bump":
            if self.width <= 0:
                raise ValueError("bump width must be positive")
            vals = [self.base, self.base + self.amplitude]
        else:
            raise ValueError(f"unknown alpha profile kind {self.kind!r}")
        for a in vals:
            if not (0.0 <= a <= 1.0) or not math.isfinite(a):
                raise ValueError(f"accommodation coefficient {a} outside [0, 1]")

    def __call__(self, s):
        s = np.mod(np.asarray(s, dtype=float), 1.0)
        if self.kind == "constant":
            return np.full_like(s, self.value)
        if self.kind == "piecewise":
            idx = np.searchsorted(np.asarray(self.breakpoints), s, side="right")
            return np.asarray(self.values, dtype=float)[idx]
        d = np.abs(s - self.center)
        d = np.minimum(d, 1.0 - d)
        return self.base + self.amplitude * np.exp(-((d / self.width) ** 2))

    @classmethod
    def constant(cls, a: float) -> "AlphaProfile":
        return cls(kind="constant", value=float(a))

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "piecewise":
            return {"kind": "piecewise", "breakpoints": list(self.breakpoints), "values": list(self.values)}
        return {"kind": "bump", "base": self.base, "amplitude": self.amplitude,
                "center": self.center, "width": self.width}

    @classmethod
    def from_dict(cls, d: dict) -> "AlphaProfile":
        d = dict(d)
        for key in ("breakpoints", "values"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        return cls(**d)


@dataclass(frozen=True)
class DomainSpec:
    shape: str
    alpha: AlphaProfile = field(default_factory=AlphaProfile)
    r_inner: float = 0.5
    vertices: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.shape == "annulus" and not (0.0 < self.r_inner < 1.0):
            raise ValueError("annulus needs 0 < r_inner < outer radius 1")
        if self.shape == "polygon":
            pts = np.asarray(self.vertices, dtype=float)
            if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
                raise ValueError("polygon needs at least three 2-D vertices")
            _check_simple(pts)
            if _signed_area(pts) < 0:
                object.__setattr__(self, "vertices", tuple(map(tuple, pts[::-1].tolist())))


def _signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


def _check_simple(pts: np.ndarray) -> None:
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            if np.allclose(pts[i], pts[j], atol=1e-14, rtol=0):
                raise ValueError("polygon has a repeated vertex")
    if abs(_signed_area(pts)) < 1e-14:
        raise ValueError("polygon has zero area")
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]):
                raise ValueError("polygon is not simple")


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray          # (N, 2)
    triangles: np.ndarray         # (M, 3), counter-clockwise
    boundary_edges: np.ndarray    # (B, 2) vertex pairs, domain on the left
    boundary_normals: np.ndarray  # (B, 2) outward unit normals
    boundary_arclength: np.ndarray  # (B,) arclength of edge midpoints along their loop
    boundary_alpha: np.ndarray    # (B,) accommodation coefficient per edge
    h: float = float("nan")       # nominal edge length used to build the mesh

    def __post_init__(self):
        if np.any(self.cell_areas <= 0):
            raise ValueError("mesh has non-positive triangle areas")
        if np.any((self.boundary_alpha < 0) | (self.boundary_alpha > 1)):
            raise ValueError("accommodation coefficient outside [0, 1]")

    @cached_property
    def cell_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def total_area(self) -> float:
        return float(self.cell_areas.sum())

    @cached_property
    def cell_centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @property
    def centroid(self) -> np.ndarray:
        return self.cell_areas @ self.cell_centroids / self.total_area

    @property
    def n_cells(self) -> int:
        return len(self.triangles)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def boundary_lengths(self) -> np.ndarray:
        d = self.vertices[self.boundary_edges[:, 1]] - self.vertices[self.boundary_edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def boundary_midpoints(self) -> np.ndarray:
        return self.vertices[self.boundary_edges].mean(axis=1)

    @property
    def boundary_length(self) -> float:
        return float(self.boundary_lengths.sum())

    @cached_property
    def _edge_topology(self):
        tri = self.triangles
        local = np.array([[0, 1], [1, 2], [2, 0]])
        pairs = tri[:, local].reshape(-1, 2)
        owner = np.repeat(np.arange(len(tri)), 3)
        key = np.sort(pairs, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        order = np.argsort(inv, kind="stable")
        interior, bnd = [], {}
        i = 0
        while i < len(order):
            e = inv[order[i]]
            if counts[e] == 2:
                a, b = order[i], order[i + 1]
                interior.append((a, b))
                i += 2
            elif counts[e] == 1:
                a = order[i]
                bnd[tuple(pairs[a])] = owner[a]
                i += 1
            else:
                raise ValueError("non-manifold mesh edge")
        interior = np.array(interior, dtype=int).reshape(-1, 2)
        left = owner[interior[:, 0]]
        right = owner[interior[:, 1]]
        va = pairs[interior[:, 0]]
        d = self.vertices[va[:, 1]] - self.vertices[va[:, 0]]
        length = np.hypot(d[:, 0], d[:, 1])
        normal = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
        bcell = np.array([bnd[tuple(e)] for e in self.boundary_edges.tolist()], dtype=int)
        return left, right, normal, length, bcell, va

    @property
    def interior_left(self) -> np.ndarray:
        return self._edge_topology[0]

    @property
    def interior_right(self) -> np.ndarray:
        return self._edge_topology[1]

    @property
    def interior_normals(self) -> np.ndarray:
        """Unit normals pointing from the left cell to the right cell."""
        return self._edge_topology[2]

    @property
    def interior_lengths(self) -> np.ndarray:
        return self._edge_topology[3]

    @property
    def interior_vertices(self) -> np.ndarray:
        return self._edge_topology[5]

    @property
    def boundary_cells(self) -> np.ndarray:
        return self._edge_topology[4]

    @cached_property
    def cell_perimeters(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d = p - np.roll(p, -1, axis=1)
        return np.hypot(d[..., 0], d[..., 1]).sum(axis=1)

    @property
    def h_min(self) -> float:
        """Smallest inradius 2|K|/perimeter; the upwind CFL length scale."""
        return float(np.min(2.0 * self.cell_areas / self.cell_perimeters))

    @property
    def h_max(self) -> float:
        p = self.vertices[self.triangles]
        d = p - np.roll(p, -1, axis=1)
        return float(np.hypot(d[..., 0], d[..., 1]).max())

    @cached_property
    def boundary_vertex_ids(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    def with_alpha(self, alpha) -> "Mesh":
        """Copy with a new accommodation profile (AlphaProfile, scalar, or per-edge array)."""
        if isinstance(alpha, AlphaProfile):
            values = alpha(self.boundary_arclength / self.boundary_length)
        else:
            values = np.broadcast_to(np.asarray(alpha, dtype=float), self.boundary_alpha.shape).copy()
        return replace(self, boundary_alpha=np.asarray(values, dtype=float))

    @property
    def alpha_is_zero(self) -> bool:
        return bool(np.all(self.boundary_alpha == 0.0))

    def to_json(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "boundary": [
                {"v": [int(a), int(b)], "n": [float(n[0]), float(n[1])], "alpha": float(al)}
                for (a, b), n, al in zip(self.boundary_edges, self.boundary_normals, self.boundary_alpha)
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")


def mesh_from_json(data: dict) -> Mesh:
    vertices = np.asarray(data["vertices"], dtype=float)
    triangles = np.asarray(data["triangles"], dtype=int)
    edges = np.array([b["v"] for b in data["boundary"]], dtype=int)
    normals = np.array([b["n"] for b in data["boundary"]], dtype=float)
    alpha = np.array([b.get("alpha", 1.0) for b in data["boundary"]], dtype=float)
    arc = _loop_arclength(vertices, edges)
    return Mesh(vertices, triangles, edges, normals, arc, alpha)


def load_mesh(path) -> Mesh:
    return mesh_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- construction

def _structured_square(n: int, keep=None):
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    tris = []
    for j in range(n):
        for i in range(n):
            if keep is not None and not keep((i + 0.5) / n, (j + 0.5) / n):
                continue
            a, b = j * (n + 1) + i, j * (n + 1) + i + 1
            c, d = a + n + 1, b + n + 1
            if (i + j) % 2 == 0:
                tris += [(a, b, d), (a, d, c)]
            else:
                tris += [(a, b, c), (b, d, c)]
    tris = np.array(tris, dtype=int)
    used = np.unique(tris)
    remap = -np.ones(len(verts), dtype=int)
    remap[used] = np.arange(len(used))
    return verts[used], remap[tris]


def _ring_points(r_out: float, r_in: float, h: float, include_center: bool):
    pts = []
    n_rings = max(1, int(round((r_out - r_in) / h)))
    radii = np.linspace(r_out, r_in, n_rings + 1)
    if include_center:
        radii = radii[:-1]
    for j, r in enumerate(radii):
        if r <= 1e-12:
            continue
        m = max(6, int(math.ceil(2 * math.pi * r / h)))
        phase = 0.0 if j % 2 == 0 else math.pi / m
        t = phase + 2 * math.pi * np.arange(m) / m
        pts.append(np.column_stack([r * np.cos(t), r * np.sin(t)]))
    if include_center:
        pts.append(np.zeros((1, 2)))
    return np.vstack(pts)


def _point_in_polygon(p: np.ndarray, poly: np.ndarray) -> np.ndarray:
    x, y = p[:, 0], p[:, 1]
    inside = np.zeros(len(p), dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        cond = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= cond & (x < xc)
    return inside


def _segment_distance(p: np.ndarray, poly: np.ndarray) -> np.ndarray:
    d = np.full(len(p), np.inf)
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ab = b - a
        t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.minimum(d, np.hypot(*(p - proj).T))
    return d


def _polygon_points(poly: np.ndarray, h: float):
    bnd = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        k = max(1, int(math.ceil(np.hypot(*(b - a)) / h)))
        t = np.arange(k)[:, None] / k
        bnd.append(a + t * (b - a))
    bnd = np.vstack(bnd)
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    dy = h * math.sqrt(3) / 2
    rows = []
    for j, y in enumerate(np.arange(lo[1] + dy / 2, hi[1], dy)):
        xs = np.arange(lo[0] + (h / 2 if j % 2 else 0.0), hi[0] + h, h)
        rows.append(np.column_stack([xs, np.full_like(xs, y)]))
    lattice = np.vstack(rows)
    keep = _point_in_polygon(lattice, poly) & (_segment_distance(lattice, poly) > 0.45 * h)
    return np.vstack([bnd, lattice[keep]])


def _triangulate(points: np.ndarray, inside) -> tuple[np.ndarray, np.ndarray]:
    tri = Delaunay(points).simplices
    p = points[tri]
    area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    tri = np.where((area < 0)[:, None], tri[:, [0, 2, 1]], tri)
    area = np.abs(area)
    keep = inside(p.mean(axis=1)) & (area > 1e-12 * np.max(area))
    tri = tri[keep]
    used = np.unique(tri)
    remap = -np.ones(len(points), dtype=int)
    remap[used] = np.arange(len(used))
    return points[used], remap[tri]


def _boundary_loops(triangles: np.ndarray) -> np.ndarray:
    local = np.array([[0, 1], [1, 2], [2, 0]])
    pairs = triangles[:, local].reshape(-1, 2)
    key = np.sort(pairs, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    single = pairs[counts[inv.ravel()] == 1]
    nxt = {}
    for a, b in single.tolist():
        if a in nxt:
            raise ValueError("boundary is not a set of simple closed loops")
        nxt[a] = b
    ordered, seen = [], set()
    for start in sorted(nxt):
        if start in seen:
            continue
        a = start
        while a not in seen:
            seen.add(a)
            ordered.append((a, nxt[a]))
            a = nxt[a]
            if a not in nxt:
                raise ValueError("open boundary chain")
        if a != start:
            raise ValueError("boundary loops are not closed")
    return np.array(ordered, dtype=int)


def _loop_arclength(vertices: np.ndarray, edges: np.ndarray) -> np.ndarray:
    d = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    length = np.hypot(d[:, 0], d[:, 1])
    return np.cumsum(length) - 0.5 * length


def _assemble(vertices, triangles, alpha: AlphaProfile, h: float) -> Mesh:
    edges = _boundary_loops(triangles)
    d = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    length = np.hypot(d[:, 0], d[:, 1])
    normals = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
    arc = _loop_arclength(vertices, edges)
    a = alpha(arc / length.sum())
    return Mesh(vertices, triangles, edges, normals, arc, a, h=float(h))


def build_mesh(spec: DomainSpec, target_edge_length: float) -> Mesh:
    """Triangulate the raw shape (unit square [0,1]^2, unit disk, annulus in the unit disk,
    L-shape [0,1]^2 minus [1/2,1]^2, or the given polygon)."""
    h = float(target_edge_length)
    if not h > 0:
        raise ValueError("target edge length must be positive")
    if spec.shape == "unit-square":
        n = max(1, int(math.ceil(1.0 / h - 1e-9)))
        verts, tris = _structured_square(n)
    elif spec.shape == "l-shape":
        n = 2 * max(1, int(math.ceil(0.5 / h - 1e-9)))
        verts, tris = _structured_square(n, keep=lambda x, y: not (x > 0.5 and y > 0.5))
    elif spec.shape == "disk":
        pts = _ring_points(1.0, 0.0, h, include_center=True)
        verts, tris = _triangulate(pts, lambda c: np.hypot(*c.T) < 1.0)
    elif spec.shape == "annulus":
        pts = _ring_points(1.0, spec.r_inner, h, include_center=False)
        verts, tris = _triangulate(pts, lambda c: np.hypot(*c.T) > spec.r_inner)
    else:
        poly = np.asarray(spec.vertices, dtype=float)
        pts = _polygon_points(poly, h)
        verts, tris = _triangulate(pts, lambda c: _point_in_polygon(c, poly))
    mesh = _assemble(verts, tris, spec.alpha, h)
    if spec.shape == "polygon":
        poly = np.asarray(spec.vertices, dtype=float)
        perim = float(np.sum(np.hypot(*(np.roll(poly, -1, axis=0) - poly).T)))
        if abs(mesh.boundary_length - perim) > 1e-9 * perim:
            raise ValueError("triangulation does not conform to the polygon boundary; refine h")
    return mesh


def normalize_domain(mesh: Mesh) -> Mesh:
    """Scale to unit area and move the centroid to the origin."""
    scale = 1.0 / math.sqrt(mesh.total_area)
    verts = (mesh.vertices - mesh.centroid) * scale
    # second pass removes the rounding left by the first
    tmp = replace(mesh, vertices=verts)
    tmp.__dict__.pop("cell_areas", None)
    verts = (verts - tmp.centroid) / math.sqrt(tmp.total_area)
    d = verts[mesh.boundary_edges[:, 1]] - verts[mesh.boundary_edges[:, 0]]
    length = np.hypot(d[:, 0], d[:, 1])
    normals = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
    return Mesh(verts, mesh.triangles.copy(), mesh.boundary_edges.copy(), normals,
                _loop_arclength(verts, mesh.boundary_edges), mesh.boundary_alpha.copy(),
                h=mesh.h * scale)


def build_normalized_mesh(spec: DomainSpec, h: float) -> Mesh:
    """Normalized mesh whose edge length is about ``h`` in normalized units."""
    raw_area = {
        "unit-square": 1.0,
        "disk": math.pi,
        "annulus": math.pi * (1.0 - spec.r_inner**2),
        "l-shape": 0.75,
    }.get(spec.shape)
    if raw_area is None:
        raw_area = abs(_signed_area(np.asarray(spec.vertices, dtype=float)))
    mesh = normalize_domain(build_mesh(spec, h * math.sqrt(raw_area)))
    return replace(mesh, h=float(h))


@dataclass(frozen=True)
class RigidFieldBasis:
    basis: tuple[np.ndarray, ...]
    tolerance_used: float

    @property
    def empty(self) -> bool:
        return len(self.basis) == 0

    def __len__(self) -> int:
        return len(self.basis)


def rigid_fields(mesh: Mesh, tol: float | None = None) -> RigidFieldBasis:
    """Skew matrices A (here only the rotation generator) with Ax tangent to the boundary."""
    if tol is None:
        tol = 1e-10 * mesh.boundary_length
    x = mesh.boundary_midpoints
    defect = np.abs(np.einsum("ij,ij->i", x @ ROTATION.T, mesh.boundary_normals)).max()
    basis = (ROTATION / math.sqrt(2.0),) if defect <= tol else ()
    return RigidFieldBasis(basis, float(tol))
