"""Triangle meshes and cage geometry.

Everything here is plain numpy: vertices are (V, 3) float64 arrays, faces are
(F, 3) int32 index triples, counter-clockwise when seen from outside. Meshes
are immutable after construction (arrays are locked) so they can be shared
freely across workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is present in the supported env
    _HAVE_NUMBA = False

CAGE_VERTEX_RANGE = (30, 200)


class MeshError(ValueError):
    pass


class ObjParseError(MeshError):
    pass


class NotWatertightError(MeshError):
    pass


def _locked(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box, min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", _locked(np.asarray(self.min, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "max", _locked(np.asarray(self.max, dtype=np.float64).reshape(3)))
        if np.any(self.min > self.max):
            raise ValueError(f"invalid aabb: min {self.min} > max {self.max}")

    @property
    def size(self):
        return self.max - self.min

    @property
    def center(self):
        return 0.5 * (self.min + self.max)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    def expanded(self, margin) -> "Aabb":
        margin = np.broadcast_to(np.asarray(margin, dtype=np.float64), (3,))
        return Aabb(self.min - margin, self.max + margin)

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    def contains(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all((points >= self.min) & (points <= self.max), axis=-1)


@dataclass(frozen=True)
class ScalarGrid:
    """Dense scalar samples on the node lattice of an Aabb."""

    values: np.ndarray
    domain: Aabb

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError("scalar grid must be 3-D")
        object.__setattr__(self, "values", _locked(v))

    @property
    def res(self):
        return self.values.shape

    @property
    def cell(self):
        return self.domain.size / (np.array(self.values.shape, dtype=np.float64) - 1.0)


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if len(f):
            a, b, c = f[:, 0], f[:, 1], f[:, 2]
            if np.any((a == b) | (b == c) | (a == c)):
                raise MeshError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", _locked(v))
        object.__setattr__(self, "faces", _locked(f))

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def bbox(self) -> Aabb:
        if len(self.vertices) == 0:
            return Aabb(np.zeros(3), np.zeros(3))
        return Aabb(self.vertices.min(axis=0), self.vertices.max(axis=0))

    def triangles(self):
        return self.vertices[self.faces]

    def face_normals(self, normalize=True):
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        if normalize:
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.maximum(ln, 1e-300)
        return n

    def face_areas(self):
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def signed_volume(self) -> float:
        t = self.triangles()
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def flipped(self) -> "TriMesh":
        return TriMesh(self.vertices, self.faces[:, ::-1])

    def oriented_outward(self) -> "TriMesh":
        """Flip all faces if the signed volume is negative (GC needs outward normals)."""
        return self.flipped() if self.signed_volume() < 0.0 else self

    def translated(self, t) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(t, dtype=np.float64), self.faces)


@dataclass(frozen=True)
class CagePair:
    """Deformed cage (weights are computed against it) + canonical target vertices.

    Both cages share the face list; manipulation moves vertices only. The
    deformed cage is normalized to outward orientation at construction.
    """

    deformed: TriMesh
    canonical_vertices: np.ndarray
    check: bool = field(default=True, compare=False)

    def __post_init__(self):
        cv = _locked(np.asarray(self.canonical_vertices, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "canonical_vertices", cv)
        if len(cv) != self.deformed.num_vertices:
            raise MeshError(
                f"cage pair vertex mismatch: deformed {self.deformed.num_vertices}, canonical {len(cv)}"
            )
        if self.deformed.signed_volume() < 0.0:
            object.__setattr__(self, "deformed", self.deformed.flipped())
        if self.check:
            if not is_watertight(self.deformed):
                raise NotWatertightError("deformed cage is not watertight")
            if not is_watertight(self.canonical):
                raise NotWatertightError("canonical cage is not watertight")

    @property
    def canonical(self) -> TriMesh:
        return TriMesh(self.canonical_vertices, self.deformed.faces)

    @staticmethod
    def identity(cage: TriMesh) -> "CagePair":
        cage = cage.oriented_outward()
        return CagePair(cage, cage.vertices)


# ---------------------------------------------------------------------------
# OBJ interchange (ASCII, v/f records, 1-based indices, triangles only)

def load_obj(path) -> TriMesh:
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) < 3:
                    raise ObjParseError(f"{path}: malformed vertex at line {lineno}")
                try:
                    verts.append([float(rest[0]), float(rest[1]), float(rest[2])])
                except ValueError as exc:
                    raise ObjParseError(f"{path}: bad vertex number at line {lineno}: {exc}") from exc
            elif tag == "f":
                if len(rest) != 3:
                    raise ObjParseError(f"{path}: non-triangular face at line {lineno}")
                idx = []
                for tok in rest:
                    # tolerate v/vt/vn forms written by mesh editors
                    head = tok.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise ObjParseError(f"{path}: bad face index at line {lineno}: {tok!r}") from exc
                    if i < 1:
                        raise ObjParseError(f"{path}: face index must be positive at line {lineno}")
                    idx.append(i - 1)
                faces.append(idx)
            # other record types (vn, vt, o, g, s, mtllib, ...) are ignored
    verts = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces_arr = np.array(faces, dtype=np.int32).reshape(-1, 3)
    if len(faces_arr) and faces_arr.max() >= len(verts):
        bad = int(np.argmax(faces_arr.max(axis=1) >= len(verts)))
        raise ObjParseError(f"{path}: face references out-of-range vertex (face {bad})")
    return TriMesh(verts, faces_arr)


def save_obj(mesh: TriMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_cage(path) -> TriMesh:
    """Load an OBJ as a cage: watertightness enforced, orientation normalized."""
    mesh = load_obj(path)
    if not is_watertight(mesh):
        raise NotWatertightError(f"{path}: cage mesh is not watertight")
    return mesh.oriented_outward()


# ---------------------------------------------------------------------------
# Predicates

def _edge_keys(faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0).astype(np.int64)
    return e


def is_watertight(mesh: TriMesh) -> bool:
    """True iff every edge is shared by exactly two opposite-orientation faces
    and the faces form a single edge-connected component."""
    if mesh.is_empty:
        return False
    edges = _edge_keys(mesh.faces)
    nv = mesh.num_vertices
    directed = edges[:, 0] * nv + edges[:, 1]
    # each directed edge must be unique ...
    uniq, counts = np.unique(directed, return_counts=True)
    if np.any(counts != 1):
        return False
    # ... and paired with its reverse
    reverse = edges[:, 1] * nv + edges[:, 0]
    if not np.all(np.isin(reverse, uniq, assume_unique=False)):
        return False
    # single component, connected through shared edges (equivalently, through
    # shared vertices restricted to used vertices, since edges are all paired)
    f = mesh.faces
    nf = len(f)
    rows = np.repeat(np.arange(nf), 3)
    cols = f.reshape(-1)
    incid = sp.coo_matrix((np.ones(nf * 3), (rows, cols)), shape=(nf, nv)).tocsr()
    adj = incid @ incid.T
    ncomp, _ = csgraph.connected_components(adj, directed=False)
    return int(ncomp) == 1


if _HAVE_NUMBA:
    @_njit(cache=True)
    def _solid_angle_kernel(tri, points):
        n = points.shape[0]
        nf = tri.shape[0]
        out = np.zeros(n)
        for p in range(n):
            px, py, pz = points[p, 0], points[p, 1], points[p, 2]
            acc = 0.0
            for f in range(nf):
                ax = tri[f, 0, 0] - px
                ay = tri[f, 0, 1] - py
                az = tri[f, 0, 2] - pz
                bx = tri[f, 1, 0] - px
                by = tri[f, 1, 1] - py
                bz = tri[f, 1, 2] - pz
                cx = tri[f, 2, 0] - px
                cy = tri[f, 2, 1] - py
                cz = tri[f, 2, 2] - pz
                la = np.sqrt(ax * ax + ay * ay + az * az)
                lb = np.sqrt(bx * bx + by * by + bz * bz)
                lc = np.sqrt(cx * cx + cy * cy + cz * cz)
                num = (ax * (by * cz - bz * cy)
                       - ay * (bx * cz - bz * cx)
                       + az * (bx * cy - by * cx))
                den = (la * lb * lc
                       + (ax * bx + ay * by + az * bz) * lc
                       + (bx * cx + by * cy + bz * cz) * la
                       + (cx * ax + cy * ay + cz * az) * lb)
                acc += 2.0 * np.arctan2(num, den)
            out[p] = acc
        return out


def solid_angles(mesh: TriMesh, points, chunk_elems=4_000_000):
    """Sum of signed solid angles of all faces, seen from each point.

    Van Oosterom & Strackee's formula per face; divided by 4*pi this is the
    generalized winding number (1 inside, 0 outside for watertight meshes).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.triangles()
    nf = max(len(tri), 1)
    out = np.zeros(len(points), dtype=np.float64)
    if mesh.is_empty:
        return out
    if _HAVE_NUMBA:
        return _solid_angle_kernel(tri, points)
    step = max(1, int(chunk_elems // (nf * 9)))
    for s in range(0, len(points), step):
        p = points[s:s + step]
        a = tri[None, :, 0, :] - p[:, None, :]
        b = tri[None, :, 1, :] - p[:, None, :]
        c = tri[None, :, 2, :] - p[:, None, :]
        la = np.linalg.norm(a, axis=-1)
        lb = np.linalg.norm(b, axis=-1)
        lc = np.linalg.norm(c, axis=-1)
        num = np.einsum("nfi,nfi->nf", a, np.cross(b, c))
        den = (la * lb * lc
               + np.einsum("nfi,nfi->nf", a, b) * lc
               + np.einsum("nfi,nfi->nf", b, c) * la
               + np.einsum("nfi,nfi->nf", c, a) * lb)
        out[s:s + step] = 2.0 * np.arctan2(num, den).sum(axis=1)
    return out


def winding_number(mesh: TriMesh, points):
    return solid_angles(mesh, points) / (4.0 * np.pi)


def points_in_mesh(mesh: TriMesh, points, validate=True):
    """Winding-number membership (threshold 0.5) for a batch of points.

    Points exactly on the surface may land on either side; keep test points
    away from faces.
    """
    if validate and not is_watertight(mesh):
        raise NotWatertightError("membership test requires a watertight mesh")
    return winding_number(mesh, points) > 0.5


def point_in_mesh(mesh: TriMesh, p) -> bool:
    return bool(points_in_mesh(mesh, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


# ---------------------------------------------------------------------------
# Closest point on mesh (Ericson's region test, vectorized over points x faces)

def _closest_on_triangles(points, tri):
    """Closest points of `points` (N,3) on every triangle of `tri` (F,3,3).

    Returns (cp (N,F,3), bary (N,F,3)).
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = (b - a)[None]
    ac = (c - a)[None]
    ap = points[:, None, :] - a[None]
    d1 = np.einsum("nfi,nfi->nf", ab, ap)
    d2 = np.einsum("nfi,nfi->nf", ac, ap)
    bp = points[:, None, :] - b[None]
    d3 = np.einsum("nfi,nfi->nf", ab, bp)
    d4 = np.einsum("nfi,nfi->nf", ac, bp)
    cp_ = points[:, None, :] - c[None]
    d5 = np.einsum("nfi,nfi->nf", ab, cp_)
    d6 = np.einsum("nfi,nfi->nf", ac, cp_)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def _safe(num, den):
        return np.clip(num / np.where(den != 0, den, 1e-300), 0.0, 1.0)

    v_ab = _safe(d1, d1 - d3)
    w_ac = _safe(d2, d2 - d6)
    w_bc = _safe(d4 - d3, (d4 - d3) + (d5 - d6))
    denom = np.where(va + vb + vc != 0, va + vb + vc, 1e-300)
    v_in = vb / denom
    w_in = vc / denom

    # Ericson's region tests are sequential with first-match priority
    # (A, B, AB, C, AC, BC, interior); emulate by applying overrides in
    # reverse so the earliest matching region lands on top.
    u = 1.0 - v_in - w_in
    v = v_in.copy()
    w = w_in.copy()
    for m, uu, vv, ww in (
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), 0.0, 1.0 - w_bc, w_bc),   # edge BC
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - w_ac, 0.0, w_ac),             # edge AC
        ((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0),                                # vertex C
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - v_ab, v_ab, 0.0),             # edge AB
        ((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0),                                # vertex B
        ((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0),                                 # vertex A
    ):
        u = np.where(m, uu, u)
        v = np.where(m, vv, v)
        w = np.where(m, ww, w)

    bary = np.stack([u, v, w], axis=-1)
    cp = (bary[..., 0:1] * a[None] + bary[..., 1:2] * b[None] + bary[..., 2:3] * c[None])
    return cp, bary


def closest_point_on_mesh(mesh: TriMesh, points, chunk_elems=3_000_000):
    """Closest surface point for each query point.

    Returns (cp (N,3), face_idx (N,), bary (N,3)).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.triangles()
    nf = len(tri)
    n = len(points)
    cp_out = np.zeros((n, 3))
    fi_out = np.zeros(n, dtype=np.int64)
    by_out = np.zeros((n, 3))
    step = max(1, int(chunk_elems // max(nf * 9, 1)))
    for s in range(0, n, step):
        p = points[s:s + step]
        cp, bary = _closest_on_triangles(p, tri)
        d2 = np.einsum("nfi,nfi->nf", cp - p[:, None, :], cp - p[:, None, :])
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(p))
        cp_out[s:s + step] = cp[rows, best]
        fi_out[s:s + step] = best
        by_out[s:s + step] = bary[rows, best]
    return cp_out, fi_out, by_out


def surface_distance(mesh: TriMesh, points):
    cp, _, _ = closest_point_on_mesh(mesh, points)
    return np.linalg.norm(cp - np.atleast_2d(points), axis=1)


def pseudo_normals(mesh: TriMesh, face_idx, bary):
    """Outward direction at a closest-point result; averages adjacent face
    normals when the hit lands on an edge or vertex."""
    fn = mesh.face_normals()
    n = fn[face_idx].copy()
    onv = bary > 1.0 - 1e-9
    one = bary < 1e-9
    edge_or_vert = one.any(axis=1) | onv.any(axis=1)
    if np.any(edge_or_vert):
        # vertex-adjacency average is a good enough outward proxy for both
        # edge and vertex hits on coarse cages
        vadj = [[] for _ in range(mesh.num_vertices)]
        for f, (i, j, k) in enumerate(mesh.faces):
            vadj[i].append(f)
            vadj[j].append(f)
            vadj[k].append(f)
        for row in np.nonzero(edge_or_vert)[0]:
            f = face_idx[row]
            verts = mesh.faces[f]
            active = verts[bary[row] > 1e-9]
            faces = set()
            for v in active:
                faces.update(vadj[v])
            if len(active) == 0:
                active = verts
                faces.update(vadj[verts[0]])
            acc = fn[sorted(faces)].sum(axis=0)
            ln = np.linalg.norm(acc)
            if ln > 1e-12:
                n[row] = acc / ln
    return n


# ---------------------------------------------------------------------------
# Surface rasterization (triangle / cell-box overlap, separating axes)

def _sat_tri_box(tv, centers, half):
    """Triangle vs axis-aligned box overlap for one triangle against many boxes.

    tv: (3,3) triangle vertices, centers: (M,3) box centers, half: (3,) half sizes.
    """
    v = tv[None, :, :] - centers[:, None, :]
    e = np.stack([tv[1] - tv[0], tv[2] - tv[1], tv[0] - tv[2]])
    ok = np.ones(len(centers), dtype=bool)

    # box face normals
    for ax in range(3):
        lo = v[:, :, ax].min(axis=1)
        hi = v[:, :, ax].max(axis=1)
        ok &= (hi >= -half[ax]) & (lo <= half[ax])
    # triangle plane
    n = np.cross(e[0], e[1])
    d = np.einsum("i,mi->m", n, v[:, 0, :])
    r = np.abs(n[0]) * half[0] + np.abs(n[1]) * half[1] + np.abs(n[2]) * half[2]
    ok &= np.abs(d) <= r + 1e-12
    # 9 edge cross products
    axes = np.eye(3)
    for i in range(3):
        for j in range(3):
            a = np.cross(axes[i], e[j])
            if np.linalg.norm(a) < 1e-12:
                continue
            p = np.einsum("k,mvk->mv", a, v)
            r = np.abs(a[0]) * half[0] + np.abs(a[1]) * half[1] + np.abs(a[2]) * half[2]
            ok &= (p.min(axis=1) <= r + 1e-12) & (p.max(axis=1) >= -r - 1e-12)
    return ok


CELL_OUTSIDE = 0
CELL_CROSSED = 1
CELL_INSIDE = 2


def classify_cells(mesh: TriMesh, domain: Aabb, res):
    """Classify the (res-1)^3 cells between lattice nodes against the surface.

    Returns a uint8 array with CELL_OUTSIDE / CELL_CROSSED / CELL_INSIDE.
    Cells are crossed when a cage triangle overlaps them (exact SAT with a
    conservative epsilon); outside cells are flood-filled from the domain
    border, the rest is inside.
    """
    res = np.broadcast_to(np.asarray(res, dtype=np.int64), (3,)).copy()
    ncell = res - 1
    cs = domain.size / ncell.astype(np.float64)
    half = 0.5 * cs * (1.0 + 1e-9)
    crossed = np.zeros(tuple(ncell), dtype=bool)
    for tv in mesh.triangles():
        lo = np.floor((tv.min(axis=0) - domain.min) / cs - 1e-9).astype(np.int64)
        hi = np.floor((tv.max(axis=0) - domain.min) / cs + 1e-9).astype(np.int64)
        lo = np.clip(lo, 0, ncell - 1)
        hi = np.clip(hi, 0, ncell - 1)
        ii, jj, kk = np.meshgrid(*(np.arange(lo[a], hi[a] + 1) for a in range(3)), indexing="ij")
        idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
        centers = domain.min + (idx + 0.5) * cs
        hit = _sat_tri_box(tv, centers, half)
        crossed[idx[hit, 0], idx[hit, 1], idx[hit, 2]] = True

    open_cells = ~crossed
    labels, nlab = ndi.label(open_cells, structure=ndi.generate_binary_structure(3, 1))
    border = np.zeros_like(open_cells)
    border[0, :, :] = border[-1, :, :] = True
    border[:, 0, :] = border[:, -1, :] = True
    border[:, :, 0] = border[:, :, -1] = True
    outside_labels = np.unique(labels[border & open_cells])
    outside_labels = outside_labels[outside_labels != 0]
    out = np.full(tuple(ncell), CELL_INSIDE, dtype=np.uint8)
    out[crossed] = CELL_CROSSED
    if len(outside_labels):
        out[np.isin(labels, outside_labels)] = CELL_OUTSIDE
    return out


NODE_EXTERIOR = 0
NODE_BOUNDARY = 1
NODE_INTERIOR = 2


def classify_nodes(cells):
    """Node classification from cell classes: a node touching a crossed cell is
    boundary; otherwise it inherits interior/exterior from its incident cells."""
    ncell = np.array(cells.shape)
    res = tuple(ncell + 1)
    pad = np.pad(cells, 1, mode="constant", constant_values=CELL_OUTSIDE)
    # incident cells of node (i,j,k) are pad[i:i+2, j:j+2, k:k+2]
    stacks = np.stack([pad[dx:dx + res[0], dy:dy + res[1], dz:dz + res[2]]
                       for dx in range(2) for dy in range(2) for dz in range(2)])
    any_crossed = np.any(stacks == CELL_CROSSED, axis=0)
    any_inside = np.any(stacks == CELL_INSIDE, axis=0)
    out = np.full(res, NODE_EXTERIOR, dtype=np.uint8)
    out[any_inside] = NODE_INTERIOR
    out[any_crossed] = NODE_BOUNDARY
    return out


# ---------------------------------------------------------------------------
# Marching cubes and cage generation

def marching_cubes(grid: ScalarGrid, iso: float) -> TriMesh:
    """Iso-surface extraction, oriented so normals point toward decreasing values.

    Thin wrapper over scikit-image's topologically consistent extractor with
    world-space placement and an empty-surface fast path.
    """
    from skimage import measure

    values = grid.values
    if min(values.shape) < 2:
        raise MeshError(f"marching_cubes needs a grid of at least 2^3, got {values.shape}")
    vmin, vmax = float(values.min()), float(values.max())
    if not (vmin < iso <= vmax) and not (vmin <= iso < vmax):
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32))
    verts, faces, _, _ = measure.marching_cubes(values, level=iso, allow_degenerate=False)
    verts = grid.domain.min + verts * grid.cell
    mesh = TriMesh(verts, faces.astype(np.int32))
    return mesh.oriented_outward()


def cage_encloses(cage: TriMesh, points, chunk_elems=4_000_000) -> bool:
    """Diagnostic: do all points lie strictly inside the cage?"""
    return bool(np.all(winding_number(cage, points) > 0.5))


def generate_cage(density_grid: ScalarGrid, occupancy_threshold: float,
                  dilation_cells: int = 2, coarse_res: int = 8) -> TriMesh:
    """Automatic coarse cage: threshold -> dilate -> max-pool -> marching cubes.

    The result is a watertight mesh strictly enclosing every node whose density
    meets the threshold. Vertex counts outside the practical 30..200 band only
    warn; callers retry with a different coarse_res.
    """
    occ = density_grid.values >= occupancy_threshold
    if not occ.any():
        raise MeshError("empty occupancy: no density above threshold")
    if dilation_cells > 0:
        occ_d = ndi.binary_dilation(occ, structure=np.ones((3, 3, 3), dtype=bool),
                                    iterations=int(dilation_cells))
    else:
        occ_d = occ

    res = np.array(occ.shape, dtype=np.int64)
    block = np.maximum(1, np.ceil(res / coarse_res).astype(np.int64))
    nb = np.ceil(res / block).astype(np.int64)
    padded = np.zeros(tuple(nb * block), dtype=bool)
    padded[:res[0], :res[1], :res[2]] = occ_d
    coarse = padded.reshape(nb[0], block[0], nb[1], block[1], nb[2], block[2]).any(axis=(1, 3, 5))

    # zero border guarantees a closed iso-surface
    coarse = np.pad(coarse, 1, mode="constant", constant_values=False)
    cell = density_grid.cell
    # coarse node b sits at the center of its fine block; border nodes extrapolate
    lo = density_grid.domain.min + cell * ((np.zeros(3) - 1.0) * block + (block - 1) / 2.0)
    hi = density_grid.domain.min + cell * ((nb.astype(np.float64)) * block + (block - 1) / 2.0)
    cage = marching_cubes(ScalarGrid(coarse.astype(np.float64), Aabb(lo, hi)), 0.5)

    if cage.is_empty:
        raise MeshError("cage generation produced an empty mesh")
    if not is_watertight(cage):
        raise MeshError("cage generation produced a non-watertight mesh; "
                        "increase dilation_cells or coarse_res")
    nv = cage.num_vertices
    lo_v, hi_v = CAGE_VERTEX_RANGE
    if not (lo_v <= nv <= hi_v):
        warnings.warn(f"generated cage has {nv} vertices, outside the {lo_v}..{hi_v} range; "
                      f"retry with a different coarse_res", stacklevel=2)

    occupied = np.argwhere(occ)
    centers = density_grid.domain.min + occupied * cell
    if not cage_encloses(cage, centers):
        raise MeshError("generated cage does not enclose all occupied cells; "
                        "increase dilation_cells")
    return cage


def interpolate_cage(pair: CagePair, t: float) -> TriMesh:
    """Linear blend from the canonical cage (t=0) to the deformed cage (t=1)."""
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"interpolation parameter t={t} outside [0, 1]")
    verts = (1.0 - t) * pair.canonical_vertices + t * pair.deformed.vertices
    return TriMesh(verts, pair.deformed.faces)


# ---------------------------------------------------------------------------
# Primitive cage constructors (tests, benchmarks, quick demos)

def box_mesh(box: Aabb) -> TriMesh:
    lo, hi = box.min, box.max
    v = np.array([[lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]],
                  [hi[0], hi[1], lo[2]], [lo[0], hi[1], lo[2]],
                  [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]],
                  [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]]])
    f = np.array([
        [0, 2, 1], [0, 3, 2],      # z = lo
        [4, 5, 6], [4, 6, 7],      # z = hi
        [0, 1, 5], [0, 5, 4],      # y = lo
        [2, 3, 7], [2, 7, 6],      # y = hi
        [1, 2, 6], [1, 6, 5],      # x = hi
        [3, 0, 4], [3, 4, 7],      # x = lo
    ], dtype=np.int32)
    return TriMesh(v, f)


def icosphere_mesh(center, radius, subdivisions: int = 1) -> TriMesh:
    """Subdivided icosahedron; one subdivision gives 42 vertices / 80 faces,
    matching the coarse-cage vertex budget."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                  [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                  [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    for _ in range(subdivisions):
        verts = list(map(tuple, v))
        index = {t: i for i, t in enumerate(verts)}
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key in cache:
                return cache[key]
            m = v[i] + v[j]
            m /= np.linalg.norm(m)
            t = tuple(m)
            if t not in index:
                index[t] = len(verts)
                verts.append(t)
            cache[key] = index[t]
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.array(verts, dtype=np.float64)
        f = np.array(nf, dtype=np.int64)
    v = np.asarray(center, dtype=np.float64) + radius * v
    return TriMesh(v, f.astype(np.int32)).oriented_outward()
