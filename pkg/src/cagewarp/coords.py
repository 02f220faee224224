"""Cage coordinates: mean value, green, and grid-solved harmonic weights.

Conventions: weights are always computed against an outward-oriented
watertight cage. For a point x strictly inside the cage,

* MVC / HC vertex weights w_j satisfy partition of unity (sum w_j = 1) and
  linear precision (sum w_j v_j = x);
* GC produces vertex weights w_j plus per-face weights psi_k such that
  sum w_j v_j + sum psi_k n_k = x with n_k the unit outward face normal of
  the cage the weights were computed against.

Deforming means re-contracting the same weights with a target cage of
identical topology (plus a per-face stretch factor for GC).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import gridutil
from .geometry import (
    Aabb,
    CagePair,
    NODE_BOUNDARY,
    NODE_EXTERIOR,
    NODE_INTERIOR,
    NotWatertightError,
    TriMesh,
    classify_cells,
    classify_nodes,
    closest_point_on_mesh,
    is_watertight,
    winding_number,
    CELL_CROSSED,
)


try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is present in the supported env
    _HAVE_NUMBA = False

    def _njit(*a, **k):
        def deco(f):
            return f
        return deco if not (len(a) == 1 and callable(a[0])) else a[0]


class CoordinateKind(str, Enum):
    MVC = "mvc"
    HC = "hc"
    GC = "gc"

    @property
    def has_closed_form(self) -> bool:
        # HC requires a grid Laplace solve; there is no per-point formula.
        return self is not CoordinateKind.HC


class PointNearSurfaceError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass
class EvalCounters:
    """Diagnostic counters for closed-form weight evaluations.

    Incremented per evaluated point; the warp/bench layers use these to show
    that grid mode makes the evaluation count independent of image size.
    """

    closed_form: dict = field(default_factory=lambda: {k: 0 for k in CoordinateKind})
    hc_solve_nodes: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, kind: CoordinateKind, n: int):
        with self._lock:
            self.closed_form[kind] += int(n)

    def reset(self):
        with self._lock:
            self.closed_form = {k: 0 for k in CoordinateKind}
            self.hc_solve_nodes = 0

    def total_closed_form(self) -> int:
        return sum(self.closed_form.values())


counters = EvalCounters()


@dataclass(frozen=True)
class CageWeights:
    vertex_weights: np.ndarray
    face_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "vertex_weights", np.asarray(self.vertex_weights, dtype=np.float64))
        object.__setattr__(self, "face_weights", np.asarray(self.face_weights, dtype=np.float64))


def surface_epsilon(cage: TriMesh, scale: float = 1e-6) -> float:
    """Exclusion distance around the cage surface for closed-form kernels."""
    return scale * cage.bbox().diagonal


def _require_strict_interior(cage: TriMesh, x, eps=None):
    if not is_watertight(cage):
        raise NotWatertightError("cage must be watertight")
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    if winding_number(cage, x)[0] <= 0.5:
        raise PointNearSurfaceError("point too close to cage surface (outside or on the cage)")
    eps = surface_epsilon(cage) if eps is None else eps
    from .geometry import surface_distance

    if surface_distance(cage, x)[0] < eps:
        raise PointNearSurfaceError("point too close to cage surface")
    return x


# ---------------------------------------------------------------------------
# Mean value coordinates (spherical-triangle weights per face, accumulated
# per vertex, then normalized; robust form with on-plane special cases)

def mvc_weights_batch(cage: TriMesh, points, chunk_elems=12_000_000, use_kernel=None):
    """Normalized MVC vertex weights for a batch of strictly interior points.

    Returns an (N, V) array. No validity checking is done here; the scalar
    `mvc_weights` wrapper enforces the interior precondition. The compiled
    kernel and the vectorized-numpy path implement the same construction;
    tests cross-check them.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    verts = cage.vertices
    faces = cage.faces
    n_pts, nv = len(points), len(verts)
    counters.add(CoordinateKind.MVC, n_pts)
    if use_kernel is None:
        use_kernel = _HAVE_NUMBA
    if use_kernel and _HAVE_NUMBA:
        scale = max(float(np.linalg.norm(verts.max(0) - verts.min(0))), 1e-30)
        return _mvc_kernel(points, verts, faces.astype(np.int64), scale)
    out = np.zeros((n_pts, nv), dtype=np.float64)
    step = max(1, int(chunk_elems // max(len(faces) * 12, 1)))
    for s in range(0, n_pts, step):
        out[s:s + step] = _mvc_chunk(verts, faces, points[s:s + step])
    return out


def _mvc_chunk(verts, faces, pts):
    n = len(pts)
    nv = len(verts)
    diff = verts[None, :, :] - pts[:, None, :]          # (N,V,3)
    dist = np.linalg.norm(diff, axis=2)                 # (N,V)
    scale = max(np.linalg.norm(verts.max(0) - verts.min(0)), 1e-30)
    at_vertex = dist < 1e-12 * scale
    safe_dist = np.maximum(dist, 1e-300)
    u = diff / safe_dist[:, :, None]

    i0, i1, i2 = faces[:, 0], faces[:, 1], faces[:, 2]
    u0, u1, u2 = u[:, i0], u[:, i1], u[:, i2]           # (N,F,3)
    d0, d1, d2 = dist[:, i0], dist[:, i1], dist[:, i2]

    # edge arc lengths of the projected spherical triangle
    l0 = np.linalg.norm(u1 - u2, axis=2)
    l1 = np.linalg.norm(u2 - u0, axis=2)
    l2 = np.linalg.norm(u0 - u1, axis=2)
    th0 = 2.0 * np.arcsin(np.clip(0.5 * l0, 0.0, 1.0))
    th1 = 2.0 * np.arcsin(np.clip(0.5 * l1, 0.0, 1.0))
    th2 = 2.0 * np.arcsin(np.clip(0.5 * l2, 0.0, 1.0))
    h = 0.5 * (th0 + th1 + th2)

    on_face = (np.pi - h) < 1e-9                        # x lies on this face's interior
    sin_h = np.sin(h)
    s0_, s1_, s2_ = np.sin(th0), np.sin(th1), np.sin(th2)
    safe = lambda a: np.where(np.abs(a) > 1e-300, a, 1e-300)
    c0 = 2.0 * sin_h * np.sin(h - th0) / safe(s1_ * s2_) - 1.0
    c1 = 2.0 * sin_h * np.sin(h - th1) / safe(s2_ * s0_) - 1.0
    c2 = 2.0 * sin_h * np.sin(h - th2) / safe(s0_ * s1_) - 1.0
    det = np.einsum("nfi,nfi->nf", u0, np.cross(u1, u2))
    sgn = np.where(det >= 0.0, 1.0, -1.0)
    sq = lambda c: np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    sg0, sg1, sg2 = sgn * sq(c0), sgn * sq(c1), sgn * sq(c2)

    # x coplanar with the face but outside it: the face contributes nothing
    eps_s = 1e-10
    skip = (np.abs(sg0) <= eps_s) | (np.abs(sg1) <= eps_s) | (np.abs(sg2) <= eps_s)
    keep = ~(skip | on_face)

    w0 = (th0 - c1 * th2 - c2 * th1) / safe(d0 * s1_ * sg2)
    w1 = (th1 - c2 * th0 - c0 * th2) / safe(d1 * s2_ * sg0)
    w2 = (th2 - c0 * th1 - c1 * th0) / safe(d2 * s0_ * sg1)

    acc = np.zeros((n, nv), dtype=np.float64)
    rows = np.arange(n)[:, None]
    np.add.at(acc, (np.broadcast_to(rows, w0.shape), np.broadcast_to(i0, w0.shape)), np.where(keep, w0, 0.0))
    np.add.at(acc, (np.broadcast_to(rows, w1.shape), np.broadcast_to(i1, w1.shape)), np.where(keep, w1, 0.0))
    np.add.at(acc, (np.broadcast_to(rows, w2.shape), np.broadcast_to(i2, w2.shape)), np.where(keep, w2, 0.0))

    # points sitting exactly on a face: 2-D barycentric weights of that face only
    hit_rows, hit_faces = np.nonzero(on_face)
    if len(hit_rows):
        first = {}
        for r, f in zip(hit_rows, hit_faces):
            first.setdefault(r, f)
        for r, f in first.items():
            acc[r] = 0.0
            acc[r, faces[f, 0]] = s0_[r, f] * d1[r, f] * d2[r, f]
            acc[r, faces[f, 1]] = s1_[r, f] * d2[r, f] * d0[r, f]
            acc[r, faces[f, 2]] = s2_[r, f] * d0[r, f] * d1[r, f]

    vertex_rows = np.nonzero(at_vertex.any(axis=1))[0]
    for r in vertex_rows:
        acc[r] = 0.0
        acc[r, int(np.argmax(at_vertex[r]))] = 1.0

    total = acc.sum(axis=1, keepdims=True)
    return acc / np.where(np.abs(total) > 1e-300, total, 1e-300)


@_njit(cache=True)
def _mvc_kernel(points, verts, faces, scale):
    n = points.shape[0]
    nv = verts.shape[0]
    nf = faces.shape[0]
    out = np.zeros((n, nv))
    d = np.empty(nv)
    u = np.empty((nv, 3))
    eps_v = 1e-12 * scale
    for p in range(n):
        px, py, pz = points[p, 0], points[p, 1], points[p, 2]
        snapped = -1
        for j in range(nv):
            dx = verts[j, 0] - px
            dy = verts[j, 1] - py
            dz = verts[j, 2] - pz
            dj = np.sqrt(dx * dx + dy * dy + dz * dz)
            d[j] = dj
            if dj < eps_v:
                snapped = j
            inv = 1.0 / max(dj, 1e-300)
            u[j, 0] = dx * inv
            u[j, 1] = dy * inv
            u[j, 2] = dz * inv
        if snapped >= 0:
            out[p, snapped] = 1.0
            continue
        total = 0.0
        on_face = False
        for f in range(nf):
            i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
            l0 = np.sqrt((u[i1, 0] - u[i2, 0]) ** 2 + (u[i1, 1] - u[i2, 1]) ** 2 + (u[i1, 2] - u[i2, 2]) ** 2)
            l1 = np.sqrt((u[i2, 0] - u[i0, 0]) ** 2 + (u[i2, 1] - u[i0, 1]) ** 2 + (u[i2, 2] - u[i0, 2]) ** 2)
            l2 = np.sqrt((u[i0, 0] - u[i1, 0]) ** 2 + (u[i0, 1] - u[i1, 1]) ** 2 + (u[i0, 2] - u[i1, 2]) ** 2)
            th0 = 2.0 * np.arcsin(min(max(0.5 * l0, 0.0), 1.0))
            th1 = 2.0 * np.arcsin(min(max(0.5 * l1, 0.0), 1.0))
            th2 = 2.0 * np.arcsin(min(max(0.5 * l2, 0.0), 1.0))
            h = 0.5 * (th0 + th1 + th2)
            if np.pi - h < 1e-9:
                # point on this face: 2-D barycentric weights of the face only
                for j in range(nv):
                    out[p, j] = 0.0
                w0 = np.sin(th0) * d[i1] * d[i2]
                w1 = np.sin(th1) * d[i2] * d[i0]
                w2 = np.sin(th2) * d[i0] * d[i1]
                tot = w0 + w1 + w2
                out[p, i0] = w0 / tot
                out[p, i1] = w1 / tot
                out[p, i2] = w2 / tot
                on_face = True
                break
            sin_h = np.sin(h)
            s0 = np.sin(th0)
            s1 = np.sin(th1)
            s2 = np.sin(th2)
            c0 = 2.0 * sin_h * np.sin(h - th0) / max(s1 * s2, 1e-300) - 1.0
            c1 = 2.0 * sin_h * np.sin(h - th1) / max(s2 * s0, 1e-300) - 1.0
            c2 = 2.0 * sin_h * np.sin(h - th2) / max(s0 * s1, 1e-300) - 1.0
            det = (u[i0, 0] * (u[i1, 1] * u[i2, 2] - u[i1, 2] * u[i2, 1])
                   - u[i0, 1] * (u[i1, 0] * u[i2, 2] - u[i1, 2] * u[i2, 0])
                   + u[i0, 2] * (u[i1, 0] * u[i2, 1] - u[i1, 1] * u[i2, 0]))
            sgn = 1.0 if det >= 0.0 else -1.0
            sq0 = sgn * np.sqrt(max(1.0 - c0 * c0, 0.0))
            sq1 = sgn * np.sqrt(max(1.0 - c1 * c1, 0.0))
            sq2 = sgn * np.sqrt(max(1.0 - c2 * c2, 0.0))
            if abs(sq0) <= 1e-10 or abs(sq1) <= 1e-10 or abs(sq2) <= 1e-10:
                continue
            w0 = (th0 - c1 * th2 - c2 * th1) / (d[i0] * s1 * sq2)
            w1 = (th1 - c2 * th0 - c0 * th2) / (d[i1] * s2 * sq0)
            w2 = (th2 - c0 * th1 - c1 * th0) / (d[i2] * s0 * sq1)
            out[p, i0] += w0
            out[p, i1] += w1
            out[p, i2] += w2
            total += w0 + w1 + w2
        if not on_face:
            inv = 1.0 / total if abs(total) > 1e-300 else 1e300
            for j in range(nv):
                out[p, j] *= inv
    return out


def mvc_weights(cage: TriMesh, x) -> CageWeights:
    """MVC weights of one strictly interior point (partition of unity,
    linear precision)."""
    x = _require_strict_interior(cage, x)
    return CageWeights(mvc_weights_batch(cage, x)[0])


# ---------------------------------------------------------------------------
# Green coordinates.
#
# From Green's third identity for the coordinate functions on the cage volume:
#   x = sum_i phi_i(x) v_i + sum_k psi_k(x) n_k
# with
#   phi contribution of face t for corner i:
#       (1/4pi) * [ lambda_i(p) * Omega_t + dist * (grad_i . E_t) ]
#   psi_k = (1/4pi) * integral over t_k of 1/r
# where p is the foot of x on the face plane, Omega_t the signed solid angle
# (van Oosterom & Strackee), E_t = -sum_edges (edge integral of 1/r) * conormal,
# lambda_i the linearly extended barycentric hat, grad_i its in-plane gradient.
# All terms are closed-form, finite for any off-surface point, and contain no
# 1/dist factor, so evaluation stays stable arbitrarily close to face planes.

def _gc_face_statics(cage: TriMesh):
    tri = cage.triangles()
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    nrm = np.cross(b - a, c - a)
    two_area = np.linalg.norm(nrm, axis=1)
    n_hat = nrm / np.maximum(two_area, 1e-300)[:, None]
    area = 0.5 * two_area
    edges = np.stack([b - a, c - b, a - c], axis=1)           # (F,3edges,3)
    elen = np.linalg.norm(edges, axis=2)
    t_hat = edges / np.maximum(elen, 1e-300)[:, :, None]
    m_hat = np.cross(t_hat, n_hat[:, None, :])                # outward conormals
    grads = np.stack([
        np.cross(n_hat, c - b),
        np.cross(n_hat, a - c),
        np.cross(n_hat, b - a),
    ], axis=1) / np.maximum(two_area, 1e-300)[:, None, None]  # (F,3corners,3)
    return a, b, c, n_hat, area, elen, t_hat, m_hat, grads


def green_weights_batch(cage: TriMesh, points, chunk_elems=6_000_000, use_kernel=None):
    """GC vertex and face weights for a batch of interior points.

    Returns ``(phi (N, V), psi (N, F))``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n_pts = len(points)
    counters.add(CoordinateKind.GC, n_pts)
    nv, nf = cage.num_vertices, cage.num_faces
    statics = _gc_face_statics(cage)
    if use_kernel is None:
        use_kernel = _HAVE_NUMBA
    if use_kernel and _HAVE_NUMBA:
        a, b, c, n_hat, area, elen, t_hat, m_hat, grads = statics
        return _gc_kernel(points, cage.faces.astype(np.int64), nv,
                          a, b, c, n_hat, area, elen, t_hat, m_hat, grads)
    phi = np.zeros((n_pts, nv), dtype=np.float64)
    psi = np.zeros((n_pts, nf), dtype=np.float64)
    step = max(1, int(chunk_elems // max(nf * 16, 1)))
    for s in range(0, n_pts, step):
        ph, ps = _gc_chunk(cage.faces, nv, statics, points[s:s + step])
        phi[s:s + step] = ph
        psi[s:s + step] = ps
    return phi, psi


@_njit(cache=True)
def _gc_kernel(points, faces, nv, fa, fb, fc, n_hat, area, elen, t_hat, m_hat, grads):
    n = points.shape[0]
    nf = faces.shape[0]
    inv4pi = 1.0 / (4.0 * np.pi)
    phi = np.zeros((n, nv))
    psi = np.zeros((n, nf))
    v = np.empty((3, 3))
    r = np.empty(3)
    q = np.empty((3, 3))
    ex = np.empty(3)
    for p in range(n):
        px, py, pz = points[p, 0], points[p, 1], points[p, 2]
        for f in range(nf):
            nx, ny, nz = n_hat[f, 0], n_hat[f, 1], n_hat[f, 2]
            v[0, 0] = fa[f, 0] - px
            v[0, 1] = fa[f, 1] - py
            v[0, 2] = fa[f, 2] - pz
            v[1, 0] = fb[f, 0] - px
            v[1, 1] = fb[f, 1] - py
            v[1, 2] = fb[f, 2] - pz
            v[2, 0] = fc[f, 0] - px
            v[2, 1] = fc[f, 1] - py
            v[2, 2] = fc[f, 2] - pz
            for k in range(3):
                r[k] = np.sqrt(v[k, 0] ** 2 + v[k, 1] ** 2 + v[k, 2] ** 2)
            dd = v[0, 0] * nx + v[0, 1] * ny + v[0, 2] * nz
            ab = v[0, 0] * v[1, 0] + v[0, 1] * v[1, 1] + v[0, 2] * v[1, 2]
            bc = v[1, 0] * v[2, 0] + v[1, 1] * v[2, 1] + v[1, 2] * v[2, 2]
            ca = v[2, 0] * v[0, 0] + v[2, 1] * v[0, 1] + v[2, 2] * v[0, 2]
            den = r[0] * r[1] * r[2] + ab * r[2] + bc * r[0] + ca * r[1]
            omega = 2.0 * np.arctan2(2.0 * area[f] * dd, den)
            # foot of the query point and in-plane offsets
            for k in range(3):
                q[k, 0] = v[k, 0] - dd * nx
                q[k, 1] = v[k, 1] - dd * ny
                q[k, 2] = v[k, 2] - dd * nz
            twoa = 2.0 * area[f]
            cx = q[1, 1] * q[2, 2] - q[1, 2] * q[2, 1]
            cy = q[1, 2] * q[2, 0] - q[1, 0] * q[2, 2]
            cz = q[1, 0] * q[2, 1] - q[1, 1] * q[2, 0]
            lam0 = (cx * nx + cy * ny + cz * nz) / twoa
            cx = q[2, 1] * q[0, 2] - q[2, 2] * q[0, 1]
            cy = q[2, 2] * q[0, 0] - q[2, 0] * q[0, 2]
            cz = q[2, 0] * q[0, 1] - q[2, 1] * q[0, 0]
            lam1 = (cx * nx + cy * ny + cz * nz) / twoa
            lam2 = 1.0 - lam0 - lam1

            abs_d = abs(dd)
            ex[0] = 0.0
            ex[1] = 0.0
            ex[2] = 0.0
            contrib = 0.0
            for e in range(3):
                e1 = (e + 1) % 3
                ls = elen[f, e]
                rs = r[e]
                re = r[e1]
                eint = np.log(max((rs + re + ls) / max(rs + re - ls, 1e-300), 1e-300))
                ex[0] -= eint * m_hat[f, e, 0]
                ex[1] -= eint * m_hat[f, e, 1]
                ex[2] -= eint * m_hat[f, e, 2]
                s0 = q[e, 0] * t_hat[f, e, 0] + q[e, 1] * t_hat[f, e, 1] + q[e, 2] * t_hat[f, e, 2]
                s1 = s0 + ls
                te = q[e, 0] * m_hat[f, e, 0] + q[e, 1] * m_hat[f, e, 1] + q[e, 2] * m_hat[f, e, 2]
                at = abs(te)
                j = eint
                if at > 1e-12:
                    j += (abs_d / at) * (np.arctan(abs_d * s1 / (at * max(re, 1e-300)))
                                         - np.arctan(abs_d * s0 / (at * max(rs, 1e-300)))
                                         - np.arctan(s1 / at) + np.arctan(s0 / at))
                contrib += te * j
            psi[p, f] = contrib * inv4pi
            g0 = grads[f, 0, 0] * ex[0] + grads[f, 0, 1] * ex[1] + grads[f, 0, 2] * ex[2]
            g1 = grads[f, 1, 0] * ex[0] + grads[f, 1, 1] * ex[1] + grads[f, 1, 2] * ex[2]
            g2 = grads[f, 2, 0] * ex[0] + grads[f, 2, 1] * ex[1] + grads[f, 2, 2] * ex[2]
            phi[p, faces[f, 0]] += inv4pi * (lam0 * omega + dd * g0)
            phi[p, faces[f, 1]] += inv4pi * (lam1 * omega + dd * g1)
            phi[p, faces[f, 2]] += inv4pi * (lam2 * omega + dd * g2)
    return phi, psi


def _gc_chunk(faces, nv, statics, pts):
    a, b, c, n_hat, area, elen, t_hat, m_hat, grads = statics
    n = len(pts)
    nf = len(faces)
    inv4pi = 1.0 / (4.0 * np.pi)

    va = a[None] - pts[:, None, :]
    vb = b[None] - pts[:, None, :]
    vc = c[None] - pts[:, None, :]
    ra = np.linalg.norm(va, axis=2)
    rb = np.linalg.norm(vb, axis=2)
    rc = np.linalg.norm(vc, axis=2)

    d = np.einsum("nfi,fi->nf", va, n_hat)                    # signed plane distance
    num = 2.0 * area[None] * d
    den = (ra * rb * rc + np.einsum("nfi,nfi->nf", va, vb) * rc
           + np.einsum("nfi,nfi->nf", vb, vc) * ra
           + np.einsum("nfi,nfi->nf", vc, va) * rb)
    omega = 2.0 * np.arctan2(num, den)

    foot = d[:, :, None] * n_hat[None]
    # linearly extended barycentrics of the foot point
    qa, qb, qc = va - foot, vb - foot, vc - foot
    twoA = 2.0 * area[None]
    lam0 = np.einsum("nfi,fi->nf", np.cross(qb, qc), n_hat) / twoA
    lam1 = np.einsum("nfi,fi->nf", np.cross(qc, qa), n_hat) / twoA
    lam2 = 1.0 - lam0 - lam1

    abs_d = np.abs(d)
    E = np.zeros((n, nf, 3))
    psi = np.zeros((n, nf))
    edge_starts = (va, vb, vc)
    edge_ends = (vb, vc, va)
    r_starts = (ra, rb, rc)
    r_ends = (rb, rc, ra)
    for e in range(3):
        sv, ev = edge_starts[e], edge_ends[e]
        rs, re = r_starts[e], r_ends[e]
        L = elen[None, :, e]
        # edge integral of 1/r, symmetric log form (singular only on the segment)
        denom = np.maximum(rs + re - L, 1e-300)
        eint = np.log(np.maximum((rs + re + L) / denom, 1e-300))
        E -= eint[:, :, None] * m_hat[None, :, e, :]

        q = sv - foot
        s0 = np.einsum("nfi,fi->nf", q, t_hat[:, e, :])
        s1 = s0 + L
        te = np.einsum("nfi,fi->nf", q, m_hat[:, e, :])
        at = np.abs(te)
        safe_at = np.maximum(at, 1e-300)
        good = at > 1e-12
        atan_part = (
            np.arctan(abs_d * s1 / (safe_at * np.maximum(re, 1e-300)))
            - np.arctan(abs_d * s0 / (safe_at * np.maximum(rs, 1e-300)))
            - np.arctan(s1 / safe_at) + np.arctan(s0 / safe_at)
        )
        contrib = te * (eint + np.where(good, abs_d / safe_at * atan_part, 0.0))
        psi += contrib
    psi *= inv4pi

    phi = np.zeros((n, nv))
    lam = (lam0, lam1, lam2)
    for corner in range(3):
        g = grads[:, corner, :]
        contrib = inv4pi * (lam[corner] * omega + d * np.einsum("nfi,fi->nf", E, g))
        np.add.at(phi, (np.broadcast_to(np.arange(n)[:, None], contrib.shape),
                        np.broadcast_to(faces[:, corner], contrib.shape)), contrib)
    return phi, psi


def green_weights(cage: TriMesh, x) -> CageWeights:
    """GC weights of one strictly interior point; reconstruction with the
    source cage reproduces x."""
    x = _require_strict_interior(cage, x)
    phi, psi = green_weights_batch(cage, x)
    return CageWeights(phi[0], psi[0])


def gc_face_stretch(pair: CagePair):
    """Per-face GC stretch factors of the canonical cage relative to the
    deformed (source) cage; 1 when the cages coincide."""
    src = pair.deformed.triangles()
    dst = pair.canonical.triangles()
    u, v = src[:, 1] - src[:, 0], src[:, 2] - src[:, 0]
    up, vp = dst[:, 1] - dst[:, 0], dst[:, 2] - dst[:, 0]
    area = 0.5 * np.linalg.norm(np.cross(u, v), axis=1)
    uu = np.einsum("ij,ij->i", up, up)
    vv = np.einsum("ij,ij->i", vp, vp)
    uv = np.einsum("ij,ij->i", up, vp)
    s2 = (uu * np.einsum("ij,ij->i", v, v)
          - 2.0 * uv * np.einsum("ij,ij->i", u, v)
          + vv * np.einsum("ij,ij->i", u, u))
    return np.sqrt(np.maximum(s2, 0.0)) / np.maximum(np.sqrt(8.0) * area, 1e-300)


def gc_target_normals(pair: CagePair):
    """Stretch-scaled unit normals of the canonical cage, ready to contract
    with face weights."""
    n = pair.canonical.face_normals()
    return gc_face_stretch(pair)[:, None] * n


def apply_weights(weights: CageWeights, pair: CagePair, kind: CoordinateKind):
    """Map a point into canonical space by contracting its weights (computed
    against pair.deformed) with the canonical cage geometry."""
    w = weights.vertex_weights
    if len(w) != len(pair.canonical_vertices):
        raise ValueError(f"weight/vertex count mismatch: {len(w)} vs {len(pair.canonical_vertices)}")
    out = w @ pair.canonical_vertices
    if kind is CoordinateKind.GC:
        psi = weights.face_weights
        if len(psi) != pair.deformed.num_faces:
            raise ValueError(f"face weight count mismatch: {len(psi)} vs {pair.deformed.num_faces}")
        out = out + psi @ gc_target_normals(pair)
    elif len(weights.face_weights):
        raise ValueError(f"{kind.value} weights carry no face term")
    return out


# ---------------------------------------------------------------------------
# Harmonic coordinates: rasterize the cage onto the lattice, pin boundary
# nodes to the piecewise-linear hat basis at their closest surface point, and
# relax the interior with red-black Gauss-Seidel (coarse-to-fine warm start).

@dataclass(frozen=True)
class HarmonicGrid:
    weights: np.ndarray      # (V, nx, ny, nz) float32, exterior nodes hold 0
    node_class: np.ndarray   # (nx, ny, nz) uint8: NODE_EXTERIOR/BOUNDARY/INTERIOR
    domain: Aabb
    sweeps: int

    @property
    def res(self) -> int:
        return self.weights.shape[1]

    def valid_mask(self):
        return self.node_class != NODE_EXTERIOR

    def harmonic_residual(self) -> float:
        """max over interior nodes of |node - mean(6 neighbors)|."""
        u = self.weights.astype(np.float64)
        pad = np.pad(u, ((0, 0), (1, 1), (1, 1), (1, 1)))
        s = (pad[:, :-2, 1:-1, 1:-1] + pad[:, 2:, 1:-1, 1:-1]
             + pad[:, 1:-1, :-2, 1:-1] + pad[:, 1:-1, 2:, 1:-1]
             + pad[:, 1:-1, 1:-1, :-2] + pad[:, 1:-1, 1:-1, 2:])
        interior = self.node_class == NODE_INTERIOR
        if not interior.any():
            return 0.0
        res = np.abs(u - s / 6.0)[:, interior]
        return float(res.max())


def hc_default_domain(cage: TriMesh, res: int) -> Aabb:
    box = cage.bbox()
    cell = box.size / max(res - 5, 1)
    return box.expanded(2.0 * cell)


def _hc_level_data(cage: TriMesh, domain: Aabb, res: int):
    cells = classify_cells(cage, domain, res)
    if np.any(cells[0] == CELL_CROSSED) or np.any(cells[-1] == CELL_CROSSED) \
       or np.any(cells[:, 0] == CELL_CROSSED) or np.any(cells[:, -1] == CELL_CROSSED) \
       or np.any(cells[:, :, 0] == CELL_CROSSED) or np.any(cells[:, :, -1] == CELL_CROSSED):
        raise ValueError("cage surface touches the solve domain boundary; enlarge the domain")
    nodes = classify_nodes(cells)
    bnd = np.argwhere(nodes == NODE_BOUNDARY)
    pos = domain.min + bnd * gridutil.cell_sizes(domain.min, domain.max, res)
    _, fidx, bary = closest_point_on_mesh(cage, pos)
    hat = np.zeros((len(bnd), cage.num_vertices), dtype=np.float64)
    rows = np.arange(len(bnd))
    for corner in range(3):
        np.add.at(hat, (rows, cage.faces[fidx, corner]), bary[:, corner])
    return nodes, bnd, hat


def _red_black_masks(nodes):
    idx = np.indices(nodes.shape).sum(axis=0)
    interior = nodes == NODE_INTERIOR
    return interior & (idx % 2 == 0), interior & (idx % 2 == 1)


try:
    from numba import njit as _njit

    @_njit(cache=True)
    def _gs_kernel(vals, red_idx, black_idx, s0, s1, s2, tol, max_sweeps, min_sweeps):
        # vals is (N_nodes, B) so one node's solves are contiguous
        nb = vals.shape[1]
        sweeps = 0
        for sweep in range(1, max_sweeps + 1):
            delta = 0.0
            for phase in range(2):
                idx = red_idx if phase == 0 else black_idx
                for t in range(idx.size):
                    i = idx[t]
                    for b in range(nb):
                        s = (vals[i - s0, b] + vals[i + s0, b]
                             + vals[i - s1, b] + vals[i + s1, b]
                             + vals[i - s2, b] + vals[i + s2, b])
                        new = s * np.float32(1.0 / 6.0)
                        d = abs(new - vals[i, b])
                        if d > delta:
                            delta = d
                        vals[i, b] = new
            sweeps = sweep
            if sweep >= min_sweeps and delta < tol:
                return sweeps
        return sweeps

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is present in the supported env
    _HAVE_NUMBA = False


def _gs_relax(u, red, black, tol, max_sweeps, min_sweeps=4):
    """Red-black Gauss-Seidel on the 6-neighbor Laplace equation.

    ``u`` is (B, n, n, n) with Dirichlet/exterior values preset; only nodes in
    the red/black masks are updated. Returns the sweep count.
    """
    flat = u.reshape(u.shape[0], -1)
    red_idx = np.nonzero(red.ravel())[0]
    black_idx = np.nonzero(black.ravel())[0]
    if len(red_idx) == 0 and len(black_idx) == 0:
        return 0

    if _HAVE_NUMBA:
        # interior nodes never sit on the grid border, so plain stride offsets
        # are always in bounds
        n1, n2 = u.shape[2], u.shape[3]
        vals = np.ascontiguousarray(flat.T)
        sweeps = int(_gs_kernel(vals, red_idx, black_idx,
                                np.int64(n1 * n2), np.int64(n2), np.int64(1),
                                np.float32(tol), np.int64(max_sweeps), np.int64(min_sweeps)))
        flat[:] = vals.T
        return sweeps

    def neighbor_sum():
        pad = np.pad(u, ((0, 0), (1, 1), (1, 1), (1, 1)))
        return (pad[:, :-2, 1:-1, 1:-1] + pad[:, 2:, 1:-1, 1:-1]
                + pad[:, 1:-1, :-2, 1:-1] + pad[:, 1:-1, 2:, 1:-1]
                + pad[:, 1:-1, 1:-1, :-2] + pad[:, 1:-1, 1:-1, 2:]).reshape(u.shape[0], -1)

    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        delta = 0.0
        for idx in (red_idx, black_idx):
            if len(idx) == 0:
                continue
            s = neighbor_sum()
            new = s[:, idx] * np.float32(1.0 / 6.0)
            delta = max(delta, float(np.abs(new - flat[:, idx]).max(initial=0.0)))
            flat[:, idx] = new
        if sweeps >= min_sweeps and delta < tol:
            return sweeps
    return sweeps


def hc_grid_solve(cage: TriMesh, res: int, domain: Aabb | None = None,
                  tol: float = 1e-5, max_sweeps: int = 10000,
                  batch_bytes: int = 512 * 2 ** 20) -> HarmonicGrid:
    """Solve harmonic coordinates for every cage vertex on an n^3 lattice.

    Boundary nodes (incident to a cell crossed by the cage) carry Dirichlet
    values from the hat basis at their closest surface point; interior nodes
    satisfy the discrete Laplace equation; exterior nodes hold 0 and are
    flagged invalid. Coarser lattices of the same domain warm-start the solve
    so the stated tolerance is reached in a handful of fine sweeps.
    """
    if not is_watertight(cage):
        raise NotWatertightError("harmonic solve requires a watertight cage")
    if domain is None:
        domain = hc_default_domain(cage, res)
    nv = cage.num_vertices

    levels = [int(res)]
    while levels[-1] > 24:
        levels.append(max(17, (levels[-1] + 1) // 2))
    levels = levels[::-1]
    # coarse warm-start levels carry their own domain so the cage keeps a
    # 2-cell margin at every resolution; the requested domain is used at `res`
    level_domain = {r: (domain if r == res else hc_default_domain(cage, r)) for r in levels}
    level_data = {r: _hc_level_data(cage, level_domain[r], r) for r in levels}

    per_grid = levels[-1] ** 3 * 4
    batch = max(1, min(nv, int(batch_bytes // max(per_grid, 1))))
    weights = np.zeros((nv, res, res, res), dtype=np.float32)
    total_sweeps = 0
    fine_nodes, _, _ = level_data[res]

    for v0 in range(0, nv, batch):
        v1 = min(nv, v0 + batch)
        prev_u = None
        prev_res = None
        for r in levels:
            nodes, bnd, hat = level_data[r]
            dom = level_domain[r]
            u = np.zeros((v1 - v0, r, r, r), dtype=np.float32)
            if prev_u is not None:
                # warm start: resample the coarser solution at this level's nodes
                pdom = level_domain[prev_res]
                pts = gridutil.node_positions(dom.min, dom.max, r).reshape(-1, 3)
                idx, frac, _ = gridutil.locate(pdom.min, pdom.max, prev_res, pts)
                vals = gridutil.trilinear_gather(
                    prev_u.reshape(v1 - v0, -1).T.astype(np.float64), prev_res, idx, frac)
                u = vals.T.reshape(v1 - v0, r, r, r).astype(np.float32)
                u[:, nodes == NODE_EXTERIOR] = 0.0
            u[:, bnd[:, 0], bnd[:, 1], bnd[:, 2]] = hat[:, v0:v1].T.astype(np.float32)
            red, black = _red_black_masks(nodes)
            cap = max_sweeps if r == res else max_sweeps // 2
            total_sweeps += _gs_relax(u, red, black, tol, cap)
            prev_u, prev_res = u, r
        weights[v0:v1] = prev_u
        counters.hc_solve_nodes += (v1 - v0) * int((fine_nodes != NODE_EXTERIOR).sum())

    return HarmonicGrid(weights, fine_nodes, domain, total_sweeps)


def hc_weights_at(grid: HarmonicGrid, points):
    """Trilinear HC weights at arbitrary points inside the solve domain."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    idx, frac, inside = gridutil.locate(grid.domain.min, grid.domain.max, grid.res, points)
    nv = grid.weights.shape[0]
    vals = gridutil.trilinear_gather(
        grid.weights.reshape(nv, -1).T.astype(np.float64), grid.res, idx, frac)
    vals[~inside] = 0.0
    return vals
