"""Deformed-field evaluation via lattice-precomputed cage coordinates.

The expensive closed-form coordinate evaluation happens once per lattice node
(O(n^3), independent of image size, view count and samples per ray); render
queries trilinearly interpolate. The deformed field splits three ways:

* outside both cages: the canonical field, untouched;
* inside the canonical cage only: cleared to ((0,0,0), 0);
* inside the deformed cage: canonical field sampled at the mapped position
  with the finite-difference-mapped view direction (this wins when a point
  is inside both cages).
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from . import coords as cc
from . import gridutil
from .coords import CageWeights, CoordinateKind
from .geometry import (
    Aabb,
    CagePair,
    NODE_BOUNDARY,
    NODE_EXTERIOR,
    NODE_INTERIOR,
    TriMesh,
    classify_cells,
    classify_nodes,
    closest_point_on_mesh,
    pseudo_normals,
    winding_number,
)

_CWG_MAGIC = b"CWG1"
_KIND_CODE = {CoordinateKind.MVC: 0, CoordinateKind.HC: 1, CoordinateKind.GC: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


class StencilInvalidError(ValueError):
    """A trilinear stencil touched an invalid node; caller should fall back."""


@dataclass
class WarpCounters:
    fallback_weight_evals: int = 0
    mixed_membership_tests: int = 0
    degenerate_direction_diffs: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, name, n):
        with self._lock:
            setattr(self, name, getattr(self, name) + int(n))

    def reset(self):
        with self._lock:
            self.fallback_weight_evals = 0
            self.mixed_membership_tests = 0
            self.degenerate_direction_diffs = 0


counters = WarpCounters()


@dataclass(frozen=True)
class DeformConfig:
    kind: CoordinateKind
    n: int = 128
    precise: bool = False
    delta_t: float | None = None  # defaults to 5e-3 x deformed-cage bbox diagonal

    def __post_init__(self):
        object.__setattr__(self, "kind", CoordinateKind(self.kind))
        if self.precise and not self.kind.has_closed_form:
            raise ValueError("harmonic coordinates have no closed form; "
                             "precise mode is unavailable (use a grid)")
        if not self.precise and self.n < 16:
            raise ValueError(f"grid resolution n={self.n} too small (minimum 16)")

    def resolve_delta_t(self, pair: CagePair) -> float:
        if self.delta_t is not None:
            return float(self.delta_t)
        return 5e-3 * pair.deformed.bbox().diagonal


def grid_domain(cage: TriMesh, n: int) -> Aabb:
    """Deformed-cage bbox plus a 2-cell margin on every side."""
    box = cage.bbox()
    cell = box.size / max(n - 5, 1)
    return box.expanded(2.0 * cell)


@dataclass(frozen=True)
class CoordGrid:
    """n^3 lattice of precomputed cage weights with a validity mask.

    Valid nodes cover the strict interior of the deformed cage plus a 2-cell
    dilation so every interior sample has a complete trilinear stencil.
    """

    kind: CoordinateKind
    domain: Aabb
    res: int
    vertex_weights: np.ndarray             # (n, n, n, V) float32
    face_weights: np.ndarray | None        # (n, n, n, F) float32, GC only
    valid: np.ndarray                      # (n, n, n) bool

    @property
    def num_vertices(self) -> int:
        return self.vertex_weights.shape[-1]

    @property
    def num_face_weights(self) -> int:
        return 0 if self.face_weights is None else self.face_weights.shape[-1]

    def valid_node_count(self) -> int:
        return int(self.valid.sum())


def _inside_node_mask(cage: TriMesh, domain: Aabb, n: int):
    """Boolean inside-flags for all lattice nodes: cheap cell classification
    plus exact winding checks for nodes whose cells the surface crosses."""
    cells = classify_cells(cage, domain, n)
    nodes = classify_nodes(cells)
    inside = nodes == NODE_INTERIOR
    near = np.argwhere(nodes == NODE_BOUNDARY)
    if len(near):
        pos = domain.min + near * gridutil.cell_sizes(domain.min, domain.max, n)
        w = winding_number(cage, pos)
        inside[near[:, 0], near[:, 1], near[:, 2]] = w > 0.5
    return inside


def _projected_interior_points(cage: TriMesh, pts, eps: float):
    """Closest surface points pushed inside by eps along the inward normal."""
    cp, fidx, bary = closest_point_on_mesh(cage, pts)
    n = pseudo_normals(cage, fidx, bary)
    return cp - eps * n


def precompute_coord_grid(pair: CagePair, kind: CoordinateKind, n: int,
                          chunk: int = 200_000) -> CoordGrid:
    """Evaluate cage coordinates at every valid lattice node.

    MVC/GC use their closed forms (nodes in the dilation ring outside the
    strict interior are evaluated at the closest interior point projected
    inward by eps_surf); HC comes from the grid Laplace solve on the same
    lattice, boundary nodes keeping their Dirichlet values.
    """
    kind = CoordinateKind(kind)
    if n < 16:
        raise ValueError(f"grid resolution n={n} too small (minimum 16)")
    cage = pair.deformed
    domain = grid_domain(cage, n)

    if kind is CoordinateKind.HC:
        hg = cc.hc_grid_solve(cage, n, domain)
        vw = np.ascontiguousarray(np.moveaxis(hg.weights, 0, -1))
        valid = hg.node_class != NODE_EXTERIOR
        return CoordGrid(kind, domain, n, vw.astype(np.float32), None, valid)

    inside = _inside_node_mask(cage, domain, n)
    valid = ndi.binary_dilation(inside, structure=np.ones((3, 3, 3), dtype=bool), iterations=2)
    nv = cage.num_vertices
    nf = cage.num_faces if kind is CoordinateKind.GC else 0
    vw = np.zeros((n, n, n, nv), dtype=np.float32)
    fw = np.zeros((n, n, n, nf), dtype=np.float32) if nf else None

    pos = gridutil.node_positions(domain.min, domain.max, n)
    eps = cc.surface_epsilon(cage)
    ring = valid & ~inside
    targets = [(inside, pos[inside]), (ring, None)]
    if ring.any():
        targets[1] = (ring, _projected_interior_points(cage, pos[ring], eps))

    for mask, pts in targets:
        if pts is None or len(pts) == 0:
            continue
        where = np.nonzero(mask)
        for s in range(0, len(pts), chunk):
            sl = slice(s, s + chunk)
            sel = (where[0][sl], where[1][sl], where[2][sl])
            if kind is CoordinateKind.MVC:
                vw[sel] = cc.mvc_weights_batch(cage, pts[sl]).astype(np.float32)
            else:
                phi, psi = cc.green_weights_batch(cage, pts[sl])
                vw[sel] = phi.astype(np.float32)
                fw[sel] = psi.astype(np.float32)
    return CoordGrid(kind, domain, n, vw, fw, valid)


def sample_weights(grid: CoordGrid, x) -> CageWeights:
    """Componentwise trilinear interpolation of the node weights at x.

    Raises StencilInvalidError when x is outside the grid or any of its 8
    stencil nodes is invalid; callers fall back to the closed form (MVC/GC)
    or to the nearest valid node (HC).
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    idx, frac, inside = gridutil.locate(grid.domain.min, grid.domain.max, grid.res, x)
    if not inside[0]:
        raise StencilInvalidError("sample point outside the coordinate grid domain")
    corners = gridutil.corner_flat_indices(grid.res, idx)
    if not grid.valid.reshape(-1)[corners[0]].all():
        raise StencilInvalidError("trilinear stencil touches invalid nodes")
    vw = gridutil.trilinear_gather(
        grid.vertex_weights.reshape(-1, grid.num_vertices), grid.res, idx, frac)[0]
    if grid.face_weights is not None:
        fwv = gridutil.trilinear_gather(
            grid.face_weights.reshape(-1, grid.num_face_weights), grid.res, idx, frac)[0]
        return CageWeights(vw, fwv)
    return CageWeights(vw)


# ---------------------------------------------------------------------------
# Membership acceleration

_CELL_ALL_OUT = 0
_CELL_MIXED = 1
_CELL_ALL_IN = 2


def _cell_reduce(node_flags):
    """Per-cell state from per-node flags: 0 none set, 2 all 8 set, 1 mixed."""
    s = np.zeros(tuple(np.array(node_flags.shape) - 1), dtype=np.uint8)
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                nx, ny, nz = node_flags.shape
                s += node_flags[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz]
    out = np.full(s.shape, _CELL_MIXED, dtype=np.uint8)
    out[s == 0] = _CELL_ALL_OUT
    out[s == 8] = _CELL_ALL_IN
    return out


class NodeOccupancy:
    """Binary inside-flags on an n^3 lattice, pre-reduced per cell, with exact
    winding verification for queries in cells whose 8-node stencil disagrees."""

    def __init__(self, cage: TriMesh, n: int, domain: Aabb | None = None):
        self.cage = cage
        self.res = int(n)
        self.domain = grid_domain(cage, n) if domain is None else domain
        self.inside = _inside_node_mask(cage, self.domain, self.res)
        self._cell_state = _cell_reduce(self.inside.astype(np.uint8)).reshape(-1)
        ncell = self.res - 1
        self._cell_strides = np.array([ncell * ncell, ncell, 1], dtype=np.int64)
        self._cell = self.domain.size / (self.res - 1.0)

    def lookup_states(self, points):
        """Per-point cell state (255 for out-of-domain points)."""
        points = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
        if gridutil._HAVE_NUMBA:
            out = np.empty(len(points), dtype=np.uint8)
            gridutil._cell_lookup_kernel(self._cell_state, self.res, self.res - 1,
                                         self.domain.min, self._cell, points, out)
            return out
        idx, _, inb = gridutil.locate(self.domain.min, self.domain.max, self.res, points)
        out = self._cell_state[idx @ self._cell_strides]
        out[~inb] = 255
        return out

    def resolve(self, points, states):
        out = states == _CELL_ALL_IN
        mixed = states == _CELL_MIXED
        nmixed = int(mixed.sum())
        if nmixed:
            counters.add("mixed_membership_tests", nmixed)
            out[mixed] = winding_number(self.cage, points[mixed]) > 0.5
        return out

    def query(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return self.resolve(points, self.lookup_states(points))


# ---------------------------------------------------------------------------
# Deformer: bundles everything needed to evaluate the deformed field

class Deformer:
    """Precomputed state for rendering one cage deformation of one field."""

    def __init__(self, fld, pair: CagePair, config: DeformConfig,
                 grid: CoordGrid | None = None):
        self.field = fld
        self.pair = pair
        self.config = config
        self.delta_t = config.resolve_delta_t(pair)
        self.grid = None
        self._mapped = None
        self._nearest_valid = None
        self._stencil_ok = None
        if not config.precise:
            self.grid = grid if grid is not None else precompute_coord_grid(pair, config.kind, config.n)
            if self.grid.kind != config.kind or self.grid.res != config.n:
                raise ValueError("coordinate grid does not match the deform config")
            self._mapped = self._build_mapped_grid()
            # cells whose full stencil is valid, so one gather replaces eight
            self._stencil_ok = np.ascontiguousarray(
                _cell_reduce(self.grid.valid.astype(np.uint8))).reshape(-1)
        # the deformed-cage occupancy shares the coordinate grid lattice so a
        # single locate() serves membership, validity and interpolation
        occ_domain = self.grid.domain if self.grid is not None else None
        self.occ_deformed = NodeOccupancy(pair.deformed, config.n, domain=occ_domain)
        self.occ_canonical = NodeOccupancy(pair.canonical, config.n)
        if config.kind is CoordinateKind.GC:
            self._gc_normals = cc.gc_target_normals(pair)

    def _build_mapped_grid(self):
        # trilinear interpolation commutes with the fixed linear contraction
        # against the canonical cage, so interpolating per-node mapped
        # positions is exactly interpolating the weights and then applying
        # them; per-sample cost drops from 8*(V+F) floats to 8*3.
        g = self.grid
        vw = g.vertex_weights.reshape(-1, g.num_vertices)
        mapped = vw @ self.pair.canonical_vertices.astype(np.float32)
        if g.kind is CoordinateKind.GC:
            tn = cc.gc_target_normals(self.pair).astype(np.float32)
            mapped = mapped + g.face_weights.reshape(-1, g.num_face_weights) @ tn
        mapped[~g.valid.reshape(-1)] = 0.0
        return np.ascontiguousarray(mapped, dtype=np.float32)

    def _nearest_valid_map(self):
        # flat index of the nearest valid node, for HC stencil fallback
        if self._nearest_valid is None:
            inv = ~self.grid.valid
            ind = ndi.distance_transform_edt(inv, return_distances=False, return_indices=True)
            n = self.grid.res
            self._nearest_valid = ((ind[0] * n + ind[1]) * n + ind[2]).reshape(-1)
        return self._nearest_valid

    def _phi_precise(self, points):
        if self.config.kind is CoordinateKind.MVC:
            w = cc.mvc_weights_batch(self.pair.deformed, points)
            return w @ self.pair.canonical_vertices
        phi, psi = cc.green_weights_batch(self.pair.deformed, points)
        return phi @ self.pair.canonical_vertices + psi @ self._gc_normals

    def _stencil_states(self, points):
        occ = self.occ_deformed
        if gridutil._HAVE_NUMBA:
            out = np.empty(len(points), dtype=np.uint8)
            gridutil._cell_lookup_kernel(self._stencil_ok, occ.res, occ.res - 1,
                                         occ.domain.min, occ._cell,
                                         np.ascontiguousarray(points), out)
            return out
        idx, _, inb = gridutil.locate(occ.domain.min, occ.domain.max, occ.res, points)
        out = self._stencil_ok[idx @ occ._cell_strides]
        out[~inb] = 255
        return out

    def _phi_stenciled(self, points, ok):
        g = self.grid
        out = np.empty((len(points), 3))
        sel = np.nonzero(ok)[0]
        if len(sel):
            pts_ok = np.ascontiguousarray(points[sel])
            if gridutil._HAVE_NUMBA:
                sub = np.empty((len(sel), 3))
                gridutil._trilinear3_kernel(self._mapped, g.res, g.domain.min,
                                            self.occ_deformed._cell, pts_ok, sub)
                out[sel] = sub
            else:
                idx, frac, _ = gridutil.locate(g.domain.min, g.domain.max, g.res, pts_ok)
                out[sel] = gridutil.trilinear_gather(
                    self._mapped.astype(np.float64), g.res, idx, frac)
        bad = np.nonzero(~ok)[0]
        if len(bad):
            counters.add("fallback_weight_evals", len(bad))
            if self.config.kind is CoordinateKind.HC:
                near = self._nearest_valid_map()
                idx, _, _ = gridutil.locate(g.domain.min, g.domain.max, g.res, points[bad])
                n = g.res
                flat_node = (idx[:, 0] * n + idx[:, 1]) * n + idx[:, 2]
                out[bad] = self._mapped[near[flat_node]]
            else:
                out[bad] = self._phi_precise(points[bad])
        return out

    def phi_x_batch(self, points):
        """Deformed-to-canonical position map for points inside the deformed cage."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.config.precise:
            return self._phi_precise(points)
        ok = self._stencil_states(points) == _CELL_ALL_IN
        return self._phi_stenciled(points, ok)

    def _offset_usable(self, pts):
        # in grid mode an offset point only needs a complete interpolation
        # stencil for its one-sided difference; that keeps the exact winding
        # tests for the rendering membership decisions, where they matter
        if self.config.precise:
            return self.occ_deformed.query(pts)
        return self._stencil_states(pts) == _CELL_ALL_IN

    def phi_d_batch(self, points, dirs, phi_at_points=None, active_mask=None):
        """Finite-difference direction map, forward with backward fallback.

        ``active_mask`` limits the work to flagged samples; the rest keep
        their input direction.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        dt = self.delta_t
        if phi_at_points is None:
            phi_at_points = self.phi_x_batch(points)
        fwd_pts = points + dt * dirs
        fwd_ok = self._offset_usable(fwd_pts)
        if active_mask is not None:
            fwd_ok &= active_mask
        out = dirs.copy()
        diff = np.zeros_like(points)
        if fwd_ok.any():
            diff[fwd_ok] = self.phi_x_batch(fwd_pts[fwd_ok]) - phi_at_points[fwd_ok]
        use_b = ~fwd_ok if active_mask is None else active_mask & ~fwd_ok
        if use_b.any():
            bwd_pts = points[use_b] - dt * dirs[use_b]
            bwd_ok = self._offset_usable(bwd_pts)
            sel = np.nonzero(use_b)[0][bwd_ok]
            if len(sel):
                diff[sel] = phi_at_points[sel] - self.phi_x_batch(bwd_pts[bwd_ok])
            use_b = np.zeros(len(points), dtype=bool)
            use_b[sel] = True
        active = fwd_ok | use_b
        norms = np.linalg.norm(diff, axis=1)
        good = active & (norms > 1e-12 * dt)
        ndegen = int((active & ~good).sum())
        if ndegen:
            counters.add("degenerate_direction_diffs", ndegen)
        out[good] = diff[good] / norms[good, None]
        return out

    def classify(self, points):
        """Which of the three deformed-field cases applies: 1 = untouched,
        2 = canonical-cage-only (cleared), 3 = inside the deformed cage."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        in_v = self.occ_deformed.query(points)
        out = np.ones(len(points), dtype=np.uint8)
        rest = ~in_v
        if rest.any():
            in_vc = self.occ_canonical.query(points[rest])
            out[np.nonzero(rest)[0][in_vc]] = 2
        out[in_v] = 3
        return out

    def query(self, points, dirs):
        """(rgb, sigma) of the deformed field."""
        points = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        in_v = self.occ_deformed.query(points)
        rgb = np.zeros((len(points), 3))
        sigma = np.zeros(len(points))
        rest = np.nonzero(~in_v)[0]
        if len(rest):
            in_vc = self.occ_canonical.query(points[rest])
            m1 = rest[~in_vc]  # outside both cages: canonical field untouched
            if len(m1):
                rgb[m1], sigma[m1] = self.field.sample(points[m1], dirs[m1])
            # canonical-cage-only points stay ((0,0,0), 0)
        m3 = np.nonzero(in_v)[0]
        if len(m3):
            if self.config.precise:
                px = self._phi_precise(points[m3])
            else:
                px = self._phi_stenciled(points[m3], self._stencil_states(points[m3]) == _CELL_ALL_IN)
            pd = self.phi_d_batch(points[m3], dirs[m3], phi_at_points=px)
            rgb[m3], sigma[m3] = self.field.sample(px, pd)
        return rgb, sigma


# ---------------------------------------------------------------------------
# Contract-level single-point operations

def _deformer_for(pair, grid_or_config, fld=None) -> Deformer:
    if isinstance(grid_or_config, CoordGrid):
        config = DeformConfig(kind=grid_or_config.kind, n=grid_or_config.res)
        return Deformer(fld, pair, config, grid=grid_or_config)
    return Deformer(fld, pair, grid_or_config)


def phi_x(pair: CagePair, grid_or_config, x):
    """Map one point from deformed to canonical space."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    if winding_number(pair.deformed, x[None])[0] <= 0.5:
        raise ValueError("phi_x is defined only inside the deformed cage")
    if isinstance(grid_or_config, CoordGrid):
        grid = grid_or_config
        try:
            w = sample_weights(grid, x)
            return cc.apply_weights(w, pair, grid.kind)
        except StencilInvalidError:
            if grid.kind is CoordinateKind.HC:
                d = _deformer_for(pair, grid)
                return d.phi_x_batch(x[None])[0]
            counters.add("fallback_weight_evals", 1)
            kind = grid.kind
    else:
        config = grid_or_config
        if not config.precise:
            return phi_x(pair, precompute_coord_grid(pair, config.kind, config.n), x)
        kind = config.kind
    if kind is CoordinateKind.MVC:
        w = CageWeights(cc.mvc_weights_batch(pair.deformed, x[None])[0])
    else:
        phi, psi = cc.green_weights_batch(pair.deformed, x[None])
        w = CageWeights(phi[0], psi[0])
    return cc.apply_weights(w, pair, kind)


def phi_d(pair: CagePair, grid_or_config, x, d, delta_t=None):
    """Map one view direction from deformed to canonical space."""
    dfm = _deformer_for(pair, grid_or_config)
    if delta_t is not None:
        dfm.delta_t = float(delta_t)
    return dfm.phi_d_batch(np.asarray(x, dtype=np.float64)[None],
                           np.asarray(d, dtype=np.float64)[None])[0]


def deformed_query(fld, pair: CagePair, grid: CoordGrid, config: DeformConfig, x, d):
    """Single-shot deformed-field query; build a Deformer for hot loops."""
    dfm = Deformer(fld, pair, config, grid=grid if not config.precise else None)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rgb, sigma = dfm.query(x, d)
    return (rgb[0], float(sigma[0])) if single else (rgb, sigma)


# ---------------------------------------------------------------------------
# Binary cache ("CWG1"): per node a validity byte and float32 weights

def coord_grid_cache_key(cage: TriMesh, kind: CoordinateKind, n: int) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(cage.vertices, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(cage.faces, dtype="<i4").tobytes())
    h.update(CoordinateKind(kind).value.encode())
    h.update(struct.pack("<I", n))
    return h.hexdigest()


def save_coord_grid(grid: CoordGrid, path) -> None:
    n = grid.res
    nv = grid.num_vertices
    nf = grid.num_face_weights
    rec = np.dtype([("valid", "u1"), ("w", "<f4", (nv + nf,))])
    data = np.empty(n ** 3, dtype=rec)
    # node order x-fastest, matching the field format
    data["valid"] = grid.valid.transpose(2, 1, 0).reshape(-1).astype(np.uint8)
    vw = grid.vertex_weights.transpose(2, 1, 0, 3).reshape(-1, nv)
    if nf:
        fw = grid.face_weights.transpose(2, 1, 0, 3).reshape(-1, nf)
        data["w"] = np.concatenate([vw, fw], axis=1)
    else:
        data["w"] = vw
    with open(path, "wb") as fh:
        fh.write(_CWG_MAGIC)
        fh.write(struct.pack("<I", n))
        fh.write(struct.pack("<6d", *grid.domain.min, *grid.domain.max))
        fh.write(struct.pack("<III", _KIND_CODE[grid.kind], nv, nf))
        fh.write(data.tobytes())


def load_coord_grid(path) -> CoordGrid:
    with open(path, "rb") as fh:
        if fh.read(4) != _CWG_MAGIC:
            raise ValueError(f"{path}: not a coordinate grid cache (bad magic)")
        (n,) = struct.unpack("<I", fh.read(4))
        dom = struct.unpack("<6d", fh.read(48))
        kcode, nv, nf = struct.unpack("<III", fh.read(12))
        rec = np.dtype([("valid", "u1"), ("w", "<f4", (nv + nf,))])
        data = np.frombuffer(fh.read(rec.itemsize * n ** 3), dtype=rec)
        if len(data) != n ** 3 or fh.read(1):
            raise ValueError(f"{path}: truncated or oversized coordinate grid cache")
    valid = data["valid"].reshape(n, n, n).transpose(2, 1, 0).astype(bool)
    w = data["w"].reshape(n, n, n, nv + nf).transpose(2, 1, 0, 3)
    vw = np.ascontiguousarray(w[..., :nv])
    fw = np.ascontiguousarray(w[..., nv:]) if nf else None
    return CoordGrid(_CODE_KIND[kcode], Aabb(dom[:3], dom[3:]), n, vw, fw, valid)
