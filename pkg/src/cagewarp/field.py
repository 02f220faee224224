"""Voxel radiance field: density + spherical-harmonics color on a node lattice.

The canonical scene representation: a dense grid over an axis-aligned box,
trilinearly interpolated, zero outside the box. Color is decoded per channel
as clamp(coeffs . sh_basis(d), 0, 1) so analytically baked constant colors
reproduce exactly. Fields are immutable after construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import gridutil
from .geometry import Aabb, ScalarGrid, _locked

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is present in the supported env
    _HAVE_NUMBA = False

SH_C0 = 0.28209479177387814          # 1 / (2 sqrt(pi))
SH_C1 = 0.4886025119029199           # sqrt(3 / (4 pi))
SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
         1.0925484305920792, 0.5462742152960396)

_MAGIC = b"VRF1"


class FieldFormatError(ValueError):
    pass


def eval_sh_basis(dirs, degree: int):
    """Real spherical harmonics in standard (l, m) order for unit directions.

    Accepts a single (3,) direction or an (N, 3) batch; returns (B,) or (N, B)
    with B = (degree + 1)^2.
    """
    d = np.asarray(dirs, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    if degree < 0 or degree > 2:
        raise ValueError(f"sh degree {degree} unsupported (0..2)")
    norms = np.linalg.norm(d, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("directions must be unit length")
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    cols = [np.full(len(d), SH_C0)]
    if degree >= 1:
        cols += [SH_C1 * y, SH_C1 * z, SH_C1 * x]
    if degree >= 2:
        cols += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (3.0 * z * z - 1.0),
                 SH_C2[3] * x * z, SH_C2[4] * (x * x - y * y)]
    out = np.stack(cols, axis=1)
    return out[0] if single else out


if _HAVE_NUMBA:
    @_njit(cache=True)
    def _sample_kernel(flat_den, flat_co, res, dmin, cell, degree, points, dirs, rgb, sigma):
        nb = (degree + 1) ** 2
        basis = np.empty(9)
        n1 = res[1] * res[2]
        n2 = res[2]
        c0 = SH_C0
        c1 = SH_C1
        for p in range(points.shape[0]):
            inside = True
            for a in range(3):
                if points[p, a] < dmin[a] or points[p, a] > dmin[a] + cell[a] * (res[a] - 1):
                    inside = False
                    break
            if not inside:
                rgb[p, 0] = rgb[p, 1] = rgb[p, 2] = 0.0
                sigma[p] = 0.0
                continue
            ux = (points[p, 0] - dmin[0]) / cell[0]
            uy = (points[p, 1] - dmin[1]) / cell[1]
            uz = (points[p, 2] - dmin[2]) / cell[2]
            ix = min(max(int(np.floor(ux)), 0), res[0] - 2)
            iy = min(max(int(np.floor(uy)), 0), res[1] - 2)
            iz = min(max(int(np.floor(uz)), 0), res[2] - 2)
            fx = min(max(ux - ix, 0.0), 1.0)
            fy = min(max(uy - iy, 0.0), 1.0)
            fz = min(max(uz - iz, 0.0), 1.0)
            base = ix * n1 + iy * n2 + iz
            gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
            w000 = gx * gy * gz
            w001 = gx * gy * fz
            w010 = gx * fy * gz
            w011 = gx * fy * fz
            w100 = fx * gy * gz
            w101 = fx * gy * fz
            w110 = fx * fy * gz
            w111 = fx * fy * fz
            i000 = base
            i001 = base + 1
            i010 = base + n2
            i011 = base + n2 + 1
            i100 = base + n1
            i101 = base + n1 + 1
            i110 = base + n1 + n2
            i111 = base + n1 + n2 + 1
            s = (w000 * flat_den[i000] + w001 * flat_den[i001]
                 + w010 * flat_den[i010] + w011 * flat_den[i011]
                 + w100 * flat_den[i100] + w101 * flat_den[i101]
                 + w110 * flat_den[i110] + w111 * flat_den[i111])
            sigma[p] = s if s > 0.0 else 0.0
            dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
            basis[0] = c0
            if degree >= 1:
                basis[1] = c1 * dy
                basis[2] = c1 * dz
                basis[3] = c1 * dx
            if degree >= 2:
                basis[4] = 1.0925484305920792 * dx * dy
                basis[5] = 1.0925484305920792 * dy * dz
                basis[6] = 0.31539156525252005 * (3.0 * dz * dz - 1.0)
                basis[7] = 1.0925484305920792 * dx * dz
                basis[8] = 0.5462742152960396 * (dx * dx - dy * dy)
            for ch in range(3):
                off = ch * nb
                acc = 0.0
                for b in range(nb):
                    col = off + b
                    co = (w000 * flat_co[i000, col] + w001 * flat_co[i001, col]
                          + w010 * flat_co[i010, col] + w011 * flat_co[i011, col]
                          + w100 * flat_co[i100, col] + w101 * flat_co[i101, col]
                          + w110 * flat_co[i110, col] + w111 * flat_co[i111, col])
                    acc += co * basis[b]
                rgb[p, ch] = min(max(acc, 0.0), 1.0)


@dataclass(frozen=True)
class VoxelRadianceField:
    density: np.ndarray       # (nx, ny, nz) float32, >= 0
    sh_coeffs: np.ndarray     # (nx, ny, nz, 3, (deg+1)^2) float32
    domain: Aabb
    sh_degree: int

    def __post_init__(self):
        den = np.asarray(self.density, dtype=np.float32)
        if den.ndim != 3:
            raise ValueError("density must be (nx, ny, nz)")
        if np.any(den < 0):
            raise ValueError("density must be non-negative")
        nb = (self.sh_degree + 1) ** 2
        co = np.asarray(self.sh_coeffs, dtype=np.float32)
        if co.shape != den.shape + (3, nb):
            raise ValueError(f"sh_coeffs shape {co.shape} does not match "
                             f"{den.shape + (3, nb)}")
        object.__setattr__(self, "density", _locked(den))
        object.__setattr__(self, "sh_coeffs", _locked(co))
        # flat single-precision views for the sampling hot path
        object.__setattr__(self, "_flat_density", _locked(np.ascontiguousarray(den.reshape(-1))))
        object.__setattr__(self, "_flat_coeffs",
                           _locked(np.ascontiguousarray(co.reshape(-1, 3 * nb))))

    @property
    def res(self):
        return self.density.shape

    def density_grid(self) -> ScalarGrid:
        return ScalarGrid(self.density.astype(np.float64), self.domain)

    def sample(self, x, d):
        """(rgb, sigma) at positions x looking along unit directions d.

        Outside the domain everything is ((0,0,0), 0). Accepts (3,) or (N,3).
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        if len(d) == 1 and len(x) > 1:
            d = np.broadcast_to(d, x.shape)
        nb = (self.sh_degree + 1) ** 2
        res = np.array(self.res)
        if _HAVE_NUMBA:
            pts = np.ascontiguousarray(x)
            drs = np.ascontiguousarray(d, dtype=np.float64)
            rgb = np.empty((len(pts), 3))
            sigma = np.empty(len(pts))
            cell = (self.domain.max - self.domain.min) / (res - 1.0)
            _sample_kernel(self._flat_density, self._flat_coeffs, res,
                           self.domain.min, cell, self.sh_degree, pts, drs, rgb, sigma)
            return (rgb[0], float(sigma[0])) if single else (rgb, sigma)

        idx, frac, inside = gridutil.locate(self.domain.min, self.domain.max, res, x)
        corners = gridutil.corner_flat_indices(res, idx)
        w = gridutil.corner_weights(frac).astype(np.float32)
        sigma = np.zeros(len(x), dtype=np.float32)
        co = np.zeros((len(x), 3 * nb), dtype=np.float32)
        for c in range(8):
            wc = w[:, c]
            fi = corners[:, c]
            sigma += wc * self._flat_density[fi]
            co += wc[:, None] * self._flat_coeffs[fi]
        basis = eval_sh_basis(d, self.sh_degree).astype(np.float32)
        rgb = np.einsum("ncb,nb->nc", co.reshape(len(x), 3, nb), basis).astype(np.float64)
        np.clip(rgb, 0.0, 1.0, out=rgb)
        sigma = np.maximum(sigma, 0.0).astype(np.float64)
        rgb[~inside] = 0.0
        sigma[~inside] = 0.0
        return (rgb[0], float(sigma[0])) if single else (rgb, sigma)


def sample_field(fld: VoxelRadianceField, x, d):
    return fld.sample(x, d)


# ---------------------------------------------------------------------------
# Analytic scenes

@dataclass(frozen=True)
class SpherePrimitive:
    center: tuple
    radius: float
    density: float
    rgb: tuple
    view_lobe: float = 0.0

    def contains(self, pts):
        return np.linalg.norm(pts - np.asarray(self.center), axis=-1) < self.radius


@dataclass(frozen=True)
class BoxPrimitive:
    min: tuple
    max: tuple
    density: float
    rgb: tuple
    view_lobe: float = 0.0

    def contains(self, pts):
        lo, hi = np.asarray(self.min), np.asarray(self.max)
        return np.all((pts >= lo) & (pts < hi), axis=-1)


@dataclass(frozen=True)
class AnalyticSceneSpec:
    """Primitive-soup scene description; background is empty space.

    The optional per-primitive ``view_lobe`` writes a band-1 perturbation
    along +z, so color seen from d=(0,0,1) and d=(0,0,-1) differs by exactly
    the lobe amplitude.
    """

    domain: Aabb
    primitives: tuple = field(default_factory=tuple)

    def __post_init__(self):
        for p in self.primitives:
            if p.density < 0:
                raise ValueError("primitive density must be >= 0")
            if np.any(np.asarray(p.rgb) < 0) or np.any(np.asarray(p.rgb) > 1):
                raise ValueError("primitive rgb must be in [0, 1]")
            if isinstance(p, SpherePrimitive):
                lo = np.asarray(p.center) - p.radius
                hi = np.asarray(p.center) + p.radius
            else:
                lo, hi = np.asarray(p.min), np.asarray(p.max)
            if np.any(lo < self.domain.min) or np.any(hi > self.domain.max):
                raise ValueError("primitive extends outside the field domain")

    def evaluate(self, pts):
        """Exact (rgb, sigma, lobe) of the spec at points; later primitives win."""
        pts = np.atleast_2d(pts)
        rgb = np.zeros((len(pts), 3))
        sigma = np.zeros(len(pts))
        lobe = np.zeros(len(pts))
        for p in self.primitives:
            m = p.contains(pts)
            rgb[m] = p.rgb
            sigma[m] = p.density
            lobe[m] = p.view_lobe
        return rgb, sigma, lobe

    def translated(self, t) -> "AnalyticSceneSpec":
        t = np.asarray(t, dtype=np.float64)
        prims = []
        for p in self.primitives:
            if isinstance(p, SpherePrimitive):
                prims.append(SpherePrimitive(tuple(np.asarray(p.center) + t), p.radius,
                                             p.density, p.rgb, p.view_lobe))
            else:
                prims.append(BoxPrimitive(tuple(np.asarray(p.min) + t), tuple(np.asarray(p.max) + t),
                                          p.density, p.rgb, p.view_lobe))
        return AnalyticSceneSpec(self.domain, tuple(prims))

    def rotated_z90(self) -> "AnalyticSceneSpec":
        """Rotate primitives by +90 degrees about z (axis-aligned boxes stay boxes)."""
        rot = lambda p: np.array([-p[1], p[0], p[2]])
        prims = []
        for p in self.primitives:
            if isinstance(p, SpherePrimitive):
                prims.append(SpherePrimitive(tuple(rot(np.asarray(p.center))), p.radius,
                                             p.density, p.rgb, p.view_lobe))
            else:
                a, b = rot(np.asarray(p.min)), rot(np.asarray(p.max))
                prims.append(BoxPrimitive(tuple(np.minimum(a, b)), tuple(np.maximum(a, b)),
                                          p.density, p.rgb, p.view_lobe))
        return AnalyticSceneSpec(self.domain, tuple(prims))

    def scaled(self, s: float) -> "AnalyticSceneSpec":
        prims = []
        for p in self.primitives:
            if isinstance(p, SpherePrimitive):
                prims.append(SpherePrimitive(tuple(np.asarray(p.center) * s), p.radius * s,
                                             p.density, p.rgb, p.view_lobe))
            else:
                prims.append(BoxPrimitive(tuple(np.asarray(p.min) * s), tuple(np.asarray(p.max) * s),
                                          p.density, p.rgb, p.view_lobe))
        return AnalyticSceneSpec(self.domain, tuple(prims))

    @staticmethod
    def from_json(path_or_dict) -> "AnalyticSceneSpec":
        if isinstance(path_or_dict, dict):
            doc = path_or_dict
        else:
            with open(path_or_dict, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        dom = Aabb(doc["domain"]["min"], doc["domain"]["max"])
        prims = []
        for p in doc.get("primitives", []):
            kind = p["type"]
            common = dict(density=float(p["density"]), rgb=tuple(p["rgb"]),
                          view_lobe=float(p.get("view_lobe", 0.0)))
            if kind == "sphere":
                prims.append(SpherePrimitive(tuple(p["center"]), float(p["radius"]), **common))
            elif kind == "box":
                prims.append(BoxPrimitive(tuple(p["min"]), tuple(p["max"]), **common))
            else:
                raise ValueError(f"unknown primitive type {kind!r}")
        return AnalyticSceneSpec(dom, tuple(prims))

    def to_json_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            if isinstance(p, SpherePrimitive):
                prims.append({"type": "sphere", "center": list(p.center), "radius": p.radius,
                              "density": p.density, "rgb": list(p.rgb), "view_lobe": p.view_lobe})
            else:
                prims.append({"type": "box", "min": list(p.min), "max": list(p.max),
                              "density": p.density, "rgb": list(p.rgb), "view_lobe": p.view_lobe})
        return {"domain": {"min": self.domain.min.tolist(), "max": self.domain.max.tolist()},
                "primitives": prims}


def bake_analytic(spec: AnalyticSceneSpec, res, sh_degree: int = 1) -> VoxelRadianceField:
    """Sample the spec exactly at node centers.

    Degree-0 coefficients are rgb / SH_C0 so constant regions decode to their
    exact color; a view lobe lands in the band-1 z coefficient.
    """
    res = tuple(np.broadcast_to(np.asarray(res, dtype=np.int64), (3,)))
    if sh_degree < 0 or (sh_degree == 0 and any(p.view_lobe for p in spec.primitives)):
        raise ValueError("view-dependent lobes need sh_degree >= 1")
    pts = gridutil.node_positions(spec.domain.min, spec.domain.max, res).reshape(-1, 3)
    rgb, sigma, lobe = spec.evaluate(pts)
    nb = (sh_degree + 1) ** 2
    coeffs = np.zeros((len(pts), 3, nb), dtype=np.float32)
    coeffs[:, :, 0] = (rgb / SH_C0).astype(np.float32)
    if sh_degree >= 1:
        # band-1 z basis is +SH_C1 * z: difference between +z and -z views is
        # 2 * SH_C1 * coeff, so coeff = amplitude / (2 * SH_C1)
        coeffs[:, :, 2] = (lobe / (2.0 * SH_C1))[:, None].astype(np.float32)
    return VoxelRadianceField(
        sigma.reshape(res).astype(np.float32),
        coeffs.reshape(res + (3, nb)),
        spec.domain,
        sh_degree,
    )


# ---------------------------------------------------------------------------
# Binary persistence ("VRF1", little-endian, bit-exact round trip)

def save_field(fld: VoxelRadianceField, path) -> None:
    nx, ny, nz = fld.res
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", nx, ny, nz))
        fh.write(struct.pack("<6d", *fld.domain.min, *fld.domain.max))
        fh.write(struct.pack("<I", fld.sh_degree))
        # file order is x-fastest; in-memory arrays are (nx, ny, nz) C-order
        fh.write(np.ascontiguousarray(fld.density.transpose(2, 1, 0), dtype="<f4").tobytes())
        co = fld.sh_coeffs.transpose(2, 1, 0, 3, 4)  # node order x-fastest, channel-major per node
        fh.write(np.ascontiguousarray(co, dtype="<f4").tobytes())


def load_field(path) -> VoxelRadianceField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise FieldFormatError(
                f"{path}: unsupported version (magic {magic!r}, expected {_MAGIC!r})")
        try:
            nx, ny, nz = struct.unpack("<III", fh.read(12))
            dom = struct.unpack("<6d", fh.read(48))
            (deg,) = struct.unpack("<I", fh.read(4))
        except struct.error as exc:
            raise FieldFormatError(f"{path}: truncated header") from exc
        nb = (deg + 1) ** 2
        n_nodes = nx * ny * nz
        raw = fh.read(4 * n_nodes)
        if len(raw) != 4 * n_nodes:
            raise FieldFormatError(f"{path}: truncated density block")
        density = np.frombuffer(raw, dtype="<f4").reshape(nz, ny, nx).transpose(2, 1, 0)
        raw = fh.read(4 * n_nodes * 3 * nb)
        if len(raw) != 4 * n_nodes * 3 * nb:
            raise FieldFormatError(f"{path}: truncated coefficient block")
        co = np.frombuffer(raw, dtype="<f4").reshape(nz, ny, nx, 3, nb).transpose(2, 1, 0, 3, 4)
        if fh.read(1):
            raise FieldFormatError(f"{path}: trailing bytes")
    return VoxelRadianceField(density.copy(), co.copy(), Aabb(dom[:3], dom[3:]), int(deg))
