"""Dense-lattice helpers shared by the field, coords and warp modules.

A lattice of ``res`` nodes per axis spans an axis-aligned box inclusively:
node ``i`` along an axis sits at ``min + i * (max - min) / (res - 1)``.
Values live at nodes; queries interpolate trilinearly inside the box.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is present in the supported env
    _HAVE_NUMBA = False

# Corner offsets of a trilinear stencil, ordered (x, y, z) bit-wise.
CORNERS = np.array(
    [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1],
     [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]], dtype=np.int64)


def axis_coords(lo, hi, res):
    return np.linspace(float(lo), float(hi), int(res))


def node_positions(dmin, dmax, res):
    """All res^3 node positions as an (res, res, res, 3) array (or per-axis res)."""
    res = np.broadcast_to(np.asarray(res, dtype=np.int64), (3,))
    xs = axis_coords(dmin[0], dmax[0], res[0])
    ys = axis_coords(dmin[1], dmax[1], res[1])
    zs = axis_coords(dmin[2], dmax[2], res[2])
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def cell_sizes(dmin, dmax, res):
    res = np.broadcast_to(np.asarray(res, dtype=np.float64), (3,))
    return (np.asarray(dmax, dtype=np.float64) - np.asarray(dmin, dtype=np.float64)) / (res - 1.0)


def locate(dmin, dmax, res, points):
    """Map points into lattice cells.

    Returns ``(idx, frac, inside)`` where ``idx`` is the (N, 3) lower corner of
    each point's cell clipped to [0, res-2], ``frac`` the (N, 3) fractional
    offset inside the cell, and ``inside`` flags points within the box.
    Outside points still get clipped coordinates so callers can mask later.
    """
    points = np.asarray(points, dtype=np.float64)
    res = np.broadcast_to(np.asarray(res, dtype=np.int64), (3,))
    dmin = np.asarray(dmin, dtype=np.float64)
    dmax = np.asarray(dmax, dtype=np.float64)
    cs = (dmax - dmin) / (res - 1.0)
    u = (points - dmin) / cs
    inside = np.all((points >= dmin) & (points <= dmax), axis=-1)
    idx = np.floor(u).astype(np.int64)
    np.clip(idx, 0, res - 2, out=idx)
    frac = u - idx
    np.clip(frac, 0.0, 1.0, out=frac)
    return idx, frac, inside


def corner_weights(frac):
    """Trilinear weights for the 8 stencil corners, shape (N, 8)."""
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    return np.stack([
        gx * gy * gz, gx * gy * fz, gx * fy * gz, gx * fy * fz,
        fx * gy * gz, fx * gy * fz, fx * fy * gz, fx * fy * fz,
    ], axis=1)


def corner_flat_indices(res, idx):
    """Flat node indices of the 8 stencil corners, shape (N, 8)."""
    res = np.broadcast_to(np.asarray(res, dtype=np.int64), (3,))
    base = (idx[:, 0] * res[1] + idx[:, 1]) * res[2] + idx[:, 2]
    offsets = (CORNERS[:, 0] * res[1] + CORNERS[:, 1]) * res[2] + CORNERS[:, 2]
    return base[:, None] + offsets[None, :]


def trilinear_gather(values, res, idx, frac):
    """Interpolate node ``values`` at located points.

    ``values`` is (res[0]*res[1]*res[2], C) or a flat (N_nodes,) array. The
    corner loop keeps the peak temporary at one corner's gather instead of
    materialising an (N, 8, C) block.
    """
    flat = corner_flat_indices(res, idx)
    w = corner_weights(frac)
    if values.ndim == 1:
        out = np.zeros(len(idx), dtype=np.float64)
        for c in range(8):
            out += w[:, c] * values[flat[:, c]]
        return out
    out = np.zeros((len(idx), values.shape[1]), dtype=np.float64)
    for c in range(8):
        out += w[:, c, None] * values[flat[:, c]]
    return out


if _HAVE_NUMBA:
    @_njit(cache=True)
    def _trilinear3_kernel(flat_vals, res, dmin, cell, points, out):
        # flat (res^3, 3) volume sampled at raw points; locate is inlined and
        # indices are clamped so edge points stay in bounds
        n1 = res * res
        n2 = res
        hi = res - 2
        for p in range(points.shape[0]):
            ux = (points[p, 0] - dmin[0]) / cell[0]
            uy = (points[p, 1] - dmin[1]) / cell[1]
            uz = (points[p, 2] - dmin[2]) / cell[2]
            ix = min(max(int(np.floor(ux)), 0), hi)
            iy = min(max(int(np.floor(uy)), 0), hi)
            iz = min(max(int(np.floor(uz)), 0), hi)
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
            for k in range(3):
                out[p, k] = (w000 * flat_vals[base, k]
                             + w001 * flat_vals[base + 1, k]
                             + w010 * flat_vals[base + n2, k]
                             + w011 * flat_vals[base + n2 + 1, k]
                             + w100 * flat_vals[base + n1, k]
                             + w101 * flat_vals[base + n1 + 1, k]
                             + w110 * flat_vals[base + n1 + n2, k]
                             + w111 * flat_vals[base + n1 + n2 + 1, k])

    @_njit(cache=True)
    def _cell_lookup_kernel(state_flat, res, ncell, dmin, cell, points, out):
        # per-point cell state with inlined locate; out-of-domain marks 255
        for p in range(points.shape[0]):
            inside = True
            base = 0
            for a in range(3):
                u = (points[p, a] - dmin[a]) / cell[a]
                if points[p, a] < dmin[a] or u > res - 1:
                    inside = False
                    break
                i = int(np.floor(u))
                if i > res - 2:
                    i = res - 2
                if i < 0:
                    i = 0
                base = base * ncell + i
            out[p] = state_flat[base] if inside else np.uint8(255)
