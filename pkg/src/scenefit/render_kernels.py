"""Nearest-hit search kernels for the ray tracer.

Both paths iterate every triangle per ray in the same order with the same
float64 arithmetic, so their outputs are bit-identical; the numba path is
just the compiled version of the same brute-force loop. Rays originate at
the camera (origin 0). No reductions happen here: each ray writes its own
result, so chunking across threads cannot change any value.
"""

from __future__ import annotations

import os

import numpy as np

T_EPS = 1e-6
DET_EPS = 1e-14

try:
    if os.environ.get("SCENEFIT_NO_NUMBA"):
        raise ImportError("numba disabled via SCENEFIT_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env toggle
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True, nogil=True)
def _mesh_nearest_numba(dirs, v0, e1, e2, t_eps):
    n = dirs.shape[0]
    m = v0.shape[0]
    t_out = np.full(n, np.inf)
    idx_out = np.full(n, -1, dtype=np.int64)
    for p in range(n):
        dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
        best_t = np.inf
        best_i = -1
        for i in range(m):
            e1x, e1y, e1z = e1[i, 0], e1[i, 1], e1[i, 2]
            e2x, e2y, e2z = e2[i, 0], e2[i, 1], e2[i, 2]
            px = dy * e2z - dz * e2y
            py = dz * e2x - dx * e2z
            pz = dx * e2y - dy * e2x
            det = e1x * px + e1y * py + e1z * pz
            if abs(det) < DET_EPS:
                continue
            inv = 1.0 / det
            tx = -v0[i, 0]
            ty = -v0[i, 1]
            tz = -v0[i, 2]
            u = (tx * px + ty * py + tz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx = ty * e1z - tz * e1y
            qy = tz * e1x - tx * e1z
            qz = tx * e1y - ty * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            t = (e2x * qx + e2y * qy + e2z * qz) * inv
            if t > t_eps and t < best_t:
                best_t = t
                best_i = i
        t_out[p] = best_t
        idx_out[p] = best_i
    return t_out, idx_out


def _mesh_nearest_numpy(dirs, v0, e1, e2, t_eps):
    """Vectorized mirror of the numba loop, identical operation order."""
    n = dirs.shape[0]
    t_out = np.full(n, np.inf)
    idx_out = np.full(n, -1, dtype=np.int64)
    e1x, e1y, e1z = e1[:, 0], e1[:, 1], e1[:, 2]
    e2x, e2y, e2z = e2[:, 0], e2[:, 1], e2[:, 2]
    tx, ty, tz = -v0[:, 0], -v0[:, 1], -v0[:, 2]
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    chunk = max(1, int(4_000_000 // max(len(v0), 1)))
    for s in range(0, n, chunk):
        dx = dirs[s:s + chunk, 0, None]
        dy = dirs[s:s + chunk, 1, None]
        dz = dirs[s:s + chunk, 2, None]
        px = dy * e2z - dz * e2y
        py = dz * e2x - dx * e2z
        pz = dx * e2y - dy * e2x
        det = e1x * px + e1y * py + e1z * pz
        ok = np.abs(det) >= DET_EPS
        inv = 1.0 / np.where(ok, det, 1.0)
        u = (tx * px + ty * py + tz * pz) * inv
        ok &= (u >= 0.0) & (u <= 1.0)
        v = (dx * qx + dy * qy + dz * qz) * inv
        ok &= (v >= 0.0) & (u + v <= 1.0)
        t = (e2x * qx + e2y * qy + e2z * qz) * inv
        t = np.where(ok & (t > t_eps), t, np.inf)
        best = np.argmin(t, axis=1)
        rows = np.arange(t.shape[0])
        t_best = t[rows, best]
        t_out[s:s + chunk] = t_best
        idx_out[s:s + chunk] = np.where(np.isfinite(t_best), best, -1)
    return t_out, idx_out


def mesh_nearest_hit(dirs, vertices, faces, t_eps=T_EPS, use_numba=None):
    """Nearest triangle hit per camera ray.

    Returns (t, face_index) with t=inf / index=-1 for misses. Double-sided,
    first-minimal-index tie break, identical results on both backends.
    """
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces)
    v0 = np.ascontiguousarray(v[f[:, 0]])
    e1 = np.ascontiguousarray(v[f[:, 1]] - v[f[:, 0]])
    e2 = np.ascontiguousarray(v[f[:, 2]] - v[f[:, 0]])
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba and HAVE_NUMBA:
        return _mesh_nearest_numba(dirs, v0, e1, e2, t_eps)
    with np.errstate(all="ignore"):
        return _mesh_nearest_numpy(dirs, v0, e1, e2, t_eps)


def sphere_hit_t(dirs, center, radii, t_eps=T_EPS):
    """Smallest positive ray parameter for a scaled sphere, inf on miss."""
    dirs = np.asarray(dirs, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    dp = dirs / radii
    op = -center / radii
    a = np.einsum("ij,ij->i", dp, dp)
    b = 2.0 * dp @ op
    c = float(op @ op) - 1.0
    disc = b * b - 4.0 * a * c
    with np.errstate(invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = (-b - sq) / (2.0 * a)
        t2 = (-b + sq) / (2.0 * a)
    t = np.where(t1 > t_eps, t1, t2)
    return np.where((disc >= 0.0) & (t > t_eps), t, np.inf)
