"""Voxel grid ray traversal (Amanatides-Woo DDA) and pinhole ray bundles.

All grids are indexed ``[ix, iy, iz]`` with voxel ``(i, j, k)`` covering
``[i*vs, (i+1)*vs) x [j*vs, (j+1)*vs) x [k*vs, (k+1)*vs)`` in world metres.
Distances reported by the kernels are the ray parameter at which a voxel is
*entered*, i.e. the Euclidean distance from the origin to the voxel face.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

NO_HIT = -1


def pinhole_directions(width: int, height: int, hfov: float) -> np.ndarray:
    """Unit ray directions in the camera frame (x forward, y left, z up).

    Returns an array of shape ``(height, width, 3)``; row 0 is the top row.
    The vertical field of view follows from the aspect ratio (square pixels).
    """
    focal = (width / 2.0) / math.tan(hfov / 2.0)
    cols = (width / 2.0) - (np.arange(width) + 0.5)
    rows = (height / 2.0) - (np.arange(height) + 0.5)
    dirs = np.empty((height, width, 3))
    dirs[..., 0] = focal
    dirs[..., 1] = cols[None, :]
    dirs[..., 2] = rows[:, None]
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs


def rotate_yaw(dirs: np.ndarray, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    out = np.empty_like(dirs)
    out[..., 0] = c * dirs[..., 0] - s * dirs[..., 1]
    out[..., 1] = s * dirs[..., 0] + c * dirs[..., 1]
    out[..., 2] = dirs[..., 2]
    return out


@njit(cache=True)
def _walk(ox, oy, oz, dx, dy, dz, tlimit, stop, nx, ny, nz, vs,
          out_idx, out_t, n_out, record):
    """Traverse one ray. Returns (hit_flat, hit_t, n_out)."""
    ix = int(math.floor(ox / vs))
    iy = int(math.floor(oy / vs))
    iz = int(math.floor(oz / vs))
    if ix < 0 or iy < 0 or iz < 0 or ix >= nx or iy >= ny or iz >= nz:
        return NO_HIT, 0.0, n_out

    inf = np.inf
    if dx > 0:
        sx = 1
        tmx = ((ix + 1) * vs - ox) / dx
        tdx = vs / dx
    elif dx < 0:
        sx = -1
        tmx = (ix * vs - ox) / dx
        tdx = -vs / dx
    else:
        sx = 0
        tmx = inf
        tdx = inf
    if dy > 0:
        sy = 1
        tmy = ((iy + 1) * vs - oy) / dy
        tdy = vs / dy
    elif dy < 0:
        sy = -1
        tmy = (iy * vs - oy) / dy
        tdy = -vs / dy
    else:
        sy = 0
        tmy = inf
        tdy = inf
    if dz > 0:
        sz = 1
        tmz = ((iz + 1) * vs - oz) / dz
        tdz = vs / dz
    elif dz < 0:
        sz = -1
        tmz = (iz * vs - oz) / dz
        tdz = -vs / dz
    else:
        sz = 0
        tmz = inf
        tdz = inf

    t = 0.0
    while t <= tlimit:
        flat = (ix * ny + iy) * nz + iz
        if stop[flat]:
            return flat, t, n_out
        if record:
            out_idx[n_out] = flat
            out_t[n_out] = t
            n_out += 1
        if tmx <= tmy and tmx <= tmz:
            t = tmx
            tmx += tdx
            ix += sx
            if ix < 0 or ix >= nx:
                break
        elif tmy <= tmz:
            t = tmy
            tmy += tdy
            iy += sy
            if iy < 0 or iy >= ny:
                break
        else:
            t = tmz
            tmz += tdz
            iz += sz
            if iz < 0 or iz >= nz:
                break
    return NO_HIT, 0.0, n_out


@njit(cache=True)
def _cast(origin, dirs, tlimit, stop, nx, ny, nz, vs):
    n = dirs.shape[0]
    hit = np.full(n, NO_HIT, dtype=np.int64)
    hit_t = np.zeros(n)
    dummy_i = np.empty(0, dtype=np.int64)
    dummy_t = np.empty(0)
    for r in range(n):
        h, t, _ = _walk(origin[0], origin[1], origin[2],
                        dirs[r, 0], dirs[r, 1], dirs[r, 2], tlimit[r],
                        stop, nx, ny, nz, vs, dummy_i, dummy_t, 0, False)
        hit[r] = h
        hit_t[r] = t
    return hit, hit_t


@njit(cache=True)
def _traverse(origin, dirs, tlimit, stop, nx, ny, nz, vs):
    n = dirs.shape[0]
    cap = n * (nx + ny + nz + 3)
    out_idx = np.empty(cap, dtype=np.int64)
    out_t = np.empty(cap)
    out_ray = np.empty(cap, dtype=np.int64)
    hit = np.full(n, NO_HIT, dtype=np.int64)
    hit_t = np.zeros(n)
    m = 0
    for r in range(n):
        start = m
        h, t, m = _walk(origin[0], origin[1], origin[2],
                        dirs[r, 0], dirs[r, 1], dirs[r, 2], tlimit[r],
                        stop, nx, ny, nz, vs, out_idx, out_t, m, True)
        out_ray[start:m] = r
        hit[r] = h
        hit_t[r] = t
    return hit, hit_t, out_ray[:m], out_idx[:m], out_t[:m]


def _limits(tlimit, n):
    if np.ndim(tlimit) == 0:
        return np.full(n, float(tlimit))
    return np.ascontiguousarray(tlimit, dtype=np.float64)


def cast_rays(origin, dirs, max_dist, stop: np.ndarray, voxel_size: float):
    """First voxel flagged in ``stop`` along each ray, within ``max_dist``.

    Args:
        origin: (3,) ray origin in metres; must lie inside the grid.
        dirs: (R, 3) unit directions.
        max_dist: scalar or (R,) traversal limit in metres.
        stop: boolean grid (X, Y, Z).
        voxel_size: edge length in metres.

    Returns:
        ``(hit_flat, hit_dist)``; ``hit_flat`` is ``NO_HIT`` where nothing was hit.
    """
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    nx, ny, nz = stop.shape
    return _cast(np.asarray(origin, dtype=np.float64), dirs,
                 _limits(max_dist, len(dirs)), stop.ravel(),
                 nx, ny, nz, float(voxel_size))


def traverse_rays(origin, dirs, max_dist, stop: np.ndarray, voxel_size: float):
    """Like :func:`cast_rays` but also returns every voxel passed before the hit.

    Returns:
        ``(hit_flat, hit_dist, ray_id, voxel_flat, entry_dist)`` where the last
        three arrays list traversed (non-stopping) voxels in ray order.
    """
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    nx, ny, nz = stop.shape
    return _traverse(np.asarray(origin, dtype=np.float64), dirs,
                     _limits(max_dist, len(dirs)), stop.ravel(),
                     nx, ny, nz, float(voxel_size))
